//! Benchmarks live in `benches/`; run `cargo bench -p evlie-bench`.
