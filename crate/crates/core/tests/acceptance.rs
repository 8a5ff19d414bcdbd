//! Acceptance run: one PASS/FAIL line per criterion, then a single verdict.
//!
//! `cargo test -p evlie-core --test acceptance -- --nocapture`

mod common;

use std::path::PathBuf;
use std::time::Instant;

use evlie_core::autodiff::{ParamStore, Tensor};
use evlie_core::eici::{eici_block, EiciParams, InjectPath, TokenMatrix};
use evlie_core::events::{
    inject_noise, simulate_events, EventRecord, EventStream, FrameSequence, Polarity, SimulationParams, DEFAULT_LOG_EPS,
};
use evlie_core::gradsuite::{self, SuiteModule};
use evlie_core::iaef::{apply_iaef, FeatureMap, FilterFields};
use evlie_core::layers::Init;
use evlie_core::pipeline::dataset::{load_split, make_dataset, motion_frames, synthetic_source, DatasetConfig, Split};
use evlie_core::pipeline::metrics::{psnr, ssim};
use evlie_core::pipeline::train::{evaluate, train, TrainSample};
use evlie_core::pipeline::{enhance, Model, ModelInput, PipelineConfig};
use evlie_core::representation::{synthesize_lowlight, voxelize_sbt, Image, LowLightParams};
use rand::Rng;

use common::*;

struct Verdict {
    failed: Vec<String>,
}

impl Verdict {
    fn report(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(format!("[{id}] {name}"));
        }
    }
}

fn voxelizer(v: &mut Verdict) {
    let start = Instant::now();
    let mut mismatches = 0;
    for seed in 0..1000 {
        let s = random_stream(seed);
        let bins = 1 + (seed as usize % 6);
        let got = voxelize_sbt(&s, bins).unwrap();
        let want = naive_voxel(&s, bins);
        if got.tensor().data().iter().zip(&want).any(|(a, b)| *a != *b as f64) {
            mismatches += 1;
        }
    }
    let s = EventStream::new(
        2,
        1,
        vec![
            EventRecord::new(0, 0, 100, Polarity::Positive),
            EventRecord::new(0, 0, 200, Polarity::Positive),
            EventRecord::new(1, 0, 300, Polarity::Negative),
        ],
    )
    .unwrap();
    let t = voxelize_sbt(&s, 2).unwrap().into_tensor();
    let clamp = t.data() == [1.0, 0.0, 1.0, -1.0];
    let secs = start.elapsed().as_secs_f64();
    v.report(
        1,
        "voxelizer oracle",
        mismatches == 0 && clamp && secs < 5.0,
        format!("1000 streams, {mismatches} mismatches, clamp case {clamp}, {secs:.2} s (limit 5 s)"),
    );
}

fn simulator(v: &mut Verdict) {
    let c = 0.2;
    let eps = 1e-3;
    let (mut failures, mut pixels) = (0usize, 0usize);
    for seed in 0..200u64 {
        let mut r = rng(10_000 + seed);
        let (w, h) = (r.random_range(1..10), r.random_range(1..10));
        let gray = |r: &mut rand_chacha::ChaCha8Rng| {
            let vals: Vec<f64> = (0..w * h).map(|_| r.random_range(0.0..1.0)).collect();
            Image::from_fn(w, h, 3, |i| vals[i / 3])
        };
        let (a, b) = (gray(&mut r), gray(&mut r));
        let frames = FrameSequence::new(vec![a.clone(), b.clone()], vec![0, 1000]).unwrap();
        let ev = simulate_events(
            &frames,
            SimulationParams {
                contrast: c,
                log_eps: eps,
            },
        )
        .unwrap();
        let mut sum = vec![0i64; w * h];
        for e in ev.records() {
            sum[e.y as usize * w + e.x as usize] += e.p.value() as i64;
        }
        for i in 0..w * h {
            let start = a.data()[3 * i].max(eps).ln();
            let target = b.data()[3 * i].max(eps).ln();
            let recon = start + c * sum[i] as f64;
            pixels += 1;
            if (recon - target).abs() >= c {
                failures += 1;
            }
        }
    }
    v.report(
        2,
        "simulator quantization bound",
        failures == 0,
        format!("200 pairs, {pixels} pixels, {failures} with |reconstructed - target| >= c"),
    );
}

fn tokens(n: usize, c: usize, seed: u64) -> TokenMatrix {
    TokenMatrix::new(Tensor::uniform(&[n, c], -2.0, 2.0, &mut rng(seed))).unwrap()
}

fn attention(v: &mut Verdict) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..100u64 {
        let mut r = rng(20_000 + seed);
        let (n, c) = (r.random_range(1..40), r.random_range(1..10));
        let mut store = ParamStore::new();
        let p = EiciParams::full(&mut store, "eici", c, Init::Scaled(r.random_range(0.5..3.0)), &mut r);
        store.get_mut(p.latent.attn.log_tau).data_mut()[0] = r.random_range(-1.0..3.0);
        let mut g = store.graph();
        let fi = g.constant(tokens(n, c, seed).into_tensor());
        let fl = g.constant(tokens(n, c, seed + 500).into_tensor());
        let fe = g.constant(tokens(n, c, seed + 900).into_tensor());
        let out = evlie_core::eici::block(&mut g, fi, fl, fe, &p).unwrap();
        for a in [out.a_e, out.a_l].into_iter().flatten() {
            let t = g.value(a);
            for row in t.data().chunks(c) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                count += 1;
            }
        }
    }

    let mut store = ParamStore::new();
    let p = EiciParams::full(&mut store, "eici", 6, Init::Scaled(1.0), &mut rng(30_000));
    let mut ids = vec![p.latent.attn.wv, p.latent.attn.wo];
    for b in [p.event, p.illum].into_iter().flatten() {
        ids.extend([b.gather.wv, b.gather.wo]);
        if let InjectPath::Reuse(i) = b.inject {
            ids.extend([i.wv, i.wo]);
        }
    }
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let (fi, fl, fe) = (tokens(24, 6, 1), tokens(24, 6, 2), tokens(24, 6, 3));
    let (_, ol, oe) = eici_block(&store, &fi, &fl, &fe, &p).unwrap();
    let exact = ol == fl && oe == fe;
    v.report(
        3,
        "attention normalization",
        worst <= 1e-6 && count > 0 && exact,
        format!(
            "100 forwards, {count} rows, max |row sum - 1| = {worst:.2e} (tol 1e-6), residual skeleton exact {exact}"
        ),
    );
}

fn iaef(v: &mut Verdict) {
    let (c, h, w) = (3, 9, 11);
    let f = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng(40_000));
    let fm = FeatureMap::new(f.clone()).unwrap();
    let mut worst = [0.0f64; 3];

    for n in [1, 3, 5] {
        let out = apply_iaef(&fm, &FilterFields::identity(n, h, w)).unwrap();
        worst[0] = worst[0].max(l_inf(out.tensor(), &f));
        let blur = FilterFields::box_blur(n, h, w);
        let out = apply_iaef(&fm, &blur).unwrap();
        worst[1] = worst[1].max(l_inf(out.tensor(), &dense_conv(&f, &blur.kv, &blur.kh, None)));
    }

    let mut fields = FilterFields::box_blur(5, h, w);
    let mut r = rng(40_001);
    fields
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = r.random_range(0.0..1.0));
    fields
        .px
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = r.random_range(-3.0..3.0));
    fields
        .py
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = r.random_range(-3.0..3.0));
    let g = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng(40_002));
    let (alpha, beta) = (0.7, -1.9);
    let mix = Tensor::from_fn(&[c, h, w], |i| alpha * f.data()[i] + beta * g.data()[i]);
    let apply = |t: &Tensor| {
        apply_iaef(&FeatureMap::new(t.clone()).unwrap(), &fields)
            .unwrap()
            .into_tensor()
    };
    let (of, og, om) = (apply(&f), apply(&g), apply(&mix));
    let lin = Tensor::from_fn(&[c, h, w], |i| alpha * of.data()[i] + beta * og.data()[i]);
    worst[2] = l_inf(&om, &lin);

    v.report(
        4,
        "IAEF identity and blur oracles",
        worst.iter().all(|&e| e <= 1e-6),
        format!(
            "delta {:.2e}, uniform vs dense conv {:.2e}, linearity {:.2e} (tol 1e-6)",
            worst[0], worst[1], worst[2]
        ),
    );
}

fn l_inf(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradients(v: &mut Verdict) {
    let start = Instant::now();
    let cases = gradsuite::run(SuiteModule::All).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| c.name.as_str())
        .collect();
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let tol_ok = cases.iter().all(|c| c.report.tol == 1e-4);
    v.report(
        5,
        "gradient suite",
        failed.is_empty() && tol_ok && secs < 60.0,
        format!(
            "{} cases, max rel error {worst:.2e} (tol 1e-4), failed {failed:?}, {secs:.1} s (limit 60 s)",
            cases.len()
        ),
    );
}

fn bundled_sources() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/sources")
}

fn training(v: &mut Verdict, data: &std::path::Path) -> Model {
    let start = Instant::now();
    let config = PipelineConfig::default();
    let train_set: Vec<TrainSample> = load_split(data, Split::Train)
        .unwrap()
        .iter()
        .map(|s| TrainSample::from_sample(s, &config).unwrap())
        .collect();
    let val = load_split(data, Split::Val).unwrap();
    let mut model = Model::new(config.clone()).unwrap();
    let initial = evaluate(&model, &train_set).unwrap();
    let losses = train(&mut model, &train_set, config.iterations, |_, _| {}).unwrap();
    let last = evaluate(&model, &train_set).unwrap();
    let (mut enhanced, mut low) = (0.0, 0.0);
    for s in &val {
        let r = enhance(&model, &s.low, &s.events, Some(&s.gt)).unwrap();
        enhanced += r.metrics.unwrap().psnr;
        low += psnr(&s.low, &s.gt).unwrap();
    }
    enhanced /= val.len() as f64;
    low /= val.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / initial;
    let iter_ratio = losses[losses.len() - 1] / losses[0];
    v.report(
        6,
        "training smoke test",
        train_set.len() + val.len() == 64 && ratio < 0.5 && iter_ratio < 0.5 && enhanced - low >= 1.0 && secs < 600.0,
        format!(
            "{} train / {} val, {} iterations, split L1 {initial:.4} -> {last:.4} (ratio {ratio:.3}), \
             batch L1 iteration 1 -> {} ratio {iter_ratio:.3} (limit 0.5), val PSNR {enhanced:.2} dB vs low {low:.2} dB \
             (gain {:.2}, need 1), {secs:.0} s (limit 600 s)",
            train_set.len(),
            val.len(),
            losses.len(),
            losses.len(),
            enhanced - low
        ),
    );
    model
}

fn denoising(v: &mut Verdict, model: &Model) {
    let (w, h) = (32, 32);
    let ds = DatasetConfig::default();
    let sim = SimulationParams {
        contrast: ds.contrast,
        log_eps: DEFAULT_LOG_EPS,
    };
    let mut closer = 0;
    let mut ratios = Vec::new();
    for k in 0..50u64 {
        let gt = synthetic_source(w, h, 70_000 + k);
        let frames = motion_frames(&gt, ds.frames, ds.frame_dt_us).unwrap();
        let clean = simulate_events(&frames, sim).unwrap();
        let ts = frames.timestamps();
        let noisy = inject_noise(&clean, ds.noise_rate, (ts[0], ts[ts.len() - 1]), 80_000 + k).unwrap();
        let low = synthesize_lowlight(&gt, LowLightParams::default(), 90_000 + k).unwrap();
        let input_clean = ModelInput::prepare(&low, &clean, &model.config).unwrap();
        let input_noisy = ModelInput::prepare(&low, &noisy, &model.config).unwrap();

        let mut g = model.store.graph();
        let (_, fl, fe_noisy) = model.extract_features(&mut g, &input_noisy).unwrap();
        let (_, _, fe_clean) = model.extract_features(&mut g, &input_clean).unwrap();
        let (filtered, _) = model.filter_stage(&mut g, &model.stages[0], fe_noisy, fl).unwrap();
        let d_filtered = l2(g.value(filtered), g.value(fe_clean));
        let d_noisy = l2(g.value(fe_noisy), g.value(fe_clean));
        ratios.push(d_filtered / d_noisy);
        if d_filtered < d_noisy {
            closer += 1;
        }
    }
    ratios.sort_by(f64::total_cmp);
    v.report(
        7,
        "denoising direction",
        closer * 100 >= 90 * 50,
        format!(
            "filtered closer to clean in {closer}/50 trials (need 45), median distance ratio {:.3}",
            ratios[25]
        ),
    );
}

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(w, h, 3, |_| r.random_range(0.0..1.0))
}

fn metrics(v: &mut Verdict) {
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for k in 0..20u64 {
        let mut r = rng(50_000 + k);
        let (w, h) = (r.random_range(11..30), r.random_range(11..30));
        let a = random_image(w, h, 51_000 + k);
        let noise = r.random_range(0.0..0.3);
        let b = Image::from_fn(w, h, 3, |i| {
            (a.data()[i] + r.random_range(-noise..=noise)).clamp(0.0, 1.0)
        });
        dp = dp.max((psnr(&a, &b).unwrap() - naive_psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs());
    }
    let a = Image::from_fn(8, 8, 3, |i| ((i * 7) % 200) as f64 / 255.0);
    let b = a.map(|x| x + 16.0 / 255.0);
    let p = psnr(&a, &b).unwrap();
    let closed = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
    let exact = format!("{p:.2}") == "24.05" && (p - closed).abs() < 1e-9;
    v.report(
        8,
        "metrics vs reference",
        dp <= 1e-6 && ds <= 1e-6 && exact,
        format!("20 pairs, max |dPSNR| {dp:.2e} dB, max |dSSIM| {ds:.2e} (tol 1e-6), offset case {p:.4} dB"),
    );
}

fn ablations(v: &mut Verdict, data: &std::path::Path) {
    let train_samples = load_split(data, Split::Train).unwrap();
    let val = load_split(data, Split::Val).unwrap();
    let mut ok = 0;
    let mut summary = Vec::new();
    for (case, config) in PipelineConfig::default().ablation_cases() {
        let run = || -> evlie_core::Result<(f64, f64)> {
            let set = train_samples
                .iter()
                .map(|s| TrainSample::from_sample(s, &config))
                .collect::<evlie_core::Result<Vec<_>>>()?;
            let mut model = Model::new(config.clone())?;
            train(&mut model, &set, 3, |_, _| {})?;
            let (mut p, mut s) = (0.0, 0.0);
            for sample in &val {
                let m = enhance(&model, &sample.low, &sample.events, Some(&sample.gt))?
                    .metrics
                    .unwrap();
                p += m.psnr;
                s += m.ssim;
            }
            Ok((p / val.len() as f64, s / val.len() as f64))
        };
        match run() {
            Ok((p, s)) if p.is_finite() && s.is_finite() => {
                ok += 1;
                summary.push(format!("case {case} {p:.2} dB / {s:.3}"));
            }
            Ok(_) => summary.push(format!("case {case} non-finite metrics")),
            Err(e) => summary.push(format!("case {case} error: {e}")),
        }
    }
    v.report(
        9,
        "ablation harness",
        ok == 9,
        format!("{ok}/9 cases ran; {}", summary.join(", ")),
    );
}

#[test]
fn acceptance() {
    let mut v = Verdict { failed: Vec::new() };
    voxelizer(&mut v);
    simulator(&mut v);
    attention(&mut v);
    iaef(&mut v);
    gradients(&mut v);

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&bundled_sources(), 64, &DatasetConfig::default(), 7, &data).unwrap();
    let model = training(&mut v, &data);
    denoising(&mut v, &model);
    metrics(&mut v);
    ablations(&mut v, &data);

    assert!(v.failed.is_empty(), "failed: {:?}", v.failed);
}
