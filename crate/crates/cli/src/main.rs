use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evlie_core::events::{
    parse_events, serialize_events, simulate_events, EventFormat, EventStream, FrameSequence, SimulationParams,
    DEFAULT_LOG_EPS,
};
use evlie_core::gradsuite::{self, SuiteModule};
use evlie_core::pipeline::dataset::{
    list_ppm, make_dataset, read_frames, write_synthetic_sources, DatasetConfig, Split, TIMESTAMPS_FILE,
};
use evlie_core::pipeline::{enhance, train_toy, Metrics, Model, PipelineConfig};
use evlie_core::representation::{tns, voxelize_sbt, Image};
use evlie_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "evlie", version, about = "Event-guided low-light image enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize events from a directory of PPM frames.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Contrast threshold in log-intensity units.
        #[arg(long = "c", default_value_t = 0.2)]
        contrast: f64,
        #[arg(long, default_value_t = DEFAULT_LOG_EPS)]
        eps: f64,
        /// Frame spacing when the directory has no timestamps.txt.
        #[arg(long)]
        dt_us: Option<u64>,
        /// `.csv` writes CSV, anything else EVT1.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stack an event file into a B×H×W voxel saved as TNS1.
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 4)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        geometry: CsvGeometry,
    },
    /// Write synthetic PPM source images.
    MakeSources {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build (low, events, gt) triplets from source images.
    MakeDataset {
        #[arg(long)]
        src: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// JSON file with dataset settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance one low-light image with its events.
    Enhance {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the filter fields of every stage as TNS1 files.
        #[arg(long)]
        dump_fields: Option<PathBuf>,
        /// Reference image to score against.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        geometry: CsvGeometry,
    },
    /// PSNR and SSIM between two PPM images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
    },
}

#[derive(clap::Args)]
struct CsvGeometry {
    /// Sensor width for CSV event files.
    #[arg(long)]
    width: Option<u16>,
    /// Sensor height for CSV event files.
    #[arg(long)]
    height: Option<u16>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    Ops,
    Eici,
    Iaef,
    All,
}

impl From<ModuleArg> for SuiteModule {
    fn from(m: ModuleArg) -> Self {
        match m {
            ModuleArg::Ops => SuiteModule::Ops,
            ModuleArg::Eici => SuiteModule::Eici,
            ModuleArg::Iaef => SuiteModule::Iaef,
            ModuleArg::All => SuiteModule::All,
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_events(path: &Path, geometry: &CsvGeometry) -> Result<EventStream> {
    let bytes = fs::read(path)?;
    let format = if is_csv(path) {
        match (geometry.width, geometry.height) {
            (Some(width), Some(height)) => EventFormat::Csv { width, height },
            _ => {
                return Err(Error::Argument(format!(
                    "{}: CSV events need --width and --height",
                    path.display()
                )))
            }
        }
    } else {
        EventFormat::Binary
    };
    parse_events(&bytes, format)
}

fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let format = if is_csv(path) {
        EventFormat::Csv {
            width: stream.width(),
            height: stream.height(),
        }
    } else {
        EventFormat::Binary
    };
    fs::write(path, serialize_events(stream, format))?;
    Ok(())
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn simulate(input: &Path, contrast: f64, eps: f64, dt_us: Option<u64>, out: &Path) -> Result<()> {
    let ts_path = input.join(TIMESTAMPS_FILE);
    let frames = if ts_path.exists() {
        read_frames(input, &ts_path)?
    } else {
        let dt = dt_us
            .ok_or_else(|| Error::Argument(format!("{} has no {TIMESTAMPS_FILE}; pass --dt-us", input.display())))?;
        let paths = list_ppm(input)?;
        let frames = paths.iter().map(|p| Image::read_ppm(p)).collect::<Result<Vec<_>>>()?;
        let ts = (0..frames.len() as u64).map(|k| k * dt).collect();
        FrameSequence::new(frames, ts)?
    };
    let stream = simulate_events(&frames, SimulationParams { contrast, log_eps: eps })?;
    write_events(out, &stream)?;
    print_json(&json!({ "frames": frames.len(), "events": stream.len(), "polarity_sum": stream.polarity_sum() }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            input,
            contrast,
            eps,
            dt_us,
            out,
        } => simulate(&input, contrast, eps, dt_us, &out),
        Command::Voxelize {
            events,
            bins,
            out,
            geometry,
        } => {
            let stream = read_events(&events, &geometry)?;
            let voxel = voxelize_sbt(&stream, bins)?;
            fs::write(&out, tns::encode(voxel.tensor()))?;
            print_json(&json!({ "shape": voxel.tensor().shape(), "t0": voxel.t0(), "t_end": voxel.t_end() }))
        }
        Command::MakeSources {
            count,
            width,
            height,
            seed,
            out,
        } => {
            write_synthetic_sources(&out, count, width, height, seed)?;
            print_json(&json!({ "sources": count }))
        }
        Command::MakeDataset {
            src,
            count,
            seed,
            config,
            out,
        } => {
            let config = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => DatasetConfig::default(),
            };
            let manifest = make_dataset(&src, count, &config, seed, &out)?;
            let val = manifest.entries.iter().filter(|e| e.split == Split::Val).count();
            print_json(&json!({ "entries": manifest.entries.len(), "val": val }))
        }
        Command::Train { data, config, out } => {
            let config = match config {
                Some(p) => PipelineConfig::read(&p)?,
                None => PipelineConfig::default(),
            };
            let outcome = train_toy(&data, &config, &out)?;
            print_json(&json!({
                "iterations": outcome.losses.len(),
                "initial_loss": outcome.initial_loss,
                "final_loss": outcome.final_loss,
                "checkpoint": out,
            }))
        }
        Command::Enhance {
            image,
            events,
            ckpt,
            out,
            dump_fields,
            gt,
            geometry,
        } => {
            let model = Model::load(&ckpt, None)?;
            let low = Image::read_ppm(&image)?;
            let stream = read_events(&events, &geometry)?;
            let reference = gt.as_deref().map(Image::read_ppm).transpose()?;
            let result = enhance(&model, &low, &stream, reference.as_ref())?;
            result.output.write_ppm(&out)?;
            if let Some(dir) = dump_fields {
                for (k, f) in result.fields.iter().enumerate() {
                    f.dump(&dir, &format!("stage{k}_"))?;
                }
            }
            print_json(&json!({ "output": out, "timing_ms": result.timing_ms, "metrics": result.metrics }))
        }
        Command::Metrics { a, b } => {
            let m = Metrics::compute(&Image::read_ppm(&a)?, &Image::read_ppm(&b)?)?;
            print_json(&json!(m))
        }
        Command::Gradcheck { module } => {
            let cases = gradsuite::run(module.into())?;
            let mut failed = Vec::new();
            for c in &cases {
                let r = &c.report;
                println!(
                    "{} {:<28} max_rel {:.3e} mean_rel {:.3e} checked {}",
                    if r.passed { "ok  " } else { "FAIL" },
                    c.name,
                    r.max_rel_error,
                    r.mean_rel_error,
                    r.checked
                );
                if !r.passed {
                    failed.push(c.name.clone());
                }
            }
            if failed.is_empty() {
                println!("{} cases passed", cases.len());
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evlie: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
