//! Synthetic paired datasets: low-light image, noisy events and ground truth.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! 0000/gt.ppm  0000/low.ppm  0000/events.evt1
//! 0000/frames/000.ppm ...   0000/timestamps.txt
//! ```
//!
//! The frames are the ground truth translated horizontally by one pixel per
//! step so the last frame coincides with `gt.ppm`; events are simulated from
//! the stored frames and then contaminated with background activity.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    inject_noise, parse_events, serialize_events, simulate_events, EventFormat, EventStream, FrameSequence,
    SimulationParams, DEFAULT_LOG_EPS,
};
use crate::representation::{synthesize_lowlight, Image, LowLightParams};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const TIMESTAMPS_FILE: &str = "timestamps.txt";

/// Knobs of [`make_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub contrast: f64,
    /// Background activity in events per pixel per second.
    pub noise_rate: f64,
    pub lowlight: LowLightParams,
    pub frames: usize,
    pub frame_dt_us: u64,
    /// Every `val_every`-th entry (1-based) goes to the validation split.
    pub val_every: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            contrast: 0.2,
            noise_rate: 20.0,
            lowlight: LowLightParams::default(),
            frames: 3,
            frame_dt_us: 10_000,
            val_every: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub source: String,
    pub lowlight_seed: u64,
    pub noise_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub contrast: f64,
    pub log_eps: f64,
    pub noise_rate: f64,
    pub lowlight: LowLightParams,
    pub seed: u64,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(DATASET_MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn simulation(&self) -> SimulationParams {
        SimulationParams {
            contrast: self.contrast,
            log_eps: self.log_eps,
        }
    }
}

/// Translate `img` right by `shift` pixels, clamping at the left edge.
fn shift_right(img: &Image, shift: usize) -> Image {
    let (w, c) = (img.width(), img.channels());
    Image::from_fn(w, img.height(), c, |i| {
        let (pix, ch) = (i / c, i % c);
        let (x, y) = (pix % w, pix / w);
        img.get(x.saturating_sub(shift), y, ch)
    })
}

/// Frame sequence whose last frame is `gt`.
pub fn motion_frames(gt: &Image, count: usize, dt_us: u64) -> Result<FrameSequence> {
    let frames = (0..count).map(|k| shift_right(gt, count - 1 - k)).collect();
    let ts = (0..count as u64).map(|k| k * dt_us).collect();
    FrameSequence::new(frames, ts)
}

/// Clean events of `frames`, then background activity over the full span.
pub fn events_for(
    frames: &FrameSequence,
    sim: SimulationParams,
    noise_rate: f64,
    noise_seed: u64,
) -> Result<EventStream> {
    let clean = simulate_events(frames, sim)?;
    let ts = frames.timestamps();
    inject_noise(&clean, noise_rate, (ts[0], ts[ts.len() - 1]), noise_seed)
}

pub fn read_timestamps(path: &Path) -> Result<Vec<u64>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| Error::format(format!("{}:{}: bad timestamp {l:?}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// PPM files of `dir` in name order.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads a frames directory plus its timestamps file.
pub fn read_frames(frames_dir: &Path, timestamps: &Path) -> Result<FrameSequence> {
    let frames = list_ppm(frames_dir)?
        .iter()
        .map(|p| Image::read_ppm(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, read_timestamps(timestamps)?)
}

/// Writes `count` triplets built from the PPM images in `src` (cycled in
/// name order). Entry `i` uses seed `seed + i`.
pub fn make_dataset(
    src: &Path,
    count: usize,
    config: &DatasetConfig,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    let sources = list_ppm(src)?;
    if sources.is_empty() {
        return Err(Error::argument(format!("no .ppm sources in {}", src.display())));
    }
    if config.frames < 2 || config.val_every == 0 {
        return Err(Error::argument("dataset needs at least 2 frames and val_every >= 1"));
    }
    let sim = SimulationParams {
        contrast: config.contrast,
        log_eps: DEFAULT_LOG_EPS,
    };
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let src_path = &sources[i % sources.len()];
        let gt = Image::decode_ppm(&Image::read_ppm(src_path)?.encode_ppm()?)?;
        let id = format!("{i:04}");
        let dir = out.join(&id);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;

        let s = seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (lowlight_seed, noise_seed) = (rng.random(), rng.random());

        let frames = motion_frames(&gt, config.frames, config.frame_dt_us)?;
        for (k, f) in frames.frames().iter().enumerate() {
            f.write_ppm(&frames_dir.join(format!("{k:03}.ppm")))?;
        }
        let ts: String = frames.timestamps().iter().map(|t| format!("{t}\n")).collect();
        fs::write(dir.join(TIMESTAMPS_FILE), ts)?;
        gt.write_ppm(&dir.join("gt.ppm"))?;
        synthesize_lowlight(&gt, config.lowlight, lowlight_seed)?.write_ppm(&dir.join("low.ppm"))?;
        let events = events_for(&frames, sim, config.noise_rate, noise_seed)?;
        fs::write(dir.join("events.evt1"), serialize_events(&events, EventFormat::Binary))?;

        entries.push(DatasetEntry {
            id,
            source: src_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            lowlight_seed,
            noise_seed,
            split: if (i + 1) % config.val_every == 0 {
                Split::Val
            } else {
                Split::Train
            },
        });
    }
    let manifest = DatasetManifest {
        contrast: config.contrast,
        log_eps: DEFAULT_LOG_EPS,
        noise_rate: config.noise_rate,
        lowlight: config.lowlight,
        seed,
        entries,
    };
    fs::write(out.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// One loaded triplet.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub low: Image,
    pub gt: Image,
    pub events: EventStream,
}

impl Sample {
    pub fn load(dir: &Path, id: &str) -> Result<Sample> {
        let d = dir.join(id);
        Ok(Sample {
            id: id.to_string(),
            low: Image::read_ppm(&d.join("low.ppm"))?,
            gt: Image::read_ppm(&d.join("gt.ppm"))?,
            events: parse_events(&fs::read(d.join("events.evt1"))?, EventFormat::Binary)?,
        })
    }
}

/// Loads all entries of `split`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let m = DatasetManifest::read(dir)?;
    m.entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| Sample::load(dir, &e.id))
        .collect()
}

/// Procedural RGB test scene: a colour gradient with a few flat shapes and
/// a faint stripe texture, values within `[0.05, 0.95]`.
pub fn synthetic_source(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_: i32| rng.random_range(0.1..0.95));
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    struct Shape {
        disk: bool,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        col: [f64; 3],
    }
    let n_shapes = rng.random_range(2..=4);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            disk: rng.random_bool(0.5),
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            rx: rng.random_range(0.1..0.3) * width as f64,
            ry: rng.random_range(0.1..0.3) * height as f64,
            col: color(&mut rng),
        })
        .collect();
    let freq: f64 = rng.random_range(0.3..1.2);
    let mut img = Image::filled(width, height, 3, 0.0);
    let (w, h) = (width as f64, height as f64);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let s = (((fx / w - 0.5) * dx + (fy / h - 0.5) * dy) + 0.5).clamp(0.0, 1.0);
            let mut px = [0; 3].map(|_: i32| 0.0);
            for ch in 0..3 {
                px[ch] = c0[ch] * (1.0 - s) + c1[ch] * s;
            }
            for sh in &shapes {
                let (u, v) = ((fx - sh.cx) / sh.rx, (fy - sh.cy) / sh.ry);
                let inside = if sh.disk {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    px = sh.col;
                }
            }
            let tex = 0.04 * (freq * (fx + 0.5 * fy)).sin();
            let base = (y * width + x) * 3;
            for ch in 0..3 {
                img.data_mut()[base + ch] = (px[ch] + tex).clamp(0.05, 0.95);
            }
        }
    }
    img
}

/// Writes `count` procedural sources as `src_000.ppm`, ...
pub fn write_synthetic_sources(dir: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..count {
        synthetic_source(width, height, seed.wrapping_add(i as u64)).write_ppm(&dir.join(format!("src_{i:03}.ppm")))?;
    }
    Ok(())
}
