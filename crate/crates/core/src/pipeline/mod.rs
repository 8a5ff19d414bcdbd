//! End-to-end enhancement model: feature stubs, iterated filter/interaction
//! stages and a 1×1 reconstruction head, plus toy training, metrics and
//! synthetic datasets.
//!
//! Per stage the event feature is filtered (guided by the illumination
//! feature) and the three features then pass through one interaction block.
//! The head maps the final image feature to RGB through a sigmoid.

pub mod dataset;
pub mod metrics;
pub mod train;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{from_tokens, to_tokens, Graph, ParamId, ParamStore, Tensor, Var};
use crate::eici::{self, EiciParams, LatentParams};
pub use crate::eici::{GuidanceMode, InjectionMode};
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::iaef::{self, FieldVars, FilterFields, IaefParams};
use crate::layers::{weight, zeros, Init, SeparableConv};
use crate::representation::{illumination_prior, voxelize_sbt, Image};

pub use metrics::{psnr, ssim, Metrics, PSNR_CAP};
pub use train::{evaluate, train, train_toy, TrainOutcome, TrainSample, LOSS_LOG};

/// Event-feature treatment inside each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    None,
    /// Plain 3×3 (depthwise-separable) convolution.
    Conv,
    /// One channel-attention transformer layer.
    Transformer,
    #[default]
    Iaef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub channels: usize,
    pub blocks: usize,
    pub bins: usize,
    pub taps: usize,
    pub max_offset: f64,
    pub guidance: GuidanceMode,
    pub filter: FilterMode,
    pub injection: InjectionMode,
    pub seed: u64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Samples per gradient step; 0 uses the whole training split.
    pub batch_size: usize,
    /// Multiplier applied to raw voxel counts.
    pub voxel_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            channels: 16,
            blocks: 2,
            bins: 4,
            taps: iaef::DEFAULT_TAPS,
            max_offset: iaef::DEFAULT_MAX_OFFSET,
            guidance: GuidanceMode::Both,
            filter: FilterMode::Iaef,
            injection: InjectionMode::Reuse,
            seed: 0,
            learning_rate: 5e-2,
            iterations: 200,
            batch_size: 8,
            voxel_scale: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("bins", self.bins),
            ("taps", self.taps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.taps.is_multiple_of(2) {
            return Err(Error::Config(format!("taps must be odd, got {}", self.taps)));
        }
        for (name, v) in [
            ("max_offset", self.max_offset),
            ("learning_rate", self.learning_rate),
            ("voxel_scale", self.voxel_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The nine single-axis ablation variants of this configuration.
    pub fn ablation_cases(&self) -> Vec<(usize, PipelineConfig)> {
        let with = |f: &dyn Fn(&mut PipelineConfig)| {
            let mut c = self.clone();
            f(&mut c);
            c
        };
        vec![
            (0, with(&|c| c.guidance = GuidanceMode::None)),
            (1, with(&|c| c.guidance = GuidanceMode::EventOnly)),
            (2, with(&|c| c.guidance = GuidanceMode::IllumOnly)),
            (3, with(&|c| c.filter = FilterMode::None)),
            (4, with(&|c| c.filter = FilterMode::Conv)),
            (5, with(&|c| c.filter = FilterMode::Transformer)),
            (6, with(&|c| c.injection = InjectionMode::None)),
            (7, with(&|c| c.injection = InjectionMode::Gating)),
            (8, with(&|c| c.injection = InjectionMode::CrossAttn)),
        ]
    }
}

/// Two 3×3 depthwise-separable layers with relu.
#[derive(Clone, Copy, Debug)]
pub struct Stub {
    pub first: SeparableConv,
    pub second: SeparableConv,
}

impl Stub {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        // relu layers, He gain
        let init = Init::Scaled(std::f64::consts::SQRT_2);
        Stub {
            first: SeparableConv::new(store, &format!("{prefix}.0"), cin, c, 3, init, rng),
            second: SeparableConv::new(store, &format!("{prefix}.1"), c, c, 3, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.second.forward(g, h)?;
        g.relu(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FilterParams {
    None,
    Conv(SeparableConv),
    Transformer(LatentParams),
    Iaef(IaefParams),
}

#[derive(Clone, Copy, Debug)]
pub struct Stage {
    pub filter: FilterParams,
    pub eici: EiciParams,
}

/// Network inputs on one sample, all `·×H×W`.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub image: Tensor,
    pub voxel: Tensor,
    pub prior: Tensor,
}

impl ModelInput {
    /// Voxelizes `events`, scales the counts and derives the illumination
    /// prior of `low`.
    pub fn prepare(low: &Image, events: &EventStream, config: &PipelineConfig) -> Result<Self> {
        if low.channels() != 3 {
            return Err(Error::argument(format!(
                "expected an RGB image, got {} channels",
                low.channels()
            )));
        }
        if events.width() as usize != low.width() || events.height() as usize != low.height() {
            return Err(Error::argument(format!(
                "events are {}x{} but the image is {}x{}",
                events.width(),
                events.height(),
                low.width(),
                low.height()
            )));
        }
        let voxel = voxelize_sbt(events, config.bins)?.into_tensor();
        Ok(ModelInput {
            image: low.to_chw(),
            voxel: voxel.map(|v| v * config.voxel_scale),
            prior: illumination_prior(low).to_image().to_chw(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: Var,
    pub fields: Vec<FieldVars>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: PipelineConfig,
    pub store: ParamStore,
    pub image_stub: Stub,
    pub voxel_stub: Stub,
    pub prior_stub: Stub,
    pub stages: Vec<Stage>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let image_stub = Stub::new(&mut store, "stub.image", 3, c, &mut rng);
        let voxel_stub = Stub::new(&mut store, "stub.voxel", config.bins, c, &mut rng);
        let prior_stub = Stub::new(&mut store, "stub.prior", 1, c, &mut rng);
        let mut stages = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let prefix = format!("stage{b}");
            let filter = match config.filter {
                FilterMode::None => FilterParams::None,
                FilterMode::Conv => FilterParams::Conv(SeparableConv::new(
                    &mut store,
                    &format!("{prefix}.conv"),
                    c,
                    c,
                    3,
                    Init::Scaled(1.0),
                    &mut rng,
                )),
                FilterMode::Transformer => FilterParams::Transformer(LatentParams::new(
                    &mut store,
                    &format!("{prefix}.tb"),
                    c,
                    Init::Scaled(1.0),
                    &mut rng,
                )),
                FilterMode::Iaef => {
                    let p = IaefParams::new(
                        &mut store,
                        &format!("{prefix}.iaef"),
                        c,
                        config.taps,
                        config.max_offset,
                        Init::Scaled(1.0),
                        &mut rng,
                    )?;
                    // start from unshifted taps
                    for head in [p.px_head, p.py_head] {
                        store.get_mut(head.pw_weight).data_mut().fill(0.0);
                    }
                    FilterParams::Iaef(p)
                }
            };
            let eici = EiciParams::new(
                &mut store,
                &format!("{prefix}.eici"),
                c,
                config.guidance,
                config.injection,
                Init::Scaled(1.0),
                &mut rng,
            );
            stages.push(Stage { filter, eici });
        }
        let head_weight = weight(
            &mut store,
            "head.weight".into(),
            &[3, c],
            c,
            Init::Scaled(1.0),
            &mut rng,
        );
        let head_bias = zeros(&mut store, "head.bias".into(), &[3]);
        Ok(Model {
            config,
            store,
            image_stub,
            voxel_stub,
            prior_stub,
            stages,
            head_weight,
            head_bias,
        })
    }

    /// Rebuilds the model described by a checkpoint and loads its values.
    /// When `config` is given it must match the checkpoint's parameters.
    pub fn load(dir: &Path, config: Option<PipelineConfig>) -> Result<Self> {
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join(crate::autodiff::MANIFEST_FILE))?)?;
        let config = match config {
            Some(c) => c,
            None => {
                let extra = manifest
                    .get("extra")
                    .and_then(|e| e.get("config"))
                    .ok_or_else(|| Error::Config(format!("{} records no pipeline config", dir.display())))?;
                serde_json::from_value(extra.clone()).map_err(|e| Error::Config(e.to_string()))?
            }
        };
        let mut model = Model::new(config)?;
        model.store.load_dir(dir)?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store
            .save_dir(dir, Some(serde_json::json!({ "config": self.config })))
    }

    /// Image, illumination and event features, each `C×H×W`.
    pub fn extract_features(&self, g: &mut Graph, input: &ModelInput) -> Result<(Var, Var, Var)> {
        let (h, w) = (input.height(), input.width());
        for (name, t, ch) in [("voxel", &input.voxel, self.config.bins), ("prior", &input.prior, 1)] {
            if t.shape() != [ch, h, w] {
                return Err(Error::argument(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    [ch, h, w]
                )));
            }
        }
        let image = g.constant(input.image.clone());
        let voxel = g.constant(input.voxel.clone());
        let prior = g.constant(input.prior.clone());
        let fi = self.image_stub.forward(g, image)?;
        let fl = self.prior_stub.forward(g, prior)?;
        let fe = self.voxel_stub.forward(g, voxel)?;
        Ok((fi, fl, fe))
    }

    /// Applies one stage's event filter to `fe`.
    pub fn filter_stage(&self, g: &mut Graph, stage: &Stage, fe: Var, fl: Var) -> Result<(Var, Option<FieldVars>)> {
        let (h, w) = (g.shape(fe)[1], g.shape(fe)[2]);
        Ok(match &stage.filter {
            FilterParams::None => (fe, None),
            FilterParams::Conv(conv) => (conv.forward(g, fe)?, None),
            FilterParams::Transformer(p) => {
                let t = to_tokens(g, fe)?;
                let t = eici::latent(g, t, p)?;
                (from_tokens(g, t, h, w)?, None)
            }
            FilterParams::Iaef(p) => {
                let (out, fields) = iaef::iaef_stage(g, fe, fl, p)?;
                (out, Some(fields))
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<ForwardPass> {
        let (h, w) = (input.height(), input.width());
        let (fi, fl, fe) = self.extract_features(g, input)?;
        let (mut ti, mut tl) = (to_tokens(g, fi)?, to_tokens(g, fl)?);
        let mut fe = fe;
        let mut fields = Vec::new();
        for stage in &self.stages {
            let fl_map = from_tokens(g, tl, h, w)?;
            let (filtered, f) = self.filter_stage(g, stage, fe, fl_map)?;
            fields.extend(f);
            let te = to_tokens(g, filtered)?;
            let out = eici::block(g, ti, tl, te, &stage.eici)?;
            ti = out.fi;
            tl = out.fl;
            fe = from_tokens(g, out.fe, h, w)?;
        }
        let fi = from_tokens(g, ti, h, w)?;
        let rgb = g.conv2d_pointwise(fi, self.head_weight.var(), Some(self.head_bias.var()))?;
        Ok(ForwardPass {
            output: g.sigmoid(rgb)?,
            fields,
        })
    }

    /// Output image and per-stage filter fields for one input.
    pub fn predict(&self, input: &ModelInput) -> Result<(Image, Vec<FilterFields>)> {
        let mut g = self.store.graph();
        let fwd = self.forward(&mut g, input)?;
        let fields = fwd.fields.iter().map(|f| f.values(&g)).collect();
        Ok((Image::from_chw(g.value(fwd.output))?, fields))
    }
}

#[derive(Clone, Debug)]
pub struct EnhancementResult {
    pub output: Image,
    /// Against the supplied reference, if any.
    pub metrics: Option<Metrics>,
    pub timing_ms: f64,
    pub fields: Vec<FilterFields>,
}

/// Enhances `low` with its event stream; scores against `reference` when given.
pub fn enhance(
    model: &Model,
    low: &Image,
    events: &EventStream,
    reference: Option<&Image>,
) -> Result<EnhancementResult> {
    let start = Instant::now();
    let input = ModelInput::prepare(low, events, &model.config)?;
    let (output, fields) = model.predict(&input)?;
    let timing_ms = start.elapsed().as_secs_f64() * 1e3;
    let metrics = reference.map(|r| Metrics::compute(&output, r)).transpose()?;
    Ok(EnhancementResult {
        output,
        metrics,
        timing_ms,
        fields,
    })
}

#[cfg(test)]
mod tests;
