//! Illumination-aware event filter.
//!
//! Two separable 1-D kernels `K_v`, `K_h` (`n×H×W`) are predicted from the
//! illumination feature; tap weights `W` and sampling offsets `P_x`, `P_y`
//! (`n²×H×W`) from the event feature. The filtered event feature is
//!
//! ```text
//! out[c, y, x] = Σ_{a,b} W[j] · K_v[a] · K_h[b] · S(F_e[c], x + b − r + P_x[j], y + a − r + P_y[j])
//! ```
//!
//! with `j = a·n + b`, `r = ⌊n/2⌋` and `S` zero-padded bilinear sampling.
//! `x` is the column (paired with `P_x`) and `y` the row throughout.

mod sampling;

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Init, SeparableConv};
use crate::representation::tns;

use sampling::{AdaptiveFilterOp, BilinearSampleOp, FilterInputs};

pub const DEFAULT_TAPS: usize = 5;
pub const DEFAULT_MAX_OFFSET: f64 = 4.0;

/// `C×H×W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::argument(format!(
                "feature map must be C×H×W, got {:?}",
                t.shape()
            )));
        }
        Ok(FeatureMap(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-pixel filter description; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterFields {
    pub kv: Tensor,
    pub kh: Tensor,
    pub weight: Tensor,
    pub px: Tensor,
    pub py: Tensor,
}

impl FilterFields {
    pub fn taps(&self) -> usize {
        self.kv.shape()[0]
    }

    /// Check shapes against an `H×W` geometry.
    pub fn check_geometry(&self, h: usize, w: usize) -> Result<()> {
        check_field_shapes(
            self.kv.shape(),
            self.kh.shape(),
            self.weight.shape(),
            self.px.shape(),
            self.py.shape(),
            h,
            w,
        )
    }

    /// Fields of a filter that returns its input unchanged.
    pub fn identity(taps: usize, h: usize, w: usize) -> Self {
        let centre = taps / 2;
        let delta = |n: usize| Tensor::from_fn(&[n, h, w], |i| if i / (h * w) == centre { 1.0 } else { 0.0 });
        let nn = taps * taps;
        let centre_tap = centre * taps + centre;
        FilterFields {
            kv: delta(taps),
            kh: delta(taps),
            weight: Tensor::from_fn(&[nn, h, w], |i| if i / (h * w) == centre_tap { 1.0 } else { 0.0 }),
            px: Tensor::zeros(&[nn, h, w]),
            py: Tensor::zeros(&[nn, h, w]),
        }
    }

    /// Uniform separable box filter (`1/n` taps, unit weights, no offsets).
    pub fn box_blur(taps: usize, h: usize, w: usize) -> Self {
        let nn = taps * taps;
        FilterFields {
            kv: Tensor::full(&[taps, h, w], 1.0 / taps as f64),
            kh: Tensor::full(&[taps, h, w], 1.0 / taps as f64),
            weight: Tensor::ones(&[nn, h, w]),
            px: Tensor::zeros(&[nn, h, w]),
            py: Tensor::zeros(&[nn, h, w]),
        }
    }

    /// Write `kv`, `kh`, `weight`, `px`, `py` as TNS1 files into `dir`.
    pub fn dump(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in [
            ("kv", &self.kv),
            ("kh", &self.kh),
            ("weight", &self.weight),
            ("px", &self.px),
            ("py", &self.py),
        ] {
            std::fs::write(dir.join(format!("{prefix}{name}.tns1")), tns::encode(t))?;
        }
        Ok(())
    }
}

fn check_field_shapes(
    kv: &[usize],
    kh: &[usize],
    weight: &[usize],
    px: &[usize],
    py: &[usize],
    h: usize,
    w: usize,
) -> Result<()> {
    let n = kv.first().copied().unwrap_or(0);
    if n == 0 || n % 2 == 0 {
        return Err(Error::argument(format!("tap count must be odd, got shape {kv:?}")));
    }
    let expect_k = [n, h, w];
    let expect_w = [n * n, h, w];
    for (name, s, e) in [
        ("K_v", kv, &expect_k),
        ("K_h", kh, &expect_k),
        ("W", weight, &expect_w),
        ("P_x", px, &expect_w),
        ("P_y", py, &expect_w),
    ] {
        if s != e {
            return Err(Error::argument(format!("{name} has shape {s:?}, expected {e:?}")));
        }
    }
    Ok(())
}

/// Zero-padded bilinear read of every channel of `feat` at `(x, y)`.
pub fn bilinear_sample(feat: &FeatureMap, x: f64, y: f64) -> Result<Vec<f64>> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::numeric(format!(
            "bilinear_sample: non-finite coordinate ({x}, {y})"
        )));
    }
    let (c, h, w) = (feat.channels(), feat.height(), feat.width());
    let d = feat.tensor().data();
    Ok((0..c)
        .map(|ch| sampling::sample(&d[ch * h * w..(ch + 1) * h * w], h, w, x, y))
        .collect())
}

/// Differentiable sampling of a `C×H×W` map at points `(xs[k], ys[k])`,
/// returning `C×M`.
pub fn sample_points(g: &mut Graph, feat: Var, xs: Var, ys: Var) -> Result<Var> {
    let (sf, sx, sy) = (g.shape(feat), g.shape(xs), g.shape(ys));
    if sf.len() != 3 || sx.len() != 1 || sx != sy {
        return Err(Error::argument(format!(
            "sample_points: feature {sf:?}, xs {sx:?}, ys {sy:?}"
        )));
    }
    if !g.value(xs).is_finite() || !g.value(ys).is_finite() {
        return Err(Error::numeric("sample_points: non-finite coordinate"));
    }
    let out = sampling::bilinear_forward(g.value(feat), g.value(xs).data(), g.value(ys).data());
    g.custom(Box::new(BilinearSampleOp), &[feat, xs, ys], out)
}

/// Graph handles of predicted filter fields.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub kv: Var,
    pub kh: Var,
    pub weight: Var,
    pub px: Var,
    pub py: Var,
}

impl FieldVars {
    pub fn values(&self, g: &Graph) -> FilterFields {
        FilterFields {
            kv: g.value(self.kv).clone(),
            kh: g.value(self.kh).clone(),
            weight: g.value(self.weight).clone(),
            px: g.value(self.px).clone(),
            py: g.value(self.py).clone(),
        }
    }
}

/// Differentiable filter application for fields already on the graph.
pub fn filter(g: &mut Graph, fe: Var, fields: FieldVars) -> Result<Var> {
    let s = g.shape(fe).to_vec();
    if s.len() != 3 {
        return Err(Error::argument(format!("event feature must be C×H×W, got {s:?}")));
    }
    check_field_shapes(
        g.shape(fields.kv),
        g.shape(fields.kh),
        g.shape(fields.weight),
        g.shape(fields.px),
        g.shape(fields.py),
        s[1],
        s[2],
    )?;
    let out = sampling::filter_forward(&FilterInputs {
        feat: g.value(fe),
        kv: g.value(fields.kv),
        kh: g.value(fields.kh),
        weight: g.value(fields.weight),
        px: g.value(fields.px),
        py: g.value(fields.py),
    });
    g.custom(
        Box::new(AdaptiveFilterOp),
        &[fe, fields.kv, fields.kh, fields.weight, fields.px, fields.py],
        out,
    )
}

/// Non-differentiable filter application.
pub fn apply_iaef(fe: &FeatureMap, fields: &FilterFields) -> Result<FeatureMap> {
    fields.check_geometry(fe.height(), fe.width())?;
    FeatureMap::new(sampling::filter_forward(&FilterInputs {
        feat: fe.tensor(),
        kv: &fields.kv,
        kh: &fields.kh,
        weight: &fields.weight,
        px: &fields.px,
        py: &fields.py,
    }))
}

/// Prediction heads of one filter stage.
#[derive(Clone, Copy, Debug)]
pub struct IaefParams {
    pub kv_head: SeparableConv,
    pub kh_head: SeparableConv,
    pub weight_head: SeparableConv,
    pub px_head: SeparableConv,
    pub py_head: SeparableConv,
    pub channels: usize,
    pub taps: usize,
    pub max_offset: f64,
}

impl IaefParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        taps: usize,
        max_offset: f64,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if taps == 0 || taps.is_multiple_of(2) {
            return Err(Error::argument(format!("tap count must be odd, got {taps}")));
        }
        if !(max_offset >= 0.0) {
            return Err(Error::argument(format!("offset radius must be >= 0, got {max_offset}")));
        }
        let nn = taps * taps;
        Ok(IaefParams {
            kv_head: SeparableConv::new(store, &format!("{prefix}.kv"), channels, taps, 3, init, rng),
            kh_head: SeparableConv::new(store, &format!("{prefix}.kh"), channels, taps, 3, init, rng),
            weight_head: SeparableConv::new(store, &format!("{prefix}.weight"), channels, nn, 3, init, rng),
            px_head: SeparableConv::new(store, &format!("{prefix}.px"), channels, nn, 3, init, rng),
            py_head: SeparableConv::new(store, &format!("{prefix}.py"), channels, nn, 3, init, rng),
            channels,
            taps,
            max_offset,
        })
    }

    fn check_input(&self, g: &Graph, x: Var, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::argument(format!(
                "{what} must be {}×H×W, got {s:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Separable kernels from the illumination feature, softmax-normalized over taps.
pub fn extract_kernels(g: &mut Graph, fl: Var, params: &IaefParams) -> Result<(Var, Var)> {
    params.check_input(g, fl, "illumination feature")?;
    let kv = params.kv_head.forward(g, fl)?;
    let kv = g.softmax(kv, 0)?;
    let kh = params.kh_head.forward(g, fl)?;
    let kh = g.softmax(kh, 0)?;
    Ok((kv, kh))
}

/// Sigmoid tap weights and `max_offset·tanh` offsets from the event feature.
pub fn extract_weights_offsets(g: &mut Graph, fe: Var, params: &IaefParams) -> Result<(Var, Var, Var)> {
    params.check_input(g, fe, "event feature")?;
    let w = params.weight_head.forward(g, fe)?;
    let w = g.sigmoid(w)?;
    let px = params.px_head.forward(g, fe)?;
    let px = g.tanh(px)?;
    let px = g.scale(px, params.max_offset)?;
    let py = params.py_head.forward(g, fe)?;
    let py = g.tanh(py)?;
    let py = g.scale(py, params.max_offset)?;
    Ok((w, px, py))
}

/// Predict fields from `(guide, fe)` and filter `fe`. `guide` is normally the
/// illumination feature.
pub fn iaef_stage(g: &mut Graph, fe: Var, guide: Var, params: &IaefParams) -> Result<(Var, FieldVars)> {
    let (kv, kh) = extract_kernels(g, guide, params)?;
    let (weight, px, py) = extract_weights_offsets(g, fe, params)?;
    let fields = FieldVars { kv, kh, weight, px, py };
    Ok((filter(g, fe, fields)?, fields))
}
