//! Small parameterized building blocks shared by the model stages.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// How freshly created parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with standard deviation `gain / sqrt(fan_in)`, zero biases.
    Scaled(f64),
    Zeros,
}

pub(crate) fn weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    let t = match init {
        Init::Scaled(gain) => Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
    };
    store.add(name, t)
}

pub(crate) fn zeros(store: &mut ParamStore, name: String, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::zeros(shape))
}

/// Depthwise `k×k` convolution followed by a pointwise `cin → cout` mix.
#[derive(Clone, Copy, Debug)]
pub struct SeparableConv {
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub pw_weight: ParamId,
    pub pw_bias: ParamId,
}

impl SeparableConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        SeparableConv {
            dw_kernel: weight(store, format!("{prefix}.dw_kernel"), &[cin, k, k], k * k, init, rng),
            dw_bias: zeros(store, format!("{prefix}.dw_bias"), &[cin]),
            pw_weight: weight(store, format!("{prefix}.pw_weight"), &[cout, cin], cin, init, rng),
            pw_bias: zeros(store, format!("{prefix}.pw_bias"), &[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = g.conv2d_depthwise(x, self.dw_kernel.var(), Some(self.dw_bias.var()))?;
        g.conv2d_pointwise(d, self.pw_weight.var(), Some(self.pw_bias.var()))
    }
}

/// Row-vector affine map `x·W + b` over `N×cin` tokens.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: weight(store, format!("{prefix}.weight"), &[cin, cout], cin, init, rng),
            bias: zeros(store, format!("{prefix}.bias"), &[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight.var())?;
        g.add(y, self.bias.var())
    }
}

/// Layer norm over the last dim with learnable scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps)?;
        let s = g.mul(n, self.gamma.var())?;
        g.add(s, self.beta.var())
    }
}
