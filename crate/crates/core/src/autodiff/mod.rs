//! Minimal tensor type with reverse-mode differentiation.
//!
//! The op set is closed: matmul, broadcasting add/sub/mul, transpose,
//! softmax, l2-normalize, relu/sigmoid/tanh/exp/abs, layer-norm, depthwise
//! and pointwise convolution, reshape, concat, reductions and scaling.
//! Further differentiable kernels plug in through [`CustomOp`].

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, MANIFEST_FILE};
pub use tensor::Tensor;

/// `C×H×W` feature map to `HW×C` tokens (token `y·W + x`).
pub fn to_tokens(g: &mut Graph, x: Var) -> crate::Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(crate::Error::Argument(format!("to_tokens: expected C×H×W, got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> crate::Result<Var> {
    let c = g.shape(t)[1];
    let cm = g.transpose(t)?;
    g.reshape(cm, &[c, h, w])
}
