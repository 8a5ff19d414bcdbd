//! Event/illumination collaborative interaction.
//!
//! Channel (covariance) attention over `N×C` token matrices:
//!
//! ```text
//! gather(X, T):  Q = T·W_Q, K = X·W_K, V = X·W_V
//!                A = softmax_rows(Q̂ᵀ·K̂ · τ)          (C×C, Q̂/K̂ unit columns)
//!                T′ = (V·Aᵀ)·W_O + T
//! inject(T, A, X): X′ = ((T·W_V′)·A)·W_O′ + X
//! ```
//!
//! A block gathers event and illumination context into the image tokens,
//! fuses them with one post-norm transformer layer, then pushes the fused
//! tokens back into each modality through the attention matrix that the
//! matching gather produced.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{weight, Init, LayerNorm, Linear};

/// Added inside the square root when normalizing query/key columns.
pub const L2_EPS: f64 = 1e-12;

/// Tolerance for the row-stochastic check on every attention matrix.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// `N×C` token matrix; token `y·W + x` holds pixel `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Tensor);

impl TokenMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::argument(format!(
                "token matrix must be N×C, got {:?}",
                t.shape()
            )));
        }
        Ok(TokenMatrix(t))
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Row-stochastic `C×C` channel attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix(Tensor);

impl AttentionMatrix {
    /// Wraps `t` after checking it is square with non-negative rows summing
    /// to one.
    pub fn new(t: Tensor) -> Result<Self> {
        check_attention(&t)?;
        Ok(AttentionMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let c = self.0.shape()[0];
        self.0.data().chunks(c).map(|r| r.iter().sum()).collect()
    }
}

fn check_attention(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::argument(format!("attention must be C×C, got {s:?}")));
    }
    for (i, row) in t.data().chunks(s[1]).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::numeric(format!(
                "attention row {i} is not stochastic (sum {sum})"
            )));
        }
    }
    Ok(())
}

fn square(store: &mut ParamStore, name: String, c: usize, init: Init, rng: &mut (impl Rng + ?Sized)) -> ParamId {
    weight(store, name, &[c, c], c, init, rng)
}

/// Projections of one gathering path.
#[derive(Clone, Copy, Debug)]
pub struct GatherParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// `τ = exp(log_tau)`, shape `[1]`.
    pub log_tau: ParamId,
}

impl GatherParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, init: Init, rng: &mut R) -> Self {
        GatherParams {
            wq: square(store, format!("{prefix}.wq"), c, init, rng),
            wk: square(store, format!("{prefix}.wk"), c, init, rng),
            wv: square(store, format!("{prefix}.wv"), c, init, rng),
            wo: square(store, format!("{prefix}.wo"), c, init, rng),
            log_tau: store.add(format!("{prefix}.log_tau"), Tensor::zeros(&[1])),
        }
    }
}

/// Projections of one injection path.
#[derive(Clone, Copy, Debug)]
pub struct InjectParams {
    pub wv: ParamId,
    pub wo: ParamId,
}

impl InjectParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, init: Init, rng: &mut R) -> Self {
        InjectParams {
            wv: square(store, format!("{prefix}.wv"), c, init, rng),
            wo: square(store, format!("{prefix}.wo"), c, init, rng),
        }
    }
}

/// Post-norm transformer layer with channel self-attention.
#[derive(Clone, Copy, Debug)]
pub struct LatentParams {
    pub attn: GatherParams,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl LatentParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, init: Init, rng: &mut R) -> Self {
        LatentParams {
            attn: GatherParams::new(store, &format!("{prefix}.attn"), c, init, rng),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), c),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn_in"), c, 2 * c, init, rng),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn_out"), 2 * c, c, init, rng),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), c),
        }
    }
}

/// Which modalities are gathered into the image tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    None,
    EventOnly,
    IllumOnly,
    #[default]
    Both,
}

impl GuidanceMode {
    pub fn uses_event(self) -> bool {
        matches!(self, GuidanceMode::EventOnly | GuidanceMode::Both)
    }

    pub fn uses_illum(self) -> bool {
        matches!(self, GuidanceMode::IllumOnly | GuidanceMode::Both)
    }
}

/// How fused tokens flow back into a modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    None,
    /// `X + σ(F̂·W_g) ⊙ F̂`.
    Gating,
    /// Fresh cross-attention from the modality to the fused tokens.
    CrossAttn,
    /// Injection through the stored gather attention.
    #[default]
    Reuse,
}

/// Parameters of one injection path for a given [`InjectionMode`].
#[derive(Clone, Copy, Debug)]
pub enum InjectPath {
    None,
    Gating { wg: ParamId },
    CrossAttn(GatherParams),
    Reuse(InjectParams),
}

impl InjectPath {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        mode: InjectionMode,
        init: Init,
        rng: &mut R,
    ) -> Self {
        match mode {
            InjectionMode::None => InjectPath::None,
            InjectionMode::Gating => InjectPath::Gating {
                wg: square(store, format!("{prefix}.wg"), c, init, rng),
            },
            InjectionMode::CrossAttn => InjectPath::CrossAttn(GatherParams::new(store, prefix, c, init, rng)),
            InjectionMode::Reuse => InjectPath::Reuse(InjectParams::new(store, prefix, c, init, rng)),
        }
    }
}

/// One modality branch: its gather and its injection.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub gather: GatherParams,
    pub inject: InjectPath,
}

#[derive(Clone, Copy, Debug)]
pub struct EiciParams {
    pub channels: usize,
    pub event: Option<Branch>,
    pub illum: Option<Branch>,
    pub latent: LatentParams,
}

impl EiciParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        guidance: GuidanceMode,
        injection: InjectionMode,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut branch = |store: &mut ParamStore, name: &str, on: bool| {
            on.then(|| Branch {
                gather: GatherParams::new(store, &format!("{prefix}.gather_{name}"), c, init, rng),
                inject: InjectPath::new(store, &format!("{prefix}.inject_{name}"), c, injection, init, rng),
            })
        };
        let event = branch(store, "e", guidance.uses_event());
        let illum = branch(store, "l", guidance.uses_illum());
        EiciParams {
            channels: c,
            event,
            illum,
            latent: LatentParams::new(store, &format!("{prefix}.latent"), c, init, rng),
        }
    }

    /// Residual-and-reuse configuration with both branches.
    pub fn full<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, init: Init, rng: &mut R) -> Self {
        Self::new(store, prefix, c, GuidanceMode::Both, InjectionMode::Reuse, init, rng)
    }
}

fn same_tokens(g: &Graph, what: &str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::argument(format!(
            "{what}: token shapes {sa:?} and {sb:?} differ"
        )));
    }
    Ok(())
}

/// Gathers context from `x` into `t`; returns `(T′, A)`.
pub fn gather(g: &mut Graph, x: Var, t: Var, p: &GatherParams) -> Result<(Var, Var)> {
    same_tokens(g, "gather", x, t)?;
    let q = g.matmul(t, p.wq.var())?;
    let k = g.matmul(x, p.wk.var())?;
    let v = g.matmul(x, p.wv.var())?;
    let qn = g.l2_normalize(q, 0, L2_EPS)?;
    let kn = g.l2_normalize(k, 0, L2_EPS)?;
    let qt = g.transpose(qn)?;
    let logits = g.matmul(qt, kn)?;
    let tau = g.exp(p.log_tau.var())?;
    let scaled = g.mul(logits, tau)?;
    let a = g.softmax(scaled, 1)?;
    check_attention(g.value(a))?;
    let at = g.transpose(a)?;
    let mixed = g.matmul(v, at)?;
    let out = g.matmul(mixed, p.wo.var())?;
    Ok((g.add(out, t)?, a))
}

/// Pushes `tp` back into `x` through the stored attention `a`.
pub fn inject(g: &mut Graph, tp: Var, a: Var, x: Var, p: &InjectParams) -> Result<Var> {
    same_tokens(g, "inject", tp, x)?;
    let c = g.shape(x)[1];
    if g.shape(a) != [c, c] {
        return Err(Error::argument(format!(
            "inject: attention {:?} does not match {c} channels",
            g.shape(a)
        )));
    }
    let v = g.matmul(tp, p.wv.var())?;
    let mixed = g.matmul(v, a)?;
    let out = g.matmul(mixed, p.wo.var())?;
    g.add(out, x)
}

/// `LN2(h + FFN(h))` with `h = LN1(gather(F, F))`.
pub fn latent(g: &mut Graph, f: Var, p: &LatentParams) -> Result<Var> {
    let (attn, _) = gather(g, f, f, &p.attn)?;
    let h = p.norm1.forward(g, attn)?;
    let hidden = p.ffn_in.forward(g, h)?;
    let hidden = g.relu(hidden)?;
    let ff = p.ffn_out.forward(g, hidden)?;
    let res = g.add(h, ff)?;
    p.norm2.forward(g, res)
}

fn inject_path(g: &mut Graph, fused: Var, a: Var, x: Var, path: &InjectPath) -> Result<Var> {
    match path {
        InjectPath::None => Ok(x),
        InjectPath::Gating { wg } => {
            same_tokens(g, "gating", fused, x)?;
            let logits = g.matmul(fused, wg.var())?;
            let gate = g.sigmoid(logits)?;
            let gated = g.mul(gate, fused)?;
            g.add(x, gated)
        }
        InjectPath::CrossAttn(p) => Ok(gather(g, fused, x, p)?.0),
        InjectPath::Reuse(p) => inject(g, fused, a, x, p),
    }
}

/// Outputs of [`block`]; attention is present for each active branch.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub fi: Var,
    pub fl: Var,
    pub fe: Var,
    pub a_e: Option<Var>,
    pub a_l: Option<Var>,
}

/// One interaction block over image, illumination and event tokens.
pub fn block(g: &mut Graph, fi: Var, fl: Var, fe: Var, p: &EiciParams) -> Result<BlockOutput> {
    same_tokens(g, "block", fi, fl)?;
    same_tokens(g, "block", fi, fe)?;
    let mut sum = fi;
    let mut a_e = None;
    let mut a_l = None;
    if let Some(b) = &p.event {
        let (t, a) = gather(g, fe, fi, &b.gather)?;
        sum = g.add(sum, t)?;
        a_e = Some(a);
    }
    if let Some(b) = &p.illum {
        let (t, a) = gather(g, fl, fi, &b.gather)?;
        sum = g.add(sum, t)?;
        a_l = Some(a);
    }
    let fused = latent(g, sum, &p.latent)?;
    let fl_out = match (&p.illum, a_l) {
        (Some(b), Some(a)) => inject_path(g, fused, a, fl, &b.inject)?,
        _ => fl,
    };
    let fe_out = match (&p.event, a_e) {
        (Some(b), Some(a)) => inject_path(g, fused, a, fe, &b.inject)?,
        _ => fe,
    };
    Ok(BlockOutput {
        fi: fused,
        fl: fl_out,
        fe: fe_out,
        a_e,
        a_l,
    })
}

fn token_leaf(g: &mut Graph, t: &TokenMatrix) -> Var {
    g.constant(t.tensor().clone())
}

/// Value-level [`gather`] with parameters from `store`.
pub fn forward_gather(
    store: &ParamStore,
    x: &TokenMatrix,
    t: &TokenMatrix,
    p: &GatherParams,
) -> Result<(TokenMatrix, AttentionMatrix)> {
    let mut g = store.graph();
    let (xv, tv) = (token_leaf(&mut g, x), token_leaf(&mut g, t));
    let (out, a) = gather(&mut g, xv, tv, p)?;
    Ok((TokenMatrix(g.value(out).clone()), AttentionMatrix(g.value(a).clone())))
}

/// Value-level [`inject`].
pub fn backward_inject(
    store: &ParamStore,
    tp: &TokenMatrix,
    a: &AttentionMatrix,
    x: &TokenMatrix,
    p: &InjectParams,
) -> Result<TokenMatrix> {
    let mut g = store.graph();
    let tv = token_leaf(&mut g, tp);
    let av = g.constant(a.tensor().clone());
    let xv = token_leaf(&mut g, x);
    let out = inject(&mut g, tv, av, xv, p)?;
    Ok(TokenMatrix(g.value(out).clone()))
}

/// Value-level [`latent`].
pub fn latent_fuse(store: &ParamStore, f: &TokenMatrix, p: &LatentParams) -> Result<TokenMatrix> {
    let mut g = store.graph();
    let fv = token_leaf(&mut g, f);
    let out = latent(&mut g, fv, p)?;
    Ok(TokenMatrix(g.value(out).clone()))
}

/// Value-level [`block`]; returns `(F̂_i, F̂_l, F̂_e)`.
pub fn eici_block(
    store: &ParamStore,
    fi: &TokenMatrix,
    fl: &TokenMatrix,
    fe: &TokenMatrix,
    p: &EiciParams,
) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix)> {
    let mut g = store.graph();
    let (a, b, c) = (token_leaf(&mut g, fi), token_leaf(&mut g, fl), token_leaf(&mut g, fe));
    let out = block(&mut g, a, b, c, p)?;
    Ok((
        TokenMatrix(g.value(out.fi).clone()),
        TokenMatrix(g.value(out.fl).clone()),
        TokenMatrix(g.value(out.fe).clone()),
    ))
}
