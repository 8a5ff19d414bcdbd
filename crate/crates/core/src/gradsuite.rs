//! Finite-difference gradient suite over the op set, the EICI block and the
//! IAEF filter. Every case is a scalar projection `Σ r ⊙ f(x)` with a fixed
//! random `r`, checked with the default [`GradCheckOptions`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    from_tokens, grad_check, to_tokens, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var,
};
use crate::eici::{self, EiciParams, GatherParams, GuidanceMode, InjectParams, InjectionMode, LatentParams};
use crate::error::{Error, Result};
use crate::iaef::{self, FieldVars, IaefParams};
use crate::layers::{Init, SeparableConv};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteModule {
    Ops,
    Eici,
    Iaef,
    All,
}

impl SuiteModule {
    fn includes(self, m: SuiteModule) -> bool {
        self == SuiteModule::All || self == m
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(SuiteModule::Ops),
            "eici" => Ok(SuiteModule::Eici),
            "iaef" => Ok(SuiteModule::Iaef),
            "all" => Ok(SuiteModule::All),
            other => Err(Error::argument(format!(
                "unknown gradcheck module {other:?} (ops, eici, iaef, all)"
            ))),
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteModule::Ops => "ops",
            SuiteModule::Eici => "eici",
            SuiteModule::Iaef => "iaef",
            SuiteModule::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn project(g: &mut Graph, ys: &[Var], seed: u64) -> Result<Var> {
    let mut terms = Vec::with_capacity(ys.len());
    for (k, &y) in ys.iter().enumerate() {
        let r = g.constant(rand_t(g.shape(y), seed + k as u64));
        let m = g.mul(y, r)?;
        terms.push(g.sum(m)?);
    }
    let cat = g.concat(&terms, 0)?;
    g.sum(cat)
}

struct Runner {
    cases: Vec<SuiteCase>,
    seed: u64,
}

impl Runner {
    fn check<F>(&mut self, name: impl Into<String>, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>>,
    {
        self.seed += 1000;
        let seed = self.seed;
        let report = grad_check(
            |g, v| {
                let ys = f(g, v)?;
                project(g, &ys, seed)
            },
            inputs,
            GradCheckOptions::default(),
        )?;
        self.cases.push(SuiteCase {
            name: name.into(),
            report,
        });
        Ok(())
    }
}

fn ops(r: &mut Runner) -> Result<()> {
    let a = rand_t(&[2, 3, 4], 1);
    let b = rand_t(&[3, 4], 2);
    r.check("matmul", &[rand_t(&[3, 4], 3), rand_t(&[4, 2], 4)], |g, v| {
        Ok(vec![g.matmul(v[0], v[1])?])
    })?;
    r.check("add", &[a.clone(), b.clone()], |g, v| Ok(vec![g.add(v[0], v[1])?]))?;
    r.check("sub", &[a.clone(), b.clone()], |g, v| Ok(vec![g.sub(v[0], v[1])?]))?;
    r.check("mul", &[a.clone(), b], |g, v| Ok(vec![g.mul(v[0], v[1])?]))?;
    r.check("mul.scalar", &[a.clone(), rand_t(&[1], 5)], |g, v| {
        Ok(vec![g.mul(v[0], v[1])?])
    })?;
    r.check("transpose", std::slice::from_ref(&a), |g, v| {
        Ok(vec![g.transpose(v[0])?])
    })?;
    r.check("reshape", std::slice::from_ref(&a), |g, v| {
        Ok(vec![g.reshape(v[0], &[4, 6])?])
    })?;
    for axis in 0..3 {
        r.check(
            format!("concat.{axis}"),
            &[rand_t(&[2, 3, 2], 6), rand_t(&[2, 3, 2], 7)],
            move |g, v| Ok(vec![g.concat(&[v[0], v[1]], axis)?]),
        )?;
        r.check(format!("softmax.{axis}"), &[rand_t(&[3, 4, 2], 8)], move |g, v| {
            Ok(vec![g.softmax(v[0], axis)?])
        })?;
        r.check(format!("l2_normalize.{axis}"), &[rand_t(&[3, 4, 2], 9)], move |g, v| {
            Ok(vec![g.l2_normalize(v[0], axis, 1e-12)?])
        })?;
        r.check(format!("reduce_sum.{axis}"), std::slice::from_ref(&a), move |g, v| {
            Ok(vec![g.reduce_sum(v[0], axis)?])
        })?;
    }
    let x = rand_t(&[4, 5], 10);
    r.check("relu", std::slice::from_ref(&x), |g, v| Ok(vec![g.relu(v[0])?]))?;
    r.check("sigmoid", std::slice::from_ref(&x), |g, v| Ok(vec![g.sigmoid(v[0])?]))?;
    r.check("tanh", std::slice::from_ref(&x), |g, v| Ok(vec![g.tanh(v[0])?]))?;
    r.check("exp", std::slice::from_ref(&x), |g, v| Ok(vec![g.exp(v[0])?]))?;
    r.check("abs", std::slice::from_ref(&x), |g, v| Ok(vec![g.abs(v[0])?]))?;
    r.check("scale", std::slice::from_ref(&x), |g, v| Ok(vec![g.scale(v[0], -2.5)?]))?;
    r.check("layer_norm", &[rand_t(&[3, 6], 11)], |g, v| {
        Ok(vec![g.layer_norm(v[0], 1e-5)?])
    })?;
    r.check("sum", std::slice::from_ref(&x), |g, v| Ok(vec![g.sum(v[0])?]))?;
    r.check("mean", &[x], |g, v| Ok(vec![g.mean(v[0])?]))?;
    r.check(
        "conv2d_depthwise",
        &[rand_t(&[2, 5, 4], 12), rand_t(&[2, 3, 3], 13), rand_t(&[2], 14)],
        |g, v| Ok(vec![g.conv2d_depthwise(v[0], v[1], Some(v[2]))?]),
    )?;
    r.check(
        "conv2d_pointwise",
        &[rand_t(&[3, 4, 2], 15), rand_t(&[5, 3], 16), rand_t(&[5], 17)],
        |g, v| Ok(vec![g.conv2d_pointwise(v[0], v[1], Some(v[2]))?]),
    )?;
    r.check("tokens", &[rand_t(&[2, 3, 4], 18)], |g, v| {
        let t = to_tokens(g, v[0])?;
        let m = g.mul(t, t)?;
        Ok(vec![from_tokens(g, m, 3, 4)?])
    })?;

    let mut store = ParamStore::new();
    let conv = SeparableConv::new(&mut store, "conv", 2, 3, 3, Init::Scaled(1.0), &mut rng(19));
    let mut inputs = store.tensors().to_vec();
    inputs.push(rand_t(&[2, 5, 5], 20));
    let xi = inputs.len() - 1;
    r.check("separable_conv", &inputs, move |g, v| Ok(vec![conv.forward(g, v[xi])?]))?;
    Ok(())
}

fn with_inputs(store: &ParamStore, extra: &[Tensor]) -> (Vec<Tensor>, usize) {
    let mut inputs = store.tensors().to_vec();
    let first = inputs.len();
    inputs.extend_from_slice(extra);
    (inputs, first)
}

fn eici_cases(r: &mut Runner) -> Result<()> {
    let (n, c) = (8, 4);
    let init = Init::Scaled(1.0);

    let mut store = ParamStore::new();
    let p = GatherParams::new(&mut store, "gather", c, init, &mut rng(30));
    let (inputs, i) = with_inputs(&store, &[rand_t(&[n, c], 31), rand_t(&[n, c], 32)]);
    r.check("eici.gather", &inputs, move |g, v| {
        let (t, a) = eici::gather(g, v[i], v[i + 1], &p)?;
        Ok(vec![t, a])
    })?;

    let mut store = ParamStore::new();
    let p = InjectParams::new(&mut store, "inject", c, init, &mut rng(33));
    let (inputs, i) = with_inputs(&store, &[rand_t(&[n, c], 34), rand_t(&[c, c], 35), rand_t(&[n, c], 36)]);
    r.check("eici.inject", &inputs, move |g, v| {
        let a = g.softmax(v[i + 1], 1)?;
        Ok(vec![eici::inject(g, v[i], a, v[i + 2], &p)?])
    })?;

    let mut store = ParamStore::new();
    let p = LatentParams::new(&mut store, "latent", c, init, &mut rng(37));
    let (inputs, i) = with_inputs(&store, &[rand_t(&[n, c], 38)]);
    r.check("eici.latent", &inputs, move |g, v| Ok(vec![eici::latent(g, v[i], &p)?]))?;

    for (k, mode) in [InjectionMode::Reuse, InjectionMode::Gating, InjectionMode::CrossAttn]
        .into_iter()
        .enumerate()
    {
        let mut store = ParamStore::new();
        let p = EiciParams::new(
            &mut store,
            "eici",
            c,
            GuidanceMode::Both,
            mode,
            init,
            &mut rng(40 + k as u64),
        );
        let (inputs, i) = with_inputs(&store, &[rand_t(&[n, c], 50), rand_t(&[n, c], 51), rand_t(&[n, c], 52)]);
        let name = format!("eici.block.{}", serde_json::to_value(mode)?.as_str().unwrap_or("?"));
        r.check(name, &inputs, move |g, v| {
            let out = eici::block(g, v[i], v[i + 1], v[i + 2], &p)?;
            Ok(vec![out.fi, out.fl, out.fe])
        })?;
    }
    Ok(())
}

fn iaef_cases(r: &mut Runner) -> Result<()> {
    let xs = Tensor::new(vec![4], vec![1.3, 2.7, 0.45, 3.61])?;
    let ys = Tensor::new(vec![4], vec![2.2, 0.35, 3.8, 1.52])?;
    r.check("iaef.bilinear", &[rand_t(&[2, 5, 5], 60), xs, ys], |g, v| {
        Ok(vec![iaef::sample_points(g, v[0], v[1], v[2])?])
    })?;

    let (n, h, w) = (3, 6, 6);
    let kv = Tensor::uniform(&[n, h, w], 0.0, 1.0, &mut rng(61));
    let kh = Tensor::uniform(&[n, h, w], 0.0, 1.0, &mut rng(62));
    let wt = Tensor::uniform(&[n * n, h, w], 0.0, 1.0, &mut rng(63));
    let px = Tensor::uniform(&[n * n, h, w], -1.7, 1.7, &mut rng(64));
    let py = Tensor::uniform(&[n * n, h, w], -1.7, 1.7, &mut rng(65));
    r.check("iaef.filter", &[rand_t(&[2, h, w], 66), kv, kh, wt, px, py], |g, v| {
        let fields = FieldVars {
            kv: v[1],
            kh: v[2],
            weight: v[3],
            px: v[4],
            py: v[5],
        };
        Ok(vec![iaef::filter(g, v[0], fields)?])
    })?;

    let mut store = ParamStore::new();
    let p = IaefParams::new(
        &mut store,
        "iaef",
        2,
        3,
        iaef::DEFAULT_MAX_OFFSET,
        Init::Scaled(1.0),
        &mut rng(67),
    )?;
    let (inputs, i) = with_inputs(&store, &[rand_t(&[2, 4, 4], 68)]);
    r.check("iaef.heads", &inputs, move |g, v| {
        let (kv, kh) = iaef::extract_kernels(g, v[i], &p)?;
        let (w, px, py) = iaef::extract_weights_offsets(g, v[i], &p)?;
        Ok(vec![kv, kh, w, px, py])
    })?;

    let mut store = ParamStore::new();
    let p = IaefParams::new(
        &mut store,
        "iaef",
        1,
        3,
        iaef::DEFAULT_MAX_OFFSET,
        Init::Scaled(1.5),
        &mut rng(69),
    )?;
    let (inputs, i) = with_inputs(&store, &[rand_t(&[1, 8, 8], 70), rand_t(&[1, 8, 8], 71)]);
    r.check("iaef.extract_apply", &inputs, move |g, v| {
        Ok(vec![iaef::iaef_stage(g, v[i], v[i + 1], &p)?.0])
    })?;
    Ok(())
}

/// Run every case of `module` and return one report per case.
pub fn run(module: SuiteModule) -> Result<Vec<SuiteCase>> {
    let mut r = Runner {
        cases: Vec::new(),
        seed: 0,
    };
    if module.includes(SuiteModule::Ops) {
        ops(&mut r)?;
    }
    if module.includes(SuiteModule::Eici) {
        eici_cases(&mut r)?;
    }
    if module.includes(SuiteModule::Iaef) {
        iaef_cases(&mut r)?;
    }
    Ok(r.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_round_trip() {
        for m in [SuiteModule::Ops, SuiteModule::Eici, SuiteModule::Iaef, SuiteModule::All] {
            assert_eq!(m.to_string().parse::<SuiteModule>().unwrap(), m);
        }
        assert!(matches!("x".parse::<SuiteModule>(), Err(Error::Argument(_))));
    }

    #[test]
    fn iaef_suite_passes() {
        let cases = run(SuiteModule::Iaef).unwrap();
        assert_eq!(cases.len(), 4);
        for c in cases {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
        }
    }
}
