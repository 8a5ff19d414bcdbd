use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so that gradients
    /// close to zero are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `inputs` become the first leaves of the graph handed to `f`, in order;
/// `f` must return a single-element tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let (mut g, vars) = Graph::with_leaves(ts);
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::argument(format!(
                "grad_check: function must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let (mut g, vars) = Graph::with_leaves(inputs);
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0;
    let mut worst = (0, 0);
    let mut checked = 0;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        for j in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, j);
            }
            sum_rel += rel;
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        mean_rel_error: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
        worst,
        checked,
        tol: opts.tol,
        passed: max_rel < opts.tol,
    })
}
