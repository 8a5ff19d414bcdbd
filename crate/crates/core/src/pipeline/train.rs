use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{load_split, Split};
use super::{Model, ModelInput, PipelineConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const LOSS_LOG: &str = "loss.csv";

/// Prepared input with its `3×H×W` target.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: ModelInput,
    pub target: Tensor,
}

impl TrainSample {
    pub fn from_sample(s: &super::dataset::Sample, config: &PipelineConfig) -> Result<Self> {
        Ok(TrainSample {
            input: ModelInput::prepare(&s.low, &s.events, config)?,
            target: s.gt.to_chw(),
        })
    }
}

fn loss_and_grads(model: &Model, s: &TrainSample, with_grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut g = model.store.graph();
    let out = model.forward(&mut g, &s.input)?.output;
    let target = g.constant(s.target.clone());
    let d = g.sub(out, target)?;
    let a = g.abs(d)?;
    let loss = g.mean(a)?;
    let value = g.value(loss).data()[0];
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, model.store.collect_grads(&g, &grads)))
}

/// Mean L1 loss of `model` over `samples`.
pub fn evaluate(model: &Model, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::argument("no samples to evaluate"));
    }
    let losses = samples
        .par_iter()
        .map(|s| loss_and_grads(model, s, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Gradient descent on the mean L1 loss. Batches are drawn from a seeded
/// permutation per epoch; per-sample gradients are computed in parallel and
/// summed in sample order, so runs are bit-reproducible. Returns the batch
/// loss of every iteration (measured before its update).
pub fn train(
    model: &mut Model,
    samples: &[TrainSample],
    iterations: usize,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    let lr = model.config.learning_rate;
    let batch = match model.config.batch_size {
        0 => samples.len(),
        b => b.min(samples.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..samples.len()).collect();
            if batch < samples.len() {
                epoch.shuffle(&mut rng);
            }
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..batch).collect();
        let results = picked
            .par_iter()
            .map(|&i| loss_and_grads(model, &samples[i], true))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("iteration {}: {m}", it + 1)),
                other => other,
            })?;
        let mut loss = 0.0;
        let mut total: Vec<Tensor> = Vec::new();
        for (l, grads) in results {
            loss += l;
            if total.is_empty() {
                total = grads;
            } else {
                for (t, g) in total.iter_mut().zip(&grads) {
                    t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        let inv = 1.0 / batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("iteration {}: loss is {loss}", it + 1)));
        }
        for t in &mut total {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        model.store.sgd_step(&total, lr);
        losses.push(loss);
        on_iter(it + 1, loss);
    }
    Ok(losses)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f64>,
    /// Mean L1 over the whole training split before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains a fresh model on the train split of `data_dir`, then writes the
/// checkpoint and `loss.csv` into `out_dir`.
pub fn train_toy(data_dir: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = load_split(data_dir, Split::Train)?
        .iter()
        .map(|s| TrainSample::from_sample(s, config))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::argument(format!(
            "{} has no training entries",
            data_dir.display()
        )));
    }
    let mut model = Model::new(config.clone())?;
    let initial_loss = evaluate(&model, &samples)?;
    let losses = train(&mut model, &samples, config.iterations, |_, _| {})?;
    let final_loss = evaluate(&model, &samples)?;
    model.save(out_dir)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(out_dir.join(LOSS_LOG), csv)?;
    Ok(TrainOutcome {
        model,
        losses,
        initial_loss,
        final_loss,
    })
}
