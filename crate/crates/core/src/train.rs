//! Next-token training with Adam. Used for base pretraining and full-model
//! fine-tuning; the LoRA path reuses the same machinery with a different
//! gradient source.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::{build_lm_graph, register_params, ParameterSet};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Training loop knobs. `steps` counts optimizer steps; each consumes
/// `grad_accum` micro-batches of `batch_size` sampled lines.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and grad_accum must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-tensor Adam state with bias correction.
pub struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One Adam update for a single named tensor.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f32) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Tokenized training lines, each truncated to the model context; lines
/// shorter than two tokens are dropped.
pub fn prepare_lines(lines: &[Vec<u32>], max_seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if lines.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let prepared: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.truncate(max_seq_len);
            l
        })
        .filter(|l| l.len() >= 2)
        .collect();
    if prepared.is_empty() {
        return Err(Error::EmptyInput("training corpus (no line has 2+ tokens)"));
    }
    Ok(prepared)
}

/// Mean next-token cross-entropy and parameter gradients for one line,
/// with every model parameter trainable.
fn line_loss_grads(
    params: &ParameterSet,
    line: &[u32],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let weights = register_params(&mut tape, params, |_| true);
    let logits = build_lm_graph(&mut tape, &weights, params.config(), line)?;
    let t_len = line.len();
    let pred = tape.slice_rows(logits, 0, t_len - 1)?;
    let loss = tape.cross_entropy(pred, &line[1..])?;
    let loss_value = f64::from(tape.value(loss).scalar_value());
    let mut grads = tape.backward(loss)?;

    let mut out = BTreeMap::new();
    for (name, node) in &weights {
        if let Some(g) = grads.take(node.id()) {
            out.insert(name.clone(), g);
        }
    }
    Ok((loss_value, out))
}

/// Accumulate `src·scale` into `dst` (allocating missing entries).
pub(crate) fn accumulate_scaled(
    dst: &mut BTreeMap<String, Tensor>,
    src: &BTreeMap<String, Tensor>,
    scale: f32,
) {
    for (name, g) in src {
        match dst.get_mut(name) {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v * scale;
                }
            }
            None => {
                let mut t = Tensor::zeros(g.shape());
                for (a, v) in t.data_mut().iter_mut().zip(g.data()) {
                    *a = v * scale;
                }
                dst.insert(name.clone(), t);
            }
        }
    }
}

/// Batch-mean loss and gradients over sampled lines. Lines run in parallel
/// but reduce in index order, so the result is thread-count independent.
pub(crate) fn batch_loss_grads<F>(
    line_fn: F,
    lines: &[Vec<u32>],
    batch: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: Fn(&[u32]) -> Result<(f64, BTreeMap<String, Tensor>)> + Sync,
{
    let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> =
        batch.par_iter().map(|&i| line_fn(&lines[i])).collect();
    let mut total_loss = 0.0f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let inv = 1.0 / batch.len() as f32;
    for r in results {
        let (loss, g) = r?;
        total_loss += loss;
        accumulate_scaled(&mut grads, &g, inv);
    }
    Ok((total_loss / batch.len() as f64, grads))
}

/// Outcome of a training run: trained weights plus the per-step loss trace
/// (average over each step's micro-batches).
pub struct TrainRun {
    pub params: ParameterSet,
    pub losses: Vec<f64>,
}

/// Train all model weights on tokenized lines.
pub fn train_lm(params: &ParameterSet, lines: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let lines = prepare_lines(lines, params.config().max_seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params.clone();
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut step_loss = 0.0f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..cfg.grad_accum {
            let batch: Vec<usize> =
                (0..cfg.batch_size).map(|_| rng.gen_range(0..lines.len())).collect();
            let (loss, g) = batch_loss_grads(|l| line_loss_grads(&params, l), &lines, &batch)?;
            step_loss += loss;
            accumulate_scaled(&mut grads, &g, 1.0 / cfg.grad_accum as f32);
        }
        adam.begin_step();
        for (name, g) in &grads {
            let p = params.get_mut(name).expect("gradient for known parameter");
            adam.update(name, p, g, cfg.learning_rate);
        }
        losses.push(step_loss / cfg.grad_accum as f64);
    }
    params.assert_finite("trained model")?;
    Ok(TrainRun { params, losses })
}
