//! Task vectors: biased fine-tuning (full or low-rank), extraction of the
//! weight-space delta, and negated λ-scaled application.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{check_structure, decode_container, encode_container, ContainerKind};
use crate::model::{build_lm_graph, register_params, ModelConfig, ParameterSet, WeightNode};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};
use crate::train::{accumulate_scaled, batch_loss_grads, prepare_lines, Adam, TrainConfig};
use crate::{Error, Result};

/// Per-parameter weight deltas: fine-tuned minus pre-trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    config: ModelConfig,
    deltas: BTreeMap<String, Tensor>,
}

impl TaskVector {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.deltas.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.deltas.iter()
    }

    /// Elementwise scaling; `scale(-1)` is the negation.
    pub fn scale(&self, c: f32) -> TaskVector {
        let deltas = self
            .deltas
            .iter()
            .map(|(n, t)| (n.clone(), tensor::scale(t, c)))
            .collect();
        TaskVector { config: self.config.clone(), deltas }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_container(&self.config, ContainerKind::TaskVector, &self.deltas)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TaskVector> {
        let (config, kind, deltas) = decode_container(bytes)?;
        if kind != ContainerKind::TaskVector {
            return Err(Error::CheckpointFormat(
                "expected a task-vector container, found a model checkpoint".into(),
            ));
        }
        check_structure(&config, &deltas)?;
        Ok(TaskVector { config, deltas })
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<TaskVector> {
        TaskVector::from_bytes(&fs::read(path)?)
    }
}

fn check_same_structure(pre: &ParameterSet, ft: &ParameterSet) -> Result<()> {
    if pre.config() != ft.config() {
        return Err(Error::StructureMismatch(
            "pre-trained and fine-tuned configs differ".into(),
        ));
    }
    Ok(())
}

/// τ = θ_ft − θ_pre, element-wise.
pub fn compute_task_vector(pre: &ParameterSet, ft: &ParameterSet) -> Result<TaskVector> {
    check_same_structure(pre, ft)?;
    let mut deltas = BTreeMap::new();
    for ((name, pre_t), (_, ft_t)) in pre.iter().zip(ft.iter()) {
        let data: Vec<f32> = ft_t
            .data()
            .iter()
            .zip(pre_t.data())
            .map(|(f, p)| f - p)
            .collect();
        deltas.insert(name.clone(), Tensor::new(pre_t.shape().to_vec(), data)?);
    }
    Ok(TaskVector { config: pre.config().clone(), deltas })
}

/// θ_new = θ_pre + s·λ·τ with s = −1 when negating. λ = 0 returns the
/// pre-trained weights bit-identically.
pub fn apply_task_vector(
    pre: &ParameterSet,
    tv: &TaskVector,
    lambda: f32,
    negate: bool,
) -> Result<ParameterSet> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be ≥ 0")));
    }
    if pre.config() != &tv.config {
        return Err(Error::StructureMismatch(
            "task vector does not match the pre-trained config".into(),
        ));
    }
    if lambda == 0.0 {
        return Ok(pre.clone());
    }
    let sign = if negate { -1.0f32 } else { 1.0 };
    let mut out = pre.clone();
    for (name, t) in out.iter_mut() {
        let delta = tv
            .deltas
            .get(name)
            .ok_or_else(|| Error::StructureMismatch(format!("task vector missing {name}")))?;
        for (p, d) in t.data_mut().iter_mut().zip(delta.data()) {
            *p += sign * lambda * d;
        }
    }
    out.assert_finite("task-vector application")?;
    Ok(out)
}

/// Default λ sweep grid: 0 to 1 in increments of 0.2.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Reference debias setting: negated vector at λ = 0.6.
pub const REFERENCE_LAMBDA: f64 = 0.6;

/// Low-rank adapter settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale_alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, scale_alpha: 16.0 }
    }
}

/// Adapter targets: the attention query/value projections.
pub fn lora_target_names(config: &ModelConfig) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * config.n_layers);
    for i in 0..config.n_layers {
        names.push(format!("layer.{i}.attn.wq"));
        names.push(format!("layer.{i}.attn.wv"));
    }
    names
}

/// One adapter pair per target: delta = (scale_alpha / rank) · B·A.
struct LoraAdapters {
    cfg: LoraConfig,
    /// target name → (a: [r×n], b: [m×r]); a is Gaussian, b zero at init.
    factors: BTreeMap<String, (Tensor, Tensor)>,
}

impl LoraAdapters {
    fn init(params: &ParameterSet, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::InvalidConfig("lora rank must be positive".into()));
        }
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut factors = BTreeMap::new();
        for name in lora_target_names(params.config()) {
            let target = params
                .get(&name)
                .ok_or_else(|| Error::StructureMismatch(format!("missing target {name}")))?;
            let (m, n) = target.dims2()?;
            let a_data: Vec<f32> =
                (0..cfg.rank * n).map(|_| normal.sample(rng)).collect();
            let a = Tensor::new(vec![cfg.rank, n], a_data)?;
            let b = Tensor::zeros(&[m, cfg.rank]);
            factors.insert(name, (a, b));
        }
        Ok(LoraAdapters { cfg: cfg.clone(), factors })
    }

    fn scaling(&self) -> f32 {
        self.cfg.scale_alpha / self.cfg.rank as f32
    }

    /// Loss and gradients w.r.t. the adapter factors only; base weights
    /// enter the graph as constants.
    fn line_loss_grads(
        &self,
        params: &ParameterSet,
        line: &[u32],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let mut weights = register_params(&mut tape, params, |_| false);
        let mut factor_nodes = BTreeMap::new();
        for (name, (a, b)) in &self.factors {
            let base = weights[name].id();
            let a_node = tape.param(a.clone());
            let b_node = tape.param(b.clone());
            let delta = tape.matmul(b_node, a_node)?;
            let scaled = tape.scale(delta, self.scaling());
            let effective = tape.add(base, scaled)?;
            weights.insert(name.clone(), WeightNode::Composed(effective));
            factor_nodes.insert(name.clone(), (a_node, b_node));
        }
        let logits = build_lm_graph(&mut tape, &weights, params.config(), line)?;
        let pred = tape.slice_rows(logits, 0, line.len() - 1)?;
        let loss = tape.cross_entropy(pred, &line[1..])?;
        let loss_value = f64::from(tape.value(loss).scalar_value());
        let mut grads = tape.backward(loss)?;

        let mut out = BTreeMap::new();
        for (name, (a_node, b_node)) in factor_nodes {
            if let Some(g) = grads.take(a_node) {
                out.insert(format!("{name}#a"), g);
            }
            if let Some(g) = grads.take(b_node) {
                out.insert(format!("{name}#b"), g);
            }
        }
        Ok((loss_value, out))
    }

    /// Merge adapters into a copy of the base weights:
    /// W ← W + (scale_alpha / rank) · B·A.
    fn merge_into(&self, params: &ParameterSet) -> Result<ParameterSet> {
        let mut out = params.clone();
        let s = self.scaling();
        for (name, (a, b)) in &self.factors {
            let delta = tensor::matmul(b, a)?;
            let target = out.get_mut(name).expect("target exists");
            for (w, d) in target.data_mut().iter_mut().zip(delta.data()) {
                *w += s * d;
            }
        }
        Ok(out)
    }
}

/// Fine-tuning configuration. With `lora` set, only adapter weights train
/// and the result is returned with adapters merged; base weights stay
/// frozen.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lora: Option<LoraConfig>,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Reference schedule for the largest models: 1500 steps at 5e-4, batch
    /// size 4, gradient accumulation 4, low-rank adapters on.
    pub fn reference_large() -> Self {
        FinetuneConfig {
            steps: 1500,
            learning_rate: 5e-4,
            batch_size: 4,
            grad_accum: 4,
            lora: Some(LoraConfig::default()),
            seed: 0,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            seed: self.seed,
        }
    }
}

/// Outcome of fine-tuning: merged weights plus the loss trace.
pub struct FinetuneRun {
    pub params: ParameterSet,
    pub losses: Vec<f64>,
}

/// Fine-tune on tokenized lines. Zero steps returns the input bit-identically.
pub fn finetune_lm(
    params: &ParameterSet,
    lines: &[Vec<u32>],
    cfg: &FinetuneConfig,
) -> Result<FinetuneRun> {
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let lines = prepare_lines(lines, params.config().max_seq_len)?;
    if cfg.steps == 0 {
        return Ok(FinetuneRun { params: params.clone(), losses: Vec::new() });
    }

    match &cfg.lora {
        None => {
            let run = crate::train::train_lm(params, &lines, &tcfg)?;
            Ok(FinetuneRun { params: run.params, losses: run.losses })
        }
        Some(lora_cfg) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut adapters = LoraAdapters::init(params, lora_cfg, &mut rng)?;
            let mut adam = Adam::new();
            let mut losses = Vec::with_capacity(cfg.steps);

            for _ in 0..cfg.steps {
                let mut step_loss = 0.0f64;
                let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
                for _ in 0..cfg.grad_accum {
                    use rand::Rng;
                    let batch: Vec<usize> = (0..cfg.batch_size)
                        .map(|_| rng.gen_range(0..lines.len()))
                        .collect();
                    let (loss, g) = batch_loss_grads(
                        |l| adapters.line_loss_grads(params, l),
                        &lines,
                        &batch,
                    )?;
                    step_loss += loss;
                    accumulate_scaled(&mut grads, &g, 1.0 / cfg.grad_accum as f32);
                }
                adam.begin_step();
                for (key, g) in &grads {
                    let (name, which) =
                        key.rsplit_once('#').expect("factor key format");
                    let (a, b) = adapters.factors.get_mut(name).expect("known target");
                    let factor = if which == "a" { a } else { b };
                    adam.update(key, factor, g, cfg.learning_rate);
                }
                losses.push(step_loss / cfg.grad_accum as f64);
            }

            let merged = adapters.merge_into(params)?;
            merged.assert_finite("lora fine-tuned model")?;
            Ok(FinetuneRun { params: merged, losses })
        }
    }
}
