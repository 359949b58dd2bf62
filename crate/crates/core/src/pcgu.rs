//! Partitioned contrastive gradient unlearning: partition 2-D weights into
//! row or column vectors, rank partitions by the cosine similarity of the
//! advantaged/disadvantaged gradients, and apply a first-order update to the
//! bottom-k fraction.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ContrastivePair;
use crate::model::{build_lm_graph, register_params, ParameterSet};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Weight-vector aggregation: by rows (input) or by columns (output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    Input,
    Output,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Input => "input",
            Axis::Output => "output",
        }
    }
}

/// Which term's likelihood the update moves, and in which direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    DecreaseAdvantaged,
    IncreaseDisadvantaged,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::DecreaseAdvantaged => "decrease-advantaged",
            Direction::IncreaseDisadvantaged => "increase-disadvantaged",
        }
    }
}

/// Identity of one weight vector: a row or column of a named 2-D parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartitionSpec {
    pub param_name: String,
    pub axis: Axis,
    pub index: usize,
}

/// A partition with its contrastive-gradient cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionScore {
    pub spec: PartitionSpec,
    pub cosine: f64,
}

#[derive(Debug, Clone)]
pub struct PcguConfig {
    pub k_fraction: f64,
    pub alpha: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub axis: Axis,
    pub direction: Direction,
    pub seed: u64,
}

impl PcguConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k_fraction) {
            return Err(Error::InvalidConfig(format!(
                "k_fraction {} outside [0, 1]",
                self.k_fraction
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Tuned settings reported for the largest (7B) model: k = 25%,
    /// learning rate 2e-4, batch size 512, 3 epochs; input aggregation and
    /// the decrease-advantaged direction.
    pub fn reference_large() -> Self {
        PcguConfig {
            k_fraction: 0.25,
            alpha: 2e-4,
            epochs: 3,
            batch_size: 512,
            axis: Axis::Input,
            direction: Direction::DecreaseAdvantaged,
            seed: 0,
        }
    }
}

/// Partition list for a set of named shapes: one spec per row (input) or
/// column (output) of every 2-D tensor, ordered by name then index.
fn partition_shapes<'a, I>(shapes: I, axis: Axis) -> Vec<PartitionSpec>
where
    I: Iterator<Item = (&'a String, &'a [usize])>,
{
    let mut specs = Vec::new();
    for (name, shape) in shapes {
        if let [rows, cols] = shape {
            let count = match axis {
                Axis::Input => *rows,
                Axis::Output => *cols,
            };
            for index in 0..count {
                specs.push(PartitionSpec { param_name: name.clone(), axis, index });
            }
        }
    }
    specs
}

/// Partition all 2-D model parameters into weight vectors. Only matrices
/// are partitioned; layer-norm gains and biases are left alone.
pub fn partition_weights(params: &ParameterSet, axis: Axis) -> Vec<PartitionSpec> {
    partition_shapes(params.iter().map(|(n, t)| (n, t.shape())), axis)
}

/// Contrastive gradients for one batch: gradients of the batch-mean
/// advantaged and disadvantaged completion log-likelihoods, plus the
/// objective values themselves.
pub struct ContrastiveGradients {
    pub advantaged: BTreeMap<String, Tensor>,
    pub disadvantaged: BTreeMap<String, Tensor>,
    pub mean_advantaged_logprob: f64,
    pub mean_disadvantaged_logprob: f64,
}

/// Per-pair gradients of the advantaged and disadvantaged log-likelihoods.
/// One shared forward pass; two backward sweeps.
fn pair_gradients(
    params: &ParameterSet,
    pair: &ContrastivePair,
) -> Result<(f64, BTreeMap<String, Tensor>, f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let weights = register_params(&mut tape, params, |_| true);
    let logits = build_lm_graph(&mut tape, &weights, params.config(), &pair.prefix_tokens)?;
    let t_len = pair.prefix_tokens.len();
    let last = tape.slice_rows(logits, t_len - 1, t_len)?;

    // log p(token) = −cross_entropy on the final logits row.
    let ce_adv = tape.cross_entropy(last, &[pair.advantaged])?;
    let obj_adv = tape.scale(ce_adv, -1.0);
    let ce_dis = tape.cross_entropy(last, &[pair.disadvantaged])?;
    let obj_dis = tape.scale(ce_dis, -1.0);

    let adv_value = f64::from(tape.value(obj_adv).scalar_value());
    let dis_value = f64::from(tape.value(obj_dis).scalar_value());

    let mut grads_adv_raw = tape.backward(obj_adv)?;
    tape.reset_backward();
    let mut grads_dis_raw = tape.backward(obj_dis)?;

    let mut grads_adv = BTreeMap::new();
    let mut grads_dis = BTreeMap::new();
    for (name, node) in &weights {
        let shape = params.get(name).expect("known parameter").shape();
        grads_adv.insert(
            name.clone(),
            grads_adv_raw.take(node.id()).unwrap_or_else(|| Tensor::zeros(shape)),
        );
        grads_dis.insert(
            name.clone(),
            grads_dis_raw.take(node.id()).unwrap_or_else(|| Tensor::zeros(shape)),
        );
    }
    Ok((adv_value, grads_adv, dis_value, grads_dis))
}

/// Gradients of the batch-mean advantaged/disadvantaged log-likelihoods with
/// respect to every model weight. Pairs run in parallel; the reduction is in
/// batch order, so results are thread-count independent.
pub fn contrastive_gradients(
    params: &ParameterSet,
    batch: &[ContrastivePair],
) -> Result<ContrastiveGradients> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("contrastive batch"));
    }
    let per_pair: Vec<_> = batch
        .par_iter()
        .map(|pair| pair_gradients(params, pair))
        .collect::<Vec<_>>();

    let inv = 1.0 / batch.len() as f32;
    let mut advantaged: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut disadvantaged: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut adv_sum = 0.0f64;
    let mut dis_sum = 0.0f64;
    for r in per_pair {
        let (adv_value, g_adv, dis_value, g_dis) = r?;
        adv_sum += adv_value;
        dis_sum += dis_value;
        crate::train::accumulate_scaled(&mut advantaged, &g_adv, inv);
        crate::train::accumulate_scaled(&mut disadvantaged, &g_dis, inv);
    }
    Ok(ContrastiveGradients {
        advantaged,
        disadvantaged,
        mean_advantaged_logprob: adv_sum / batch.len() as f64,
        mean_disadvantaged_logprob: dis_sum / batch.len() as f64,
    })
}

/// Batch-mean advantaged log-likelihood, values only.
pub fn mean_advantaged_logprob(params: &ParameterSet, batch: &[ContrastivePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("contrastive batch"));
    }
    let values: Vec<Result<f64>> = batch
        .par_iter()
        .map(|p| crate::model::last_token_logprob(params, &p.prefix_tokens, p.advantaged))
        .collect();
    let mut sum = 0.0f64;
    for v in values {
        sum += v?;
    }
    Ok(sum / batch.len() as f64)
}

/// Extract the partition's slice of a gradient tensor.
fn partition_slice(tensor: &Tensor, spec: &PartitionSpec) -> Result<Vec<f32>> {
    let (rows, cols) = tensor.dims2()?;
    match spec.axis {
        Axis::Input => {
            if spec.index >= rows {
                return Err(Error::InvalidTensor(format!(
                    "partition row {} out of bounds for {}",
                    spec.index, spec.param_name
                )));
            }
            Ok(tensor.row(spec.index).to_vec())
        }
        Axis::Output => {
            if spec.index >= cols {
                return Err(Error::InvalidTensor(format!(
                    "partition column {} out of bounds for {}",
                    spec.index, spec.param_name
                )));
            }
            Ok((0..rows).map(|r| tensor.row(r)[spec.index]).collect())
        }
    }
}

const ZERO_NORM_EPS: f64 = 1e-12;

fn cosine(u: &[f32], v: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        dot += f64::from(a) * f64::from(b);
        nu += f64::from(a) * f64::from(a);
        nv += f64::from(b) * f64::from(b);
    }
    let nu = nu.sqrt();
    let nv = nv.sqrt();
    if nu < ZERO_NORM_EPS || nv < ZERO_NORM_EPS {
        // No gradient signal: treat as maximally similar so it is never
        // selected for update.
        return 1.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Cosine similarity between the two gradient slices of every partition.
pub fn partition_cosine_scores(
    grad_advantaged: &BTreeMap<String, Tensor>,
    grad_disadvantaged: &BTreeMap<String, Tensor>,
    specs: &[PartitionSpec],
) -> Result<Vec<PartitionScore>> {
    specs
        .iter()
        .map(|spec| {
            let ga = grad_advantaged.get(&spec.param_name).ok_or_else(|| {
                Error::StructureMismatch(format!(
                    "no advantaged gradient for {}",
                    spec.param_name
                ))
            })?;
            let gd = grad_disadvantaged.get(&spec.param_name).ok_or_else(|| {
                Error::StructureMismatch(format!(
                    "no disadvantaged gradient for {}",
                    spec.param_name
                ))
            })?;
            let u = partition_slice(ga, spec)?;
            let v = partition_slice(gd, spec)?;
            Ok(PartitionScore { spec: spec.clone(), cosine: cosine(&u, &v) })
        })
        .collect()
}

/// The floor(k·m) partitions with the smallest cosine. Ties break by spec
/// order (parameter name, then index).
pub fn select_bottom_k(scores: &[PartitionScore], k_fraction: f64) -> Result<BTreeSet<PartitionSpec>> {
    if !(0.0..=1.0).contains(&k_fraction) {
        return Err(Error::InvalidConfig(format!(
            "k_fraction {k_fraction} outside [0, 1]"
        )));
    }
    let take = (k_fraction * scores.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps input (spec) order among equal cosines.
    order.sort_by(|&a, &b| scores[a].cosine.total_cmp(&scores[b].cosine));
    Ok(order
        .into_iter()
        .take(take)
        .map(|i| scores[i].spec.clone())
        .collect())
}

/// First-order update on the selected partitions, in place. Everything
/// outside the selected slices is untouched.
pub fn apply_update_in_place(
    params: &mut ParameterSet,
    grads: &ContrastiveGradients,
    selected: &BTreeSet<PartitionSpec>,
    alpha: f32,
    direction: Direction,
) -> Result<()> {
    let (grad_map, step) = match direction {
        Direction::DecreaseAdvantaged => (&grads.advantaged, -alpha),
        Direction::IncreaseDisadvantaged => (&grads.disadvantaged, alpha),
    };
    for spec in selected {
        let g = grad_map.get(&spec.param_name).ok_or_else(|| {
            Error::StructureMismatch(format!("no gradient for {}", spec.param_name))
        })?;
        let slice = partition_slice(g, spec)?;
        let tensor = params.get_mut(&spec.param_name).ok_or_else(|| {
            Error::StructureMismatch(format!("no parameter {}", spec.param_name))
        })?;
        let (rows, cols) = tensor.dims2()?;
        match spec.axis {
            Axis::Input => {
                let row = tensor.row_mut(spec.index);
                for (w, g) in row.iter_mut().zip(&slice) {
                    *w += step * g;
                }
            }
            Axis::Output => {
                debug_assert_eq!(slice.len(), rows);
                let data = tensor.data_mut();
                for (r, g) in slice.iter().enumerate() {
                    data[r * cols + spec.index] += step * g;
                }
            }
        }
    }
    Ok(())
}

/// Copying wrapper over [`apply_update_in_place`].
pub fn apply_update(
    params: &ParameterSet,
    grads: &ContrastiveGradients,
    selected: &BTreeSet<PartitionSpec>,
    alpha: f32,
    direction: Direction,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    apply_update_in_place(&mut out, grads, selected, alpha, direction)?;
    Ok(out)
}

/// One log record per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub mean_adv_logprob: f64,
    pub mean_cosine: f64,
    pub selected_count: usize,
}

pub fn log_to_csv(records: &[BatchLog]) -> String {
    let mut out = String::from("epoch,batch,mean_adv_logprob,mean_cosine,selected_count\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.batch, r.mean_adv_logprob, r.mean_cosine, r.selected_count
        ));
    }
    out
}

pub struct PcguRun {
    pub params: ParameterSet,
    pub log: Vec<BatchLog>,
}

/// The full procedure: per epoch, a seeded shuffle; per batch, contrastive
/// gradients → cosine ranking → bottom-k selection → first-order update,
/// with the selection recomputed every batch.
pub fn run_pcgu(
    params: &ParameterSet,
    pairs: &[ContrastivePair],
    config: &PcguConfig,
) -> Result<PcguRun> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("contrastive pairs"));
    }
    let mut params = params.clone();
    let specs = partition_weights(&params, config.axis);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<ContrastivePair> =
                chunk.iter().map(|&i| pairs[i].clone()).collect();
            let grads = contrastive_gradients(&params, &batch)?;
            let scores = partition_cosine_scores(&grads.advantaged, &grads.disadvantaged, &specs)?;
            let selected = select_bottom_k(&scores, config.k_fraction)?;
            apply_update_in_place(&mut params, &grads, &selected, config.alpha, config.direction)?;

            let mean_cosine =
                scores.iter().map(|s| s.cosine).sum::<f64>() / scores.len().max(1) as f64;
            log.push(BatchLog {
                epoch,
                batch: batch_idx,
                mean_adv_logprob: grads.mean_advantaged_logprob,
                mean_cosine,
                selected_count: selected.len(),
            });
        }
    }
    params.assert_finite("pcgu output")?;
    Ok(PcguRun { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn toy_params() -> ParameterSet {
        init_model(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 16,
            max_seq_len: 12,
            init_seed: 4,
        })
        .unwrap()
    }

    fn toy_pairs(n: usize) -> Vec<ContrastivePair> {
        (0..n)
            .map(|i| ContrastivePair {
                prefix_tokens: vec![1, 4 + (i % 3) as u32, 7, 9],
                advantaged: 5,
                disadvantaged: 6,
                group: "g".into(),
            })
            .collect()
    }

    #[test]
    fn partition_counts_by_axis() {
        let shapes: Vec<(String, Vec<usize>)> = vec![("w".into(), vec![4, 8])];
        let iter = |axis| {
            partition_shapes(shapes.iter().map(|(n, s)| (n, s.as_slice())), axis)
        };
        assert_eq!(iter(Axis::Input).len(), 4);
        assert_eq!(iter(Axis::Output).len(), 8);

        let shapes: Vec<(String, Vec<usize>)> =
            vec![("a".into(), vec![4, 8]), ("b".into(), vec![8, 8]), ("c".into(), vec![8])];
        let specs =
            partition_shapes(shapes.iter().map(|(n, s)| (n, s.as_slice())), Axis::Input);
        assert_eq!(specs.len(), 12); // 1-D "c" is not partitioned
        assert_eq!(specs[0].param_name, "a");
        assert_eq!(specs[0].index, 0);
        assert_eq!(specs[4].param_name, "b");
    }

    #[test]
    fn partition_count_matches_enumeration_on_model() {
        let params = toy_params();
        let specs = partition_weights(&params, Axis::Input);
        let expected: usize = params
            .iter()
            .filter(|(_, t)| t.is_matrix())
            .map(|(_, t)| t.shape()[0])
            .sum();
        assert_eq!(specs.len(), expected);
    }

    fn score_of(c: f64) -> PartitionScore {
        PartitionScore {
            spec: PartitionSpec { param_name: "w".into(), axis: Axis::Input, index: 0 },
            cosine: c,
        }
    }

    #[test]
    fn cosine_reference_values() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        let c = cosine(&[1.0, 2.0], &[-1.0, 0.0]);
        assert!((c - (-1.0 / 5.0f64.sqrt())).abs() < 1e-4, "{c}");
    }

    #[test]
    fn zero_norm_slices_score_plus_one() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 1.0);
        assert_eq!(cosine(&[1.0, 2.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn select_bottom_k_edges_and_example() {
        let mut scores: Vec<PartitionScore> = [0.9, -0.2, 0.5, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &c)| PartitionScore {
                spec: PartitionSpec { param_name: "w".into(), axis: Axis::Input, index: i },
                cosine: c,
            })
            .collect();
        assert!(select_bottom_k(&scores, 0.0).unwrap().is_empty());
        assert_eq!(select_bottom_k(&scores, 1.0).unwrap().len(), 4);
        let half = select_bottom_k(&scores, 0.5).unwrap();
        let picked: Vec<usize> = half.iter().map(|s| s.index).collect();
        assert_eq!(picked, vec![1, 3]); // cosines −0.2 and 0.1

        // Ties break by spec order.
        for s in &mut scores {
            s.cosine = 0.3;
        }
        let half = select_bottom_k(&scores, 0.5).unwrap();
        let picked: Vec<usize> = half.iter().map(|s| s.index).collect();
        assert_eq!(picked, vec![0, 1]);
        let _ = score_of(0.0);
    }

    #[test]
    fn degenerate_equal_token_pairs_give_identical_gradients() {
        let params = toy_params();
        let batch = vec![ContrastivePair {
            prefix_tokens: vec![1, 4, 7],
            advantaged: 5,
            disadvantaged: 5,
            group: "g".into(),
        }];
        let grads = contrastive_gradients(&params, &batch).unwrap();
        for (name, a) in &grads.advantaged {
            assert!(a.bit_eq(&grads.disadvantaged[name]), "{name}");
        }

        // All cosines are 1, so the update hits exactly the floor(k·m)
        // tie-break-first partitions with −α·grad_advantaged.
        let specs = partition_weights(&params, Axis::Input);
        let scores =
            partition_cosine_scores(&grads.advantaged, &grads.disadvantaged, &specs).unwrap();
        assert!(scores.iter().all(|s| s.cosine == 1.0));
        let k = 0.25;
        let selected = select_bottom_k(&scores, k).unwrap();
        let expect: BTreeSet<PartitionSpec> = specs
            .iter()
            .take((k * specs.len() as f64).floor() as usize)
            .cloned()
            .collect();
        assert_eq!(selected, expect);

        let alpha = 0.01f32;
        let updated =
            apply_update(&params, &grads, &selected, alpha, Direction::DecreaseAdvantaged)
                .unwrap();
        for spec in &selected {
            let before = partition_slice(params.get(&spec.param_name).unwrap(), spec).unwrap();
            let after = partition_slice(updated.get(&spec.param_name).unwrap(), spec).unwrap();
            let g = partition_slice(&grads.advantaged[&spec.param_name], spec).unwrap();
            for i in 0..before.len() {
                assert_eq!(after[i], before[i] - alpha * g[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_of_reference_forward() {
        use crate::reference::{last_token_logprob_f64, F64Params};
        let params = toy_params();
        let batch = toy_pairs(3);
        let grads = contrastive_gradients(&params, &batch).unwrap();

        let objective = |p: &F64Params| -> f64 {
            batch
                .iter()
                .map(|pair| last_token_logprob_f64(p, &pair.prefix_tokens, pair.advantaged))
                .sum::<f64>()
                / batch.len() as f64
        };

        let h = 1e-3f64;
        for name in ["final_ln.gain", "layer.0.attn.wq", "head.w"] {
            let analytic = &grads.advantaged[name];
            let mut fd = vec![0.0f64; analytic.numel()];
            let base = F64Params::from_params(&params);
            for e in 0..analytic.numel() {
                let mut plus = F64Params::from_params(&params);
                plus.get_mut(name)[e] = base.tensors[name].1[e] + h;
                let mut minus = F64Params::from_params(&params);
                minus.get_mut(name)[e] = base.tensors[name].1[e] - h;
                fd[e] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
            let mut diff2 = 0.0;
            let mut norm2 = 0.0;
            for (a, f) in analytic.data().iter().zip(&fd) {
                diff2 += (f64::from(*a) - f).powi(2);
                norm2 += f.powi(2);
            }
            let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
            assert!(rel < 1e-3, "{name}: relative FD error {rel}");
        }
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradients_unchanged() {
        let params = toy_params();
        let batch = toy_pairs(2);
        let mut doubled = batch.clone();
        doubled.extend(batch.iter().cloned());
        let g1 = contrastive_gradients(&params, &batch).unwrap();
        let g2 = contrastive_gradients(&params, &doubled).unwrap();
        for (name, a) in &g1.advantaged {
            let b = &g2.advantaged[name];
            for (x, y) in a.data().iter().zip(b.data()) {
                let denom = x.abs().max(1e-6);
                assert!((x - y).abs() / denom < 1e-4, "{name}: {x} vs {y}");
            }
        }
        assert!(
            (g1.mean_advantaged_logprob - g2.mean_advantaged_logprob).abs() < 1e-9
        );
    }

    #[test]
    fn k_zero_run_is_a_bitwise_no_op() {
        let params = toy_params();
        let cfg = PcguConfig {
            k_fraction: 0.0,
            alpha: 1e-2,
            epochs: 2,
            batch_size: 2,
            axis: Axis::Input,
            direction: Direction::DecreaseAdvantaged,
            seed: 0,
        };
        let run = run_pcgu(&params, &toy_pairs(4), &cfg).unwrap();
        assert!(run.params.bit_eq(&params));
        assert!(run.log.iter().all(|r| r.selected_count == 0));
    }

    #[test]
    fn unselected_partitions_stay_bit_identical() {
        let params = toy_params();
        let batch = toy_pairs(4);
        let grads = contrastive_gradients(&params, &batch).unwrap();
        let specs = partition_weights(&params, Axis::Input);
        let scores =
            partition_cosine_scores(&grads.advantaged, &grads.disadvantaged, &specs).unwrap();
        let k = 0.3;
        let selected = select_bottom_k(&scores, k).unwrap();
        assert_eq!(selected.len(), (k * specs.len() as f64).floor() as usize);

        let updated =
            apply_update(&params, &grads, &selected, 0.05, Direction::DecreaseAdvantaged)
                .unwrap();
        for spec in &specs {
            let before = partition_slice(params.get(&spec.param_name).unwrap(), spec).unwrap();
            let after = partition_slice(updated.get(&spec.param_name).unwrap(), spec).unwrap();
            let same = before
                .iter()
                .zip(&after)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert_eq!(same, !selected.contains(spec), "{spec:?}");
        }
        // Non-matrix parameters are never touched.
        for (name, t) in updated.iter() {
            if !t.is_matrix() {
                assert!(t.bit_eq(params.get(name).unwrap()), "{name}");
            }
        }
    }

    #[test]
    fn alpha_zero_update_is_identity() {
        let params = toy_params();
        let batch = toy_pairs(2);
        let grads = contrastive_gradients(&params, &batch).unwrap();
        let specs = partition_weights(&params, Axis::Input);
        let scores =
            partition_cosine_scores(&grads.advantaged, &grads.disadvantaged, &specs).unwrap();
        let selected = select_bottom_k(&scores, 0.5).unwrap();
        let updated =
            apply_update(&params, &grads, &selected, 0.0, Direction::DecreaseAdvantaged).unwrap();
        assert!(updated.bit_eq(&params));
    }

    #[test]
    fn hand_computed_update_row() {
        // θ row [1,2], grad row [0.5,0.5], α=0.1 → [0.95, 1.95].
        let before = [1.0f32, 2.0];
        let grad = [0.5f32, 0.5];
        let after: Vec<f32> = before
            .iter()
            .zip(&grad)
            .map(|(w, g)| w + (-0.1f32) * g)
            .collect();
        assert_eq!(after, vec![0.95, 1.95]);
    }

    #[test]
    fn one_step_decreases_advantaged_logprob() {
        let params = toy_params();
        let batch = toy_pairs(6);
        let before = mean_advantaged_logprob(&params, &batch).unwrap();
        let cfg = PcguConfig {
            k_fraction: 0.3,
            alpha: 1e-3,
            epochs: 1,
            batch_size: batch.len(),
            axis: Axis::Input,
            direction: Direction::DecreaseAdvantaged,
            seed: 0,
        };
        let run = run_pcgu(&params, &batch, &cfg).unwrap();
        let after = mean_advantaged_logprob(&run.params, &batch).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn increase_disadvantaged_direction_raises_its_logprob() {
        let params = toy_params();
        let batch = toy_pairs(6);
        let flipped: Vec<ContrastivePair> = batch
            .iter()
            .map(|p| ContrastivePair {
                prefix_tokens: p.prefix_tokens.clone(),
                advantaged: p.disadvantaged,
                disadvantaged: p.advantaged,
                group: p.group.clone(),
            })
            .collect();
        let before = mean_advantaged_logprob(&params, &flipped).unwrap();
        let cfg = PcguConfig {
            k_fraction: 0.3,
            alpha: 1e-3,
            epochs: 1,
            batch_size: batch.len(),
            axis: Axis::Input,
            direction: Direction::IncreaseDisadvantaged,
            seed: 0,
        };
        // The disadvantaged token of `batch` is the advantaged of `flipped`.
        let run = run_pcgu(&params, &batch, &cfg).unwrap();
        let after = mean_advantaged_logprob(&run.params, &flipped).unwrap();
        assert!(after > before, "{after} !> {before}");
    }

    #[test]
    fn run_is_deterministic_and_logs_every_batch() {
        let params = toy_params();
        let pairs = toy_pairs(5);
        let cfg = PcguConfig {
            k_fraction: 0.25,
            alpha: 1e-3,
            epochs: 2,
            batch_size: 2,
            axis: Axis::Input,
            direction: Direction::DecreaseAdvantaged,
            seed: 7,
        };
        let a = run_pcgu(&params, &pairs, &cfg).unwrap();
        let b = run_pcgu(&params, &pairs, &cfg).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2 * 3); // ceil(5/2) batches per epoch

        let m = partition_weights(&params, Axis::Input).len();
        let expect = (0.25 * m as f64).floor() as usize;
        assert!(a.log.iter().all(|r| r.selected_count == expect));

        let csv = log_to_csv(&a.log);
        assert!(csv.starts_with("epoch,batch,mean_adv_logprob,mean_cosine,selected_count\n"));
        assert_eq!(csv.lines().count(), 1 + a.log.len());
    }

    #[test]
    fn reference_settings_constants() {
        let cfg = PcguConfig::reference_large();
        assert_eq!(cfg.k_fraction, 0.25);
        assert_eq!(cfg.alpha, 2e-4);
        assert_eq!(cfg.batch_size, 512);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.axis, Axis::Input);
        assert_eq!(cfg.direction, Direction::DecreaseAdvantaged);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PcguConfig::reference_large();
        cfg.k_fraction = 1.2;
        assert!(cfg.validate().is_err());
        let mut cfg = PcguConfig::reference_large();
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
    }
}
