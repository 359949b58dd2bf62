//! Sharded PCGU execution: parameters are split across logical workers,
//! cosine scores are gathered centrally, the coordinator computes one
//! globally consistent bottom-k selection, and every shard updates its own
//! parameters locally.
//!
//! Workers are threads in one process; all cross-worker communication is by
//! value over channels, with barrier semantics between the four phases of a
//! batch. Each shard replays the full forward/backward for its gradient
//! slices, so the sharded run reproduces the unsharded weights exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ContrastivePair;
use crate::model::ParameterSet;
use crate::pcgu::{
    apply_update_in_place, contrastive_gradients, partition_cosine_scores, partition_weights,
    select_bottom_k, PartitionScore, PartitionSpec, PcguConfig,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Assignment of 2-D parameters to shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub n_shards: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl ShardPlan {
    pub fn names_for(&self, shard: usize) -> BTreeSet<String> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == shard)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Round-robin assignment of 2-D parameters over lexicographic names.
/// Shard tensor counts differ by at most one.
pub fn plan_shards(params: &ParameterSet, n_shards: usize) -> Result<ShardPlan> {
    if n_shards < 1 {
        return Err(Error::Shard("n_shards must be at least 1".into()));
    }
    let mut assignment = BTreeMap::new();
    let mut next = 0usize;
    for (name, t) in params.iter() {
        if t.is_matrix() {
            assignment.insert(name.clone(), next % n_shards);
            next += 1;
        }
    }
    Ok(ShardPlan { n_shards, assignment })
}

/// Protocol phase, as recorded in the run log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Gradients,
    Select,
    Update,
    Sync,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Gradients => "gradients",
            Phase::Select => "select",
            Phase::Update => "update",
            Phase::Sync => "sync",
        }
    }
}

/// One protocol event. `shard` is None for coordinator events.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardLog {
    pub seq: usize,
    pub epoch: usize,
    pub batch: usize,
    pub shard: Option<usize>,
    pub phase: Phase,
    pub mean_adv_logprob: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub selected_count: Option<usize>,
}

pub fn shard_log_to_csv(records: &[ShardLog]) -> String {
    let mut out =
        String::from("seq,epoch,batch,shard,phase,mean_adv_logprob,mean_cosine,selected_count\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.seq,
            r.epoch,
            r.batch,
            r.shard.map(|s| s.to_string()).unwrap_or_else(|| "coord".into()),
            r.phase.as_str(),
            opt(r.mean_adv_logprob.map(|v| v.to_string())),
            opt(r.mean_cosine.map(|v| v.to_string())),
            opt(r.selected_count.map(|v| v.to_string())),
        ));
    }
    out
}

enum ToWorker {
    RunBatch { pair_indices: Vec<usize> },
    Selected(BTreeSet<PartitionSpec>),
    Sync(ParameterSet),
    Shutdown,
}

enum ToCoord {
    Scores { shard: usize, scores: Vec<PartitionScore>, mean_adv_logprob: f64 },
    Updated { shard: usize, tensors: Vec<(String, Tensor)> },
}

pub struct ShardedRun {
    pub params: ParameterSet,
    pub log: Vec<ShardLog>,
}

struct Worker {
    shard: usize,
    params: ParameterSet,
    pairs: Arc<Vec<ContrastivePair>>,
    own_names: BTreeSet<String>,
    own_specs: Vec<PartitionSpec>,
    config: PcguConfig,
    rx: mpsc::Receiver<ToWorker>,
    tx: mpsc::Sender<ToCoord>,
}

impl Worker {
    fn run(mut self) -> Result<()> {
        loop {
            match self.rx.recv().map_err(|_| disconnect())? {
                ToWorker::Shutdown => return Ok(()),
                ToWorker::Sync(params) => self.params = params,
                ToWorker::Selected(_) => {
                    return Err(Error::Shard("selection outside a batch".into()))
                }
                ToWorker::RunBatch { pair_indices } => {
                    let batch: Vec<ContrastivePair> =
                        pair_indices.iter().map(|&i| self.pairs[i].clone()).collect();
                    // Phase 1: full forward/backward, keep own score slices.
                    let grads = contrastive_gradients(&self.params, &batch)?;
                    let scores = partition_cosine_scores(
                        &grads.advantaged,
                        &grads.disadvantaged,
                        &self.own_specs,
                    )?;
                    // Phase 2: send scores to the coordinator.
                    self.tx
                        .send(ToCoord::Scores {
                            shard: self.shard,
                            scores,
                            mean_adv_logprob: grads.mean_advantaged_logprob,
                        })
                        .map_err(|_| disconnect())?;
                    // Phase 3 barrier: wait for the global selection.
                    let selected = match self.rx.recv().map_err(|_| disconnect())? {
                        ToWorker::Selected(s) => s,
                        _ => return Err(Error::Shard("expected selection".into())),
                    };
                    // Phase 4: update own partitions only.
                    let own_selected: BTreeSet<PartitionSpec> = selected
                        .into_iter()
                        .filter(|s| self.own_names.contains(&s.param_name))
                        .collect();
                    apply_update_in_place(
                        &mut self.params,
                        &grads,
                        &own_selected,
                        self.config.alpha,
                        self.config.direction,
                    )?;
                    let tensors: Vec<(String, Tensor)> = self
                        .own_names
                        .iter()
                        .map(|n| (n.clone(), self.params.get(n).expect("own param").clone()))
                        .collect();
                    self.tx
                        .send(ToCoord::Updated { shard: self.shard, tensors })
                        .map_err(|_| disconnect())?;
                }
            }
        }
    }
}

fn disconnect() -> Error {
    Error::Shard("worker channel disconnected".into())
}

/// Sharded PCGU. Identical selections and final weights to [`run_pcgu`]
/// for any shard count; a worker failure fails the whole run.
///
/// [`run_pcgu`]: crate::pcgu::run_pcgu
pub fn run_pcgu_sharded(
    params: &ParameterSet,
    pairs: &[ContrastivePair],
    config: &PcguConfig,
    n_shards: usize,
) -> Result<ShardedRun> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("contrastive pairs"));
    }
    let plan = plan_shards(params, n_shards)?;
    let pairs = Arc::new(pairs.to_vec());
    let m_total = partition_weights(params, config.axis).len();

    let (coord_tx, coord_rx) = mpsc::channel::<ToCoord>();
    let mut worker_txs = Vec::with_capacity(n_shards);
    let mut handles = Vec::with_capacity(n_shards);
    for shard in 0..n_shards {
        let (tx, rx) = mpsc::channel::<ToWorker>();
        let own_names = plan.names_for(shard);
        let own_specs: Vec<PartitionSpec> = partition_weights(params, config.axis)
            .into_iter()
            .filter(|s| own_names.contains(&s.param_name))
            .collect();
        let worker = Worker {
            shard,
            params: params.clone(),
            pairs: Arc::clone(&pairs),
            own_names,
            own_specs,
            config: config.clone(),
            rx,
            tx: coord_tx.clone(),
        };
        worker_txs.push(tx);
        handles.push(thread::spawn(move || worker.run()));
    }
    drop(coord_tx);

    let result = coordinate(
        params,
        &pairs,
        config,
        &plan,
        m_total,
        &worker_txs,
        &coord_rx,
    );

    for tx in &worker_txs {
        let _ = tx.send(ToWorker::Shutdown);
    }
    for h in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(Error::Shard("worker panicked".into())),
        }
    }
    result
}

fn coordinate(
    params: &ParameterSet,
    pairs: &Arc<Vec<ContrastivePair>>,
    config: &PcguConfig,
    plan: &ShardPlan,
    m_total: usize,
    worker_txs: &[mpsc::Sender<ToWorker>],
    coord_rx: &mpsc::Receiver<ToCoord>,
) -> Result<ShardedRun> {
    let n_shards = plan.n_shards;
    let mut master = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut seq = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            for tx in worker_txs {
                tx.send(ToWorker::RunBatch { pair_indices: chunk.to_vec() })
                    .map_err(|_| disconnect())?;
            }

            // Gather phase: one score message per shard, stored by id so
            // arrival order cannot influence anything downstream.
            let mut shard_scores: Vec<Option<(Vec<PartitionScore>, f64)>> =
                (0..n_shards).map(|_| None).collect();
            for _ in 0..n_shards {
                match coord_rx.recv().map_err(|_| disconnect())? {
                    ToCoord::Scores { shard, scores, mean_adv_logprob } => {
                        shard_scores[shard] = Some((scores, mean_adv_logprob));
                    }
                    ToCoord::Updated { .. } => {
                        return Err(Error::Shard("update before selection".into()))
                    }
                }
            }
            let mut all_scores: Vec<PartitionScore> = Vec::with_capacity(m_total);
            for (shard, entry) in shard_scores.iter().enumerate() {
                let (scores, mean_adv) =
                    entry.as_ref().ok_or_else(|| missing_shard(shard))?;
                all_scores.extend(scores.iter().cloned());
                log.push(ShardLog {
                    seq: next_seq(&mut seq),
                    epoch,
                    batch: batch_idx,
                    shard: Some(shard),
                    phase: Phase::Gradients,
                    mean_adv_logprob: Some(*mean_adv),
                    mean_cosine: None,
                    selected_count: None,
                });
            }
            if all_scores.len() != m_total {
                return Err(Error::Shard(format!(
                    "gathered {} scores, expected {m_total}",
                    all_scores.len()
                )));
            }
            // Canonical spec order makes the selection a pure function of
            // the score multiset, independent of shard count.
            all_scores.sort_by(|a, b| a.spec.cmp(&b.spec));
            let selected = select_bottom_k(&all_scores, config.k_fraction)?;
            let mean_cosine =
                all_scores.iter().map(|s| s.cosine).sum::<f64>() / all_scores.len().max(1) as f64;
            log.push(ShardLog {
                seq: next_seq(&mut seq),
                epoch,
                batch: batch_idx,
                shard: None,
                phase: Phase::Select,
                mean_adv_logprob: None,
                mean_cosine: Some(mean_cosine),
                selected_count: Some(selected.len()),
            });

            for tx in worker_txs {
                tx.send(ToWorker::Selected(selected.clone())).map_err(|_| disconnect())?;
            }

            let mut shard_updates: Vec<Option<Vec<(String, Tensor)>>> =
                (0..n_shards).map(|_| None).collect();
            for _ in 0..n_shards {
                match coord_rx.recv().map_err(|_| disconnect())? {
                    ToCoord::Updated { shard, tensors } => {
                        shard_updates[shard] = Some(tensors);
                    }
                    ToCoord::Scores { .. } => {
                        return Err(Error::Shard("scores after selection".into()))
                    }
                }
            }
            for (shard, entry) in shard_updates.iter().enumerate() {
                let tensors = entry.as_ref().ok_or_else(|| missing_shard(shard))?;
                for (name, t) in tensors {
                    if plan.assignment.get(name) != Some(&shard) {
                        return Err(Error::Shard(format!(
                            "shard {shard} sent tensor {name} it does not own"
                        )));
                    }
                    *master
                        .get_mut(name)
                        .ok_or_else(|| Error::Shard(format!("unknown tensor {name}")))? =
                        t.clone();
                }
                log.push(ShardLog {
                    seq: next_seq(&mut seq),
                    epoch,
                    batch: batch_idx,
                    shard: Some(shard),
                    phase: Phase::Update,
                    mean_adv_logprob: None,
                    mean_cosine: None,
                    selected_count: None,
                });
            }

            for tx in worker_txs {
                tx.send(ToWorker::Sync(master.clone())).map_err(|_| disconnect())?;
            }
            log.push(ShardLog {
                seq: next_seq(&mut seq),
                epoch,
                batch: batch_idx,
                shard: None,
                phase: Phase::Sync,
                mean_adv_logprob: None,
                mean_cosine: None,
                selected_count: None,
            });
        }
    }
    master.assert_finite("sharded pcgu output")?;
    Ok(ShardedRun { params: master, log })
}

fn next_seq(seq: &mut usize) -> usize {
    let s = *seq;
    *seq += 1;
    s
}

fn missing_shard(shard: usize) -> Error {
    Error::Shard(format!("no message from shard {shard}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::pcgu::{run_pcgu, Axis, Direction};

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
                prefix_tokens: vec![1, 4 + (i % 4) as u32, 9, 11],
                advantaged: 5,
                disadvantaged: 6,
                group: "g".into(),
            })
            .collect()
    }

    fn toy_config() -> PcguConfig {
        PcguConfig {
            k_fraction: 0.3,
            alpha: 2e-3,
            epochs: 2,
            batch_size: 3,
            axis: Axis::Input,
            direction: Direction::DecreaseAdvantaged,
            seed: 5,
        }
    }

    #[test]
    fn plan_is_deterministic_round_robin() {
        let params = toy_params();
        let plan = plan_shards(&params, 2).unwrap();
        assert_eq!(plan, plan_shards(&params, 2).unwrap());

        // Only 2-D parameters are assigned.
        let matrices: Vec<&String> = params
            .iter()
            .filter(|(_, t)| t.is_matrix())
            .map(|(n, _)| n)
            .collect();
        assert_eq!(plan.assignment.len(), matrices.len());
        for (i, name) in matrices.iter().enumerate() {
            assert_eq!(plan.assignment[*name], i % 2);
        }

        // Imbalance at most one tensor.
        let counts: Vec<usize> =
            (0..2).map(|s| plan.names_for(s).len()).collect();
        assert!(counts[0].abs_diff(counts[1]) <= 1);
    }

    #[test]
    fn single_shard_assigns_everything_to_zero() {
        let params = toy_params();
        let plan = plan_shards(&params, 1).unwrap();
        assert!(plan.assignment.values().all(|&s| s == 0));
        assert!(plan_shards(&params, 0).is_err());
    }

    #[test]
    fn four_tensors_two_shards_is_two_each() {
        // Round-robin over four matrices lands two per shard.
        let params = toy_params();
        let plan = plan_shards(&params, 2).unwrap();
        let first_four: Vec<&String> =
            plan.assignment.keys().take(4).collect();
        let shards: Vec<usize> =
            first_four.iter().map(|n| plan.assignment[*n]).collect();
        assert_eq!(shards, vec![0, 1, 0, 1]);
    }

    #[test]
    fn sharded_matches_unsharded_bitwise() {
        let params = toy_params();
        let pairs = toy_pairs(7);
        let cfg = toy_config();
        let baseline = run_pcgu(&params, &pairs, &cfg).unwrap();

        for n_shards in [1, 2, 4] {
            let sharded = run_pcgu_sharded(&params, &pairs, &cfg, n_shards).unwrap();
            assert!(
                sharded.params.bit_eq(&baseline.params),
                "{n_shards} shards diverged"
            );
            // Selected-set sizes match per batch.
            let unsharded_counts: Vec<usize> =
                baseline.log.iter().map(|r| r.selected_count).collect();
            let sharded_counts: Vec<usize> = sharded
                .log
                .iter()
                .filter(|r| r.phase == Phase::Select)
                .map(|r| r.selected_count.unwrap())
                .collect();
            assert_eq!(unsharded_counts, sharded_counts);
        }
    }

    #[test]
    fn log_phases_never_overlap() {
        let params = toy_params();
        let pairs = toy_pairs(5);
        let cfg = toy_config();
        let run = run_pcgu_sharded(&params, &pairs, &cfg, 3).unwrap();

        // Within each (epoch, batch): all gradient events precede the
        // select event, which precedes all update events, then sync.
        use std::collections::HashMap;
        let mut by_batch: HashMap<(usize, usize), Vec<&ShardLog>> = HashMap::new();
        for r in &run.log {
            by_batch.entry((r.epoch, r.batch)).or_default().push(r);
        }
        for (_, events) in by_batch {
            let max_grad = events
                .iter()
                .filter(|e| e.phase == Phase::Gradients)
                .map(|e| e.seq)
                .max()
                .unwrap();
            let select = events
                .iter()
                .find(|e| e.phase == Phase::Select)
                .unwrap()
                .seq;
            let min_update = events
                .iter()
                .filter(|e| e.phase == Phase::Update)
                .map(|e| e.seq)
                .min()
                .unwrap();
            let sync = events.iter().find(|e| e.phase == Phase::Sync).unwrap().seq;
            assert!(max_grad < select && select < min_update && min_update < sync);
        }

        // Sequence numbers are strictly increasing over the whole log.
        for w in run.log.windows(2) {
            assert!(w[0].seq < w[1].seq);
        }
    }

    #[test]
    fn sharded_log_is_deterministic_and_renders_csv() {
        let params = toy_params();
        let pairs = toy_pairs(4);
        let cfg = toy_config();
        let a = run_pcgu_sharded(&params, &pairs, &cfg, 2).unwrap();
        let b = run_pcgu_sharded(&params, &pairs, &cfg, 2).unwrap();
        assert_eq!(a.log, b.log);
        let csv = shard_log_to_csv(&a.log);
        assert!(csv.starts_with(
            "seq,epoch,batch,shard,phase,mean_adv_logprob,mean_cosine,selected_count\n"
        ));
        assert!(csv.contains(",coord,select,"));
    }
}
