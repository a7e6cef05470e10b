//! Expert-trace generation and supervised warm-up with branch checkpoints.
//!
//! A scripted teacher plays training goals with a configurable slip rate.
//! An episode is abandoned at the teacher's first wrong action — generation
//! cost is still billed, but no pair of a flawed trajectory is kept, so the
//! retained dataset is error-free demonstration data. The student is then
//! trained by minibatch cross-entropy, and its parameters are snapshotted at
//! each requested branch point so RL can later fork from any point on the
//! SFT trajectory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{ComputeLedger, CostModel};
use crate::env::{Goal, Observation, TaskSuite};
use crate::error::{Error, Result};
use crate::policy::{Checkpoint, PolicyParams};

/// One supervised example: the observation the teacher saw and the action it
/// took, tagged with its goal and step index for traceability.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPair {
    pub goal: Goal,
    /// Step index within the episode (0-based emitted-action count).
    pub step: usize,
    pub obs: Observation,
    pub action: usize,
}

/// Demonstration data plus generation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub pairs: Vec<ExpertPair>,
    /// Episodes attempted.
    pub n_generated: usize,
    /// Episodes kept (completed without a teacher slip).
    pub n_kept: usize,
    /// Pairs generated across all attempts, kept or not; this is what
    /// generation FLOPs are billed on.
    pub pairs_generated: usize,
}

/// SFT schedule: total steps, where to snapshot, and the RL budget that will
/// run from each snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchPlan {
    pub t_sft_total: usize,
    /// Strictly increasing snapshot steps in `[0, t_sft_total]`.
    pub branch_points: Vec<usize>,
    /// RL optimizer steps to run from each snapshot.
    pub t_rl: usize,
}

impl BranchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.branch_points.is_empty() {
            return Err(Error::config("branch_points must not be empty"));
        }
        if !self.branch_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("branch_points must be strictly increasing"));
        }
        if *self.branch_points.last().unwrap() > self.t_sft_total {
            return Err(Error::config(format!(
                "branch point {} exceeds t_sft_total {}",
                self.branch_points.last().unwrap(),
                self.t_sft_total
            )));
        }
        Ok(())
    }
}

/// Plays `n_episodes` teacher episodes on train goals and keeps the pairs of
/// slip-free trajectories. Teacher forward FLOPs are billed for every
/// generated pair, kept or abandoned.
pub fn generate_expert_dataset(
    suite: &TaskSuite,
    n_episodes: usize,
    err_rate: f64,
    rng: &mut impl Rng,
    ledger: &mut ComputeLedger,
    cost: &CostModel,
) -> Result<ExpertDataset> {
    if n_episodes == 0 {
        return Err(Error::domain("n_episodes must be >= 1"));
    }
    if !(0.0..1.0).contains(&err_rate) {
        return Err(Error::domain(format!("err_rate must lie in [0, 1), got {err_rate}")));
    }
    if suite.train_tasks().is_empty() {
        return Err(Error::config("task suite has no train tasks"));
    }

    let mut pairs = Vec::new();
    let mut episode_pairs = Vec::new();
    let mut n_kept = 0;
    let mut pairs_generated = 0usize;
    for _ in 0..n_episodes {
        let goal = suite.sample_train_goal(rng);
        let mut episode = suite.episode(goal)?;
        let mut obs = episode.reset();
        episode_pairs.clear();
        let mut keep = false;
        loop {
            let action = suite.expert_action(&goal, episode.cursor(), err_rate, rng)?;
            episode_pairs.push(ExpertPair { goal, step: episode.steps_taken(), obs, action });
            pairs_generated += 1;
            let out = episode.step(action)?;
            if out.error {
                // First slip: abandon the attempt, keep nothing.
                break;
            }
            if out.done {
                keep = out.reward > 0.0;
                break;
            }
            obs = out.next_obs;
        }
        if keep {
            n_kept += 1;
            pairs.append(&mut episode_pairs);
        }
    }
    ledger.bill_teacher_gen(cost.teacher_gen_flops(pairs_generated as u128)?)?;
    Ok(ExpertDataset { pairs, n_generated: n_episodes, n_kept, pairs_generated })
}

/// Mean cross-entropy of the batch and its gradient with respect to the
/// policy weights (softmax at temperature 1, the training temperature).
pub fn sft_loss_and_grad(
    batch: &[&ExpertPair],
    params: &PolicyParams,
) -> Result<(f64, Array2<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("SFT batch must be non-empty"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(params.weights().dim());
    for pair in batch {
        loss -= scale * params.logprob(&pair.obs, pair.action, 1.0)?;
        let g = params.grad_logprob(&pair.obs, pair.action, 1.0)?;
        grad.scaled_add(-scale, &g);
    }
    Ok((loss, grad))
}

/// Runs `plan.t_sft_total` SGD steps of cross-entropy from zero-initialized
/// parameters and returns one checkpoint per branch point (a branch point of
/// 0 snapshots the untrained policy). Minibatches cycle through a shuffled
/// order that is reshuffled each pass, and every step bills student training
/// FLOPs for `batch_size` pairs.
#[allow(clippy::too_many_arguments)]
pub fn train_sft(
    dataset: &ExpertDataset,
    plan: &BranchPlan,
    learning_rate: f64,
    batch_size: usize,
    feature_dim: usize,
    action_vocab: usize,
    rng: &mut impl Rng,
    ledger: &mut ComputeLedger,
    cost: &CostModel,
) -> Result<Vec<Checkpoint>> {
    plan.validate()?;
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::domain(format!("learning_rate must be > 0, got {learning_rate}")));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch_size must be >= 1"));
    }
    if plan.t_sft_total > 0 && dataset.pairs.is_empty() {
        return Err(Error::config(
            "SFT steps requested but the expert dataset is empty; generate more episodes or lower err_rate",
        ));
    }
    for (i, pair) in dataset.pairs.iter().enumerate() {
        if pair.obs.feature_dim() != feature_dim {
            return Err(Error::input(format!(
                "pair {i} has feature dimension {}, expected {feature_dim}",
                pair.obs.feature_dim()
            )));
        }
        if pair.action >= action_vocab {
            return Err(Error::input(format!(
                "pair {i} has action {} outside vocab {action_vocab}",
                pair.action
            )));
        }
    }

    let mut params = PolicyParams::zeros(feature_dim, action_vocab)?;
    let mut checkpoints = Vec::with_capacity(plan.branch_points.len());
    if plan.branch_points.first() == Some(&0) {
        checkpoints.push(Checkpoint { params: params.clone(), step: 0 });
    }

    let mut order: Vec<usize> = (0..dataset.pairs.len()).collect();
    let mut pos = order.len(); // force an initial shuffle
    let mut batch: Vec<&ExpertPair> = Vec::with_capacity(batch_size);
    for step in 1..=plan.t_sft_total {
        batch.clear();
        while batch.len() < batch_size {
            if pos == order.len() {
                order.shuffle(rng);
                pos = 0;
            }
            batch.push(&dataset.pairs[order[pos]]);
            pos += 1;
        }
        let (_, grad) = sft_loss_and_grad(&batch, &params)?;
        params.add_scaled(&grad, -learning_rate)?;
        ledger.bill_sft_train(cost.student_train_flops(batch_size as u128)?)?;
        if plan.branch_points.contains(&step) {
            checkpoints.push(Checkpoint { params: params.clone(), step });
        }
    }
    Ok(checkpoints)
}

/// Metadata stored in a dataset file's header line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub err_rate: f64,
    pub teacher_shape: String,
    pub feature_dim: usize,
    pub action_vocab: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    kind: String,
    n_generated: usize,
    n_kept: usize,
    pairs_generated: usize,
    n_pairs: usize,
    err_rate: f64,
    teacher_shape: String,
    feature_dim: usize,
    action_vocab: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    task_id: usize,
    seed: u64,
    step: usize,
    action: usize,
    features: Vec<f64>,
}

const DATASET_KIND: &str = "expert-dataset";

/// Writes the dataset as JSONL: one header line, then one line per pair.
pub fn save_dataset(dataset: &ExpertDataset, meta: &DatasetMeta, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = DatasetHeader {
        kind: DATASET_KIND.to_string(),
        n_generated: dataset.n_generated,
        n_kept: dataset.n_kept,
        pairs_generated: dataset.pairs_generated,
        n_pairs: dataset.pairs.len(),
        err_rate: meta.err_rate,
        teacher_shape: meta.teacher_shape.clone(),
        feature_dim: meta.feature_dim,
        action_vocab: meta.action_vocab,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for pair in &dataset.pairs {
        let record = PairRecord {
            task_id: pair.goal.task_id,
            seed: pair.goal.seed,
            step: pair.step,
            action: pair.action,
            features: pair.obs.features(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`], validating dimensions,
/// action ranges, and the declared pair count.
pub fn load_dataset(path: &Path) -> Result<(ExpertDataset, DatasetMeta)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::input(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::input(format!("{}: malformed header: {e}", path.display())))?;
    if header.kind != DATASET_KIND {
        return Err(Error::input(format!(
            "{}: expected kind {DATASET_KIND:?}, found {:?}",
            path.display(),
            header.kind
        )));
    }
    let mut pairs = Vec::with_capacity(header.n_pairs);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| {
            Error::input(format!("{}: line {}: malformed pair: {e}", path.display(), lineno + 2))
        })?;
        if record.features.len() != header.feature_dim {
            return Err(Error::input(format!(
                "{}: line {}: feature length {} does not match header feature_dim {}",
                path.display(),
                lineno + 2,
                record.features.len(),
                header.feature_dim
            )));
        }
        if record.action >= header.action_vocab {
            return Err(Error::input(format!(
                "{}: line {}: action {} outside vocab {}",
                path.display(),
                lineno + 2,
                record.action,
                header.action_vocab
            )));
        }
        let obs = Observation::from_features(&record.features)?;
        pairs.push(ExpertPair {
            goal: Goal { task_id: record.task_id, seed: record.seed },
            step: record.step,
            obs,
            action: record.action,
        });
    }
    if pairs.len() != header.n_pairs {
        return Err(Error::input(format!(
            "{}: header declares {} pairs but file contains {}",
            path.display(),
            header.n_pairs,
            pairs.len()
        )));
    }
    Ok((
        ExpertDataset {
            pairs,
            n_generated: header.n_generated,
            n_kept: header.n_kept,
            pairs_generated: header.pairs_generated,
        },
        DatasetMeta {
            err_rate: header.err_rate,
            teacher_shape: header.teacher_shape,
            feature_dim: header.feature_dim,
            action_vocab: header.action_vocab,
        },
    ))
}
