//! Multi-turn group-relative policy optimization.
//!
//! Each epoch samples a set of goals, rolls out a group of trajectories per
//! goal with the current policy, converts terminal rewards into per-step
//! advantages (group-centered, optionally std-normalized, discounted back
//! through each trajectory), and takes clipped importance-weighted policy
//! gradient steps on batches of whole trajectories. Every knob of that
//! recipe — grouping, normalization, zero-advantage filtering, the
//! importance ratio itself — can be disabled independently, which is what
//! the hyperparameter-importance study sweeps over. There is deliberately no
//! KL penalty term anywhere: the objective is the clipped surrogate alone.
//!
//! The objective averages per-trajectory means:
//! `E[ 1/G Σ_g 1/|τ_g| Σ_t min(η·A, clip(η, 1−ε, 1+ε)·A) ]`,
//! with `η = exp(logπ_θ − logπ_behavior)` evaluated at the sampling
//! temperature. With the ratio disabled the per-step term is `logπ·A`
//! (REINFORCE); at `η = 1` the two have identical gradients.

use ndarray::Array2;
use rand::RngCore;

use crate::compute::{ComputeLedger, CostModel};
use crate::curriculum::TaskSampler;
use crate::env::{Goal, Observation, TaskSuite};
use crate::error::{Error, Result};
use crate::policy::{Checkpoint, PolicyParams};
use crate::rng::{self, stream};

/// Below this population standard deviation a reward group is treated as
/// degenerate and left unnormalized (the centered advantages are all ~0).
pub const EPS_STD: f64 = 1e-8;

/// Advantages with magnitude at or below this are dropped by the
/// zero-advantage filter.
pub const ZERO_ADV_EPS: f64 = 1e-12;

/// All knobs of the advantage computation and surrogate objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageConfig {
    /// Trajectories rolled out per goal (G).
    pub group_size: usize,
    /// Subtract the group mean from terminal rewards.
    pub grouped_relative: bool,
    /// Divide centered rewards by the group's population std (guarded).
    pub std_normalize: bool,
    /// Drop steps whose advantage is numerically zero.
    pub zero_adv_filter: bool,
    /// Discount γ applied backward from the terminal step.
    pub discount: f64,
    /// PPO clip width ε.
    pub clip_eps: f64,
    /// Use the clipped importance-ratio surrogate; otherwise REINFORCE.
    pub use_importance_ratio: bool,
    /// Sampling temperature ρ for rollouts, scoring, and the surrogate.
    pub decoding_temperature: f64,
    /// Optimizer steps are taken on batches of whole trajectories holding at
    /// least this many (post-filter) steps.
    pub effective_batch_size: usize,
    pub learning_rate: f64,
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::domain("group_size must be >= 1"));
        }
        if self.grouped_relative && self.group_size < 2 {
            return Err(Error::domain(
                "group_size must be >= 2 when grouped_relative is enabled",
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::domain(format!(
                "discount must lie in (0, 1], got {}",
                self.discount
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::domain(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.decoding_temperature.is_finite() && self.decoding_temperature > 0.0) {
            return Err(Error::domain(format!(
                "decoding_temperature must be > 0, got {}",
                self.decoding_temperature
            )));
        }
        if self.effective_batch_size == 0 {
            return Err(Error::domain("effective_batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::domain(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One step of a collected trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajStep {
    pub obs: Observation,
    pub action: usize,
    /// Log-probability under the behavior policy at collection time.
    pub logprob: f64,
    pub reward: f64,
}

/// One complete episode rolled out by the behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub goal: Goal,
    pub steps: Vec<TrajStep>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal_reward(&self) -> f64 {
        self.steps.last().map(|s| s.reward).unwrap_or(0.0)
    }
}

/// All trajectories rolled out for one goal.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub goal: Goal,
    pub trajectories: Vec<Trajectory>,
}

/// A flattened training sample: one step with its advantage and its weight
/// in the batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub obs: Observation,
    pub action: usize,
    pub behavior_logprob: f64,
    pub advantage: f64,
    /// `1 / (n_trajectories_in_batch × trajectory_length)`: the coefficient
    /// that makes Σ weight·term the mean-over-trajectories of per-trajectory
    /// mean terms. Computed before any filtering so dropping zero-advantage
    /// steps cannot change surviving steps' contributions.
    pub weight: f64,
}

/// Rolls out `group_size` trajectories per goal with the behavior policy.
///
/// Each `(goal, member)` pair gets its own derived RNG stream, so the result
/// is independent of iteration order and worker count. Student forward FLOPs
/// are billed for every generated step.
pub fn collect_rollouts(
    suite: &TaskSuite,
    params: &PolicyParams,
    goals: &[Goal],
    cfg: &AdvantageConfig,
    error_feedback: bool,
    rng: &mut impl RngCore,
    ledger: &mut ComputeLedger,
    cost: &CostModel,
) -> Result<Vec<RolloutGroup>> {
    cfg.validate()?;
    if goals.is_empty() {
        return Err(Error::domain("collect_rollouts needs at least one goal"));
    }
    let base = rng.next_u64();
    let mut groups = Vec::with_capacity(goals.len());
    let mut steps_total: u128 = 0;
    for (goal_idx, &goal) in goals.iter().enumerate() {
        let mut trajectories = Vec::with_capacity(cfg.group_size);
        for member in 0..cfg.group_size {
            let mut ep_rng = rng::stream_rng(base, &[goal_idx as u64, member as u64]);
            let mut episode = suite.episode_with_feedback(goal, error_feedback)?;
            let mut obs = episode.reset();
            let mut steps = Vec::with_capacity(episode.horizon());
            let success = loop {
                let sample = params.sample(&obs, cfg.decoding_temperature, &mut ep_rng)?;
                let out = episode.step(sample.action)?;
                steps.push(TrajStep {
                    obs,
                    action: sample.action,
                    logprob: sample.logprob,
                    reward: out.reward,
                });
                if out.done {
                    break out.reward > 0.0;
                }
                obs = out.next_obs;
            };
            steps_total += steps.len() as u128;
            trajectories.push(Trajectory { goal, steps, success });
        }
        groups.push(RolloutGroup { goal, trajectories });
    }
    ledger.bill_rl_rollout(cost.student_forward_flops(steps_total)?)?;
    Ok(groups)
}

fn check_trajectory(traj: &Trajectory) -> Result<()> {
    if traj.is_empty() {
        return Err(Error::domain("trajectory must contain at least one step"));
    }
    let last = traj.len() - 1;
    for (t, step) in traj.steps.iter().enumerate() {
        if t == last {
            if step.reward != 1.0 && step.reward != -1.0 {
                return Err(Error::domain(format!(
                    "terminal reward must be +1 or -1, got {}",
                    step.reward
                )));
            }
        } else if step.reward != 0.0 {
            return Err(Error::domain(format!(
                "intermediate reward at step {t} must be 0, got {}",
                step.reward
            )));
        }
    }
    Ok(())
}

/// Discounted returns of a sparse-terminal-reward trajectory:
/// `return[t] = γ^(L−1−t) · r_terminal`.
pub fn per_step_returns(traj: &Trajectory, discount: f64) -> Result<Vec<f64>> {
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::domain(format!("discount must lie in (0, 1], got {discount}")));
    }
    check_trajectory(traj)?;
    Ok(discount_back(traj.terminal_reward(), traj.len(), discount))
}

fn discount_back(terminal_value: f64, len: usize, discount: f64) -> Vec<f64> {
    (0..len)
        .map(|t| terminal_value * discount.powi((len - 1 - t) as i32))
        .collect()
}

/// Converts a rollout group's terminal rewards into per-step advantages.
///
/// Terminal rewards are optionally centered by the group mean and divided by
/// the group's population std (only when that std exceeds [`EPS_STD`]; a
/// degenerate group is left with its centered values, all zeros, rather than
/// amplified by a vanishing denominator). The resulting per-trajectory
/// scalar is then discounted backward through the trajectory exactly like a
/// terminal reward.
pub fn compute_advantages(group: &RolloutGroup, cfg: &AdvantageConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if group.trajectories.len() != cfg.group_size {
        return Err(Error::domain(format!(
            "group holds {} trajectories but group_size is {}",
            group.trajectories.len(),
            cfg.group_size
        )));
    }
    for traj in &group.trajectories {
        check_trajectory(traj)?;
    }
    let rewards: Vec<f64> = group.trajectories.iter().map(|t| t.terminal_reward()).collect();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = variance.sqrt();
    let denom = if cfg.std_normalize && std > EPS_STD { std } else { 1.0 };
    Ok(group
        .trajectories
        .iter()
        .zip(&rewards)
        .map(|(traj, &r)| {
            let centered = if cfg.grouped_relative { r - mean } else { r };
            discount_back(centered / denom, traj.len(), cfg.discount)
        })
        .collect())
}

/// Flattens whole trajectories with their advantages into step samples.
///
/// The weight of every step of trajectory `g` is `1/(N × L_g)` where `N` is
/// the number of trajectories in this batch — fixed before any filtering.
pub fn flatten_batch(trajs: &[(&Trajectory, &[f64])]) -> Result<Vec<StepSample>> {
    if trajs.is_empty() {
        return Err(Error::domain("batch must contain at least one trajectory"));
    }
    let n = trajs.len() as f64;
    let mut samples = Vec::new();
    for (traj, advantages) in trajs {
        if traj.len() != advantages.len() {
            return Err(Error::domain(format!(
                "trajectory has {} steps but {} advantages",
                traj.len(),
                advantages.len()
            )));
        }
        let weight = 1.0 / (n * traj.len() as f64);
        for (step, &advantage) in traj.steps.iter().zip(advantages.iter()) {
            samples.push(StepSample {
                obs: step.obs.clone(),
                action: step.action,
                behavior_logprob: step.logprob,
                advantage,
                weight,
            });
        }
    }
    Ok(samples)
}

/// Drops samples whose advantage is numerically zero. Because weights were
/// fixed at flatten time, the surviving samples' gradient contributions are
/// untouched.
pub fn zero_advantage_filter(samples: Vec<StepSample>) -> Vec<StepSample> {
    samples.into_iter().filter(|s| s.advantage.abs() > ZERO_ADV_EPS).collect()
}

/// Clipped-surrogate (or REINFORCE) loss and gradient over a sample batch.
///
/// Returns the *loss* (negated objective) and its gradient, ready for
/// gradient-descent updates. Clipped-out samples — positive advantage with
/// `η > 1+ε`, or negative advantage with `η < 1−ε` — contribute exactly zero
/// gradient.
pub fn surrogate_loss_and_grad(
    batch: &[StepSample],
    params: &PolicyParams,
    cfg: &AdvantageConfig,
) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::domain("surrogate batch must be non-empty"));
    }
    let mut objective = 0.0;
    let mut grad = Array2::zeros(params.weights().dim());
    for sample in batch {
        let lp = params.logprob(&sample.obs, sample.action, cfg.decoding_temperature)?;
        if cfg.use_importance_ratio {
            let ratio = (lp - sample.behavior_logprob).exp();
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            let unclipped_term = ratio * sample.advantage;
            let clipped_term = clipped * sample.advantage;
            if unclipped_term <= clipped_term {
                objective += sample.weight * unclipped_term;
                let coef = sample.weight * ratio * sample.advantage;
                if coef != 0.0 {
                    let g = params.grad_logprob(&sample.obs, sample.action, cfg.decoding_temperature)?;
                    grad.scaled_add(coef, &g);
                }
            } else {
                // Clipped branch: constant in θ, no gradient.
                objective += sample.weight * clipped_term;
            }
        } else {
            objective += sample.weight * lp * sample.advantage;
            let coef = sample.weight * sample.advantage;
            if coef != 0.0 {
                let g = params.grad_logprob(&sample.obs, sample.action, cfg.decoding_temperature)?;
                grad.scaled_add(coef, &g);
            }
        }
    }
    grad.mapv_inplace(|g| -g);
    Ok((-objective, grad))
}

/// RL run shape: the advantage/objective config plus run-level controls.
#[derive(Debug, Clone, PartialEq)]
pub struct RlRunConfig {
    pub adv: AdvantageConfig,
    /// Optimizer-step budget (T_RL). Zero means evaluate-only.
    pub t_rl: usize,
    /// Goals sampled per epoch; each yields `group_size` rollouts.
    pub goals_per_epoch: usize,
    /// Whether RL rollouts see error-log feedback (evaluation always follows
    /// the suite's own setting).
    pub error_feedback: bool,
}

impl RlRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.adv.validate()?;
        if self.goals_per_epoch == 0 {
            return Err(Error::domain("goals_per_epoch must be >= 1"));
        }
        Ok(())
    }
}

/// One per-epoch history row. `rl_flops` counts everything billed since the
/// RL run began (rollouts, updates, evaluation); `cum_flops` adds whatever
/// the ledger already held when the run started (teacher generation and SFT
/// for this branch). Both snapshots are taken *before* the epoch's own
/// evaluation episodes are billed, so the epoch-0 row of a fresh branch is
/// exactly its SFT-side total.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rl_flops: u128,
    pub cum_flops: u128,
    pub heldout_goal_sr: f64,
    pub heldout_task_sr: f64,
    pub mean_traj_len: f64,
    pub filtered_frac: f64,
}

/// Evaluation callback: success rates on (held-out goals, held-out tasks),
/// billing its own episodes to the ledger it is given.
pub type EvalFn<'a> = dyn FnMut(&PolicyParams, &mut ComputeLedger) -> Result<(f64, f64)> + 'a;

/// Per-epoch sink, called with each history row as it is produced (the CLI
/// streams rows to CSV so partial runs remain inspectable).
pub type EpochSink<'a> = dyn FnMut(&EpochRecord) -> Result<()> + 'a;

/// Runs multi-turn GRPO from `start` for `cfg.t_rl` optimizer steps.
///
/// Epochs continue until the step budget is spent, with a hard cap of
/// `2·t_rl + 5` epochs: a converged policy under zero-advantage filtering
/// produces no usable batches, and the cap turns that stall into a clean
/// finish instead of an infinite loop. Returns the final checkpoint (step
/// count advanced by the RL steps actually taken) and the per-epoch history,
/// whose row 0 describes `start` itself before any update.
#[allow(clippy::too_many_arguments)]
pub fn grpo_train(
    suite: &TaskSuite,
    start: &Checkpoint,
    cfg: &RlRunConfig,
    sampler: &mut TaskSampler,
    run_seed: u64,
    ledger: &mut ComputeLedger,
    cost: &CostModel,
    eval_fn: &mut EvalFn<'_>,
    on_epoch: &mut EpochSink<'_>,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    if start.params.feature_dim() != suite.feature_dim()
        || start.params.action_vocab() != suite.action_vocab()
    {
        return Err(Error::domain(format!(
            "checkpoint shape {}x{} does not match suite {}x{}",
            start.params.feature_dim(),
            start.params.action_vocab(),
            suite.feature_dim(),
            suite.action_vocab()
        )));
    }
    let mut params = start.params.clone();
    let base_flops = ledger.total();
    let mut history = Vec::new();

    // Row 0: the starting checkpoint, before any RL compute.
    let mut record = EpochRecord {
        epoch: 0,
        rl_flops: 0,
        cum_flops: base_flops,
        heldout_goal_sr: 0.0,
        heldout_task_sr: 0.0,
        mean_traj_len: 0.0,
        filtered_frac: 0.0,
    };
    let (goal_sr, task_sr) = eval_fn(&params, ledger)?;
    record.heldout_goal_sr = goal_sr;
    record.heldout_task_sr = task_sr;
    on_epoch(&record)?;
    history.push(record);

    let max_epochs = 2 * cfg.t_rl + 5;
    let mut steps_done = 0;
    let mut epoch = 0;
    while steps_done < cfg.t_rl && epoch < max_epochs {
        epoch += 1;

        let mut goal_rng = rng::stream_rng(run_seed, &[stream::GOALS, epoch as u64]);
        let goals = (0..cfg.goals_per_epoch)
            .map(|_| {
                let task_index = sampler.sample(&mut goal_rng);
                suite.sample_train_goal_for_task(task_index, &mut goal_rng)
            })
            .collect::<Result<Vec<Goal>>>()?;

        let mut rollout_rng = rng::stream_rng(run_seed, &[stream::ROLLOUT, epoch as u64]);
        let groups = collect_rollouts(
            suite,
            &params,
            &goals,
            &cfg.adv,
            cfg.error_feedback,
            &mut rollout_rng,
            ledger,
            cost,
        )?;

        let mut total_steps = 0usize;
        let mut total_trajs = 0usize;
        for group in &groups {
            for traj in &group.trajectories {
                sampler.record(traj.goal.task_id, traj.success)?;
                total_steps += traj.len();
                total_trajs += 1;
            }
        }

        // Pair every trajectory with its advantages, then cut into batches of
        // whole trajectories once each batch holds `effective_batch_size`
        // usable (post-filter) steps.
        let mut entries: Vec<(&Trajectory, Vec<f64>)> = Vec::with_capacity(total_trajs);
        for group in &groups {
            let advantages = compute_advantages(group, &cfg.adv)?;
            for (traj, adv) in group.trajectories.iter().zip(advantages) {
                entries.push((traj, adv));
            }
        }
        let usable = |adv: &[f64]| {
            if cfg.adv.zero_adv_filter {
                adv.iter().filter(|a| a.abs() > ZERO_ADV_EPS).count()
            } else {
                adv.len()
            }
        };
        let mut dropped_steps = 0usize;
        let mut batches: Vec<Vec<usize>> = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut current_usable = 0usize;
        for (idx, (traj, adv)) in entries.iter().enumerate() {
            let kept = usable(adv);
            dropped_steps += traj.len() - kept;
            current.push(idx);
            current_usable += kept;
            if current_usable >= cfg.adv.effective_batch_size {
                batches.push(std::mem::take(&mut current));
                current_usable = 0;
            }
        }
        if !current.is_empty() && current_usable > 0 {
            batches.push(current);
        }

        for batch_ids in &batches {
            if steps_done >= cfg.t_rl {
                break;
            }
            let batch_trajs: Vec<(&Trajectory, &[f64])> =
                batch_ids.iter().map(|&i| (entries[i].0, entries[i].1.as_slice())).collect();
            let mut samples = flatten_batch(&batch_trajs)?;
            if cfg.adv.zero_adv_filter {
                samples = zero_advantage_filter(samples);
            }
            if samples.is_empty() {
                continue;
            }
            let n_samples = samples.len();
            let (_, grad) = surrogate_loss_and_grad(&samples, &params, &cfg.adv)?;
            params.add_scaled(&grad, -cfg.adv.learning_rate)?;
            ledger.bill_rl_train(cost.student_train_flops(n_samples as u128)?)?;
            steps_done += 1;
        }

        let mut record = EpochRecord {
            epoch,
            rl_flops: ledger.total() - base_flops,
            cum_flops: ledger.total(),
            heldout_goal_sr: 0.0,
            heldout_task_sr: 0.0,
            mean_traj_len: if total_trajs > 0 {
                total_steps as f64 / total_trajs as f64
            } else {
                0.0
            },
            filtered_frac: if total_steps > 0 {
                dropped_steps as f64 / total_steps as f64
            } else {
                0.0
            },
        };
        let (goal_sr, task_sr) = eval_fn(&params, ledger)?;
        record.heldout_goal_sr = goal_sr;
        record.heldout_task_sr = task_sr;
        on_epoch(&record)?;
        history.push(record);
    }

    Ok((Checkpoint { params, step: start.step + steps_done }, history))
}
