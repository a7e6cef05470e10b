//! Success-rate-targeted task sampling.
//!
//! The curriculum tracks an exponential moving average `p̂` of each train
//! task's success rate and samples tasks with Boltzmann weights
//! `exp(−(p̂ − μ)² / ρ)`, concentrating training on tasks whose estimated
//! success rate sits near the target μ. With the curriculum disabled tasks
//! are sampled uniformly and success statistics are still tracked (they are
//! free), but never consulted.

use rand::Rng;

use crate::error::{Error, Result};

/// EMA success estimates plus the Boltzmann sampling rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    p_hat: Vec<f64>,
    mu: f64,
    rho: f64,
    lambda: f64,
}

impl CurriculumState {
    /// `n_tasks` estimates initialized to 0.5 (maximum uncertainty).
    pub fn new(n_tasks: usize, mu: f64, rho: f64, lambda: f64) -> Result<Self> {
        if n_tasks == 0 {
            return Err(Error::domain("curriculum needs at least one task"));
        }
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::domain(format!("target success rate mu must lie in [0, 1], got {mu}")));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::domain(format!("temperature rho must be > 0, got {rho}")));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::domain(format!("EMA rate lambda must lie in (0, 1], got {lambda}")));
        }
        Ok(CurriculumState { p_hat: vec![0.5; n_tasks], mu, rho, lambda })
    }

    pub fn n_tasks(&self) -> usize {
        self.p_hat.len()
    }

    pub fn p_hat(&self) -> &[f64] {
        &self.p_hat
    }

    /// Overrides the estimates (tests and warm starts).
    pub fn set_p_hat(&mut self, p_hat: Vec<f64>) -> Result<()> {
        if p_hat.len() != self.p_hat.len() {
            return Err(Error::domain(format!(
                "expected {} estimates, got {}",
                self.p_hat.len(),
                p_hat.len()
            )));
        }
        if !p_hat.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::domain("success estimates must lie in [0, 1]"));
        }
        self.p_hat = p_hat;
        Ok(())
    }

    /// Folds one trajectory outcome into the task's estimate:
    /// `p̂ ← (1−λ)·p̂ + λ·1[success]`.
    pub fn update(&mut self, task_index: usize, success: bool) -> Result<()> {
        let p = self
            .p_hat
            .get_mut(task_index)
            .ok_or_else(|| Error::domain(format!("task index {task_index} out of range")))?;
        *p = (1.0 - self.lambda) * *p + self.lambda * if success { 1.0 } else { 0.0 };
        Ok(())
    }

    /// Normalized Boltzmann sampling probabilities over tasks.
    pub fn sampling_probabilities(&self) -> Vec<f64> {
        let weights: Vec<f64> = self
            .p_hat
            .iter()
            .map(|&p| {
                let d = p - self.mu;
                (-(d * d) / self.rho).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        // Weights lie in (0, 1], so the total is strictly positive.
        weights.into_iter().map(|w| w / total).collect()
    }

    /// Draws one task index from the Boltzmann distribution.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let probs = self.sampling_probabilities();
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// Task selection strategy for RL epochs: uniform, or curriculum-weighted.
#[derive(Debug, Clone)]
pub enum TaskSampler {
    Uniform { n_tasks: usize },
    Curriculum(CurriculumState),
}

impl TaskSampler {
    pub fn uniform(n_tasks: usize) -> Result<Self> {
        if n_tasks == 0 {
            return Err(Error::domain("sampler needs at least one task"));
        }
        Ok(TaskSampler::Uniform { n_tasks })
    }

    pub fn curriculum(state: CurriculumState) -> Self {
        TaskSampler::Curriculum(state)
    }

    pub fn n_tasks(&self) -> usize {
        match self {
            TaskSampler::Uniform { n_tasks } => *n_tasks,
            TaskSampler::Curriculum(state) => state.n_tasks(),
        }
    }

    /// Draws a train-task index.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match self {
            TaskSampler::Uniform { n_tasks } => rng.random_range(0..*n_tasks),
            TaskSampler::Curriculum(state) => state.sample(rng),
        }
    }

    /// Records a trajectory outcome. Uniform sampling ignores it.
    pub fn record(&mut self, task_index: usize, success: bool) -> Result<()> {
        match self {
            TaskSampler::Uniform { n_tasks } => {
                if task_index >= *n_tasks {
                    return Err(Error::domain(format!("task index {task_index} out of range")));
                }
                Ok(())
            }
            TaskSampler::Curriculum(state) => state.update(task_index, success),
        }
    }
}
