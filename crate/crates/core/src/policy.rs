//! Linear-softmax categorical policy.
//!
//! Logits are `W · x` for a sparse binary observation `x`, divided by a
//! sampling temperature before the softmax. Sampling, log-probability, and
//! score gradients all share one log-softmax computation, so the probability
//! reported at sampling time is bit-identical to what `logprob` later
//! recomputes for the same parameters — an equality importance ratios rely
//! on at the start of every RL epoch.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};

/// Policy weights: one row per feature, one column per action.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Array2<f64>,
}

/// An action drawn from the policy together with its log-probability under
/// the sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub action: usize,
    pub logprob: f64,
}

impl PolicyParams {
    /// Zero-initialized parameters: the uniform policy at any temperature.
    pub fn zeros(feature_dim: usize, action_vocab: usize) -> Result<Self> {
        if feature_dim == 0 || action_vocab == 0 {
            return Err(Error::domain("feature_dim and action_vocab must be >= 1"));
        }
        Ok(PolicyParams { weights: Array2::zeros((feature_dim, action_vocab)) })
    }

    /// Wraps an explicit weight matrix; entries must be finite.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::domain("weight matrix must be non-empty"));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::domain("weight matrix contains non-finite entries"));
        }
        Ok(PolicyParams { weights })
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn action_vocab(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mutable access to the weights, for optimizers and tests.
    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    /// In-place SGD-style update `W += scale · grad`.
    pub fn add_scaled(&mut self, grad: &Array2<f64>, scale: f64) -> Result<()> {
        if grad.dim() != self.weights.dim() {
            return Err(Error::domain(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.dim(),
                self.weights.dim()
            )));
        }
        self.weights.scaled_add(scale, grad);
        Ok(())
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        if obs.feature_dim() != self.feature_dim() {
            return Err(Error::domain(format!(
                "observation dimension {} does not match policy feature_dim {}",
                obs.feature_dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::domain(format!(
                "temperature must be finite and > 0, got {temperature}"
            )));
        }
        Ok(())
    }

    /// Raw (untempered) logits `W · x`.
    pub fn logits(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let mut logits = vec![0.0; self.action_vocab()];
        for &f in obs.active() {
            let row = self.weights.row(f as usize);
            for (l, &w) in logits.iter_mut().zip(row.iter()) {
                *l += w;
            }
        }
        Ok(logits)
    }

    /// Log-probabilities of all actions at the given temperature.
    pub fn log_probs(&self, obs: &Observation, temperature: f64) -> Result<Vec<f64>> {
        Self::check_temperature(temperature)?;
        let mut z = self.logits(obs)?;
        for l in z.iter_mut() {
            *l /= temperature;
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = z.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        for l in z.iter_mut() {
            *l -= log_sum;
        }
        Ok(z)
    }

    /// Samples an action; the returned log-probability is exactly what
    /// [`PolicyParams::logprob`] yields for the same `(obs, action)`.
    pub fn sample(
        &self,
        obs: &Observation,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<ActionSample> {
        let log_probs = self.log_probs(obs, temperature)?;
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut action = log_probs.len() - 1;
        for (a, &lp) in log_probs.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                action = a;
                break;
            }
        }
        Ok(ActionSample { action, logprob: log_probs[action] })
    }

    /// Log-probability of one action.
    pub fn logprob(&self, obs: &Observation, action: usize, temperature: f64) -> Result<f64> {
        let log_probs = self.log_probs(obs, temperature)?;
        log_probs.get(action).copied().ok_or_else(|| {
            Error::domain(format!(
                "action {action} out of range for vocab {}",
                self.action_vocab()
            ))
        })
    }

    /// Gradient of `logprob(obs, action, T)` with respect to the weights:
    /// `x ⊗ (onehot(action) − softmax(logits/T)) / T`, dense over the full
    /// parameter shape (rows of inactive features are zero).
    pub fn grad_logprob(
        &self,
        obs: &Observation,
        action: usize,
        temperature: f64,
    ) -> Result<Array2<f64>> {
        let log_probs = self.log_probs(obs, temperature)?;
        if action >= log_probs.len() {
            return Err(Error::domain(format!(
                "action {action} out of range for vocab {}",
                self.action_vocab()
            )));
        }
        let mut grad = Array2::zeros(self.weights.dim());
        for &f in obs.active() {
            for (a, &lp) in log_probs.iter().enumerate() {
                let indicator = if a == action { 1.0 } else { 0.0 };
                grad[[f as usize, a]] = (indicator - lp.exp()) / temperature;
            }
        }
        Ok(grad)
    }
}

/// A snapshot of policy parameters at a training step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    /// Total optimizer steps that produced these parameters.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    feature_dim: usize,
    action_vocab: usize,
    step: usize,
    /// Row-major weights, length `feature_dim × action_vocab`.
    weights: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            feature_dim: self.params.feature_dim(),
            action_vocab: self.params.action_vocab(),
            step: self.step,
            weights: self.params.weights.iter().cloned().collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("malformed checkpoint {}: {e}", path.display())))?;
        if file.weights.len() != file.feature_dim * file.action_vocab {
            return Err(Error::input(format!(
                "checkpoint {} declares {}x{} weights but stores {} values",
                path.display(),
                file.feature_dim,
                file.action_vocab,
                file.weights.len()
            )));
        }
        if !file.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::input(format!(
                "checkpoint {} contains non-finite weights",
                path.display()
            )));
        }
        let weights =
            Array2::from_shape_vec((file.feature_dim, file.action_vocab), file.weights)
                .map_err(|e| Error::input(format!("checkpoint shape error: {e}")))?;
        Ok(Checkpoint { params: PolicyParams::from_weights(weights)?, step: file.step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, stream_rng};
    use proptest::prelude::*;

    fn obs(dim: usize, active: Vec<u32>) -> Observation {
        Observation::from_active(dim, active).unwrap()
    }

    #[test]
    fn zero_weights_are_uniform_at_any_temperature() {
        let params = PolicyParams::zeros(6, 4).unwrap();
        let o = obs(6, vec![0, 3]);
        for t in [0.1, 0.5, 1.0] {
            let lp = params.log_probs(&o, t).unwrap();
            for &l in &lp {
                assert!((l - (0.25f64).ln()).abs() < 1e-12, "uniform log-prob expected");
            }
        }
    }

    #[test]
    fn temperature_sharpens_the_distribution() {
        let mut params = PolicyParams::zeros(3, 3).unwrap();
        params.weights_mut()[[0, 1]] = 1.0;
        let o = obs(3, vec![0]);
        let p_hot = params.logprob(&o, 1, 1.0).unwrap().exp();
        let p_cold = params.logprob(&o, 1, 0.25).unwrap().exp();
        assert!(
            p_cold > p_hot,
            "lower temperature must concentrate mass on the argmax ({p_cold} vs {p_hot})"
        );
    }

    #[test]
    fn log_probs_normalize() {
        let mut params = PolicyParams::zeros(5, 4).unwrap();
        params.weights_mut()[[1, 0]] = 2.0;
        params.weights_mut()[[4, 2]] = -1.5;
        let o = obs(5, vec![1, 4]);
        let lp = params.log_probs(&o, 0.7).unwrap();
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "probabilities must sum to 1, got {total}");
    }

    #[test]
    fn sample_logprob_matches_logprob_exactly() {
        let mut params = PolicyParams::zeros(8, 5).unwrap();
        params.weights_mut()[[2, 3]] = 0.8;
        params.weights_mut()[[7, 1]] = -0.3;
        let o = obs(8, vec![2, 7]);
        let mut rng = stream_rng(5, &[stream::ROLLOUT]);
        for _ in 0..200 {
            let s = params.sample(&o, 0.5, &mut rng).unwrap();
            let lp = params.logprob(&o, s.action, 0.5).unwrap();
            assert_eq!(s.logprob, lp, "sampling must report bit-identical log-probs");
        }
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let mut params = PolicyParams::zeros(2, 3).unwrap();
        params.weights_mut()[[0, 0]] = 1.0;
        let o = obs(2, vec![0]);
        let probs: Vec<f64> =
            params.log_probs(&o, 1.0).unwrap().iter().map(|l| l.exp()).collect();
        let mut rng = stream_rng(11, &[stream::ROLLOUT]);
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[params.sample(&o, 1.0, &mut rng).unwrap().action] += 1;
        }
        for a in 0..3 {
            let freq = counts[a] as f64 / n as f64;
            let sigma = (probs[a] * (1.0 - probs[a]) / n as f64).sqrt();
            assert!(
                (freq - probs[a]).abs() < 5.0 * sigma,
                "action {a}: frequency {freq} too far from probability {}",
                probs[a]
            );
        }
    }

    #[test]
    fn grad_logprob_matches_finite_differences() {
        let mut params = PolicyParams::zeros(4, 3).unwrap();
        params.weights_mut()[[0, 0]] = 0.3;
        params.weights_mut()[[2, 1]] = -0.7;
        params.weights_mut()[[3, 2]] = 1.1;
        let o = obs(4, vec![0, 2, 3]);
        let h = 1e-5;
        for action in 0..3 {
            for temperature in [0.25, 1.0] {
                let grad = params.grad_logprob(&o, action, temperature).unwrap();
                for f in 0..4 {
                    for a in 0..3 {
                        let mut plus = params.clone();
                        plus.weights_mut()[[f, a]] += h;
                        let mut minus = params.clone();
                        minus.weights_mut()[[f, a]] -= h;
                        let fd = (plus.logprob(&o, action, temperature).unwrap()
                            - minus.logprob(&o, action, temperature).unwrap())
                            / (2.0 * h);
                        assert!(
                            (grad[[f, a]] - fd).abs() < 1e-7,
                            "entry ({f},{a}) action {action} T {temperature}: analytic {} vs fd {fd}",
                            grad[[f, a]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn grad_rows_of_inactive_features_are_zero() {
        let params = PolicyParams::zeros(5, 3).unwrap();
        let o = obs(5, vec![1, 3]);
        let grad = params.grad_logprob(&o, 0, 1.0).unwrap();
        for f in [0usize, 2, 4] {
            assert!(grad.row(f).iter().all(|&g| g == 0.0), "inactive row {f} must be zero");
        }
    }

    #[test]
    fn dimension_and_argument_errors() {
        let params = PolicyParams::zeros(4, 3).unwrap();
        let o = obs(5, vec![0]);
        assert!(matches!(params.logits(&o), Err(Error::Domain(_))));
        let o = obs(4, vec![0]);
        assert!(matches!(params.logprob(&o, 3, 1.0), Err(Error::Domain(_))));
        assert!(matches!(params.logprob(&o, 0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(params.logprob(&o, 0, f64::NAN), Err(Error::Domain(_))));
        let grad = Array2::zeros((3, 3));
        let mut p = params.clone();
        assert!(matches!(p.add_scaled(&grad, 1.0), Err(Error::Domain(_))));
        assert!(PolicyParams::zeros(0, 3).is_err());
        let bad = Array2::from_elem((2, 2), f64::NAN);
        assert!(matches!(PolicyParams::from_weights(bad), Err(Error::Domain(_))));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut params = PolicyParams::zeros(3, 2).unwrap();
        params.weights_mut()[[1, 0]] = 0.123456789012345;
        params.weights_mut()[[2, 1]] = -9.876;
        let ckpt = Checkpoint { params, step: 42 };
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.params, ckpt.params, "weights must round-trip exactly");
    }

    #[test]
    fn malformed_checkpoints_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"feature_dim\": 2}").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Input(_))));
        std::fs::write(
            &path,
            "{\"feature_dim\": 2, \"action_vocab\": 2, \"step\": 0, \"weights\": [1.0, 2.0]}",
        )
        .unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Input(_))), "length mismatch");
        assert!(matches!(Checkpoint::load(&dir.path().join("absent.json")), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn log_probs_are_finite_and_normalized(
            entries in proptest::collection::vec(-30.0f64..30.0, 12),
            active in proptest::collection::vec(0u32..4, 1..4),
            temperature in 0.05f64..4.0
        ) {
            let weights = Array2::from_shape_vec((4, 3), entries).unwrap();
            let params = PolicyParams::from_weights(weights).unwrap();
            let o = Observation::from_active(4, active).unwrap();
            let lp = params.log_probs(&o, temperature).unwrap();
            prop_assert!(lp.iter().all(|l| l.is_finite()));
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
