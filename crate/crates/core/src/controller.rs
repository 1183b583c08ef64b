//! Actor-critic targets and losses evaluated on imagined trajectories.
//!
//! Stop-gradient is the identity here: nothing in this crate differentiates.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.995;
pub const DEFAULT_LAMBDA: f64 = 0.95;
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 0.001;
/// Collection-time exploration rate.
pub const DEFAULT_EPSILON: f64 = 0.01;
/// Evaluation sampling temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Inputs of the λ-return recursion over an `H`-step rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnInputs {
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `H + 1` values; the last one bootstraps the tail.
    pub values: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl ReturnInputs {
    pub fn new(rewards: Vec<f64>, dones: Vec<bool>, values: Vec<f64>) -> Self {
        Self {
            rewards,
            dones,
            values,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
        }
    }

    fn validate(&self) -> Result<()> {
        let h = self.rewards.len();
        if self.dones.len() != h || self.values.len() != h + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {h} dones and {} values, got {} and {}",
                h + 1,
                self.dones.len(),
                self.values.len()
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// `G_t = r_t + γ(1 - d_t)((1 - λ)V_{t+1} + λG_{t+1})`, `G_H = V_H`.
pub fn lambda_returns(inputs: &ReturnInputs) -> Result<Vec<f64>> {
    inputs.validate()?;
    let h = inputs.rewards.len();
    let (gamma, lambda) = (inputs.gamma, inputs.lambda);
    let mut out = vec![0.0; h];
    let mut next = inputs.values[h];
    for t in (0..h).rev() {
        let live = if inputs.dones[t] { 0.0 } else { 1.0 };
        let g = inputs.rewards[t]
            + gamma * live * ((1.0 - lambda) * inputs.values[t + 1] + lambda * next);
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Mean squared error between values and their targets.
pub fn value_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    if values.len() != returns.len() {
        return Err(Error::DimensionMismatch {
            context: "value loss lengths",
            expected: returns.len(),
            actual: values.len(),
        });
    }
    if values.is_empty() {
        return Err(Error::Empty("value loss inputs"));
    }
    let sum: f64 = values.iter().zip(returns).map(|(v, g)| (v - g) * (v - g)).sum();
    Ok(sum / values.len() as f64)
}

/// One step of the REINFORCE-with-baseline objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub action_log_probs: Vec<f64>,
    pub chosen_action: usize,
    pub ret: f64,
    pub baseline: f64,
    pub entropy_weight: f64,
}

impl PolicyStep {
    pub fn new(action_log_probs: Vec<f64>, chosen_action: usize, ret: f64, baseline: f64) -> Self {
        Self {
            action_log_probs,
            chosen_action,
            ret,
            baseline,
            entropy_weight: DEFAULT_ENTROPY_WEIGHT,
        }
    }

    pub fn entropy(&self) -> f64 {
        -self
            .action_log_probs
            .iter()
            .filter(|lp| lp.is_finite())
            .map(|&lp| lp.exp() * lp)
            .sum::<f64>()
    }
}

/// Log-softmax of a logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Mean over steps of `-log π(a_t)(G_t - V_t) - α H(π_t)`.
pub fn policy_loss(steps: &[PolicyStep]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::Empty("policy steps"));
    }
    let mut total = 0.0;
    for step in steps {
        if step.action_log_probs.is_empty() {
            return Err(Error::Empty("action set"));
        }
        let mass: f64 = step.action_log_probs.iter().map(|lp| lp.exp()).sum();
        if !mass.is_finite() || (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized(mass));
        }
        let lp = *step.action_log_probs.get(step.chosen_action).ok_or(Error::OutOfRange {
            index: step.chosen_action,
            max: step.action_log_probs.len(),
        })?;
        total += -lp * (step.ret - step.baseline) - step.entropy_weight * step.entropy();
    }
    Ok(total / steps.len() as f64)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector using one uniform variate.
pub fn sample_from_probs<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draw from `softmax(logits / temperature)`; temperature 0 is argmax and
/// consumes no randomness.
pub fn sample_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("action set"));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be finite and >= 0")));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    Ok(sample_from_probs(&probs, rng))
}

/// ε-greedy over a temperature-scaled softmax.
pub fn sample_action<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("action set"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..logits.len()));
    }
    sample_logits(logits, temperature, rng)
}
