//! Displacement metrics, success, relation accuracy and the diagnostic
//! trust and policy losses.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ground_truth_relation, ActionVec, MetaAction, RelationEdge, SceneState};
use crate::math;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("trajectory lengths differ: planned {planned}, reference {reference}")]
    LengthMismatch { planned: usize, reference: usize },
    #[error("trajectories are empty")]
    Empty,
    #[error("old policy gives zero probability to the taken action {0}")]
    ZeroOldProbability(MetaAction),
}

/// Average and final Euclidean displacement.
pub fn ade_fde(planned: &[(f64, f64)], reference: &[(f64, f64)]) -> Result<(f64, f64), EvalError> {
    if planned.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            planned: planned.len(),
            reference: reference.len(),
        });
    }
    if planned.is_empty() {
        return Err(EvalError::Empty);
    }
    let d: Vec<f64> = planned
        .iter()
        .zip(reference)
        .map(|(p, r)| math::hypot(p.0 - r.0, p.1 - r.1))
        .collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1]))
}

/// Collision free and ending within `delta` of the reference.
pub fn success(collided: bool, fde: f64, delta: f64) -> bool {
    !collided && fde <= delta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpaOutcome {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Nothing was predicted; `accuracy` is 0 by convention.
    pub empty: bool,
}

impl RpaOutcome {
    pub fn from_counts(correct: usize, total: usize) -> Self {
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            empty: total == 0,
        }
    }

    pub fn merge(&self, other: &RpaOutcome) -> RpaOutcome {
        Self::from_counts(self.correct + other.correct, self.total + other.total)
    }
}

/// Share of predicted relations that match the geometric ground truth.
/// Edges naming vehicles absent from `scene` count as wrong.
pub fn rpa(predicted: &[RelationEdge], scene: &SceneState, long_threshold: f64) -> RpaOutcome {
    let correct = predicted
        .iter()
        .filter(|e| {
            scene
                .others
                .iter()
                .find(|o| o.id == e.other_id)
                .is_some_and(|o| ground_truth_relation(&scene.ego, o, long_threshold) == e.relation)
        })
        .count();
    RpaOutcome::from_counts(correct, predicted.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_trust: f64,
    pub lambda_policy: f64,
    pub epsilon_clip: f64,
    pub lambda_kl: f64,
    pub softmax_temperature: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_trust: 1.0,
            lambda_policy: 1.0,
            epsilon_clip: 0.2,
            lambda_kl: 0.01,
            softmax_temperature: 1.0,
            gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustSample {
    pub q: f64,
    pub observed_return: f64,
    pub trust: f64,
}

/// Mean of `C * (Q - R)^2`; zero for no samples.
pub fn trust_loss(samples: &[TrustSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| s.trust * (s.q - s.observed_return) * (s.q - s.observed_return))
        .sum::<f64>()
        / samples.len() as f64
}

/// Discounted sum of a reward sequence.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub policy: ActionVec,
    pub old_policy: ActionVec,
    pub q_values: ActionVec,
    pub action: MetaAction,
    pub advantage: f64,
    pub trust: f64,
}

pub fn softmax(values: &ActionVec, temperature: f64) -> ActionVec {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = values.map(|v| math::exp((v - max) / temperature));
    let total: f64 = e.iter().sum();
    e.map(|v| v / total)
}

/// `KL(p || q)` with natural log; terms with `p = 0` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * math::ln(pi / qi))
        .sum()
}

/// Advantage of `action` against the policy-weighted mean of the Q-values.
pub fn advantage(q_values: &ActionVec, policy: &ActionVec, action: MetaAction) -> f64 {
    let baseline: f64 = q_values.iter().zip(policy).map(|(q, p)| q * p).sum();
    q_values[action.index()] - baseline
}

/// Clipped surrogate term `-C * min(rho A, clip(rho) A)` of one sample.
pub fn clipped_surrogate(sample: &PolicySample, epsilon_clip: f64) -> Result<f64, EvalError> {
    let i = sample.action.index();
    if sample.old_policy[i] == 0.0 {
        return Err(EvalError::ZeroOldProbability(sample.action));
    }
    let rho = sample.policy[i] / sample.old_policy[i];
    let a = sample.advantage;
    let clipped = rho.clamp(1.0 - epsilon_clip, 1.0 + epsilon_clip);
    Ok(-sample.trust * (rho * a).min(clipped * a))
}

/// Trust-weighted clipped surrogate plus KL to the soft Q policy, averaged.
pub fn policy_loss(samples: &[PolicySample], cfg: &LossConfig) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let pi_q = softmax(&s.q_values, cfg.softmax_temperature);
        total += clipped_surrogate(s, cfg.epsilon_clip)? + cfg.lambda_kl * kl_divergence(&s.policy, &pi_q);
    }
    Ok(total / samples.len() as f64)
}

pub fn total_loss(trust_loss: f64, policy_loss: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_trust * trust_loss + cfg.lambda_policy * policy_loss
}

/// Metrics of a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub sr: f64,
    pub rpa: f64,
    pub episode_count: usize,
}

/// Per-episode metrics that feed a [`MetricReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ade: f64,
    pub fde: f64,
    pub success: bool,
    pub collided: bool,
    pub rpa: RpaOutcome,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        math::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    };
    Stat { mean, std }
}

impl MetricReport {
    /// Averages ADE, FDE and success; RPA pools every prediction.
    pub fn from_episodes(episodes: &[EpisodeMetrics]) -> Self {
        let n = episodes.len();
        if n == 0 {
            return Self {
                ade: 0.0,
                fde: 0.0,
                sr: 0.0,
                rpa: 0.0,
                episode_count: 0,
            };
        }
        let pooled = episodes
            .iter()
            .fold(RpaOutcome::from_counts(0, 0), |acc, e| acc.merge(&e.rpa));
        Self {
            ade: episodes.iter().map(|e| e.ade).sum::<f64>() / n as f64,
            fde: episodes.iter().map(|e| e.fde).sum::<f64>() / n as f64,
            sr: episodes.iter().filter(|e| e.success).count() as f64 / n as f64,
            rpa: pooled.accuracy,
            episode_count: n,
        }
    }
}
