//! Dirichlet trust policy, trust-aware PUCT search and the EMA update of
//! the policy concentrations.

mod mcts;

pub use mcts::{plan, puct_select, NodeStats, PlanError, PlanResult, Search, StepResult, World};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::domain::{ActionVec, MetaAction};
use crate::oracle::QueryBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Dirichlet expectation `alpha / sum(alpha)`.
    #[default]
    Mean,
    /// One Dirichlet draw per planning cycle.
    Sample,
}

/// How the exploration bonus is formed during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// `Q + lambda * C * pi * sqrt(N) / (1 + n)`.
    #[default]
    TrustPuct,
    /// `Q + lambda * sqrt(N) / (1 + n)`, no prior and no trust.
    Ucb,
    /// `Q` alone.
    PriorFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Simulations per planning cycle.
    pub k: u32,
    pub depth_cap: u32,
    pub gamma: f64,
    /// Recursion stops once `gamma^d < tau`.
    pub tau: f64,
    pub lambda_explore: f64,
    pub seed: u64,
    pub policy_mode: PolicyMode,
    pub rule: SelectionRule,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 50,
            depth_cap: 10,
            gamma: 0.99,
            tau: 0.01,
            lambda_explore: 1.0,
            seed: 0,
            policy_mode: PolicyMode::Mean,
            rule: SelectionRule::TrustPuct,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.k == 0 {
            return Err("k must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err("tau must lie in (0, 1)");
        }
        if self.lambda_explore < 0.0 {
            return Err("lambda_explore must be nonnegative");
        }
        Ok(())
    }
}

/// Per-action concentrations carried across planning cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub alpha: ActionVec,
    pub beta: f64,
    pub epsilon_smooth: f64,
    pub gamma_diri: f64,
}

impl Default for DirichletParams {
    fn default() -> Self {
        Self {
            alpha: [1.0; MetaAction::COUNT],
            beta: 1.5,
            epsilon_smooth: 0.1,
            gamma_diri: 0.3,
        }
    }
}

impl DirichletParams {
    /// Parameters whose concentrations start at `target`.
    pub fn with_alpha(&self, alpha: ActionVec) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }
}

/// Smoothed vote share per action. A degraded batch is uniform at `epsilon_smooth`.
pub fn action_frequencies(batch: &QueryBatch, epsilon_smooth: f64) -> ActionVec {
    let m = batch.effective_m;
    core::array::from_fn(|i| {
        if m == 0 {
            epsilon_smooth
        } else {
            batch.action_counts[i] as f64 / m as f64 + epsilon_smooth
        }
    })
}

/// Trust-amplified concentration target `f * (1 + beta * C)`.
pub fn dirichlet_target(f: &ActionVec, trust: f64, beta: f64) -> ActionVec {
    f.map(|v| v * (1.0 + beta * trust))
}

/// Mean of the Dirichlet, or one seeded draw from it.
pub fn policy_from_params<R: Rng + ?Sized>(alpha: &ActionVec, mode: PolicyMode, rng: &mut R) -> ActionVec {
    let mean = || {
        let total: f64 = alpha.iter().sum();
        alpha.map(|a| a / total)
    };
    match mode {
        PolicyMode::Mean => mean(),
        PolicyMode::Sample => {
            let mut draw = [0.0; MetaAction::COUNT];
            for (d, &a) in draw.iter_mut().zip(alpha) {
                *d = match Gamma::new(a, 1.0) {
                    Ok(g) => g.sample(rng),
                    Err(_) => 0.0,
                };
            }
            let total: f64 = draw.iter().sum();
            if total > 0.0 && total.is_finite() {
                draw.map(|d| d / total)
            } else {
                mean()
            }
        }
    }
}

/// `alpha' = (1 - gamma_diri) * alpha + gamma_diri * target`.
pub fn update_dirichlet_ema(params: &DirichletParams, target: &ActionVec) -> DirichletParams {
    let g = params.gamma_diri;
    let mut alpha = params.alpha;
    for (a, t) in alpha.iter_mut().zip(target) {
        *a = (1.0 - g) * *a + g * t;
    }
    params.with_alpha(alpha)
}
