//! Dual-trust scoring: commonsense consistency, kinematic feasibility, the
//! gate combining them, and feedback-driven recalibration.

mod encoder;

pub use encoder::{EncodedState, EncoderParams, TrustEncoder};

use alloc::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{TrustScores, VehicleState, VehicleTrust};
use crate::math;
use crate::oracle::QueryBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustConfig {
    /// Entropy penalty on relation disagreement.
    pub alpha_llm: f64,
    /// Weights of the speed, acceleration, heading and lane terms.
    pub omega: [f64; 4],
    pub lambda_acc: f64,
    pub v_max: f64,
    /// Feasibility threshold of the gate.
    pub eta: f64,
    /// Gate steepness.
    pub kappa: f64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            alpha_llm: 0.3,
            omega: [0.25; 4],
            lambda_acc: 0.5,
            v_max: 40.0,
            eta: 0.5,
            kappa: 10.0,
        }
    }
}

impl TrustConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        let sum: f64 = self.omega.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err("kinematic weights must sum to 1");
        }
        if self.omega.iter().any(|w| *w <= 0.0)
            || self.alpha_llm <= 0.0
            || self.lambda_acc <= 0.0
            || self.v_max <= 0.0
            || self.kappa <= 0.0
        {
            return Err("trust parameters must be positive");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err("eta must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub gamma_decay: f64,
    /// Neutral baseline trust decays toward.
    pub c0: f64,
    /// Reward sensitivity of the adaptive decay.
    pub kappa_r: f64,
    /// Vehicles farther than this from the ego are unobserved.
    pub sensor_radius: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            gamma_decay: 0.95,
            c0: 0.5,
            kappa_r: 1.0,
            sensor_radius: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("degraded batch: no response parsed, plan with zero trust")]
pub struct DegradedBatch;

/// Per-vehicle and scene-mean commonsense trust of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonsenseTrust {
    pub per_vehicle: BTreeMap<u32, f64>,
    pub scene_mean: f64,
}

/// `max_k p_k - alpha * H(p)` of one relation vote distribution. Can be negative.
pub fn consistency_score(frequencies: &[f64], alpha_llm: f64) -> f64 {
    let max = frequencies.iter().copied().fold(0.0, f64::max);
    max - alpha_llm * math::entropy(frequencies)
}

/// Cross-query consistency of relation predictions.
///
/// Frequencies are taken over the successful parses that mention each
/// vehicle. A scene without surrounding vehicles scores 1.
pub fn commonsense_trust(
    batch: &QueryBatch,
    cfg: &TrustConfig,
) -> Result<CommonsenseTrust, DegradedBatch> {
    if batch.is_degraded() {
        return Err(DegradedBatch);
    }
    let per_vehicle: BTreeMap<u32, f64> = batch
        .per_vehicle_relations
        .iter()
        .map(|(&id, counts)| (id, consistency_score(&counts.frequencies(), cfg.alpha_llm)))
        .collect();
    let scene_mean = if per_vehicle.is_empty() {
        1.0
    } else {
        per_vehicle.values().sum::<f64>() / per_vehicle.len() as f64
    };
    Ok(CommonsenseTrust {
        per_vehicle,
        scene_mean,
    })
}

/// Kinematic feasibility before clamping; lies in `[-omega_3, 1]`.
pub fn kinematic_trust_raw(
    predicted_next: &VehicleState,
    observed: &VehicleState,
    cfg: &TrustConfig,
) -> f64 {
    let dv = (predicted_next.speed() - observed.speed()).abs();
    let dacc = (predicted_next.longitudinal_accel() - observed.longitudinal_accel()).abs();
    let dtheta = math::wrap_angle(predicted_next.heading - observed.heading);
    let lane = if predicted_next.lane == observed.lane {
        1.0
    } else {
        0.0
    };
    let [w1, w2, w3, w4] = cfg.omega;
    w1 * (1.0 - dv / cfg.v_max)
        + w2 * math::exp(-cfg.lambda_acc * dacc)
        + w3 * math::cos(dtheta)
        + w4 * lane
}

/// Agreement between the state predicted for the recommended action and the
/// state actually observed, clamped to `[0, 1]`.
pub fn kinematic_trust(predicted_next: &VehicleState, observed: &VehicleState, cfg: &TrustConfig) -> f64 {
    kinematic_trust_raw(predicted_next, observed, cfg).clamp(0.0, 1.0)
}

/// Gated scalar trust: commonsense trust only counts when kinematics agree.
pub fn combined_trust(c_llm: f64, c_kin: f64, cfg: &TrustConfig) -> f64 {
    c_llm.clamp(0.0, 1.0) * math::sigmoid(cfg.kappa * (c_kin - cfg.eta))
}

/// Reward-adaptive retention factor `gamma_t`.
pub fn adaptive_decay(reward: f64, cfg: &CalibrationConfig) -> f64 {
    cfg.gamma_decay + (1.0 - cfg.gamma_decay) * math::sigmoid(cfg.kappa_r * reward)
}

/// Fresh measurements for one recalibration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FreshTrust {
    /// Recomputed commonsense trust per vehicle with relation votes.
    pub llm: BTreeMap<u32, f64>,
    /// Scene-level kinematic trust of the last transition, if one was checked.
    pub kin: Option<f64>,
}

/// Builds trust scores from fresh values only, every history set to `c0`
/// and every vehicle treated as observed.
pub fn initial_trust(fresh: &FreshTrust, trust_cfg: &TrustConfig, cal: &CalibrationConfig) -> TrustScores {
    let mask = fresh.llm.keys().map(|&id| (id, true)).collect();
    let prior = TrustScores {
        per_relation: BTreeMap::new(),
        scene_llm: cal.c0,
        scene_kin: cal.c0,
        combined: combined_trust(cal.c0, cal.c0, trust_cfg),
    };
    blend(&prior, fresh, &mask, 1.0, trust_cfg, cal)
}

/// Masked blending with reward-adaptive decay of commonsense trust.
///
/// `mask` lists every vehicle still tracked; `true` means observed this step.
/// A vehicle marked observed without a fresh value keeps its history.
/// Vehicles absent from `prev` start from the neutral baseline. Kinematic
/// trust is not decayed.
pub fn calibrate_trust(
    prev: &TrustScores,
    fresh: &FreshTrust,
    mask: &BTreeMap<u32, bool>,
    reward: f64,
    trust_cfg: &TrustConfig,
    cal: &CalibrationConfig,
) -> TrustScores {
    blend(prev, fresh, mask, adaptive_decay(reward, cal), trust_cfg, cal)
}

fn blend(
    prev: &TrustScores,
    fresh: &FreshTrust,
    mask: &BTreeMap<u32, bool>,
    gamma_t: f64,
    trust_cfg: &TrustConfig,
    cal: &CalibrationConfig,
) -> TrustScores {
    let scene_kin = fresh.kin.unwrap_or(prev.scene_kin);
    let per_relation: BTreeMap<u32, VehicleTrust> = mask
        .iter()
        .map(|(&id, &observed)| {
            let hist = prev.per_relation.get(&id).copied().unwrap_or(VehicleTrust {
                llm: cal.c0,
                kin: cal.c0,
            });
            let (m, fresh_llm) = match fresh.llm.get(&id) {
                Some(&v) if observed => (1.0, v),
                _ => (0.0, 0.0),
            };
            let fresh_kin = fresh.kin.unwrap_or(hist.kin);
            let llm = gamma_t * (m * fresh_llm + (1.0 - m) * hist.llm) + (1.0 - gamma_t) * cal.c0;
            let kin = m * fresh_kin + (1.0 - m) * hist.kin;
            (id, VehicleTrust { llm, kin })
        })
        .collect();
    let scene_llm = if per_relation.is_empty() {
        1.0
    } else {
        per_relation.values().map(|t| t.llm).sum::<f64>() / per_relation.len() as f64
    };
    TrustScores {
        combined: combined_trust(scene_llm, scene_kin, trust_cfg),
        per_relation,
        scene_llm,
        scene_kin,
    }
}

/// Trust scores with every value pinned to `value`.
pub fn pinned_trust(ids: impl Iterator<Item = u32>, value: f64) -> TrustScores {
    TrustScores {
        per_relation: ids
            .map(|id| (id, VehicleTrust { llm: value, kin: value }))
            .collect(),
        scene_llm: value,
        scene_kin: value,
        combined: value,
    }
}
