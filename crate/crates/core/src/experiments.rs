//! Experiment building blocks: seeded mock episodes, trust-dynamics traces,
//! relation filtering quality and collision failure classification.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{SceneState, DEFAULT_LONG_THRESHOLD};
use crate::env::{make_scenario, predict_ego, EnvConfig, EnvError};
use crate::episode::{observe, run_episode, EpisodeError, EpisodeLog, LoopConfig, StepRecord};
use crate::eval::{self, RpaOutcome};
use crate::math::mix_seed;
use crate::oracle::{query_batch, ErrorInjection, MockConfig, MockOracle, QueryBatch, DEFAULT_INTENTION};
use crate::trust::{commonsense_trust, kinematic_trust, TrustConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

/// Runs one simulated episode against the mock oracle.
///
/// The scenario and the oracle streams are derived from `episode_seed`, so
/// oracle errors are independent across episodes.
pub fn run_mock_episode(
    env: &EnvConfig,
    mock: &MockConfig,
    cfg: &LoopConfig,
    episode_seed: u64,
) -> Result<EpisodeLog, ExperimentError> {
    let env = EnvConfig {
        seed: mix_seed(env.seed, episode_seed),
        ..env.clone()
    };
    let sim = make_scenario(&env)?;
    let oracle = MockOracle::new(MockConfig {
        seed: mix_seed(mock.seed, episode_seed),
        ..mock.clone()
    });
    let mut query = |s: &SceneState| query_batch(s, &cfg.intention, cfg.m, &oracle);
    Ok(run_episode(sim, cfg, episode_seed, &mut query)?)
}

/// Mean `C_t` per time step over the episodes still running at that step.
pub fn mean_trust_trace(logs: &[EpisodeLog], len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            let alive: Vec<f64> = logs.iter().filter_map(|l| l.steps.get(t).map(|s| s.trust_used)).collect();
            if alive.is_empty() {
                f64::NAN
            } else {
                alive.iter().sum::<f64>() / alive.len() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustDynamicsConfig {
    pub injection_step: u32,
    pub injected_error_rate: f64,
    pub episodes: u64,
}

impl Default for TrustDynamicsConfig {
    fn default() -> Self {
        Self {
            injection_step: 4,
            injected_error_rate: 0.4,
            episodes: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustDynamics {
    pub normal: Vec<f64>,
    pub injected: Vec<f64>,
    pub normal_logs: Vec<EpisodeLog>,
    pub injected_logs: Vec<EpisodeLog>,
}

/// Paired runs with an error-free oracle and one whose relations turn noisy
/// from `injection_step` on. Both runs share scenarios and planner seeds.
pub fn trust_dynamics(
    env: &EnvConfig,
    mock: &MockConfig,
    cfg: &LoopConfig,
    td: &TrustDynamicsConfig,
) -> Result<TrustDynamics, ExperimentError> {
    let normal_mock = MockConfig {
        relation_error_rate: 0.0,
        injection: None,
        ..mock.clone()
    };
    let injected_mock = MockConfig {
        injection: Some(ErrorInjection {
            from_timestep: td.injection_step,
            relation_error_rate: td.injected_error_rate,
        }),
        ..normal_mock.clone()
    };
    let mut normal_logs = Vec::new();
    let mut injected_logs = Vec::new();
    for e in 0..td.episodes {
        normal_logs.push(run_mock_episode(env, &normal_mock, cfg, e)?);
        injected_logs.push(run_mock_episode(env, &injected_mock, cfg, e)?);
    }
    let len = cfg.horizon as usize + 1;
    Ok(TrustDynamics {
        normal: mean_trust_trace(&normal_logs, len),
        injected: mean_trust_trace(&injected_logs, len),
        normal_logs,
        injected_logs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub scenes: u64,
    pub m: u32,
    /// Threshold on `c_kin` (kinematic filter) and on `c_llm * c_kin` (dual filter).
    pub threshold: f64,
    pub relation_error_rate: f64,
    pub format_error_rate: f64,
    pub alias_rate: f64,
    pub seed: u64,
    pub max_observed: usize,
    pub sensor_radius: f64,
    pub long_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            scenes: 1000,
            m: 5,
            threshold: 0.9,
            relation_error_rate: 0.3,
            format_error_rate: 0.2,
            alias_rate: 0.1,
            seed: 0,
            max_observed: 4,
            sensor_radius: 100.0,
            long_threshold: DEFAULT_LONG_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub unfiltered: RpaOutcome,
    pub kinematic: RpaOutcome,
    pub dual: RpaOutcome,
}

/// Relation accuracy of one scene's batch under the three filters.
///
/// Each parsed response is checked kinematically: its action is rolled
/// forward from the current ego state and compared with `observed_next`.
/// The kinematic filter keeps whole responses with `c_kin >= threshold`; the
/// dual filter keeps single relations whose vehicle consistency times the
/// response's `c_kin` reaches the threshold.
pub fn filter_scene(
    batch: &QueryBatch,
    scene: &SceneState,
    observed_next: &crate::domain::VehicleState,
    env: &EnvConfig,
    trust: &TrustConfig,
    cfg: &FilterConfig,
) -> FilterReport {
    let c_llm = commonsense_trust(batch, trust).map(|c| c.per_vehicle).unwrap_or_default();
    let empty = RpaOutcome::from_counts(0, 0);
    let mut report = FilterReport {
        unfiltered: empty,
        kinematic: empty,
        dual: empty,
    };
    for parsed in batch.responses.iter().filter_map(|r| r.parsed()) {
        let predicted = predict_ego(&scene.ego, parsed.action, scene.lane_count, env).state;
        let c_kin = kinematic_trust(&predicted, observed_next, trust);
        let all = eval::rpa(&parsed.relations, scene, cfg.long_threshold);
        report.unfiltered = report.unfiltered.merge(&all);
        if c_kin >= cfg.threshold {
            report.kinematic = report.kinematic.merge(&all);
        }
        let kept: Vec<_> = parsed
            .relations
            .iter()
            .filter(|e| c_llm.get(&e.other_id).copied().unwrap_or(0.0) * c_kin >= cfg.threshold)
            .copied()
            .collect();
        report.dual = report.dual.merge(&eval::rpa(&kept, scene, cfg.long_threshold));
    }
    report
}

/// One corpus entry: an observed scene and the ego state that followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScene {
    pub scene: SceneState,
    pub observed_next: crate::domain::VehicleState,
}

/// Scenes visited while driving on the advice of an error-free oracle.
///
/// Episodes of up to `horizon` steps are chained until `cfg.scenes` entries
/// exist; an entry's next ego state is the one the executed advice produced.
pub fn driving_corpus(env: &EnvConfig, cfg: &FilterConfig, horizon: u32) -> Result<Vec<CorpusScene>, EnvError> {
    let mut out = Vec::with_capacity(cfg.scenes as usize);
    let mut episode = 0u64;
    while (out.len() as u64) < cfg.scenes {
        let seed = mix_seed(cfg.seed, episode);
        episode += 1;
        let mut sim = make_scenario(&EnvConfig { seed, ..env.clone() })?;
        let truthful = MockOracle::new(MockConfig {
            long_threshold: cfg.long_threshold,
            ..MockConfig::perfect(seed)
        });
        for _ in 0..horizon {
            let scene = observe(sim.scene(), cfg.sensor_radius, cfg.max_observed);
            let advice = query_batch(&scene, DEFAULT_INTENTION, 1, &truthful);
            let Some(action) = advice.recommended_action() else { break };
            let step = sim.step(action);
            out.push(CorpusScene {
                scene,
                observed_next: step.next_scene.ego,
            });
            if step.terminal || out.len() as u64 >= cfg.scenes {
                break;
            }
        }
    }
    Ok(out)
}

/// Pooled filtering quality of a noisy oracle over [`driving_corpus`].
pub fn filter_corpus(env: &EnvConfig, trust: &TrustConfig, cfg: &FilterConfig) -> Result<FilterReport, EnvError> {
    let empty = RpaOutcome::from_counts(0, 0);
    let mut total = FilterReport {
        unfiltered: empty,
        kinematic: empty,
        dual: empty,
    };
    for (i, entry) in driving_corpus(env, cfg, 10)?.iter().enumerate() {
        let noisy = MockOracle::new(MockConfig {
            seed: mix_seed(cfg.seed ^ 0x6e6f_6973_79, i as u64),
            relation_error_rate: cfg.relation_error_rate,
            format_error_rate: cfg.format_error_rate,
            alias_rate: cfg.alias_rate,
            long_threshold: cfg.long_threshold,
            ..MockConfig::perfect(0)
        });
        let batch = query_batch(&entry.scene, DEFAULT_INTENTION, cfg.m, &noisy);
        let r = filter_scene(&batch, &entry.scene, &entry.observed_next, env, trust, cfg);
        total = FilterReport {
            unfiltered: total.unfiltered.merge(&r.unfiltered),
            kinematic: total.kinematic.merge(&r.kinematic),
            dual: total.dual.merge(&r.dual),
        };
    }
    Ok(total)
}

/// Collision failure taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureClass {
    /// The parser normalised an action alias in the colliding cycle.
    Mapping,
    /// A vehicle involved in the collision had a missing or trust-suppressed relation.
    Model,
    /// The two strongest prior actions were nearly tied.
    Policy,
    /// None of the predicates held.
    Unclassified,
}

impl FailureClass {
    pub fn name(self) -> &'static str {
        match self {
            FailureClass::Mapping => "mapping",
            FailureClass::Model => "model",
            FailureClass::Policy => "policy",
            FailureClass::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureRules {
    /// Per-vehicle gated trust below this counts as suppressed.
    pub suppressed_below: f64,
    /// Top-two prior gap at or below this counts as a conflict.
    pub near_equal_gap: f64,
}

impl Default for FailureRules {
    fn default() -> Self {
        Self {
            suppressed_below: 0.5,
            near_equal_gap: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub seed: u64,
    pub timestep: u32,
    pub class: FailureClass,
    pub policy: bool,
    pub model: bool,
    pub mapping: bool,
    pub collided_with: Vec<u32>,
    pub detail: String,
}

/// Tags the collision of an episode; `None` when it did not collide.
///
/// Every predicate is evaluated and reported; the primary class is the first
/// that holds in the order mapping, model, policy.
pub fn classify_failure(log: &EpisodeLog, trust: &TrustConfig, rules: &FailureRules) -> Option<FailureRecord> {
    classify_steps(log.seed, &log.steps, trust, rules)
}

/// [`classify_failure`] over raw step records.
pub fn classify_steps(
    seed: u64,
    steps: &[StepRecord],
    trust: &TrustConfig,
    rules: &FailureRules,
) -> Option<FailureRecord> {
    let step = steps.iter().rev().find(|s| s.collision)?;
    let plan = step.plan.as_ref()?;
    let mapping = step.alias_fired;
    let model = step.collided_with.iter().any(|id| {
        let edge = step.edges.iter().any(|e| e.other_id == *id);
        let gated = step.trust.per_relation.get(id).map(|v| crate::trust::combined_trust(v.llm, v.kin, trust));
        !edge || gated.is_none_or(|c| c < rules.suppressed_below)
    });
    let mut prior = plan.policy_used;
    prior.sort_by(|a, b| b.total_cmp(a));
    let policy = prior[0] - prior[1] <= rules.near_equal_gap;
    let class = if mapping {
        FailureClass::Mapping
    } else if model {
        FailureClass::Model
    } else if policy {
        FailureClass::Policy
    } else {
        FailureClass::Unclassified
    };
    Some(FailureRecord {
        seed,
        timestep: step.timestep,
        class,
        policy,
        model,
        mapping,
        collided_with: step.collided_with.clone(),
        detail: alloc::format!(
            "action {} prior gap {:.3} trust {:.3}",
            plan.chosen,
            prior[0] - prior[1],
            step.trust_used
        ),
    })
}
