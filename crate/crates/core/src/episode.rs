//! The closed Recall, Plan, Update loop over one episode.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ActionVec, CommonsenseGraph, MetaAction, RelationEdge, ScenarioKind, SceneState, TrustScores,
    VehicleState, DEFAULT_LONG_THRESHOLD,
};
use crate::env::{predict_ego, Simulator};
use crate::eval::{
    self, advantage, ade_fde, discounted_return, EpisodeMetrics, LossConfig, PolicySample, RpaOutcome,
    TrustSample,
};
use crate::math::{self, mix_seed};
use crate::oracle::{QueryBatch, ResponseOutcome, DEFAULT_INTENTION};
use crate::planner::{
    action_frequencies, dirichlet_target, plan, policy_from_params, update_dirichlet_ema, DirichletParams,
    PlanError, PlanResult, SearchConfig, SelectionRule,
};
use crate::trust::{
    calibrate_trust, commonsense_trust, initial_trust, kinematic_trust, pinned_trust, CalibrationConfig,
    EncoderParams, FreshTrust, TrustConfig, TrustEncoder,
};

/// Component wiring of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Every trust score fixed to 1.
    NoTrust,
    /// Plain UCB selection without the Dirichlet prior.
    NoDirichlet,
    /// No calibration and no EMA: current-step trust and concentrations only.
    NoUpdate,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoTrust, Ablation::NoDirichlet, Ablation::NoUpdate];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTrust => "no-trust",
            Ablation::NoDirichlet => "no-dirichlet",
            Ablation::NoUpdate => "no-update",
        }
    }
}

impl core::fmt::Display for Ablation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Ablation {
    type Err = crate::domain::UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| crate::domain::UnknownName {
                kind: "ablation variant",
                name: s.into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Oracle queries per planning cycle.
    pub m: u32,
    pub horizon: u32,
    pub intention: String,
    pub long_threshold: f64,
    /// At most this many nearest vehicles inside the sensor radius are observed.
    pub max_observed: usize,
    pub success_delta: f64,
    pub ablation: Ablation,
    /// Overrides the planning trust every cycle.
    pub force_trust: Option<f64>,
    /// Computes the trust-weighted state encoding every cycle.
    pub encode: bool,
    pub trust: TrustConfig,
    pub calibration: CalibrationConfig,
    pub dirichlet: DirichletParams,
    pub search: SearchConfig,
    pub encoder: EncoderParams,
    pub loss: LossConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            m: 5,
            horizon: 10,
            intention: DEFAULT_INTENTION.into(),
            long_threshold: DEFAULT_LONG_THRESHOLD,
            max_observed: 4,
            success_delta: 2.0,
            ablation: Ablation::Full,
            force_trust: None,
            encode: false,
            trust: TrustConfig::default(),
            calibration: CalibrationConfig::default(),
            dirichlet: DirichletParams::default(),
            search: SearchConfig::default(),
            encoder: EncoderParams::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeError {
    #[error("planning failed at step {step}: {source}")]
    Plan { step: u32, source: PlanError },
    #[error("invalid loop config: {0}")]
    Config(&'static str),
}

/// What the planner saw and did in one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub timestep: u32,
    pub ego: VehicleState,
    pub observed_ids: Vec<u32>,
    pub queried: usize,
    pub effective_m: usize,
    pub degraded: bool,
    pub alias_fired: bool,
    /// Parse-error kind names of rejected responses.
    pub parse_errors: Vec<String>,
    pub recommended: Option<MetaAction>,
    pub action_counts: [u32; MetaAction::COUNT],
    /// Majority-vote edges of the commonsense graph.
    pub edges: Vec<RelationEdge>,
    /// Accuracy of every relation predicted in this batch.
    pub rpa: RpaOutcome,
    pub trust: TrustScores,
    /// Trust handed to the prior and the selection rule.
    pub trust_used: f64,
    pub alpha: ActionVec,
    pub encoding_norm: Option<f64>,
    /// Absent on the final recall-only cycle.
    pub plan: Option<PlanResult>,
    pub reward: Option<f64>,
    pub collision: bool,
    pub collided_with: Vec<u32>,
    pub rejected_turn: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub trust: f64,
    pub policy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub scenario_kind: ScenarioKind,
    pub ablation: Ablation,
    pub steps: Vec<StepRecord>,
    /// Ego positions after each executed step.
    pub trajectory: Vec<(f64, f64)>,
    pub reference: Vec<(f64, f64)>,
    pub collided: bool,
    pub metrics: EpisodeMetrics,
    pub losses: LossValues,
}

impl EpisodeLog {
    /// `C_t` of every cycle, including the final recall-only one.
    pub fn trust_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.trust_used).collect()
    }

    pub fn actions(&self) -> Vec<MetaAction> {
        self.steps.iter().filter_map(|s| s.plan.as_ref().map(|p| p.chosen)).collect()
    }
}

/// Vehicles inside `radius` of the ego, nearest `max_observed` kept, in id order.
pub fn observe(scene: &SceneState, radius: f64, max_observed: usize) -> SceneState {
    let dist = |v: &VehicleState| math::hypot(v.x - scene.ego.x, v.y - scene.ego.y);
    let mut near: Vec<&VehicleState> = scene.others.iter().filter(|v| dist(v) <= radius).collect();
    near.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.id.cmp(&b.id)));
    near.truncate(max_observed);
    near.sort_by_key(|v| v.id);
    SceneState {
        others: near.into_iter().copied().collect(),
        ..scene.clone()
    }
}

fn batch_rpa(batch: &QueryBatch, scene: &SceneState, long_threshold: f64) -> RpaOutcome {
    batch
        .responses
        .iter()
        .filter_map(|r| r.parsed())
        .map(|p| eval::rpa(&p.relations, scene, long_threshold))
        .fold(RpaOutcome::from_counts(0, 0), |acc, r| acc.merge(&r))
}

/// Graph over the vehicles that received at least one vote.
pub fn build_graph(observed: &SceneState, batch: &QueryBatch, trust: TrustScores) -> CommonsenseGraph {
    let edges = batch.majority_edges(observed.ego.id);
    let voted: BTreeSet<u32> = edges.iter().map(|e| e.other_id).collect();
    let scene = SceneState {
        others: observed.others.iter().filter(|o| voted.contains(&o.id)).copied().collect(),
        ..observed.clone()
    };
    let edges = edges.into_iter().filter(|e| scene.others.iter().any(|o| o.id == e.other_id)).collect();
    CommonsenseGraph { scene, edges, trust }
}

/// Per-episode metrics from executed positions and their references.
///
/// Recorded references are compared in the plane; simulated runs measure only
/// the longitudinal shortfall behind the moving goal.
pub fn trajectory_metrics(
    trajectory: &[(f64, f64)],
    reference: &[(f64, f64)],
    steps: &[StepRecord],
    recorded: bool,
    collided: bool,
    success_delta: f64,
) -> EpisodeMetrics {
    let (planned_pts, reference_pts): (Vec<_>, Vec<_>) = if recorded {
        (trajectory.to_vec(), reference.to_vec())
    } else {
        trajectory
            .iter()
            .zip(reference)
            .map(|(p, r)| ((p.0, 0.0), (r.0.max(p.0), 0.0)))
            .unzip()
    };
    let (ade, fde) = ade_fde(&planned_pts, &reference_pts).unwrap_or((0.0, 0.0));
    let rpa = steps.iter().fold(RpaOutcome::from_counts(0, 0), |acc, s| acc.merge(&s.rpa));
    EpisodeMetrics {
        ade,
        fde,
        success: eval::success(collided, fde, success_delta),
        collided,
        rpa,
    }
}

/// Runs one episode of the closed loop.
///
/// Each cycle queries the oracle on the observed scene, recalibrates trust
/// with the reward and kinematic check of the previous transition, updates the
/// Dirichlet concentrations, plans and executes one action. After the last
/// action one more recall and update cycle runs without planning so the trust
/// trace covers every visited state.
pub fn run_episode(
    mut sim: Simulator,
    cfg: &LoopConfig,
    episode_seed: u64,
    query: &mut dyn FnMut(&SceneState) -> QueryBatch,
) -> Result<EpisodeLog, EpisodeError> {
    cfg.search.validate().map_err(EpisodeError::Config)?;
    cfg.trust.validate().map_err(EpisodeError::Config)?;
    if cfg.horizon == 0 {
        return Err(EpisodeError::Config("horizon must be at least 1"));
    }
    let encoder = cfg.encode.then(|| TrustEncoder::new(cfg.encoder));
    let mut search = cfg.search.clone();
    if cfg.ablation == Ablation::NoDirichlet {
        search.rule = SelectionRule::Ucb;
    }
    let plan_seed = mix_seed(cfg.search.seed, episode_seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(mix_seed(plan_seed, 0x706f_6c69_6379));

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut trajectory = Vec::new();
    let mut reference = Vec::new();
    let mut prev_trust: Option<TrustScores> = None;
    let mut prev_alpha: Option<ActionVec> = None;
    // (scene before, recommended action, reward) of the last transition.
    let mut last: Option<(SceneState, Option<MetaAction>, f64)> = None;
    let mut collided = false;

    for t in 0..=cfg.horizon {
        let scene = sim.scene().clone();
        let observed = observe(&scene, cfg.calibration.sensor_radius, cfg.max_observed);
        let batch = query(&observed);

        // Recall: fresh commonsense and kinematic trust.
        let fresh_llm = commonsense_trust(&batch, &cfg.trust).ok();
        let fresh_kin = last.as_ref().and_then(|(before, rec, _)| {
            rec.map(|a| {
                let predicted = predict_ego(&before.ego, a, before.lane_count, &sim.cfg).state;
                kinematic_trust(&predicted, &scene.ego, &cfg.trust)
            })
        });
        let fresh = FreshTrust {
            llm: fresh_llm.map(|c| c.per_vehicle).unwrap_or_default(),
            kin: fresh_kin,
        };

        // Update: calibrated trust and Dirichlet concentrations.
        let present: BTreeSet<u32> = scene.others.iter().map(|o| o.id).collect();
        let observed_ids: BTreeSet<u32> = observed.others.iter().map(|o| o.id).collect();
        let trust = match (cfg.ablation, &prev_trust, &last) {
            (Ablation::NoTrust, ..) => pinned_trust(observed_ids.iter().copied(), 1.0),
            (Ablation::NoUpdate, ..) | (_, None, _) | (_, _, None) => initial_trust(&fresh, &cfg.trust, &cfg.calibration),
            (_, Some(prev), Some((_, _, reward))) => {
                let mask: BTreeMap<u32, bool> = prev
                    .per_relation
                    .keys()
                    .chain(fresh.llm.keys())
                    .filter(|id| present.contains(id))
                    .map(|&id| (id, observed_ids.contains(&id)))
                    .collect();
                calibrate_trust(prev, &fresh, &mask, *reward, &cfg.trust, &cfg.calibration)
            }
        };
        let trust_used = match (cfg.force_trust, cfg.ablation) {
            (Some(c), _) => c,
            (None, Ablation::NoTrust) => 1.0,
            (None, _) if batch.is_degraded() => 0.0,
            (None, _) => trust.combined,
        };
        let f = action_frequencies(&batch, cfg.dirichlet.epsilon_smooth);
        let target = dirichlet_target(&f, trust_used, cfg.dirichlet.beta);
        let alpha = match (prev_alpha, cfg.ablation) {
            (Some(a), ab) if ab != Ablation::NoUpdate => update_dirichlet_ema(&cfg.dirichlet.with_alpha(a), &target).alpha,
            _ => target,
        };

        let graph = build_graph(&observed, &batch, trust.clone());
        let encoding_norm = encoder.as_ref().map(|enc| {
            let z = if cfg.ablation == Ablation::NoTrust {
                enc.encode_with(&graph, |_| 1.0)
            } else {
                enc.encode(&graph, &cfg.trust)
            };
            math::sqrt(z.vector.iter().map(|v| v * v).sum())
        });

        let mut record = StepRecord {
            timestep: scene.timestep,
            ego: scene.ego,
            observed_ids: observed_ids.iter().copied().collect(),
            queried: batch.queried(),
            effective_m: batch.effective_m,
            degraded: batch.is_degraded(),
            alias_fired: batch.alias_fired(),
            parse_errors: batch
                .responses
                .iter()
                .filter_map(|r| match &r.outcome {
                    ResponseOutcome::Rejected(e) => Some(e.kind.name().into()),
                    ResponseOutcome::Transport(_) => Some("Transport".into()),
                    ResponseOutcome::Parsed(_) => None,
                })
                .collect(),
            recommended: batch.recommended_action(),
            action_counts: batch.action_counts,
            edges: graph.edges.clone(),
            rpa: batch_rpa(&batch, &observed, cfg.long_threshold),
            trust: trust.clone(),
            trust_used,
            alpha,
            encoding_norm,
            plan: None,
            reward: None,
            collision: false,
            collided_with: Vec::new(),
            rejected_turn: false,
        };

        if t == cfg.horizon {
            steps.push(record);
            break;
        }

        // Plan with the prior fixed for the whole cycle.
        let policy = if cfg.ablation == Ablation::NoDirichlet {
            [1.0 / MetaAction::COUNT as f64; MetaAction::COUNT]
        } else {
            policy_from_params(&alpha, search.policy_mode, &mut policy_rng)
        };
        let model = sim.with_noise_seed(mix_seed(plan_seed, 0x6d6f_6465_6c00 + t as u64));
        let mut rollout_rng = ChaCha8Rng::seed_from_u64(mix_seed(plan_seed, t as u64));
        let result =
            plan(&model, policy, trust_used, &search, &mut rollout_rng).map_err(|source| EpisodeError::Plan {
                step: scene.timestep,
                source,
            })?;

        let out = sim.step(result.chosen);
        record.plan = Some(result);
        record.reward = Some(out.reward);
        record.collision = out.collision;
        record.collided_with = out.collided_with.clone();
        record.rejected_turn = out.rejected_turn;
        steps.push(record);

        let step_no = out.next_scene.timestep;
        trajectory.push((out.next_scene.ego.x, out.next_scene.ego.y));
        reference.push(match sim.recorded_ego(step_no) {
            Some(p) => p,
            None => (sim.goal_x(step_no), out.next_scene.ego.y),
        });

        last = Some((scene, batch.recommended_action(), out.reward));
        prev_trust = Some(trust);
        prev_alpha = Some(alpha);
        if out.terminal {
            collided = out.collision;
            break;
        }
    }

    let metrics = trajectory_metrics(
        &trajectory,
        &reference,
        &steps,
        sim.recorded_ego(0).is_some(),
        collided,
        cfg.success_delta,
    );
    let losses = episode_losses(&steps, &cfg.loss);
    Ok(EpisodeLog {
        seed: episode_seed,
        scenario_kind: sim.scene().scenario_kind,
        ablation: cfg.ablation,
        steps,
        trajectory,
        reference,
        collided,
        metrics,
        losses,
    })
}

/// Forward-only loss values over the planned cycles of an episode.
pub fn episode_losses(steps: &[StepRecord], cfg: &LossConfig) -> LossValues {
    let planned: Vec<(&StepRecord, &PlanResult)> = steps.iter().filter_map(|s| s.plan.as_ref().map(|p| (s, p))).collect();
    let rewards: Vec<f64> = planned.iter().map(|(s, _)| s.reward.unwrap_or(0.0)).collect();
    let trust_samples: Vec<TrustSample> = planned
        .iter()
        .enumerate()
        .map(|(i, (s, p))| TrustSample {
            q: p.q_values[p.chosen.index()],
            observed_return: discounted_return(&rewards[i..], cfg.gamma),
            trust: s.trust_used,
        })
        .collect();
    let policy_samples: Vec<PolicySample> = planned
        .windows(2)
        .map(|w| {
            let (s, p) = w[1];
            PolicySample {
                policy: p.policy_used,
                old_policy: w[0].1.policy_used,
                q_values: p.q_values,
                action: p.chosen,
                advantage: advantage(&p.q_values, &p.policy_used, p.chosen),
                trust: s.trust_used,
            }
        })
        .collect();
    let trust = eval::trust_loss(&trust_samples);
    let policy = eval::policy_loss(&policy_samples, cfg).unwrap_or(f64::NAN);
    LossValues {
        trust,
        policy,
        total: eval::total_loss(trust, policy, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_scenario, EnvConfig};
    use crate::oracle::{query_batch, MockConfig, MockOracle, OracleClient, OracleRequest, TransportError, TransportErrorKind};

    fn mock_query(cfg: MockConfig, m: u32) -> impl FnMut(&SceneState) -> QueryBatch {
        let oracle = MockOracle::new(cfg);
        move |s: &SceneState| query_batch(s, DEFAULT_INTENTION, m, &oracle)
    }

    fn empty_highway(speed: f64) -> Simulator {
        let cfg = EnvConfig {
            vehicle_density: 1e-9,
            ego_speed: speed,
            ..EnvConfig::default()
        };
        make_scenario(&cfg).unwrap()
    }

    #[test]
    fn horizon_bounds_steps() {
        let sim = make_scenario(&EnvConfig::default()).unwrap();
        let cfg = LoopConfig::default();
        let log = run_episode(sim, &cfg, 1, &mut mock_query(MockConfig::perfect(1), 5)).unwrap();
        assert!(log.actions().len() <= 10);
        assert!(log.trajectory.len() == log.actions().len());
        if !log.collided {
            assert_eq!(log.steps.len(), 11);
        }
    }

    #[test]
    fn empty_road_trust_rises_to_its_fixed_point() {
        let sim = empty_highway(20.0);
        assert!(sim.scene().others.is_empty());
        let cfg = LoopConfig {
            horizon: 5,
            ..LoopConfig::default()
        };
        let log = run_episode(sim, &cfg, 3, &mut mock_query(MockConfig::perfect(3), 5)).unwrap();
        assert!(!log.collided);
        let trace = log.trust_trace();
        assert!(trace.windows(2).all(|w| w[1] >= w[0]), "{trace:?}");
        // No vehicles: commonsense trust is 1 and, with the recommendation
        // followed, kinematic trust is 1 as well.
        let fixed = crate::trust::combined_trust(1.0, 1.0, &cfg.trust);
        assert!((trace[trace.len() - 1] - fixed).abs() < 1e-12, "{trace:?}");
    }

    struct Garbage;
    impl OracleClient for Garbage {
        fn complete(&self, _: &OracleRequest<'_>) -> Result<String, TransportError> {
            Err(TransportError {
                kind: TransportErrorKind::Timeout,
                detail: "no answer".into(),
            })
        }
    }

    #[test]
    fn degraded_oracle_plans_with_zero_trust() {
        let sim = make_scenario(&EnvConfig::default()).unwrap();
        let cfg = LoopConfig::default();
        let log = run_episode(sim, &cfg, 0, &mut |s: &SceneState| query_batch(s, "", 5, &Garbage)).unwrap();
        assert!(log.steps.iter().all(|s| s.degraded && s.trust_used == 0.0));
    }

    #[test]
    fn zero_trust_matches_prior_free_search() {
        for seed in 0..3 {
            let env = EnvConfig {
                seed,
                ..EnvConfig::default()
            };
            let forced = LoopConfig {
                force_trust: Some(0.0),
                ..LoopConfig::default()
            };
            let prior_free = LoopConfig {
                search: SearchConfig {
                    rule: SelectionRule::PriorFree,
                    ..SearchConfig::default()
                },
                ..forced.clone()
            };
            let a = run_episode(make_scenario(&env).unwrap(), &forced, seed, &mut mock_query(MockConfig::perfect(seed), 5)).unwrap();
            let b = run_episode(make_scenario(&env).unwrap(), &prior_free, seed, &mut mock_query(MockConfig::perfect(seed), 5)).unwrap();
            assert_eq!(a.actions(), b.actions());
        }
    }

    #[test]
    fn reproducible_logs() {
        let run = || {
            let cfg = LoopConfig {
                encode: true,
                ..LoopConfig::default()
            };
            run_episode(make_scenario(&EnvConfig::default()).unwrap(), &cfg, 4, &mut mock_query(MockConfig {
                relation_error_rate: 0.3,
                ..MockConfig::perfect(4)
            }, 5))
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("no-such".parse::<Ablation>().is_err());
    }

    #[test]
    fn no_update_uses_the_target_directly() {
        let cfg = LoopConfig {
            ablation: Ablation::NoUpdate,
            ..LoopConfig::default()
        };
        let log = run_episode(make_scenario(&EnvConfig::default()).unwrap(), &cfg, 2, &mut mock_query(MockConfig::perfect(2), 5)).unwrap();
        for s in &log.steps {
            let total: u32 = s.action_counts.iter().sum();
            let f: ActionVec = core::array::from_fn(|i| s.action_counts[i] as f64 / total as f64 + 0.1);
            let target = dirichlet_target(&f, s.trust_used, 1.5);
            assert_eq!(s.alpha, target);
        }
    }

    #[test]
    fn observation_keeps_nearest() {
        let sim = make_scenario(&EnvConfig::default()).unwrap();
        let o = observe(sim.scene(), 100.0, 4);
        assert!(o.others.len() <= 4);
        assert!(o.others.windows(2).all(|w| w[0].id < w[1].id));
        assert!(o.violations().is_empty());
    }
}
