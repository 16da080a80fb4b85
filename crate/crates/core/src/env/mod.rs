//! Discrete meta-action traffic environment.
//!
//! Vehicles move along straight lane centrelines. The ego applies one
//! meta-action per step; surrounding vehicles cruise with a little speed
//! jitter and brake behind slower leaders. Roundabouts and intersections are
//! lane segments with cross traffic sweeping over a conflict point.

mod scenario;

pub use scenario::{make_scenario, npc_count};

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use core::cell::Cell;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ReplayEpisode;
use crate::domain::{MetaAction, ScenarioKind, SceneState, VehicleState};
use crate::math;
use crate::planner::{PlanError, StepResult, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggressiveConfig {
    /// Share of surrounding vehicles designated as cut-in drivers.
    pub fraction: f64,
    pub trigger_distance: f64,
    /// Steps a cut-in takes to complete.
    pub duration: u32,
}

impl Default for AggressiveConfig {
    fn default() -> Self {
        Self {
            fraction: 0.3,
            trigger_distance: 15.0,
            duration: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub collision: f64,
    pub base: f64,
    pub speed_weight: f64,
    pub lane_change_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            collision: -1.0,
            base: 0.1,
            speed_weight: 0.4,
            lane_change_penalty: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub scenario_kind: ScenarioKind,
    pub lane_count: u32,
    /// Surrounding vehicles per 100 m of road per lane.
    pub vehicle_density: f64,
    pub lane_width: f64,
    pub dt: f64,
    pub v_max: f64,
    /// Speed change of one `FASTER` or `SLOWER`.
    pub speed_step: f64,
    pub aggressive: Option<AggressiveConfig>,
    pub seed: u64,
    /// Length of the initially populated road segment.
    pub road_length: f64,
    pub min_gap: f64,
    /// Same-lane gap below which two vehicles collide.
    pub collision_gap: f64,
    /// Headway surrounding vehicles try to keep.
    pub headway: f64,
    pub ego_speed: f64,
    pub npc_speed_min: f64,
    pub npc_speed_max: f64,
    /// Per-step probability that a surrounding vehicle's speed is jittered.
    pub npc_jitter_prob: f64,
    pub npc_jitter: f64,
    /// Speed of the moving goal used as the success reference.
    pub goal_speed: f64,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::for_scenario(ScenarioKind::Highway)
    }
}

impl EnvConfig {
    /// Defaults for a scenario kind: 4 lanes on highways and merges, 2 elsewhere.
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        let lane_count = match kind {
            ScenarioKind::Highway | ScenarioKind::Merge | ScenarioKind::Replay => 4,
            ScenarioKind::Roundabout | ScenarioKind::Intersection => 2,
        };
        Self {
            scenario_kind: kind,
            lane_count,
            vehicle_density: 2.0,
            lane_width: 4.0,
            dt: 1.0,
            v_max: 40.0,
            speed_step: 2.0,
            aggressive: None,
            seed: 0,
            road_length: 200.0,
            min_gap: 10.0,
            collision_gap: 5.0,
            headway: 10.0,
            ego_speed: 25.0,
            npc_speed_min: 20.0,
            npc_speed_max: 30.0,
            npc_jitter_prob: 0.2,
            npc_jitter: 1.0,
            goal_speed: 25.0,
            reward: RewardConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |what| Err(EnvError::InvalidConfig(what));
        if self.lane_count < 2 {
            return bad("lane_count must be at least 2");
        }
        if self.vehicle_density <= 0.0 {
            return bad("vehicle_density must be positive");
        }
        if self.dt <= 0.0 {
            return bad("dt must be positive");
        }
        if self.v_max <= 0.0 || self.lane_width <= 0.0 || self.road_length <= 0.0 || self.min_gap <= 0.0 {
            return bad("lengths and speeds must be positive");
        }
        if !(0.0..=self.v_max).contains(&self.ego_speed)
            || self.npc_speed_min < 0.0
            || self.npc_speed_min > self.npc_speed_max
            || self.npc_speed_max > self.v_max
        {
            return bad("initial speeds must lie in [0, v_max]");
        }
        if let Some(a) = &self.aggressive {
            if !(0.0..=1.0).contains(&a.fraction) || a.duration == 0 {
                return bad("aggressive fraction must lie in [0, 1] and duration be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(&'static str),
    #[error("density needs {requested} vehicles but only {capacity} slots keep the minimum gap")]
    InfeasibleDensity { requested: usize, capacity: usize },
    #[error("replay episode has no usable ego record")]
    EmptyReplay,
}

/// One transition of the real environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_scene: SceneState,
    pub reward: f64,
    pub terminal: bool,
    pub collision: bool,
    /// A turn towards the road edge was executed as `IDLE`.
    pub rejected_turn: bool,
    pub lane_changed: bool,
    /// Ids of vehicles the ego collided with.
    pub collided_with: Vec<u32>,
}

/// Ego state after applying `action`, plus lane-change bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoUpdate {
    pub state: VehicleState,
    pub lane_changed: bool,
    pub rejected_turn: bool,
}

/// Deterministic meta-action kinematics of the ego. Also used as the
/// predicted next state when checking kinematic trust.
pub fn predict_ego(ego: &VehicleState, action: MetaAction, lane_count: u32, cfg: &EnvConfig) -> EgoUpdate {
    let v0 = ego.speed();
    let v1 = match action {
        MetaAction::Faster => (v0 + cfg.speed_step).min(cfg.v_max),
        MetaAction::Slower => (v0 - cfg.speed_step).max(0.0),
        _ => v0,
    };
    let (lane, lane_changed, rejected_turn) = match action {
        MetaAction::TurnLeft if ego.lane == 0 => (ego.lane, false, true),
        MetaAction::TurnLeft => (ego.lane - 1, true, false),
        MetaAction::TurnRight if ego.lane + 1 >= lane_count => (ego.lane, false, true),
        MetaAction::TurnRight => (ego.lane + 1, true, false),
        _ => (ego.lane, false, false),
    };
    let dy = (lane as f64 - ego.lane as f64) * cfg.lane_width;
    EgoUpdate {
        state: VehicleState {
            x: ego.x + v1 * cfg.dt,
            y: ego.y + dy,
            vx: v1,
            vy: 0.0,
            ax: (v1 - v0) / cfg.dt,
            ay: 0.0,
            heading: 0.0,
            lane,
            ..*ego
        },
        lane_changed,
        rejected_turn,
    }
}

/// Same-lane proximity after the step, or passing through each other.
/// Symmetric in the two vehicles.
pub fn collides(
    a_before: &VehicleState,
    a_after: &VehicleState,
    b_before: Option<&VehicleState>,
    b_after: &VehicleState,
    gap: f64,
) -> bool {
    if a_after.lane != b_after.lane {
        return false;
    }
    let d1 = a_after.x - b_after.x;
    if d1.abs() < gap {
        return true;
    }
    match b_before {
        Some(b0) => (a_before.x - b0.x) * d1 < 0.0,
        None => false,
    }
}

/// Reward of a non-colliding step.
pub fn step_reward(speed: f64, lane_changed: bool, cfg: &EnvConfig) -> f64 {
    let r = &cfg.reward;
    let mut out = r.base + r.speed_weight * (speed / cfg.v_max);
    if lane_changed {
        out -= r.lane_change_penalty;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct CutIn {
    pub from_lane: u32,
    pub target_lane: u32,
    pub from_y: f64,
    pub done_steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Behavior {
    Cruise {
        desired: f64,
    },
    Aggressive {
        desired: f64,
        cut_in: Option<CutIn>,
        used: bool,
    },
    /// Cross traffic sweeping lanes at a fixed conflict point.
    Crossing {
        direction: i8,
        dwell: u32,
        dwell_left: u32,
    },
    /// Recorded vehicle replayed from the dataset.
    Scripted,
}

/// Snapshot-able environment state for one episode.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub cfg: EnvConfig,
    pub scene: SceneState,
    behaviors: BTreeMap<u32, Behavior>,
    /// Seed of the per-step speed jitter.
    pub noise_seed: u64,
    ramp_end: Option<f64>,
    replay: Option<Arc<ReplayEpisode>>,
    /// Ego position at step 0, origin of the goal schedule.
    start_x: f64,
    snapshots: Cell<u64>,
}

impl Simulator {
    pub(crate) fn assemble(
        cfg: EnvConfig,
        scene: SceneState,
        behaviors: BTreeMap<u32, Behavior>,
        ramp_end: Option<f64>,
        replay: Option<Arc<ReplayEpisode>>,
    ) -> Self {
        let noise_seed = math::mix_seed(cfg.seed, 0x6e70_635f_6e6f_6973);
        let start_x = scene.ego.x;
        Self {
            cfg,
            scene,
            behaviors,
            noise_seed,
            ramp_end,
            replay,
            start_x,
            snapshots: Cell::new(0),
        }
    }

    /// Replays recorded vehicles around a planner-controlled copy of the
    /// recorded ego's first state.
    pub fn from_replay(episode: Arc<ReplayEpisode>, mut cfg: EnvConfig) -> Result<Self, EnvError> {
        let scenes = episode.scenes();
        let first = scenes.into_iter().next().ok_or(EnvError::EmptyReplay)?;
        cfg.scenario_kind = ScenarioKind::Replay;
        cfg.lane_count = first.lane_count;
        let behaviors = first.others.iter().map(|o| (o.id, Behavior::Scripted)).collect();
        Ok(Self::assemble(cfg, first, behaviors, None, Some(episode)))
    }

    pub fn scene(&self) -> &SceneState {
        &self.scene
    }

    /// Copy whose surrounding-vehicle jitter follows another seed.
    pub fn with_noise_seed(&self, seed: u64) -> Self {
        Self {
            noise_seed: seed,
            snapshots: Cell::new(0),
            ..self.clone()
        }
    }

    pub fn ramp_end(&self) -> Option<f64> {
        self.ramp_end
    }

    /// Ids designated as cut-in drivers, in ascending order.
    pub fn aggressive_ids(&self) -> Vec<u32> {
        self.behaviors
            .iter()
            .filter(|(_, b)| matches!(b, Behavior::Aggressive { .. }))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Goal position of the success reference after `t` steps.
    pub fn goal_x(&self, t: u32) -> f64 {
        self.start_x + self.cfg.goal_speed * self.cfg.dt * t as f64
    }

    /// Recorded ego trajectory when replaying, extrapolated at constant
    /// velocity past the last frame.
    pub fn recorded_ego(&self, t: u32) -> Option<(f64, f64)> {
        let ep = self.replay.as_ref()?;
        let last = ep.frames.len().checked_sub(1)?;
        let idx = (t as usize).min(last);
        let r = ep.frames[idx].record(ep.ego_id)?;
        let extra = (t as usize - idx) as f64 * self.cfg.dt;
        Some((r.x + r.vx * extra, r.y + r.vy * extra))
    }

    fn jitter(&self, t: u32, id: u32) -> f64 {
        let u = math::unit_from_hash(math::mix_seed(math::mix_seed(self.noise_seed, t as u64), id as u64));
        let p = self.cfg.npc_jitter_prob;
        if u < 0.5 * p {
            -self.cfg.npc_jitter
        } else if u < p {
            self.cfg.npc_jitter
        } else {
            0.0
        }
    }

    /// Applies `action` and advances every vehicle by one step.
    pub fn step(&mut self, action: MetaAction) -> StepOutcome {
        let (reward, collision, rejected_turn, lane_changed, collided_with) = self.advance(action);
        StepOutcome {
            next_scene: self.scene.clone(),
            reward,
            terminal: collision,
            collision,
            rejected_turn,
            lane_changed,
            collided_with,
        }
    }

    fn advance(&mut self, action: MetaAction) -> (f64, bool, bool, bool, Vec<u32>) {
        let cfg = &self.cfg;
        let prev = &self.scene;
        let t = prev.timestep;
        let ego_up = predict_ego(&prev.ego, action, prev.lane_count, cfg);

        let mut others = match &self.replay {
            Some(ep) => replay_vehicles(ep, t + 1, cfg.dt),
            None => Vec::with_capacity(prev.others.len()),
        };
        if self.replay.is_none() {
            let mut new_behaviors = self.behaviors.clone();
            for npc in &prev.others {
                let b = self.behaviors.get(&npc.id).copied().unwrap_or(Behavior::Cruise {
                    desired: npc.vx,
                });
                let (next, nb) = self.npc_update(npc, b, t);
                new_behaviors.insert(npc.id, nb);
                others.push(next);
            }
            self.behaviors = new_behaviors;
        }

        let ego = ego_up.state;
        let mut collided_with = Vec::new();
        for o in &others {
            let before = prev.others.iter().find(|p| p.id == o.id);
            if collides(&prev.ego, &ego, before, o, cfg.collision_gap) {
                collided_with.push(o.id);
            }
        }
        let off_ramp = matches!(self.ramp_end, Some(end) if ego.lane + 1 == prev.lane_count && ego.x >= end);
        let collision = !collided_with.is_empty() || off_ramp;
        let reward = if collision {
            cfg.reward.collision
        } else {
            step_reward(ego.speed(), ego_up.lane_changed, cfg)
        };

        self.scene = SceneState {
            ego,
            others,
            timestep: t + 1,
            lane_count: prev.lane_count,
            scenario_kind: prev.scenario_kind,
        };
        (reward, collision, ego_up.rejected_turn, ego_up.lane_changed, collided_with)
    }

    /// Nearest vehicle ahead of `x` in `lane` in the pre-step scene.
    fn leader(&self, self_id: u32, x: f64, lane: u32) -> Option<(f64, f64)> {
        core::iter::once(&self.scene.ego)
            .chain(self.scene.others.iter())
            .filter(|v| v.id != self_id && v.lane == lane && v.x > x)
            .map(|v| (v.x - x, v.vx))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn brake_for(&self, v: f64, gap: f64, leader_v: f64) -> f64 {
        let cfg = &self.cfg;
        if gap + (leader_v - v) * cfg.dt < cfg.headway {
            (leader_v + (gap - cfg.headway) / cfg.dt).clamp(0.0, v)
        } else {
            v
        }
    }

    fn npc_update(&self, npc: &VehicleState, behavior: Behavior, t: u32) -> (VehicleState, Behavior) {
        let cfg = &self.cfg;
        let ego = &self.scene.ego;
        let lane_count = self.scene.lane_count;
        match behavior {
            Behavior::Scripted => (*npc, behavior),
            Behavior::Crossing {
                direction,
                dwell,
                dwell_left,
            } => {
                let mut next = VehicleState {
                    vx: 0.0,
                    vy: 0.0,
                    ax: 0.0,
                    ay: 0.0,
                    ..*npc
                };
                if dwell_left > 0 {
                    return (
                        next,
                        Behavior::Crossing {
                            direction,
                            dwell,
                            dwell_left: dwell_left - 1,
                        },
                    );
                }
                let lane = (npc.lane as i64 + direction as i64).clamp(0, lane_count as i64 - 1) as u32;
                let at_edge = lane == 0 || lane + 1 == lane_count;
                next.lane = lane;
                next.y = npc.y + (lane as f64 - npc.lane as f64) * cfg.lane_width;
                next.vy = (next.y - npc.y) / cfg.dt;
                next.heading = if direction > 0 {
                    core::f64::consts::FRAC_PI_2
                } else {
                    -core::f64::consts::FRAC_PI_2
                };
                let nb = if at_edge {
                    Behavior::Crossing {
                        direction: -direction,
                        dwell,
                        dwell_left: dwell,
                    }
                } else {
                    behavior
                };
                (next, nb)
            }
            Behavior::Cruise { desired } | Behavior::Aggressive { desired, .. } => {
                let mut behavior = behavior;
                let v0 = npc.vx.max(0.0);
                let mut v = (v0 + (desired - v0).clamp(-1.0, 1.0) + self.jitter(t, npc.id)).clamp(0.0, cfg.v_max);

                // Cut-in trigger for designated drivers.
                if let Behavior::Aggressive {
                    cut_in: None,
                    used: false,
                    ..
                } = behavior
                {
                    let trigger = cfg.aggressive.map_or(0.0, |a| a.trigger_distance);
                    let dlong = npc.x - ego.x;
                    if npc.lane.abs_diff(ego.lane) == 1 && dlong > 0.0 && dlong <= trigger {
                        behavior = Behavior::Aggressive {
                            desired,
                            cut_in: Some(CutIn {
                                from_lane: npc.lane,
                                target_lane: ego.lane,
                                from_y: npc.y,
                                done_steps: 0,
                            }),
                            used: true,
                        };
                    }
                }

                let cutting = match behavior {
                    Behavior::Aggressive { cut_in: Some(c), .. } => Some(c),
                    _ => None,
                };
                // Keep headway to leaders in the current lane and, while
                // cutting in, in the target lane.
                for lane in [Some(npc.lane), cutting.map(|c| c.target_lane)].into_iter().flatten() {
                    if let Some((gap, lv)) = self.leader(npc.id, npc.x, lane) {
                        v = self.brake_for(v, gap, lv);
                    }
                }

                let mut lane = npc.lane;
                let mut y = npc.y;
                if let Some(end) = self.ramp_end {
                    if lane + 1 == lane_count {
                        let target = lane - 1;
                        let clear = !core::iter::once(ego)
                            .chain(self.scene.others.iter())
                            .any(|o| o.id != npc.id && o.lane == target && o.x > npc.x - 10.0 && o.x < npc.x + 15.0);
                        if npc.x > end - 60.0 && clear {
                            lane = target;
                            y -= cfg.lane_width;
                        } else {
                            v = self.brake_for(v, end - npc.x, 0.0);
                        }
                    }
                }

                if let Some(c) = cutting {
                    let duration = cfg.aggressive.map_or(1, |a| a.duration.max(1));
                    let done = c.done_steps + 1;
                    let target_y = c.from_y + (c.target_lane as f64 - c.from_lane as f64) * cfg.lane_width;
                    let frac = (done as f64 / duration as f64).min(1.0);
                    y = c.from_y + (target_y - c.from_y) * frac;
                    if 2 * done >= duration {
                        lane = c.target_lane;
                    }
                    if let Behavior::Aggressive { cut_in, .. } = &mut behavior {
                        *cut_in = (done < duration).then_some(CutIn { done_steps: done, ..c });
                    }
                }

                let vy = (y - npc.y) / cfg.dt;
                let next = VehicleState {
                    x: npc.x + v * cfg.dt,
                    y,
                    vx: v,
                    vy,
                    ax: (v - v0) / cfg.dt,
                    ay: 0.0,
                    heading: math::atan2(vy, v),
                    lane,
                    ..*npc
                };
                (next, behavior)
            }
        }
    }
}

fn replay_vehicles(ep: &ReplayEpisode, t: u32, dt: f64) -> Vec<VehicleState> {
    let Some(last) = ep.frames.len().checked_sub(1) else {
        return Vec::new();
    };
    let idx = (t as usize).min(last);
    let extra = (t as usize - idx) as f64 * dt;
    ep.frames[idx]
        .records
        .iter()
        .filter(|r| r.vehicle_id != ep.ego_id)
        .map(|r| {
            let mut v = r.to_vehicle();
            v.x += r.vx * extra;
            v.y += r.vy * extra;
            v
        })
        .collect()
}

/// Each snapshot draws surrounding-vehicle jitter from a fresh stream, so
/// repeated simulations sample different futures.
impl World for Simulator {
    fn snapshot(&self) -> Result<Self, PlanError> {
        if !self.scene.ego.is_finite() {
            return Err(PlanError(alloc::format!(
                "ego state at step {} is not finite",
                self.scene.timestep
            )));
        }
        let k = self.snapshots.get();
        self.snapshots.set(k + 1);
        Ok(self.with_noise_seed(math::mix_seed(self.noise_seed, k)))
    }

    fn step(&mut self, action: MetaAction) -> StepResult {
        let (reward, collision, ..) = self.advance(action);
        StepResult {
            reward,
            terminal: collision,
        }
    }
}
