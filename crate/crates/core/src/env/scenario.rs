use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Behavior, EnvConfig, EnvError, Simulator};
use crate::domain::{ScenarioKind, SceneState, VehicleState};

pub const EGO_ID: u32 = 0;

/// Surrounding vehicles seeded along the road (cross traffic excluded).
pub fn npc_count(cfg: &EnvConfig) -> usize {
    libm::round(cfg.vehicle_density * cfg.road_length / 100.0 * cfg.lane_count as f64) as usize
}

/// Conflict points swept by cross traffic, relative to the ego start.
fn conflict_offsets(kind: ScenarioKind) -> &'static [f64] {
    match kind {
        ScenarioKind::Intersection => &[100.0],
        ScenarioKind::Roundabout => &[60.0, 160.0],
        _ => &[],
    }
}

/// Builds the initial scene and behaviours, deterministic per `cfg.seed`.
///
/// Vehicles sit on a grid of `min_gap` spaced slots so every same-lane gap,
/// the ego included, is at least `min_gap`.
pub fn make_scenario(cfg: &EnvConfig) -> Result<Simulator, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kind = cfg.scenario_kind;
    let lanes = cfg.lane_count;
    let per_lane = libm::floor(cfg.road_length / cfg.min_gap) as u32;
    let ego_slot = per_lane / 4;
    let ego_x = ego_slot as f64 * cfg.min_gap;
    let ramp_end = (kind == ScenarioKind::Merge).then_some(ego_x + 150.0);
    let ego_lane = match kind {
        ScenarioKind::Merge => lanes - 1,
        _ => rng.random_range(0..lanes),
    };
    let conflicts: Vec<f64> = conflict_offsets(kind).iter().map(|o| ego_x + o).collect();

    let mut slots = Vec::new();
    for lane in 0..lanes {
        for k in 0..per_lane {
            let x = k as f64 * cfg.min_gap;
            if lane == ego_lane && k == ego_slot {
                continue;
            }
            if matches!(ramp_end, Some(end) if lane + 1 == lanes && x > end - 20.0) {
                continue;
            }
            if conflicts.iter().any(|c| (x - c).abs() < cfg.min_gap) {
                continue;
            }
            slots.push((lane, x));
        }
    }
    let requested = npc_count(cfg);
    if requested > slots.len() {
        return Err(EnvError::InfeasibleDensity {
            requested,
            capacity: slots.len(),
        });
    }
    slots.shuffle(&mut rng);
    let mut chosen: Vec<(u32, f64)> = slots[..requested].to_vec();
    chosen.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut others = Vec::with_capacity(chosen.len() + conflicts.len());
    let mut behaviors = BTreeMap::new();
    for (i, (lane, x)) in chosen.into_iter().enumerate() {
        let id = i as u32 + 1;
        let speed = if cfg.npc_speed_max > cfg.npc_speed_min {
            rng.random_range(cfg.npc_speed_min..cfg.npc_speed_max)
        } else {
            cfg.npc_speed_min
        };
        others.push(VehicleState::on_lane(id, x, lane, cfg.lane_width, speed));
        behaviors.insert(id, Behavior::Cruise { desired: speed });
    }

    if let Some(a) = &cfg.aggressive {
        let mut ids: Vec<u32> = behaviors.keys().copied().collect();
        ids.shuffle(&mut rng);
        let designated = libm::round(a.fraction * ids.len() as f64) as usize;
        for id in &ids[..designated.min(ids.len())] {
            if let Some(b) = behaviors.get_mut(id) {
                if let Behavior::Cruise { desired } = *b {
                    *b = Behavior::Aggressive {
                        desired,
                        cut_in: None,
                        used: false,
                    };
                }
            }
        }
    }

    let base = others.len() as u32 + 1;
    for (j, &x) in conflicts.iter().enumerate() {
        let id = base + j as u32;
        let lane = rng.random_range(0..lanes);
        let direction = if lane == 0 {
            1
        } else if lane + 1 == lanes || rng.random::<bool>() {
            -1
        } else {
            1
        };
        others.push(VehicleState::on_lane(id, x, lane, cfg.lane_width, 0.0));
        behaviors.insert(
            id,
            Behavior::Crossing {
                direction,
                dwell: 1,
                dwell_left: rng.random_range(0..2),
            },
        );
    }

    let scene = SceneState {
        ego: VehicleState::on_lane(EGO_ID, ego_x, ego_lane, cfg.lane_width, cfg.ego_speed),
        others,
        timestep: 0,
        lane_count: lanes,
        scenario_kind: kind,
    };
    Ok(Simulator::assemble(cfg.clone(), scene, behaviors, ramp_end, None))
}
