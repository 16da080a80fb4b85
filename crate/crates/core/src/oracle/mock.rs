use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OracleClient, OracleRequest, TransportError};
use crate::domain::{
    ground_truth_relation, MetaAction, RelationEdge, RelationType, SceneState,
    DEFAULT_LONG_THRESHOLD,
};
use crate::math::mix_seed;

/// How the mock picks its recommended action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionRule {
    /// `SLOWER` if a vehicle the response labels `Ahead` is within
    /// `close_distance` and closing, else `FASTER` below
    /// `cruise_fraction * v_max`, else `IDLE`.
    Heuristic {
        close_distance: f64,
        cruise_fraction: f64,
    },
    Fixed {
        action: MetaAction,
    },
}

impl Default for ActionRule {
    fn default() -> Self {
        ActionRule::Heuristic {
            close_distance: 20.0,
            cruise_fraction: 0.8,
        }
    }
}

/// Switches the relation error rate from a given time step on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorInjection {
    pub from_timestep: u32,
    pub relation_error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub relation_error_rate: f64,
    pub format_error_rate: f64,
    /// Probability of spelling the action with a non-prompt alias.
    pub alias_rate: f64,
    pub action_rule: ActionRule,
    pub injection: Option<ErrorInjection>,
    pub long_threshold: f64,
    pub v_max: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self::perfect(0)
    }
}

impl MockConfig {
    pub fn perfect(seed: u64) -> Self {
        Self {
            seed,
            relation_error_rate: 0.0,
            format_error_rate: 0.0,
            alias_rate: 0.0,
            action_rule: ActionRule::default(),
            injection: None,
            long_threshold: DEFAULT_LONG_THRESHOLD,
            v_max: 40.0,
        }
    }

    pub fn relation_error_rate_at(&self, timestep: u32) -> f64 {
        match self.injection {
            Some(inj) if timestep >= inj.from_timestep => inj.relation_error_rate,
            _ => self.relation_error_rate,
        }
    }
}

const INVALID_ACTIONS: [&str; 4] = ["Move-Straight", "Stop", "Overtake", "Brake-Hard"];
const ILLEGAL_RELATIONS: [&str; 4] = ["TopLeft", "Front", "Behind", "Beside"];
const ALIAS_SPELLINGS: [&str; 5] = ["Idle", "ACCELERATE", "DECELERATE", "LANE_LEFT", "LANE_RIGHT"];

/// Deterministic stand-in for the language model.
///
/// Every query draws from its own RNG stream keyed by
/// `(seed, timestep, query_index)`, so concurrent issuing does not change
/// results.
#[derive(Debug, Clone)]
pub struct MockOracle {
    pub config: MockConfig,
}

impl MockOracle {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }

    fn rng(&self, scene: &SceneState, query_index: u32) -> ChaCha8Rng {
        let s = mix_seed(mix_seed(self.config.seed, scene.timestep as u64), query_index as u64);
        ChaCha8Rng::seed_from_u64(s)
    }

    /// Relations as this query perceives them, errors included.
    fn perceived_relations(&self, scene: &SceneState, rng: &mut ChaCha8Rng) -> Vec<RelationEdge> {
        let rate = self.config.relation_error_rate_at(scene.timestep);
        scene
            .others
            .iter()
            .map(|o| {
                let truth = ground_truth_relation(&scene.ego, o, self.config.long_threshold);
                let relation = if rng.random::<f64>() < rate {
                    let k = rng.random_range(0..7usize);
                    let idx = if k >= truth.index() { k + 1 } else { k };
                    RelationType::ALL[idx]
                } else {
                    truth
                };
                RelationEdge {
                    ego_id: scene.ego.id,
                    other_id: o.id,
                    relation,
                }
            })
            .collect()
    }

    fn choose_action(&self, scene: &SceneState, relations: &[RelationEdge]) -> MetaAction {
        match self.config.action_rule {
            ActionRule::Fixed { action } => action,
            ActionRule::Heuristic {
                close_distance,
                cruise_fraction,
            } => {
                let ego = &scene.ego;
                let closing_ahead = relations
                    .iter()
                    .filter(|e| e.relation == RelationType::Ahead)
                    .filter_map(|e| scene.others.iter().find(|o| o.id == e.other_id))
                    .any(|o| {
                        let gap = ego.longitudinal_offset(o);
                        gap > 0.0 && gap <= close_distance && o.speed() < ego.speed()
                    });
                if closing_ahead {
                    MetaAction::Slower
                } else if ego.speed() < cruise_fraction * self.config.v_max {
                    MetaAction::Faster
                } else {
                    MetaAction::Idle
                }
            }
        }
    }

    /// Produces the raw response text for one query.
    pub fn respond(&self, scene: &SceneState, query_index: u32) -> String {
        let mut rng = self.rng(scene, query_index);
        let relations = self.perceived_relations(scene, &mut rng);
        let action = self.choose_action(scene, &relations);
        let defect = (rng.random::<f64>() < self.config.format_error_rate)
            .then(|| rng.random_range(0..5usize));
        let alias = rng.random::<f64>() < self.config.alias_rate;
        let action_text = if alias {
            ALIAS_SPELLINGS[action.index()]
        } else {
            action.prompt_name()
        };
        let ego = scene.ego.id;
        let tuple = |e: &RelationEdge| format!("({}, {}, {})", e.ego_id, e.other_id, e.relation);
        let list = |items: Vec<String>| format!("[{}]", items.join(", "));
        let tuples: Vec<String> = relations.iter().map(tuple).collect();

        match defect {
            None => format!("Action: {action_text}\nRelation: {}", list(tuples)),
            // Labels dropped and ego ids omitted from the tuples.
            Some(0) => {
                let short = relations
                    .iter()
                    .map(|e| format!("({}, {})", e.other_id, e.relation))
                    .collect();
                format!("{action_text}\n{}", list(short))
            }
            Some(1) => {
                let bad = INVALID_ACTIONS[rng.random_range(0..INVALID_ACTIONS.len())];
                format!("Action: {bad}\nRelation: {}", list(tuples))
            }
            Some(2) => {
                let mut items = tuples;
                if relations.is_empty() {
                    items.push(format!("({}, {}, Ahead)", ego.wrapping_add(1), ego));
                } else {
                    let i = rng.random_range(0..relations.len());
                    let e = &relations[i];
                    items[i] = format!("({}, {}, {})", e.other_id, e.ego_id, e.relation);
                }
                format!("Action: {action_text}\nRelation: {}", list(items))
            }
            Some(3) => {
                let bad = ILLEGAL_RELATIONS[rng.random_range(0..ILLEGAL_RELATIONS.len())];
                let mut items = tuples;
                if relations.is_empty() {
                    items.push(format!("({}, {}, {bad})", ego, ego.wrapping_add(1)));
                } else {
                    let i = rng.random_range(0..relations.len());
                    items[i] = format!("({}, {}, {bad})", ego, relations[i].other_id);
                }
                format!("Action: {action_text}\nRelation: {}", list(items))
            }
            Some(_) => {
                let k = rng.random_range(0..MetaAction::COUNT - 1);
                let other = MetaAction::ALL[if k >= action.index() { k + 1 } else { k }];
                format!(
                    "Action: {action_text}, {}\nRelation: {}",
                    other.prompt_name(),
                    list(tuples)
                )
            }
        }
    }
}

impl OracleClient for MockOracle {
    fn complete(&self, request: &OracleRequest<'_>) -> Result<String, TransportError> {
        Ok(self.respond(request.scene, request.query_index))
    }
}
