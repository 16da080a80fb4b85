//! Scene, relation, action and trust value types.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;

/// Longitudinal band (meters) inside which an adjacent-lane vehicle counts as
/// directly `Left` / `Right` rather than ahead or behind.
pub const DEFAULT_LONG_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} name `{name}`")]
pub struct UnknownName {
    pub kind: &'static str,
    pub name: String,
}

/// Kinematic record of one vehicle at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub heading: f64,
    /// Lane index, 0 is the leftmost lane.
    pub lane: u32,
}

impl VehicleState {
    /// A vehicle travelling along +x at `speed` in `lane`, centred on the lane.
    pub fn on_lane(id: u32, x: f64, lane: u32, lane_width: f64, speed: f64) -> Self {
        Self {
            id,
            x,
            y: lane as f64 * lane_width,
            vx: speed,
            vy: 0.0,
            ax: 0.0,
            ay: 0.0,
            heading: 0.0,
            lane,
        }
    }

    pub fn speed(&self) -> f64 {
        math::hypot(self.vx, self.vy)
    }

    /// Acceleration projected on the heading direction.
    pub fn longitudinal_accel(&self) -> f64 {
        self.ax * math::cos(self.heading) + self.ay * math::sin(self.heading)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.vx, self.vy, self.ax, self.ay, self.heading]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Offset of `other` along this vehicle's heading.
    pub fn longitudinal_offset(&self, other: &VehicleState) -> f64 {
        (other.x - self.x) * math::cos(self.heading) + (other.y - self.y) * math::sin(self.heading)
    }
}

/// The eight ego-centred spatial relation types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationType {
    Ahead,
    Back,
    LeftAhead,
    LeftBack,
    Right,
    Left,
    RightAhead,
    RightBack,
}

impl RelationType {
    pub const ALL: [RelationType; 8] = [
        RelationType::Ahead,
        RelationType::Back,
        RelationType::LeftAhead,
        RelationType::LeftBack,
        RelationType::Right,
        RelationType::Left,
        RelationType::RightAhead,
        RelationType::RightBack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Ahead => "Ahead",
            RelationType::Back => "Back",
            RelationType::LeftAhead => "LeftAhead",
            RelationType::LeftBack => "LeftBack",
            RelationType::Right => "Right",
            RelationType::Left => "Left",
            RelationType::RightAhead => "RightAhead",
            RelationType::RightBack => "RightBack",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|r| *r == self).unwrap_or(0)
    }

    /// Left/right mirror image; same-lane relations map to themselves.
    pub fn mirrored(self) -> Self {
        match self {
            RelationType::Left => RelationType::Right,
            RelationType::Right => RelationType::Left,
            RelationType::LeftAhead => RelationType::RightAhead,
            RelationType::RightAhead => RelationType::LeftAhead,
            RelationType::LeftBack => RelationType::RightBack,
            RelationType::RightBack => RelationType::LeftBack,
            same => same,
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationType {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| UnknownName {
                kind: "relation",
                name: s.into(),
            })
    }
}

/// Discrete meta-actions. Declaration order is the tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaAction {
    Idle,
    Faster,
    Slower,
    TurnLeft,
    TurnRight,
}

impl MetaAction {
    pub const COUNT: usize = 5;
    pub const ALL: [MetaAction; 5] = [
        MetaAction::Idle,
        MetaAction::Faster,
        MetaAction::Slower,
        MetaAction::TurnLeft,
        MetaAction::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Upper snake-case identifier used in logs.
    pub fn name(self) -> &'static str {
        match self {
            MetaAction::Idle => "IDLE",
            MetaAction::Faster => "FASTER",
            MetaAction::Slower => "SLOWER",
            MetaAction::TurnLeft => "TURN_LEFT",
            MetaAction::TurnRight => "TURN_RIGHT",
        }
    }

    /// Spelling offered to the language model in the prompt.
    pub fn prompt_name(self) -> &'static str {
        match self {
            MetaAction::Idle => "IDLE",
            MetaAction::Faster => "Faster",
            MetaAction::Slower => "Slower",
            MetaAction::TurnLeft => "Turn-Left",
            MetaAction::TurnRight => "Turn-Right",
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, MetaAction::TurnLeft | MetaAction::TurnRight)
    }
}

impl fmt::Display for MetaAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaAction {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetaAction::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| UnknownName {
                kind: "action",
                name: s.into(),
            })
    }
}

/// Dense per-action storage indexed by [`MetaAction::index`].
pub type ActionVec = [f64; MetaAction::COUNT];

/// One directed relation from the ego to a surrounding vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub ego_id: u32,
    pub other_id: u32,
    pub relation: RelationType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Highway,
    Merge,
    Roundabout,
    Intersection,
    Replay,
}

impl ScenarioKind {
    pub const SIMULATED: [ScenarioKind; 4] = [
        ScenarioKind::Highway,
        ScenarioKind::Merge,
        ScenarioKind::Roundabout,
        ScenarioKind::Intersection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Highway => "highway",
            ScenarioKind::Merge => "merge",
            ScenarioKind::Roundabout => "roundabout",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Replay => "replay",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = UnknownName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ScenarioKind::Highway,
            ScenarioKind::Merge,
            ScenarioKind::Roundabout,
            ScenarioKind::Intersection,
            ScenarioKind::Replay,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| UnknownName {
            kind: "scenario",
            name: s.into(),
        })
    }
}

/// Ego plus surrounding vehicles at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub ego: VehicleState,
    pub others: Vec<VehicleState>,
    pub timestep: u32,
    pub lane_count: u32,
    pub scenario_kind: ScenarioKind,
}

impl SceneState {
    pub fn vehicle(&self, id: u32) -> Option<&VehicleState> {
        if self.ego.id == id {
            Some(&self.ego)
        } else {
            self.others.iter().find(|v| v.id == id)
        }
    }

    /// Invariant violations of the scene itself (ids, lanes, finiteness).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for v in core::iter::once(&self.ego).chain(self.others.iter()) {
            if !seen.insert(v.id) {
                if v.id == self.ego.id {
                    out.push(format!("others: ego id {} listed as a surrounding vehicle", v.id));
                } else {
                    out.push(format!("others: duplicate vehicle id {}", v.id));
                }
            }
            if v.lane >= self.lane_count {
                out.push(format!(
                    "lane: vehicle {} in lane {} outside [0, {})",
                    v.id, v.lane, self.lane_count
                ));
            }
            if !v.is_finite() {
                out.push(format!("kinematics: vehicle {} has non-finite values", v.id));
            }
        }
        out
    }

    /// Ground-truth relation for every surrounding vehicle, in scene order.
    pub fn ground_truth_edges(&self, long_threshold: f64) -> Vec<RelationEdge> {
        self.others
            .iter()
            .map(|o| RelationEdge {
                ego_id: self.ego.id,
                other_id: o.id,
                relation: ground_truth_relation(&self.ego, o, long_threshold),
            })
            .collect()
    }
}

/// Commonsense and kinematic trust for one surrounding vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrust {
    pub llm: f64,
    pub kin: f64,
}

/// Per-relation and scene-level trust.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustScores {
    pub per_relation: BTreeMap<u32, VehicleTrust>,
    pub scene_llm: f64,
    pub scene_kin: f64,
    /// Gated scalar trust `C_t` in `[0, 1]`.
    pub combined: f64,
}

impl TrustScores {
    /// No information at all; the planner treats this as zero trust.
    pub fn zero() -> Self {
        Self {
            per_relation: BTreeMap::new(),
            scene_llm: 0.0,
            scene_kin: 0.0,
            combined: 0.0,
        }
    }

    pub fn relation_trust(&self, other_id: u32) -> Option<f64> {
        self.per_relation.get(&other_id).map(|t| t.llm)
    }
}

/// Ego-centred scene graph with trust-weighted relation edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonsenseGraph {
    pub scene: SceneState,
    pub edges: Vec<RelationEdge>,
    pub trust: TrustScores,
}

/// Classifies `other` into one of eight sectors around `ego`.
///
/// Lane offset decides left/same/right; the longitudinal offset along the ego
/// heading decides ahead/back, with a `±long_threshold` band in adjacent lanes
/// reported as plain `Left`/`Right`. A zero offset in the same lane is `Ahead`.
pub fn ground_truth_relation(
    ego: &VehicleState,
    other: &VehicleState,
    long_threshold: f64,
) -> RelationType {
    let dlane = other.lane as i64 - ego.lane as i64;
    let dlong = ego.longitudinal_offset(other);
    match dlane.signum() {
        0 => {
            if dlong >= 0.0 {
                RelationType::Ahead
            } else {
                RelationType::Back
            }
        }
        -1 => {
            if dlong > long_threshold {
                RelationType::LeftAhead
            } else if dlong < -long_threshold {
                RelationType::LeftBack
            } else {
                RelationType::Left
            }
        }
        _ => {
            if dlong > long_threshold {
                RelationType::RightAhead
            } else if dlong < -long_threshold {
                RelationType::RightBack
            } else {
                RelationType::Right
            }
        }
    }
}

/// Describes every broken graph invariant; empty means well formed.
pub fn validate_graph(graph: &CommonsenseGraph) -> Vec<String> {
    let mut out = graph.scene.violations();
    let mut seen = BTreeSet::new();
    for edge in &graph.edges {
        if edge.ego_id != graph.scene.ego.id {
            out.push(format!(
                "edges: ego_id {} does not match scene ego {}",
                edge.ego_id, graph.scene.ego.id
            ));
        }
        if edge.ego_id == edge.other_id {
            out.push(format!("edges: self-loop on id {}", edge.other_id));
            continue;
        }
        if !graph.scene.others.iter().any(|o| o.id == edge.other_id) {
            out.push(format!("edges: unknown vehicle id {}", edge.other_id));
            continue;
        }
        if !seen.insert(edge.other_id) {
            out.push(format!("edges: duplicate edge for vehicle id {}", edge.other_id));
        }
    }
    for o in &graph.scene.others {
        if !seen.contains(&o.id) {
            out.push(format!("edges: missing edge for vehicle id {}", o.id));
        }
    }
    out
}
