//! Trust-calibrated commonsense guidance for Monte Carlo trajectory planning.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem, the network or threads lives in the `ctrail` companion crate.
//!
//! The closed loop is split into:
//!
//! * [`domain`]: scene, relation, action and trust value types.
//! * [`oracle`]: prompt construction, response parsing and a seeded mock oracle.
//! * [`trust`]: dual-trust scoring, calibration and the fixed-weight state encoder.
//! * [`planner`]: Dirichlet action prior and trust-aware PUCT search.
//! * [`env`]: a small discrete meta-action traffic simulator.
//! * [`data`]: trajectory records and replay-episode segmentation.
//! * [`eval`]: displacement metrics, relation accuracy and diagnostic losses.
//! * [`episode`]: the Recall, Plan, Update loop tying the above together.
//! * [`experiments`]: trust-dynamics, filtering-quality and failure classification.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod domain;
pub mod env;
pub mod episode;
pub mod eval;
pub mod experiments;
pub mod math;
pub mod oracle;
pub mod planner;
pub mod trust;

pub use domain::{
    CommonsenseGraph, MetaAction, RelationEdge, RelationType, ScenarioKind, SceneState,
    TrustScores, VehicleState,
};
