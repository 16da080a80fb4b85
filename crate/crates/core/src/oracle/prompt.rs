use alloc::format;
use alloc::string::String;
use core::fmt::Write;

use crate::domain::{MetaAction, RelationType, ScenarioKind, SceneState, VehicleState};

pub const DEFAULT_INTENTION: &str = "Drive safely and avoid potential collisions.";

const TASK_TEXT: &str = "You are given a structured description of a driving environment, \
including the driving scenario, the ego vehicle's intention, and a predefined set of high-level \
actions and relations. Your task is to analyze the provided context and generate two types of \
outputs:\n\
- [Action] A recommended high-level driving action selected from the available action set.\n\
- [Relations] A structured set of spatial relations between the ego vehicle and neighboring \
vehicles, using only the predefined relation types.";

/// Two-decimal formatting that never prints `-0.00`.
fn num(v: f64) -> String {
    let s = format!("{:.2}", v);
    if s == "-0.00" {
        String::from("0.00")
    } else {
        s
    }
}

fn lane_words(n: u32) -> String {
    const WORDS: [&str; 9] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    ];
    match WORDS.get(n as usize) {
        Some(w) => format!("{w}-lane"),
        None => format!("{n}-lane"),
    }
}

fn scenario_sentence(scene: &SceneState) -> String {
    let lanes = lane_words(scene.lane_count);
    match scene.scenario_kind {
        ScenarioKind::Highway => format!("The driving scenario is a {lanes} highway."),
        ScenarioKind::Merge => {
            format!("The driving scenario is a {lanes} highway with an on-ramp merging from the right.")
        }
        ScenarioKind::Roundabout => format!("The driving scenario is a {lanes} roundabout."),
        ScenarioKind::Intersection => {
            format!("The driving scenario is a {lanes} road approaching an intersection.")
        }
        ScenarioKind::Replay => format!("The driving scenario is a recorded {lanes} road segment."),
    }
}

fn kinematics(v: &VehicleState) -> String {
    format!(
        "Its position is ({}, {}), with a velocity of {} m/s and an acceleration of {} m/s^2.",
        num(v.x),
        num(v.y),
        num(v.speed()),
        num(v.longitudinal_accel())
    )
}

fn placement(ego: &VehicleState, other: &VehicleState) -> String {
    let along = if ego.longitudinal_offset(other) >= 0.0 {
        "ahead"
    } else {
        "behind"
    };
    match (other.lane as i64 - ego.lane as i64).signum() {
        0 => format!(
            "This vehicle is driving in the same lane as the ego vehicle and is positioned {along}."
        ),
        -1 => format!("This vehicle is positioned {along} and left of the ego vehicle."),
        _ => format!("This vehicle is positioned {along} and right of the ego vehicle."),
    }
}

/// Renders the six-section commonsense-graph prompt. Output is byte-stable.
pub fn build_prompt(scene: &SceneState, intention: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[TASK]\n{TASK_TEXT}\n");

    let _ = writeln!(out, "[DRIVING SCENARIO]\n{}", scenario_sentence(scene));
    let _ = writeln!(
        out,
        "- Ego Vehicle [{}]: The ego vehicle is driving in lane {}. {}",
        scene.ego.id,
        scene.ego.lane,
        kinematics(&scene.ego)
    );
    for other in &scene.others {
        let _ = writeln!(
            out,
            "- Vehicle [{}]: {} {}",
            other.id,
            placement(&scene.ego, other),
            kinematics(other)
        );
    }
    out.push('\n');

    let _ = writeln!(out, "[INTENTION]\n{intention}\n");

    let actions = MetaAction::ALL
        .iter()
        .map(|a| a.prompt_name())
        .collect::<alloc::vec::Vec<_>>()
        .join(" | ");
    let _ = writeln!(
        out,
        "[AVAILABLE ACTIONS]\nExactly one high-level action must be selected from:\n{actions}\n"
    );

    let relations = RelationType::ALL
        .iter()
        .map(|r| r.name())
        .collect::<alloc::vec::Vec<_>>()
        .join(" | ");
    let _ = writeln!(
        out,
        "[AVAILABLE RELATIONS]\nEach relation should be selected from:\n{relations}\n"
    );

    let _ = write!(
        out,
        "[RESPONSE FORMAT]\nAction: ActionName\nRelation: [(Ego Vehicle ID, Surrounding Vehicle ID, Relation)]\n"
    );
    out
}
