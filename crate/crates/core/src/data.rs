//! Columnar trajectory records and their segmentation into replay episodes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{ScenarioKind, SceneState, VehicleState};
use crate::math;

/// Column order of the trajectory CSV schema.
pub const CSV_COLUMNS: [&str; 9] = ["frame", "vehicle_id", "x", "y", "vx", "vy", "ax", "ay", "lane"];

/// Steps per replay episode.
pub const EPISODE_STEPS: usize = 10;

/// One vehicle at one recorded frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub frame: u32,
    pub vehicle_id: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub lane: u32,
}

impl TrajectoryRecord {
    /// Heading from the velocity vector, 0 below 0.1 m/s.
    pub fn heading(&self) -> f64 {
        if math::hypot(self.vx, self.vy) < 0.1 {
            0.0
        } else {
            math::atan2(self.vy, self.vx)
        }
    }

    pub fn to_vehicle(&self) -> VehicleState {
        VehicleState {
            id: self.vehicle_id,
            x: self.x,
            y: self.y,
            vx: self.vx,
            vy: self.vy,
            ax: self.ax,
            ay: self.ay,
            heading: self.heading(),
            lane: self.lane,
        }
    }

    pub fn from_vehicle(frame: u32, v: &VehicleState) -> Self {
        Self {
            frame,
            vehicle_id: v.id,
            x: v.x,
            y: v.y,
            vx: v.vx,
            vy: v.vy,
            ax: v.ax,
            ay: v.ay,
            lane: v.lane,
        }
    }
}

/// All vehicles recorded at one (downsampled) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFrame {
    pub frame: u32,
    pub records: Vec<TrajectoryRecord>,
}

impl ReplayFrame {
    pub fn record(&self, id: u32) -> Option<&TrajectoryRecord> {
        self.records.iter().find(|r| r.vehicle_id == id)
    }
}

/// A fixed-length 1 Hz window around one ego vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEpisode {
    pub ego_id: u32,
    pub step_hz: u32,
    pub frames: Vec<ReplayFrame>,
}

impl ReplayEpisode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// One past the largest lane index seen, at least 2.
    pub fn lane_count(&self) -> u32 {
        self.frames
            .iter()
            .flat_map(|f| f.records.iter())
            .map(|r| r.lane + 1)
            .max()
            .unwrap_or(0)
            .max(2)
    }

    /// Recorded ego positions, one per frame.
    pub fn ego_track(&self) -> Vec<(f64, f64)> {
        self.frames
            .iter()
            .filter_map(|f| f.record(self.ego_id).map(|r| (r.x, r.y)))
            .collect()
    }

    /// Scene per frame with the recorded ego as ego.
    pub fn scenes(&self) -> Vec<SceneState> {
        let lane_count = self.lane_count();
        self.frames
            .iter()
            .enumerate()
            .filter_map(|(t, f)| {
                let ego = f.record(self.ego_id)?.to_vehicle();
                let others = f
                    .records
                    .iter()
                    .filter(|r| r.vehicle_id != self.ego_id)
                    .map(TrajectoryRecord::to_vehicle)
                    .collect();
                Some(SceneState {
                    ego,
                    others,
                    timestep: t as u32,
                    lane_count,
                    scenario_kind: ScenarioKind::Replay,
                })
            })
            .collect()
    }
}

/// Which vehicles become replay egos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum EgoSelection {
    /// The vehicle with the longest continuous run of downsampled frames;
    /// ties go to the lower id.
    #[default]
    LongestPresence,
    Vehicle(u32),
    Every,
}

/// Window length and stride, both in downsampled steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windowing {
    pub length: usize,
    pub stride: usize,
}

impl Default for Windowing {
    fn default() -> Self {
        Self {
            length: EPISODE_STEPS,
            stride: EPISODE_STEPS,
        }
    }
}

/// Downsamples to 1 Hz and cuts fixed windows per ego.
///
/// Every `raw_hz`-th frame counted from the first recorded frame is kept.
/// Windows in which the ego is missing from any frame are dropped.
pub fn segment_episodes(
    records: &[TrajectoryRecord],
    selection: &EgoSelection,
    raw_hz: u32,
) -> Vec<ReplayEpisode> {
    segment_with(records, selection, raw_hz, Windowing::default())
}

pub fn segment_with(
    records: &[TrajectoryRecord],
    selection: &EgoSelection,
    raw_hz: u32,
    windowing: Windowing,
) -> Vec<ReplayEpisode> {
    let raw_hz = raw_hz.max(1);
    let Some(first) = records.iter().map(|r| r.frame).min() else {
        return Vec::new();
    };
    let last = records.iter().map(|r| r.frame).max().unwrap_or(first);

    let mut by_frame: BTreeMap<u32, Vec<TrajectoryRecord>> = BTreeMap::new();
    for r in records {
        if (r.frame - first) % raw_hz == 0 {
            by_frame.entry(r.frame).or_default().push(*r);
        }
    }
    let frames: Vec<ReplayFrame> = (0..=(last - first) / raw_hz)
        .map(|k| {
            let frame = first + k * raw_hz;
            let mut records = by_frame.remove(&frame).unwrap_or_default();
            records.sort_by_key(|r| r.vehicle_id);
            ReplayFrame { frame, records }
        })
        .collect();

    let present = |id: u32, f: &ReplayFrame| f.record(id).is_some();
    let egos: Vec<u32> = match selection {
        EgoSelection::Vehicle(id) => alloc::vec![*id],
        EgoSelection::Every => frames
            .iter()
            .flat_map(|f| f.records.iter().map(|r| r.vehicle_id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        EgoSelection::LongestPresence => {
            let ids: BTreeSet<u32> = frames
                .iter()
                .flat_map(|f| f.records.iter().map(|r| r.vehicle_id))
                .collect();
            let mut best: Option<(usize, u32)> = None;
            for id in ids {
                let mut run = 0;
                let mut longest = 0;
                for f in &frames {
                    run = if present(id, f) { run + 1 } else { 0 };
                    longest = longest.max(run);
                }
                if best.is_none_or(|(l, _)| longest > l) {
                    best = Some((longest, id));
                }
            }
            best.map(|(_, id)| alloc::vec![id]).unwrap_or_default()
        }
    };

    let len = windowing.length.max(1);
    let stride = windowing.stride.max(1);
    let mut out = Vec::new();
    for ego_id in egos {
        let mut start = 0;
        while start + len <= frames.len() {
            let window = &frames[start..start + len];
            if window.iter().all(|f| present(ego_id, f)) {
                out.push(ReplayEpisode {
                    ego_id,
                    step_hz: 1,
                    frames: window.to_vec(),
                });
            }
            start += stride;
        }
    }
    out
}
