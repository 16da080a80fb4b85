//! Rebuilds aggregate tables from the raw step log of a finished run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ctrail_core::experiments::FailureClass;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::runner::{
    failure_rows, metric_rows, write_failures, write_metrics, write_metrics_json, EpisodeRun, FailureRow, GroupKey, MetricRow, RunError,
    StepRow, CONFIG_FILE, STEPS_FILE,
};

pub const REPORT_DIR: &str = "report";
pub const METRICS_REPORT: &str = "metrics_by_scenario.csv";
pub const METRICS_REPORT_JSON: &str = "metrics_by_scenario.json";
pub const TRUST_REPORT: &str = "trust_series.csv";
pub const FAILURES_REPORT: &str = "failures.csv";
pub const FAILURE_SUMMARY: &str = "failure_summary.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0} not found; is this a run directory?")]
    Missing(PathBuf),
    #[error("{path}:{line}: {detail}")]
    Corrupt { path: PathBuf, line: usize, detail: String },
    #[error("{0} holds no step records")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error(transparent)]
    Write(#[from] RunError),
}

/// Tables produced by [`emit_report`].
#[derive(Debug, Clone)]
pub struct Report {
    pub metrics: Vec<MetricRow>,
    pub failures: Vec<FailureRow>,
    pub trust: Vec<TrustPoint>,
}

/// Mean trust of one group at one step, over the episodes still running.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustPoint {
    pub key: GroupKey,
    pub t: u32,
    pub mean: f64,
    pub episodes: usize,
}

/// Loads `steps.jsonl` and regroups rows into episodes in file order.
pub fn load_steps(dir: &Path) -> Result<Vec<EpisodeRun>, ReportError> {
    let path = dir.join(STEPS_FILE);
    let file = fs::File::open(&path).map_err(|_| ReportError::Missing(path.clone()))?;
    let mut episodes: Vec<EpisodeRun> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let corrupt = |detail: String| ReportError::Corrupt {
            path: path.clone(),
            line: i + 1,
            detail,
        };
        let line = line.map_err(|e| corrupt(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: StepRow = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let same = episodes.last().is_some_and(|e| {
            (e.scenario, e.ablation, e.condition, e.seed, e.episode)
                == (row.scenario, row.ablation, row.condition, row.seed, row.episode)
        });
        if !same {
            episodes.push(EpisodeRun {
                scenario: row.scenario,
                ablation: row.ablation,
                condition: row.condition,
                seed: row.seed,
                episode: row.episode,
                rows: Vec::new(),
            });
        }
        if let Some(e) = episodes.last_mut() {
            e.rows.push(row);
        }
    }
    if episodes.is_empty() {
        return Err(ReportError::Empty(path));
    }
    Ok(episodes)
}

pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig, ReportError> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|_| ReportError::Missing(path.clone()))?;
    ExperimentConfig::parse(&text, &[]).map_err(|source| ReportError::Config { path, source })
}

pub fn trust_series(episodes: &[EpisodeRun]) -> Vec<TrustPoint> {
    let mut acc: BTreeMap<(GroupKey, u32), (f64, usize)> = BTreeMap::new();
    for e in episodes {
        let key = GroupKey {
            scenario: e.scenario,
            ablation: e.ablation,
            condition: e.condition,
        };
        for r in &e.rows {
            let slot = acc.entry((key.clone(), r.record.timestep)).or_insert((0.0, 0));
            slot.0 += r.record.trust_used;
            slot.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((key, t), (sum, n))| TrustPoint {
            key,
            t,
            mean: sum / n as f64,
            episodes: n,
        })
        .collect()
}

/// Recomputes metrics, trust series and failure tables from `dir` and writes
/// them to `dir/report/`. Output is byte-identical across repeated calls.
pub fn emit_report(dir: &Path) -> Result<Report, ReportError> {
    let cfg = load_run_config(dir)?;
    let episodes = load_steps(dir)?;
    let lc = cfg.loop_config().map_err(|source| ReportError::Config {
        path: dir.join(CONFIG_FILE),
        source,
    })?;
    let metrics = metric_rows(&episodes, lc.success_delta);
    let failures = failure_rows(&episodes, &lc.trust, &cfg.failure);
    let trust = trust_series(&episodes);

    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|source| RunError::Io {
        path: out.clone(),
        source,
    })?;
    write_metrics(&out.join(METRICS_REPORT), &metrics)?;
    write_metrics_json(&out.join(METRICS_REPORT_JSON), &metrics)?;
    write_failures(&out.join(FAILURES_REPORT), &failures)?;
    write_trust(&out.join(TRUST_REPORT), &trust)?;
    write_failure_summary(&out.join(FAILURE_SUMMARY), &episodes, &failures)?;
    Ok(Report {
        metrics,
        failures,
        trust,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_trust(path: &Path, points: &[TrustPoint]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["scenario", "ablation", "condition", "t", "mean_trust", "episodes"])
        .map_err(|e| csv_err(path, e))?;
    for p in points {
        w.write_record([
            p.key.scenario.name().to_string(),
            p.key.ablation.name().to_string(),
            p.key.condition.name().to_string(),
            p.t.to_string(),
            format!("{:.6}", p.mean),
            p.episodes.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

const CLASSES: [FailureClass; 4] = [
    FailureClass::Mapping,
    FailureClass::Model,
    FailureClass::Policy,
    FailureClass::Unclassified,
];

fn write_failure_summary(path: &Path, episodes: &[EpisodeRun], failures: &[FailureRow]) -> Result<(), RunError> {
    let mut totals: BTreeMap<GroupKey, (usize, [usize; 4])> = BTreeMap::new();
    for e in episodes {
        let key = GroupKey {
            scenario: e.scenario,
            ablation: e.ablation,
            condition: e.condition,
        };
        totals.entry(key).or_default().0 += 1;
    }
    for f in failures {
        if let Some(slot) = totals.get_mut(&f.key) {
            if let Some(i) = CLASSES.iter().position(|c| *c == f.record.class) {
                slot.1[i] += 1;
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["scenario", "ablation", "condition", "episodes", "collisions"];
    header.extend(CLASSES.iter().map(|c| c.name()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (key, (n, counts)) in totals {
        let mut row = vec![
            key.scenario.name().to_string(),
            key.ablation.name().to_string(),
            key.condition.name().to_string(),
            n.to_string(),
            counts.iter().sum::<usize>().to_string(),
        ];
        row.extend(counts.iter().map(usize::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
