//! Experiment orchestration and run-directory artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ctrail_core::data::{segment_episodes, ReplayEpisode};
use ctrail_core::env::{make_scenario, EnvConfig, EnvError, Simulator};
use ctrail_core::episode::{run_episode, trajectory_metrics, Ablation, EpisodeError, LoopConfig, StepRecord};
use ctrail_core::eval::{mean_std, EpisodeMetrics, MetricReport};
use ctrail_core::experiments::{classify_steps, FailureRecord, FailureRules};
use ctrail_core::math::mix_seed;
use ctrail_core::oracle::{query_batch, ErrorInjection, MockConfig, MockOracle, OracleClient};
use ctrail_core::trust::TrustConfig;
use ctrail_core::{SceneState, ScenarioKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Mode, OracleSettings};
use crate::csv_io::{load_csv, CsvError};
use crate::live::{query_batch_parallel, LiveClient, LiveError};

pub const STEPS_FILE: &str = "steps.jsonl";
pub const TRUST_FILE: &str = "trust.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const FAILURES_FILE: &str = "failures.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Data(#[from] CsvError),
    #[error("dataset {0} yields no 10-step episode")]
    NoEpisodes(PathBuf),
    #[error(transparent)]
    Live(#[from] LiveError),
    #[error("scenario: {0}")]
    Env(#[from] EnvError),
    #[error("seed {seed} episode {episode}: {source}")]
    Episode {
        seed: u64,
        episode: u64,
        source: EpisodeError,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Oracle condition of a trust-dynamics pair; `Nominal` everywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Nominal,
    Normal,
    Injected,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Nominal => "nominal",
            Condition::Normal => "normal",
            Condition::Injected => "injected",
        }
    }
}

/// One line of `steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub scenario: ScenarioKind,
    pub ablation: Ablation,
    pub condition: Condition,
    pub seed: u64,
    pub episode: u64,
    /// Ego position after the step's action; absent on recall-only cycles.
    pub position_after: Option<(f64, f64)>,
    pub reference_after: Option<(f64, f64)>,
    pub record: StepRecord,
}

/// One line of `trust.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRow {
    pub ablation: Ablation,
    pub condition: Condition,
    pub seed: u64,
    pub episode: u64,
    pub t: u32,
    pub trust: f64,
    pub scene_llm: f64,
    pub scene_kin: f64,
}

#[derive(Debug, Clone)]
struct Job {
    seed: u64,
    episode: u64,
    ablation: Ablation,
    condition: Condition,
    replay: Option<Arc<ReplayEpisode>>,
}

/// Steps of one finished episode with its identifying keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub scenario: ScenarioKind,
    pub ablation: Ablation,
    pub condition: Condition,
    pub seed: u64,
    pub episode: u64,
    pub rows: Vec<StepRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub scenario: ScenarioKind,
    pub ablation: Ablation,
    pub condition: Condition,
}

/// Mean and sample standard deviation across seeds of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub key: GroupKey,
    pub seeds: usize,
    pub episodes: usize,
    pub ade: (f64, f64),
    pub fde: (f64, f64),
    pub sr: (f64, f64),
    pub rpa: (f64, f64),
    pub collision_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub key: GroupKey,
    pub episode: u64,
    pub record: FailureRecord,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub episodes: Vec<EpisodeRun>,
    pub metrics: Vec<MetricRow>,
    pub failures: Vec<FailureRow>,
}

enum Oracle {
    Mock(MockConfig),
    Live(LiveClient),
}

/// Runs every episode of the configured mode and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    if cfg.mode == Mode::Report {
        return Err(ConfigError::Invalid("report mode reads an existing run; use `ctrail report`".into()).into());
    }
    let oracle = match &cfg.oracle {
        OracleSettings::Mock(m) => Oracle::Mock(m.clone()),
        OracleSettings::Live(l) => Oracle::Live(LiveClient::from_env(l)?),
    };
    if cfg.mode == Mode::TrustDynamics && matches!(oracle, Oracle::Live(_)) {
        return Err(ConfigError::Invalid("trust-dynamics injects errors and needs the mock oracle".into()).into());
    }
    let env = cfg.env_config()?;
    let base_loop = cfg.loop_config()?;
    let jobs = plan_jobs(cfg)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let episodes: Vec<EpisodeRun> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(cfg, &env, &base_loop, &oracle, job))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let trust_cfg = base_loop.trust.clone();
    let metrics = metric_rows(&episodes, base_loop.success_delta);
    let failures = failure_rows(&episodes, &trust_cfg, &cfg.failure);
    let dir = cfg.output.clone();
    write_run(&dir, cfg, &episodes, &metrics, &failures)?;
    Ok(RunSummary {
        dir,
        episodes,
        metrics,
        failures,
    })
}

fn plan_jobs(cfg: &ExperimentConfig) -> Result<Vec<Job>, RunError> {
    let mut jobs = Vec::new();
    let mut push = |seed, episode, ablation, condition, replay: Option<Arc<ReplayEpisode>>| {
        jobs.push(Job {
            seed,
            episode,
            ablation,
            condition,
            replay,
        })
    };
    match cfg.mode {
        Mode::Run => {
            for &s in &cfg.seeds {
                for e in 0..cfg.episode_count {
                    push(s, e, cfg.ablation, Condition::Nominal, None);
                }
            }
        }
        Mode::Ablate => {
            for a in cfg.ablation_variants() {
                for &s in &cfg.seeds {
                    for e in 0..cfg.episode_count {
                        push(s, e, a, Condition::Nominal, None);
                    }
                }
            }
        }
        Mode::TrustDynamics => {
            for c in [Condition::Normal, Condition::Injected] {
                for &s in &cfg.seeds {
                    for e in 0..cfg.trust_dynamics.episodes {
                        push(s, e, cfg.ablation, c, None);
                    }
                }
            }
        }
        Mode::Replay => {
            let path = cfg.dataset.clone().unwrap_or_default();
            let records = load_csv(&path)?;
            let segments: Vec<Arc<ReplayEpisode>> = segment_episodes(&records, &cfg.ego_selection, cfg.raw_hz)
                .into_iter()
                .map(Arc::new)
                .collect();
            if segments.is_empty() {
                return Err(RunError::NoEpisodes(path));
            }
            for &s in &cfg.seeds {
                for (e, seg) in segments.iter().take(cfg.episode_count as usize).enumerate() {
                    push(s, e as u64, cfg.ablation, Condition::Nominal, Some(seg.clone()));
                }
            }
        }
        Mode::Report => {}
    }
    Ok(jobs)
}

fn run_job(
    cfg: &ExperimentConfig,
    env: &EnvConfig,
    base_loop: &LoopConfig,
    oracle: &Oracle,
    job: &Job,
) -> Result<EpisodeRun, RunError> {
    let mut loop_cfg = base_loop.clone();
    loop_cfg.ablation = job.ablation;
    loop_cfg.search.seed = mix_seed(base_loop.search.seed, job.seed);
    let sim = match &job.replay {
        Some(ep) => Simulator::from_replay(
            ep.clone(),
            EnvConfig {
                seed: mix_seed(env.seed, job.seed),
                ..env.clone()
            },
        )?,
        None => make_scenario(&EnvConfig {
            seed: mix_seed(mix_seed(env.seed, job.seed), job.episode),
            ..env.clone()
        })?,
    };
    let episode_seed = job.episode;
    let (intention, m) = (loop_cfg.intention.clone(), loop_cfg.m);
    let log = match oracle {
        Oracle::Mock(mock) => {
            let mut mock = MockConfig {
                seed: mix_seed(mix_seed(mock.seed, job.seed), job.episode),
                ..mock.clone()
            };
            match job.condition {
                Condition::Nominal => {}
                Condition::Normal => {
                    mock.relation_error_rate = 0.0;
                    mock.injection = None;
                }
                Condition::Injected => {
                    mock.relation_error_rate = 0.0;
                    mock.injection = Some(ErrorInjection {
                        from_timestep: cfg.trust_dynamics.injection_step,
                        relation_error_rate: cfg.trust_dynamics.injected_error_rate,
                    });
                }
            }
            let client = MockOracle::new(mock);
            let mut query = |s: &SceneState| query_batch(s, &intention, m, &client);
            run_episode(sim, &loop_cfg, episode_seed, &mut query)
        }
        Oracle::Live(client) => {
            let client: &dyn OracleClient = client;
            let mut query = |s: &SceneState| query_batch_parallel(s, &intention, m, client);
            run_episode(sim, &loop_cfg, episode_seed, &mut query)
        }
    }
    .map_err(|source| RunError::Episode {
        seed: job.seed,
        episode: job.episode,
        source,
    })?;

    let scenario = log.scenario_kind;
    let rows = log
        .steps
        .iter()
        .enumerate()
        .map(|(i, record)| StepRow {
            scenario,
            ablation: job.ablation,
            condition: job.condition,
            seed: job.seed,
            episode: job.episode,
            position_after: record.plan.as_ref().and(log.trajectory.get(i).copied()),
            reference_after: record.plan.as_ref().and(log.reference.get(i).copied()),
            record: record.clone(),
        })
        .collect();
    Ok(EpisodeRun {
        scenario,
        ablation: job.ablation,
        condition: job.condition,
        seed: job.seed,
        episode: job.episode,
        rows,
    })
}

/// Metrics of one episode recomputed from its step rows.
pub fn episode_metrics(rows: &[StepRow], success_delta: f64) -> EpisodeMetrics {
    let (trajectory, reference): (Vec<_>, Vec<_>) = rows
        .iter()
        .filter_map(|r| r.position_after.zip(r.reference_after))
        .unzip();
    let steps: Vec<StepRecord> = rows.iter().map(|r| r.record.clone()).collect();
    let recorded = rows.first().is_some_and(|r| r.scenario == ScenarioKind::Replay);
    let collided = rows.iter().any(|r| r.record.collision);
    trajectory_metrics(&trajectory, &reference, &steps, recorded, collided, success_delta)
}

fn key_of(e: &EpisodeRun) -> GroupKey {
    GroupKey {
        scenario: e.scenario,
        ablation: e.ablation,
        condition: e.condition,
    }
}

/// Per-group metrics: a report per seed, then mean and sample stddev over seeds.
pub fn metric_rows(episodes: &[EpisodeRun], success_delta: f64) -> Vec<MetricRow> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<EpisodeMetrics>>> = BTreeMap::new();
    for e in episodes {
        groups
            .entry(key_of(e))
            .or_default()
            .entry(e.seed)
            .or_default()
            .push(episode_metrics(&e.rows, success_delta));
    }
    groups
        .into_iter()
        .map(|(key, by_seed)| {
            let reports: Vec<MetricReport> = by_seed.values().map(|m| MetricReport::from_episodes(m)).collect();
            let stat = |f: fn(&MetricReport) -> f64| {
                let s = mean_std(&reports.iter().map(f).collect::<Vec<_>>());
                (s.mean, s.std)
            };
            let all: Vec<&EpisodeMetrics> = by_seed.values().flatten().collect();
            MetricRow {
                seeds: reports.len(),
                episodes: all.len(),
                ade: stat(|r| r.ade),
                fde: stat(|r| r.fde),
                sr: stat(|r| r.sr),
                rpa: stat(|r| r.rpa),
                collision_rate: all.iter().filter(|m| m.collided).count() as f64 / all.len().max(1) as f64,
                key,
            }
        })
        .collect()
}

pub fn failure_rows(episodes: &[EpisodeRun], trust: &TrustConfig, rules: &FailureRules) -> Vec<FailureRow> {
    let mut out: Vec<FailureRow> = episodes
        .iter()
        .filter_map(|e| {
            let steps: Vec<StepRecord> = e.rows.iter().map(|r| r.record.clone()).collect();
            classify_steps(e.seed, &steps, trust, rules).map(|record| FailureRow {
                key: key_of(e),
                episode: e.episode,
                record,
            })
        })
        .collect();
    out.sort_by(|a, b| (&a.key, a.record.seed, a.episode).cmp(&(&b.key, b.record.seed, b.episode)));
    out
}

pub const METRICS_HEADER: [&str; 14] = [
    "scenario",
    "ablation",
    "condition",
    "seeds",
    "episodes",
    "ade_mean",
    "ade_std",
    "fde_mean",
    "fde_std",
    "sr_mean",
    "sr_std",
    "rpa_mean",
    "rpa_std",
    "collision_rate",
];

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_io(path, e))?;
    for r in rows {
        let f = |v: f64| format!("{v:.6}");
        w.write_record([
            r.key.scenario.name().to_string(),
            r.key.ablation.name().to_string(),
            r.key.condition.name().to_string(),
            r.seeds.to_string(),
            r.episodes.to_string(),
            f(r.ade.0),
            f(r.ade.1),
            f(r.fde.0),
            f(r.fde.1),
            f(r.sr.0),
            f(r.sr.1),
            f(r.rpa.0),
            f(r.rpa.1),
            f(r.collision_rate),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_metrics_json(path: &Path, rows: &[MetricRow]) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(rows).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub const FAILURES_HEADER: [&str; 13] = [
    "scenario",
    "ablation",
    "condition",
    "seed",
    "episode",
    "timestep",
    "class",
    "policy",
    "model",
    "mapping",
    "collided_with",
    "detail",
    "rule",
];

const FAILURE_RULE_NOTE: &str = "first of mapping (alias fired), model (colliding vehicle missing or gated trust below threshold), policy (top-two prior gap within threshold)";

pub fn write_failures(path: &Path, rows: &[FailureRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(FAILURES_HEADER).map_err(|e| csv_io(path, e))?;
    for r in rows {
        let ids: Vec<String> = r.record.collided_with.iter().map(u32::to_string).collect();
        w.write_record([
            r.key.scenario.name().to_string(),
            r.key.ablation.name().to_string(),
            r.key.condition.name().to_string(),
            r.record.seed.to_string(),
            r.episode.to_string(),
            r.record.timestep.to_string(),
            r.record.class.name().to_string(),
            r.record.policy.to_string(),
            r.record.model.to_string(),
            r.record.mapping.to_string(),
            ids.join(" "),
            r.record.detail.clone(),
            FAILURE_RULE_NOTE.to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> RunError {
    RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| RunError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    episodes: &[EpisodeRun],
    metrics: &[MetricRow],
    failures: &[FailureRow],
) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
    write_jsonl(&dir.join(STEPS_FILE), episodes.iter().flat_map(|e| e.rows.iter()))?;
    write_jsonl(
        &dir.join(TRUST_FILE),
        episodes.iter().flat_map(|e| {
            e.rows.iter().map(move |r| TrustRow {
                ablation: e.ablation,
                condition: e.condition,
                seed: e.seed,
                episode: e.episode,
                t: r.record.timestep,
                trust: r.record.trust_used,
                scene_llm: r.record.trust.scene_llm,
                scene_kin: r.record.trust.scene_kin,
            })
        }),
    )?;
    write_metrics(&dir.join(METRICS_FILE), metrics)?;
    write_metrics_json(&dir.join(METRICS_JSON), metrics)?;
    write_failures(&dir.join(FAILURES_FILE), failures)
}
