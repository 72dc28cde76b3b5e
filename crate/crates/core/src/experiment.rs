//! Scenario suites: method comparison, weight sweeps and force-model
//! comparison over seeded episodes, with deterministic result files.
//!
//! A suite is described by one TOML file. Every method is evaluated on the
//! `real_env` variant; offline gains come from a gain file or from a gain
//! search in `sim_env`. Completion times are simulated seconds.

use std::fmt::Write as _;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{run_episode, AdaptationConfig, EpisodeOutcome, EpisodeSpec, ForceSource, UpdateRecord};
use crate::admittance::AdmittanceParams;
use crate::env::{EnvConfig, Geometry, Task};
use crate::error::{Error, Result};
use crate::force_window::{linear_fit_generalization, FitGeneralization};
use crate::offline::{
    cem_gain_search, manual_gains, scripted_trajectory, GainFile, GainSearchConfig, InitialConditions, Provenance,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Label stored in every result file for the completion-time clock.
pub const TIME_BASIS: &str = "simulated seconds";

/// Field-wise changes applied on top of a base environment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvOverrides {
    pub k_env: Option<f64>,
    /// Multiplies `k_env` after any absolute override.
    pub k_env_scale: Option<f64>,
    pub d_env: Option<f64>,
    pub mu: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub force_clip: Option<f64>,
    pub latency_steps: Option<usize>,
    pub slip_velocity: Option<f64>,
    pub substeps: Option<usize>,
    pub geometry: Option<Geometry>,
}

impl EnvOverrides {
    pub fn apply(&self, base: &EnvConfig) -> EnvConfig {
        let mut env = base.clone();
        if let Some(v) = self.k_env {
            env.k_env = v;
        }
        if let Some(s) = self.k_env_scale {
            env.k_env *= s;
        }
        if let Some(v) = self.d_env {
            env.d_env = v;
        }
        if let Some(v) = self.mu {
            env.mu = v;
        }
        if let Some(v) = self.noise_sigma {
            env.noise_sigma = v;
        }
        if let Some(v) = self.force_clip {
            env.force_clip = v;
        }
        if let Some(v) = self.latency_steps {
            env.latency_steps = v;
        }
        if let Some(v) = self.slip_velocity {
            env.slip_velocity = v;
        }
        if let Some(v) = self.substeps {
            env.substeps = v;
        }
        if let Some(g) = &self.geometry {
            env.geometry = g.clone();
        }
        env
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Offline gains with online residual adaptation.
    Proposed,
    ManualTune,
    DirectTransfer,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::ManualTune => "manual_tune",
            Method::DirectTransfer => "direct_transfer",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "manual_tune" => Ok(Method::ManualTune),
            "direct_transfer" => Ok(Method::DirectTransfer),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Proposed, Method::ManualTune, Method::DirectTransfer]
}

fn default_dt() -> f64 {
    0.01
}

fn default_adaptation() -> AdaptationConfig {
    AdaptationConfig::new(1.0, 0.4)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub schema_version: u32,
    pub name: String,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    pub episodes: usize,
    /// Simulated episode length, s; defaults to the scripted plan length.
    #[serde(default)]
    pub timeout: Option<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Offline gains to use instead of running the gain search. Relative
    /// paths resolve against the config file's directory.
    #[serde(default)]
    pub gain_file: Option<PathBuf>,
    #[serde(default)]
    pub sim_env: EnvOverrides,
    /// Applied on top of `sim_env`.
    #[serde(default)]
    pub real_env: EnvOverrides,
    #[serde(default = "default_adaptation")]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub offline: GainSearchConfig,
    /// Write one CSV and one JSON file per episode.
    #[serde(default = "default_true")]
    pub traces: bool,
    /// SHA-256 of the source text.
    #[serde(skip)]
    pub source_hash: String,
}

impl SuiteConfig {
    /// Parses and validates a config; `base_dir` anchors a relative
    /// `gain_file`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        match table.get("schema_version") {
            None => return Err(Error::Parse("missing key `schema_version`".into())),
            Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Parse(format!(
                    "key `schema_version`: unsupported value {v}, expected {SCHEMA_VERSION}"
                )))
            }
        }
        let mut cfg: SuiteConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if let (Some(dir), Some(path)) = (base_dir, cfg.gain_file.as_mut()) {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
        cfg.source_hash = hex::encode(Sha256::digest(text.as_bytes()));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent()).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be ≥ 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be > 0".into()));
        }
        if self.timeout.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("timeout must be > 0".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        let (sim, real) = (self.sim_env(), self.real_env());
        for env in [&sim, &real] {
            env.validate()?;
            if env.task() != self.task {
                return Err(Error::Config(format!(
                    "geometry is for {}, suite task is {}",
                    env.task(),
                    self.task
                )));
            }
        }
        if self.methods.len() > 1 && !physics_differ(&sim, &real) {
            return Err(Error::Config(
                "method comparison needs a real_env that differs from sim_env in physics".into(),
            ));
        }
        if let Some(path) = &self.gain_file {
            if !path.exists() {
                return Err(Error::Config(format!("gain file {} does not exist", path.display())));
            }
        }
        self.adaptation.validate(self.dt)?;
        self.offline.validate()
    }

    pub fn sim_env(&self) -> EnvConfig {
        self.sim_env.apply(&EnvConfig::nominal(self.task))
    }

    pub fn real_env(&self) -> EnvConfig {
        self.real_env.apply(&self.sim_env())
    }

    /// Seed of episode `index`.
    pub fn episode_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }

    /// Offline gains from the gain file, or from a gain search in `sim_env`.
    pub fn offline_gains(&self) -> Result<OfflineGains> {
        if let Some(path) = &self.gain_file {
            let file = GainFile::load(path)?;
            if file.task != self.task {
                return Err(Error::Config(format!(
                    "gain file is for {}, suite task is {}",
                    file.task, self.task
                )));
            }
            return Ok(OfflineGains {
                gains: file.gains()?,
                objective: Some(file.provenance.objective),
                source: path.display().to_string(),
            });
        }
        let result = cem_gain_search(&self.offline, &self.sim_env(), self.dt)?;
        if result.all_failed {
            log::warn!("gain search for '{}' found no successful candidate", self.name);
        }
        Ok(OfflineGains {
            gains: result.gains,
            objective: Some(result.objective),
            source: "gain_search".into(),
        })
    }

    /// Gain file for the offline gains of this suite.
    pub fn gain_file_for(&self, offline: &OfflineGains) -> GainFile {
        GainFile::new(
            self.task,
            &offline.gains,
            Provenance {
                seed: self.offline.seed,
                config_hash: self.source_hash.clone(),
                objective: offline.objective.unwrap_or(f64::NAN),
            },
        )
    }
}

fn physics_differ(a: &EnvConfig, b: &EnvConfig) -> bool {
    a.k_env != b.k_env
        || a.d_env != b.d_env
        || a.mu != b.mu
        || a.noise_sigma != b.noise_sigma
        || a.force_clip != b.force_clip
        || a.latency_steps != b.latency_steps
        || a.slip_velocity != b.slip_velocity
        || a.geometry != b.geometry
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineGains {
    pub gains: AdmittanceParams,
    pub objective: Option<f64>,
    pub source: String,
}

/// Sample mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `None` for an empty sample; the deviation of one value is 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Result of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub method: Method,
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    pub completion_time: Option<f64>,
    pub max_force: f64,
    pub separations: usize,
    /// Separations after the first applied gain update.
    pub separations_after_update: Option<usize>,
    /// Peak force after the first applied gain update.
    pub max_force_after_update: Option<f64>,
    pub updates: usize,
    /// Largest `cost_after − cost_before` over applied updates.
    pub max_cost_change: Option<f64>,
    /// Set when the episode crashed; it then counts as a failure.
    pub error: Option<String>,
}

/// One row of a results table. Time statistics cover successful episodes
/// only and are absent when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub scenario: String,
    pub successes: usize,
    pub total: usize,
    pub completion_time: Option<Stat>,
    pub max_force: Option<Stat>,
}

impl ResultRow {
    pub fn from_episodes(method: Method, scenario: &str, episodes: &[&EpisodeSummary]) -> Self {
        let times: Vec<f64> = episodes.iter().filter_map(|e| e.completion_time).collect();
        let forces: Vec<f64> = episodes
            .iter()
            .filter(|e| e.error.is_none())
            .map(|e| e.max_force)
            .collect();
        Self {
            method,
            scenario: scenario.to_string(),
            successes: episodes.iter().filter(|e| e.success).count(),
            total: episodes.len(),
            completion_time: Stat::of(&times),
            max_force: Stat::of(&forces),
        }
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub scenario: String,
    pub task: Task,
    pub time_basis: String,
    pub config_hash: String,
    pub offline_gains: OfflineGains,
    pub rows: Vec<ResultRow>,
    pub episodes: Vec<EpisodeSummary>,
}

impl SuiteReport {
    pub fn row(&self, method: Method) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Per-episode telemetry written next to the trace CSV.
#[derive(Serialize)]
struct EpisodeTelemetry<'a> {
    summary: &'a EpisodeSummary,
    final_gains: Option<&'a AdmittanceParams>,
    updates: &'a [UpdateRecord],
}

struct Job<'a> {
    method: Method,
    index: usize,
    env: &'a EnvConfig,
    gains: &'a AdmittanceParams,
    adaptation: Option<&'a AdaptationConfig>,
    trace_stem: Option<String>,
}

/// Runs an episode, turning errors and panics into a failed summary.
fn run_job(cfg: &SuiteConfig, job: &Job, trace_dir: Option<&Path>) -> Result<(EpisodeSummary, Option<EpisodeOutcome>)> {
    let seed = cfg.episode_seed(job.index);
    let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<EpisodeOutcome> {
        let ic = InitialConditions::sample(&job.env.geometry, seed);
        let plan = scripted_trajectory(&job.env.geometry, &ic.pose, cfg.dt)?;
        let mut spec = EpisodeSpec::new(
            job.env.clone(),
            plan,
            job.gains.clone(),
            ic.env_state(cfg.task)?,
            ic.sensor_seed,
        );
        if let Some(t) = cfg.timeout {
            spec.duration = t;
        }
        if let Some(a) = job.adaptation {
            spec = spec.with_adaptation(a.clone());
        }
        run_episode(&spec)
    }));
    let outcome = match attempt {
        Ok(Ok(o)) => Ok(o),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "episode panicked".into())),
    };
    let summary = match &outcome {
        Ok(o) => {
            let first = o.trace.first_update();
            EpisodeSummary {
                method: job.method,
                index: job.index,
                seed,
                success: o.metrics.success,
                completion_time: o.metrics.completion_time,
                max_force: o.metrics.max_force,
                separations: o.trace.separations_after(f64::NEG_INFINITY),
                separations_after_update: first.map(|t| o.trace.separations_after(t)),
                max_force_after_update: first.map(|t| o.trace.peak_force(t, f64::INFINITY)),
                updates: o.trace.updates.len(),
                max_cost_change: o
                    .trace
                    .updates
                    .iter()
                    .filter_map(|u| u.result.as_ref())
                    .map(|r| r.cost_after - r.cost_before)
                    .reduce(f64::max),
                error: None,
            }
        }
        Err(msg) => {
            log::warn!("{} episode {} failed: {msg}", job.method.as_str(), job.index);
            EpisodeSummary {
                method: job.method,
                index: job.index,
                seed,
                success: false,
                completion_time: None,
                max_force: 0.0,
                separations: 0,
                separations_after_update: None,
                max_force_after_update: None,
                updates: 0,
                max_cost_change: None,
                error: Some(msg.clone()),
            }
        }
    };
    if let (Some(dir), Some(stem)) = (trace_dir, &job.trace_stem) {
        let ok = outcome.as_ref().ok();
        if let Some(o) = ok {
            let path = dir.join(format!("{stem}.csv"));
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            o.trace.write_csv(std::io::BufWriter::new(f))?;
        }
        let telemetry = EpisodeTelemetry {
            summary: &summary,
            final_gains: ok.map(|o| &o.final_gains),
            updates: ok.map(|o| o.trace.updates.as_slice()).unwrap_or(&[]),
        };
        write_json(&dir.join(format!("{stem}.json")), &telemetry)?;
    }
    Ok((summary, outcome.ok()))
}

fn run_jobs(cfg: &SuiteConfig, jobs: &[Job], trace_dir: Option<&Path>) -> Result<Vec<(EpisodeSummary, Option<EpisodeOutcome>)>> {
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Collecting an indexed parallel iterator keeps job order.
    jobs.par_iter().map(|job| run_job(cfg, job, trace_dir)).collect()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_stat(s: Option<Stat>) -> (String, String) {
    match s {
        Some(s) => (s.mean.to_string(), s.std.to_string()),
        None => (String::new(), String::new()),
    }
}

fn write_rows_csv(path: &Path, rows: &[ResultRow], w: Option<&[f64]>) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let mut header = vec![
        "method",
        "scenario",
        "successes",
        "total",
        "completion_time_mean",
        "completion_time_std",
        "max_force_mean",
        "max_force_std",
    ];
    if w.is_some() {
        header.insert(0, "w");
    }
    out.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let (tm, ts) = fmt_stat(r.completion_time);
        let (fm, fs) = fmt_stat(r.max_force);
        let mut rec = vec![
            r.method.as_str().to_string(),
            r.scenario.clone(),
            r.successes.to_string(),
            r.total.to_string(),
            tm,
            ts,
            fm,
            fs,
        ];
        if let Some(w) = w {
            rec.insert(0, w[i].to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs every configured method for `cfg.episodes` seeded episodes.
///
/// With `out_dir`, writes `results.json`, `results.csv`, the offline gain
/// file and, if enabled, `traces/<method>_<index>.{csv,json}`.
pub fn run_suite(cfg: &SuiteConfig, out_dir: Option<&Path>) -> Result<SuiteReport> {
    cfg.validate()?;
    let offline = cfg.offline_gains()?;
    let manual = manual_gains(cfg.task)?;
    let real = cfg.real_env();
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for index in 0..cfg.episodes {
            jobs.push(Job {
                method,
                index,
                env: &real,
                gains: if method == Method::ManualTune { &manual } else { &offline.gains },
                adaptation: (method == Method::Proposed).then_some(&cfg.adaptation),
                trace_stem: cfg.traces.then(|| format!("{}_{index:03}", method.as_str())),
            });
        }
    }
    let trace_dir = out_dir.filter(|_| cfg.traces).map(|d| d.join("traces"));
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let episodes: Vec<EpisodeSummary> = run_jobs(cfg, &jobs, trace_dir.as_deref())?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let rows = cfg
        .methods
        .iter()
        .map(|&m| {
            let eps: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.method == m).collect();
            ResultRow::from_episodes(m, &cfg.name, &eps)
        })
        .collect();
    let report = SuiteReport {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.name.clone(),
        task: cfg.task,
        time_basis: TIME_BASIS.into(),
        config_hash: cfg.source_hash.clone(),
        offline_gains: offline.clone(),
        rows,
        episodes,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("results.json"), &report)?;
        write_rows_csv(&dir.join("results.csv"), &report.rows, None)?;
        cfg.gain_file_for(&offline).save(&dir.join("gains.json"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f64,
    pub row: ResultRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub scenario: String,
    pub task: Task,
    pub time_basis: String,
    pub config_hash: String,
    pub offline_gains: OfflineGains,
    pub rows: Vec<SweepRow>,
    /// Episodes in row order.
    pub episodes: Vec<EpisodeSummary>,
}

impl SweepReport {
    pub fn at(&self, w: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.w == w).map(|r| &r.row)
    }
}

/// Runs the proposed method once per weight in `ws`, sharing offline gains
/// and episode seeds.
pub fn weight_sweep(cfg: &SuiteConfig, ws: &[f64], out_dir: Option<&Path>) -> Result<SweepReport> {
    cfg.validate()?;
    if ws.is_empty() {
        return Err(Error::Config("weight list must not be empty".into()));
    }
    if let Some(w) = ws.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Config(format!("weight {w} is outside [0, 1]")));
    }
    let offline = cfg.offline_gains()?;
    let real = cfg.real_env();
    let adaptations: Vec<AdaptationConfig> = ws
        .iter()
        .map(|&w| AdaptationConfig {
            w,
            ..cfg.adaptation.clone()
        })
        .collect();
    let mut jobs = Vec::new();
    for (i, a) in adaptations.iter().enumerate() {
        for index in 0..cfg.episodes {
            jobs.push(Job {
                method: Method::Proposed,
                index,
                env: &real,
                gains: &offline.gains,
                adaptation: Some(a),
                trace_stem: cfg.traces.then(|| format!("w{}_{index:03}", ws[i])),
            });
        }
    }
    let trace_dir = out_dir.filter(|_| cfg.traces).map(|d| d.join("traces"));
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let episodes: Vec<EpisodeSummary> = run_jobs(cfg, &jobs, trace_dir.as_deref())?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let rows: Vec<SweepRow> = ws
        .iter()
        .zip(episodes.chunks(cfg.episodes))
        .map(|(&w, chunk)| SweepRow {
            w,
            row: ResultRow::from_episodes(Method::Proposed, &cfg.name, &chunk.iter().collect::<Vec<_>>()),
        })
        .collect();
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.name.clone(),
        task: cfg.task,
        time_basis: TIME_BASIS.into(),
        config_hash: cfg.source_hash.clone(),
        offline_gains: offline,
        rows,
        episodes,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("sweep.json"), &report)?;
        let plain: Vec<ResultRow> = report.rows.iter().map(|r| r.row.clone()).collect();
        let ws: Vec<f64> = report.rows.iter().map(|r| r.w).collect();
        write_rows_csv(&dir.join("sweep.csv"), &plain, Some(&ws))?;
    }
    Ok(report)
}

/// Stability metrics of adaptation with one force model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceModelRow {
    pub force_source: ForceSource,
    pub successes: usize,
    pub total: usize,
    /// Contact separations after the first update, per episode.
    pub separations_after_update: Vec<usize>,
    pub max_force: Option<Stat>,
    pub max_force_after_update: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceReport {
    pub schema_version: u32,
    pub scenario: String,
    pub task: Task,
    pub rows: Vec<ForceModelRow>,
    /// Linear-fit error on the fixed-gain trace of the first episode, on
    /// its contact axis; absent if that trace has no contact force.
    pub linear_fit: Option<FitGeneralization>,
    pub fit_axis: Option<usize>,
}

/// Compares record-&-replay with linear-fit force prediction inside the
/// optimizer, and measures how a linear fit generalizes to the next window
/// of a fixed-gain trace.
pub fn compare_force_models(cfg: &SuiteConfig, out_dir: Option<&Path>) -> Result<ForceReport> {
    cfg.validate()?;
    let offline = cfg.offline_gains()?;
    let real = cfg.real_env();
    let sources = [ForceSource::RecordReplay, ForceSource::LinearFit];
    let adaptations: Vec<AdaptationConfig> = sources
        .iter()
        .map(|&force_source| AdaptationConfig {
            force_source,
            ..cfg.adaptation.clone()
        })
        .collect();
    let mut jobs = vec![Job {
        method: Method::DirectTransfer,
        index: 0,
        env: &real,
        gains: &offline.gains,
        adaptation: None,
        trace_stem: None,
    }];
    for (a, source) in adaptations.iter().zip(sources) {
        let tag = match source {
            ForceSource::RecordReplay => "record_replay",
            ForceSource::LinearFit => "linear_fit",
        };
        for index in 0..cfg.episodes {
            jobs.push(Job {
                method: Method::Proposed,
                index,
                env: &real,
                gains: &offline.gains,
                adaptation: Some(a),
                trace_stem: cfg.traces.then(|| format!("{tag}_{index:03}")),
            });
        }
    }
    let trace_dir = out_dir.filter(|_| cfg.traces).map(|d| d.join("traces"));
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let mut results = run_jobs(cfg, &jobs, trace_dir.as_deref())?;
    let (_, fixed) = results.remove(0);

    let (linear_fit, fit_axis) = match fixed {
        Some(o) => fixed_trace_fit(&o, cfg.adaptation.period_steps(cfg.dt))?,
        None => (None, None),
    };
    let rows = sources
        .iter()
        .zip(results.chunks(cfg.episodes))
        .map(|(&force_source, chunk)| {
            let eps: Vec<&EpisodeSummary> = chunk.iter().map(|(s, _)| s).collect();
            let ok: Vec<&&EpisodeSummary> = eps.iter().filter(|e| e.error.is_none()).collect();
            ForceModelRow {
                force_source,
                successes: eps.iter().filter(|e| e.success).count(),
                total: eps.len(),
                separations_after_update: eps.iter().map(|e| e.separations_after_update.unwrap_or(0)).collect(),
                max_force: Stat::of(&ok.iter().map(|e| e.max_force).collect::<Vec<_>>()),
                max_force_after_update: Stat::of(&ok.iter().filter_map(|e| e.max_force_after_update).collect::<Vec<_>>()),
            }
        })
        .collect();
    let report = ForceReport {
        schema_version: SCHEMA_VERSION,
        scenario: cfg.name.clone(),
        task: cfg.task,
        rows,
        linear_fit,
        fit_axis,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("forces.json"), &report)?;
    }
    Ok(report)
}

/// Linear-fit generalization on the axis with the largest measured force.
fn fixed_trace_fit(o: &EpisodeOutcome, window_len: usize) -> Result<(Option<FitGeneralization>, Option<usize>)> {
    let rows = &o.trace.rows;
    let axes = o.trace.axes;
    let peak = |a: usize| rows.iter().map(|r| r.measured_force[a].abs()).fold(0.0, f64::max);
    let Some(axis) = (0..axes).max_by(|&a, &b| peak(a).total_cmp(&peak(b))) else {
        return Ok((None, None));
    };
    let forces: Vec<Vec<f64>> = rows.iter().map(|r| r.measured_force.clone()).collect();
    let dt = rows.get(1).map(|r| r.t - rows[0].t).unwrap_or(1.0);
    let states: Vec<(Vec<f64>, Vec<f64>)> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let prev = if k > 0 { &rows[k - 1].compliant } else { &r.compliant };
            let vel = r.compliant.iter().zip(prev).map(|(a, b)| (a - b) / dt).collect();
            (r.compliant.clone(), vel)
        })
        .collect();
    match linear_fit_generalization(&forces, &states, window_len, axis) {
        Ok(g) => Ok((Some(g), Some(axis))),
        Err(Error::Domain(_)) => Ok((None, Some(axis))),
        Err(e) => Err(e),
    }
}

/// Markdown table aggregating the `results.json` files under `dirs`.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "| scenario | method | success | time (s) | max force (N) |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for dir in dirs {
        let path = dir.join("results.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let suite: SuiteReport = serde_json::from_str(&text)?;
        for r in &suite.rows {
            let cell = |s: Option<Stat>| match s {
                Some(s) => format!("{:.2} ± {:.2}", s.mean, s.std),
                None => "N/A".into(),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {}/{} | {} | {} |",
                r.scenario,
                r.method.as_str(),
                r.successes,
                r.total,
                cell(r.completion_time),
                cell(r.max_force)
            );
        }
    }
    let _ = writeln!(out, "\nCompletion times are {TIME_BASIS}, over successful episodes only.");
    Ok(out)
}

/// Writes `report.md` into `out_dir` and returns its text.
pub fn write_report(dirs: &[PathBuf], out_dir: &Path) -> Result<String> {
    let text = report(dirs)?;
    create_dir(out_dir)?;
    let path = out_dir.join("report.md");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(text)
}
