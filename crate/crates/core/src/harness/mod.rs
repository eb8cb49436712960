//! Monte Carlo driver: runs of `n` samples split over shards, batch
//! statistics over runs, convergence studies and output files.
//!
//! Seed derivation: the master key is `StreamKey::root(seed)`, run `r` uses
//! `master.child(r)` and sample `i` of that run is rooted at
//! `run.child(i)`. Sample keys therefore do not depend on the shard layout.
//! Shard `s` of `S` owns the contiguous sample range
//! `[s·n/S, (s+1)·n/S)`; under the resampling schemes it cuts its range into
//! ensembles of `N` consecutive samples, so those estimates do depend on the
//! layout. The layout with `shards = 1` is the canonical one.

pub mod config;
pub mod fd;
pub mod presets;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::check_conditions;
use crate::error::{Error, Result};
use crate::estimator::{evaluate, EstimatorQuery, Scheme, Target};
use crate::generator::{PdeModel, TestProblem};
use crate::resampling::{run_interacting, Selection};
use crate::rng::StreamKey;
use crate::skeleton::{ArrivalDistribution, BranchingLaw};

use config::ModelConfig;

pub use fd::{fd_oracle_1d, FdGrid, FdSolution};
pub use presets::{load_preset, reference_value, PRESET_NAMES};

/// Largest default shard count.
pub const MAX_DEFAULT_SHARDS: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    /// `ψ`, exact or Euler segments.
    A,
    /// `ψ̂`, frozen-coefficient segments.
    B,
    /// Resampled `ψ̂`.
    C,
    /// Resampled `ψ`.
    D,
}

impl SchemeChoice {
    pub fn base(self) -> Scheme {
        match self {
            SchemeChoice::A | SchemeChoice::D => Scheme::A,
            SchemeChoice::B | SchemeChoice::C => Scheme::B,
        }
    }

    pub fn resamples(self) -> bool {
        matches!(self, SchemeChoice::C | SchemeChoice::D)
    }
}

impl fmt::Display for SchemeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeChoice::A => "a",
            SchemeChoice::B => "b",
            SchemeChoice::C => "c",
            SchemeChoice::D => "d",
        })
    }
}

impl FromStr for SchemeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(SchemeChoice::A),
            "b" => Ok(SchemeChoice::B),
            "c" => Ok(SchemeChoice::C),
            "d" => Ok(SchemeChoice::D),
            other => Err(Error::Config(format!("unknown scheme {other:?}; expected a, b, c or d"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Preset(String),
    File(PathBuf),
    Inline(ModelConfig),
}

impl ModelSource {
    pub fn label(&self) -> String {
        match self {
            ModelSource::Preset(name) => name.clone(),
            ModelSource::File(path) => path.display().to_string(),
            ModelSource::Inline(_) => "inline".to_string(),
        }
    }

    pub fn load(&self) -> Result<TestProblem> {
        match self {
            ModelSource::Preset(name) => load_preset(name),
            ModelSource::File(path) => ModelConfig::load(path)?.build(),
            ModelSource::Inline(cfg) => cfg.build(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub kappa: f64,
    pub theta: f64,
    /// Offspring probabilities in the generator's term order; equal when
    /// absent.
    #[serde(default)]
    pub probabilities: Option<Vec<f64>>,
    /// Drift branch probability of the frozen-coefficient schemes; defaults
    /// to `1/(|L|+1)`.
    #[serde(default)]
    pub drift_probability: Option<f64>,
}

impl Default for LawParams {
    fn default() -> Self {
        LawParams { kappa: 0.5, theta: 2.5, probabilities: None, drift_probability: None }
    }
}

impl LawParams {
    pub fn build(&self, model: &PdeModel, scheme: Scheme) -> Result<BranchingLaw> {
        let arrival = ArrivalDistribution::gamma(self.kappa, self.theta)?;
        let indices = model.generator().indices();
        let law = match &self.probabilities {
            Some(p) => BranchingLaw::new(arrival, indices, p.clone())?,
            None => BranchingLaw::uniform(arrival, indices)?,
        };
        match (scheme, self.drift_probability) {
            (Scheme::A, _) => Ok(law),
            (Scheme::B, Some(p)) => law.with_drift_mark(p),
            (Scheme::B, None) => law.with_default_drift_mark(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSource,
    pub scheme: SchemeChoice,
    /// Samples per run (root particles for the resampling schemes).
    pub particles: usize,
    pub runs: usize,
    /// Ensemble size of the resampling schemes.
    #[serde(default)]
    pub ensemble: Option<usize>,
    /// Defaults to `min(available cores, 96)`.
    #[serde(default)]
    pub shards: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub law: LawParams,
    /// Euler sub-step override.
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub selection: Selection,
    /// Estimate `v·Du(t, x)` instead of `u` (schemes a and b).
    #[serde(default)]
    pub gradient: Option<Vec<f64>>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Scheme-a configuration of a named preset with default law.
    pub fn preset(name: &str) -> Result<Self> {
        load_preset(name)?;
        Ok(RunConfig {
            model: ModelSource::Preset(name.to_string()),
            scheme: SchemeChoice::A,
            particles: 10_000,
            runs: 10,
            ensemble: None,
            shards: None,
            seed: 0,
            law: LawParams::default(),
            step: None,
            selection: Selection::Multinomial,
            gradient: None,
            output: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn shard_count(&self) -> usize {
        self.shards.unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(MAX_DEFAULT_SHARDS)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.runs == 0 {
            return Err(Error::Config("need at least one particle and one run".into()));
        }
        if self.shard_count() == 0 {
            return Err(Error::Config("need at least one shard".into()));
        }
        if self.scheme.resamples() {
            match self.ensemble {
                Some(n) if n >= 2 => {}
                _ => return Err(Error::Config("schemes c and d need an ensemble size of at least 2".into())),
            }
            if self.gradient.is_some() {
                return Err(Error::Config("the resampling schemes estimate values only".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub preset: String,
    pub scheme: SchemeChoice,
    pub seed: u64,
    pub n: usize,
    pub runs: usize,
    pub shards: usize,
    pub ensemble: Option<usize>,
    pub estimates: Vec<f64>,
    /// Mean number of simulated particles per sample, per run.
    pub particles: Vec<f64>,
    pub seconds: Vec<f64>,
    pub mean: f64,
    pub std_dev: Option<f64>,
    /// `std_dev/√R`; undefined for a single run.
    pub stderr: Option<f64>,
    pub mean_particles: f64,
    pub wall_seconds: f64,
    /// Closed-form or published value of the model, when known.
    pub reference: Option<f64>,
    pub warnings: Vec<String>,
}

/// Sample mean and standard deviation (`R − 1` normalization).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Everything a run needs, resolved once.
pub struct Prepared {
    pub problem: TestProblem,
    pub query: EstimatorQuery,
    pub label: String,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let problem = config.model.load()?;
    let scheme = config.scheme.base();
    let law = config.law.build(&problem.model, scheme)?;
    let mut query = EstimatorQuery::new(problem.model.clone(), Arc::new(law), 0.0, problem.x0.clone(), scheme)?
        .with_step(config.step);
    if let Some(v) = &config.gradient {
        query = query.with_target(Target::Gradient(v.clone()))?;
    }
    Ok(Prepared { problem, query, label: config.model.label() })
}

fn condition_warnings(query: &EstimatorQuery) -> Vec<String> {
    let mut out = Vec::new();
    if query.scheme != Scheme::A || query.model.volatility().constant().is_none() {
        return out;
    }
    match check_conditions(&query.law, &query.model, 2.0, 200, None) {
        Ok(r) if !r.condition_i.holds && !r.condition_ii.holds => out.push(format!(
            "sufficient integrability conditions not met (terminal term {:.3e}, branching term {:.3e}); \
             the estimator may have infinite variance",
            r.condition_i.terminal_term, r.condition_i.branching_term
        )),
        Ok(_) => {}
        Err(e) => out.push(format!("condition check skipped: {e}")),
    }
    out
}

struct ShardTotals {
    count: usize,
    sum: f64,
    particles: usize,
}

fn run_shard(query: &EstimatorQuery, config: &RunConfig, run_key: StreamKey, lo: usize, hi: usize) -> Result<ShardTotals> {
    let mut totals = ShardTotals { count: hi - lo, sum: 0.0, particles: 0 };
    if config.scheme.resamples() {
        let size = config.ensemble.unwrap_or(2);
        let mut start = lo;
        while start < hi {
            let end = (start + size).min(hi);
            let keys: Vec<StreamKey> = (start..end).map(|i| run_key.child(i as u64)).collect();
            // child 0 of a particle key is never used by its offspring
            let sample = run_interacting(query, &keys, keys[0].child(0), config.selection)?;
            totals.sum += sample.value * (end - start) as f64;
            totals.particles += sample.particles;
            start = end;
        }
    } else {
        for i in lo..hi {
            let key = run_key.child(i as u64);
            let sample = evaluate(query, key)?;
            if !sample.value.is_finite() {
                return Err(Error::NonFiniteSample { value: sample.value, key: key.0 });
            }
            totals.sum += sample.value;
            totals.particles += sample.particles;
        }
    }
    Ok(totals)
}

/// One run: the sample-weighted mean of the shard means, and the mean
/// particle count per sample.
pub fn run_once(query: &EstimatorQuery, config: &RunConfig, run: usize) -> Result<(f64, f64)> {
    let n = config.particles;
    let shards = config.shard_count().min(n);
    let run_key = StreamKey::root(config.seed).child(run as u64);
    let totals: Vec<ShardTotals> = (0..shards)
        .into_par_iter()
        .map(|s| run_shard(query, config, run_key, s * n / shards, (s + 1) * n / shards))
        .collect::<Result<_>>()?;
    let mut estimate = 0.0;
    let mut particles = 0usize;
    for t in &totals {
        if t.count > 0 {
            estimate += (t.sum / t.count as f64) * (t.count as f64 / n as f64);
        }
        particles += t.particles;
    }
    Ok((estimate, particles as f64 / n as f64))
}

pub fn run_estimation(config: &RunConfig) -> Result<EstimateReport> {
    let prepared = prepare(config)?;
    let warnings = condition_warnings(&prepared.query);
    for w in &warnings {
        log::warn!("{w}");
    }
    let started = Instant::now();
    let mut estimates = Vec::with_capacity(config.runs);
    let mut particles = Vec::with_capacity(config.runs);
    let mut seconds = Vec::with_capacity(config.runs);
    for r in 0..config.runs {
        let t0 = Instant::now();
        let (e, p) = run_once(&prepared.query, config, r)?;
        estimates.push(e);
        particles.push(p);
        seconds.push(t0.elapsed().as_secs_f64());
    }
    let (mean, std_dev) = mean_std(&estimates);
    let reference = match &config.gradient {
        None => match &config.model {
            ModelSource::Preset(name) => reference_value(name).or_else(|| prepared.problem.exact_value()),
            _ => prepared.problem.exact_value(),
        },
        Some(v) => prepared.problem.gradient.as_ref().map(|du| {
            let mut out = vec![0.0; v.len()];
            du(0.0, &prepared.problem.x0, &mut out);
            out.iter().zip(v).map(|(a, b)| a * b).sum()
        }),
    };
    let report = EstimateReport {
        preset: prepared.label,
        scheme: config.scheme,
        seed: config.seed,
        n: config.particles,
        runs: config.runs,
        shards: config.shard_count().min(config.particles),
        ensemble: config.ensemble,
        mean_particles: particles.iter().sum::<f64>() / particles.len() as f64,
        estimates,
        particles,
        seconds,
        mean,
        std_dev,
        stderr: std_dev.map(|s| s / (config.runs as f64).sqrt()),
        wall_seconds: started.elapsed().as_secs_f64(),
        reference,
        warnings,
    };
    if let Some(path) = &config.output {
        write_report(&report, path)?;
    }
    Ok(report)
}

/// The persisted summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: Option<f64>,
    pub runs: usize,
    pub n: usize,
    pub scheme: SchemeChoice,
    pub preset: String,
    pub seed: u64,
}

/// Writes the per-run CSV (`run,estimate,particles,seconds`) to `path` and
/// the summary JSON next to it with extension `.json`.
pub fn write_report(report: &EstimateReport, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut csv = String::from("run,estimate,particles,seconds\n");
    for (r, ((e, p), s)) in report.estimates.iter().zip(&report.particles).zip(&report.seconds).enumerate() {
        // `{:?}` prints the shortest string that round-trips
        let _ = writeln!(csv, "{r},{e:?},{p:?},{s:?}");
    }
    std::fs::write(path, csv)?;
    let summary = Summary {
        mean: report.mean,
        stderr: report.stderr,
        runs: report.runs,
        n: report.n,
        scheme: report.scheme,
        preset: report.preset.clone(),
        seed: report.seed,
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// Reads back the per-run estimates of a CSV written by [`write_report`].
pub fn read_estimates(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("run,estimate,particles,seconds") {
        return Err(Error::Config(format!("{} is not a run CSV", path.display())));
    }
    lines
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("malformed row {l:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub n: usize,
    pub runs: usize,
    pub mean: f64,
    pub stderr: Option<f64>,
    /// Standard error of the standard error, from the fourth sample moment.
    pub se_of_se: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of `log SE` against `log n`; needs two rungs.
    pub slope: Option<f64>,
    /// The last rung repeated with twice the runs: SE should stay put while
    /// SE-of-SE shrinks by about `√2`.
    pub sanity: Option<StudyRow>,
}

/// `SE(SE)` for `R` values with the given sample standard deviation.
pub fn stderr_of_stderr(values: &[f64]) -> Option<f64> {
    let r = values.len();
    if r < 4 {
        return None;
    }
    let (mean, std) = mean_std(values);
    let s = std?;
    if s == 0.0 {
        return Some(0.0);
    }
    let rf = r as f64;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / rf;
    let s2 = s * s;
    let var_s2 = ((m4 - s2 * s2 * (rf - 3.0) / (rf - 1.0)) / rf).max(0.0);
    // delta method for s = √s², then divide by √R for the mean
    Some(var_s2.sqrt() / (2.0 * s) / rf.sqrt())
}

fn study_row(config: &RunConfig, n: usize, runs: usize) -> Result<StudyRow> {
    let cfg = RunConfig { particles: n, runs, output: None, ..config.clone() };
    let report = run_estimation(&cfg)?;
    Ok(StudyRow {
        n,
        runs,
        mean: report.mean,
        stderr: report.stderr,
        se_of_se: stderr_of_stderr(&report.estimates),
        seconds: report.wall_seconds,
    })
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs [`run_estimation`] on each rung of an increasing ladder and fits the
/// `log SE` vs `log n` slope. With `sanity`, the last rung is rerun with
/// twice the runs.
pub fn convergence_study(config: &RunConfig, ladder: &[usize], sanity: bool) -> Result<StudyReport> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("the n ladder must be non-empty and strictly increasing".into()));
    }
    let rows = ladder.iter().map(|&n| study_row(config, n, config.runs)).collect::<Result<Vec<_>>>()?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.stderr.filter(|s| *s > 0.0).map(|s| ((r.n as f64).ln(), s.ln())))
        .collect();
    let slope = if rows.len() < 2 { None } else { fit_slope(&points) };
    let sanity = if sanity {
        Some(study_row(config, *ladder.last().unwrap(), 2 * config.runs)?)
    } else {
        None
    };
    let report = StudyReport { rows, slope, sanity };
    if let Some(path) = &config.output {
        write_study(&report, path)?;
    }
    Ok(report)
}

/// CSV with columns `n,runs,mean,stderr,se_of_se,seconds`; the sanity row
/// is tagged in an extra column.
pub fn write_study(report: &StudyReport, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut csv = String::from("n,runs,mean,stderr,se_of_se,seconds,kind\n");
    for (row, kind) in report.rows.iter().map(|r| (r, "rung")).chain(report.sanity.iter().map(|r| (r, "sanity"))) {
        let _ = writeln!(
            csv,
            "{},{},{:?},{},{},{:?},{kind}",
            row.n,
            row.runs,
            row.mean,
            opt(row.stderr),
            opt(row.se_of_se),
            row.seconds
        );
    }
    std::fs::write(path, csv)?;
    Ok(())
}
