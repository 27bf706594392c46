//! Experiment configuration, multi-trial orchestration, trace persistence,
//! summary statistics and rate fitting.
//!
//! An experiment is a pure function of its [`ExperimentSpec`]: trial `k`
//! draws its target and its sample stream from fixed seed-derived streams,
//! and every algorithm in the trial sees the same target and the same
//! sample stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::drivers::{run_algorithm, AlgorithmConfig, AlgorithmKind, EpochMode, RunResult};
use crate::engine::{MetricKind, RunTrace, TracePoint};
use crate::error::{Error, Result};
use crate::geometry::l1_norm;
use crate::oracles::{
    generate_pool, log_sparsity, make_sparse_target, stream_rng, LossKind, ProblemInstance,
    SampleOracle, TargetValues,
};
use crate::schedule::{GradientScale, ProblemConstants};

pub const TRACE_HEADER: [&str; 8] = [
    "trial",
    "algorithm",
    "iteration",
    "epoch",
    "error_l2_sq",
    "error_l1",
    "radius",
    "lambda",
];

pub const SUMMARY_HEADER: [&str; 5] = [
    "algorithm",
    "iteration",
    "mean_error_l2_sq",
    "stderr",
    "slope_trailing_decade",
];

/// Environment variable capping trial parallelism.
pub const WORKERS_ENV: &str = "RADAR_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityRule {
    /// `s = ⌈ln d⌉`.
    Log,
    Explicit(usize),
}

impl SparsityRule {
    pub fn resolve(&self, dim: usize) -> usize {
        match self {
            SparsityRule::Log => log_sparsity(dim),
            SparsityRule::Explicit(s) => *s,
        }
    }
}

impl fmt::Display for SparsityRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityRule::Log => f.write_str("log"),
            SparsityRule::Explicit(s) => write!(f, "{s}"),
        }
    }
}

/// Optional replacements for derived problem constants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstantOverrides {
    pub rsc_gamma: Option<f64>,
    pub rsc_tolerance: Option<f64>,
    pub omega: Option<f64>,
    pub cov_min_eig: Option<f64>,
    /// Setting both switches to radius-free `(G, σ)`.
    pub lipschitz: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub dim: usize,
    pub sparsity: SparsityRule,
    pub loss: LossKind,
    pub covariate_bound: f64,
    pub noise_var: f64,
    /// Magnitude of the nonzero target entries (random signs).
    pub target_magnitude: f64,
    pub algorithms: Vec<AlgorithmKind>,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub trace_stride: Option<u64>,
    pub budget: u64,
    pub epoch_mode: EpochMode,
    pub c1: f64,
    /// Initial radius; `None` uses `‖θ*‖₁` of each trial's target.
    pub r1: Option<f64>,
    pub sgd_gamma: Option<f64>,
    pub overrun_factor: u64,
    /// Finite-pool size; 0 draws a fresh sample per query.
    pub pool_size: usize,
    pub overrides: ConstantOverrides,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            dim: 1000,
            sparsity: SparsityRule::Log,
            loss: LossKind::LeastSquares,
            covariate_bound: 1.0,
            noise_var: 0.5,
            target_magnitude: 1.0,
            algorithms: AlgorithmKind::ALL.to_vec(),
            trials: 5,
            seed: 0,
            out_dir: PathBuf::from("out"),
            trace_stride: None,
            budget: 20_000,
            epoch_mode: EpochMode::OracleHalving,
            c1: 1e4,
            r1: None,
            sgd_gamma: None,
            overrun_factor: 4,
            pool_size: 0,
            overrides: ConstantOverrides::default(),
        }
    }
}

fn parse_field<T: FromStr>(key: &str, value: &str, errors: &mut Vec<String>) -> Option<T> {
    match value.parse::<T>() {
        Ok(v) => Some(v),
        Err(_) => {
            errors.push(format!("{key}: cannot parse `{value}`"));
            None
        }
    }
}

impl ExperimentSpec {
    /// Parses a flat `key = value` file on top of the defaults. Blank lines
    /// and `#` comments are ignored; every bad line is reported at once.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => spec.set(k.trim(), v.trim(), &mut errors),
                None => errors.push(format!(
                    "line {}: expected key = value, got `{line}`",
                    n + 1
                )),
            }
        }
        if errors.is_empty() {
            spec.validate()?;
            Ok(spec)
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }

    /// Applies one `key = value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let mut errors = Vec::new();
        self.set(key, value, &mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    fn set(&mut self, key: &str, value: &str, errors: &mut Vec<String>) {
        let e = errors;
        match key {
            "dim" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.dim = v;
                }
            }
            "sparsity" => {
                if value == "log" {
                    self.sparsity = SparsityRule::Log;
                } else if let Some(v) = parse_field(key, value, e) {
                    self.sparsity = SparsityRule::Explicit(v);
                }
            }
            "loss" => match value.parse() {
                Ok(v) => self.loss = v,
                Err(_) => e.push(format!("loss: unknown loss `{value}`")),
            },
            "covariate_bound" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.covariate_bound = v;
                }
            }
            "noise_var" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.noise_var = v;
                }
            }
            "target_magnitude" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.target_magnitude = v;
                }
            }
            "algorithms" | "algo" => match parse_algorithms(value) {
                Ok(v) => self.algorithms = v,
                Err(err) => e.push(format!("algorithms: {err}")),
            },
            "trials" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.trials = v;
                }
            }
            "seed" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.seed = v;
                }
            }
            "out" | "out_dir" => self.out_dir = PathBuf::from(value),
            "trace_stride" => {
                if value == "auto" {
                    self.trace_stride = None;
                } else if let Some(v) = parse_field(key, value, e) {
                    self.trace_stride = Some(v);
                }
            }
            "budget" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.budget = v;
                }
            }
            "epoch_mode" => match value.parse() {
                Ok(v) => self.epoch_mode = v,
                Err(_) => e.push(format!("epoch_mode: unknown mode `{value}`")),
            },
            "c1" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.c1 = v;
                }
            }
            "r1" => {
                if value == "auto" {
                    self.r1 = None;
                } else if let Some(v) = parse_field(key, value, e) {
                    self.r1 = Some(v);
                }
            }
            "sgd_gamma" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.sgd_gamma = Some(v);
                }
            }
            "overrun_factor" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.overrun_factor = v;
                }
            }
            "pool_size" => {
                if let Some(v) = parse_field(key, value, e) {
                    self.pool_size = v;
                }
            }
            "rsc_gamma" => self.overrides.rsc_gamma = parse_field(key, value, e),
            "rsc_tolerance" => self.overrides.rsc_tolerance = parse_field(key, value, e),
            "omega" => self.overrides.omega = parse_field(key, value, e),
            "cov_min_eig" => self.overrides.cov_min_eig = parse_field(key, value, e),
            "lipschitz" => self.overrides.lipschitz = parse_field(key, value, e),
            "sigma" => self.overrides.sigma = parse_field(key, value, e),
            other => e.push(format!("unknown key `{other}`")),
        }
    }

    /// Checks every field and lists all offending ones.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.dim < 3 {
            bad.push(format!("dim must be at least 3, got {}", self.dim));
        }
        let s = self.sparsity.resolve(self.dim.max(1));
        if s == 0 || s > self.dim {
            bad.push(format!("sparsity {s} must lie in 1..={}", self.dim));
        }
        if !(self.covariate_bound > 0.0 && self.covariate_bound.is_finite()) {
            bad.push(format!(
                "covariate_bound must be positive, got {}",
                self.covariate_bound
            ));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            bad.push(format!(
                "noise_var must be nonnegative, got {}",
                self.noise_var
            ));
        }
        if !(self.target_magnitude > 0.0 && self.target_magnitude.is_finite()) {
            bad.push(format!(
                "target_magnitude must be positive, got {}",
                self.target_magnitude
            ));
        }
        if self.algorithms.is_empty() {
            bad.push("algorithms must name at least one algorithm".into());
        }
        if self.trials == 0 {
            bad.push("trials must be at least 1".into());
        }
        if self.budget == 0 {
            bad.push("budget must be at least 1".into());
        }
        if self.trace_stride == Some(0) {
            bad.push("trace_stride must be at least 1".into());
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            bad.push(format!("c1 must be positive, got {}", self.c1));
        }
        if let Some(r) = self.r1 {
            if !(r > 0.0 && r.is_finite()) {
                bad.push(format!("r1 must be positive, got {r}"));
            }
        }
        if let Some(g) = self.sgd_gamma {
            if !(g > 0.0 && g.is_finite()) {
                bad.push(format!("sgd_gamma must be positive, got {g}"));
            }
        }
        if self.overrun_factor == 0 {
            bad.push("overrun_factor must be at least 1".into());
        }
        let o = &self.overrides;
        for (name, v) in [
            ("rsc_gamma", o.rsc_gamma),
            ("rsc_tolerance", o.rsc_tolerance),
            ("omega", o.omega),
            ("cov_min_eig", o.cov_min_eig),
            ("lipschitz", o.lipschitz),
            ("sigma", o.sigma),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    bad.push(format!("{name} must be nonnegative, got {v}"));
                }
            }
        }
        if o.lipschitz.is_some() != o.sigma.is_some() {
            bad.push("lipschitz and sigma must be set together".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn sparsity_value(&self) -> usize {
        self.sparsity.resolve(self.dim)
    }

    /// Constants for a trial whose target has ℓ1 norm `r1`.
    pub fn constants(&self, r1: f64) -> ProblemConstants {
        let s = self.sparsity_value();
        let mut c = match self.loss {
            LossKind::LeastSquares => {
                ProblemConstants::least_squares(self.dim, s, self.covariate_bound, self.noise_var)
            }
            LossKind::Logistic => {
                ProblemConstants::logistic(self.dim, s, self.covariate_bound, r1, self.noise_var)
            }
        };
        let o = &self.overrides;
        if let Some(v) = o.cov_min_eig {
            c.cov_min_eig = v;
        }
        if let Some(v) = o.rsc_gamma {
            c.rsc_gamma = v;
        }
        if let Some(v) = o.rsc_tolerance {
            c.rsc_tolerance = v;
        }
        if let Some(v) = o.omega {
            c.omega = v;
        }
        if let (Some(g), Some(sigma)) = (o.lipschitz, o.sigma) {
            c.scale = GradientScale::Fixed {
                lipschitz: g,
                sigma,
            };
        }
        c
    }

    /// Seed stream of the target for trial `trial`.
    fn target_stream(trial: usize) -> u64 {
        3 * trial as u64
    }

    fn sample_stream(trial: usize) -> u64 {
        3 * trial as u64 + 1
    }

    fn pool_stream(trial: usize) -> u64 {
        3 * trial as u64 + 2
    }

    /// The trial's problem instance and initial radius.
    pub fn trial_instance(&self, trial: usize) -> Result<(ProblemInstance, f64)> {
        let s = self.sparsity_value();
        let values = TargetValues::RandomSigns {
            magnitude: self.target_magnitude,
        };
        let mut rng = stream_rng(self.seed, Self::target_stream(trial));
        let star = make_sparse_target(self.dim, s, values, &mut rng)?;
        let r1 = self.r1.unwrap_or_else(|| l1_norm(&star));
        let inst = ProblemInstance::new(star, self.covariate_bound, self.noise_var, self.loss)?;
        Ok((inst, r1))
    }

    /// A fresh oracle for `trial`; identical for every algorithm.
    pub fn trial_oracle(&self, trial: usize) -> Result<(SampleOracle, f64)> {
        let (inst, r1) = self.trial_instance(trial)?;
        let rng = stream_rng(self.seed, Self::sample_stream(trial));
        let oracle = if self.pool_size > 0 {
            let mut pool_rng = stream_rng(self.seed, Self::pool_stream(trial));
            let pool = generate_pool(&inst, self.pool_size, &mut pool_rng);
            SampleOracle::finite_pool(inst, pool, rng)?
        } else {
            SampleOracle::fresh(inst, rng)
        };
        Ok((oracle, r1))
    }

    pub fn algorithm_config(&self, kind: AlgorithmKind, r1: f64) -> AlgorithmConfig {
        let mut cfg = AlgorithmConfig::new(kind, self.constants(r1), r1, self.budget);
        cfg.epoch_mode = self.epoch_mode;
        cfg.c1 = self.c1;
        cfg.seed = self.seed;
        cfg.trials = self.trials;
        cfg.trace_stride = self.trace_stride;
        cfg.sgd_gamma = self.sgd_gamma;
        cfg.overrun_factor = self.overrun_factor;
        cfg
    }

    /// Runs one algorithm on one trial.
    pub fn run_one(&self, kind: AlgorithmKind, trial: usize) -> Result<RunResult> {
        let (mut oracle, r1) = self.trial_oracle(trial)?;
        let cfg = self.algorithm_config(kind, r1);
        run_algorithm(&mut oracle, &cfg)
    }
}

/// Comma-separated algorithm names, or `all`.
pub fn parse_algorithms(list: &str) -> Result<Vec<AlgorithmKind>> {
    if list.trim() == "all" {
        return Ok(AlgorithmKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k: AlgorithmKind = name.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    Ok(out)
}

/// One trace CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub trial: usize,
    pub algorithm: String,
    pub point: TracePoint,
}

/// A trace tagged with its run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedTrace {
    pub trial: usize,
    pub algorithm: String,
    pub trace: RunTrace,
}

pub fn write_trace_csv<W: std::io::Write>(
    w: W,
    trial: usize,
    algorithm: &str,
    trace: &RunTrace,
) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for p in &trace.points {
        out.write_record([
            trial.to_string(),
            algorithm.to_string(),
            p.iteration.to_string(),
            p.epoch.to_string(),
            p.error_l2_sq.to_string(),
            p.error_l1.to_string(),
            p.radius.to_string(),
            p.lambda.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_trace_csv(path: &Path, trial: usize, algorithm: &str, trace: &RunTrace) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(std::io::BufWriter::new(file), trial, algorithm, trace)
}

pub const EPOCH_HEADER: [&str; 7] = [
    "epoch_index",
    "radius_sq",
    "lambda",
    "alpha",
    "iterations",
    "max_feasibility",
    "termination",
];

/// Per-epoch log: parameters, iterations run, worst feasibility ratio and
/// how the epoch ended.
pub fn write_epoch_csv<W: std::io::Write>(w: W, trace: &RunTrace) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(EPOCH_HEADER)?;
    for e in &trace.epochs {
        out.write_record([
            e.index.to_string(),
            e.radius_sq.to_string(),
            e.lambda.to_string(),
            e.alpha.to_string(),
            e.iterations.to_string(),
            e.max_feasibility.to_string(),
            e.termination.as_str().to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace_csv<R: std::io::Read>(r: R) -> Result<Vec<TraceRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(r);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::Parse(format!(
            "trace header must be `{}`",
            TRACE_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| Error::Parse(format!("trace row {}: bad {what}", n + 1));
        let num = |i: usize, what: &str| field(i).parse::<f64>().map_err(|_| bad(what));
        rows.push(TraceRow {
            trial: field(0).parse().map_err(|_| bad("trial"))?,
            algorithm: field(1).to_string(),
            point: TracePoint {
                iteration: field(2).parse().map_err(|_| bad("iteration"))?,
                epoch: field(3).parse().map_err(|_| bad("epoch"))?,
                error_l2_sq: num(4, "error_l2_sq")?,
                error_l1: num(5, "error_l1")?,
                radius: num(6, "radius")?,
                lambda: num(7, "lambda")?,
            },
        });
    }
    Ok(rows)
}

pub fn load_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace_csv(std::io::BufReader::new(file))
}

/// Most common gap between consecutive iterations; the stride of a trace
/// whose grid also carries epoch-boundary points.
pub fn infer_stride(points: &[TracePoint]) -> u64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for w in points.windows(2) {
        *counts.entry(w[1].iteration - w[0].iteration).or_default() += 1;
    }
    if let Some(first) = points.first() {
        *counts.entry(first.iteration).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(gap, _)| gap.max(1))
        .unwrap_or(1)
}

/// Groups trace rows into runs, inferring each run's stride.
pub fn group_rows(rows: Vec<TraceRow>) -> Vec<TaggedTrace> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    let mut runs: BTreeMap<(String, usize), Vec<TracePoint>> = BTreeMap::new();
    for row in rows {
        let key = (row.algorithm, row.trial);
        if !runs.contains_key(&key) {
            keys.push(key.clone());
        }
        runs.entry(key).or_default().push(row.point);
    }
    keys.into_iter()
        .map(|key| {
            let mut points = runs.remove(&key).unwrap_or_default();
            points.sort_by_key(|p| p.iteration);
            let stride = infer_stride(&points);
            TaggedTrace {
                trial: key.1,
                algorithm: key.0,
                trace: RunTrace {
                    stride,
                    metric: MetricKind::ParameterError,
                    points,
                    epochs: Vec::new(),
                },
            }
        })
        .collect()
}

/// OLS slope of `ln(error)` on `ln(iteration)` over the trailing decade
/// `[t_max/10, t_max]`.
pub fn fit_rate(points: &[(u64, f64)]) -> Result<f64> {
    let t_max = points
        .iter()
        .map(|p| p.0)
        .max()
        .ok_or_else(|| Error::NotEnoughData("no points".into()))?;
    let lo = t_max as f64 / 10.0;
    let t_min = points.iter().map(|p| p.0).min().unwrap_or(t_max);
    if t_min == 0 || t_min as f64 > lo {
        return Err(Error::NotEnoughData(format!(
            "iterations {t_min}..{t_max} span less than one decade"
        )));
    }
    let window: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.0 as f64 >= lo)
        .map(|p| (p.0 as f64, p.1))
        .collect();
    if window.len() < 3 {
        return Err(Error::NotEnoughData(format!(
            "{} points in the trailing decade, need 3",
            window.len()
        )));
    }
    if let Some(bad) = window.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
        return Err(Error::NotEnoughData(format!(
            "error {} at iteration {} is not positive",
            bad.1, bad.0
        )));
    }
    let n = window.len() as f64;
    let xs: Vec<f64> = window.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = window.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::NotEnoughData("all iterations are equal".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub iteration: u64,
    pub mean_error_l2_sq: f64,
    pub stderr: f64,
    /// Trailing-decade slope ending here; `None` before a decade exists.
    pub slope_trailing_decade: Option<f64>,
}

/// Per algorithm and grid point: mean and standard error across trials,
/// plus the trailing-decade slope of the mean curve.
///
/// The grid of an algorithm is its stride multiples plus the final
/// iteration; every trace of that algorithm must share stride, final
/// iteration and all grid points.
pub fn summarize(traces: &[TaggedTrace]) -> Result<Vec<SummaryRow>> {
    let mut by_algo: BTreeMap<&str, Vec<&TaggedTrace>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for t in traces {
        if !by_algo.contains_key(t.algorithm.as_str()) {
            order.push(&t.algorithm);
        }
        by_algo.entry(&t.algorithm).or_default().push(t);
    }
    let mut rows = Vec::new();
    for algo in order {
        let runs = &by_algo[algo];
        let first = &runs[0].trace;
        let last_iter = first
            .last()
            .ok_or_else(|| Error::Alignment(format!("{algo}: empty trace")))?
            .iteration;
        let stride = first.stride;
        let grid: Vec<u64> = first
            .points
            .iter()
            .map(|p| p.iteration)
            .filter(|&it| it % stride == 0 || it == last_iter)
            .collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(runs.len()); grid.len()];
        for run in runs {
            let tr = &run.trace;
            if tr.stride != stride || tr.last().map(|p| p.iteration) != Some(last_iter) {
                return Err(Error::Alignment(format!(
                    "{algo}: trial {} has stride {} ending at {:?}, trial {} has stride {stride} ending at {last_iter}",
                    run.trial,
                    tr.stride,
                    tr.last().map(|p| p.iteration),
                    runs[0].trial
                )));
            }
            let values: BTreeMap<u64, f64> = tr
                .points
                .iter()
                .map(|p| (p.iteration, p.error_l2_sq))
                .collect();
            let own: BTreeSet<u64> = tr
                .points
                .iter()
                .map(|p| p.iteration)
                .filter(|&it| it % stride == 0 || it == last_iter)
                .collect();
            if own.len() != grid.len() {
                return Err(Error::Alignment(format!(
                    "{algo}: trial {} has {} grid points, expected {}",
                    run.trial,
                    own.len(),
                    grid.len()
                )));
            }
            for (k, it) in grid.iter().enumerate() {
                match values.get(it) {
                    Some(v) => columns[k].push(*v),
                    None => {
                        return Err(Error::Alignment(format!(
                            "{algo}: trial {} lacks iteration {it}",
                            run.trial
                        )))
                    }
                }
            }
        }
        let means: Vec<f64> = columns
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for (k, (&it, col)) in grid.iter().zip(&columns).enumerate() {
            let n = col.len() as f64;
            let stderr = if col.len() < 2 {
                0.0
            } else {
                let var = col
                    .iter()
                    .map(|v| (v - means[k]) * (v - means[k]))
                    .sum::<f64>()
                    / (n - 1.0);
                (var / n).sqrt()
            };
            let window: Vec<(u64, f64)> = grid[..=k]
                .iter()
                .copied()
                .zip(means[..=k].iter().copied())
                .collect();
            rows.push(SummaryRow {
                algorithm: algo.to_string(),
                iteration: it,
                mean_error_l2_sq: means[k],
                stderr,
                slope_trailing_decade: fit_rate(&window).ok(),
            });
        }
    }
    Ok(rows)
}

pub fn write_summary_csv<W: std::io::Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for r in rows {
        out.write_record([
            r.algorithm.clone(),
            r.iteration.to_string(),
            r.mean_error_l2_sq.to_string(),
            r.stderr.to_string(),
            r.slope_trailing_decade
                .map(|s| s.to_string())
                .unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Final mean error and trailing-decade slope per algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub algorithm: String,
    pub final_iteration: u64,
    pub final_mean_error: f64,
    pub slope: Option<f64>,
}

pub fn rate_report(rows: &[SummaryRow]) -> Vec<RateReport> {
    let mut out: Vec<RateReport> = Vec::new();
    for r in rows {
        let entry = RateReport {
            algorithm: r.algorithm.clone(),
            final_iteration: r.iteration,
            final_mean_error: r.mean_error_l2_sq,
            slope: r.slope_trailing_decade,
        };
        match out.iter_mut().find(|e| e.algorithm == r.algorithm) {
            Some(e) if r.iteration >= e.final_iteration => *e = entry,
            Some(_) => {}
            None => out.push(entry),
        }
    }
    out
}

pub fn write_rates_csv<W: std::io::Write>(w: W, report: &[RateReport]) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record([
        "algorithm",
        "final_iteration",
        "final_mean_error_l2_sq",
        "slope_trailing_decade",
    ])?;
    for r in report {
        out.write_record([
            r.algorithm.clone(),
            r.final_iteration.to_string(),
            r.final_mean_error.to_string(),
            r.slope.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes `summary.csv` and `rates.csv` into `dir`.
pub fn save_summary_and_rates(
    dir: &Path,
    summary: &[SummaryRow],
    rates: &[RateReport],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("summary.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_summary_csv(std::io::BufWriter::new(file), summary)?;
    let path = dir.join("rates.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_rates_csv(std::io::BufWriter::new(file), rates)
}

/// Worker count from [`WORKERS_ENV`], defaulting to available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Validation(vec![format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            )])),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub traces: Vec<TaggedTrace>,
    pub summary: Vec<SummaryRow>,
    pub rates: Vec<RateReport>,
    pub trace_files: Vec<PathBuf>,
}

/// File name of the per-run trace.
pub fn trace_file_name(kind: AlgorithmKind, trial: usize) -> String {
    format!("trace_{kind}_trial{trial}.csv")
}

/// Runs every (algorithm, trial) pair, writes per-run traces and epoch
/// plans, the merged `traces.csv`, `summary.csv` and `rates.csv`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    run_experiment_with_workers(spec, worker_count()?)
}

pub fn run_experiment_with_workers(
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<ExperimentOutput> {
    spec.validate()?;
    let out = &spec.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;

    let jobs: Vec<(AlgorithmKind, usize)> = spec
        .algorithms
        .iter()
        .flat_map(|&k| (0..spec.trials).map(move |t| (k, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(TaggedTrace, PathBuf)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(kind, trial)| {
                let res = spec.run_one(kind, trial)?;
                let path = runs_dir.join(trace_file_name(kind, trial));
                save_trace_csv(&path, trial, kind.as_str(), &res.trace)?;
                let plan_path = runs_dir.join(format!("plan_{kind}_trial{trial}.csv"));
                res.plan_used.save_csv(&plan_path)?;
                let epoch_path = runs_dir.join(format!("epochs_{kind}_trial{trial}.csv"));
                let file = fs::File::create(&epoch_path).map_err(|e| Error::io(&epoch_path, e))?;
                write_epoch_csv(std::io::BufWriter::new(file), &res.trace)?;
                Ok((
                    TaggedTrace {
                        trial,
                        algorithm: kind.to_string(),
                        trace: res.trace,
                    },
                    path,
                ))
            })
            .collect()
    });
    let mut traces = Vec::with_capacity(results.len());
    let mut trace_files = Vec::with_capacity(results.len());
    for r in results {
        let (t, p) = r?;
        traces.push(t);
        trace_files.push(p);
    }

    let merged = out.join("traces.csv");
    let file = fs::File::create(&merged).map_err(|e| Error::io(&merged, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(std::io::BufWriter::new(file));
    w.write_record(TRACE_HEADER)?;
    for path in &trace_files {
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            w.write_record(&rec?)?;
        }
    }
    w.flush().map_err(|e| Error::io(&merged, e))?;

    let summary = summarize(&traces)?;
    let rates = rate_report(&summary);
    save_summary_and_rates(out, &summary, &rates)?;

    Ok(ExperimentOutput {
        traces,
        summary,
        rates,
        trace_files,
    })
}
