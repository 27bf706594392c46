//! The acceptance suite: eight pass/fail criteria with pinned tolerances,
//! shared by the `acceptance` test target and the `selftest` command.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::drivers::{AlgorithmKind, EpochMode};
use crate::engine::RunTrace;
use crate::error::{Error, Result};
use crate::geometry::{dual_averaging_step, LpGeometry};
use crate::harness::{
    run_experiment_with_workers, worker_count, ExperimentOutput, ExperimentSpec, SummaryRow,
};
use crate::oracles::{
    make_sparse_target, stream_rng, GradientOracle, LossKind, ProblemInstance, SampleOracle,
    TargetValues,
};
use crate::reference::{prox_objective, prox_step_projected_gradient, random_prox_instance};
use crate::schedule::{
    approx_error, epoch_lambda, epoch_length, kappa_t, logistic_constants, ls_constants, omega_i,
    GradientScale, ProblemConstants,
};

pub const PROX_INSTANCES: usize = 100;
pub const PROX_DIMS: [usize; 3] = [3, 10, 50];
pub const PROX_SOLVER_TOL: f64 = 1e-10;
pub const PROX_SOLVER_MAX_ITER: usize = 20_000;
pub const PROX_LINF_TOL: f64 = 1e-6;
pub const PROX_OBJECTIVE_TOL: f64 = 1e-8;

pub const FEASIBILITY_SLACK: f64 = 1e-9;

pub const RADAR_SLOPE: (f64, f64) = (-1.4, -0.6);
pub const RDA_SLOPE: (f64, f64) = (-0.8, -0.2);
pub const SLOPE_GAP: f64 = 0.25;

pub const ORDERING_FACTOR: f64 = 2.0;
pub const CONST_FINAL_FACTOR: f64 = 10.0;

pub const UNBIASED_QUERIES: usize = 100_000;
pub const UNBIASED_DIM: usize = 10;
pub const UNBIASED_SE: f64 = 3.0;

pub const SCHEDULE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: u8, name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        CriterionResult {
            id,
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn errored(id: u8, name: &'static str, err: &Error) -> Self {
        Self::new(id, name, false, format!("error: {err}"))
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}. {}: {}", self.id, self.name, self.detail)
    }
}

/// The desk-scale least-squares experiment behind criteria 2 to 5.
pub fn desk_spec(out_dir: PathBuf) -> ExperimentSpec {
    ExperimentSpec {
        dim: 1000,
        loss: LossKind::LeastSquares,
        covariate_bound: 1.0,
        noise_var: 0.5,
        trials: 5,
        budget: 20_000,
        epoch_mode: EpochMode::OracleHalving,
        seed: 2024,
        out_dir,
        ..ExperimentSpec::default()
    }
}

/// Closed-form prox step against the numerical minimizer.
pub fn prox_equivalence(instances: usize) -> CriterionResult {
    const NAME: &str = "prox-kernel oracle equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_linf = 0.0_f64;
    let mut worst_obj = 0.0_f64;
    let mut unconverged = 0usize;
    for d in PROX_DIMS {
        let geom = match LpGeometry::new(d) {
            Ok(g) => g,
            Err(e) => return CriterionResult::errored(1, NAME, &e),
        };
        for _ in 0..instances {
            let inst = random_prox_instance(&mut rng, d);
            let closed =
                match dual_averaging_step(&inst.mu, &inst.center, inst.radius, inst.eta, &geom) {
                    Ok(t) => t,
                    Err(e) => return CriterionResult::errored(1, NAME, &e),
                };
            let num =
                prox_step_projected_gradient(&inst, &geom, PROX_SOLVER_TOL, PROX_SOLVER_MAX_ITER);
            if !num.converged {
                unconverged += 1;
            }
            let linf = closed
                .iter()
                .zip(&num.theta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let obj = (prox_objective(&inst, &geom, &closed) - num.objective).abs();
            worst_linf = worst_linf.max(linf);
            worst_obj = worst_obj.max(obj);
        }
    }
    let passed = unconverged == 0 && worst_linf < PROX_LINF_TOL && worst_obj < PROX_OBJECTIVE_TOL;
    CriterionResult::new(
        1,
        NAME,
        passed,
        format!(
            "{} instances, max l_inf gap {worst_linf:.3e} (< {PROX_LINF_TOL:e}), max objective gap {worst_obj:.3e} (< {PROX_OBJECTIVE_TOL:e}), {unconverged} unconverged",
            instances * PROX_DIMS.len()
        ),
    )
}

fn check_radar_trace(trace: &RunTrace, worst: &mut f64, chain_breaks: &mut usize) {
    for e in &trace.epochs {
        *worst = worst.max(e.max_feasibility);
    }
    for w in trace.epochs.windows(2) {
        if w[1].radius_sq != w[0].radius_sq / 2.0 {
            *chain_breaks += 1;
        }
    }
}

/// Every RADAR iterate stays in its epoch's ball and radii halve exactly,
/// over the oracle-halving runs of the desk experiment and one run on the
/// theoretical schedule.
pub fn feasibility(desk: &ExperimentSpec, output: &ExperimentOutput) -> CriterionResult {
    const NAME: &str = "feasibility invariant";
    let mut worst = 0.0_f64;
    let mut breaks = 0usize;
    let mut epochs = 0usize;
    let mut runs = 0usize;
    for t in output
        .traces
        .iter()
        .filter(|t| t.algorithm == AlgorithmKind::Radar.as_str())
    {
        check_radar_trace(&t.trace, &mut worst, &mut breaks);
        epochs += t.trace.epochs.len();
        runs += 1;
    }
    let theoretical = ExperimentSpec {
        epoch_mode: EpochMode::Theoretical,
        ..desk.clone()
    };
    match theoretical.run_one(AlgorithmKind::Radar, 0) {
        Ok(res) => {
            check_radar_trace(&res.trace, &mut worst, &mut breaks);
            epochs += res.trace.epochs.len();
            runs += 1;
        }
        Err(e) => return CriterionResult::errored(2, NAME, &e),
    }
    let passed = runs > 1 && worst <= 1.0 + FEASIBILITY_SLACK && breaks == 0;
    CriterionResult::new(
        2,
        NAME,
        passed,
        format!(
            "{runs} runs, {epochs} epochs, max ||theta - c||_p / R = {worst:.12} (<= 1 + {FEASIBILITY_SLACK:e}), {breaks} radius-chain breaks"
        ),
    )
}

fn final_row(rows: &[SummaryRow], algo: AlgorithmKind) -> Option<&SummaryRow> {
    rows.iter()
        .filter(|r| r.algorithm == algo.as_str())
        .max_by_key(|r| r.iteration)
}

/// Last grid row at or before `iteration`.
fn row_at(rows: &[SummaryRow], algo: AlgorithmKind, iteration: u64) -> Option<&SummaryRow> {
    rows.iter()
        .filter(|r| r.algorithm == algo.as_str() && r.iteration <= iteration)
        .max_by_key(|r| r.iteration)
}

fn missing(id: u8, name: &'static str, what: &str) -> CriterionResult {
    CriterionResult::new(id, name, false, format!("missing summary data for {what}"))
}

pub fn rate_check(output: &ExperimentOutput) -> CriterionResult {
    const NAME: &str = "rate check";
    let slope = |k| final_row(&output.summary, k).and_then(|r| r.slope_trailing_decade);
    let (Some(radar), Some(rda)) = (slope(AlgorithmKind::Radar), slope(AlgorithmKind::Rda)) else {
        return missing(3, NAME, "radar/rda slopes");
    };
    let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    let passed =
        in_range(radar, RADAR_SLOPE) && in_range(rda, RDA_SLOPE) && radar <= rda - SLOPE_GAP;
    CriterionResult::new(
        3,
        NAME,
        passed,
        format!(
            "radar slope {radar:.3} in [{}, {}], rda slope {rda:.3} in [{}, {}], gap {:.3} (>= {SLOPE_GAP})",
            RADAR_SLOPE.0,
            RADAR_SLOPE.1,
            RDA_SLOPE.0,
            RDA_SLOPE.1,
            rda - radar
        ),
    )
}

pub fn ordering_against_rda_sgd(output: &ExperimentOutput) -> CriterionResult {
    const NAME: &str = "final-error ordering against rda and sgd";
    let fin = |k| final_row(&output.summary, k).map(|r| r.mean_error_l2_sq);
    let (Some(radar), Some(rda), Some(sgd)) = (
        fin(AlgorithmKind::Radar),
        fin(AlgorithmKind::Rda),
        fin(AlgorithmKind::Sgd),
    ) else {
        return missing(4, NAME, "radar/rda/sgd");
    };
    let passed = ORDERING_FACTOR * radar <= rda && ORDERING_FACTOR * radar <= sgd;
    CriterionResult::new(
        4,
        NAME,
        passed,
        format!(
            "final mean error radar {radar:.4e}, rda {rda:.4e} ({:.2}x), sgd {sgd:.4e} ({:.2}x), need >= {ORDERING_FACTOR}x",
            rda / radar,
            sgd / radar
        ),
    )
}

pub fn ordering_against_eda_const(output: &ExperimentOutput, budget: u64) -> CriterionResult {
    const NAME: &str = "final-error ordering against eda and radar-const";
    let fin = |k| final_row(&output.summary, k).map(|r| r.mean_error_l2_sq);
    let early = |k| row_at(&output.summary, k, budget / 10).map(|r| r.mean_error_l2_sq);
    let (Some(radar), Some(eda), Some(cst), Some(radar_early), Some(cst_early)) = (
        fin(AlgorithmKind::Radar),
        fin(AlgorithmKind::Eda),
        fin(AlgorithmKind::RadarConst),
        early(AlgorithmKind::Radar),
        early(AlgorithmKind::RadarConst),
    ) else {
        return missing(5, NAME, "radar/eda/radar_const");
    };
    let passed = radar <= eda && cst_early > radar_early && cst <= CONST_FINAL_FACTOR * radar;
    CriterionResult::new(
        5,
        NAME,
        passed,
        format!(
            "final radar {radar:.4e} <= eda {eda:.4e}; at T/10 radar_const {cst_early:.4e} > radar {radar_early:.4e}; final radar_const {cst:.4e} = {:.2}x radar (<= {CONST_FINAL_FACTOR}x)",
            cst / radar
        ),
    )
}

/// Mean of many least-squares gradients against `(1/3)(θ − θ*)`.
pub fn oracle_unbiasedness(queries: usize) -> CriterionResult {
    const NAME: &str = "oracle unbiasedness";
    let run = || -> Result<(usize, f64)> {
        let mut rng = stream_rng(99, 0);
        let star = make_sparse_target(
            UNBIASED_DIM,
            3,
            TargetValues::RandomSigns { magnitude: 1.0 },
            &mut rng,
        )?;
        let inst = ProblemInstance::new(star.clone(), 1.0, 0.5, LossKind::LeastSquares)?;
        let mut oracle = SampleOracle::fresh(inst, stream_rng(99, 1));
        let theta: Vec<f64> = (0..UNBIASED_DIM)
            .map(|j| 0.3 * (j as f64 - 4.5) / 4.5)
            .collect();
        let mut sum = [0.0; UNBIASED_DIM];
        let mut sum_sq = [0.0; UNBIASED_DIM];
        let mut g = vec![0.0; UNBIASED_DIM];
        for _ in 0..queries {
            oracle.query_into(&theta, &mut g)?;
            for j in 0..UNBIASED_DIM {
                sum[j] += g[j];
                sum_sq[j] += g[j] * g[j];
            }
        }
        let n = queries as f64;
        let mut outside = 0;
        let mut worst = 0.0_f64;
        for j in 0..UNBIASED_DIM {
            let mean = sum[j] / n;
            let var = (sum_sq[j] - n * mean * mean) / (n - 1.0);
            let se = (var / n).sqrt();
            let z = (mean - (theta[j] - star[j]) / 3.0).abs() / se;
            worst = worst.max(z);
            if z > UNBIASED_SE {
                outside += 1;
            }
        }
        Ok((outside, worst))
    };
    match run() {
        Ok((outside, worst)) => CriterionResult::new(
            6,
            NAME,
            outside == 0,
            format!(
                "{queries} queries, d = {UNBIASED_DIM}, max |mean - expected| / SE = {worst:.3} (<= {UNBIASED_SE}), {outside} coordinates outside"
            ),
        ),
        Err(e) => CriterionResult::errored(6, NAME, &e),
    }
}

fn unit_constants(log_dim: f64, g: f64, sigma: f64, omega: f64) -> ProblemConstants {
    ProblemConstants {
        scale: GradientScale::Fixed {
            lipschitz: g,
            sigma,
        },
        rsc_gamma: 1.0,
        rsc_tolerance: 0.0,
        sparsity: 1,
        omega,
        log_dim,
        covariate_bound: 1.0,
        cov_min_eig: 1.0,
        noise_std: 0.0,
    }
}

/// Hand-derived schedule values.
pub fn schedule_arithmetic() -> CriterionResult {
    const NAME: &str = "schedule arithmetic";
    let checks = || -> Result<Vec<(&'static str, f64, f64)>> {
        let (g, sigma) = ls_constants(1.0, 0.5, 1.0);
        let (_, _, gamma) = logistic_constants(1.0, 0.0, 1.0 / 3.0);
        Ok(vec![
            (
                "epoch_length",
                epoch_length(&unit_constants(3.0, 1.0, 1.0, 0.0), 1.0, 1, 1.0)? as f64,
                9.0,
            ),
            (
                "epoch_lambda",
                epoch_lambda(&unit_constants(1.0, 1.0, 0.0, 0.0), 1.0, 1, 1)?,
                1.0,
            ),
            (
                "kappa_T",
                kappa_t(&unit_constants(1.0, 1.0, 0.0, 0.0), 1.0, 2)?,
                1.0,
            ),
            ("omega_i(i = 1)", omega_i(1.3, 1), 1.3),
            ("ls_constants G", g, 1.0 / 3.0),
            ("ls_constants sigma", sigma, 42f64.sqrt()),
            ("logistic_constants gamma", gamma, 1.0 / 12.0),
            (
                "approx_error",
                approx_error(&[1.0, 0.5], &[0], 0.0, 1.0)?,
                0.25,
            ),
            (
                "approx_error on support",
                approx_error(&[1.0, 0.5], &[0, 1], 0.0, 1.0)?,
                0.0,
            ),
        ])
    };
    match checks() {
        Ok(list) => {
            let failed: Vec<String> = list
                .iter()
                .filter(|(_, got, want)| {
                    let err = (got - want).abs();
                    if *want == 0.0 {
                        err > SCHEDULE_REL_TOL
                    } else {
                        err / want.abs() > SCHEDULE_REL_TOL
                    }
                })
                .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
                .collect();
            let detail = if failed.is_empty() {
                format!("{} values within {SCHEDULE_REL_TOL:e} relative", list.len())
            } else {
                failed.join("; ")
            };
            CriterionResult::new(7, NAME, failed.is_empty(), detail)
        }
        Err(e) => CriterionResult::errored(7, NAME, &e),
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.push((
                path.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                bytes,
            ));
        }
    }
    files.sort();
    Ok(files)
}

/// Reruns `spec` with one worker per job and compares every trace file
/// byte for byte against the first run in `first_out`.
pub fn determinism(
    spec: &ExperimentSpec,
    first_out: &Path,
    second_out: PathBuf,
) -> CriterionResult {
    const NAME: &str = "determinism";
    let run = || -> Result<(usize, Vec<String>)> {
        let jobs = spec.algorithms.len() * spec.trials;
        let again = ExperimentSpec {
            out_dir: second_out.clone(),
            ..spec.clone()
        };
        run_experiment_with_workers(&again, jobs)?;
        let a = read_dir_sorted(&first_out.join("runs"))?;
        let b = read_dir_sorted(&second_out.join("runs"))?;
        let mut diffs = Vec::new();
        if a.len() != b.len() {
            diffs.push(format!("{} vs {} run files", a.len(), b.len()));
        }
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            if na != nb || ba != bb {
                diffs.push(na.clone());
            }
        }
        for name in ["traces.csv", "summary.csv", "rates.csv"] {
            let fa =
                fs::read(first_out.join(name)).map_err(|e| Error::io(first_out.join(name), e))?;
            let fb =
                fs::read(second_out.join(name)).map_err(|e| Error::io(second_out.join(name), e))?;
            if fa != fb {
                diffs.push(name.to_string());
            }
        }
        Ok((a.len() + 3, diffs))
    };
    match run() {
        Ok((n, diffs)) => CriterionResult::new(
            8,
            NAME,
            diffs.is_empty(),
            if diffs.is_empty() {
                format!(
                    "{n} files byte-identical across a {}-worker rerun",
                    spec.algorithms.len() * spec.trials
                )
            } else {
                format!("differing files: {}", diffs.join(", "))
            },
        ),
        Err(e) => CriterionResult::errored(8, NAME, &e),
    }
}

/// Runs all eight criteria; scratch output goes under `work_dir`.
pub fn run_all(work_dir: &Path) -> Vec<CriterionResult> {
    let mut results = vec![prox_equivalence(PROX_INSTANCES)];
    let spec = desk_spec(work_dir.join("desk"));
    let workers = worker_count().unwrap_or(1);
    match run_experiment_with_workers(&spec, workers) {
        Ok(output) => {
            results.push(feasibility(&spec, &output));
            results.push(rate_check(&output));
            results.push(ordering_against_rda_sgd(&output));
            results.push(ordering_against_eda_const(&output, spec.budget));
            results.push(oracle_unbiasedness(UNBIASED_QUERIES));
            results.push(schedule_arithmetic());
            results.push(determinism(
                &spec,
                &spec.out_dir,
                work_dir.join("desk_rerun"),
            ));
        }
        Err(e) => {
            for (id, name) in [
                (2, "feasibility invariant"),
                (3, "rate check"),
                (4, "final-error ordering against rda and sgd"),
                (5, "final-error ordering against eda and radar-const"),
            ] {
                results.push(CriterionResult::errored(id, name, &e));
            }
            results.push(oracle_unbiasedness(UNBIASED_QUERIES));
            results.push(schedule_arithmetic());
            results.push(CriterionResult::errored(8, "determinism", &e));
        }
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_criterion_passes() {
        let r = schedule_arithmetic();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn small_prox_criterion_passes() {
        let r = prox_equivalence(3);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn result_line_format() {
        let r = CriterionResult::new(4, "x", false, "y");
        assert_eq!(r.to_string(), "[FAIL] 4. x: y");
    }
}
