//! Top-level algorithms: RADAR, RADAR-CONST, EDA and the RDA and projected
//! SGD baselines.

use std::fmt;
use std::str::FromStr;

use crate::engine::{
    default_stride, run_epoch, EpochRecord, EpochState, HalvingRule, Metric, RunTrace, Termination,
    TraceRecorder,
};
use crate::error::{Error, Result};
use crate::geometry::{project_l1_ball_in_place, DenseVector, LpGeometry};
use crate::oracles::GradientOracle;
use crate::schedule::{
    build_plan, constant_epoch_length, step_multiplier, theoretical_epoch, EpochPlan, PlanMode,
    PlannedEpoch, ProblemConstants,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlgorithmKind {
    Radar,
    RadarConst,
    Eda,
    Rda,
    Sgd,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::Radar,
        AlgorithmKind::RadarConst,
        AlgorithmKind::Eda,
        AlgorithmKind::Rda,
        AlgorithmKind::Sgd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmKind::Radar => "radar",
            AlgorithmKind::RadarConst => "radar_const",
            AlgorithmKind::Eda => "eda",
            AlgorithmKind::Rda => "rda",
            AlgorithmKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "radar" => Ok(AlgorithmKind::Radar),
            "radar_const" => Ok(AlgorithmKind::RadarConst),
            "eda" => Ok(AlgorithmKind::Eda),
            "rda" => Ok(AlgorithmKind::Rda),
            "sgd" => Ok(AlgorithmKind::Sgd),
            other => Err(Error::Parse(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How multi-epoch methods decide when an epoch ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochMode {
    /// Lengths from the schedule.
    Theoretical,
    /// End epoch `i` once `‖y_{i+1} − θ*‖_p² ≤ ‖y_i − θ*‖_p²/2`.
    OracleHalving,
}

impl fmt::Display for EpochMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpochMode::Theoretical => "theoretical",
            EpochMode::OracleHalving => "oracle-halving",
        })
    }
}

impl FromStr for EpochMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "theoretical" => Ok(EpochMode::Theoretical),
            "oracle-halving" | "oracle_halving" => Ok(EpochMode::OracleHalving),
            other => Err(Error::Parse(format!("unknown epoch mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    /// Initial radius; must bound `‖θ*‖₁`.
    pub r1: f64,
    pub total_budget: u64,
    pub epoch_mode: EpochMode,
    pub constants: ProblemConstants,
    /// Universal constant in the epoch-length formula.
    pub c1: f64,
    pub seed: u64,
    pub trials: usize,
    /// Trace stride; `None` picks [`default_stride`].
    pub trace_stride: Option<u64>,
    /// Strong-convexity constant for the SGD step `1/(γ t)`; `None` uses
    /// `σ_min(Σ)` from the constants.
    pub sgd_gamma: Option<f64>,
    /// Halving epochs are cut off after this multiple of the theoretical
    /// length.
    pub overrun_factor: u64,
}

impl AlgorithmConfig {
    pub fn new(
        kind: AlgorithmKind,
        constants: ProblemConstants,
        r1: f64,
        total_budget: u64,
    ) -> Self {
        AlgorithmConfig {
            kind,
            r1,
            total_budget,
            epoch_mode: EpochMode::Theoretical,
            constants,
            c1: 1.0,
            seed: 0,
            trials: 1,
            trace_stride: None,
            sgd_gamma: None,
            overrun_factor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.r1 > 0.0 && self.r1.is_finite()) {
            bad.push(format!("r1 must be positive, got {}", self.r1));
        }
        if self.total_budget == 0 {
            bad.push("total_budget must be at least 1".into());
        }
        if self.trials == 0 {
            bad.push("trials must be at least 1".into());
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            bad.push(format!("c1 must be positive, got {}", self.c1));
        }
        if self.overrun_factor == 0 {
            bad.push("overrun_factor must be at least 1".into());
        }
        if let Some(g) = self.sgd_gamma {
            if !(g > 0.0 && g.is_finite()) {
                bad.push(format!("sgd_gamma must be positive, got {g}"));
            }
        }
        if let Err(Error::Validation(more)) = self.constants.validate() {
            bad.extend(more);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    fn stride(&self) -> u64 {
        self.trace_stride
            .unwrap_or_else(|| default_stride(self.total_budget))
    }

    /// The fixed regularization of EDA and RDA, `4η sqrt(ln d / T)`.
    pub fn baseline_lambda(&self) -> f64 {
        4.0 * self.constants.noise_std * (self.constants.log_dim / self.total_budget as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub final_iterate: DenseVector,
    pub trace: RunTrace,
    pub epochs_completed: usize,
    pub plan_used: EpochPlan,
}

/// Runs `config.kind`, scoring iterates against the oracle's ground truth.
pub fn run_algorithm<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
) -> Result<RunResult> {
    let star = oracle
        .ground_truth()
        .ok_or_else(|| {
            Error::InvalidParameter("oracle exposes no ground truth; pass a held-out metric".into())
        })?
        .to_vec();
    run_algorithm_with_metric(oracle, config, Metric::GroundTruth(&star))
}

pub fn run_algorithm_with_metric<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
    metric: Metric<'_>,
) -> Result<RunResult> {
    config.validate()?;
    match config.kind {
        AlgorithmKind::Radar | AlgorithmKind::RadarConst | AlgorithmKind::Eda => {
            run_multi_epoch(oracle, config, metric)
        }
        AlgorithmKind::Rda => run_rda_inner(oracle, config, metric),
        AlgorithmKind::Sgd => run_sgd_inner(oracle, config, metric),
    }
}

fn expect_kind(config: &AlgorithmConfig, kind: AlgorithmKind) -> Result<()> {
    if config.kind == kind {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "config is for {}, not {kind}",
            config.kind
        )))
    }
}

/// RADAR: epochs per the doubling plan (or the halving test), each starting
/// from the previous epoch's average with `R²` halved and `λ` annealed.
pub fn run_radar<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
) -> Result<RunResult> {
    expect_kind(config, AlgorithmKind::Radar)?;
    run_algorithm(oracle, config)
}

/// RADAR with every epoch the same length.
pub fn run_radar_const<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
) -> Result<RunResult> {
    expect_kind(config, AlgorithmKind::RadarConst)?;
    run_algorithm(oracle, config)
}

/// The RADAR epoch structure with `λ` fixed at `4η sqrt(ln d/T)`.
pub fn run_eda<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
) -> Result<RunResult> {
    expect_kind(config, AlgorithmKind::Eda)?;
    run_algorithm(oracle, config)
}

/// Single-phase regularized dual averaging on the ball `‖θ‖_p ≤ R₁`.
pub fn run_rda<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
) -> Result<RunResult> {
    expect_kind(config, AlgorithmKind::Rda)?;
    run_algorithm(oracle, config)
}

/// Projected SGD on `‖θ‖₁ ≤ R₁` with step `1/(γ t)`.
pub fn run_sgd<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
) -> Result<RunResult> {
    expect_kind(config, AlgorithmKind::Sgd)?;
    run_algorithm(oracle, config)
}

fn run_multi_epoch<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
    metric: Metric<'_>,
) -> Result<RunResult> {
    let d = oracle.dim();
    let geom = LpGeometry::new(d)?;
    let constants = &config.constants;
    let budget = config.total_budget;
    let mode = match (config.kind, config.epoch_mode) {
        (AlgorithmKind::RadarConst, _) => PlanMode::Constant,
        (_, EpochMode::Theoretical) => PlanMode::Doubling,
        (_, EpochMode::OracleHalving) => PlanMode::OracleHalving,
    };
    let mut plan = build_plan(constants, config.r1, budget, mode, config.c1)?;
    let fixed_lambda = (config.kind == AlgorithmKind::Eda).then(|| config.baseline_lambda());
    let star: Option<Vec<f64>> = match mode {
        PlanMode::OracleHalving => Some(
            oracle
                .ground_truth()
                .ok_or_else(|| {
                    Error::InvalidParameter(
                        "oracle-halving mode needs the oracle's ground truth".into(),
                    )
                })?
                .to_vec(),
        ),
        _ => None,
    };

    let constant_len = match mode {
        PlanMode::Constant => constant_epoch_length(constants, config.r1, budget)?,
        _ => 0,
    };
    let mut recorder = TraceRecorder::new(config.stride(), metric);
    let mut center = DenseVector::zeros(d);
    let mut radius_sq = config.r1 * config.r1;
    let mut executed = Vec::new();
    let mut epochs_completed = 0;
    let mut index = 1;
    while recorder.iteration() < budget {
        let remaining = budget - recorder.iteration();
        let mut params: PlannedEpoch = match plan.epochs.get(index - 1) {
            Some(e) => e.clone(),
            None => theoretical_epoch(constants, index, radius_sq, config.c1)?,
        };
        debug_assert_eq!(params.radius_sq, radius_sq);
        if let Some(lambda) = fixed_lambda {
            params.lambda = lambda;
            params.alpha = step_multiplier(constants, params.radius(), lambda);
        }
        // the plan truncates its last epoch; compare against the full length
        let full_length = match mode {
            PlanMode::OracleHalving => params.length.saturating_mul(config.overrun_factor),
            PlanMode::Constant => constant_len,
            PlanMode::Doubling => theoretical_epoch(constants, index, radius_sq, config.c1)?.length,
        };
        let cap = match mode {
            PlanMode::OracleHalving => full_length,
            _ => params.length,
        };
        let rule = star.as_ref().map(|s| {
            let start = geom.p_distance(&center, s);
            HalvingRule {
                theta_star: s,
                target_sq: start * start / 2.0,
            }
        });
        let mut state = EpochState::new(index, center, radius_sq, params.lambda, params.alpha);
        let outcome = run_epoch(
            oracle,
            &mut state,
            cap.min(remaining),
            &geom,
            &mut recorder,
            rule.as_ref(),
        )?;
        let termination = if outcome.halved {
            Termination::Halved
        } else if outcome.iterations < full_length {
            Termination::BudgetExhausted
        } else if mode == PlanMode::OracleHalving {
            Termination::Overrun
        } else {
            Termination::Planned
        };
        if termination != Termination::BudgetExhausted {
            epochs_completed += 1;
        }
        recorder.push_epoch(EpochRecord {
            index,
            radius_sq,
            lambda: params.lambda,
            alpha: params.alpha,
            iterations: outcome.iterations,
            max_feasibility: outcome.max_feasibility,
            termination,
        });
        executed.push(PlannedEpoch {
            length: outcome.iterations,
            ..params
        });
        center = outcome.average;
        radius_sq /= 2.0;
        index += 1;
    }
    plan.epochs = executed;
    Ok(RunResult {
        final_iterate: center,
        trace: recorder.finish(),
        epochs_completed,
        plan_used: plan,
    })
}

fn run_rda_inner<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
    metric: Metric<'_>,
) -> Result<RunResult> {
    let d = oracle.dim();
    let geom = LpGeometry::new(d)?;
    let lambda = config.baseline_lambda();
    let radius_sq = config.r1 * config.r1;
    let alpha = step_multiplier(&config.constants, config.r1, lambda);
    let mut recorder = TraceRecorder::new(config.stride(), metric);
    let mut state = EpochState::new(1, DenseVector::zeros(d), radius_sq, lambda, alpha);
    let outcome = run_epoch(
        oracle,
        &mut state,
        config.total_budget,
        &geom,
        &mut recorder,
        None,
    )?;
    recorder.push_epoch(EpochRecord {
        index: 1,
        radius_sq,
        lambda,
        alpha,
        iterations: outcome.iterations,
        max_feasibility: outcome.max_feasibility,
        termination: Termination::Planned,
    });
    Ok(RunResult {
        final_iterate: outcome.average,
        trace: recorder.finish(),
        epochs_completed: 1,
        plan_used: EpochPlan {
            mode: PlanMode::Constant,
            epochs: vec![PlannedEpoch {
                index: 1,
                length: config.total_budget,
                radius_sq,
                lambda,
                alpha,
            }],
            total_budget: config.total_budget,
        },
    })
}

fn run_sgd_inner<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    config: &AlgorithmConfig,
    metric: Metric<'_>,
) -> Result<RunResult> {
    let d = oracle.dim();
    let gamma = config.sgd_gamma.unwrap_or(config.constants.cov_min_eig);
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "SGD needs a positive strong-convexity constant, got {gamma}"
        )));
    }
    let r1 = config.r1;
    let mut recorder = TraceRecorder::new(config.stride(), metric);
    let mut theta = DenseVector::zeros(d);
    let mut grad = vec![0.0; d];
    let mut max_feasibility = 0.0_f64;
    for t in 1..=config.total_budget {
        oracle.query_into(&theta, &mut grad)?;
        let step = 1.0 / (gamma * t as f64);
        for (th, g) in theta.iter_mut().zip(&grad) {
            *th -= step * g;
        }
        project_l1_ball_in_place(&mut theta, r1);
        max_feasibility = max_feasibility.max(theta.iter().map(|v| v.abs()).sum::<f64>() / r1);
        recorder.tick();
        recorder.observe(1, &theta, r1, 0.0);
    }
    recorder.force(1, &theta, r1, 0.0);
    recorder.push_epoch(EpochRecord {
        index: 1,
        radius_sq: r1 * r1,
        lambda: 0.0,
        alpha: 1.0 / gamma,
        iterations: config.total_budget,
        max_feasibility,
        termination: Termination::Planned,
    });
    Ok(RunResult {
        final_iterate: theta,
        trace: recorder.finish(),
        epochs_completed: 1,
        plan_used: EpochPlan {
            mode: PlanMode::Constant,
            epochs: vec![PlannedEpoch {
                index: 1,
                length: config.total_budget,
                radius_sq: r1 * r1,
                lambda: 0.0,
                alpha: 1.0 / gamma,
            }],
            total_budget: config.total_budget,
        },
    })
}
