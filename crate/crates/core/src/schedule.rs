//! Problem constants and every per-epoch schedule quantity: epoch lengths,
//! regularization levels, step multipliers, radii, `ω_i`, `κ_T`, and the
//! approximation-error metric.
//!
//! All logarithms are natural except the `log₂` inside `κ_T`. When the RSC
//! tolerance `τ` is positive, the formulas switch to the effective constant
//! `γ̄ = γ − 16 s τ` and the prox bound `A_ψ = e ln d`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the gradient-size constants `(G, σ)` depend on the radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientScale {
    /// Lipschitz losses: `G(R) ≡ G`, `σ(R) ≡ σ`.
    Fixed { lipschitz: f64, sigma: f64 },
    /// Least squares with `Unif[−B, B]` covariates: `(G, σ)` evaluated at
    /// twice the epoch radius via [`ls_constants`].
    LeastSquares {
        covariate_bound: f64,
        noise_var: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    pub scale: GradientScale,
    /// Strong-convexity constant `γ`.
    pub rsc_gamma: f64,
    /// RSC tolerance `τ ≥ 0`.
    pub rsc_tolerance: f64,
    pub sparsity: usize,
    /// Confidence parameter `ω`.
    pub omega: f64,
    /// `ln d`; kept real so schedules can be evaluated at any `d`.
    pub log_dim: f64,
    pub covariate_bound: f64,
    /// `σ_min(Σ)` of the covariate covariance.
    pub cov_min_eig: f64,
    /// Observation-noise standard deviation `η`.
    pub noise_std: f64,
}

impl ProblemConstants {
    /// Least-squares constants for `Unif[−B, B]` covariates:
    /// `γ = σ_min(Σ) = B²/3`, `τ = 0`, `ω² = ln d`.
    pub fn least_squares(
        dim: usize,
        sparsity: usize,
        covariate_bound: f64,
        noise_var: f64,
    ) -> Self {
        let log_dim = (dim as f64).ln();
        let cov = covariate_bound * covariate_bound / 3.0;
        ProblemConstants {
            scale: GradientScale::LeastSquares {
                covariate_bound,
                noise_var,
            },
            rsc_gamma: cov,
            rsc_tolerance: 0.0,
            sparsity,
            omega: log_dim.sqrt(),
            log_dim,
            covariate_bound,
            cov_min_eig: cov,
            noise_std: noise_var.sqrt(),
        }
    }

    /// Logistic constants `G = B`, `σ = 2B`, `γ = ψ_log(B R₁) σ_min(Σ)`.
    pub fn logistic(
        dim: usize,
        sparsity: usize,
        covariate_bound: f64,
        r1: f64,
        noise_var: f64,
    ) -> Self {
        let log_dim = (dim as f64).ln();
        let cov = covariate_bound * covariate_bound / 3.0;
        let (g, sigma, gamma) = logistic_constants(covariate_bound, r1, cov);
        ProblemConstants {
            scale: GradientScale::Fixed {
                lipschitz: g,
                sigma,
            },
            rsc_gamma: gamma,
            rsc_tolerance: 0.0,
            sparsity,
            omega: log_dim.sqrt(),
            log_dim,
            covariate_bound,
            cov_min_eig: cov,
            noise_std: noise_var.sqrt(),
        }
    }

    /// `(G_i, σ_i)` for an epoch of radius `radius`.
    pub fn gradient_constants(&self, radius: f64) -> (f64, f64) {
        match self.scale {
            GradientScale::Fixed { lipschitz, sigma } => (lipschitz, sigma),
            GradientScale::LeastSquares {
                covariate_bound,
                noise_var,
            } => ls_constants(covariate_bound, noise_var, 2.0 * radius),
        }
    }

    pub fn uses_tolerance(&self) -> bool {
        self.rsc_tolerance > 0.0
    }

    pub fn gamma_bar(&self) -> Result<f64> {
        effective_rsc(self.rsc_gamma, self.rsc_tolerance, self.sparsity)
    }

    pub fn a_prox(&self) -> f64 {
        std::f64::consts::E * self.log_dim
    }

    /// Dimension factor: `ln d` on the τ = 0 path, `A_ψ` otherwise.
    fn dim_factor(&self) -> f64 {
        if self.uses_tolerance() {
            self.a_prox()
        } else {
            self.log_dim
        }
    }

    /// `(G² + σ²)·L + ω²σ²` with `L` the dimension factor.
    fn noise_budget(&self, radius: f64, omega: f64) -> f64 {
        let (g, sigma) = self.gradient_constants(radius);
        (g * g + sigma * sigma) * self.dim_factor() + omega * omega * sigma * sigma
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let nonneg = [
            ("rsc_gamma", self.rsc_gamma),
            ("rsc_tolerance", self.rsc_tolerance),
            ("omega", self.omega),
            ("log_dim", self.log_dim),
            ("covariate_bound", self.covariate_bound),
            ("cov_min_eig", self.cov_min_eig),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be nonnegative and finite, got {v}"));
            }
        }
        if !(self.rsc_gamma > 0.0 && self.rsc_gamma.is_finite()) {
            bad.push("rsc_gamma must be positive".into());
        }
        if self.sparsity == 0 {
            bad.push("sparsity must be at least 1".into());
        }
        match self.scale {
            GradientScale::Fixed { lipschitz, sigma } => {
                if !(lipschitz >= 0.0 && sigma >= 0.0) {
                    bad.push("lipschitz and sigma must be nonnegative".into());
                }
            }
            GradientScale::LeastSquares {
                covariate_bound,
                noise_var,
            } => {
                if !(covariate_bound > 0.0 && noise_var >= 0.0) {
                    bad.push("least-squares scale needs B > 0 and noise_var >= 0".into());
                }
            }
        }
        if bad.is_empty() && self.uses_tolerance() {
            if let Err(e) = self.gamma_bar() {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// `γ̄ = γ − 16 s τ`; must be positive.
pub fn effective_rsc(gamma: f64, tau: f64, sparsity: usize) -> Result<f64> {
    let g = gamma - 16.0 * sparsity as f64 * tau;
    if g > 0.0 {
        Ok(g)
    } else {
        Err(Error::InfeasibleSparsity(g))
    }
}

/// `ω_i = sqrt(ω² + 24 ln i)`.
pub fn omega_i(omega: f64, epoch_index: usize) -> f64 {
    assert!(epoch_index >= 1, "epochs are numbered from 1");
    (omega * omega + 24.0 * (epoch_index as f64).ln()).sqrt()
}

/// Planned length of epoch `i` at radius `radius`:
/// `⌈c₁ (s²/(γ²R²) ((G²+σ²) ln d + ω_i²σ²) + ln d)⌉` (τ = 0), or
/// `⌈c₁ (s²γ²/(γ̄⁴R²) (A_ψ(G²+σ²) + ω_i²σ²) + γA_ψ/γ̄)⌉` (τ > 0).
/// Never below 1.
pub fn epoch_length(
    constants: &ProblemConstants,
    radius: f64,
    epoch_index: usize,
    c1: f64,
) -> Result<u64> {
    positive("radius", radius)?;
    let s = constants.sparsity as f64;
    let gamma = constants.rsc_gamma;
    let budget = constants.noise_budget(radius, omega_i(constants.omega, epoch_index));
    let raw = if constants.uses_tolerance() {
        let gb = constants.gamma_bar()?;
        let a = constants.a_prox();
        c1 * (s * s * gamma * gamma / (gb.powi(4) * radius * radius) * budget + gamma * a / gb)
    } else {
        c1 * (s * s / (gamma * gamma * radius * radius) * budget + constants.log_dim)
    };
    Ok(ceil_count(raw))
}

/// `λ_i = sqrt( R_i γ / (s √T_i) · sqrt((G_i² + σ_i²) ln d + ω_i² σ_i²) )`,
/// with `γ̄` and `A_ψ` on the τ > 0 path.
pub fn epoch_lambda(
    constants: &ProblemConstants,
    radius: f64,
    epoch_len: u64,
    epoch_index: usize,
) -> Result<f64> {
    positive("radius", radius)?;
    if epoch_len == 0 {
        return Err(Error::InvalidParameter(
            "epoch length must be at least 1".into(),
        ));
    }
    let gamma = if constants.uses_tolerance() {
        constants.gamma_bar()?
    } else {
        constants.rsc_gamma
    };
    let budget = constants.noise_budget(radius, omega_i(constants.omega, epoch_index));
    let s = constants.sparsity as f64;
    let lambda_sq = radius * gamma / (s * (epoch_len as f64).sqrt()) * budget.sqrt();
    Ok(lambda_sq.sqrt())
}

/// Step multiplier `α_i = 5 R_i sqrt(ln d / (G_i² + λ_i² + σ_i²))`; the step
/// at within-epoch iteration `t` is `α_i/√t`.
pub fn step_multiplier(constants: &ProblemConstants, radius: f64, lambda: f64) -> f64 {
    let (g, sigma) = constants.gradient_constants(radius);
    let denom = g * g + lambda * lambda + sigma * sigma;
    if denom == 0.0 {
        // no gradient scale information: fall back to the radius itself
        return 5.0 * radius * constants.dim_factor().sqrt();
    }
    5.0 * radius * (constants.dim_factor() / denom).sqrt()
}

/// `κ_T = log₂[γ² R₁² T / (s²((G²+σ²) ln d + ω²σ²))] · ln d`, or the
/// `γ̄`/`A_ψ` form when τ > 0. Errors when the log argument is at most 1.
pub fn kappa_t(constants: &ProblemConstants, r1: f64, budget: u64) -> Result<f64> {
    positive("radius", r1)?;
    let s = constants.sparsity as f64;
    let gamma = constants.rsc_gamma;
    let noise = constants.noise_budget(r1, constants.omega);
    let t = budget as f64;
    let (arg, factor) = if constants.uses_tolerance() {
        let gb = constants.gamma_bar()?;
        (
            gb.powi(4) * r1 * r1 * t / (gamma * gamma * s * s * noise),
            gamma * constants.log_dim / gb,
        )
    } else {
        (
            gamma * gamma * r1 * r1 * t / (s * s * noise),
            constants.log_dim,
        )
    };
    if !(arg > 1.0 && arg.is_finite()) {
        return Err(Error::BudgetTooSmall(arg));
    }
    Ok(arg.log2() * factor)
}

/// Least-squares constants at radius `R`: `G = (B²/3) R` and
/// `σ = sqrt(24 B⁴ R² + 36 B² η²)`.
pub fn ls_constants(covariate_bound: f64, noise_var: f64, radius: f64) -> (f64, f64) {
    let b2 = covariate_bound * covariate_bound;
    let g = b2 / 3.0 * radius;
    let sigma = (24.0 * b2 * b2 * radius * radius + 36.0 * b2 * noise_var).sqrt();
    (g, sigma)
}

/// Second derivative of the logistic loss, `e^a/(1+e^a)²`.
pub fn logistic_curvature(a: f64) -> f64 {
    let s = 1.0 / (1.0 + (-a.abs()).exp());
    s * (1.0 - s)
}

/// Logistic constants `(G, σ, γ) = (B, 2B, ψ_log(B R₁) σ_min(Σ))`.
pub fn logistic_constants(covariate_bound: f64, r1: f64, cov_min_eig: f64) -> (f64, f64, f64) {
    (
        covariate_bound,
        2.0 * covariate_bound,
        logistic_curvature(covariate_bound * r1) * cov_min_eig,
    )
}

/// `ε²(θ*; S, τ) = ‖θ*_{S^c}‖₁² / |S| · (1 + |S| τ / γ̄)`.
pub fn approx_error(
    theta_star: &[f64],
    support: &[usize],
    tau: f64,
    gamma_bar: f64,
) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::InvalidSupport);
    }
    let mut inside = vec![false; theta_star.len()];
    for &j in support {
        if j >= theta_star.len() {
            return Err(Error::InvalidParameter(format!(
                "support index {j} out of range for dimension {}",
                theta_star.len()
            )));
        }
        inside[j] = true;
    }
    let s = support
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len() as f64;
    let off: f64 = theta_star
        .iter()
        .zip(&inside)
        .filter(|(_, &i)| !i)
        .map(|(v, _)| v.abs())
        .sum();
    let inflation = if tau > 0.0 {
        if !(gamma_bar > 0.0 && gamma_bar.is_finite()) {
            return Err(Error::InfeasibleSparsity(gamma_bar));
        }
        1.0 + s * tau / gamma_bar
    } else {
        1.0
    };
    Ok(off * off / s * inflation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    /// Lengths from [`epoch_length`]; they roughly double each epoch.
    Doubling,
    /// Every epoch has the same length.
    Constant,
    /// Lengths decided at run time by the driver's halving test.
    OracleHalving,
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanMode::Doubling => "doubling",
            PlanMode::Constant => "constant",
            PlanMode::OracleHalving => "oracle_halving",
        })
    }
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doubling" => Ok(PlanMode::Doubling),
            "constant" => Ok(PlanMode::Constant),
            "oracle_halving" | "oracle-halving" => Ok(PlanMode::OracleHalving),
            other => Err(Error::Parse(format!("unknown plan mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedEpoch {
    /// 1-based.
    pub index: usize,
    pub length: u64,
    /// `R_i²`, halved exactly from epoch to epoch.
    pub radius_sq: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl PlannedEpoch {
    pub fn radius(&self) -> f64 {
        self.radius_sq.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub mode: PlanMode,
    pub epochs: Vec<PlannedEpoch>,
    pub total_budget: u64,
}

/// Theoretical parameters of epoch `index` at squared radius `radius_sq`:
/// length from [`epoch_length`], `λ_i` from [`epoch_lambda`] at that length,
/// and `α_i` from [`step_multiplier`].
pub fn theoretical_epoch(
    constants: &ProblemConstants,
    index: usize,
    radius_sq: f64,
    c1: f64,
) -> Result<PlannedEpoch> {
    let radius = radius_sq.sqrt();
    let length = epoch_length(constants, radius, index, c1)?;
    let lambda = epoch_lambda(constants, radius, length, index)?;
    let alpha = step_multiplier(constants, radius, lambda);
    Ok(PlannedEpoch {
        index,
        length,
        radius_sq,
        lambda,
        alpha,
    })
}

/// Fixed epoch length: `max(⌈T ln d/κ_T⌉, ⌈ln T⌉)`, or `⌈T/ln T⌉` (about
/// `ln T` epochs) when `κ_T` is undefined for this budget. Clamped to `[1, T]`.
pub fn constant_epoch_length(constants: &ProblemConstants, r1: f64, budget: u64) -> Result<u64> {
    if budget <= 2 {
        return Ok(budget.max(1));
    }
    let t = budget as f64;
    let len = match kappa_t(constants, r1, budget) {
        Ok(kappa) => ceil_count(t * constants.log_dim / kappa).max(ceil_count(t.ln())),
        Err(Error::BudgetTooSmall(_)) => ceil_count(t / t.ln()),
        Err(e) => return Err(e),
    };
    Ok(len.clamp(1, budget))
}

/// Epoch plan for a budget of `budget` iterations starting at radius `r1`.
///
/// Radii follow `R²_{i+1} = R²_i/2` in every mode. `λ_i` and `α_i` always
/// come from the theoretical schedule at `R_i`, so the regularization
/// anneals identically whatever the executed epoch lengths are. In
/// `OracleHalving` mode the epoch list is left empty: the driver decides
/// lengths as it runs.
pub fn build_plan(
    constants: &ProblemConstants,
    r1: f64,
    budget: u64,
    mode: PlanMode,
    c1: f64,
) -> Result<EpochPlan> {
    positive("initial radius", r1)?;
    positive("c1", c1)?;
    if budget == 0 {
        return Err(Error::InvalidParameter("budget must be at least 1".into()));
    }
    let mut epochs = Vec::new();
    let fixed_len = match mode {
        PlanMode::Constant => Some(constant_epoch_length(constants, r1, budget)?),
        PlanMode::Doubling => None,
        PlanMode::OracleHalving => {
            return Ok(EpochPlan {
                mode,
                epochs,
                total_budget: budget,
            })
        }
    };
    let mut used = 0u64;
    let mut radius_sq = r1 * r1;
    let mut index = 1;
    while used < budget {
        let mut epoch = theoretical_epoch(constants, index, radius_sq, c1)?;
        if let Some(len) = fixed_len {
            epoch.length = len;
        }
        epoch.length = epoch.length.min(budget - used);
        used += epoch.length;
        epochs.push(epoch);
        radius_sq /= 2.0;
        index += 1;
    }
    Ok(EpochPlan {
        mode,
        epochs,
        total_budget: budget,
    })
}

impl EpochPlan {
    pub fn planned_iterations(&self) -> u64 {
        self.epochs.iter().map(|e| e.length).sum()
    }

    /// CSV with header `epoch_index,T_i,R_i,lambda_i,alpha_i`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch_index,T_i,R_i,lambda_i,alpha_i")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.index,
                e.length,
                e.radius(),
                e.lambda,
                e.alpha
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn ceil_count(x: f64) -> u64 {
    if x.is_nan() {
        return 1;
    }
    // saturating cast
    (x.ceil() as u64).max(1)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}
