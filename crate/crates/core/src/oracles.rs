//! Problem instances and stochastic gradient oracles.
//!
//! Covariates have i.i.d. `Unif[−B, B]` coordinates. Least-squares responses
//! follow `y = ⟨x, θ*⟩ + w` with `w ~ N(0, η²)`; logistic labels are
//! `sign(⟨x, θ*⟩ + w)`. An oracle either draws a fresh sample per query or
//! resamples a finite pool uniformly with replacement.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{check_dim, DenseVector};

/// Independent random stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    LeastSquares,
    Logistic,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::LeastSquares => "least_squares",
            LossKind::Logistic => "logistic",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" | "least-squares" | "ls" => Ok(LossKind::LeastSquares),
            "logistic" => Ok(LossKind::Logistic),
            other => Err(Error::Parse(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Law of the nonzero entries of a sparse target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetValues {
    /// `±magnitude` with equal probability.
    RandomSigns { magnitude: f64 },
    /// `N(0, std²)`, resampled if exactly zero.
    Gaussian { std: f64 },
}

impl Default for TargetValues {
    fn default() -> Self {
        TargetValues::RandomSigns { magnitude: 1.0 }
    }
}

/// `θ*` with exactly `sparsity` nonzeros on a uniformly random support.
pub fn make_sparse_target<R: Rng + ?Sized>(
    dim: usize,
    sparsity: usize,
    values: TargetValues,
    rng: &mut R,
) -> Result<DenseVector> {
    if sparsity == 0 || sparsity > dim {
        return Err(Error::InvalidSparsity { sparsity, dim });
    }
    let mut theta = DenseVector::zeros(dim);
    let mut support = index::sample(rng, dim, sparsity).into_vec();
    support.sort_unstable();
    for j in support {
        theta[j] = match values {
            TargetValues::RandomSigns { magnitude } => {
                if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            }
            TargetValues::Gaussian { std } => loop {
                let v = std * rng.sample::<f64, _>(StandardNormal);
                if v != 0.0 {
                    break v;
                }
            },
        };
    }
    Ok(theta)
}

/// The rule `s = ⌈ln d⌉`.
pub fn log_sparsity(dim: usize) -> usize {
    ((dim as f64).ln().ceil() as usize).clamp(1, dim.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    theta_star: DenseVector,
    sparsity: usize,
    covariate_bound: f64,
    noise_var: f64,
    loss: LossKind,
}

impl ProblemInstance {
    pub fn new(
        theta_star: DenseVector,
        covariate_bound: f64,
        noise_var: f64,
        loss: LossKind,
    ) -> Result<Self> {
        if !(covariate_bound > 0.0 && covariate_bound.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "covariate bound must be positive, got {covariate_bound}"
            )));
        }
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be nonnegative, got {noise_var}"
            )));
        }
        let sparsity = theta_star.iter().filter(|v| **v != 0.0).count();
        Ok(ProblemInstance {
            theta_star,
            sparsity,
            covariate_bound,
            noise_var,
            loss,
        })
    }

    pub fn theta_star(&self) -> &DenseVector {
        &self.theta_star
    }

    pub fn dim(&self) -> usize {
        self.theta_star.dim()
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn covariate_bound(&self) -> f64 {
        self.covariate_bound
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    fn fill_covariates<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) {
        let b = self.covariate_bound;
        for xj in x.iter_mut() {
            *xj = b * (2.0 * rng.random::<f64>() - 1.0);
        }
    }

    fn response<R: Rng + ?Sized>(&self, rng: &mut R, x: &[f64]) -> f64 {
        let signal = dot(x, &self.theta_star);
        let noise = if self.noise_var > 0.0 {
            self.noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        match self.loss {
            LossKind::LeastSquares => signal + noise,
            LossKind::Logistic => {
                if signal + noise >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    /// One draw from the instance's data distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let mut x = DenseVector::zeros(self.dim());
        self.fill_covariates(rng, &mut x);
        let y = self.response(rng, &x);
        Sample { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DenseVector,
    pub y: f64,
}

/// Least-squares draw: `x ~ Unif[−B, B]^d`, `y = ⟨x, θ*⟩ + w`.
pub fn sample_ls<R: Rng + ?Sized>(instance: &ProblemInstance, rng: &mut R) -> Result<Sample> {
    if instance.loss != LossKind::LeastSquares {
        return Err(Error::InvalidParameter(
            "sample_ls needs a least-squares instance".into(),
        ));
    }
    Ok(instance.sample(rng))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(⟨x, θ⟩ − y) x`, the gradient of `(y − ⟨θ, x⟩)²/2`.
pub fn ls_gradient(theta: &[f64], sample: &Sample) -> Result<DenseVector> {
    let mut out = DenseVector::zeros(theta.len());
    ls_gradient_into(theta, &sample.x, sample.y, &mut out)?;
    Ok(out)
}

fn ls_gradient_into(theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) -> Result<()> {
    check_dim(theta.len(), x.len())?;
    check_dim(theta.len(), out.len())?;
    let r = dot(x, theta) - y;
    for (o, xj) in out.iter_mut().zip(x) {
        *o = r * xj;
    }
    Ok(())
}

/// `−y x / (1 + exp(y⟨θ, x⟩))`, the gradient of `log(1 + exp(−y⟨θ, x⟩))`.
pub fn logistic_gradient(theta: &[f64], sample: &Sample) -> Result<DenseVector> {
    let mut out = DenseVector::zeros(theta.len());
    logistic_gradient_into(theta, &sample.x, sample.y, &mut out)?;
    Ok(out)
}

fn logistic_gradient_into(theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) -> Result<()> {
    if y != 1.0 && y != -1.0 {
        return Err(Error::InvalidLabel(y));
    }
    check_dim(theta.len(), x.len())?;
    check_dim(theta.len(), out.len())?;
    let w = -y * sigmoid_neg(y * dot(x, theta));
    for (o, xj) in out.iter_mut().zip(x) {
        *o = w * xj;
    }
    Ok(())
}

/// `1 / (1 + e^z)` without overflow for large `|z|`.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Per-sample loss value, used for held-out objective traces.
pub fn loss_value(kind: LossKind, theta: &[f64], sample: &Sample) -> f64 {
    let m = dot(&sample.x, theta);
    match kind {
        LossKind::LeastSquares => 0.5 * (sample.y - m) * (sample.y - m),
        LossKind::Logistic => {
            let z = -sample.y * m;
            // log(1 + e^z), stable for either sign
            z.max(0.0) + (-z.abs()).exp().ln_1p()
        }
    }
}

/// Source of stochastic subgradients `g(θ)` with `E[g(θ)] ∈ ∂L̄(θ)`.
pub trait GradientOracle {
    fn dim(&self) -> usize;

    /// Writes one stochastic gradient at `theta` into `out`.
    fn query_into(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()>;

    fn query(&mut self, theta: &[f64]) -> Result<DenseVector> {
        let mut out = DenseVector::zeros(self.dim());
        self.query_into(theta, &mut out)?;
        Ok(out)
    }

    /// The true optimum, when the oracle knows it.
    fn ground_truth(&self) -> Option<&[f64]> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    FreshSample,
    FinitePool,
}

/// Gradient oracle over a [`ProblemInstance`], fresh-sample or finite-pool.
#[derive(Debug, Clone)]
pub struct SampleOracle {
    instance: ProblemInstance,
    pool: Option<Vec<Sample>>,
    rng: ChaCha8Rng,
    x: Vec<f64>,
}

impl SampleOracle {
    pub fn fresh(instance: ProblemInstance, rng: ChaCha8Rng) -> Self {
        let d = instance.dim();
        SampleOracle {
            instance,
            pool: None,
            rng,
            x: vec![0.0; d],
        }
    }

    pub fn finite_pool(
        instance: ProblemInstance,
        pool: Vec<Sample>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        for s in &pool {
            check_dim(instance.dim(), s.x.dim())?;
            if instance.loss == LossKind::Logistic && s.y != 1.0 && s.y != -1.0 {
                return Err(Error::InvalidLabel(s.y));
            }
        }
        Ok(SampleOracle {
            instance,
            pool: Some(pool),
            rng,
            x: Vec::new(),
        })
    }

    pub fn mode(&self) -> SamplingMode {
        if self.pool.is_some() {
            SamplingMode::FinitePool
        } else {
            SamplingMode::FreshSample
        }
    }

    pub fn instance(&self) -> &ProblemInstance {
        &self.instance
    }

    /// Next sample in the oracle's stream: fresh draw or pool index.
    pub fn next_sample(&mut self) -> Result<Sample> {
        match &self.pool {
            Some(pool) => {
                if pool.is_empty() {
                    return Err(Error::EmptyPool);
                }
                let k = self.rng.random_range(0..pool.len());
                Ok(pool[k].clone())
            }
            None => Ok(self.instance.sample(&mut self.rng)),
        }
    }

    fn gradient(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) -> Result<()> {
        match self.instance.loss {
            LossKind::LeastSquares => ls_gradient_into(theta, x, y, out),
            LossKind::Logistic => logistic_gradient_into(theta, x, y, out),
        }
    }
}

impl GradientOracle for SampleOracle {
    fn dim(&self) -> usize {
        self.instance.dim()
    }

    fn query_into(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.pool {
            Some(pool) => {
                if pool.is_empty() {
                    return Err(Error::EmptyPool);
                }
                let k = self.rng.random_range(0..pool.len());
                let s = &pool[k];
                self.gradient(theta, &s.x, s.y, out)
            }
            None => {
                let mut x = std::mem::take(&mut self.x);
                self.instance.fill_covariates(&mut self.rng, &mut x);
                let y = self.instance.response(&mut self.rng, &x);
                let res = self.gradient(theta, &x, y, out);
                self.x = x;
                res
            }
        }
    }

    fn ground_truth(&self) -> Option<&[f64]> {
        Some(&self.instance.theta_star)
    }
}

/// `n` i.i.d. samples from the instance.
pub fn generate_pool<R: Rng + ?Sized>(
    instance: &ProblemInstance,
    n: usize,
    rng: &mut R,
) -> Vec<Sample> {
    (0..n).map(|_| instance.sample(rng)).collect()
}

/// Writes a pool as CSV with header `x_1,…,x_d,y`.
pub fn write_pool_csv(path: &Path, pool: &[Sample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let dim = pool.first().map_or(0, |s| s.x.dim());
    let mut header: Vec<String> = (1..=dim).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for s in pool {
        check_dim(dim, s.x.dim())?;
        let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        rec.push(s.y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pool_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    if headers.get(dim) != Some("y") {
        return Err(Error::Parse(format!(
            "{}: last pool column must be `y`",
            path.display()
        )));
    }
    let mut pool = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: `{f}`: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (x, y) = vals.split_at(dim);
        pool.push(Sample {
            x: DenseVector::from(x),
            y: y[0],
        });
    }
    Ok(pool)
}
