//! The within-epoch stochastic dual-averaging loop and run traces.
//!
//! One epoch keeps a dual average `μ`, adds the composite subgradient
//! `g_t + λ sign(θ_t)` at every step, and maps `μ` back to an iterate with
//! the closed-form prox step of [`crate::geometry`], using step `α/√(t+1)`
//! at 0-based iteration `t`. The epoch returns the average of `θ_1..θ_T`.

use crate::error::{Error, Result};
use crate::geometry::{dual_averaging_step_into, sign, DenseVector, LpGeometry};
use crate::oracles::{loss_value, GradientOracle, LossKind, Sample};

/// Points kept per run by [`default_stride`].
pub const TARGET_TRACE_POINTS: u64 = 500;

/// Stride giving about [`TARGET_TRACE_POINTS`] evenly spaced trace points.
pub fn default_stride(budget: u64) -> u64 {
    (budget / TARGET_TRACE_POINTS).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochState {
    /// 1-based epoch number.
    pub index: usize,
    pub center: DenseVector,
    pub radius_sq: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub mu: DenseVector,
    pub theta: DenseVector,
    pub iterate_sum: DenseVector,
    /// Iterations completed in this epoch.
    pub t: u64,
}

impl EpochState {
    /// Fresh epoch: `μ = 0`, `θ = center`.
    pub fn new(index: usize, center: DenseVector, radius_sq: f64, lambda: f64, alpha: f64) -> Self {
        let d = center.dim();
        EpochState {
            index,
            theta: center.clone(),
            center,
            radius_sq,
            lambda,
            alpha,
            mu: DenseVector::zeros(d),
            iterate_sum: DenseVector::zeros(d),
            t: 0,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius_sq.sqrt()
    }

    /// Average of the iterates so far; the center before any step.
    pub fn average(&self) -> DenseVector {
        if self.t == 0 {
            return self.center.clone();
        }
        let n = self.t as f64;
        self.iterate_sum.iter().map(|v| v / n).collect()
    }
}

/// Why an epoch ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Ran its planned length.
    Planned,
    /// The halving test fired.
    Halved,
    /// The halving test did not fire within the iteration cap.
    Overrun,
    /// The run's budget ran out first.
    BudgetExhausted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Planned => "planned",
            Termination::Halved => "halved",
            Termination::Overrun => "overrun",
            Termination::BudgetExhausted => "budget",
        }
    }
}

/// Stop once `‖θ̄ − θ*‖_p² ≤ target_sq`.
#[derive(Debug, Clone, Copy)]
pub struct HalvingRule<'a> {
    pub theta_star: &'a [f64],
    pub target_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub average: DenseVector,
    pub iterations: u64,
    pub halved: bool,
    /// Largest `‖θ_t − c‖_p / R` seen.
    pub max_feasibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    /// Number of gradient queries made so far in the run.
    pub iteration: u64,
    pub epoch: usize,
    pub error_l2_sq: f64,
    pub error_l1: f64,
    pub radius: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub index: usize,
    pub radius_sq: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub iterations: u64,
    pub max_feasibility: f64,
    pub termination: Termination,
}

/// What the trace's error columns measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// `‖θ_t − θ*‖₂²` and `‖θ_t − θ*‖₁`.
    ParameterError,
    /// Mean held-out loss in the first error column; the second is NaN.
    HeldOutLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub stride: u64,
    pub metric: MetricKind,
    pub points: Vec<TracePoint>,
    pub epochs: Vec<EpochRecord>,
}

impl RunTrace {
    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }
}

/// Reference used to score iterates.
#[derive(Debug, Clone)]
pub enum Metric<'a> {
    GroundTruth(&'a [f64]),
    HeldOut { loss: LossKind, pool: &'a [Sample] },
}

impl Metric<'_> {
    fn kind(&self) -> MetricKind {
        match self {
            Metric::GroundTruth(_) => MetricKind::ParameterError,
            Metric::HeldOut { .. } => MetricKind::HeldOutLoss,
        }
    }

    fn evaluate(&self, theta: &[f64]) -> (f64, f64) {
        match self {
            Metric::GroundTruth(star) => {
                let mut l2 = 0.0;
                let mut l1 = 0.0;
                for (a, b) in theta.iter().zip(star.iter()) {
                    let e = a - b;
                    l2 += e * e;
                    l1 += e.abs();
                }
                (l2, l1)
            }
            Metric::HeldOut { loss, pool } => {
                let total: f64 = pool.iter().map(|s| loss_value(*loss, theta, s)).sum();
                (total / pool.len().max(1) as f64, f64::NAN)
            }
        }
    }
}

/// Samples iterates into a [`RunTrace`] on a fixed stride plus forced points.
#[derive(Debug)]
pub struct TraceRecorder<'a> {
    metric: Metric<'a>,
    iteration: u64,
    trace: RunTrace,
}

impl<'a> TraceRecorder<'a> {
    pub fn new(stride: u64, metric: Metric<'a>) -> Self {
        TraceRecorder {
            trace: RunTrace {
                stride: stride.max(1),
                metric: metric.kind(),
                points: Vec::new(),
                epochs: Vec::new(),
            },
            metric,
            iteration: 0,
        }
    }

    /// Global iteration count so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn stride(&self) -> u64 {
        self.trace.stride
    }

    pub(crate) fn tick(&mut self) {
        self.iteration += 1;
    }

    /// Records `theta` if the current iteration is on the stride grid.
    pub fn observe(&mut self, epoch: usize, theta: &[f64], radius: f64, lambda: f64) {
        if self.iteration.is_multiple_of(self.trace.stride) {
            self.force(epoch, theta, radius, lambda);
        }
    }

    /// Records `theta` at the current iteration unless already recorded.
    pub fn force(&mut self, epoch: usize, theta: &[f64], radius: f64, lambda: f64) {
        if self.iteration == 0 {
            return;
        }
        if self.trace.points.last().map(|p| p.iteration) == Some(self.iteration) {
            return;
        }
        let (error_l2_sq, error_l1) = self.metric.evaluate(theta);
        self.trace.points.push(TracePoint {
            iteration: self.iteration,
            epoch,
            error_l2_sq,
            error_l1,
            radius,
            lambda,
        });
    }

    pub fn push_epoch(&mut self, record: EpochRecord) {
        self.trace.epochs.push(record);
    }

    pub fn finish(self) -> RunTrace {
        self.trace
    }
}

/// Runs up to `max_iters` iterations of the epoch in `state`.
///
/// With a stop rule the epoch ends at the first iteration whose running
/// average satisfies it. `max_iters = 0` leaves the state untouched and
/// returns the center.
pub fn run_epoch<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    state: &mut EpochState,
    max_iters: u64,
    geom: &LpGeometry,
    recorder: &mut TraceRecorder<'_>,
    stop: Option<&HalvingRule<'_>>,
) -> Result<EpochOutcome> {
    let d = geom.dim();
    for (name, v) in [
        ("center", &state.center),
        ("mu", &state.mu),
        ("theta", &state.theta),
        ("iterate_sum", &state.iterate_sum),
    ] {
        if v.dim() != d {
            return Err(Error::InvalidParameter(format!(
                "epoch {name} has dimension {}, geometry has {d}",
                v.dim()
            )));
        }
    }
    if oracle.dim() != d {
        return Err(Error::Shape {
            expected: d,
            actual: oracle.dim(),
        });
    }
    let radius = state.radius();
    let mut grad = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut max_feasibility = 0.0_f64;
    let mut halved = false;
    let mut used = 0;
    while used < max_iters {
        oracle.query_into(&state.theta, &mut grad)?;
        for ((m, g), th) in state.mu.iter_mut().zip(&grad).zip(state.theta.iter()) {
            *m += g + state.lambda * sign(*th);
        }
        let step = state.alpha / ((state.t + 1) as f64).sqrt();
        dual_averaging_step_into(
            &state.mu,
            &state.center,
            radius,
            step,
            geom,
            &mut state.theta,
        )?;
        for (s, th) in state.iterate_sum.iter_mut().zip(state.theta.iter()) {
            *s += th;
        }
        state.t += 1;
        used += 1;
        recorder.tick();

        max_feasibility =
            max_feasibility.max(geom.p_distance(&state.theta, &state.center) / radius);
        recorder.observe(state.index, &state.theta, radius, state.lambda);

        if let Some(rule) = stop {
            let n = state.t as f64;
            for (a, s) in avg.iter_mut().zip(state.iterate_sum.iter()) {
                *a = s / n;
            }
            let dist = geom.p_distance(&avg, rule.theta_star);
            if dist * dist <= rule.target_sq {
                halved = true;
                break;
            }
        }
    }
    if used > 0 {
        recorder.force(state.index, &state.theta, radius, state.lambda);
    }
    Ok(EpochOutcome {
        average: state.average(),
        iterations: used,
        halved,
        max_feasibility,
    })
}

/// `‖a − b‖₁`.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dual_averaging_step, l1_subgradient};
    use crate::oracles::{stream_rng, ProblemInstance, SampleOracle};

    /// Oracle returning a fixed sequence of gradients and remembering queries.
    struct Scripted {
        dim: usize,
        grads: Vec<Vec<f64>>,
        calls: usize,
        seen: Vec<Vec<f64>>,
    }

    impl GradientOracle for Scripted {
        fn dim(&self) -> usize {
            self.dim
        }

        fn query_into(&mut self, theta: &[f64], out: &mut [f64]) -> Result<()> {
            self.seen.push(theta.to_vec());
            let g = &self.grads[self.calls % self.grads.len()];
            out.copy_from_slice(g);
            self.calls += 1;
            Ok(())
        }
    }

    fn zero_star(d: usize) -> Vec<f64> {
        vec![0.0; d]
    }

    #[test]
    fn zero_dynamics_stay_at_center() {
        let geom = LpGeometry::new(4).unwrap();
        let star = zero_star(4);
        let mut rec = TraceRecorder::new(1, Metric::GroundTruth(&star));
        let center = DenseVector::from(vec![0.5, -0.25, 0.0, 1.0]);
        let mut state = EpochState::new(1, center.clone(), 1.0, 0.0, 1.0);
        let mut oracle = Scripted {
            dim: 4,
            grads: vec![vec![0.0; 4]],
            calls: 0,
            seen: vec![],
        };
        let out = run_epoch(&mut oracle, &mut state, 25, &geom, &mut rec, None).unwrap();
        assert_eq!(out.iterations, 25);
        assert_eq!(out.average, center);
        assert!(oracle
            .seen
            .iter()
            .all(|t| t.as_slice() == center.as_slice()));
        assert_eq!(rec.finish().points.len(), 25);
    }

    #[test]
    fn single_iteration_unrolls() {
        let geom = LpGeometry::new(3).unwrap();
        let star = zero_star(3);
        let mut rec = TraceRecorder::new(1, Metric::GroundTruth(&star));
        let center = DenseVector::from(vec![0.2, -0.1, 0.0]);
        let g0 = vec![1.0, 2.0, -0.5];
        let lambda = 0.3;
        let mut state = EpochState::new(1, center.clone(), 0.49, lambda, 0.8);
        let mut oracle = Scripted {
            dim: 3,
            grads: vec![g0.clone()],
            calls: 0,
            seen: vec![],
        };
        let out = run_epoch(&mut oracle, &mut state, 1, &geom, &mut rec, None).unwrap();
        let v0 = l1_subgradient(&center);
        let mu1: Vec<f64> = g0
            .iter()
            .zip(v0.iter())
            .map(|(g, v)| g + lambda * v)
            .collect();
        let want = dual_averaging_step(&mu1, &center, 0.7, 0.8, &geom).unwrap();
        assert_eq!(state.mu.as_slice(), mu1.as_slice());
        assert_eq!(out.average, want);
        assert_eq!(state.theta, want);
    }

    #[test]
    fn dual_average_replays_exactly() {
        let geom = LpGeometry::new(5).unwrap();
        let star = zero_star(5);
        let mut rec = TraceRecorder::new(3, Metric::GroundTruth(&star));
        let grads = vec![
            vec![0.1, -0.4, 2.0, 0.0, 1.5],
            vec![-1.0, 0.25, 0.5, 3.0, -2.0],
            vec![0.7, 0.7, -0.7, 0.1, 0.0],
        ];
        let mut oracle = Scripted {
            dim: 5,
            grads: grads.clone(),
            calls: 0,
            seen: vec![],
        };
        let lambda = 0.05;
        let mut state = EpochState::new(1, DenseVector::zeros(5), 4.0, lambda, 1.3);
        run_epoch(&mut oracle, &mut state, 40, &geom, &mut rec, None).unwrap();
        let mut mu = vec![0.0; 5];
        for (k, theta) in oracle.seen.iter().enumerate() {
            let g = &grads[k % grads.len()];
            for j in 0..5 {
                mu[j] += g[j] + lambda * sign(theta[j]);
            }
        }
        assert_eq!(state.mu.as_slice(), mu.as_slice());
    }

    #[test]
    fn zero_budget_is_noop() {
        let geom = LpGeometry::new(3).unwrap();
        let star = zero_star(3);
        let mut rec = TraceRecorder::new(1, Metric::GroundTruth(&star));
        let center = DenseVector::from(vec![1.0, 2.0, 3.0]);
        let mut state = EpochState::new(1, center.clone(), 1.0, 0.1, 1.0);
        let mut oracle = Scripted {
            dim: 3,
            grads: vec![vec![1.0; 3]],
            calls: 0,
            seen: vec![],
        };
        let out = run_epoch(&mut oracle, &mut state, 0, &geom, &mut rec, None).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.average, center);
        assert_eq!(oracle.calls, 0);
        assert!(rec.finish().points.is_empty());
    }

    fn ls_oracle(d: usize, seed: u64) -> SampleOracle {
        let mut star = vec![0.0; d];
        star[0] = 1.0;
        star[3] = -1.0;
        let inst = ProblemInstance::new(star.into(), 1.0, 0.5, LossKind::LeastSquares).unwrap();
        SampleOracle::fresh(inst, stream_rng(seed, 0))
    }

    #[test]
    fn iterates_and_average_stay_feasible() {
        let d = 50;
        let geom = LpGeometry::new(d).unwrap();
        let mut oracle = ls_oracle(d, 3);
        let star = oracle.ground_truth().unwrap().to_vec();
        let mut rec = TraceRecorder::new(1, Metric::GroundTruth(&star));
        let center = DenseVector::from((0..d).map(|j| 0.01 * j as f64).collect::<Vec<_>>());
        let mut state = EpochState::new(1, center.clone(), 2.0, 0.2, 10.0);
        let out = run_epoch(&mut oracle, &mut state, 2000, &geom, &mut rec, None).unwrap();
        assert!(out.max_feasibility <= 1.0 + 1e-9);
        assert!(geom.p_distance(&out.average, &center) <= 2f64.sqrt() * (1.0 + 1e-9));
        assert!(
            l1_distance(&out.average, &center) <= std::f64::consts::E * 2f64.sqrt() * (1.0 + 1e-9)
        );
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let d = 20;
        let geom = LpGeometry::new(d).unwrap();
        let run = || {
            let mut oracle = ls_oracle(d, 99);
            let star = oracle.ground_truth().unwrap().to_vec();
            let mut rec = TraceRecorder::new(7, Metric::GroundTruth(&star));
            let mut state = EpochState::new(1, DenseVector::zeros(d), 4.0, 0.1, 1.0);
            let out = run_epoch(&mut oracle, &mut state, 300, &geom, &mut rec, None).unwrap();
            (out.average, rec.finish())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn halving_rule_stops_early() {
        let d = 30;
        let geom = LpGeometry::new(d).unwrap();
        let mut oracle = ls_oracle(d, 5);
        let star = oracle.ground_truth().unwrap().to_vec();
        let mut rec = TraceRecorder::new(1, Metric::GroundTruth(&star));
        let center = DenseVector::zeros(d);
        let start = geom.p_distance(&center, &star);
        let rule = HalvingRule {
            theta_star: &star,
            target_sq: start * start / 2.0,
        };
        let mut state = EpochState::new(1, center, 4.0, 0.05, 2.0);
        let out = run_epoch(
            &mut oracle,
            &mut state,
            100_000,
            &geom,
            &mut rec,
            Some(&rule),
        )
        .unwrap();
        assert!(out.halved);
        assert!(out.iterations < 100_000);
        let end = geom.p_distance(&out.average, &star);
        assert!(end * end <= start * start / 2.0);
    }

    #[test]
    fn trace_grid_and_forced_points() {
        let star = zero_star(3);
        let mut rec = TraceRecorder::new(4, Metric::GroundTruth(&star));
        for _ in 0..10 {
            rec.tick();
            rec.observe(1, &[1.0, 0.0, 0.0], 1.0, 0.0);
        }
        rec.force(1, &[1.0, 0.0, 0.0], 1.0, 0.0);
        rec.force(1, &[1.0, 0.0, 0.0], 1.0, 0.0);
        let iters: Vec<u64> = rec.finish().points.iter().map(|p| p.iteration).collect();
        assert_eq!(iters, vec![4, 8, 10]);
    }

    #[test]
    fn noiseless_single_sample_gap_shrinks() {
        // f(θ) = (⟨x, θ⟩ − y)²/2 on one fixed sample; the gap of the average
        // must shrink between 10² and 10⁴ iterations
        let d = 10;
        let geom = LpGeometry::new(d).unwrap();
        let mut star = vec![0.0; d];
        star[1] = 0.5;
        let inst =
            ProblemInstance::new(star.clone().into(), 1.0, 0.0, LossKind::LeastSquares).unwrap();
        let sample = inst.sample(&mut stream_rng(1, 0));
        let pool = vec![sample.clone()];
        let f = |th: &[f64]| loss_value(LossKind::LeastSquares, th, &sample);
        let gap_at = |t: u64| {
            let mut oracle =
                SampleOracle::finite_pool(inst.clone(), pool.clone(), stream_rng(1, 1)).unwrap();
            let mut rec = TraceRecorder::new(t, Metric::GroundTruth(&star));
            let mut state = EpochState::new(1, DenseVector::zeros(d), 1.0, 0.0, 1.0);
            let out = run_epoch(&mut oracle, &mut state, t, &geom, &mut rec, None).unwrap();
            f(&out.average) - f(&star)
        };
        let early = gap_at(100);
        let late = gap_at(10_000);
        assert!(late < early, "{late} vs {early}");
    }

    #[test]
    fn default_stride_targets_about_500_points() {
        assert_eq!(default_stride(20_000), 40);
        assert_eq!(default_stride(100), 1);
    }
}
