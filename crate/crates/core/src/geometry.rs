//! ℓp geometry for the dual-averaging prox step.
//!
//! The prox function is `ψ(θ) = ‖θ − c‖_p² / (2(p−1)R²)` with
//! `p = 2 ln d / (2 ln d − 1)`, which makes `ψ` strongly convex with respect
//! to the ℓ1 norm. Minimizing `η⟨μ, θ⟩ + ψ(θ)` over the ball
//! `‖θ − c‖_p ≤ R` has a closed form, so every step costs `O(d)`.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Dense real vector; carrier for iterates, dual averages and gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        DenseVector(v)
    }
}

impl From<&[f64]> for DenseVector {
    fn from(v: &[f64]) -> Self {
        DenseVector(v.to_vec())
    }
}

impl FromIterator<f64> for DenseVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        DenseVector(iter.into_iter().collect())
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Exponents and constants of the ℓp prox geometry for a given dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpGeometry {
    dim: usize,
    p: f64,
    q: f64,
    a_prox: f64,
}

impl LpGeometry {
    /// Geometry with `p = 2 ln d/(2 ln d − 1)`, `q = 2 ln d`, `A_ψ = e ln d`.
    pub fn new(dim: usize) -> Result<Self> {
        let (p, q) = conjugate_exponents(dim)?;
        Ok(LpGeometry {
            dim,
            p,
            q,
            a_prox: std::f64::consts::E * (dim as f64).ln(),
        })
    }

    /// Geometry with an explicit prox exponent `p ∈ (1, 2]`, used by
    /// verification code that wants e.g. the Euclidean case `p = 2`.
    pub fn with_exponent(dim: usize, p: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(dim));
        }
        if !(p > 1.0 && p <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "prox exponent p = {p} outside (1, 2]"
            )));
        }
        Ok(LpGeometry {
            dim,
            p,
            q: p / (p - 1.0),
            a_prox: std::f64::consts::E * (dim as f64).ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Upper bound `A_ψ` on the prox function over the unit ℓ1 ball.
    pub fn a_prox(&self) -> f64 {
        self.a_prox
    }

    pub fn p_norm(&self, x: &[f64]) -> f64 {
        lp_norm(x, self.p)
    }

    pub fn q_norm(&self, x: &[f64]) -> f64 {
        lp_norm(x, self.q)
    }

    /// `‖a − b‖_p` without allocating.
    pub fn p_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        scaled_power_norm(a.iter().zip(b).map(|(x, y)| x - y), self.p)
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        check_dim(self.dim, v.len())
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}

/// `(p, q)` with `p = 2 ln d/(2 ln d − 1)` and `q = 2 ln d`.
pub fn conjugate_exponents(dim: usize) -> Result<(f64, f64)> {
    if dim < 3 {
        return Err(Error::InvalidDimension(dim));
    }
    let q = 2.0 * (dim as f64).ln();
    Ok((q / (q - 1.0), q))
}

/// ℓp norm for `p ≥ 1`, computed on max-scaled entries so large exponents
/// neither overflow nor underflow.
pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    scaled_power_norm(x.iter().copied(), p)
}

fn scaled_power_norm<I>(values: I, p: f64) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let scale = values.clone().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = values.map(|v| (v.abs() / scale).powf(p)).sum();
    scale * sum.powf(1.0 / p)
}

pub fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// `ψ_{c,R}(θ) = ‖θ − c‖_p² / (2(p−1)R²)`.
pub fn prox_value(theta: &[f64], center: &[f64], radius: f64, geom: &LpGeometry) -> Result<f64> {
    geom.check(theta)?;
    geom.check(center)?;
    positive("radius", radius)?;
    let dist = geom.p_distance(theta, center);
    Ok(dist * dist / (2.0 * (geom.p - 1.0) * radius * radius))
}

/// Exact minimizer of `η⟨μ, θ⟩ + ψ_{c,R}(θ)` over `‖θ − c‖_p ≤ R`.
pub fn dual_averaging_step(
    mu: &[f64],
    center: &[f64],
    radius: f64,
    eta: f64,
    geom: &LpGeometry,
) -> Result<DenseVector> {
    let mut out = DenseVector::zeros(geom.dim);
    dual_averaging_step_into(mu, center, radius, eta, geom, &mut out)?;
    Ok(out)
}

/// In-place form of [`dual_averaging_step`]; `out` is overwritten.
///
/// With `u = μ/‖μ‖_∞` the update reads
/// `θ = c − s · sign(μ) ⊙ |u|^{q−1}` where
/// `s = (p−1) R² η ‖μ‖_∞ ‖u‖_q^{2−q} / (1 + ξ)` and
/// `ξ = max{0, (p−1) η ‖μ‖_q R − 1}`. The multiplier `ξ` is positive exactly
/// when the unconstrained minimizer leaves the ball, in which case the
/// result lands on its boundary.
pub fn dual_averaging_step_into(
    mu: &[f64],
    center: &[f64],
    radius: f64,
    eta: f64,
    geom: &LpGeometry,
    out: &mut [f64],
) -> Result<()> {
    geom.check(mu)?;
    geom.check(center)?;
    geom.check(out)?;
    positive("radius", radius)?;
    positive("step size", eta)?;

    let scale = mu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        out.copy_from_slice(center);
        return Ok(());
    }
    if !scale.is_finite() {
        return Err(Error::InvalidParameter(
            "dual average has non-finite entries".into(),
        ));
    }

    let q = geom.q;
    let p = geom.p;
    // out temporarily holds |u|^{q-1}
    let mut sum_q = 0.0;
    for (o, &m) in out.iter_mut().zip(mu) {
        let u = m.abs() / scale;
        let w = if u == 0.0 { 0.0 } else { u.powf(q - 1.0) };
        sum_q += w * u;
        *o = w;
    }
    let u_qnorm = sum_q.powf(1.0 / q);
    let mu_qnorm = scale * u_qnorm;

    let xi = ((p - 1.0) * eta * mu_qnorm * radius - 1.0).max(0.0);
    let s = (p - 1.0) * radius * radius * eta * scale * u_qnorm.powf(2.0 - q) / (1.0 + xi);

    for ((o, &m), &c) in out.iter_mut().zip(mu).zip(center) {
        *o = c - s * m.signum() * *o;
    }
    Ok(())
}

/// Sign vector: `sign(θ_j)` for nonzero entries and 0 otherwise.
pub fn l1_subgradient(theta: &[f64]) -> DenseVector {
    theta.iter().map(|&v| sign(v)).collect()
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Euclidean projection onto `{x : ‖x‖₁ ≤ radius}` by sort-and-threshold.
///
/// Inputs whose ℓ1 norm is within a relative `1e−12` of the radius are
/// treated as feasible and returned unchanged, which makes the map
/// idempotent in floating point.
pub fn project_l1_ball(theta: &[f64], radius: f64) -> DenseVector {
    let mut out = DenseVector::from(theta);
    project_l1_ball_in_place(&mut out, radius);
    out
}

pub fn project_l1_ball_in_place(theta: &mut [f64], radius: f64) {
    debug_assert!(radius > 0.0);
    let norm = l1_norm(theta);
    if norm <= radius * (1.0 + 1e-12) {
        return;
    }
    let mut mags: Vec<f64> = theta.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));

    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - radius) / (k + 1) as f64;
        if m > t {
            threshold = t;
        } else {
            break;
        }
    }
    for v in theta.iter_mut() {
        *v = sign(*v) * (v.abs() - threshold).max(0.0);
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn exponents_for_small_and_large_dimensions() {
        let (p, q) = conjugate_exponents(3).unwrap();
        assert!((p - 1.835_265).abs() < 1e-6, "p = {p}");
        assert!((q - 2.197_22).abs() < 1e-5, "q = {q}");

        let (p, q) = conjugate_exponents(20_000).unwrap();
        assert!((p - 1.053_17).abs() < 1e-5, "p = {p}");
        assert!((q - 19.807_0).abs() < 1e-4, "q = {q}");
    }

    #[test]
    fn dimension_below_three_is_rejected() {
        assert!(matches!(
            conjugate_exponents(2),
            Err(Error::InvalidDimension(2))
        ));
        assert!(LpGeometry::new(0).is_err());
    }

    #[test]
    fn geometry_constants() {
        let g = LpGeometry::new(1000).unwrap();
        assert!(close(g.q(), 2.0 * 1000f64.ln(), 1e-15));
        assert!(close(g.a_prox(), std::f64::consts::E * 1000f64.ln(), 1e-15));
    }

    #[test]
    fn prox_value_examples() {
        let g = LpGeometry::new(3).unwrap();
        let c = [0.0; 3];
        assert_eq!(prox_value(&c, &c, 1.0, &g).unwrap(), 0.0);
        let v = prox_value(&[1.0, 0.0, 0.0], &c, 1.0, &g).unwrap();
        assert!((v - 0.598_612).abs() < 1e-6, "{v}");
        assert!(close(v, 1.0 / (2.0 * (g.p() - 1.0)), 1e-14));
        assert!(matches!(
            prox_value(&[1.0, 0.0], &c, 1.0, &g),
            Err(Error::Shape { .. })
        ));
        assert!(prox_value(&c, &c, 0.0, &g).is_err());
    }

    #[test]
    fn prox_value_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [3usize, 7, 40] {
            let g = LpGeometry::new(d).unwrap();
            for _ in 0..20 {
                let th: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let c: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let r = rng.random_range(0.1..3.0);
                // unscaled power sum, no max-normalization
                let s: f64 = th
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b).abs().powf(g.p()))
                    .sum();
                let want = s.powf(2.0 / g.p()) / (2.0 * (g.p() - 1.0) * r * r);
                let got = prox_value(&th, &c, r, &g).unwrap();
                assert!(close(got, want, 1e-12), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_dual_returns_center() {
        let g = LpGeometry::new(5).unwrap();
        let c = [0.5, -1.0, 2.0, 0.0, 3.0];
        let th = dual_averaging_step(&[0.0; 5], &c, 1.0, 1.0, &g).unwrap();
        assert_eq!(th.as_slice(), &c);
    }

    #[test]
    fn euclidean_hand_example() {
        let g = LpGeometry::with_exponent(3, 2.0).unwrap();
        let th = dual_averaging_step(&[3.0, 4.0, 0.0], &[0.0; 3], 1.0, 1.0, &g).unwrap();
        assert!((th[0] + 0.6).abs() < 1e-15);
        assert!((th[1] + 0.8).abs() < 1e-15);
        assert_eq!(th[2], 0.0);
        assert!((lp_norm(&th, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn step_matches_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [3usize, 10, 50] {
            let g = LpGeometry::new(d).unwrap();
            for _ in 0..10 {
                let inst = reference::random_prox_instance(&mut rng, d);
                let th =
                    dual_averaging_step(&inst.mu, &inst.center, inst.radius, inst.eta, &g).unwrap();
                let num = reference::prox_step_projected_gradient(&inst, &g, 1e-10, 20_000);
                assert!(num.converged);
                let gap = th
                    .iter()
                    .zip(&num.theta)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(gap < 1e-6, "d={d}: ell_inf gap {gap}");
                let obj = reference::prox_objective(&inst, &g, &th);
                assert!((obj - num.objective).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn step_shape_errors() {
        let g = LpGeometry::new(4).unwrap();
        assert!(dual_averaging_step(&[1.0; 3], &[0.0; 4], 1.0, 1.0, &g).is_err());
        assert!(dual_averaging_step(&[1.0; 4], &[0.0; 4], -1.0, 1.0, &g).is_err());
        assert!(dual_averaging_step(&[1.0; 4], &[0.0; 4], 1.0, 0.0, &g).is_err());
    }

    #[test]
    fn step_survives_huge_dual_averages() {
        let g = LpGeometry::new(20_000).unwrap();
        let mut mu = vec![0.0; 20_000];
        mu[0] = 1e200;
        mu[1] = -3e199;
        let c = vec![0.0; 20_000];
        let th = dual_averaging_step(&mu, &c, 2.0, 1.0, &g).unwrap();
        assert!(th.iter().all(|v| v.is_finite()));
        assert!(g.p_norm(&th) <= 2.0 * (1.0 + 1e-9));
    }

    #[test]
    fn l1_subgradient_examples() {
        assert_eq!(l1_subgradient(&[0.0, 0.0]).as_slice(), &[0.0, 0.0]);
        assert_eq!(
            l1_subgradient(&[1.5, -2.0, 0.0]).as_slice(),
            &[1.0, -1.0, 0.0]
        );
    }

    #[test]
    fn l1_projection_examples() {
        assert_eq!(project_l1_ball(&[0.2, -0.1], 1.0).as_slice(), &[0.2, -0.1]);
        assert_eq!(project_l1_ball(&[2.0, 0.0], 1.0).as_slice(), &[1.0, 0.0]);
        let y = project_l1_ball(&[3.0, -1.0, 0.5], 2.0);
        assert!((l1_norm(&y) - 2.0).abs() < 1e-12);
        assert_eq!(y.as_slice(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn l1_projection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r = rng.random_range(0.2..2.0);
            let fast = project_l1_ball(&x, r);
            let slow = reference::project_l1_ball_enumerate(&x, r);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-6, "{fast:?} vs {slow:?}");
            }
        }
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (3usize..60).prop_flat_map(|d| proptest::collection::vec(-5.0f64..5.0, d))
    }

    proptest! {
        #[test]
        fn conjugacy(d in 3usize..1_000_000) {
            let (p, q) = conjugate_exponents(d).unwrap();
            prop_assert!((1.0 / p + 1.0 / q - 1.0).abs() < 1e-12);
        }

        #[test]
        fn step_is_feasible(mu in vec_strategy(), r in 0.01f64..10.0, log_eta in -6.0f64..6.0) {
            let d = mu.len();
            let g = LpGeometry::new(d).unwrap();
            let c: Vec<f64> = (0..d).map(|j| (j as f64).sin()).collect();
            let th = dual_averaging_step(&mu, &c, r, log_eta.exp(), &g).unwrap();
            prop_assert!(g.p_distance(&th, &c) <= r * (1.0 + 1e-9));
        }

        #[test]
        fn step_depends_on_eta_mu_product(mu in vec_strategy(), r in 0.1f64..5.0,
                                          eta in 0.01f64..10.0, k in 0.01f64..100.0) {
            let d = mu.len();
            let g = LpGeometry::new(d).unwrap();
            let c = vec![0.25; d];
            let a = dual_averaging_step(&mu, &c, r, eta, &g).unwrap();
            let scaled: Vec<f64> = mu.iter().map(|v| v * k).collect();
            let b = dual_averaging_step(&scaled, &c, r, eta / k, &g).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn step_beats_random_feasible_points(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(3..12);
            let g = LpGeometry::new(d).unwrap();
            let inst = reference::random_prox_instance(&mut rng, d);
            let th = dual_averaging_step(&inst.mu, &inst.center, inst.radius, inst.eta, &g).unwrap();
            let best = reference::prox_objective(&inst, &g, &th);
            for _ in 0..10_000 {
                let z = reference::random_feasible_point(&mut rng, &inst.center, inst.radius, &g);
                prop_assert!(best <= reference::prox_objective(&inst, &g, &z) + 1e-12);
            }
        }

        #[test]
        fn projection_is_idempotent(x in vec_strategy(), r in 0.01f64..20.0) {
            let once = project_l1_ball(&x, r);
            let twice = project_l1_ball(&once, r);
            prop_assert_eq!(&once, &twice);
            prop_assert!(l1_norm(&once) <= r * (1.0 + 1e-9));
        }

        #[test]
        fn norm_sandwich(x in vec_strategy()) {
            let g = LpGeometry::new(x.len()).unwrap();
            let lp = g.p_norm(&x);
            let l1 = l1_norm(&x);
            prop_assert!(lp <= l1 * (1.0 + 1e-12));
            prop_assert!(l1 <= std::f64::consts::E * lp * (1.0 + 1e-12));
        }

        #[test]
        fn subgradient_identity(x in vec_strategy()) {
            let v = l1_subgradient(&x);
            prop_assert!(v.iter().all(|s| s.abs() <= 1.0));
            let ip: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert!((ip - l1_norm(&x)).abs() <= 1e-12 * (1.0 + l1_norm(&x)));
        }
    }
}
