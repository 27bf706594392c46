//! Slow reference solvers used to validate the fast kernels.
//!
//! Nothing here shares code with [`crate::geometry`] beyond the geometry
//! constants: the prox step is re-solved by projected gradient with a
//! numerically computed ℓp-ball projection, and the ℓ1-ball projection is
//! re-solved by enumerating faces of the ball. Both are far too slow for the
//! optimization loop and exist for `prox-check`, the self-test and the test
//! suites.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::LpGeometry;

/// One instance of the constrained prox step.
#[derive(Debug, Clone)]
pub struct ProxInstance {
    pub mu: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub eta: f64,
}

/// Draws an instance that lands on the ball boundary or strictly inside it
/// with comparable frequency.
pub fn random_prox_instance<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> ProxInstance {
    let mu = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let center = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    ProxInstance {
        mu,
        center,
        radius: rng.random_range(0.1..2.0),
        eta: rng.random_range(-3.0f64..2.0).exp(),
    }
}

fn raw_p_norm(x: &[f64], p: f64) -> f64 {
    x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

/// `η⟨μ, θ⟩ + ‖θ − c‖_p² / (2(p−1)R²)`, evaluated directly.
pub fn prox_objective(inst: &ProxInstance, geom: &LpGeometry, theta: &[f64]) -> f64 {
    let p = geom.p();
    let disp: Vec<f64> = theta.iter().zip(&inst.center).map(|(a, b)| a - b).collect();
    let lin: f64 = inst.mu.iter().zip(theta).map(|(a, b)| a * b).sum();
    let n = raw_p_norm(&disp, p);
    inst.eta * lin + n * n / (2.0 * (p - 1.0) * inst.radius * inst.radius)
}

/// Uniform radial draw inside `‖θ − c‖_p ≤ R`: Gaussian direction normalized
/// in ℓp, radius uniform on `[0, R]`.
pub fn random_feasible_point<R: Rng + ?Sized>(
    rng: &mut R,
    center: &[f64],
    radius: f64,
    geom: &LpGeometry,
) -> Vec<f64> {
    let dir: Vec<f64> = center
        .iter()
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = raw_p_norm(&dir, geom.p());
    let r = radius * rng.random::<f64>();
    center
        .iter()
        .zip(&dir)
        .map(|(c, v)| c + r * v / n)
        .collect()
}

#[derive(Debug, Clone)]
pub struct NumericalMinimizer {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Diagonally scaled projected gradient with Armijo backtracking on the
/// prox-step objective.
///
/// Works in the displacement `z = θ − c`. The metric is the diagonal of the
/// Hessian of the quadratic-norm term, which is what makes coordinates with
/// tiny optimal magnitude converge at the same pace as the large ones; when
/// the full diagonal-plus-rank-one Newton step stays feasible it is used
/// instead. The start point is a generic interior point. The run stops once
/// the unit-step Euclidean projected gradient `‖P(z − ∇F(z)) − z‖_∞` drops
/// below `tol`, or once the scaled step does while the objective has stopped
/// moving at rounding level (coordinates whose optimum is near zero carry
/// huge curvature and a Euclidean gradient that never looks small).
pub fn prox_step_projected_gradient(
    inst: &ProxInstance,
    geom: &LpGeometry,
    tol: f64,
    max_iter: usize,
) -> NumericalMinimizer {
    let p = geom.p();
    let r = inst.radius;
    let dim = inst.mu.len();
    let scale = 1.0 / ((p - 1.0) * r * r);
    let objective = |z: &[f64]| -> f64 {
        let lin: f64 = inst.mu.iter().zip(z).map(|(a, b)| a * b).sum();
        let n = raw_p_norm(z, p);
        inst.eta * lin + 0.5 * scale * n * n
    };
    let gradient = |z: &[f64]| -> Vec<f64> {
        let n = raw_p_norm(z, p);
        z.iter()
            .zip(&inst.mu)
            .map(|(&zj, &mj)| {
                let reg = if n == 0.0 || zj == 0.0 {
                    0.0
                } else {
                    scale * n.powf(2.0 - p) * zj.abs().powf(p - 1.0) * zj.signum()
                };
                inst.eta * mj + reg
            })
            .collect()
    };
    let hessian_diag = |z: &[f64]| -> Vec<f64> {
        let n = raw_p_norm(z, p).max(f64::MIN_POSITIVE);
        z.iter()
            .map(|&zj| {
                // zero coordinates still need a finite metric to move off zero
                let a = zj.abs().max(1e-30 * n);
                (scale * (p - 1.0) * n.powf(2.0 - p) * a.powf(p - 2.0)).clamp(1e-12, 1e280)
            })
            .collect()
    };
    let unit = vec![1.0; dim];
    let pg_norm = |z: &[f64], g: &[f64]| -> f64 {
        let trial: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - b).collect();
        project_scaled(&trial, r, p, &unit)
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };

    let start = 0.5 * r / (dim as f64).powf(1.0 / p);
    let mut z: Vec<f64> = inst
        .mu
        .iter()
        .map(|m| if *m > 0.0 { -start } else { start })
        .collect();
    let mut f = objective(&z);
    let mut g = gradient(&z);
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    while iterations <= max_iter {
        iterations += 1;
        let h = hessian_diag(&z);
        let dir = match newton_direction(&z, &g, &h, scale, p) {
            Some(d)
                if raw_p_norm(&z.iter().zip(&d).map(|(a, b)| a + b).collect::<Vec<_>>(), p)
                    <= r =>
            {
                d
            }
            _ => {
                let trial: Vec<f64> = z
                    .iter()
                    .zip(&g)
                    .zip(&h)
                    .map(|((a, b), hj)| a - b / hj)
                    .collect();
                let inv: Vec<f64> = h.iter().map(|hj| 1.0 / hj).collect();
                project_scaled(&trial, r, p, &inv)
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| a - b)
                    .collect()
            }
        };
        let current = pg_norm(&z, &g);
        let scaled = dir.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if current <= tol || (scaled <= tol && stalled) {
            converged = true;
            break;
        }
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let (next, f_next, g_next) = loop {
            let cand: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let fc = objective(&cand);
            let gc = gradient(&cand);
            if fc <= f + 1e-4 * step * slope || step < 1e-20 {
                break (cand, fc, gc);
            }
            // below the objective's rounding level only the gradient is informative
            if (fc - f).abs() <= 1e-13 * f.abs().max(1.0) && pg_norm(&cand, &gc) < current {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        stalled = (f - f_next).abs() <= 1e-13 * f.abs().max(1.0);
        z = next;
        f = f_next;
        g = g_next;
    }
    let theta: Vec<f64> = z.iter().zip(&inst.center).map(|(a, b)| a + b).collect();
    NumericalMinimizer {
        objective: prox_objective(inst, geom, &theta),
        theta,
        iterations,
        converged,
    }
}

/// Newton direction for the diagonal-plus-rank-one Hessian
/// `D + c u uᵀ` of `(scale/2)‖z‖_p²`, `u_j = |z_j|^{p−1} sign(z_j)`, via
/// Sherman-Morrison.
fn newton_direction(z: &[f64], g: &[f64], diag: &[f64], scale: f64, p: f64) -> Option<Vec<f64>> {
    let n = raw_p_norm(z, p);
    if n == 0.0 {
        return None;
    }
    let c = scale * (2.0 - p) * n.powf(2.0 - 2.0 * p);
    let u: Vec<f64> = z
        .iter()
        .map(|v| v.abs().powf(p - 1.0) * v.signum())
        .collect();
    let dg: Vec<f64> = g.iter().zip(diag).map(|(a, h)| a / h).collect();
    let du: Vec<f64> = u.iter().zip(diag).map(|(a, h)| a / h).collect();
    let u_dg: f64 = u.iter().zip(&dg).map(|(a, b)| a * b).sum();
    let u_du: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
    let k = c * u_dg / (1.0 + c * u_du);
    let d: Vec<f64> = dg.iter().zip(&du).map(|(a, b)| -(a - k * b)).collect();
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Euclidean projection onto `{z : ‖z‖_p ≤ R}` for `p ∈ (1, 2]`.
///
/// KKT gives `|z_j| = s_j(ν)` with `s + ν p s^{p−1} = |v_j|`; each `s_j` and
/// the multiplier `ν` are found by bracketed root finding.
pub fn project_lp_ball_numeric(v: &[f64], radius: f64, p: f64) -> Vec<f64> {
    project_scaled(v, radius, p, &vec![1.0; v.len()])
}

/// Projection onto the ℓp ball in the metric `Σ (x_j − v_j)²/w_j`; the
/// per-coordinate KKT equation becomes `s + ν w_j p s^{p−1} = |v_j|`.
fn project_scaled(v: &[f64], radius: f64, p: f64, weights: &[f64]) -> Vec<f64> {
    let target = radius.powf(p);
    let mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    if mags.iter().map(|a| a.powf(p)).sum::<f64>() <= target {
        return v.to_vec();
    }
    let shrink = |a: f64, w: f64, nu: f64| -> f64 {
        if a == 0.0 {
            return 0.0;
        }
        let c = nu * w * p;
        illinois(|s| s + c * s.powf(p - 1.0) - a, 0.0, a, 1e-17 * a)
    };
    let excess = |nu: f64| -> f64 {
        mags.iter()
            .zip(weights)
            .map(|(&a, &w)| shrink(a, w, nu).powf(p))
            .sum::<f64>()
            - target
    };
    let mut hi = 1.0;
    while excess(hi) > 0.0 {
        hi *= 2.0;
    }
    let nu = illinois(excess, 0.0, hi, 1e-16 * hi);
    // the bracket's feasible side keeps the result inside the ball
    let nu = if excess(nu) > 0.0 {
        nu * (1.0 + 1e-15)
    } else {
        nu
    };
    v.iter()
        .zip(&mags)
        .zip(weights)
        .map(|((x, &a), &w)| x.signum() * shrink(a, w, nu))
        .collect()
}

/// Illinois-modified regula falsi on a sign-changing bracket `[lo, hi]`.
fn illinois<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, xtol: f64) -> f64 {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return lo;
    }
    if fhi == 0.0 {
        return hi;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let mut x = (lo * fhi - hi * flo) / (fhi - flo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if (fx > 0.0) == (fhi > 0.0) {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        } else {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        }
        if hi - lo <= xtol {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Euclidean projection onto the ℓ1 ball by enumerating every face.
///
/// For each support `S` and sign pattern `σ` the candidate is
/// `y_S = x_S − t σ` with `t` chosen so `⟨σ, y_S⟩ = R`; the nearest candidate
/// that is consistent with its sign pattern wins. Exponential in the
/// dimension, intended for `d ≤ 8`.
pub fn project_l1_ball_enumerate(x: &[f64], radius: f64) -> Vec<f64> {
    let dim = x.len();
    assert!(
        dim <= 12,
        "face enumeration is exponential in the dimension"
    );
    if x.iter().map(|v| v.abs()).sum::<f64>() <= radius {
        return x.to_vec();
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for support in 1u32..(1 << dim) {
        let members: Vec<usize> = (0..dim).filter(|j| support & (1 << j) != 0).collect();
        for signs in 0u32..(1 << members.len()) {
            let sigma: Vec<f64> = (0..members.len())
                .map(|k| if signs & (1 << k) != 0 { -1.0 } else { 1.0 })
                .collect();
            let proj: f64 = members.iter().zip(&sigma).map(|(&j, s)| s * x[j]).sum();
            let t = (proj - radius) / members.len() as f64;
            let mut y = vec![0.0; dim];
            let mut ok = true;
            for (&j, &s) in members.iter().zip(&sigma) {
                y[j] = x[j] - t * s;
                if y[j] * s < 0.0 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let dist: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                best = Some((dist, y));
            }
        }
    }
    best.expect("some face is always consistent").1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lp_projection_lands_on_sphere() {
        let v = [3.0, -1.0, 0.5, 0.0];
        for p in [1.2, 1.5, 2.0] {
            let z = project_lp_ball_numeric(&v, 1.0, p);
            assert!((raw_p_norm(&z, p) - 1.0).abs() < 1e-10, "p={p}");
        }
        let z = project_lp_ball_numeric(&v, 1.0, 2.0);
        let n = raw_p_norm(&v, 2.0);
        for (a, b) in z.iter().zip(&v) {
            assert!((a - b / n).abs() < 1e-10);
        }
    }

    #[test]
    fn enumeration_axis_case() {
        assert_eq!(project_l1_ball_enumerate(&[2.0, 0.0], 1.0), vec![1.0, 0.0]);
    }
}
