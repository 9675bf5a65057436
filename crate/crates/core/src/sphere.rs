//! Spherical-cap probability functions, the cap threshold solver, the
//! sphere projection map and approximate smallest enclosing balls.

use crate::error::{Error, Result};
use crate::numeric::{adaptive_simpson, normal_pdf, normal_sf};
use crate::scalar::{dist, dist2, dot, Real};

/// Correlation geometry of two unit vectors at chord distance `s`:
/// `alpha = 1 - s^2/2`, `beta = sqrt(1 - alpha^2)`.
#[derive(Debug, Clone, Copy)]
pub struct CapParams<T: Real> {
    pub s: T,
    pub eta: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> CapParams<T> {
    pub fn new(s: T, eta: T) -> Self {
        let alpha = T::one() - s * s / T::from_f64_c(2.0);
        let beta = (T::one() - alpha * alpha).max(T::zero()).sqrt();
        CapParams { s, eta, alpha, beta }
    }
}

/// Gaussian cap mass `F(eta) = Pr[<z, u> >= eta]` for `z ~ N(0,1)^d`: the
/// exact standard normal upper tail.
pub fn cap_f<T: Real>(eta: T) -> T {
    normal_sf(eta)
}

/// Joint cap mass `G(s, eta, sigma) = Pr[<z,u> >= eta and <z,v> >= sigma]`
/// for unit vectors at chord distance `s`, computed by integrating the
/// conditional normal tail to 1e-10 absolute tolerance.
pub fn cap_g<T: Real>(s: T, eta: T, sigma: T) -> T {
    let p = CapParams::new(s, eta);
    if p.beta <= T::zero() {
        return if p.alpha > T::zero() {
            // s = 0: u = v.
            cap_f(eta.max(sigma))
        } else {
            // s = 2: antipodal, z*v = -z*u.
            (cap_f(eta) - cap_f(-sigma)).max(T::zero())
        };
    }
    let hi = eta.max(T::zero()) + T::from_f64_c(12.0);
    if eta >= hi {
        return T::zero();
    }
    let integrand = move |t: T| normal_pdf(t) * normal_sf((sigma - p.alpha * t) / p.beta);
    let coarse = adaptive_simpson(&integrand, eta, hi, T::from_f64_c(1e-10));
    // Small masses need relative accuracy (the eta solver divides by G), so
    // refine once the 1e-10 absolute pass has located the scale.
    if coarse > T::zero() && coarse < T::from_f64_c(1e-7) {
        adaptive_simpson(&integrand, eta, hi, coarse * T::from_f64_c(1e-6))
    } else {
        coarse
    }
}

/// Symmetric shorthand `G(s, eta) := G(s, eta, eta)`.
pub fn cap_g_sym<T: Real>(s: T, eta: T) -> T {
    cap_g(s, eta, eta)
}

pub const ETA_MAX: f64 = 40.0;

/// Solves `F(eta) / G(s, eta, eta) = target_ratio` by bisection to 1e-9
/// relative tolerance; the ratio is strictly increasing in `eta` for
/// `s` in (0, 2). If the ratio at `eta = 0` already meets the target, the
/// smallest admissible threshold `eta = 0` is returned.
pub fn solve_eta<T: Real>(s: T, target_ratio: T) -> Result<T> {
    if target_ratio <= T::one() || s <= T::zero() || s >= T::from_f64_c(2.0) {
        return Err(Error::EtaUnreachable(
            target_ratio.to_f64().unwrap_or(f64::NAN),
            ETA_MAX,
        ));
    }
    let ratio_at = |eta: T| {
        let g = cap_g_sym(s, eta);
        if g <= T::zero() {
            T::infinity()
        } else {
            cap_f(eta) / g
        }
    };
    if ratio_at(T::zero()) >= target_ratio {
        return Ok(T::zero());
    }
    let mut lo = T::zero();
    let mut hi = T::from_f64_c(ETA_MAX);
    if ratio_at(hi).is_finite() && ratio_at(hi) < target_ratio {
        return Err(Error::EtaUnreachable(
            target_ratio.to_f64().unwrap_or(f64::NAN),
            ETA_MAX,
        ));
    }
    let rel_tol = T::from_f64_c(1e-9);
    for _ in 0..200 {
        let mid = (lo + hi) / T::from_f64_c(2.0);
        let r = ratio_at(mid);
        if r >= target_ratio {
            hi = mid;
        } else {
            lo = mid;
        }
        if r.is_finite() && ((r - target_ratio) / target_ratio).abs() <= rel_tol {
            return Ok(mid);
        }
    }
    Ok(hi)
}

/// Chord distance from the projection of a query (at distance `r1` from the
/// sphere center) onto the sphere of radius `r2`, to a point on that sphere
/// at distance `y` from the query:
/// `sqrt((R2/R1) (y^2 - (R2-R1)^2))`.
pub fn project_dist<T: Real>(y: T, r1: T, r2: T) -> Result<T> {
    let gap = (r1 - r2).abs();
    if y < gap {
        return Err(Error::PointBelowSphereGap {
            y: y.to_f64().unwrap_or(f64::NAN),
            gap: gap.to_f64().unwrap_or(f64::NAN),
        });
    }
    let span = r1 + r2;
    if y > span {
        return Err(Error::PointBeyondSphereSpan {
            y: y.to_f64().unwrap_or(f64::NAN),
            span: span.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(((r2 / r1) * (y * y - gap * gap)).max(T::zero()).sqrt())
}

#[derive(Debug, Clone)]
pub struct Ball<T: Real> {
    pub center: Vec<T>,
    pub radius: T,
}

/// Approximate smallest enclosing ball to relative tolerance ~1e-7.
///
/// Core-set style iteration on the dual simplex formulation
/// (`max_{lambda in simplex} sum lambda_i |x_i|^2 - |sum lambda_i x_i|^2`,
/// whose optimum center is `sum lambda_i x_i`), using Frank-Wolfe steps
/// toward the farthest point plus away steps, each with a closed-form line
/// search. Away steps make the convergence linear, so the duality gap
/// reaches 1e-8 of the squared radius in a few hundred rounds. The returned
/// radius is the exact maximum distance from the final center, so the ball
/// always encloses every input point.
pub fn smallest_enclosing_ball<T: Real>(points: &[&[T]]) -> Result<Ball<T>> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = points.len();
    let d = points[0].len();
    if n == 1 {
        return Ok(Ball { center: points[0].to_vec(), radius: T::zero() });
    }
    let two = T::from_f64_c(2.0);

    let far_from = |c: &[T]| -> usize {
        let mut best = (0usize, T::neg_infinity());
        for (i, p) in points.iter().enumerate() {
            let d2 = dist2(c, p);
            if d2 > best.1 {
                best = (i, d2);
            }
        }
        best.0
    };

    // Start from the midpoint of an approximate diameter: weights 1/2 on a
    // far pair. Exact for two points.
    let a_idx = far_from(points[0]);
    let b_idx = far_from(points[a_idx]);
    let mut lambda = vec![T::zero(); n];
    let half = T::one() / two;
    lambda[a_idx] = half;
    lambda[b_idx] = lambda[b_idx] + half;
    let mut center: Vec<T> = (0..d)
        .map(|k| (points[a_idx][k] + points[b_idx][k]) / two)
        .collect();

    let gap_tol = T::from_f64_c(1e-8);
    for _ in 0..4096 {
        // Gradient of the dual at lambda is (up to a constant shift)
        // g_i = ||x_i - center||^2.
        let mut g_far = (0usize, T::neg_infinity());
        let mut g_away = (0usize, T::infinity());
        let mut g_avg = T::zero();
        for (i, p) in points.iter().enumerate() {
            let g = dist2(&center, p);
            if g > g_far.1 {
                g_far = (i, g);
            }
            if lambda[i] > T::zero() {
                g_avg = g_avg + lambda[i] * g;
                if g < g_away.1 {
                    g_away = (i, g);
                }
            }
        }
        let fw_gap = g_far.1 - g_avg;
        let away_gap = g_avg - g_away.1;
        if fw_gap <= gap_tol * g_far.1.max(T::epsilon()) {
            break;
        }
        // Direction in lambda-space: e_s - lambda (FW) or lambda - e_a
        // (away). In center-space both move along (vertex - center).
        let (vertex, toward, gamma_max) = if fw_gap >= away_gap {
            (g_far.0, true, T::one())
        } else {
            let la = lambda[g_away.0];
            (g_away.0, false, la / (T::one() - la).max(T::epsilon()))
        };
        // Objective along center' = center + gamma * dir, dir = ±(x_v - center):
        // quadratic with optimum gamma* = (grad term) / (2 ||dir||^2).
        let mut dir = vec![T::zero(); d];
        for k in 0..d {
            dir[k] = points[vertex][k] - center[k];
            if !toward {
                dir[k] = -dir[k];
            }
        }
        let dir_norm2 = dot(&dir, &dir);
        if dir_norm2 <= T::epsilon() {
            break;
        }
        // d/dgamma of sum lambda g at gamma = 0 equals (g_v - g_avg) for a
        // FW step and (g_avg - g_v) for an away step; the quadratic term is
        // ||dir||^2 either way.
        let slope = if toward { g_far.1 - g_avg } else { g_avg - g_away.1 };
        let gamma = (slope / (two * dir_norm2)).min(gamma_max).max(T::zero());
        if gamma <= T::zero() {
            break;
        }
        // lambda <- (1 - gamma) lambda + gamma e_v   (FW)
        // lambda <- (1 + gamma) lambda - gamma e_v   (away)
        let one_minus = if toward { T::one() - gamma } else { T::one() + gamma };
        for l in lambda.iter_mut() {
            *l = *l * one_minus;
        }
        let delta = if toward { gamma } else { -gamma };
        lambda[vertex] = (lambda[vertex] + delta).max(T::zero());
        for k in 0..d {
            center[k] = center[k] + gamma * dir[k];
        }
    }

    let mut max_d2 = T::zero();
    for p in points.iter() {
        max_d2 = max_d2.max(dist2(&center, p));
    }
    Ok(Ball { center, radius: max_d2.sqrt() })
}

impl<T: Real> Ball<T> {
    pub fn contains(&self, p: &[T], slack: T) -> bool {
        dist(&self.center, p) <= self.radius + slack
    }
}
