//! Scalar-generic numeric primitives: the complementary error function,
//! standard normal tails, adaptive quadrature and bisection.

use crate::scalar::Real;

/// Coefficients of W. J. Cody's rational Chebyshev approximation for erf on
/// |x| <= 0.46875 (netlib CALERF).
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
/// erfc on 0.46875 < x <= 4.
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
/// erfc on x > 4.
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

const ONE_OVER_SQRT_PI: f64 = 0.564_189_583_547_756_28;

/// Complementary error function, accurate to ~1e-15 relative in `f64`.
pub fn erfc<T: Real>(x: T) -> T {
    let y = x.abs();
    let thresh = T::from_f64_c(0.46875);
    let result = if y <= thresh {
        // erfc = 1 - erf
        let ysq = y * y;
        let mut xnum = T::from_f64_c(ERF_A[4]) * ysq;
        let mut xden = ysq;
        for i in 0..3 {
            xnum = (xnum + T::from_f64_c(ERF_A[i])) * ysq;
            xden = (xden + T::from_f64_c(ERF_B[i])) * ysq;
        }
        let erf = x * (xnum + T::from_f64_c(ERF_A[3])) / (xden + T::from_f64_c(ERF_B[3]));
        return T::one() - erf;
    } else if y <= T::from_f64_c(4.0) {
        let mut xnum = T::from_f64_c(ERF_C[8]) * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + T::from_f64_c(ERF_C[i])) * y;
            xden = (xden + T::from_f64_c(ERF_D[i])) * y;
        }
        let r = (xnum + T::from_f64_c(ERF_C[7])) / (xden + T::from_f64_c(ERF_D[7]));
        scaled_exp(y, r)
    } else if y < T::from_f64_c(26.6) {
        let ysq = (y * y).recip();
        let mut xnum = T::from_f64_c(ERF_P[5]) * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + T::from_f64_c(ERF_P[i])) * ysq;
            xden = (xden + T::from_f64_c(ERF_Q[i])) * ysq;
        }
        let mut r = ysq * (xnum + T::from_f64_c(ERF_P[4])) / (xden + T::from_f64_c(ERF_Q[4]));
        r = (T::from_f64_c(ONE_OVER_SQRT_PI) - r) / y;
        scaled_exp(y, r)
    } else {
        T::zero()
    };
    if x < T::zero() {
        T::from_f64_c(2.0) - result
    } else {
        result
    }
}

/// exp(-y^2) * r, with the argument split to avoid premature rounding.
fn scaled_exp<T: Real>(y: T, r: T) -> T {
    let sixteen = T::from_f64_c(16.0);
    let ysq = (y * sixteen).trunc() / sixteen;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp() * r
}

/// Standard normal density.
pub fn normal_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_c(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-x * x / T::from_f64_c(2.0)).exp()
}

/// Standard normal upper tail `P(Z >= x)`.
pub fn normal_sf<T: Real>(x: T) -> T {
    erfc(x / T::SQRT_2) / T::from_f64_c(2.0)
}

/// Standard normal CDF.
pub fn normal_cdf<T: Real>(x: T) -> T {
    erfc(-x / T::SQRT_2) / T::from_f64_c(2.0)
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T, tol: T) -> T {
    if b <= a {
        return T::zero();
    }
    let two = T::from_f64_c(2.0);
    let m = (a + b) / two;
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson_rule(a, b, fa, fm, fb);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol, 60)
}

fn simpson_rule<T: Real>(a: T, b: T, fa: T, fm: T, fb: T) -> T {
    let six = T::from_f64_c(6.0);
    (b - a) / six * (fa + T::from_f64_c(4.0) * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse<T: Real, F: Fn(T) -> T>(
    f: &F,
    a: T,
    b: T,
    fa: T,
    fm: T,
    fb: T,
    whole: T,
    tol: T,
    depth: u32,
) -> T {
    let two = T::from_f64_c(2.0);
    let m = (a + b) / two;
    let lm = (a + m) / two;
    let rm = (m + b) / two;
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_rule(a, m, fa, flm, fm);
    let right = simpson_rule(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= T::from_f64_c(15.0) * tol {
        left + right + delta / T::from_f64_c(15.0)
    } else {
        let half_tol = tol / two;
        simpson_recurse(f, a, m, fa, flm, fm, left, half_tol, depth - 1)
            + simpson_recurse(f, m, b, fm, frm, fb, right, half_tol, depth - 1)
    }
}

/// Bisection for a monotone nondecreasing `f`: smallest `x` in `[lo, hi]`
/// with `f(x) >= target`, to absolute tolerance `tol` on `x`.
/// Caller must ensure `f(hi) >= target`.
pub fn bisect_increasing<T: Real, F: Fn(T) -> T>(f: &F, mut lo: T, mut hi: T, target: T, tol: T) -> T {
    let two = T::from_f64_c(2.0);
    while hi - lo > tol {
        let mid = (lo + hi) / two;
        if f(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope<T: Real>(xs: &[T], ys: &[T]) -> T {
    let n = T::from_usize_c(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut num = T::zero();
    let mut den = T::zero();
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        num = num + (x - mx) * (y - my);
        den = den + (x - mx) * (x - mx);
    }
    num / den
}
