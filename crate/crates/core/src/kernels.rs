//! Radially decreasing kernels, geometric weight levels and the induced
//! distance levels, plus the cost exponent that governs data-independent
//! query time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A radially decreasing kernel: `eval` maps distance to weight in (0, 1],
/// `inv` maps weight back to distance. `eval(0) = 1` and `eval` is strictly
/// decreasing on its support.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel<T: Real> {
    Gaussian { a: T },
    Exponential,
    TStudent { t: u32 },
    CustomRadial { rs: Vec<T>, ws: Vec<T> },
}

impl<T: Real> Kernel<T> {
    pub fn gaussian(a: T) -> Self {
        Kernel::Gaussian { a }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Gaussian { a } => {
                if *a <= T::zero() {
                    return Err(Error::InvalidPlan("gaussian parameter a must be positive".into()));
                }
            }
            Kernel::Exponential => {}
            Kernel::TStudent { t } => {
                if *t == 0 {
                    return Err(Error::InvalidPlan("t-student exponent must be positive".into()));
                }
            }
            Kernel::CustomRadial { rs, ws } => {
                if rs.len() != ws.len() || rs.len() < 2 {
                    return Err(Error::InvalidPlan("custom kernel grid needs >= 2 entries".into()));
                }
                if rs[0] != T::zero() || ws[0] != T::one() {
                    return Err(Error::InvalidPlan("custom kernel grid must start at (0, 1)".into()));
                }
                for i in 1..rs.len() {
                    if rs[i] <= rs[i - 1] || ws[i] >= ws[i - 1] || ws[i] <= T::zero() {
                        return Err(Error::InvalidPlan(
                            "custom kernel grid must be strictly monotone with weights in (0, 1]".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Weight at distance `r >= 0`.
    pub fn eval(&self, r: T) -> T {
        match self {
            Kernel::Gaussian { a } => (-*a * r * r).exp(),
            Kernel::Exponential => (-r).exp(),
            Kernel::TStudent { t } => (T::one() + r.powi(*t as i32)).recip(),
            Kernel::CustomRadial { rs, ws } => {
                if r <= rs[0] {
                    return ws[0];
                }
                if r >= *rs.last().unwrap() {
                    return *ws.last().unwrap();
                }
                let idx = rs.partition_point(|&g| g <= r);
                let (r0, r1) = (rs[idx - 1], rs[idx]);
                let (w0, w1) = (ws[idx - 1], ws[idx]);
                w0 + (w1 - w0) * (r - r0) / (r1 - r0)
            }
        }
    }

    /// Distance at which the kernel weight equals `w` in (0, 1].
    pub fn inv(&self, w: T) -> Result<T> {
        if w <= T::zero() || w > T::one() {
            return Err(Error::KernelNotInvertible(w.to_f64().unwrap_or(f64::NAN)));
        }
        match self {
            Kernel::Gaussian { a } => Ok((w.recip().ln() / *a).sqrt()),
            Kernel::Exponential => Ok(w.recip().ln()),
            Kernel::TStudent { t } => {
                let base = w.recip() - T::one();
                Ok(base.powf(T::from_u32(*t).unwrap().recip()))
            }
            Kernel::CustomRadial { rs, ws } => {
                let w_last = *ws.last().unwrap();
                if w < w_last {
                    return Err(Error::KernelNotInvertible(w.to_f64().unwrap_or(f64::NAN)));
                }
                // Bisection to 1e-12 relative tolerance on the monotone grid.
                let mut lo = T::zero();
                let mut hi = *rs.last().unwrap();
                let tol = T::from_f64_c(1e-12);
                for _ in 0..200 {
                    let mid = (lo + hi) / T::from_f64_c(2.0);
                    if self.eval(mid) > w {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if (hi - lo) <= tol * hi.max(T::one()) {
                        break;
                    }
                }
                Ok((lo + hi) / T::from_f64_c(2.0))
            }
        }
    }
}

/// Knobs for [`build_level_plan`]. The `slack` parameter stands in for the
/// asymptotic `o(1)` in the concatenation formula; the ratio cap is
/// `(ln n)^{1/7}` when enabled.
#[derive(Debug, Clone)]
pub struct LevelPlanConfig<T: Real> {
    pub slack: T,
    pub ratio_cap_enabled: bool,
    /// Near collision probability of the LSH family the plan will drive.
    pub p_near: T,
}

impl<T: Real> Default for LevelPlanConfig<T> {
    fn default() -> Self {
        LevelPlanConfig {
            slack: T::zero(),
            ratio_cap_enabled: true,
            p_near: T::from_f64_c(0.5),
        }
    }
}

/// Per-level distance thresholds, sampling rates and LSH concatenation
/// counts for a working estimate `mu`.
#[derive(Debug, Clone)]
pub struct LevelPlan<T: Real> {
    pub mu: T,
    pub n: usize,
    /// Number of geometric weight levels `J = ceil(log2(1/mu))`.
    pub levels: usize,
    /// Distance thresholds `r_j`, strictly increasing; `r[j-1]` is `r_j`.
    pub r: Vec<T>,
    /// Sampling probabilities `min(1 / (2^j n mu), 1)`.
    pub p_sampling: Vec<T>,
    /// Inner maxima `M_j = max_i ceil((i - j) / (c_{i,j}^2 (1 - slack)))`.
    pub m_exp: Vec<u32>,
    /// Concatenation counts `k_j` for the configured `p_near`.
    pub k: Vec<u32>,
    pub slack: T,
    pub ratio_cap: Option<T>,
    pub p_near: T,
}

/// Tolerant ceiling: absorbs ~1 ulp noise from computing the distance-ratio
/// terms through square roots so exact-integer ratios do not round up.
fn ceil_tol<T: Real>(x: T) -> T {
    (x - T::from_f64_c(1e-9)).ceil()
}

impl<T: Real> LevelPlan<T> {
    /// Ratio cap `c_{i,j} = min(r_{i-1} / r_j, cap)` for `i > j`.
    /// `i` ranges over `j+1 ..= J+1`; `r_{i-1}` only needs `r_1 ..= r_J`.
    pub fn c_ratio(&self, i: usize, j: usize) -> T {
        debug_assert!(i > j && j >= 1 && i <= self.levels + 1);
        let raw = self.r[i - 2] / self.r[j - 1];
        match self.ratio_cap {
            Some(cap) => raw.min(cap),
            None => raw,
        }
    }
}

/// Number of levels for a working estimate: `J = ceil(log2(1/mu))`.
pub fn level_count<T: Real>(mu: T) -> usize {
    let j = (mu.recip().log2() - T::from_f64_c(1e-12)).ceil();
    j.to_usize().unwrap_or(1).max(1)
}

pub fn build_level_plan<T: Real>(
    kernel: &Kernel<T>,
    mu: T,
    n: usize,
    config: &LevelPlanConfig<T>,
) -> Result<LevelPlan<T>> {
    if mu <= T::zero() || mu >= T::one() {
        return Err(Error::MuOutOfRange(mu.to_f64().unwrap_or(f64::NAN)));
    }
    if n < 1 {
        return Err(Error::EmptyDataset);
    }
    kernel.validate()?;
    let levels = level_count(mu);
    let two = T::from_f64_c(2.0);
    let mut r = Vec::with_capacity(levels);
    for j in 1..=levels {
        let w = two.powi(-(j as i32));
        let rj = kernel.inv(w)?;
        r.push(rj);
    }
    for j in 1..r.len() {
        if r[j] <= r[j - 1] {
            return Err(Error::InvalidPlan(format!(
                "distance levels not strictly increasing at j = {}",
                j + 1
            )));
        }
    }
    let nf = T::from_usize_c(n);
    let p_sampling: Vec<T> = (1..=levels)
        .map(|j| (two.powi(j as i32) * nf * mu).recip().min(T::one()))
        .collect();

    let ratio_cap = if config.ratio_cap_enabled {
        Some(T::from_usize_c(n).max(T::from_f64_c(2.0)).ln().powf(T::from_f64_c(1.0 / 7.0)))
    } else {
        None
    };
    let plan_wo_k = LevelPlan {
        mu,
        n,
        levels,
        r,
        p_sampling,
        m_exp: vec![],
        k: vec![],
        slack: config.slack,
        ratio_cap,
        p_near: config.p_near,
    };

    let mut m_exp = Vec::with_capacity(levels);
    let mut k = Vec::with_capacity(levels);
    let inv_log_p = -(config.p_near.log2()).recip();
    for j in 1..=levels {
        let mut m_best = T::zero();
        for i in (j + 1)..=(levels + 1) {
            let c = plan_wo_k.c_ratio(i, j);
            let raw = T::from_usize_c(i - j) / (c * c * (T::one() - config.slack));
            let ceiled = ceil_tol(raw);
            if ceiled > m_best {
                m_best = ceiled;
            }
        }
        let m_u = m_best.to_u32().unwrap_or(1).max(1);
        m_exp.push(m_u);
        let kj = ceil_tol(inv_log_p * T::from_u32(m_u).unwrap())
            .to_u32()
            .unwrap_or(1)
            .max(1);
        k.push(kj);
    }

    Ok(LevelPlan { m_exp, k, ..plan_wo_k })
}

/// Weight level of a point at distance `dist` from the query: `j` in `[J]`
/// with `eval(dist)` in `(2^{-j}, 2^{-j+1}]`, or `J+1` beyond. Implemented by
/// comparing against the distance thresholds (levels are `[r_{j-1}, r_j)` in
/// distance), which keeps boundary handling exact: distance exactly `r_j`
/// belongs to level `j+1`.
pub fn weight_level_of<T: Real>(plan: &LevelPlan<T>, dist: T) -> usize {
    plan.r.partition_point(|&rj| rj <= dist) + 1
}

/// `log2 cost(K)` and the `(j, i)` pair attaining it, by exhaustive scan.
/// Ties on the ceiled value are broken by the raw ratio (quantized to 1e-9)
/// and then by scan order (`j` ascending, then `i`).
pub fn kernel_cost<T: Real>(plan: &LevelPlan<T>) -> (T, (usize, usize)) {
    let mut best_ceil = T::neg_infinity();
    let mut best_raw_q: i64 = i64::MIN;
    let mut arg = (1usize, 2usize);
    for j in 1..=plan.levels {
        for i in (j + 1)..=(plan.levels + 1) {
            let c = plan.c_ratio(i, j);
            let raw = T::from_usize_c(i - j) / (c * c * (T::one() - plan.slack));
            let ceiled = ceil_tol(raw);
            let raw_q = (raw * T::from_f64_c(1e9))
                .round()
                .to_i64()
                .unwrap_or(i64::MAX);
            if ceiled > best_ceil || (ceiled == best_ceil && raw_q > best_raw_q) {
                best_ceil = ceiled;
                best_raw_q = raw_q;
                arg = (j, i);
            }
        }
    }
    (best_ceil, arg)
}
