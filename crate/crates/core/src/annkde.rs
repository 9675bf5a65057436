//! Data-independent KDE estimator: geometric-level subsampling plus
//! Euclidean LSH recovery, the importance-sampling estimator with
//! median-of-means aggregation, and the halving search for the working
//! density estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::counters::WorkCounters;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{build_level_plan, weight_level_of, Kernel, LevelPlan, LevelPlanConfig};
use crate::lsh::{build_table, mix_seed, probe, sample_family, BucketTable, LshFamily, LshModeSpec};
use crate::scalar::{dist, Real};

/// Build-time knobs. `c_k1` and `mu_exp_factor` are the unspecified
/// constant and the `mu^{-o(1)}` factor in the repetition count; the caps
/// bound desk-scale runs.
#[derive(Debug, Clone)]
pub struct DiParams<T: Real> {
    pub epsilon: T,
    pub mu: T,
    pub lsh: LshModeSpec<T>,
    pub seed: u64,
    pub c_k1: T,
    pub mu_exp_factor: T,
    pub slack: T,
    pub ratio_cap_enabled: bool,
    pub k1_cap: usize,
    pub k2_cap: usize,
}

impl<T: Real> DiParams<T> {
    pub fn new(mu: T, epsilon: T, lsh: LshModeSpec<T>, seed: u64) -> Self {
        DiParams {
            epsilon,
            mu,
            lsh,
            seed,
            c_k1: T::from_f64_c(4.0),
            mu_exp_factor: T::one(),
            slack: T::zero(),
            ratio_cap_enabled: true,
            k1_cap: 1024,
            k2_cap: 256,
        }
    }

    pub fn with_k1_cap(mut self, cap: usize) -> Self {
        self.k1_cap = cap;
        self
    }

    pub fn with_k2_cap(mut self, cap: usize) -> Self {
        self.k2_cap = cap;
        self
    }
}

/// One (outer repetition, level) phase: the subsample drawn at the level's
/// rate and, in p-stable mode, its hashed tables. The oracle mode probes the
/// subsample directly through the collision sampler.
#[derive(Debug, Clone)]
struct Phase {
    subsample: Vec<u32>,
    tables: Vec<BucketTable>,
}

/// The data-independent index: `K1` outer repetitions of `J` level phases
/// plus a rate-1/n subsample per repetition for the far band.
#[derive(Debug)]
pub struct DiIndex<T: Real> {
    pub kernel: Kernel<T>,
    pub plan: LevelPlan<T>,
    pub epsilon: T,
    pub seed: u64,
    pub k1: usize,
    pub k2: Vec<u32>,
    families: Vec<LshFamily<T>>,
    phases: Vec<Vec<Phase>>,
    uniform: Vec<Vec<u32>>,
    pub points: Dataset<T>,
    pub build_work: WorkCounters,
    oracle_mode: bool,
    pub mom_groups: usize,
}

/// The per-query output: one `Z_a` per outer repetition and their
/// median-of-means, already normalized by `n` (an estimate of the density).
#[derive(Debug, Clone)]
pub struct Estimate<T: Real> {
    pub trials: Vec<T>,
    pub point_estimate: T,
    pub mu_used: T,
    pub epsilon: T,
    pub groups: usize,
}

/// Median of means: mean within each of `groups` contiguous chunks, median
/// across chunks (average of the middle two when even).
pub fn median_of_means<T: Real>(trials: &[T], groups: usize) -> T {
    let g = groups.clamp(1, trials.len().max(1));
    let chunk = trials.len().div_ceil(g);
    let mut means: Vec<T> = trials
        .chunks(chunk)
        .map(|c| c.iter().copied().sum::<T>() / T::from_usize_c(c.len()))
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = means.len();
    if m % 2 == 1 {
        means[m / 2]
    } else {
        (means[m / 2 - 1] + means[m / 2]) / T::from_f64_c(2.0)
    }
}

fn default_mom_groups(n: usize) -> usize {
    ((2.0 * (n.max(2) as f64).ln()).ceil() as usize).max(1)
}

/// Bernoulli subsample of `0..n` at rate `p`, by geometric skipping.
pub fn bernoulli_subsample<T: Real>(n: usize, p: T, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if p >= T::one() {
        return (0..n as u32).collect();
    }
    if p <= T::zero() {
        return Vec::new();
    }
    let ln_q = (T::one() - p).ln();
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let u = T::unit_uniform(rng).max(T::from_f64_c(1e-300));
        let skip = (u.ln() / ln_q).floor().to_usize().unwrap_or(usize::MAX);
        i = i.saturating_add(skip);
        if i >= n {
            break;
        }
        out.push(i as u32);
        i += 1;
    }
    out
}

pub fn preprocess<T: Real>(
    points: Dataset<T>,
    kernel: Kernel<T>,
    params: &DiParams<T>,
) -> Result<DiIndex<T>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let oracle_mode = matches!(params.lsh, LshModeSpec::IdealOracle { .. });
    // Probe the family's near collision probability once; the same value
    // holds at every level (the p-stable width is retuned per radius).
    let probe_family = sample_family(params.lsh, points.dim, T::one(), params.seed)?;
    let p_near = probe_family.p_near();
    let plan_cfg = LevelPlanConfig {
        slack: params.slack,
        ratio_cap_enabled: params.ratio_cap_enabled,
        p_near,
    };
    let plan = build_level_plan(&kernel, params.mu, n, &plan_cfg)?;

    let nf = T::from_usize_c(n);
    let ln_n = nf.max(T::from_f64_c(2.0)).ln();
    let k1_raw = (params.c_k1 * ln_n / (params.epsilon * params.epsilon)
        * params.mu_exp_factor)
        .ceil()
        .to_usize()
        .unwrap_or(usize::MAX);
    let k1 = k1_raw.clamp(1, params.k1_cap);

    let mut families = Vec::with_capacity(plan.levels);
    let mut k2 = Vec::with_capacity(plan.levels);
    for j in 1..=plan.levels {
        let fam = sample_family(
            params.lsh,
            points.dim,
            plan.r[j - 1],
            mix_seed(params.seed, &[0xFA, j as u64]),
        )?;
        let kj = plan.k[j - 1];
        let p_pow = fam.p_near().powi(kj as i32);
        let k2_raw = (T::from_f64_c(100.0) * ln_n / p_pow).ceil().to_usize().unwrap_or(usize::MAX);
        k2.push(k2_raw.clamp(1, params.k2_cap) as u32);
        families.push(fam);
    }

    let seed = params.seed;
    let plan_ref = &plan;
    let families_ref = &families;
    let k2_ref = &k2;
    let points_ref = &points;
    let per_a: Vec<(Vec<Phase>, Vec<u32>, WorkCounters)> = (0..k1)
        .into_par_iter()
        .map(|a| {
            let mut work = WorkCounters::default();
            let mut phases = Vec::with_capacity(plan_ref.levels);
            for j in 1..=plan_ref.levels {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    seed,
                    &[0x5B, a as u64, j as u64],
                ));
                let subsample = bernoulli_subsample(n, plan_ref.p_sampling[j - 1], &mut rng);
                let tables = if oracle_mode {
                    Vec::new()
                } else {
                    let fam = &families_ref[j - 1];
                    let kj = plan_ref.k[j - 1];
                    (0..k2_ref[j - 1] as u64)
                        .map(|ell| {
                            let table_id = mix_seed(seed, &[0x7A, a as u64, j as u64, ell]);
                            build_table(fam, kj, table_id, points_ref, &subsample, &mut work)
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                phases.push(Phase { subsample, tables });
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5C, a as u64]));
            let uniform = bernoulli_subsample(n, nf.recip(), &mut rng);
            Ok((phases, uniform, work))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut build_work = WorkCounters::default();
    let mut phases = Vec::with_capacity(k1);
    let mut uniform = Vec::with_capacity(k1);
    for (ph, un, w) in per_a {
        phases.push(ph);
        uniform.push(un);
        build_work.add(w);
    }

    Ok(DiIndex {
        kernel,
        plan,
        epsilon: params.epsilon,
        seed,
        k1,
        k2,
        families,
        phases,
        uniform,
        points,
        build_work,
        oracle_mode,
        mom_groups: default_mom_groups(n),
    })
}

impl<T: Real> DiIndex<T> {
    /// One importance-sampling trial `Z_a`, already divided by `n`.
    ///
    /// Each level-`j` phase recovers candidates from its own subsample and
    /// keeps exactly the points whose true weight level is `j` (a point of
    /// another level is counted only in its own phase, which probes its own
    /// subsample), deduplicated across the inner repetitions. The far band
    /// `L_{J+1}` is scanned in the rate-1/n subsample.
    fn trial(&self, a: usize, q: &[T], work: &mut WorkCounters) -> Result<T> {
        let n = self.points.len();
        let nf = T::from_usize_c(n);
        let mut z = T::zero();
        for j in 1..=self.plan.levels {
            let phase = &self.phases[a][j - 1];
            let kj = self.plan.k[j - 1];
            let k2j = self.k2[j - 1];
            let mut recovered: Vec<u32> = Vec::new();
            if self.oracle_mode {
                let fam = &self.families[j - 1];
                work.hash_evals += kj as u64 * k2j as u64;
                let salt = mix_seed(self.seed, &[0x9D, a as u64, j as u64]);
                for &id in &phase.subsample {
                    let d = dist(q, self.points.point(id as usize));
                    let hits = fam.oracle_collision_count(salt, id, d, kj, k2j);
                    if hits > 0 {
                        work.candidates += hits as u64;
                        recovered.push(id);
                    }
                }
            } else {
                let fam = &self.families[j - 1];
                let mut seen: Vec<u32> = Vec::new();
                for table in &phase.tables {
                    let hits = probe(table, fam, &self.points, q, work)?;
                    seen.extend(hits);
                }
                seen.sort_unstable();
                seen.dedup();
                recovered = seen;
            }
            let p_j = self.plan.p_sampling[j - 1];
            for &id in &recovered {
                let d = dist(q, self.points.point(id as usize));
                if weight_level_of(&self.plan, d) == j {
                    let w = self.kernel.eval(d);
                    z = z + w / p_j;
                }
            }
        }
        // Far band: scan the uniform subsample with p_i = 1/n.
        for &id in &self.uniform[a] {
            let d = dist(q, self.points.point(id as usize));
            work.candidates += 1;
            if weight_level_of(&self.plan, d) == self.plan.levels + 1 {
                z = z + self.kernel.eval(d) * nf;
            }
        }
        Ok(z / nf)
    }

    /// All `K_1` trials for a query.
    pub fn query(&self, q: &[T]) -> Result<(Estimate<T>, WorkCounters)> {
        if q.len() != self.points.dim {
            return Err(Error::DimensionMismatch { expected: self.points.dim, got: q.len() });
        }
        let mut work = WorkCounters::default();
        let mut trials = Vec::with_capacity(self.k1);
        for a in 0..self.k1 {
            trials.push(self.trial(a, q, &mut work)?);
        }
        let point_estimate = median_of_means(&trials, self.mom_groups);
        Ok((
            Estimate {
                trials,
                point_estimate,
                mu_used: self.plan.mu,
                epsilon: self.epsilon,
                groups: self.mom_groups,
            },
            work,
        ))
    }

    /// Median-of-means density estimate at `q`.
    pub fn estimate_kde(&self, q: &[T]) -> Result<T> {
        Ok(self.query(q)?.0.point_estimate)
    }

    /// Subsample of phase `(a, j)`; exposed for the enumeration oracles.
    pub fn phase_subsample(&self, a: usize, j: usize) -> &[u32] {
        &self.phases[a][j - 1].subsample
    }

    pub fn uniform_subsample(&self, a: usize) -> &[u32] {
        &self.uniform[a]
    }
}

/// Starting from `mu = 1/2`, halves the working estimate until a
/// median-of-O(log n)-trials test concludes `mu/4 < mu* <= mu`, then builds
/// the full-precision index at the accepted value. When the very first test
/// indicates `mu* > 1/2` the convention is to report `mu = 1` (the estimate
/// is still computed with the working index at 1/2).
pub fn mu_search<T: Real>(
    points: &Dataset<T>,
    kernel: &Kernel<T>,
    q: &[T],
    epsilon: T,
    mu_floor: T,
    base: &DiParams<T>,
) -> Result<(T, Estimate<T>)> {
    let n = points.len();
    let half = T::from_f64_c(0.5);
    // Per-trial occupancy near the acceptance boundary is O(1), so the
    // halving test needs a healthy trial count to decide est vs mu/2.
    let probe_k1 = ((24.0 * (n.max(2) as f64).ln()).ceil() as usize).clamp(48, 4 * base.k1_cap);
    let mut mu = half;
    let mut step = 0u64;
    loop {
        let mut params = base.clone();
        params.mu = mu;
        params.epsilon = epsilon;
        params.seed = mix_seed(base.seed, &[0xA0, step]);
        params.k1_cap = probe_k1;
        let idx = preprocess(points.clone(), kernel.clone(), &params)?;
        let est = idx.estimate_kde(q)?;
        if est > mu / T::from_f64_c(2.0) {
            let accepted = if step == 0 && est > half { T::one() } else { mu };
            let mut full = base.clone();
            full.mu = mu;
            full.epsilon = epsilon;
            full.seed = mix_seed(base.seed, &[0xA1]);
            let idx_full = preprocess(points.clone(), kernel.clone(), &full)?;
            let (mut estimate, _) = idx_full.query(q)?;
            estimate.mu_used = accepted;
            return Ok((accepted, estimate));
        }
        mu = mu / T::from_f64_c(2.0);
        step += 1;
        if mu < mu_floor {
            return Err(Error::DensityBelowFloor {
                mu: mu.to_f64().unwrap_or(f64::NAN),
                floor: mu_floor.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
}

/// Exact density by linear scan; the reference oracle everywhere.
pub fn kde_exact<T: Real>(points: &Dataset<T>, kernel: &Kernel<T>, q: &[T]) -> T {
    let mut acc = T::zero();
    for p in points.iter() {
        acc = acc + kernel.eval(dist(p, q));
    }
    acc / T::from_usize_c(points.len())
}

/// Chebyshev-level constant in the baseline budget: with
/// `C / (eps^2 mu)` samples the relative deviation at the bracket edge
/// `mu = 4 mu*` stays below `eps` with probability >= 0.9.
pub const BASELINE_BUDGET_CONSTANT: f64 = 12.0;

/// Baseline: average the kernel over `min(ceil(C/(eps^2 mu)), n)` uniform
/// samples without replacement.
pub fn baseline_random_sampling<T: Real>(
    points: &Dataset<T>,
    kernel: &Kernel<T>,
    q: &[T],
    epsilon: T,
    mu: T,
    seed: u64,
    work: &mut WorkCounters,
) -> T {
    let n = points.len();
    let budget_t =
        (T::from_f64_c(BASELINE_BUDGET_CONSTANT) / (epsilon * epsilon * mu)).ceil();
    let budget = budget_t.to_usize().unwrap_or(n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xBA5E]));
    let mut acc = T::zero();
    if budget >= n {
        for p in points.iter() {
            acc = acc + kernel.eval(dist(p, q));
        }
        work.candidates += n as u64;
        return acc / T::from_usize_c(n);
    }
    // Floyd's sampling without replacement.
    let mut chosen = std::collections::HashSet::with_capacity(budget);
    for i in (n - budget)..n {
        let j = rng.gen_range(0..=i);
        let pick = if chosen.contains(&j) { i } else { j };
        chosen.insert(pick);
    }
    for &i in &chosen {
        acc = acc + kernel.eval(dist(points.point(i), q));
    }
    work.candidates += budget as u64;
    acc / T::from_usize_c(budget)
}
