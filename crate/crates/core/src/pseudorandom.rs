//! Dense-cap certification and the decomposition of a dataset into
//! pseudo-random spherical shells: points are rounded onto concentric
//! shells, dense caps are repeatedly carved out (recursing on their smallest
//! enclosing balls), and what remains has no heavy spherical cap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::lsh::mix_seed;
use crate::scalar::{dist, dist2, Real};
use crate::sphere::smallest_enclosing_ball;

/// Parameters of the shell decomposition. `gamma` is the cap-exclusion
/// width, `tau` the density threshold, `delta_rel` the shell rounding step
/// relative to the root ball radius, `r_min` the stop radius. The `cert_*`
/// fields drive the sampled dense-cap detection; below `exact_below` points
/// every candidate center and every member is scanned exactly.
#[derive(Debug, Clone)]
pub struct PrParams<T: Real> {
    pub gamma: T,
    pub tau: T,
    pub delta_rel: T,
    pub r_min: T,
    pub eps_cert: T,
    pub delta_cert: T,
    pub cert_sample_cap: usize,
    pub cert_candidate_cap: usize,
    pub exact_below: usize,
}

impl<T: Real> Default for PrParams<T> {
    /// Desk-scale defaults. `gamma` must grow as the dimension shrinks: a
    /// cap of chord `(sqrt(2)-gamma) r` carries ~Phi_bar(gamma sqrt(2d))
    /// of a uniform sphere, so below `gamma ~ 3/sqrt(2d)` no dataset is
    /// pseudo-random and the carve degenerates. 0.35 is sized for d >= 16.
    fn default() -> Self {
        PrParams {
            gamma: T::from_f64_c(0.35),
            tau: T::from_f64_c(0.1),
            delta_rel: T::from_f64_c(1e-3),
            r_min: T::from_f64_c(1e-3),
            eps_cert: T::from_f64_c(0.3),
            delta_cert: T::from_f64_c(0.05),
            cert_sample_cap: 2048,
            cert_candidate_cap: 256,
            exact_below: 500,
        }
    }
}

/// One output shell: every member's rounded position sits at distance
/// exactly `radius` from `center` (the rounded position is recomputed on
/// demand as `center + radius * (p - center)/|p - center|`). Terminal shells
/// (radius below the stop threshold) are returned unprocessed.
#[derive(Debug, Clone)]
pub struct SphereShell<T: Real> {
    pub center: Vec<T>,
    pub radius: T,
    pub ids: Vec<u32>,
    pub terminal: bool,
}

impl<T: Real> SphereShell<T> {
    /// Rounded position of a member point on this shell.
    pub fn rounded(&self, p: &[T]) -> Vec<T> {
        let d = dist(p, &self.center);
        if d <= T::zero() {
            return self.center.clone();
        }
        let scale = self.radius / d;
        p.iter().zip(self.center.iter()).map(|(&x, &c)| c + scale * (x - c)).collect()
    }

    /// Unit direction of a member point from the shell center.
    pub fn unit_dir(&self, p: &[T]) -> Vec<T> {
        let d = dist(p, &self.center);
        if d <= T::zero() {
            return vec![T::zero(); p.len()];
        }
        p.iter().zip(self.center.iter()).map(|(&x, &c)| (x - c) / d).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CertifyOutcome<T: Real> {
    /// A point of the dataset whose `sqrt(2(1-eps^2)) r` ball is heavy.
    DenseCenter(u32),
    /// The set is `(eps', tau)`-pseudo-random with
    /// `eps' = sqrt(2) (1 - sqrt(1 - 2 eps))`.
    PseudoRandom { eps_prime: T },
}

/// Randomized dense-ball certification on a sphere of radius `radius`
/// centered at `center`: samples `m = ceil(48/(eps^2 tau) ln(2n/delta))`
/// members with replacement, finds the dataset point whose
/// `sqrt(2(1-eps^2)) radius` ball captures the most samples, and reports it
/// as a dense center when the count reaches `(3/4)(3 eps^2) tau m`.
pub fn certify<T: Real>(
    pts: &Dataset<T>,
    ids: &[u32],
    center: &[T],
    radius: T,
    eps: T,
    tau: T,
    delta_fail: T,
    seed: u64,
    sample_cap: usize,
) -> Result<CertifyOutcome<T>> {
    let third = T::one() / T::from_f64_c(3.0);
    for (name, v) in [("eps", eps), ("tau", tau), ("delta_fail", delta_fail)] {
        if v <= T::zero() || v >= third {
            return Err(Error::CertifyParamOutOfRange {
                name,
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ids.len();
    let nf = T::from_usize_c(n);
    let m_raw = (T::from_f64_c(48.0) / (eps * eps * tau)
        * (T::from_f64_c(2.0) * nf / delta_fail).ln())
    .ceil()
    .to_usize()
    .unwrap_or(usize::MAX);
    let m = m_raw.min(sample_cap.max(16));

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xCE47]));
    let rounded: Vec<Vec<T>> = ids
        .iter()
        .map(|&id| round_to_shell(pts.point(id as usize), center, radius))
        .collect();
    let sample: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();

    let ball_r = (T::from_f64_c(2.0) * (T::one() - eps * eps)).sqrt() * radius;
    let ball_r2 = ball_r * ball_r;
    let mut best = (0usize, 0usize);
    for (ci, cpos) in rounded.iter().enumerate() {
        let mut count = 0usize;
        for &si in &sample {
            if dist2(cpos, &rounded[si]) <= ball_r2 {
                count += 1;
            }
        }
        if count > best.1 {
            best = (ci, count);
        }
    }
    let threshold = T::from_f64_c(0.75)
        * (T::from_f64_c(3.0) * eps * eps)
        * tau
        * T::from_usize_c(m);
    if T::from_usize_c(best.1) >= threshold {
        Ok(CertifyOutcome::DenseCenter(ids[best.0]))
    } else {
        let eps_prime =
            T::SQRT_2 * (T::one() - (T::one() - T::from_f64_c(2.0) * eps).sqrt());
        Ok(CertifyOutcome::PseudoRandom { eps_prime })
    }
}

fn round_to_shell<T: Real>(p: &[T], center: &[T], radius: T) -> Vec<T> {
    let d = dist(p, center);
    if d <= T::zero() {
        return center.to_vec();
    }
    let scale = radius / d;
    p.iter().zip(center.iter()).map(|(&x, &c)| c + scale * (x - c)).collect()
}

/// Sampled search for a shell point whose `cap_r` ball (in rounded
/// coordinates) holds at least `threshold` of the shell: candidate centers
/// are shell points (all of them below `exact_below`, a seeded sample
/// otherwise), counts are exact below `exact_below` and estimated on a
/// sample with a 3/4 margin otherwise.
fn find_dense_center<T: Real>(
    rounded: &[Vec<T>],
    alive: &[usize],
    cap_r: T,
    threshold: T,
    params: &PrParams<T>,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let m = alive.len();
    if m == 0 {
        return None;
    }
    let cap_r2 = cap_r * cap_r;
    if m <= params.exact_below {
        for &ci in alive {
            let mut count = 0usize;
            for &pi in alive {
                if dist2(&rounded[ci], &rounded[pi]) <= cap_r2 {
                    count += 1;
                }
            }
            if T::from_usize_c(count) >= threshold {
                return Some(ci);
            }
        }
        return None;
    }
    let s = params.cert_sample_cap.min(m).max(16);
    let sample: Vec<usize> = (0..s).map(|_| alive[rng.gen_range(0..m)]).collect();
    let n_cand = params.cert_candidate_cap.min(m);
    let frac = threshold / T::from_usize_c(m);
    let sample_threshold = T::from_f64_c(0.75) * frac * T::from_usize_c(s);
    let mut best: Option<(usize, usize)> = None;
    for _ in 0..n_cand {
        let ci = alive[rng.gen_range(0..m)];
        let mut count = 0usize;
        for &si in &sample {
            if dist2(&rounded[ci], &rounded[si]) <= cap_r2 {
                count += 1;
            }
        }
        if T::from_usize_c(count) >= sample_threshold && best.map_or(true, |(_, c)| count > c) {
            best = Some((ci, count));
        }
    }
    best.map(|(ci, _)| ci)
}

/// Decomposes the points inside `ball(center, radius)` into pseudo-random
/// spherical shells. Rounds every point outward onto a shell at a multiple
/// of `delta`, then repeatedly carves out caps of chord radius
/// `(sqrt(2)-gamma) * radius` that hold at least a `tau/2` fraction,
/// recursing on each carved cluster via its smallest enclosing ball, until
/// an outer round removes less than half of the shell. The union of the
/// output id sets is exactly the input id set.
pub fn pseudorandomify<T: Real>(
    pts: &Dataset<T>,
    ids: &[u32],
    center: &[T],
    radius: T,
    params: &PrParams<T>,
    seed: u64,
) -> Result<Vec<SphereShell<T>>> {
    let delta = params.delta_rel * radius.max(params.r_min);
    let mut out = Vec::new();
    let depth_cap = recursion_depth_cap(radius, params);
    pseudorandomify_inner(pts, ids, center, radius, delta, params, seed, 0, depth_cap, &mut out)?;
    // Canonical order for determinism across parallel builds.
    out.sort_by(|a, b| {
        b.radius
            .partial_cmp(&a.radius)
            .unwrap()
            .then_with(|| a.ids.iter().min().cmp(&b.ids.iter().min()))
    });
    Ok(out)
}

fn recursion_depth_cap<T: Real>(radius: T, params: &PrParams<T>) -> usize {
    // Depth bound log_{1/(1 - gamma^2/2)}(R/R_min), padded.
    let shrink = T::one() - params.gamma * params.gamma / T::from_f64_c(2.0);
    let ratio = (radius / params.r_min).max(T::from_f64_c(2.0));
    let cap = (ratio.ln() / -shrink.ln()).ceil().to_usize().unwrap_or(64);
    cap + 16
}

#[allow(clippy::too_many_arguments)]
fn pseudorandomify_inner<T: Real>(
    pts: &Dataset<T>,
    ids: &[u32],
    center: &[T],
    radius: T,
    delta: T,
    params: &PrParams<T>,
    seed: u64,
    depth: usize,
    depth_cap: usize,
    out: &mut Vec<SphereShell<T>>,
) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    if radius < params.r_min || depth >= depth_cap {
        if depth >= depth_cap {
            log::warn!("pseudorandomify recursion depth cap hit; emitting terminal shell");
        }
        out.push(SphereShell {
            center: center.to_vec(),
            radius,
            ids: ids.to_vec(),
            terminal: true,
        });
        return Ok(());
    }

    // Group by rounded shell index i = ceil(|p - o| / delta).
    let mut by_shell: Vec<(usize, Vec<u32>)> = Vec::new();
    {
        let mut map = std::collections::BTreeMap::new();
        for &id in ids {
            let r = dist(pts.point(id as usize), center);
            let i = (r / delta).ceil().to_usize().unwrap_or(0);
            map.entry(i).or_insert_with(Vec::new).push(id);
        }
        by_shell.extend(map);
    }

    let two = T::from_f64_c(2.0);
    let cap_r = (T::SQRT_2 - params.gamma) * radius;
    for (shell_idx, mut shell_ids) in by_shell {
        let r_shell = delta * T::from_usize_c(shell_idx);
        if r_shell < params.r_min {
            out.push(SphereShell {
                center: center.to_vec(),
                radius: r_shell,
                ids: shell_ids,
                terminal: true,
            });
            continue;
        }
        // Carving stops once the shell holds at most 1/tau points; below
        // that every singleton is a "dense" cap and extraction is vacuous.
        let small_stop = params.tau.recip().ceil().to_usize().unwrap_or(10);
        if shell_ids.len() <= small_stop {
            out.push(SphereShell {
                center: center.to_vec(),
                radius: r_shell,
                ids: shell_ids,
                terminal: true,
            });
            continue;
        }
        let rounded: Vec<Vec<T>> = shell_ids
            .iter()
            .map(|&id| round_to_shell(pts.point(id as usize), center, r_shell))
            .collect();
        let mut alive: Vec<usize> = (0..shell_ids.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xBD, shell_idx as u64]));
        loop {
            let m = alive.len();
            if m <= small_stop {
                break;
            }
            let threshold = (params.tau / two * T::from_usize_c(m)).max(T::from_f64_c(2.0));
            loop {
                let Some(ci) =
                    find_dense_center(&rounded, &alive, cap_r, threshold, params, &mut rng)
                else {
                    break;
                };
                let cap_r2 = cap_r * cap_r;
                let (cluster, rest): (Vec<usize>, Vec<usize>) = alive
                    .iter()
                    .partition(|&&pi| dist2(&rounded[ci], &rounded[pi]) <= cap_r2);
                debug_assert!(!cluster.is_empty());
                let cluster_pts: Vec<&[T]> =
                    cluster.iter().map(|&pi| pts.point(shell_ids[pi] as usize)).collect();
                let seb = smallest_enclosing_ball(&cluster_pts)?;
                let cluster_ids: Vec<u32> = cluster.iter().map(|&pi| shell_ids[pi]).collect();
                pseudorandomify_inner(
                    pts,
                    &cluster_ids,
                    &seb.center,
                    seb.radius,
                    delta,
                    params,
                    mix_seed(seed, &[0xDE, shell_idx as u64, cluster_ids[0] as u64]),
                    depth + 1,
                    depth_cap,
                    out,
                )?;
                alive = rest;
                if alive.is_empty() {
                    break;
                }
            }
            let m_prime = alive.len();
            if m_prime * 2 > m {
                break;
            }
        }
        if !alive.is_empty() {
            shell_ids = alive.iter().map(|&pi| shell_ids[pi]).collect();
            out.push(SphereShell {
                center: center.to_vec(),
                radius: r_shell,
                ids: shell_ids,
                terminal: false,
            });
        }
    }
    Ok(())
}

/// Exhaustive pseudo-randomness check of an output shell: for each probe
/// direction (every member when the shell is small, plus random on-sphere
/// probes), the points within chord `r(sqrt(2)-gamma)` must number at most
/// `tau/(1-2tau)` times the band population in
/// `(r(sqrt(2)-gamma), r(sqrt(2)+gamma))`, up to `slack * |P|` for
/// certification error. Returns the worst violation margin (<= 0 when the
/// bound holds everywhere).
pub fn shell_pseudorandomness_margin<T: Real>(
    pts: &Dataset<T>,
    shell: &SphereShell<T>,
    gamma: T,
    tau: T,
    slack: T,
    random_probes: usize,
    seed: u64,
) -> T {
    let r = shell.radius;
    let near_r = (T::SQRT_2 - gamma) * r;
    let far_r = (T::SQRT_2 + gamma) * r;
    let rounded: Vec<Vec<T>> =
        shell.ids.iter().map(|&id| shell.rounded(pts.point(id as usize))).collect();
    let ratio = tau / (T::one() - T::from_f64_c(2.0) * tau);
    // Certification error floor: dense-cap detection scans dataset centers
    // only; converting an arbitrary-center cap to a dataset-centered one
    // costs a 3 eps^2 factor (with eps the certification parameter implied
    // by gamma), and the carve threshold itself is floored at 2 members.
    let eps = gamma / T::SQRT_2 * (T::one() - gamma / (T::from_f64_c(2.0) * T::SQRT_2));
    let floor = T::from_f64_c(2.0) / (T::from_f64_c(3.0) * eps * eps);
    let allowance = slack * T::from_usize_c(shell.ids.len()) + floor;
    let mut worst = T::neg_infinity();
    let mut check = |probe: &[T]| {
        let mut near = 0usize;
        let mut band = 0usize;
        for rp in &rounded {
            let d = dist(probe, rp);
            if d <= near_r {
                near += 1;
            } else if d < far_r {
                band += 1;
            }
        }
        let margin = T::from_usize_c(near) - ratio * T::from_usize_c(band) - allowance;
        if margin > worst {
            worst = margin;
        }
    };
    for rp in &rounded {
        check(&rp.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x9E]));
    let d = pts.dim;
    for _ in 0..random_probes {
        let mut v: Vec<T> = (0..d).map(|_| T::std_normal(&mut rng)).collect();
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::epsilon());
        for (k, x) in v.iter_mut().enumerate() {
            *x = shell.center[k] + *x / norm * r;
        }
        check(&v);
    }
    worst
}
