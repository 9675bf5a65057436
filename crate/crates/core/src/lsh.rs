//! Euclidean LSH: a practical p-stable family and an idealized oracle family
//! that realizes the collision exponent law `Pr[collision at c r] =
//! p_near^{c^2}` exactly. The oracle is a test instrument for validating
//! query-work accounting without asymptotic slack, not a production index.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::counters::WorkCounters;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numeric::normal_cdf;
use crate::scalar::{dist, dot, Real};

/// SplitMix64 step; the basis for all seed derivation in the crate.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically mixes a seed with a list of stream labels.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &p in parts {
        state ^= p.wrapping_mul(0xff51_afd7_ed55_8ccd);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Uniform in [0, 1) from a mixed seed.
#[inline]
fn prf_unit(seed: u64, parts: &[u64]) -> f64 {
    (mix_seed(seed, parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// How to sample a family: the practical p-stable scheme (bucket width tuned
/// to hit `p_near_target` at the near radius) or the idealized oracle with a
/// caller-supplied near collision probability.
#[derive(Debug, Clone, Copy)]
pub enum LshModeSpec<T: Real> {
    PStable { p_near_target: T },
    IdealOracle { p_near: T },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LshMode<T: Real> {
    PStable { bucket_width: T, p_near: T },
    IdealOracle { p_near: T },
}

#[derive(Debug, Clone)]
pub struct LshFamily<T: Real> {
    pub mode: LshMode<T>,
    pub dim: usize,
    pub near_radius: T,
    pub seed: u64,
}

/// Closed-form collision probability of one p-stable atomic hash with bucket
/// width `w` for a pair at distance `c`:
/// `1 - 2 Phi(-w/c) - (2c / (sqrt(2 pi) w)) (1 - e^{-w^2/(2c^2)})`.
pub fn p_stable_collision<T: Real>(c: T, w: T) -> T {
    if c <= T::zero() {
        return T::one();
    }
    let ratio = w / c;
    let sqrt_2pi = T::from_f64_c(2.506_628_274_631_000_5);
    let one = T::one();
    let two = T::from_f64_c(2.0);
    one - two * normal_cdf(-ratio) - two / (sqrt_2pi * ratio) * (one - (-ratio * ratio / two).exp())
}

impl<T: Real> LshFamily<T> {
    /// Collision probability of a single atomic hash at distance `d`.
    pub fn atomic_collision_prob(&self, d: T) -> T {
        match self.mode {
            LshMode::PStable { bucket_width, .. } => p_stable_collision(d, bucket_width),
            LshMode::IdealOracle { p_near } => {
                let c = d / self.near_radius;
                p_near.powf(c * c)
            }
        }
    }

    pub fn p_near(&self) -> T {
        match self.mode {
            LshMode::PStable { p_near, .. } => p_near,
            LshMode::IdealOracle { p_near } => p_near,
        }
    }

    /// The k-fold concatenated collision probability at distance `d`.
    pub fn collision_prob(&self, d: T, k: u32) -> T {
        match self.mode {
            LshMode::PStable { .. } => self.atomic_collision_prob(d).powi(k as i32),
            LshMode::IdealOracle { p_near } => {
                let c = d / self.near_radius;
                p_near.powf(T::from_u32(k).unwrap() * c * c)
            }
        }
    }

    /// One atomic p-stable hash value. `slot` indexes the concatenation
    /// position within table `table`.
    fn atomic_hash(&self, table: u64, slot: u64, v: &[T]) -> i64 {
        let LshMode::PStable { bucket_width, .. } = self.mode else {
            unreachable!("atomic_hash is only defined for the p-stable mode")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[table, slot]));
        let mut acc = T::zero();
        for &x in v {
            let g = T::std_normal(&mut rng);
            acc = acc + g * x;
        }
        let b = T::unit_uniform(&mut rng) * bucket_width;
        ((acc + b) / bucket_width).floor().to_i64().unwrap_or(i64::MAX)
    }

    /// Concatenated key of `k` atomic hashes for table `table`.
    pub fn hash_point(&self, k: u32, table: u64, v: &[T]) -> Result<Vec<i64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        match self.mode {
            LshMode::PStable { .. } => {
                Ok((0..k as u64).map(|slot| self.atomic_hash(table, slot, v)).collect())
            }
            LshMode::IdealOracle { .. } => {
                // The oracle has no per-point hash; expose a coordinate
                // fingerprint so identical points share a key.
                let quantum = self.near_radius * T::from_f64_c(1e-9);
                let mut key = Vec::with_capacity(k as usize);
                let mut acc = self.seed ^ table;
                for &x in v {
                    let q = (x / quantum).round().to_i64().unwrap_or(0);
                    acc = mix_seed(acc, &[q as u64]);
                }
                for slot in 0..k as u64 {
                    key.push(mix_seed(acc, &[slot]) as i64);
                }
                Ok(key)
            }
        }
    }

    /// The oracle's concatenated collision decision for one (query, point)
    /// pair in one table. Shared pseudo-randomness: the coin depends on
    /// (seed, table, point id, quantized distance band), the threshold on
    /// the exact distance, so the exponent law holds exactly in
    /// distribution while repeated probes stay deterministic.
    pub fn oracle_collides(&self, table: u64, point_id: u32, d: T, k: u32) -> bool {
        let p = self.collision_prob(d, k).to_f64().unwrap_or(0.0);
        let band = band_of(d, self.near_radius);
        let u = prf_unit(self.seed, &[0xC0, table, point_id as u64, band]);
        u < p
    }

    /// Number of colliding tables among `k2` independent tables for one
    /// (query, point) pair, drawn as a binomial with the exact concatenated
    /// collision probability. Distributionally consistent with calling
    /// [`Self::oracle_collides`] per table; used by the estimator fast path.
    pub fn oracle_collision_count(&self, salt: u64, point_id: u32, d: T, k: u32, k2: u32) -> u32 {
        let p = self.collision_prob(d, k).to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
        if p <= 0.0 {
            return 0;
        }
        let band = band_of(d, self.near_radius);
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[0xB1, salt, point_id as u64, band]));
        if p >= 1.0 {
            return k2;
        }
        let bin = rand_distr::Binomial::new(k2 as u64, p).expect("valid binomial");
        bin.sample(&mut rng) as u32
    }
}

fn band_of<T: Real>(d: T, near_radius: T) -> u64 {
    let c2 = (d / near_radius) * (d / near_radius);
    (c2of(c2)).min(u64::MAX as f64) as u64
}

fn c2of<T: Real>(c2: T) -> f64 {
    (c2.to_f64().unwrap_or(0.0) * (1u64 << 24) as f64).round()
}

/// Samples a family. For the p-stable mode the bucket width is tuned by
/// bisection so the closed-form collision probability at `near_radius`
/// matches the target.
pub fn sample_family<T: Real>(
    mode: LshModeSpec<T>,
    dim: usize,
    near_radius: T,
    seed: u64,
) -> Result<LshFamily<T>> {
    if dim == 0 {
        return Err(Error::BadDimension);
    }
    if near_radius <= T::zero() {
        return Err(Error::BadNearRadius);
    }
    let mode = match mode {
        LshModeSpec::IdealOracle { p_near } => LshMode::IdealOracle { p_near },
        LshModeSpec::PStable { p_near_target } => {
            let mut lo = near_radius * T::from_f64_c(1e-6);
            let mut hi = near_radius * T::from_f64_c(1e6);
            for _ in 0..200 {
                let mid = (lo + hi) / T::from_f64_c(2.0);
                if p_stable_collision(near_radius, mid) < p_near_target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let bucket_width = (lo + hi) / T::from_f64_c(2.0);
            LshMode::PStable { bucket_width, p_near: p_stable_collision(near_radius, bucket_width) }
        }
    };
    Ok(LshFamily { mode, dim, near_radius, seed })
}

/// One hash table: either real buckets keyed by concatenated hash values, or
/// the oracle's id list with probe-time pairwise decisions.
#[derive(Debug, Clone, PartialEq)]
pub enum BucketTable {
    Keyed { k: u32, table: u64, buckets: HashMap<Vec<i64>, Vec<u32>> },
    Oracle { k: u32, table: u64, ids: Vec<u32> },
}

pub fn build_table<T: Real>(
    family: &LshFamily<T>,
    k: u32,
    table: u64,
    points: &Dataset<T>,
    ids: &[u32],
    counters: &mut WorkCounters,
) -> Result<BucketTable> {
    match family.mode {
        LshMode::PStable { .. } => {
            let mut buckets: HashMap<Vec<i64>, Vec<u32>> = HashMap::new();
            for &id in ids {
                let key = family.hash_point(k, table, points.point(id as usize))?;
                counters.hash_evals += k as u64;
                buckets.entry(key).or_default().push(id);
            }
            Ok(BucketTable::Keyed { k, table, buckets })
        }
        LshMode::IdealOracle { .. } => Ok(BucketTable::Oracle { k, table, ids: ids.to_vec() }),
    }
}

/// Returns exactly the ids whose key equals the query's key (keyed mode) or
/// whose pairwise oracle decision collides (oracle mode).
pub fn probe<T: Real>(
    table: &BucketTable,
    family: &LshFamily<T>,
    points: &Dataset<T>,
    query: &[T],
    counters: &mut WorkCounters,
) -> Result<Vec<u32>> {
    if query.len() != family.dim {
        return Err(Error::DimensionMismatch { expected: family.dim, got: query.len() });
    }
    match table {
        BucketTable::Keyed { k, table, buckets } => {
            let key = family.hash_point(*k, *table, query)?;
            counters.hash_evals += *k as u64;
            let hits = buckets.get(&key).cloned().unwrap_or_default();
            counters.candidates += hits.len() as u64;
            Ok(hits)
        }
        BucketTable::Oracle { k, table, ids } => {
            let mut hits = Vec::new();
            for &id in ids {
                counters.hash_evals += 1;
                let d = dist(query, points.point(id as usize));
                if family.oracle_collides(*table, id, d, *k) {
                    hits.push(id);
                }
            }
            counters.candidates += hits.len() as u64;
            Ok(hits)
        }
    }
}

const TABLE_MAGIC: &[u8; 8] = b"KDEBKT1\0";
const TABLE_VERSION: u32 = 1;

impl BucketTable {
    /// Flat binary layout: magic, version, mode, k, table index, bucket
    /// count, key block, offset index, id array.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_u32::<LittleEndian>(TABLE_VERSION)?;
        match self {
            BucketTable::Keyed { k, table, buckets } => {
                w.write_u8(0)?;
                w.write_u32::<LittleEndian>(*k)?;
                w.write_u64::<LittleEndian>(*table)?;
                w.write_u64::<LittleEndian>(buckets.len() as u64)?;
                let mut entries: Vec<(&Vec<i64>, &Vec<u32>)> = buckets.iter().collect();
                entries.sort_by(|a, b| a.0.cmp(b.0));
                for (key, _) in &entries {
                    for &v in key.iter() {
                        w.write_i64::<LittleEndian>(v)?;
                    }
                }
                let mut offset = 0u64;
                for (_, ids) in &entries {
                    w.write_u64::<LittleEndian>(offset)?;
                    offset += ids.len() as u64;
                }
                w.write_u64::<LittleEndian>(offset)?;
                for (_, ids) in &entries {
                    for &id in ids.iter() {
                        w.write_u32::<LittleEndian>(id)?;
                    }
                }
            }
            BucketTable::Oracle { k, table, ids } => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(*k)?;
                w.write_u64::<LittleEndian>(*table)?;
                w.write_u64::<LittleEndian>(ids.len() as u64)?;
                for &id in ids {
                    w.write_u32::<LittleEndian>(id)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format("bad table magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let mode = r.read_u8()?;
        let k = r.read_u32::<LittleEndian>()?;
        let table = r.read_u64::<LittleEndian>()?;
        match mode {
            0 => {
                let nbuckets = r.read_u64::<LittleEndian>()? as usize;
                let mut keys = Vec::with_capacity(nbuckets);
                for _ in 0..nbuckets {
                    let mut key = Vec::with_capacity(k as usize);
                    for _ in 0..k {
                        key.push(r.read_i64::<LittleEndian>()?);
                    }
                    keys.push(key);
                }
                let mut offsets = Vec::with_capacity(nbuckets + 1);
                for _ in 0..=nbuckets {
                    offsets.push(r.read_u64::<LittleEndian>()?);
                }
                let total = *offsets.last().unwrap_or(&0) as usize;
                let mut ids = Vec::with_capacity(total);
                for _ in 0..total {
                    ids.push(r.read_u32::<LittleEndian>()?);
                }
                let mut buckets = HashMap::with_capacity(nbuckets);
                for (i, key) in keys.into_iter().enumerate() {
                    let lo = offsets[i] as usize;
                    let hi = offsets[i + 1] as usize;
                    buckets.insert(key, ids[lo..hi].to_vec());
                }
                Ok(BucketTable::Keyed { k, table, buckets })
            }
            1 => {
                let n = r.read_u64::<LittleEndian>()? as usize;
                let mut ids = Vec::with_capacity(n);
                for _ in 0..n {
                    ids.push(r.read_u32::<LittleEndian>()?);
                }
                Ok(BucketTable::Oracle { k, table, ids })
            }
            other => Err(Error::Format(format!("unknown table mode {other}"))),
        }
    }
}

/// Gaussian random projection scaled by `1/sqrt(target_dim)`.
pub fn jl_project<T: Real>(points: &Dataset<T>, target_dim: usize, seed: u64) -> Result<Dataset<T>> {
    if target_dim == 0 {
        return Err(Error::BadDimension);
    }
    let d = points.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x11]));
    let mut proj = Vec::with_capacity(target_dim * d);
    for _ in 0..target_dim * d {
        proj.push(T::std_normal(&mut rng));
    }
    let scale = T::from_usize_c(target_dim).sqrt().recip();
    let mut out = Dataset::new(target_dim);
    let mut row = vec![T::zero(); target_dim];
    for p in points.iter() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(&proj[j * d..(j + 1) * d], p) * scale;
        }
        out.push(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn oracle_family(p_near: f64, r: f64) -> LshFamily<f64> {
        sample_family(LshModeSpec::IdealOracle { p_near }, 4, r, 99).unwrap()
    }

    #[test]
    fn oracle_exponent_law_examples() {
        let fam = oracle_family(0.5, 1.0);
        assert!((fam.collision_prob(2.0, 1) - 0.5f64.powi(4)).abs() < 1e-15);
        assert!((fam.collision_prob(1.0, 1) - 0.5).abs() < 1e-15);
        // Distance 0 always collides.
        assert!((fam.collision_prob(0.0, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_empirical_exponent_law() {
        // Empirical collision frequency at distance c*r over 1e5 trials
        // within 3 standard errors of p_near^{c^2}.
        let c = 1.5f64;
        let p_near = 0.6f64;
        let trials = 100_000u32;
        let mut hits = 0u64;
        for t in 0..trials {
            let fam = LshFamily {
                mode: LshMode::IdealOracle { p_near },
                dim: 4,
                near_radius: 1.0,
                seed: t as u64,
            };
            if fam.oracle_collides(0, 7, c, 1) {
                hits += 1;
            }
        }
        let expect = p_near.powf(c * c);
        let p_hat = hits as f64 / trials as f64;
        let se = (expect * (1.0 - expect) / trials as f64).sqrt();
        assert!((p_hat - expect).abs() <= 3.0 * se, "p_hat={p_hat} expect={expect}");
    }

    #[test]
    fn pstable_width_tuning() {
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::PStable { p_near_target: 0.9 }, 16, 1.0, 5).unwrap();
        let LshMode::PStable { bucket_width, p_near } = fam.mode else { panic!() };
        assert!((p_near - 0.9).abs() < 1e-9, "p_near={p_near}");
        assert!(bucket_width > 0.0);
    }

    #[test]
    fn pstable_empirical_collision_matches_closed_form() {
        // Monte Carlo over hash draws vs the closed-form integral, d = 16.
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::PStable { p_near_target: 0.9 }, 16, 1.0, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut a = vec![0.0f64; 16];
        let mut b = vec![0.0f64; 16];
        let mut dirv: Vec<f64> = (0..16).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = dirv.iter().map(|x| x * x).sum::<f64>().sqrt();
        dirv.iter_mut().for_each(|x| *x /= n);
        for i in 0..16 {
            a[i] = rng.gen::<f64>();
            b[i] = a[i] + dirv[i];
        }
        let trials = 10_000;
        let mut hits = 0;
        for t in 0..trials {
            let f2 = LshFamily { seed: t as u64, ..fam.clone() };
            let ka = f2.hash_point(1, 0, &a).unwrap();
            let kb = f2.hash_point(1, 0, &b).unwrap();
            if ka == kb {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / trials as f64;
        assert!((p_hat - 0.9).abs() < 0.02, "p_hat={p_hat}");
    }

    #[test]
    fn hash_point_trivial_examples() {
        // k=1, zero vector: floor(b/w) = 0 for any b in [0, w).
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::PStable { p_near_target: 0.9 }, 3, 1.0, 1).unwrap();
        let key = fam.hash_point(1, 0, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(key, vec![0]);
        // Determinism and identity.
        let v = [0.3, -0.2, 0.9];
        assert_eq!(fam.hash_point(4, 2, &v).unwrap(), fam.hash_point(4, 2, &v).unwrap());
        let w = v;
        assert_eq!(fam.hash_point(4, 2, &v).unwrap(), fam.hash_point(4, 2, &w).unwrap());
        assert!(fam.hash_point(1, 0, &[1.0]).is_err());
    }

    #[test]
    fn build_and_probe_round_trip() {
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::PStable { p_near_target: 0.9 }, 2, 1.0, 7).unwrap();
        let pts = Dataset::from_rows(vec![vec![0.0, 0.0], vec![10.0, 10.0], vec![0.01, 0.0]])
            .unwrap();
        let mut c = WorkCounters::default();
        let table = build_table(&fam, 4, 0, &pts, &[0, 1, 2], &mut c).unwrap();
        // Probe soundness/completeness against a linear scan of keys.
        let q = vec![0.0, 0.0];
        let got = probe(&table, &fam, &pts, &q, &mut c).unwrap();
        let qkey = fam.hash_point(4, 0, &q).unwrap();
        let expect: Vec<u32> = (0..3u32)
            .filter(|&i| fam.hash_point(4, 0, pts.point(i as usize)).unwrap() == qkey)
            .collect();
        assert_eq!(got, expect);
        assert!(got.contains(&0));
    }

    #[test]
    fn probe_empty_and_singleton() {
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::IdealOracle { p_near: 0.5 }, 2, 1.0, 3).unwrap();
        let pts = Dataset::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        let mut c = WorkCounters::default();
        let empty = build_table(&fam, 1, 0, &pts, &[], &mut c).unwrap();
        assert!(probe(&empty, &fam, &pts, &[1.0, 2.0], &mut c).unwrap().is_empty());
        let single = build_table(&fam, 1, 0, &pts, &[0], &mut c).unwrap();
        // Query equals the stored point: distance 0 always collides.
        assert_eq!(probe(&single, &fam, &pts, &[1.0, 2.0], &mut c).unwrap(), vec![0]);
    }

    #[test]
    fn planted_recovery_and_far_candidates() {
        // 1 point at distance r, 100 at 3r, p_near = 0.5, k = 1, 64 tables:
        // near point retrieved in >= 1 table with prob >= 1 - 0.5^64; the
        // far candidate count per table has mean 100 * 0.5^9.
        let dim = 8;
        let r = 1.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        let unit = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> =
                (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let near = unit(&mut rng).iter().map(|x| x * r).collect::<Vec<_>>();
        rows.push(near);
        for _ in 0..100 {
            rows.push(unit(&mut rng).iter().map(|x| x * 3.0 * r).collect());
        }
        let pts = Dataset::from_rows(rows).unwrap();
        let ids: Vec<u32> = (0..101).collect();
        let q = vec![0.0; dim];

        let mut near_found = 0;
        let mut far_total = 0u64;
        let seeds = 200;
        let tables = 64u64;
        for s in 0..seeds {
            let fam: LshFamily<f64> =
                sample_family(LshModeSpec::IdealOracle { p_near: 0.5 }, dim, r, s).unwrap();
            let mut c = WorkCounters::default();
            let mut any_near = false;
            for t in 0..tables {
                let table = build_table(&fam, 1, t, &pts, &ids, &mut c).unwrap();
                let hits = probe(&table, &fam, &pts, &q, &mut c).unwrap();
                if hits.contains(&0) {
                    any_near = true;
                }
                far_total += hits.iter().filter(|&&i| i != 0).count() as u64;
            }
            if any_near {
                near_found += 1;
            }
        }
        assert_eq!(near_found, seeds, "near point must essentially always be found");
        let mean_far = far_total as f64 / (seeds as f64 * tables as f64);
        let expect = 100.0 * 0.5f64.powi(9);
        // 3 sigma of the per-table mean over seeds*tables observations.
        let se = (expect / (seeds as f64 * tables as f64)).sqrt() * 3.0 + 0.02;
        assert!((mean_far - expect).abs() < 3.0 * se + 0.05, "mean_far={mean_far} expect={expect}");
    }

    #[test]
    fn determinism_same_seed_same_tables() {
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::PStable { p_near_target: 0.8 }, 4, 1.0, 42).unwrap();
        let pts = Dataset::from_rows(vec![vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 1.1, 1.2, 1.3]])
            .unwrap();
        let mut c = WorkCounters::default();
        let t1 = build_table(&fam, 3, 5, &pts, &[0, 1], &mut c).unwrap();
        let t2 = build_table(&fam, 3, 5, &pts, &[0, 1], &mut c).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn table_serialization_round_trip() {
        let fam: LshFamily<f64> =
            sample_family(LshModeSpec::PStable { p_near_target: 0.8 }, 2, 1.0, 13).unwrap();
        let pts =
            Dataset::from_rows(vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![0.1, 0.1]]).unwrap();
        let mut c = WorkCounters::default();
        let table = build_table(&fam, 2, 1, &pts, &[0, 1, 2], &mut c).unwrap();
        let mut buf = Vec::new();
        table.write_to(&mut buf).unwrap();
        let back = BucketTable::read_from(&mut &buf[..]).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn jl_projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 512;
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        let pts = Dataset::from_rows(rows).unwrap();
        let proj = jl_project(&pts, 64, 77).unwrap();
        assert_eq!(proj.dim, 64);
        let mut ok = 0;
        let mut total = 0;
        for i in (0..200).step_by(2) {
            let orig = dist(pts.point(i), pts.point(i + 1));
            let new = dist(proj.point(i), proj.point(i + 1));
            let distortion = new / orig;
            total += 1;
            if (0.5..=1.5).contains(&distortion) {
                ok += 1;
            }
        }
        assert!(ok as f64 / total as f64 >= 0.99, "ok={ok}/{total}");
        // Zero maps to zero.
        let z = Dataset::from_rows(vec![vec![0.0f64; 16]]).unwrap();
        let pz = jl_project(&z, 4, 1).unwrap();
        assert!(pz.point(0).iter().all(|&x| x == 0.0));
    }
}
