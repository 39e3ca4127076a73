//! Voxel-bucketed replay buffer with window eviction and reliability-ranked
//! per-voxel capacity.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::math::{cell_and_fraction, Vec3};
use crate::ray_sampler::TsdfSample;

/// Scale of the range-dependent noise term.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ReliabilityParams {
    pub alpha: f64,
    /// Pooling radius (m); also normalizes the range term.
    pub radius: f64,
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        ReliabilityParams { alpha: 1.0, radius: 50.0 }
    }
}

/// Expected squared error of a projective label: incidence bias
/// `1 - cos` squared plus the range variance `(alpha * range / radius)^2`.
pub fn reliability_mse(ray_len: f64, cos_incidence: f64, params: &ReliabilityParams) -> f64 {
    let bias = 1.0 - cos_incidence;
    let sigma = params.alpha * ray_len / params.radius;
    bias * bias + sigma * sigma
}

/// Integer coordinates of a pooling voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoolKey(pub [i32; 3]);

impl PoolKey {
    pub fn center(self, voxel_size: f64) -> Vec3 {
        Vec3::new(
            (self.0[0] as f64 + 0.5) * voxel_size,
            (self.0[1] as f64 + 0.5) * voxel_size,
            (self.0[2] as f64 + 0.5) * voxel_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PoolConfig {
    /// Pooling voxel size (m); the coarsest map level by default.
    pub voxel_size: f64,
    /// Per-voxel capacity.
    pub capacity: usize,
    pub reliability: ReliabilityParams,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { voxel_size: 0.45, capacity: 256, reliability: ReliabilityParams::default() }
    }
}

impl PoolConfig {
    pub fn is_valid(&self) -> bool {
        self.voxel_size > 0.0
            && self.capacity > 0
            && self.reliability.alpha > 0.0
            && self.reliability.radius > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct ReplayPool {
    buckets: BTreeMap<PoolKey, Vec<TsdfSample>>,
    voxel_size: f64,
    radius: f64,
    capacity: usize,
    total: usize,
    next_seq: u64,
}

impl ReplayPool {
    pub fn new(cfg: &PoolConfig) -> Self {
        ReplayPool {
            buckets: BTreeMap::new(),
            voxel_size: cfg.voxel_size,
            radius: cfg.reliability.radius,
            capacity: cfg.capacity,
            total: 0,
            next_seq: 0,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn buckets(&self) -> &BTreeMap<PoolKey, Vec<TsdfSample>> {
        &self.buckets
    }

    pub fn bucket(&self, key: PoolKey) -> Option<&[TsdfSample]> {
        self.buckets.get(&key).map(Vec::as_slice)
    }

    pub fn samples(&self) -> impl Iterator<Item = &TsdfSample> {
        self.buckets.values().flatten()
    }

    /// Pooling voxel of `u`, half-open `[k s, (k+1) s)` per axis.
    pub fn bucket_of(&self, u: Vec3) -> PoolKey {
        PoolKey(cell_and_fraction(u, self.voxel_size).0)
    }

    /// Appends samples to their buckets, stamping pool sequence numbers.
    pub fn insert_samples(&mut self, samples: impl IntoIterator<Item = TsdfSample>) {
        for mut s in samples {
            s.seq = self.next_seq;
            self.next_seq += 1;
            let key = self.bucket_of(s.position);
            self.buckets.entry(key).or_default().push(s);
            self.total += 1;
        }
    }

    /// Restores samples verbatim (sequence numbers included).
    pub fn restore(&mut self, samples: impl IntoIterator<Item = TsdfSample>, next_seq: u64) {
        for s in samples {
            let key = self.bucket_of(s.position);
            self.buckets.entry(key).or_default().push(s);
            self.total += 1;
        }
        self.next_seq = next_seq;
    }

    /// Evicts samples with `|u - origin| >= radius`; returns the count.
    pub fn prune_window(&mut self, origin: Vec3) -> usize {
        let r2 = self.radius * self.radius;
        let mut evicted = 0;
        self.buckets.retain(|_, bucket| {
            let before = bucket.len();
            bucket.retain(|s| s.position.distance_squared(origin) < r2);
            evicted += before - bucket.len();
            !bucket.is_empty()
        });
        self.total -= evicted;
        evicted
    }

    /// Caps every bucket at `capacity`, keeping the lowest-`mse` samples;
    /// ties prefer newer frames, then earlier insertion. Returns the count evicted.
    pub fn enforce_capacity(&mut self) -> usize {
        let cap = self.capacity;
        let mut evicted = 0;
        for bucket in self.buckets.values_mut() {
            if bucket.len() <= cap {
                continue;
            }
            evicted += bucket.len() - cap;
            bucket.select_nth_unstable_by(cap - 1, reliability_order);
            bucket.truncate(cap);
            bucket.sort_unstable_by_key(|s| s.seq);
        }
        self.total -= evicted;
        evicted
    }
}

/// Retention order: ascending mse, then newer frame, then earlier insertion.
pub fn reliability_order(a: &TsdfSample, b: &TsdfSample) -> core::cmp::Ordering {
    a.mse.total_cmp(&b.mse).then(b.frame_id.cmp(&a.frame_id)).then(a.seq.cmp(&b.seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform, Stage};
    use alloc::vec;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn sample_at(p: Vec3, mse: f64, frame_id: u64) -> TsdfSample {
        TsdfSample { position: p, label: 0.0, ray_len: 1.0, cos_incidence: 1.0, mse, frame_id, seq: 0 }
    }

    #[test]
    fn mse_examples() {
        let params = ReliabilityParams { alpha: 1.0, radius: 20.0 };
        assert!((reliability_mse(10.0, 1.0, &params) - 0.25).abs() < 1e-15);
        assert!((reliability_mse(20.0, 0.5, &params) - 1.25).abs() < 1e-15);
        assert_eq!(reliability_mse(0.0, 1.0, &params), 0.0);
    }

    #[test]
    fn bucket_convention() {
        let pool = ReplayPool::new(&PoolConfig::default());
        assert_eq!(pool.bucket_of(Vec3::new(0.1, 0.1, 0.1)), PoolKey([0, 0, 0]));
        assert_eq!(pool.bucket_of(Vec3::new(-0.1, 0.0, 0.0)), PoolKey([-1, 0, 0]));
        assert_eq!(pool.bucket_of(Vec3::new(0.45, 0.0, 0.0)), PoolKey([1, 0, 0]));
    }

    #[test]
    fn insert_partitions_by_floor() {
        let mut pool = ReplayPool::new(&PoolConfig::default());
        pool.insert_samples(Vec::new());
        assert!(pool.is_empty());
        pool.insert_samples((0..10).map(|i| sample_at(Vec3::new(0.01 * i as f64, 0.2, 0.2), 0.0, 0)));
        assert_eq!(pool.num_buckets(), 1);
        assert_eq!(pool.len(), 10);

        let mut rng = stream(1, Stage::Batches, 0);
        let pts: Vec<Vec3> = (0..500).map(|_| Vec3::new(uniform(&mut rng, 0.3, 0.6), uniform(&mut rng, -0.05, 0.05), 0.1)).collect();
        let mut pool = ReplayPool::new(&PoolConfig::default());
        pool.insert_samples(pts.iter().map(|&p| sample_at(p, 0.0, 0)));
        let mut oracle: BTreeMap<[i64; 3], usize> = BTreeMap::new();
        for p in &pts {
            let k = [(p.x / 0.45).floor() as i64, (p.y / 0.45).floor() as i64, (p.z / 0.45).floor() as i64];
            *oracle.entry(k).or_default() += 1;
        }
        let got: Vec<usize> = pool.buckets().values().map(Vec::len).collect();
        assert_eq!(got, oracle.values().copied().collect::<Vec<_>>());
        assert_eq!(pool.len(), 500);
    }

    #[test]
    fn window_boundaries() {
        let cfg = PoolConfig { reliability: ReliabilityParams { alpha: 1.0, radius: 5.0 }, ..PoolConfig::default() };
        let mut pool = ReplayPool::new(&cfg);
        pool.insert_samples([sample_at(Vec3::new(5.01, 0.0, 0.0), 0.0, 0), sample_at(Vec3::new(4.99, 0.0, 0.0), 0.0, 0)]);
        assert_eq!(pool.prune_window(Vec3::ZERO), 1);
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.prune_window(Vec3::ZERO), 0);
        assert_eq!(pool.prune_window(Vec3::new(100.0, 0.0, 0.0)), 1);
        assert!(pool.is_empty());
        assert_eq!(pool.num_buckets(), 0);
    }

    #[test]
    fn capacity_keeps_most_reliable() {
        let cfg = PoolConfig { capacity: 256, ..PoolConfig::default() };
        let mut rng = stream(3, Stage::Batches, 0);
        let samples: Vec<TsdfSample> = (0..300).map(|i| sample_at(Vec3::splat(0.1), rng.gen::<f64>(), i % 7)).collect();
        let mut pool = ReplayPool::new(&cfg);
        pool.insert_samples(samples);
        let mut oracle: Vec<TsdfSample> = pool.samples().copied().collect();
        oracle.sort_by(|a, b| a.mse.partial_cmp(&b.mse).unwrap());
        oracle.truncate(256);
        let mut want: Vec<u64> = oracle.iter().map(|s| s.seq).collect();
        want.sort_unstable();
        assert_eq!(pool.enforce_capacity(), 44);
        let got: Vec<u64> = pool.samples().map(|s| s.seq).collect();
        assert_eq!(got, want);
        assert_eq!(pool.enforce_capacity(), 0);
    }

    #[test]
    fn ties_prefer_newer_frames() {
        let cfg = PoolConfig { capacity: 4, ..PoolConfig::default() };
        let mut pool = ReplayPool::new(&cfg);
        pool.insert_samples((0..10).map(|i| sample_at(Vec3::splat(0.1), 0.5, i / 2)));
        pool.enforce_capacity();
        let frames: Vec<u64> = pool.samples().map(|s| s.frame_id).collect();
        assert_eq!(frames, vec![3, 3, 4, 4]);
    }

    #[test]
    fn capacity_is_insertion_order_independent() {
        let cfg = PoolConfig { capacity: 16, ..PoolConfig::default() };
        let mut rng = stream(5, Stage::Batches, 0);
        let mut samples: Vec<TsdfSample> = (0..200)
            .map(|i| sample_at(Vec3::new(uniform(&mut rng, 0.0, 0.9), 0.1, 0.1), rng.gen::<f64>(), i))
            .collect();
        let run = |s: &[TsdfSample]| {
            let mut pool = ReplayPool::new(&cfg);
            pool.insert_samples(s.iter().copied());
            pool.enforce_capacity();
            let mut ids: Vec<u64> = pool.samples().map(|s| s.frame_id).collect();
            ids.sort_unstable();
            ids
        };
        let a = run(&samples);
        samples.shuffle(&mut rng);
        assert_eq!(a, run(&samples));
    }
}
