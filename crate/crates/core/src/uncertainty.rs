//! Epistemic uncertainty from a zero-valued perturbation field with a
//! diagonal Laplace posterior, and uncertainty-guided batch construction.
//!
//! The perturbation field is never applied to predictions. Its only role is
//! to define the Jacobian `w_v(u) * grad_x sdf(u)` of each training sample with
//! respect to the 3-vector stored at vertex `v`, whose squared entries are
//! accumulated as diagonal Fisher information.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use hashbrown::HashMap;
use rand::Rng;

use crate::math::{cell_and_fraction, trilinear_weights, Vec3, CORNER_OFFSETS};
use crate::ray_sampler::TsdfSample;
use crate::replay_pool::{PoolKey, ReplayPool};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct UncertaintyConfig {
    /// Perturbation lattice spacing (m).
    pub cell_size: f64,
    /// Prior standard deviation of the perturbation parameters.
    pub prior_std: f64,
    /// Threshold on min-max normalized uncertainty.
    pub threshold: f64,
    /// Batch draws reserved for uncertain voxels.
    pub uncertain_draws: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig { cell_size: 0.45, prior_std: 1.0, threshold: 0.98, uncertain_draws: 1000 }
    }
}

impl UncertaintyConfig {
    pub fn is_valid(&self) -> bool {
        self.cell_size > 0.0 && self.prior_std > 0.0 && (0.0..=1.0).contains(&self.threshold)
    }
}

/// Per-vertex diagonal Fisher information of the perturbation field.
#[derive(Debug, Clone)]
pub struct PerturbField {
    cell_size: f64,
    prior_std: f64,
    index: HashMap<[i32; 3], u32>,
    coords: Vec<[i32; 3]>,
    fisher: Vec<Vec3>,
    variance: Vec<Vec3>,
}

impl PerturbField {
    pub fn new(cell_size: f64, prior_std: f64) -> Self {
        assert!(cell_size > 0.0 && prior_std > 0.0);
        PerturbField { cell_size, prior_std, index: HashMap::new(), coords: Vec::new(), fisher: Vec::new(), variance: Vec::new() }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std
    }

    /// Per-component prior variance `gamma^2`.
    pub fn prior_variance(&self) -> f64 {
        self.prior_std * self.prior_std
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn fisher(&self, coord: [i32; 3]) -> Option<Vec3> {
        self.index.get(&coord).map(|&i| self.fisher[i as usize])
    }

    pub fn fishers(&self) -> &[Vec3] {
        &self.fisher
    }

    fn variance_of(&self, fisher: Vec3) -> Vec3 {
        let prior_precision = 1.0 / self.prior_variance();
        Vec3::new(1.0 / (fisher.x + prior_precision), 1.0 / (fisher.y + prior_precision), 1.0 / (fisher.z + prior_precision))
    }

    fn vertex_or_insert(&mut self, coord: [i32; 3]) -> usize {
        if let Some(&i) = self.index.get(&coord) {
            return i as usize;
        }
        let i = self.coords.len();
        self.index.insert(coord, i as u32);
        self.coords.push(coord);
        self.fisher.push(Vec3::ZERO);
        self.variance.push(Vec3::splat(self.prior_variance()));
        i
    }

    /// Restores one vertex's Fisher accumulator.
    pub fn restore_vertex(&mut self, coord: [i32; 3], fisher: Vec3) {
        let i = self.vertex_or_insert(coord);
        self.fisher[i] = fisher;
        self.variance[i] = self.variance_of(fisher);
    }

    /// Adds `w_v(u)^2 * (g * g)` to each of the 8 vertices around every
    /// `(u, g = grad_x sdf(u))` pair.
    pub fn accumulate_fisher(&mut self, samples: impl IntoIterator<Item = (Vec3, Vec3)>) {
        for (u, g) in samples {
            if !u.is_finite() || !g.is_finite() {
                continue;
            }
            let (cell, t) = cell_and_fraction(u, self.cell_size);
            let w = trilinear_weights(t);
            let gg = g.mul_elem(g);
            for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                if w[c] == 0.0 {
                    continue;
                }
                let i = self.vertex_or_insert([cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]]);
                self.fisher[i] += gg * (w[c] * w[c]);
                self.variance[i] = self.variance_of(self.fisher[i]);
            }
        }
    }

    /// Diagonal posterior variance `1 / (fisher + gamma^-2)` of every vertex.
    pub fn vertex_variance(&self) -> impl Iterator<Item = ([i32; 3], Vec3)> + '_ {
        self.coords.iter().copied().zip(self.variance.iter().copied())
    }

    /// Norm of the trilinearly interpolated variance vector at `q`; vertices
    /// without data contribute the prior variance.
    pub fn query_sigma(&self, q: Vec3) -> f64 {
        let prior = Vec3::splat(self.prior_variance());
        if !q.is_finite() {
            return prior.norm();
        }
        let (cell, t) = cell_and_fraction(q, self.cell_size);
        let mut corner = [prior; 8];
        let mut any = false;
        for (c, off) in CORNER_OFFSETS.iter().enumerate() {
            if let Some(&i) = self.index.get(&[cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]]) {
                corner[c] = self.variance[i as usize];
                any = true;
            }
        }
        if !any {
            return prior.norm();
        }
        // A non-negative weighted sum is monotone in every corner under
        // rounding; clamping to the corner range keeps equal corners exact.
        let w = trilinear_weights(t);
        let mut sum = Vec3::ZERO;
        let (mut lo, mut hi) = (corner[0], corner[0]);
        for (c, v) in corner.iter().enumerate() {
            sum += *v * w[c];
            lo = lo.min_elem(*v);
            hi = hi.max_elem(*v);
        }
        Vec3::new(sum.x.max(lo.x).min(hi.x), sum.y.max(lo.y).min(hi.y), sum.z.max(lo.z).min(hi.z)).norm()
    }
}

/// Per-voxel uncertainty evaluation of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelUncertainty {
    pub key: PoolKey,
    pub center: Vec3,
    pub sigma: f64,
    pub normalized: f64,
    pub uncertain: bool,
}

/// Split of the occupied pool voxels into uncertain and certain sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoxelPartition {
    pub uncertain: BTreeSet<PoolKey>,
    pub certain: BTreeSet<PoolKey>,
    pub evaluations: Vec<VoxelUncertainty>,
}

/// Evaluates `query_sigma` at every occupied pool-voxel centre, min-max
/// normalizes over the frame and thresholds at `threshold`. If all values are
/// equal every voxel is certain.
pub fn partition_voxels(pool: &ReplayPool, field: &PerturbField, threshold: f64) -> VoxelPartition {
    let size = pool.voxel_size();
    let raw: Vec<(PoolKey, Vec3, f64)> = pool
        .buckets()
        .keys()
        .map(|&k| {
            let c = k.center(size);
            (k, c, field.query_sigma(c))
        })
        .collect();
    partition_values(raw, threshold)
}

/// Thresholds precomputed raw uncertainties (shared by [`partition_voxels`]).
pub fn partition_values(raw: Vec<(PoolKey, Vec3, f64)>, threshold: f64) -> VoxelPartition {
    let lo = raw.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let hi = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut part = VoxelPartition::default();
    for (key, center, sigma) in raw {
        let normalized = if span > 0.0 { (sigma - lo) / span } else { 0.0 };
        let uncertain = span > 0.0 && normalized >= threshold;
        if uncertain {
            part.uncertain.insert(key);
        } else {
            part.certain.insert(key);
        }
        part.evaluations.push(VoxelUncertainty { key, center, sigma, normalized, uncertain });
    }
    part
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SamplingError {
    #[error("the replay pool is empty")]
    EmptyPool,
}

/// How training batches are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SamplingStrategy {
    /// A fixed share from uncertain voxels, the rest from certain ones.
    #[default]
    UncertaintyGuided,
    /// Uniform over the whole pool.
    Uniform,
}

/// Batch size and uncertain share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub uncertain_draws: usize,
}

/// Samples of a set of buckets addressable by a flat index.
#[derive(Debug, Default)]
struct BucketSet<'a> {
    buckets: Vec<&'a [TsdfSample]>,
    cumulative: Vec<usize>,
}

impl<'a> BucketSet<'a> {
    fn push(&mut self, bucket: &'a [TsdfSample]) {
        let prev = self.len();
        self.buckets.push(bucket);
        self.cumulative.push(prev + bucket.len());
    }

    fn len(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    fn get(&self, flat: usize) -> &'a TsdfSample {
        let b = self.cumulative.partition_point(|&c| c <= flat);
        let start = if b == 0 { 0 } else { self.cumulative[b - 1] };
        &self.buckets[b][flat - start]
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a TsdfSample {
        self.get(rng.gen_range(0..self.len()))
    }
}

/// Draws batches from a pool for one frame's partition.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    uncertain: BucketSet<'a>,
    certain: BucketSet<'a>,
}

/// One drawn batch.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub samples: Vec<&'a TsdfSample>,
    /// How many leading entries of `samples` came from uncertain voxels.
    pub uncertain_count: usize,
}

impl<'a> BatchSampler<'a> {
    /// Sampler over `pool` split by `partition`; buckets absent from the
    /// partition count as certain.
    pub fn new(pool: &'a ReplayPool, partition: &VoxelPartition) -> Self {
        let mut s = BatchSampler { uncertain: BucketSet::default(), certain: BucketSet::default() };
        for (key, bucket) in pool.buckets() {
            if partition.uncertain.contains(key) {
                s.uncertain.push(bucket);
            } else {
                s.certain.push(bucket);
            }
        }
        s
    }

    /// Sampler treating the whole pool as one set.
    pub fn uniform(pool: &'a ReplayPool) -> Self {
        BatchSampler::new(pool, &VoxelPartition::default())
    }

    pub fn uncertain_len(&self) -> usize {
        self.uncertain.len()
    }

    pub fn certain_len(&self) -> usize {
        self.certain.len()
    }

    /// Draws exactly `plan.batch_size` samples with replacement:
    /// `min(uncertain_draws, batch_size, #uncertain samples)` from uncertain
    /// voxels, the rest from certain ones, backfilling from whichever set is
    /// non-empty.
    pub fn draw<R: Rng + ?Sized>(&self, plan: BatchPlan, rng: &mut R) -> Result<Batch<'a>, SamplingError> {
        let (nu, nc) = (self.uncertain.len(), self.certain.len());
        if nu + nc == 0 {
            return Err(SamplingError::EmptyPool);
        }
        let mut n_unc = plan.uncertain_draws.min(plan.batch_size).min(nu);
        if nc == 0 {
            n_unc = plan.batch_size;
        }
        let mut samples = Vec::with_capacity(plan.batch_size);
        for _ in 0..n_unc {
            samples.push(self.uncertain.draw(rng));
        }
        for _ in n_unc..plan.batch_size {
            samples.push(self.certain.draw(rng));
        }
        Ok(Batch { samples, uncertain_count: n_unc })
    }
}

/// Convenience wrapper: build a sampler and draw one batch.
pub fn draw_batch<'a, R: Rng + ?Sized>(
    pool: &'a ReplayPool,
    partition: &VoxelPartition,
    plan: BatchPlan,
    rng: &mut R,
) -> Result<Batch<'a>, SamplingError> {
    BatchSampler::new(pool, partition).draw(plan, rng)
}
