//! Converts a posed scan into truncated signed distance supervision.

use alloc::vec::Vec;
use hashbrown::HashSet;

use crate::kdtree::KdTree;
use crate::math::{cell_and_fraction, symmetric_eigen3, Mat3, Vec3};
use crate::replay_pool::{reliability_mse, ReliabilityParams};
use crate::rng::{self, Stage};

/// Smallest incidence cosine; keeps the incidence angle strictly below 90 degrees.
pub const MIN_INCIDENCE_COS: f64 = 1e-3;

/// A scan in world coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scan {
    pub origin: Vec3,
    pub points: Vec<Vec3>,
    pub frame_id: u64,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One supervision point.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TsdfSample {
    pub position: Vec3,
    /// Truncated projective signed distance (m).
    pub label: f64,
    pub ray_len: f64,
    pub cos_incidence: f64,
    /// Expected squared supervision error; lower is more reliable.
    pub mse: f64,
    pub frame_id: u64,
    /// Pool-wide insertion sequence number; assigned by the replay pool.
    pub seq: u64,
}

/// Which depth distribution produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Surface,
    Front,
    Behind,
    FreeSpace,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SamplerConfig {
    /// Samples in front of the surface within the truncation band.
    pub front: usize,
    /// Samples behind the surface within the truncation band.
    pub behind: usize,
    /// Free-space samples between `min_depth` and the truncation band.
    pub free_space: usize,
    /// Truncation distance (m).
    pub truncation: f64,
    /// Minimum free-space sampling depth (m).
    pub min_depth: f64,
    /// Neighbours used for PCA normals.
    pub normal_neighbors: usize,
    /// Optional voxel downsampling of the input scan (m).
    pub downsample_voxel: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            front: 3,
            behind: 1,
            free_space: 2,
            truncation: 0.3,
            min_depth: 0.3,
            normal_neighbors: 20,
            downsample_voxel: None,
        }
    }
}

impl SamplerConfig {
    pub fn samples_per_ray(&self) -> usize {
        1 + self.front + self.behind + self.free_space
    }

    pub fn is_valid(&self) -> bool {
        self.truncation > 0.0 && self.min_depth > 0.0 && self.normal_neighbors >= 3
            && self.downsample_voxel.is_none_or(|v| v > 0.0)
    }
}

/// Per-point unit normals facing the sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Normals {
    pub normals: Vec<Vec3>,
    /// Set where the neighbourhood was degenerate and the reversed ray
    /// direction was used instead.
    pub degenerate: Vec<bool>,
}

/// PCA normals over the `k` nearest neighbours of each point, oriented
/// towards the scan origin.
pub fn estimate_normals(scan: &Scan, k: usize) -> Normals {
    let n = scan.points.len();
    let mut normals = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    let tree = KdTree::new(&scan.points);
    let k = k.min(n);
    for &p in &scan.points {
        let fallback = (scan.origin - p).normalized();
        let neighbours = tree.k_nearest(p, k);
        match pca_normal(neighbours.iter().map(|&(i, _)| scan.points[i])) {
            Some(mut nrm) => {
                if nrm.dot(scan.origin - p) < 0.0 {
                    nrm = -nrm;
                }
                normals.push(nrm);
                degenerate.push(false);
            }
            None => {
                normals.push(fallback);
                degenerate.push(true);
            }
        }
    }
    Normals { normals, degenerate }
}

/// Smallest-eigenvalue eigenvector of the neighbourhood covariance, or `None`
/// when fewer than three points or the points are (nearly) collinear.
fn pca_normal(points: impl Iterator<Item = Vec3> + Clone) -> Option<Vec3> {
    let count = points.clone().count();
    if count < 3 {
        return None;
    }
    let mean = points.clone().fold(Vec3::ZERO, |a, p| a + p) / count as f64;
    let mut cov: Mat3 = [[0.0; 3]; 3];
    for p in points {
        let d = p - mean;
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let (vals, vecs) = symmetric_eigen3(&cov);
    // Two vanishing eigenvalues mean a line (or a point): no plane to fit.
    if vals[1] <= 1e-10 * vals[2].max(f64::MIN_POSITIVE) {
        return None;
    }
    Some(vecs[0])
}

/// `|n . r| / |r|`, clamped to `[MIN_INCIDENCE_COS, 1]`.
pub fn compute_incidence(ray: Vec3, normal: Vec3) -> f64 {
    let len = ray.norm();
    if len <= 0.0 {
        return 1.0;
    }
    (normal.dot(ray).abs() / len).clamp(MIN_INCIDENCE_COS, 1.0)
}

/// Keeps the first point of every occupied voxel of size `voxel`.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    let mut seen = HashSet::new();
    points.iter().copied().filter(|&p| seen.insert(cell_and_fraction(p, voxel).0)).collect()
}

/// Samples along every ray of `scan`, labelled with the truncated projective
/// distance. Deterministic for a given `(seed, scan.frame_id)`.
pub fn generate_samples(
    scan: &Scan,
    normals: &Normals,
    cfg: &SamplerConfig,
    reliability: &ReliabilityParams,
    seed: u64,
) -> Vec<TsdfSample> {
    generate_samples_with_kinds(scan, normals, cfg, reliability, seed).into_iter().map(|(s, _)| s).collect()
}

/// [`generate_samples`], also reporting which distribution produced each sample.
pub fn generate_samples_with_kinds(
    scan: &Scan,
    normals: &Normals,
    cfg: &SamplerConfig,
    reliability: &ReliabilityParams,
    seed: u64,
) -> Vec<(TsdfSample, SampleKind)> {
    assert_eq!(normals.normals.len(), scan.points.len(), "one normal per scan point");
    let mut rng = rng::stream(seed, Stage::RaySamples, scan.frame_id);
    let trunc = cfg.truncation;
    let mut out = Vec::with_capacity(scan.points.len() * cfg.samples_per_ray());
    for (&p, &n) in scan.points.iter().zip(&normals.normals) {
        let ray = p - scan.origin;
        let len = ray.norm();
        if !(len > 0.0) || !len.is_finite() {
            continue;
        }
        let dir = ray / len;
        let cos = compute_incidence(ray, n);
        let mse = reliability_mse(len, cos, reliability);
        let mut emit = |depth: f64, kind: SampleKind| {
            let sample = TsdfSample {
                position: scan.origin + dir * depth,
                label: (len - depth).clamp(-trunc, trunc),
                ray_len: len,
                cos_incidence: cos,
                mse,
                frame_id: scan.frame_id,
                seq: 0,
            };
            out.push((sample, kind));
        };
        emit(len, SampleKind::Surface);
        for _ in 0..cfg.front {
            emit(rng::uniform(&mut rng, len - trunc, len), SampleKind::Front);
        }
        for _ in 0..cfg.behind {
            emit(rng::uniform(&mut rng, len, len + trunc), SampleKind::Behind);
        }
        if len - trunc > cfg.min_depth {
            for _ in 0..cfg.free_space {
                emit(rng::uniform(&mut rng, cfg.min_depth, len - trunc), SampleKind::FreeSpace);
            }
        }
    }
    out
}
