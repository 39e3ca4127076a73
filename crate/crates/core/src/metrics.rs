//! Reconstruction quality: accuracy, completeness, Chamfer-L1, precision,
//! recall and F1 between a reconstruction and a reference surface.

use alloc::vec::Vec;
use rand::Rng;

use crate::kdtree::KdTree;
use crate::math::{sqrt, Vec3};
use crate::mesher::TriMesh;
use crate::rng::{self, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("mesh has no triangles with positive area")]
    EmptyMesh,
    #[error("point set is empty")]
    EmptyPointSet,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    /// Points sampled per mesh.
    pub n_points: usize,
    /// Precision/recall distance threshold (m).
    pub threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_points: 1_000_000, threshold: 0.10, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub accuracy_cm: f64,
    pub completeness_cm: f64,
    pub chamfer_l1_cm: f64,
    pub precision_pct: f64,
    pub recall_pct: f64,
    pub f1_pct: f64,
}

/// Reference geometry: a mesh to be sampled or a point cloud used as-is.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Mesh(&'a TriMesh),
    Points(&'a [Vec3]),
}

/// `n` points distributed uniformly by area over the mesh surface.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<Vec3>, MetricsError> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MetricsError::EmptyMesh);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.corners(t);
        let r1 = sqrt(rng.gen::<f64>());
        let r2 = rng.gen::<f64>();
        out.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(out)
}

/// Exact nearest-neighbour distance from every point of `from` to `to`.
pub fn nn_distances(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>, MetricsError> {
    if from.is_empty() || to.is_empty() {
        return Err(MetricsError::EmptyPointSet);
    }
    let tree = KdTree::new(to);
    Ok(from.iter().map(|&p| tree.nearest(p).expect("non-empty tree").1).collect())
}

/// Metrics from two point sets.
pub fn evaluate_points(recon: &[Vec3], reference: &[Vec3], threshold: f64) -> Result<EvalResult, MetricsError> {
    let to_ref = nn_distances(recon, reference)?;
    let to_recon = nn_distances(reference, recon)?;
    Ok(metrics_from_distances(&to_ref, &to_recon, threshold))
}

pub fn metrics_from_distances(recon_to_ref: &[f64], ref_to_recon: &[f64], threshold: f64) -> EvalResult {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| 100.0 * d.iter().filter(|&&x| x < threshold).count() as f64 / d.len() as f64;
    let accuracy = mean(recon_to_ref);
    let completeness = mean(ref_to_recon);
    let precision = frac(recon_to_ref);
    let recall = frac(ref_to_recon);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    EvalResult {
        accuracy_cm: 100.0 * accuracy,
        completeness_cm: 100.0 * completeness,
        chamfer_l1_cm: 100.0 * (accuracy + completeness) / 2.0,
        precision_pct: precision,
        recall_pct: recall,
        f1_pct: f1,
    }
}

/// Samples the reconstruction (and a mesh reference) and scores them. Both
/// meshes are sampled from identically seeded streams, so identical meshes
/// yield identical point sets.
pub fn evaluate(recon: &TriMesh, reference: Reference<'_>, cfg: &EvalConfig) -> Result<EvalResult, MetricsError> {
    let recon_pts = sample_surface(recon, cfg.n_points, &mut rng::stream(cfg.seed, Stage::SurfaceSampling, 0))?;
    let owned;
    let ref_pts: &[Vec3] = match reference {
        Reference::Mesh(m) => {
            owned = sample_surface(m, cfg.n_points, &mut rng::stream(cfg.seed, Stage::SurfaceSampling, 0))?;
            &owned
        }
        Reference::Points(p) => p,
    };
    evaluate_points(&recon_pts, ref_pts, cfg.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform};
    use alloc::vec;

    fn quad(z: f64, x0: f64, x1: f64) -> TriMesh {
        TriMesh {
            vertices: vec![Vec3::new(x0, 0.0, z), Vec3::new(x1, 0.0, z), Vec3::new(x1, 1.0, z), Vec3::new(x0, 1.0, z)],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            scalars: None,
        }
    }

    #[test]
    fn samples_stay_in_triangle() {
        let mesh = TriMesh {
            vertices: vec![Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2]],
            scalars: None,
        };
        let pts = sample_surface(&mesh, 5000, &mut stream(1, Stage::SurfaceSampling, 0)).unwrap();
        for p in pts {
            let (b1, b2) = (p.x / 2.0, p.y);
            assert!(b1 >= 0.0 && b2 >= 0.0 && b1 + b2 <= 1.0 + 1e-12 && p.z == 0.0);
        }
        assert!(sample_surface(&mesh, 0, &mut stream(1, Stage::SurfaceSampling, 0)).unwrap().is_empty());
        assert_eq!(sample_surface(&TriMesh::default(), 3, &mut stream(1, Stage::SurfaceSampling, 0)).unwrap_err(), MetricsError::EmptyMesh);
    }

    #[test]
    fn area_weighting_is_binomial() {
        // Two triangles with area ratio 9:1.
        let mesh = TriMesh {
            vertices: vec![Vec3::ZERO, Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 3.0, 0.0), Vec3::new(10.0, 0.0, 0.0), Vec3::new(11.0, 0.0, 0.0), Vec3::new(10.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            scalars: None,
        };
        let n = 20_000;
        let pts = sample_surface(&mesh, n, &mut stream(2, Stage::SurfaceSampling, 0)).unwrap();
        let big = pts.iter().filter(|p| p.x < 5.0).count() as f64;
        let (p, nf) = (0.9, n as f64);
        let sd = sqrt(nf * p * (1.0 - p));
        assert!((big - nf * p).abs() < 3.0 * sd, "{big}");
    }

    #[test]
    fn nn_matches_brute_force() {
        let mut rng = stream(3, Stage::SurfaceSampling, 0);
        let a: Vec<Vec3> = (0..1000).map(|_| Vec3::new(uniform(&mut rng, 0.0, 1.0), uniform(&mut rng, 0.0, 1.0), uniform(&mut rng, 0.0, 1.0))).collect();
        let b: Vec<Vec3> = (0..1000).map(|_| Vec3::new(uniform(&mut rng, 0.0, 1.0), uniform(&mut rng, 0.0, 1.0), uniform(&mut rng, 0.0, 1.0))).collect();
        let got = nn_distances(&a, &b).unwrap();
        for (p, d) in a.iter().zip(&got) {
            let brute = b.iter().map(|q| p.distance(*q)).fold(f64::INFINITY, f64::min);
            assert_eq!(*d, brute);
        }
        assert_eq!(nn_distances(&a, &a).unwrap().iter().sum::<f64>(), 0.0);
        assert_eq!(nn_distances(&[Vec3::ZERO], &[Vec3::new(1.0, 0.0, 0.0)]).unwrap(), vec![1.0]);
        assert!(nn_distances(&[], &a).is_err());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let m = quad(0.0, 0.0, 1.0);
        let r = evaluate(&m, Reference::Mesh(&m), &EvalConfig { n_points: 2000, ..Default::default() }).unwrap();
        assert_eq!((r.accuracy_cm, r.completeness_cm, r.chamfer_l1_cm), (0.0, 0.0, 0.0));
        assert_eq!((r.precision_pct, r.recall_pct, r.f1_pct), (100.0, 100.0, 100.0));
    }

    #[test]
    fn half_coverage() {
        // Reference covers x in [0, 2]; reconstruction only [0, 1].
        let gt = quad(0.0, 0.0, 2.0);
        let recon = quad(0.0, 0.0, 1.0);
        let cfg = EvalConfig { n_points: 40_000, threshold: 0.1, seed: 4 };
        let r = evaluate(&recon, Reference::Mesh(&gt), &cfg).unwrap();
        assert_eq!(r.precision_pct, 100.0);
        // Reference points with x in [1, 1.1) are still within threshold.
        assert!((r.recall_pct - 55.0).abs() < 1.5, "{}", r.recall_pct);
        let expected_f1 = 2.0 * 100.0 * r.recall_pct / (100.0 + r.recall_pct);
        assert!((r.f1_pct - expected_f1).abs() < 1e-9);
        assert!((r.chamfer_l1_cm - (r.accuracy_cm + r.completeness_cm) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn thresholds_are_monotone_and_swap_is_symmetric() {
        let mut rng = stream(5, Stage::SurfaceSampling, 0);
        let a: Vec<Vec3> = (0..500).map(|_| Vec3::new(uniform(&mut rng, 0.0, 2.0), uniform(&mut rng, 0.0, 2.0), 0.0)).collect();
        let b: Vec<Vec3> = (0..700).map(|_| Vec3::new(uniform(&mut rng, 0.0, 2.5), uniform(&mut rng, 0.0, 2.0), uniform(&mut rng, 0.0, 0.3))).collect();
        let r10 = evaluate_points(&a, &b, 0.10).unwrap();
        let r20 = evaluate_points(&a, &b, 0.20).unwrap();
        assert!(r20.precision_pct >= r10.precision_pct && r20.recall_pct >= r10.recall_pct);
        let swapped = evaluate_points(&b, &a, 0.10).unwrap();
        assert_eq!(swapped.accuracy_cm, r10.completeness_cm);
        assert_eq!(swapped.precision_pct, r10.recall_pct);
        assert_eq!(swapped.chamfer_l1_cm, r10.chamfer_l1_cm);
    }
}
