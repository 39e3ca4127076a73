//! Synthetic scenes with analytic signed distances and a spinning LiDAR model.

use alloc::vec::Vec;

use crate::math::{cos, sin, Pose, Vec3};
use crate::mesher::{eval_sdf_grid, extract_mesh, MeshError, TriMesh};
use crate::ray_sampler::Scan;
use crate::rng::{self, Stage};

pub const TRACE_MAX_STEPS: usize = 256;
/// Largest accepted Newton correction along a ray (m).
pub const NEWTON_MAX_STEP: f64 = 1e-2;
pub const TRACE_EPS: f64 = 1e-5;
const NORMAL_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case", deny_unknown_fields))]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    /// Solid axis-aligned box.
    Box { min: Vec3, max: Vec3 },
    /// Half-space `normal . x < offset` is solid; `normal` must be unit length.
    Plane { normal: Vec3, offset: f64 },
}

impl Primitive {
    pub fn sdf(&self, q: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (q - center).norm() - radius,
            Primitive::Box { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let d = (q - c).abs() - h;
                let outside = d.max_elem(Vec3::ZERO).norm();
                outside + d.max_component().min(0.0)
            }
            Primitive::Plane { normal, offset } => normal.dot(q) - offset,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => center.is_finite() && radius > 0.0,
            Primitive::Box { min, max } => min.is_finite() && max.is_finite() && min.x < max.x && min.y < max.y && min.z < max.z,
            Primitive::Plane { normal, offset } => (normal.norm() - 1.0).abs() < 1e-9 && offset.is_finite(),
        }
    }
}

/// Union of primitives.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Scene { primitives }
    }

    /// Min over primitive distances; `+inf` for an empty scene.
    pub fn sdf(&self, q: Vec3) -> f64 {
        self.primitives.iter().map(|p| p.sdf(q)).fold(f64::INFINITY, f64::min)
    }

    /// Adds the six walls of an axis-aligned room, solid outside `[min, max]`.
    /// The distance is exact everywhere inside the room.
    pub fn add_room(&mut self, min: Vec3, max: Vec3) {
        let axes = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
        for (a, n) in axes.into_iter().enumerate() {
            self.primitives.push(Primitive::Plane { normal: n, offset: min[a] });
            self.primitives.push(Primitive::Plane { normal: -n, offset: -max[a] });
        }
    }

    /// Central-difference gradient, normalised.
    pub fn normal(&self, q: Vec3) -> Vec3 {
        let h = NORMAL_STEP;
        let d = |e: Vec3| self.sdf(q + e * h) - self.sdf(q - e * h);
        Vec3::new(d(Vec3::new(1.0, 0.0, 0.0)), d(Vec3::new(0.0, 1.0, 0.0)), d(Vec3::new(0.0, 0.0, 1.0))).normalized()
    }

    pub fn is_valid(&self) -> bool {
        self.primitives.iter().all(Primitive::is_valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LidarModel {
    pub azimuth_count: usize,
    pub elevation_count: usize,
    /// Lowest beam elevation (degrees).
    pub elevation_min_deg: f64,
    /// Highest beam elevation (degrees).
    pub elevation_max_deg: f64,
    pub max_range: f64,
    /// Range noise standard deviation per metre of range.
    pub noise_slope: f64,
    pub seed: u64,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            azimuth_count: 360,
            elevation_count: 32,
            elevation_min_deg: -30.0,
            elevation_max_deg: 30.0,
            max_range: 50.0,
            noise_slope: 0.0,
            seed: 0,
        }
    }
}

impl LidarModel {
    pub fn is_valid(&self) -> bool {
        self.azimuth_count >= 1
            && self.elevation_count >= 1
            && self.elevation_min_deg <= self.elevation_max_deg
            && self.max_range > 0.0
            && self.noise_slope >= 0.0
    }

    /// Unit beam directions in the sensor frame, ordered by (elevation, azimuth).
    pub fn directions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.azimuth_count * self.elevation_count);
        for e in 0..self.elevation_count {
            let el_deg = if self.elevation_count == 1 {
                0.5 * (self.elevation_min_deg + self.elevation_max_deg)
            } else {
                self.elevation_min_deg
                    + (self.elevation_max_deg - self.elevation_min_deg) * e as f64 / (self.elevation_count - 1) as f64
            };
            let el = el_deg.to_radians();
            for a in 0..self.azimuth_count {
                let az = core::f64::consts::TAU * a as f64 / self.azimuth_count as f64;
                out.push(Vec3::new(cos(el) * cos(az), cos(el) * sin(az), sin(el)));
            }
        }
        out
    }
}

/// A simulated scan with per-point ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScan {
    pub scan: Scan,
    /// Unit surface normals at the noiseless hits.
    pub normals: Vec<Vec3>,
    /// Noiseless hit ranges.
    pub true_ranges: Vec<f64>,
}

/// First hit distance along `dir` within `max_range`. Sphere tracing finds
/// the hit to `TRACE_EPS`; a few Newton steps then polish it.
pub fn trace_ray(scene: &Scene, origin: Vec3, dir: Vec3, max_range: f64) -> Option<f64> {
    let mut t = 0.0;
    let mut hit = false;
    for _ in 0..TRACE_MAX_STEPS {
        let d = scene.sdf(origin + dir * t);
        if d.abs() < TRACE_EPS {
            hit = true;
            break;
        }
        t += d;
        if !(t <= max_range) || t < 0.0 {
            return None;
        }
    }
    if !hit {
        return None;
    }
    for _ in 0..4 {
        let p = origin + dir * t;
        let d = scene.sdf(p);
        let slope = scene.normal(p).dot(dir);
        if d == 0.0 || slope.abs() < 1e-3 {
            break;
        }
        let step = d / slope;
        // Reject steps that leave the neighbourhood or do not reduce the residual.
        if step.abs() > NEWTON_MAX_STEP || scene.sdf(origin + dir * (t - step)).abs() >= d.abs() {
            break;
        }
        t -= step;
    }
    (t >= 0.0 && t <= max_range).then_some(t)
}

/// Casts every beam of `model` from `pose`. Misses are omitted; hits are
/// perturbed along the ray by Gaussian range noise of std `noise_slope * range`.
pub fn simulate_scan(pose: &Pose, model: &LidarModel, scene: &Scene, frame_id: u64) -> SimScan {
    let origin = pose.translation;
    let mut rng = rng::stream(model.seed, Stage::LidarNoise, frame_id);
    let mut scan = Scan { origin, points: Vec::new(), frame_id };
    let mut normals = Vec::new();
    let mut true_ranges = Vec::new();
    for d in model.directions() {
        let dir = pose.transform_vector(d).normalized();
        let Some(range) = trace_ray(scene, origin, dir, model.max_range) else { continue };
        let hit = origin + dir * range;
        let noisy = if model.noise_slope > 0.0 {
            range + rng::standard_normal(&mut rng) * model.noise_slope * range
        } else {
            range
        };
        scan.points.push(origin + dir * noisy);
        normals.push(scene.normal(hit));
        true_ranges.push(range);
    }
    SimScan { scan, normals, true_ranges }
}

/// Marching cubes over the analytic distance in `[min, max]`.
pub fn ground_truth_mesh(scene: &Scene, min: Vec3, max: Vec3, spacing: f64) -> Result<TriMesh, MeshError> {
    let field = |q: Vec3| Some(scene.sdf(q));
    let grid = eval_sdf_grid(&field, min, max, spacing)?;
    extract_mesh(&grid)
}

/// Circular sensor path around `center` with an optional vertical wave.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Orbit {
    pub center: Vec3,
    pub radius: f64,
    /// Revolutions over the whole sequence.
    pub turns: f64,
    pub start_angle_deg: f64,
    /// Peak vertical offset from `center.z` (m).
    pub height_amplitude: f64,
    /// Vertical oscillations over the whole sequence.
    pub height_cycles: f64,
}

impl Default for Orbit {
    fn default() -> Self {
        Orbit { center: Vec3::new(0.0, 0.0, 3.0), radius: 4.0, turns: 2.0, start_angle_deg: 0.0, height_amplitude: 2.4, height_cycles: 1.5 }
    }
}

impl Orbit {
    /// Pose of frame `i` out of `frames`, heading along the path tangent.
    pub fn pose(&self, i: usize, frames: usize) -> Pose {
        let s = i as f64 / frames.max(1) as f64;
        let a = self.start_angle_deg.to_radians() + core::f64::consts::TAU * self.turns * s;
        let z = self.center.z - self.height_amplitude * cos(core::f64::consts::TAU * self.height_cycles * s);
        let t = Vec3::new(self.center.x + self.radius * cos(a), self.center.y + self.radius * sin(a), z);
        Pose::from_yaw_translation(a + core::f64::consts::FRAC_PI_2, t)
    }

    pub fn poses(&self, frames: usize) -> Vec<Pose> {
        (0..frames).map(|i| self.pose(i, frames)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sqrt;
    use alloc::vec;

    #[test]
    fn primitive_values() {
        let s = Primitive::Sphere { center: Vec3::ZERO, radius: 2.0 };
        assert_eq!(s.sdf(Vec3::new(3.0, 0.0, 0.0)), 1.0);
        let b = Primitive::Box { min: Vec3::splat(-1.0), max: Vec3::splat(1.0) };
        assert_eq!(b.sdf(Vec3::new(0.5, 0.1, 0.0)), -0.5);
        assert_eq!(b.sdf(Vec3::new(2.0, 0.0, 0.0)), 1.0);
        assert!((b.sdf(Vec3::new(2.0, 2.0, 0.0)) - sqrt(2.0)).abs() < 1e-15);
        let s2 = Primitive::Sphere { center: Vec3::new(3.0, 0.0, 0.0), radius: 0.5 };
        let scene = Scene::new(vec![s, s2]);
        let q = Vec3::new(2.2, 0.3, 0.0);
        assert_eq!(scene.sdf(q), s.sdf(q).min(s2.sdf(q)));
    }

    #[test]
    fn room_is_exact_inside() {
        let mut scene = Scene::default();
        scene.add_room(Vec3::new(-2.0, -3.0, 0.0), Vec3::new(2.0, 3.0, 4.0));
        assert!((scene.sdf(Vec3::new(1.5, 0.0, 2.0)) - 0.5).abs() < 1e-15);
        assert!((scene.sdf(Vec3::new(0.0, 0.0, 0.25)) - 0.25).abs() < 1e-15);
        assert!(scene.sdf(Vec3::new(3.0, 0.0, 2.0)) < 0.0);
    }

    #[test]
    fn plane_ranges_match_intersection() {
        let scene = Scene::new(vec![Primitive::Plane { normal: Vec3::new(0.0, 0.0, 1.0), offset: 0.0 }]);
        let model = LidarModel { azimuth_count: 36, elevation_count: 8, elevation_min_deg: -80.0, elevation_max_deg: -10.0, ..Default::default() };
        let pose = Pose::from_translation(Vec3::new(0.2, -0.4, 2.0));
        let sim = simulate_scan(&pose, &model, &scene, 0);
        assert!(!sim.scan.is_empty());
        for (p, r) in sim.scan.points.iter().zip(&sim.true_ranges) {
            let dir = (*p - pose.translation) / *r;
            let exact = 2.0 / -dir.z;
            assert!((r - exact).abs() < 1e-6, "{r} vs {exact}");
            assert!(p.z.abs() < 1e-6);
        }
        for n in &sim.normals {
            assert!((*n - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_scene_gives_empty_scan() {
        let sim = simulate_scan(&Pose::IDENTITY, &LidarModel::default(), &Scene::default(), 0);
        assert!(sim.scan.is_empty() && sim.normals.is_empty());
    }

    #[test]
    fn sphere_hits_on_surface_and_deterministic() {
        let mut scene = Scene::new(vec![Primitive::Sphere { center: Vec3::ZERO, radius: 1.0 }]);
        scene.add_room(Vec3::splat(-4.0), Vec3::splat(4.0));
        let pose = Pose::from_translation(Vec3::new(2.5, 0.3, 0.1));
        let model = LidarModel { azimuth_count: 90, elevation_count: 16, ..Default::default() };
        let sim = simulate_scan(&pose, &model, &scene, 1);
        assert_eq!(sim.scan.len(), 90 * 16);
        for p in &sim.scan.points {
            assert!(scene.sdf(*p).abs() < TRACE_EPS);
        }
        let noisy_model = LidarModel { noise_slope: 0.01, seed: 5, ..model };
        let a = simulate_scan(&pose, &noisy_model, &scene, 1);
        assert_eq!(a, simulate_scan(&pose, &noisy_model, &scene, 1));
        assert_ne!(a.scan.points, sim.scan.points);
        assert_eq!(a.true_ranges, sim.true_ranges);
    }

    #[test]
    fn orbit_stays_on_its_circle() {
        let orbit = Orbit { center: Vec3::new(1.0, -2.0, 3.0), radius: 2.5, ..Default::default() };
        let poses = orbit.poses(40);
        assert_eq!(poses.len(), 40);
        assert!((poses[0].translation - Vec3::new(3.5, -2.0, 0.6)).norm() < 1e-12);
        for p in &poses {
            let d = p.translation - orbit.center;
            assert!((libm::hypot(d.x, d.y) - 2.5).abs() < 1e-12);
            assert!(d.z.abs() <= 2.4 + 1e-12);
            assert!(p.orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_meshes() {
        let sphere = Scene::new(vec![Primitive::Sphere { center: Vec3::ZERO, radius: 1.0 }]);
        let mesh = ground_truth_mesh(&sphere, Vec3::splat(-1.3), Vec3::splat(1.3), 0.05).unwrap();
        assert!(mesh.vertices.iter().all(|v| (0.975..=1.025).contains(&v.norm())));
        let plane = Scene::new(vec![Primitive::Plane { normal: Vec3::new(0.0, 0.0, 1.0), offset: 0.0 }]);
        let mesh = ground_truth_mesh(&plane, Vec3::new(-1.0, -1.0, -0.35), Vec3::new(1.0, 1.0, 0.35), 0.1).unwrap();
        assert!(mesh.vertices.iter().all(|v| v.z.abs() < 1e-6));
        assert_eq!(
            ground_truth_mesh(&sphere, Vec3::splat(3.0), Vec3::splat(4.0), 0.1).unwrap_err(),
            MeshError::NoSurface
        );
    }
}
