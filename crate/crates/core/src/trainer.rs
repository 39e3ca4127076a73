//! Per-frame mapping pipeline: supervision sampling, replay pool update,
//! uncertainty-guided optimisation and Fisher accumulation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::grid_field::{adam_step, AdamConfig, AdamState, BatchTape, GradientStore, GridError, MapConfig, NeuralMap};
use crate::math::{Pose, Vec3};
use crate::ray_sampler::{estimate_normals, generate_samples, voxel_downsample, SamplerConfig, Scan};
use crate::replay_pool::{PoolConfig, ReplayPool};
use crate::rng::{self, Stage};
use crate::uncertainty::{
    partition_voxels, BatchPlan, BatchSampler, PerturbField, SamplingStrategy, UncertaintyConfig, VoxelPartition,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("{scans} scans but {poses} poses")]
    PoseCountMismatch { scans: usize, poses: usize },
    #[error("non-finite loss {loss} at frame {frame_id}, iteration {iteration}")]
    NonFiniteLoss { frame_id: u64, iteration: usize, loss: f64 },
    #[error("training sample outside the allocated map: {0}")]
    Grid(#[from] GridError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub iterations_per_frame: usize,
    pub batch_size: usize,
    pub sampling: SamplingStrategy,
    pub map: MapConfig,
    pub sampler: SamplerConfig,
    pub pool: PoolConfig,
    pub uncertainty: UncertaintyConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations_per_frame: 15,
            batch_size: 16384,
            sampling: SamplingStrategy::UncertaintyGuided,
            map: MapConfig::default(),
            sampler: SamplerConfig::default(),
            pool: PoolConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let check = |ok: bool, msg: &'static str| if ok { Ok(()) } else { Err(TrainError::InvalidConfig(msg)) };
        check(self.iterations_per_frame >= 1, "iterations_per_frame must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.uncertainty.uncertain_draws <= self.batch_size, "uncertain_draws must not exceed batch_size")?;
        check(
            !self.map.voxel_sizes.is_empty() && self.map.voxel_sizes.iter().all(|&s| s > 0.0 && s.is_finite()),
            "voxel_sizes must be positive",
        )?;
        check(self.map.feature_dim >= 1, "feature_dim must be at least 1")?;
        check(self.map.hidden.len() <= 14 && self.map.hidden.iter().all(|&h| h >= 1), "hidden widths must be positive")?;
        check(self.sampler.is_valid(), "sampler settings out of range")?;
        check(self.pool.is_valid(), "pool settings out of range")?;
        check(self.uncertainty.is_valid(), "uncertainty settings out of range")?;
        check(self.adam.is_valid(), "adam settings out of range")
    }
}

/// Everything that evolves while mapping.
#[derive(Debug, Clone)]
pub struct MapState {
    pub map: NeuralMap,
    pub adam: AdamState,
    pub pool: ReplayPool,
    pub field: PerturbField,
    pub frames_processed: u64,
}

impl MapState {
    pub fn new(cfg: &TrainConfig) -> Self {
        MapState {
            map: NeuralMap::new(&cfg.map, cfg.seed),
            adam: AdamState::default(),
            pool: ReplayPool::new(&cfg.pool),
            field: PerturbField::new(cfg.uncertainty.cell_size, cfg.uncertainty.prior_std),
            frames_processed: 0,
        }
    }
}

/// Wall-clock time per pipeline stage (ms).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageTimings {
    pub normals_ms: f64,
    pub samples_ms: f64,
    pub pool_ms: f64,
    pub partition_ms: f64,
    pub optimize_ms: f64,
    pub fisher_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameReport {
    pub frame_id: u64,
    /// Set when the frame had no usable points and left the state untouched.
    pub skipped: bool,
    /// Batch loss of each iteration, measured before its update.
    pub losses: Vec<f64>,
    pub new_samples: usize,
    pub window_evicted: usize,
    pub capacity_evicted: usize,
    pub pool_size: usize,
    pub pool_voxels: usize,
    pub uncertain_voxels: usize,
    pub certain_voxels: usize,
    pub uncertain_draws_per_batch: usize,
    pub timings: StageTimings,
}

/// Millisecond time source for stage timings.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Reports zero for every stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

/// Mean of squared residuals.
pub fn loss_mse(labels: &[f64], predictions: &[f64]) -> f64 {
    assert!(!labels.is_empty() && labels.len() == predictions.len(), "equal, non-zero lengths");
    labels.iter().zip(predictions).map(|(l, p)| (p - l) * (p - l)).sum::<f64>() / labels.len() as f64
}

/// Transforms sensor-frame points to the world frame.
pub fn posed_scan(points: &[Vec3], pose: &Pose, frame_id: u64) -> Scan {
    Scan {
        origin: pose.translation,
        points: points.iter().map(|&p| pose.transform_point(p)).collect(),
        frame_id,
    }
}

/// Outcome of the data half of a frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub new_samples: usize,
    pub new_vertices: usize,
    pub window_evicted: usize,
    pub capacity_evicted: usize,
}

/// Normals, samples, allocation and pool update for one world-frame scan.
pub fn ingest_scan(scan: &Scan, state: &mut MapState, cfg: &TrainConfig) -> IngestStats {
    ingest_timed(scan, state, cfg, &NoClock, &mut StageTimings::default())
}

fn ingest_timed(scan: &Scan, state: &mut MapState, cfg: &TrainConfig, clock: &dyn Clock, t: &mut StageTimings) -> IngestStats {
    let mut t0 = clock.now_ms();
    let normals = estimate_normals(scan, cfg.sampler.normal_neighbors);
    let mut t1 = clock.now_ms();
    t.normals_ms = t1 - t0;
    t0 = t1;
    let samples = generate_samples(scan, &normals, &cfg.sampler, &cfg.pool.reliability, cfg.seed);
    t1 = clock.now_ms();
    t.samples_ms = t1 - t0;
    t0 = t1;
    let positions: Vec<Vec3> = samples.iter().map(|s| s.position).collect();
    let alloc = state.map.grid.allocate(&positions);
    let new_samples = samples.len();
    state.pool.insert_samples(samples);
    let window_evicted = state.pool.prune_window(scan.origin);
    let capacity_evicted = state.pool.enforce_capacity();
    t.pool_ms = clock.now_ms() - t0;
    IngestStats { new_samples, new_vertices: alloc.new_vertices, window_evicted, capacity_evicted }
}

/// Runs the full pipeline on one world-frame scan.
pub fn process_frame(scan: &Scan, state: &mut MapState, cfg: &TrainConfig, clock: &dyn Clock) -> Result<FrameReport, TrainError> {
    let mut report = FrameReport { frame_id: scan.frame_id, ..Default::default() };
    let finite: Vec<Vec3> = scan.points.iter().copied().filter(|p| p.is_finite()).collect();
    let mut points = match cfg.sampler.downsample_voxel {
        Some(v) => voxel_downsample(&finite, v),
        None => finite,
    };
    points.retain(|p| p.distance(scan.origin) > 0.0);
    if points.is_empty() || !scan.origin.is_finite() {
        report.skipped = true;
        report.pool_size = state.pool.len();
        report.pool_voxels = state.pool.num_buckets();
        return Ok(report);
    }
    let scan = Scan { origin: scan.origin, points, frame_id: scan.frame_id };
    let mut timings = StageTimings::default();
    let stats = ingest_timed(&scan, state, cfg, clock, &mut timings);
    report.new_samples = stats.new_samples;
    report.window_evicted = stats.window_evicted;
    report.capacity_evicted = stats.capacity_evicted;
    report.pool_size = state.pool.len();
    report.pool_voxels = state.pool.num_buckets();
    state.frames_processed += 1;
    if state.pool.is_empty() {
        report.timings = timings;
        return Ok(report);
    }

    let t0 = clock.now_ms();
    let partition = match cfg.sampling {
        SamplingStrategy::UncertaintyGuided => partition_voxels(&state.pool, &state.field, cfg.uncertainty.threshold),
        SamplingStrategy::Uniform => VoxelPartition::default(),
    };
    report.uncertain_voxels = partition.uncertain.len();
    report.certain_voxels = state.pool.num_buckets() - partition.uncertain.len();
    let t1 = clock.now_ms();
    timings.partition_ms = t1 - t0;

    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        uncertain_draws: match cfg.sampling {
            SamplingStrategy::UncertaintyGuided => cfg.uncertainty.uncertain_draws,
            SamplingStrategy::Uniform => 0,
        },
    };
    let mut rng = rng::stream(cfg.seed, Stage::Batches, scan.frame_id);
    let mut tape = BatchTape::default();
    let mut grads = GradientStore::new(&state.map);
    let mut spatial = Vec::new();
    let mut labels = Vec::with_capacity(cfg.batch_size);
    // Latest (position, spatial gradient) of every sample trained this frame.
    let mut trained: BTreeMap<u64, (Vec3, Vec3)> = BTreeMap::new();
    for iteration in 0..cfg.iterations_per_frame {
        let sampler = BatchSampler::new(&state.pool, &partition);
        let batch = sampler.draw(plan, &mut rng).expect("pool is non-empty");
        report.uncertain_draws_per_batch = batch.uncertain_count;
        labels.clear();
        labels.extend(batch.samples.iter().map(|s| s.label));
        state.map.forward_batch(batch.samples.iter().map(|s| s.position), &mut tape)?;
        grads.clear();
        let loss = state.map.backward_accumulate(&tape, &labels, &mut grads, Some(&mut spatial));
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { frame_id: scan.frame_id, iteration, loss });
        }
        report.losses.push(loss);
        for (s, g) in batch.samples.iter().zip(&spatial) {
            trained.insert(s.seq, (s.position, *g));
        }
        adam_step(&grads, &mut state.map, &cfg.adam, &mut state.adam);
    }
    let t2 = clock.now_ms();
    timings.optimize_ms = t2 - t1;
    state.field.accumulate_fisher(trained.into_values());
    timings.fisher_ms = clock.now_ms() - t2;
    report.timings = timings;
    Ok(report)
}

/// Folds [`process_frame`] over sensor-frame scans and their poses. Frame ids
/// are the scan indices. `on_frame` sees the state after every frame.
pub fn run_sequence<S, F>(
    scans: S,
    poses: &[Pose],
    state: &mut MapState,
    cfg: &TrainConfig,
    clock: &dyn Clock,
    mut on_frame: F,
) -> Result<Vec<FrameReport>, TrainError>
where
    S: IntoIterator<Item = Vec<Vec3>>,
    S::IntoIter: ExactSizeIterator,
    F: FnMut(&MapState, &FrameReport),
{
    cfg.validate()?;
    let scans = scans.into_iter();
    if scans.len() != poses.len() {
        return Err(TrainError::PoseCountMismatch { scans: scans.len(), poses: poses.len() });
    }
    let mut reports = Vec::with_capacity(poses.len());
    for (i, (points, pose)) in scans.zip(poses).enumerate() {
        let scan = posed_scan(&points, pose, i as u64);
        let report = process_frame(&scan, state, cfg, clock)?;
        on_frame(state, &report);
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_sim::{simulate_scan, LidarModel, Primitive, Scene};
    use crate::PoolKey;
    use alloc::vec;

    fn small_cfg() -> TrainConfig {
        TrainConfig { batch_size: 2048, uncertainty: UncertaintyConfig { uncertain_draws: 200, ..Default::default() }, ..Default::default() }
    }

    fn plane_scan(frame_id: u64, origin: Vec3) -> Scan {
        let scene = Scene::new(vec![Primitive::Plane { normal: Vec3::new(0.0, 0.0, 1.0), offset: 0.0 }]);
        let model = LidarModel { azimuth_count: 90, elevation_count: 12, elevation_min_deg: -70.0, elevation_max_deg: -20.0, ..Default::default() };
        simulate_scan(&Pose::from_translation(origin), &model, &scene, frame_id).scan
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss_mse(&[0.1, 0.2], &[0.1, 0.2]), 0.0);
        assert!((loss_mse(&[0.3, -0.3], &[0.0, 0.0]) - 0.09).abs() < 1e-15);
        let mut r = rng::stream(1, Stage::Batches, 0);
        let a: Vec<f64> = (0..1000).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let residuals: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
        let mut total = 0.0;
        for r in &residuals {
            total += r * r;
        }
        assert!((loss_mse(&a, &b) - total / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn first_frame_reduces_loss() {
        let cfg = small_cfg();
        let mut state = MapState::new(&cfg);
        let report = process_frame(&plane_scan(0, Vec3::new(0.0, 0.0, 2.0)), &mut state, &cfg, &NoClock).unwrap();
        assert_eq!(report.losses.len(), 15);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        assert!(report.losses[14] < report.losses[0]);
        assert!(state.field.vertex_count() > 0);
    }

    #[test]
    fn empty_scan_is_skipped() {
        let cfg = small_cfg();
        let mut state = MapState::new(&cfg);
        let scan = Scan { origin: Vec3::ZERO, points: vec![], frame_id: 7 };
        let report = process_frame(&scan, &mut state, &cfg, &NoClock).unwrap();
        assert!(report.skipped && report.losses.is_empty());
        assert_eq!(state.frames_processed, 0);
        assert!(state.pool.is_empty());
        assert_eq!(state.adam.step, 0);
        assert_eq!(state.map.grid.vertex_count(), 0);
    }

    #[test]
    fn cloned_states_replay_identically() {
        let cfg = small_cfg();
        let mut a = MapState::new(&cfg);
        process_frame(&plane_scan(0, Vec3::new(0.0, 0.0, 2.0)), &mut a, &cfg, &NoClock).unwrap();
        let mut b = a.clone();
        let scan = plane_scan(1, Vec3::new(0.5, 0.0, 2.0));
        let ra = process_frame(&scan, &mut a, &cfg, &NoClock).unwrap();
        let rb = process_frame(&scan, &mut b, &cfg, &NoClock).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.map.decoder.params(), b.map.decoder.params());
    }

    #[test]
    fn freshly_observed_voxels_are_uncertain() {
        let mut cfg = small_cfg();
        cfg.pool.reliability.radius = 40.0;
        let mut state = MapState::new(&cfg);
        for i in 0..6 {
            process_frame(&plane_scan(i, Vec3::new(0.3 * i as f64, 0.0, 2.0)), &mut state, &cfg, &NoClock).unwrap();
        }
        let trained: Vec<PoolKey> = state.pool.buckets().keys().copied().collect();
        ingest_scan(&plane_scan(6, Vec3::new(15.0, 0.0, 2.0)), &mut state, &cfg);
        let part = partition_voxels(&state.pool, &state.field, cfg.uncertainty.threshold);
        let fresh: Vec<PoolKey> = state.pool.buckets().keys().filter(|k| !trained.contains(k)).copied().collect();
        assert!(!fresh.is_empty());
        assert!(fresh.iter().all(|k| part.uncertain.contains(k)));
        // Voxels holding the floor under the first poses received the most gradient signal.
        assert!(trained.iter().any(|k| k.0[2] <= 0 && part.certain.contains(k)));
    }

    #[test]
    fn sequence_checks_pose_count_and_window() {
        let cfg = TrainConfig {
            iterations_per_frame: 1,
            batch_size: 256,
            uncertainty: UncertaintyConfig { uncertain_draws: 10, ..Default::default() },
            pool: PoolConfig { reliability: crate::replay_pool::ReliabilityParams { alpha: 1.0, radius: 6.0 }, ..Default::default() },
            ..Default::default()
        };
        let mut state = MapState::new(&cfg);
        let err = run_sequence(vec![vec![Vec3::ZERO]], &[], &mut state, &cfg, &NoClock, |_, _| {}).unwrap_err();
        assert_eq!(err, TrainError::PoseCountMismatch { scans: 1, poses: 0 });
        let reports = run_sequence(Vec::<Vec<Vec3>>::new(), &[], &mut state, &cfg, &NoClock, |_, _| {}).unwrap();
        assert!(reports.is_empty() && state.pool.is_empty() && state.adam.step == 0);

        let mut scene = Scene::default();
        scene.add_room(Vec3::new(-10.0, -3.0, 0.0), Vec3::new(10.0, 3.0, 3.0));
        let model = LidarModel { azimuth_count: 120, elevation_count: 8, ..Default::default() };
        let poses = [Pose::from_translation(Vec3::new(-5.0, 0.0, 1.5)), Pose::from_translation(Vec3::new(5.0, 0.0, 1.5))];
        let scans: Vec<Vec<Vec3>> = poses
            .iter()
            .map(|p| {
                let world = simulate_scan(p, &model, &scene, 0).scan;
                world.points.iter().map(|&q| p.inverse_transform_point(q)).collect()
            })
            .collect();
        let mut frames = 0;
        run_sequence(scans, &poses, &mut state, &cfg, &NoClock, |_, _| frames += 1).unwrap();
        assert_eq!(frames, 2);
        assert!(!state.pool.is_empty());
        assert!(state.pool.samples().all(|s| s.position.distance(poses[1].translation) < 6.0));
    }
}
