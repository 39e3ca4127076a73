//! Incremental neural distance-field mapping from posed LiDAR scans.
//!
//! The map is a sparse multi-resolution feature grid decoded by a small MLP
//! into a truncated signed distance. Supervision samples are kept in a
//! voxel-bucketed replay pool that retains the most reliable samples per
//! voxel, and training batches are biased towards regions whose diagonal
//! Laplace posterior is still wide.
//!
//! The crate is `no_std` + `alloc`; file formats and the command line live in
//! the `replaymap` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod grid_field;
pub mod kdtree;
pub mod lidar_sim;
pub mod math;
pub mod mesher;
pub mod metrics;
pub mod ray_sampler;
pub mod replay_pool;
pub mod rng;
pub mod trainer;
pub mod uncertainty;

pub use grid_field::{AdamConfig, Decoder, FeatureGrid, GradientStore, GridError, NeuralMap};
pub use math::{Pose, Vec3};
pub use mesher::{SdfField, SdfGrid, TriMesh};
pub use ray_sampler::{SamplerConfig, Scan, TsdfSample};
pub use replay_pool::{PoolKey, ReliabilityParams, ReplayPool};
pub use trainer::{FrameReport, MapState, TrainConfig, TrainError};
pub use uncertainty::{PerturbField, VoxelPartition};
