//! The implicit map: a sparse multi-resolution feature grid decoded by a
//! shared MLP, with exact gradients and Adam updates.

mod adam;
mod decoder;
mod grid;

use alloc::vec;
use alloc::vec::Vec;

pub use adam::{adam_step, AdamConfig, AdamState, GradientStore};
pub use decoder::Decoder;
pub use grid::{AllocStats, FeatureGrid, GridLevel, Interpolation, VoxelKey};

use crate::math::{trilinear_weight_gradients, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("query lies outside the allocated map at level {level}")]
    UnallocatedQuery { level: usize },
    #[error("query position is not finite")]
    NonFiniteQuery,
}

/// Grid and decoder geometry.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MapConfig {
    /// Voxel edge length per level, finest first (m).
    pub voxel_sizes: Vec<f64>,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { voxel_sizes: vec![0.3, 0.45], feature_dim: 8, hidden: vec![32, 32] }
    }
}

impl MapConfig {
    /// Largest voxel size, i.e. the coarsest level.
    pub fn coarsest_voxel_size(&self) -> f64 {
        self.voxel_sizes.iter().copied().fold(0.0, f64::max)
    }
}

/// Feature grid plus decoder.
#[derive(Debug, Clone)]
pub struct NeuralMap {
    pub grid: FeatureGrid,
    pub decoder: Decoder,
}

/// A single prediction with everything needed for its backward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub value: f64,
    pub interpolation: Interpolation,
    pub activations: Vec<f64>,
}

/// Forward state of a batch, consumed by [`NeuralMap::backward_accumulate`].
#[derive(Debug, Clone, Default)]
pub struct BatchTape {
    len: usize,
    corner_ids: Vec<u32>,
    corner_weights: Vec<f64>,
    fractions: Vec<Vec3>,
    features: Vec<f64>,
    activations: Vec<f64>,
    outputs: Vec<f64>,
}

impl BatchTape {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Predicted values of the last forward pass.
    pub fn outputs(&self) -> &[f64] {
        &self.outputs[..self.len]
    }
}

impl NeuralMap {
    pub fn new(cfg: &MapConfig, seed: u64) -> Self {
        NeuralMap {
            grid: FeatureGrid::new(&cfg.voxel_sizes, cfg.feature_dim),
            decoder: Decoder::new(cfg.feature_dim, &cfg.hidden, seed),
        }
    }

    pub fn from_parts(grid: FeatureGrid, decoder: Decoder) -> Self {
        assert_eq!(grid.dim(), decoder.input_dim(), "feature and decoder input widths differ");
        NeuralMap { grid, decoder }
    }

    /// Predicted truncated signed distance at `q`.
    pub fn predict(&self, q: Vec3) -> Result<f64, GridError> {
        Ok(self.predict_with_record(q)?.value)
    }

    pub fn predict_with_record(&self, q: Vec3) -> Result<Prediction, GridError> {
        let interpolation = self.grid.query(q)?;
        let mut activations = vec![0.0; self.decoder.cache_len()];
        let value = self.decoder.forward(&interpolation.feature, &mut activations);
        Ok(Prediction { value, interpolation, activations })
    }

    /// Prediction and its spatial gradient at `q` (cell interiors).
    pub fn predict_with_gradient(&self, q: Vec3) -> Result<(f64, Vec3), GridError> {
        let mut tape = BatchTape::default();
        self.forward_batch(core::iter::once(q), &mut tape)?;
        let mut grads = Vec::new();
        self.spatial_gradients(&tape, &mut grads);
        Ok((tape.outputs[0], grads[0]))
    }

    /// Runs the forward pass for every position, recording the tape.
    pub fn forward_batch<I>(&self, positions: I, tape: &mut BatchTape) -> Result<(), GridError>
    where
        I: IntoIterator<Item = Vec3>,
        I::IntoIter: ExactSizeIterator,
    {
        let positions = positions.into_iter();
        let n = positions.len();
        let levels = self.grid.num_levels();
        let dim = self.grid.dim();
        let cache_len = self.decoder.cache_len();
        tape.len = n;
        tape.corner_ids.resize(n * 8 * levels, 0);
        tape.corner_weights.resize(n * 8 * levels, 0.0);
        tape.fractions.resize(n * levels, Vec3::ZERO);
        tape.features.resize(n * dim, 0.0);
        tape.activations.resize(n * cache_len, 0.0);
        tape.outputs.resize(n, 0.0);
        for (i, q) in positions.enumerate() {
            let ids = &mut tape.corner_ids[i * 8 * levels..(i + 1) * 8 * levels];
            let ws = &mut tape.corner_weights[i * 8 * levels..(i + 1) * 8 * levels];
            self.grid.locate(q, ids, ws, &mut tape.fractions[i * levels..(i + 1) * levels])?;
            let feat = &mut tape.features[i * dim..(i + 1) * dim];
            feat.fill(0.0);
            for l in 0..levels {
                let lv = self.grid.level(l);
                for c in 0..8 {
                    let w = ws[l * 8 + c];
                    for (acc, f) in feat.iter_mut().zip(lv.feature(ids[l * 8 + c])) {
                        *acc += w * f;
                    }
                }
            }
            tape.outputs[i] = self.decoder.forward(feat, &mut tape.activations[i * cache_len..(i + 1) * cache_len]);
        }
        Ok(())
    }

    /// Accumulates exact gradients of the batch-mean squared error
    /// `mean((pred - label)^2)` into `grads` and returns the loss.
    ///
    /// When `spatial` is given it receives `d pred / d position` per sample.
    pub fn backward_accumulate(
        &self,
        tape: &BatchTape,
        labels: &[f64],
        grads: &mut GradientStore,
        mut spatial: Option<&mut Vec<Vec3>>,
    ) -> f64 {
        let n = tape.len;
        assert_eq!(labels.len(), n, "one label per taped sample");
        grads.prepare(self);
        if n == 0 {
            return 0.0;
        }
        let levels = self.grid.num_levels();
        let dim = self.grid.dim();
        let cache_len = self.decoder.cache_len();
        let width = self.decoder.max_width();
        let mut scratch_a = vec![0.0; width];
        let mut scratch_b = vec![0.0; width];
        let mut d_feat = vec![0.0; dim];
        if let Some(s) = spatial.as_deref_mut() {
            s.clear();
        }
        grads.has_decoder = true;
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        for i in 0..n {
            let residual = tape.outputs[i] - labels[i];
            loss += residual * residual;
            let coeff = 2.0 * residual * inv_n;
            let feat = &tape.features[i * dim..(i + 1) * dim];
            let cache = &tape.activations[i * cache_len..(i + 1) * cache_len];
            self.decoder.backward(
                feat,
                cache,
                coeff,
                Some(&mut grads.decoder),
                &mut d_feat,
                &mut scratch_a,
                &mut scratch_b,
            );
            let ids = &tape.corner_ids[i * 8 * levels..(i + 1) * 8 * levels];
            let ws = &tape.corner_weights[i * 8 * levels..(i + 1) * 8 * levels];
            for l in 0..levels {
                for c in 0..8 {
                    grads.add_vertex(l, ids[l * 8 + c], coeff * ws[l * 8 + c], &d_feat);
                }
            }
            if let Some(s) = spatial.as_deref_mut() {
                s.push(self.spatial_from_dfeat(tape, i, &d_feat));
            }
        }
        loss * inv_n
    }

    /// `d pred / d position` for every taped sample.
    pub fn spatial_gradients(&self, tape: &BatchTape, out: &mut Vec<Vec3>) {
        out.clear();
        let dim = self.grid.dim();
        let cache_len = self.decoder.cache_len();
        let width = self.decoder.max_width();
        let mut scratch_a = vec![0.0; width];
        let mut scratch_b = vec![0.0; width];
        let mut d_feat = vec![0.0; dim];
        for i in 0..tape.len {
            let feat = &tape.features[i * dim..(i + 1) * dim];
            let cache = &tape.activations[i * cache_len..(i + 1) * cache_len];
            self.decoder.backward(feat, cache, 1.0, None, &mut d_feat, &mut scratch_a, &mut scratch_b);
            out.push(self.spatial_from_dfeat(tape, i, &d_feat));
        }
    }

    fn spatial_from_dfeat(&self, tape: &BatchTape, i: usize, d_feat: &[f64]) -> Vec3 {
        let levels = self.grid.num_levels();
        let ids = &tape.corner_ids[i * 8 * levels..(i + 1) * 8 * levels];
        let mut g = Vec3::ZERO;
        for l in 0..levels {
            let lv = self.grid.level(l);
            let dw = trilinear_weight_gradients(tape.fractions[i * levels + l]);
            let mut gl = Vec3::ZERO;
            for c in 0..8 {
                let proj: f64 = lv.feature(ids[l * 8 + c]).iter().zip(d_feat).map(|(f, d)| f * d).sum();
                gl += dw[c] * proj;
            }
            g += gl / lv.voxel_size();
        }
        g
    }
}
