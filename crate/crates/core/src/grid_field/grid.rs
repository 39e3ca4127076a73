use alloc::vec;
use alloc::vec::Vec;
use hashbrown::HashMap;

use super::GridError;
use crate::math::{cell_and_fraction, trilinear_weights, Vec3, CORNER_OFFSETS};

pub(crate) const NO_SLOT: u32 = u32::MAX;

/// Identifies one voxel of one grid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub level: usize,
    pub index: [i32; 3],
}

/// One resolution level: a sparse lattice of feature vectors keyed by exact
/// integer vertex coordinates.
#[derive(Debug, Clone)]
pub struct GridLevel {
    voxel_size: f64,
    dim: usize,
    index: HashMap<[i32; 3], u32>,
    coords: Vec<[i32; 3]>,
    features: Vec<f64>,
    moment_slot: Vec<u32>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

impl GridLevel {
    fn new(voxel_size: f64, dim: usize) -> Self {
        GridLevel {
            voxel_size,
            dim,
            index: HashMap::new(),
            coords: Vec::new(),
            features: Vec::new(),
            moment_slot: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len()
    }

    pub fn vertex_id(&self, coord: [i32; 3]) -> Option<u32> {
        self.index.get(&coord).copied()
    }

    pub fn vertex_coord(&self, id: u32) -> [i32; 3] {
        self.coords[id as usize]
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn feature(&self, id: u32) -> &[f64] {
        let d = self.dim;
        &self.features[id as usize * d..(id as usize + 1) * d]
    }

    pub fn feature_mut(&mut self, id: u32) -> &mut [f64] {
        let d = self.dim;
        &mut self.features[id as usize * d..(id as usize + 1) * d]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Adam moments of a vertex, if it has ever received a gradient.
    pub fn moments(&self, id: u32) -> Option<(&[f64], &[f64])> {
        let slot = self.moment_slot[id as usize];
        if slot == NO_SLOT {
            return None;
        }
        let r = slot as usize * self.dim..(slot as usize + 1) * self.dim;
        Some((&self.adam_m[r.clone()], &self.adam_v[r]))
    }

    fn insert(&mut self, coord: [i32; 3]) -> bool {
        if self.index.contains_key(&coord) {
            return false;
        }
        let id = self.coords.len() as u32;
        self.index.insert(coord, id);
        self.coords.push(coord);
        self.features.extend(core::iter::repeat(0.0).take(self.dim));
        self.moment_slot.push(NO_SLOT);
        true
    }

    /// Corner ids of the voxel at `cell`, or `None` if any corner is missing.
    #[inline]
    pub(crate) fn corner_ids(&self, cell: [i32; 3]) -> Option<[u32; 8]> {
        let mut ids = [0u32; 8];
        for (c, off) in CORNER_OFFSETS.iter().enumerate() {
            let key = [cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]];
            ids[c] = *self.index.get(&key)?;
        }
        Some(ids)
    }

    /// Parameter and moment slices for an Adam update, allocating moments on first use.
    pub(crate) fn adam_slices(&mut self, id: u32) -> (&mut [f64], &mut [f64], &mut [f64]) {
        let d = self.dim;
        let mut slot = self.moment_slot[id as usize];
        if slot == NO_SLOT {
            slot = (self.adam_m.len() / d) as u32;
            self.moment_slot[id as usize] = slot;
            self.adam_m.extend(core::iter::repeat(0.0).take(d));
            self.adam_v.extend(core::iter::repeat(0.0).take(d));
        }
        let r = slot as usize * d..(slot as usize + 1) * d;
        let p = &mut self.features[id as usize * d..(id as usize + 1) * d];
        (p, &mut self.adam_m[r.clone()], &mut self.adam_v[r])
    }

    /// Restores a vertex from serialized state.
    pub fn restore_vertex(&mut self, coord: [i32; 3], feature: &[f64], moments: Option<(&[f64], &[f64])>) {
        assert_eq!(feature.len(), self.dim);
        self.insert(coord);
        let id = self.index[&coord];
        self.feature_mut(id).copy_from_slice(feature);
        if let Some((m, v)) = moments {
            let (_, dm, dv) = self.adam_slices(id);
            dm.copy_from_slice(m);
            dv.copy_from_slice(v);
        }
    }
}

/// Multi-resolution sparse voxel grid of learnable corner features.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    levels: Vec<GridLevel>,
    dim: usize,
}

/// Outcome of [`FeatureGrid::allocate`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub new_vertices: usize,
    pub skipped_non_finite: usize,
}

/// Trilinear interpolation record of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    /// Aggregated feature, the sum of the per-level interpolations.
    pub feature: Vec<f64>,
    /// `(level, vertex id, weight)`, 8 entries per level in level order.
    pub corners: Vec<(usize, u32, f64)>,
}

impl FeatureGrid {
    pub fn new(voxel_sizes: &[f64], dim: usize) -> Self {
        assert!(!voxel_sizes.is_empty(), "at least one level required");
        assert!(voxel_sizes.iter().all(|&s| s > 0.0 && s.is_finite()));
        assert!(dim > 0);
        FeatureGrid { levels: voxel_sizes.iter().map(|&s| GridLevel::new(s, dim)).collect(), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &GridLevel {
        &self.levels[l]
    }

    pub fn level_mut(&mut self, l: usize) -> &mut GridLevel {
        &mut self.levels[l]
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn vertex_count(&self) -> usize {
        self.levels.iter().map(GridLevel::vertex_count).sum()
    }

    /// Box where every level has vertices, or `None` for an empty grid.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut lo = Vec3::splat(f64::NEG_INFINITY);
        let mut hi = Vec3::splat(f64::INFINITY);
        for lv in &self.levels {
            let mut a = Vec3::splat(f64::INFINITY);
            let mut b = Vec3::splat(f64::NEG_INFINITY);
            for c in lv.coords() {
                let p = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * lv.voxel_size;
                a = a.min_elem(p);
                b = b.max_elem(p);
            }
            lo = lo.max_elem(a);
            hi = hi.min_elem(b);
        }
        (lo.x <= hi.x && lo.y <= hi.y && lo.z <= hi.z).then_some((lo, hi))
    }

    pub fn voxel_of(&self, level: usize, q: Vec3) -> VoxelKey {
        let (index, _) = cell_and_fraction(q, self.levels[level].voxel_size);
        VoxelKey { level, index }
    }

    /// A voxel is allocated when all eight corner vertices exist.
    pub fn is_voxel_allocated(&self, key: VoxelKey) -> bool {
        self.levels[key.level].corner_ids(key.index).is_some()
    }

    /// True when `q` lies in an allocated voxel at every level.
    pub fn is_allocated(&self, q: Vec3) -> bool {
        q.is_finite()
            && self.levels.iter().all(|lv| lv.corner_ids(cell_and_fraction(q, lv.voxel_size).0).is_some())
    }

    /// Ensures the enclosing voxel of every point exists at every level.
    /// New features start at zero. Idempotent.
    pub fn allocate(&mut self, points: &[Vec3]) -> AllocStats {
        let mut stats = AllocStats::default();
        for &p in points {
            if !p.is_finite() {
                stats.skipped_non_finite += 1;
                continue;
            }
            for lv in &mut self.levels {
                let (cell, _) = cell_and_fraction(p, lv.voxel_size);
                if lv.corner_ids(cell).is_some() {
                    continue;
                }
                for off in CORNER_OFFSETS {
                    if lv.insert([cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]]) {
                        stats.new_vertices += 1;
                    }
                }
            }
        }
        stats
    }

    /// Writes the corner ids, weights and per-level fractional offsets of `q`
    /// into the output slices (`8 * L`, `8 * L` and `L` long).
    #[inline]
    pub(crate) fn locate(&self, q: Vec3, ids: &mut [u32], weights: &mut [f64], fractions: &mut [Vec3]) -> Result<(), GridError> {
        if !q.is_finite() {
            return Err(GridError::NonFiniteQuery);
        }
        for (l, lv) in self.levels.iter().enumerate() {
            let (cell, t) = cell_and_fraction(q, lv.voxel_size);
            let corner = lv.corner_ids(cell).ok_or(GridError::UnallocatedQuery { level: l })?;
            let w = trilinear_weights(t);
            debug_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            ids[l * 8..l * 8 + 8].copy_from_slice(&corner);
            weights[l * 8..l * 8 + 8].copy_from_slice(&w);
            fractions[l] = t;
        }
        Ok(())
    }

    /// Sum over levels of the trilinearly interpolated corner features at `q`.
    pub fn query(&self, q: Vec3) -> Result<Interpolation, GridError> {
        let n = self.levels.len();
        let mut ids = vec![0u32; 8 * n];
        let mut weights = vec![0.0; 8 * n];
        let mut fractions = vec![Vec3::ZERO; n];
        self.locate(q, &mut ids, &mut weights, &mut fractions)?;
        let mut feature = vec![0.0; self.dim];
        let mut corners = Vec::with_capacity(8 * n);
        for l in 0..n {
            for c in 0..8 {
                let (id, w) = (ids[l * 8 + c], weights[l * 8 + c]);
                for (acc, f) in feature.iter_mut().zip(self.levels[l].feature(id)) {
                    *acc += w * f;
                }
                corners.push((l, id, w));
            }
        }
        Ok(Interpolation { feature, corners })
    }
}
