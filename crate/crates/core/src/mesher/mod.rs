//! Dense SDF evaluation on a regular lattice and marching-cubes extraction.

mod tables;

use alloc::vec;
use alloc::vec::Vec;

use crate::grid_field::{BatchTape, NeuralMap};
use crate::math::{floor, Vec3};
use tables::TRI_TABLE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MeshError {
    #[error("no lattice node falls inside the mapped region")]
    EmptyMap,
    #[error("the field has no zero crossing between valid nodes")]
    NoSurface,
    #[error("invalid lattice: spacing must be positive and bounds ordered")]
    InvalidLattice,
}

/// Anything that can be sampled as a signed distance; `None` marks unknown space.
pub trait SdfField {
    fn sdf(&self, q: Vec3) -> Option<f64>;

    /// Evaluates a run of points; `out` has one slot per point.
    fn sdf_many(&self, points: &[Vec3], out: &mut [Option<f64>]) {
        for (o, &q) in out.iter_mut().zip(points) {
            *o = self.sdf(q);
        }
    }
}

impl<F: Fn(Vec3) -> Option<f64>> SdfField for F {
    fn sdf(&self, q: Vec3) -> Option<f64> {
        self(q)
    }
}

impl SdfField for NeuralMap {
    fn sdf(&self, q: Vec3) -> Option<f64> {
        self.predict(q).ok()
    }

    fn sdf_many(&self, points: &[Vec3], out: &mut [Option<f64>]) {
        let inside: Vec<usize> = (0..points.len()).filter(|&i| self.grid.is_allocated(points[i])).collect();
        let mut tape = BatchTape::default();
        self.forward_batch(inside.iter().map(|&i| points[i]), &mut tape).expect("points checked as allocated");
        out.fill(None);
        for (&i, &v) in inside.iter().zip(tape.outputs()) {
            out[i] = Some(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MesherConfig {
    /// Lattice spacing (m).
    pub spacing: f64,
    /// Region to mesh as `[min, max]`; the whole mapped region when absent.
    pub bounds: Option<[Vec3; 2]>,
}

impl Default for MesherConfig {
    fn default() -> Self {
        MesherConfig { spacing: 0.10, bounds: None }
    }
}

/// Node values of a regular lattice, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SdfGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex scalar.
    pub scalars: Option<Vec<f64>>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized face normal `(b - a) x (c - a)`.
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(c - a)
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.face_normal(t).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

/// Lattice covering `[min, max]` with the given spacing.
pub fn lattice_dims(min: Vec3, max: Vec3, spacing: f64) -> Result<[usize; 3], MeshError> {
    if !(spacing > 0.0) || !min.is_finite() || !max.is_finite() {
        return Err(MeshError::InvalidLattice);
    }
    let ext = max - min;
    if ext.x < 0.0 || ext.y < 0.0 || ext.z < 0.0 {
        return Err(MeshError::InvalidLattice);
    }
    let n = |e: f64| (floor(e / spacing + 1e-9) as usize + 1).max(2);
    Ok([n(ext.x), n(ext.y), n(ext.z)])
}

/// Samples `field` at every lattice node in `[min, max]`.
pub fn eval_sdf_grid<F: SdfField + ?Sized>(field: &F, min: Vec3, max: Vec3, spacing: f64) -> Result<SdfGrid, MeshError> {
    let dims = lattice_dims(min, max, spacing)?;
    let n = dims[0] * dims[1] * dims[2];
    let mut grid = SdfGrid { origin: min, spacing, dims, values: vec![0.0; n], valid: vec![false; n] };
    let mut row = Vec::with_capacity(dims[0]);
    let mut out = vec![None; dims[0]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            row.clear();
            row.extend((0..dims[0]).map(|i| grid.node(i, j, k)));
            field.sdf_many(&row, &mut out);
            let start = grid.index(0, j, k);
            for (i, v) in out.iter().enumerate() {
                if let Some(v) = v.filter(|v| v.is_finite()) {
                    grid.values[start + i] = v;
                    grid.valid[start + i] = true;
                }
            }
        }
    }
    if grid.valid.iter().any(|&v| v) {
        Ok(grid)
    } else {
        Err(MeshError::EmptyMap)
    }
}

/// Meshes the zero level set of `map` inside `cfg.bounds`, or inside the
/// allocated region when no bounds are given.
pub fn mesh_map(map: &NeuralMap, cfg: &MesherConfig) -> Result<TriMesh, MeshError> {
    let (min, max) = match cfg.bounds {
        Some([a, b]) => (a, b),
        None => map.grid.bounds().ok_or(MeshError::EmptyMap)?,
    };
    extract_mesh(&eval_sdf_grid(map, min, max, cfg.spacing)?)
}

// Corner order of the triangle table: bottom face counter-clockwise, then top face.
const MC_CORNERS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const MC_EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Marching cubes over the zero level set of `grid`. Vertices are shared
/// between neighbouring cells; cells touching an invalid node are skipped.
pub fn extract_mesh(grid: &SdfGrid) -> Result<TriMesh, MeshError> {
    let [nx, ny, nz] = grid.dims;
    let n = nx * ny * nz;
    // One slot per lattice edge: (lower node, axis).
    let mut edge_vertex = vec![u32::MAX; 3 * n];
    let mut mesh = TriMesh::default();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let mut idx = [0usize; 8];
                let mut case = 0usize;
                let mut ok = true;
                for (c, off) in MC_CORNERS.iter().enumerate() {
                    idx[c] = grid.index(i + off[0], j + off[1], k + off[2]);
                    if !grid.valid[idx[c]] {
                        ok = false;
                        break;
                    }
                    if grid.values[idx[c]] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if !ok || case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut local = [u32::MAX; 12];
                for tri in row.chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            local[e] = edge_vertex_id(grid, &mut mesh, &mut edge_vertex, [i, j, k], e, &idx);
                        }
                        *slot = local[e];
                    }
                    if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                        continue;
                    }
                    // Table winding has normals pointing into the negative side; flip.
                    let t = [ids[0], ids[2], ids[1]];
                    mesh.triangles.push(t);
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(MeshError::NoSurface);
    }
    Ok(compact(mesh))
}

fn edge_vertex_id(grid: &SdfGrid, mesh: &mut TriMesh, slots: &mut [u32], cell: [usize; 3], edge: usize, idx: &[usize; 8]) -> u32 {
    let [ca, cb] = MC_EDGES[edge];
    let (oa, ob) = (MC_CORNERS[ca], MC_CORNERS[cb]);
    let (lo, hi, lo_off) = if oa <= ob { (ca, cb, oa) } else { (cb, ca, ob) };
    let axis = (0..3).find(|&a| MC_CORNERS[lo][a] != MC_CORNERS[hi][a]).expect("edge spans one axis");
    let slot = 3 * grid.index(cell[0] + lo_off[0], cell[1] + lo_off[1], cell[2] + lo_off[2]) + axis;
    if slots[slot] != u32::MAX {
        return slots[slot];
    }
    let (va, vb) = (grid.values[idx[lo]], grid.values[idx[hi]]);
    let t = (va / (va - vb)).clamp(0.0, 1.0);
    let pa = grid.node(cell[0] + MC_CORNERS[lo][0], cell[1] + MC_CORNERS[lo][1], cell[2] + MC_CORNERS[lo][2]);
    let pb = grid.node(cell[0] + MC_CORNERS[hi][0], cell[1] + MC_CORNERS[hi][1], cell[2] + MC_CORNERS[hi][2]);
    let id = mesh.vertices.len() as u32;
    mesh.vertices.push(pa + (pb - pa) * t);
    slots[slot] = id;
    id
}

/// Drops vertices that no surviving triangle references.
fn compact(mut mesh: TriMesh) -> TriMesh {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for tri in &mut mesh.triangles {
        for v in tri.iter_mut() {
            let r = &mut remap[*v as usize];
            if *r == u32::MAX {
                *r = vertices.len() as u32;
                vertices.push(mesh.vertices[*v as usize]);
            }
            *v = *r;
        }
    }
    mesh.vertices = vertices;
    mesh
}

#[cfg(test)]
mod tests;
