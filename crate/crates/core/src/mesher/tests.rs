use super::*;
use crate::grid_field::{MapConfig, NeuralMap};
use alloc::collections::BTreeMap;

fn sphere(r: f64) -> impl Fn(Vec3) -> Option<f64> {
    move |q: Vec3| Some(q.norm() - r)
}

#[test]
fn stub_field_values_are_exact() {
    let g = eval_sdf_grid(&sphere(1.0), Vec3::splat(-1.5), Vec3::splat(1.5), 0.1).unwrap();
    assert_eq!(g.dims, [31, 31, 31]);
    for k in 0..31 {
        for j in 0..31 {
            for i in 0..31 {
                let p = g.node(i, j, k);
                assert!((g.values[g.index(i, j, k)] - (p.norm() - 1.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sphere_vertices_near_radius_and_watertight() {
    let g = eval_sdf_grid(&sphere(1.0), Vec3::splat(-1.5), Vec3::splat(1.5), 0.1).unwrap();
    let mesh = extract_mesh(&g).unwrap();
    for v in &mesh.vertices {
        let r = v.norm();
        assert!((0.95..=1.05).contains(&r), "radius {r}");
    }
    // Every undirected edge is shared by exactly two faces, with opposite orientation.
    let mut edges: BTreeMap<(u32, u32), i32> = BTreeMap::new();
    for t in &mesh.triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            *edges.entry(key).or_default() += if a < b { 1 } else { -1 };
        }
    }
    let bad: Vec<_> = edges.iter().filter(|(_, v)| **v != 0).collect();
    assert!(bad.is_empty(), "{} of {} edges unbalanced: {:?}", bad.len(), edges.len(), &bad[..bad.len().min(5)]);
    // Normals point outward (towards positive distance).
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        let centroid = (a + b + c) / 3.0;
        if mesh.triangle_area(t) > 1e-12 {
            assert!(mesh.face_normal(t).dot(centroid) > 0.0);
        }
    }
    // Area close to 4 pi.
    assert!((mesh.area() - 4.0 * core::f64::consts::PI).abs() < 0.05);
}

#[test]
fn sphere_mesh_hausdorff_below_half_spacing() {
    let g = eval_sdf_grid(&sphere(0.8), Vec3::splat(-1.0), Vec3::splat(1.0), 0.1).unwrap();
    let mesh = extract_mesh(&g).unwrap();
    // Mesh -> surface: vertices and face centroids.
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        for p in [a, b, c, (a + b + c) / 3.0] {
            assert!((p.norm() - 0.8).abs() < 0.05);
        }
    }
}

#[test]
fn plane_on_lattice_nodes() {
    let plane = |q: Vec3| Some(q.z);
    let g = eval_sdf_grid(&plane, Vec3::new(-1.0, -1.0, -0.5), Vec3::new(1.0, 1.0, 0.5), 0.1).unwrap();
    let mesh = extract_mesh(&g).unwrap();
    for v in &mesh.vertices {
        assert!(v.z.abs() < 1e-6);
    }
    for t in 0..mesh.triangles.len() {
        let n = mesh.face_normal(t).normalized();
        assert!((n.z - 1.0).abs() < 1e-9, "{n:?}");
    }
}

#[test]
fn all_positive_has_no_surface() {
    let g = eval_sdf_grid(&|_q: Vec3| Some(1.0), Vec3::ZERO, Vec3::splat(1.0), 0.1).unwrap();
    assert_eq!(extract_mesh(&g).unwrap_err(), MeshError::NoSurface);
}

#[test]
fn vertices_lie_on_sign_changing_edges() {
    let f = |q: Vec3| Some(q.norm() - 0.77 + 0.1 * libm::sin(5.0 * q.x));
    let g = eval_sdf_grid(&f, Vec3::splat(-1.0), Vec3::splat(1.0), 0.1).unwrap();
    let mesh = extract_mesh(&g).unwrap();
    for v in &mesh.vertices {
        let rel = (*v - g.origin) / g.spacing;
        let cells = [rel.x, rel.y, rel.z];
        // Exactly two coordinates are on lattice planes.
        let on = cells.iter().filter(|c| (**c - libm::round(**c)).abs() < 1e-9).count();
        assert!(on >= 2);
        let axis = (0..3).find(|&a| (cells[a] - libm::round(cells[a])).abs() >= 1e-9);
        if let Some(a) = axis {
            let mut lo = [libm::round(cells[0]) as usize, libm::round(cells[1]) as usize, libm::round(cells[2]) as usize];
            lo[a] = libm::floor(cells[a]) as usize;
            let mut hi = lo;
            hi[a] += 1;
            let va = g.values[g.index(lo[0], lo[1], lo[2])];
            let vb = g.values[g.index(hi[0], hi[1], hi[2])];
            assert!((va < 0.0) != (vb < 0.0));
        }
    }
}

#[test]
fn invalid_nodes_are_skipped() {
    // Unknown half-space x > 0: no triangle may reference it.
    let f = |q: Vec3| if q.x > 0.05 { None } else { Some(q.norm() - 0.6) };
    let g = eval_sdf_grid(&f, Vec3::splat(-1.0), Vec3::splat(1.0), 0.1).unwrap();
    let mesh = extract_mesh(&g).unwrap();
    assert!(mesh.vertices.iter().all(|v| v.x <= 0.05 + 1e-9));
}

#[test]
fn untrained_map_equals_decoder_bias_output() {
    let mut map = NeuralMap::new(&MapConfig::default(), 3);
    map.grid.allocate(&[Vec3::new(0.2, 0.2, 0.2), Vec3::new(0.5, 0.5, 0.5)]);
    let zero_out = map.decoder.forward(&[0.0; 8], &mut alloc::vec![0.0; map.decoder.cache_len()]);
    let g = eval_sdf_grid(&map, Vec3::ZERO, Vec3::splat(1.0), 0.1).unwrap();
    assert!(g.valid_count() > 0);
    for (v, ok) in g.values.iter().zip(&g.valid) {
        if *ok {
            assert_eq!(*v, zero_out);
        }
    }
}

#[test]
fn bounds_outside_map_is_empty() {
    let mut map = NeuralMap::new(&MapConfig::default(), 3);
    map.grid.allocate(&[Vec3::new(0.2, 0.2, 0.2)]);
    let err = eval_sdf_grid(&map, Vec3::splat(10.0), Vec3::splat(11.0), 0.1).unwrap_err();
    assert_eq!(err, MeshError::EmptyMap);
}

#[test]
fn batched_map_evaluation_matches_single_queries() {
    let mut map = NeuralMap::new(&MapConfig::default(), 5);
    map.grid.allocate(&[Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.7, 0.2, 0.4)]);
    for l in 0..map.grid.num_levels() {
        let lv = map.grid.level_mut(l);
        for id in 0..lv.vertex_count() as u32 {
            for (c, f) in lv.feature_mut(id).iter_mut().enumerate() {
                *f = 0.01 * (id as f64) - 0.02 * c as f64;
            }
        }
    }
    let pts: alloc::vec::Vec<Vec3> = (0..40).map(|i| Vec3::new(0.03 * i as f64, 0.2, 0.3)).collect();
    let mut out = alloc::vec![None; pts.len()];
    map.sdf_many(&pts, &mut out);
    for (p, o) in pts.iter().zip(&out) {
        assert_eq!(*o, map.predict(*p).ok());
    }
    assert!(out.iter().any(|o| o.is_some()) && out.iter().any(|o| o.is_none()));
}

#[test]
fn mesh_map_uses_allocated_bounds() {
    let mut map = NeuralMap::new(&MapConfig::default(), 5);
    assert_eq!(mesh_map(&map, &MesherConfig::default()).unwrap_err(), MeshError::EmptyMap);
    map.grid.allocate(&[Vec3::new(0.1, 0.1, 0.1)]);
    let (lo, hi) = map.grid.bounds().unwrap();
    assert_eq!((lo, hi), (Vec3::ZERO, Vec3::splat(0.3)));
    // A constant field has no surface.
    assert_eq!(mesh_map(&map, &MesherConfig::default()).unwrap_err(), MeshError::NoSurface);
}
