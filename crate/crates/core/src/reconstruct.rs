//! Triangle-mesh extraction from a binary mask via table-driven marching
//! cubes, with globally deduplicated edge vertices so closed masks yield
//! watertight meshes.

use crate::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::segment::Mask;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;

pub const DEFAULT_ISOLEVEL: f32 = 0.5;

/// Triangle mesh in mm coordinates (spacing and origin applied).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

/// Standard 256-case marching cubes over the mask treated as {0,1} samples
/// at voxel centers. Vertices sit on cell edges at the isolevel crossing
/// (edge midpoints for binary data at 0.5), shared across cells, and
/// triangles wind consistently outward (positive enclosed volume).
pub fn marching_cubes(mask: &Mask, isolevel: f32) -> Mesh {
    let v = mask.volume();
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let (ox, oy, oz) = v.origin();
    let data = v.data();
    let at = |i: usize, j: usize, k: usize| data[i + nx * (j + ny * k)];

    // grid corner offsets in Bourke order: 0..3 circle the lower-z face
    // (x, y), (x+1, y), (x+1, y+1), (x, y+1); 4..7 repeat at z+1
    const CORNER: [(usize, usize, usize); 8] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];

    let mut mesh = Mesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    // key: (lower corner grid coords, axis) of the global edge
    let mut edge_vertices: BTreeMap<(usize, usize, usize, u8), u32> = BTreeMap::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = |c: usize| {
                    let (dx, dy, dz) = CORNER[c];
                    (i + dx, j + dy, k + dz)
                };
                let mut cube_index = 0usize;
                for (c, _) in CORNER.iter().enumerate() {
                    let (x, y, z) = corner(c);
                    if at(x, y, z) < isolevel {
                        cube_index |= 1 << c;
                    }
                }
                if cube_index == 0 || cube_index == 255 {
                    continue;
                }
                let edges = EDGE_TABLE[cube_index];
                let mut cell_vertex = [u32::MAX; 12];
                for (e, &(ca, cb)) in EDGE_CORNERS.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let ga = corner(ca);
                    let gb = corner(cb);
                    let (lo, hi) = if ga <= gb { (ga, gb) } else { (gb, ga) };
                    let axis = if hi.0 != lo.0 {
                        0u8
                    } else if hi.1 != lo.1 {
                        1
                    } else {
                        2
                    };
                    let key = (lo.0, lo.1, lo.2, axis);
                    let id = *edge_vertices.entry(key).or_insert_with(|| {
                        let va = at(lo.0, lo.1, lo.2);
                        let vb = at(hi.0, hi.1, hi.2);
                        let t = if vb == va { 0.5 } else { (isolevel - va) / (vb - va) };
                        let mut p = [lo.0 as f32, lo.1 as f32, lo.2 as f32];
                        p[axis as usize] += t;
                        let id = mesh.vertices.len() as u32;
                        mesh.vertices.push([
                            ox + p[0] * sx,
                            oy + p[1] * sy,
                            oz + p[2] * sz,
                        ]);
                        id
                    });
                    cell_vertex[e] = id;
                }
                let tri = &TRIANGLE_TABLE[cube_index];
                let mut t = 0;
                while t + 2 < tri.len() && tri[t] != -1 {
                    let a = cell_vertex[tri[t] as usize];
                    let b = cell_vertex[tri[t + 1] as usize];
                    let c = cell_vertex[tri[t + 2] as usize];
                    if a != b && b != c && a != c {
                        mesh.triangles.push([a, b, c]);
                    }
                    t += 3;
                }
            }
        }
    }
    mesh
}

/// Sum of triangle areas, in mm^2.
pub fn surface_area(mesh: &Mesh) -> f64 {
    let mut area = 0.0;
    for t in &mesh.triangles {
        let [a, b, c] = tri_vertices(mesh, t);
        let u = sub(b, a);
        let v = sub(c, a);
        let n = cross(u, v);
        area += 0.5 * libm::sqrt(dot(n, n));
    }
    area
}

/// Signed enclosed volume via the divergence theorem, in mm^3; positive for
/// outward-oriented closed meshes.
pub fn signed_volume(mesh: &Mesh) -> f64 {
    let mut vol = 0.0;
    for t in &mesh.triangles {
        let [a, b, c] = tri_vertices(mesh, t);
        vol += dot(a, cross(b, c)) / 6.0;
    }
    vol
}

fn tri_vertices(mesh: &Mesh, t: &[u32; 3]) -> [[f64; 3]; 3] {
    let g = |i: u32| {
        let v = mesh.vertices[i as usize];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    };
    [g(t[0]), g(t[1]), g(t[2])]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::segment::{keep_largest_components, Mask};
    use crate::volume::Volume;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn mask_from_fn<F: FnMut(usize, usize, usize) -> bool>(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        origin: (f32, f32, f32),
        mut f: F,
    ) -> Mask {
        let (nx, ny, nz) = dims;
        let mut data = vec![0.0f32; nx * ny * nz];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if f(i, j, k) {
                        data[i + nx * (j + ny * k)] = 1.0;
                    }
                }
            }
        }
        Mask::from_volume(Volume::new(dims, spacing, origin, data).unwrap()).unwrap()
    }

    fn edge_use_counts(mesh: &Mesh) -> BTreeMap<(u32, u32), usize> {
        let mut counts = BTreeMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    #[test]
    fn empty_mask_empty_mesh() {
        let m = mask_from_fn((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), |_, _, _| false);
        let mesh = marching_cubes(&m, DEFAULT_ISOLEVEL);
        assert!(mesh.is_empty());
        assert!(mesh.vertices.is_empty());
    }

    #[test]
    fn single_voxel_closed_surface() {
        let m = mask_from_fn((3, 3, 3), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), |i, j, k| {
            (i, j, k) == (1, 1, 1)
        });
        let mesh = marching_cubes(&m, DEFAULT_ISOLEVEL);
        assert!(!mesh.is_empty());
        // Euler characteristic of a closed genus-0 surface
        let v = mesh.vertices.len() as i64;
        let f = mesh.triangles.len() as i64;
        let e = edge_use_counts(&mesh).len() as i64;
        assert_eq!(v - e + f, 2);
        // watertight and outward
        assert!(edge_use_counts(&mesh).values().all(|&c| c == 2));
        assert!(signed_volume(&mesh) > 0.0);
    }

    #[test]
    fn sphere_area_and_volume_near_analytic() {
        let r = 10.0f64;
        let n = 25usize;
        let c = 12.0f64;
        let m = mask_from_fn((n, n, n), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), |i, j, k| {
            let dx = i as f64 - c;
            let dy = j as f64 - c;
            let dz = k as f64 - c;
            dx * dx + dy * dy + dz * dz <= r * r
        });
        let mesh = marching_cubes(&m, DEFAULT_ISOLEVEL);
        let area = surface_area(&mesh);
        let vol = signed_volume(&mesh);
        let area_true = 4.0 * core::f64::consts::PI * r * r;
        let vol_true = 4.0 / 3.0 * core::f64::consts::PI * r * r * r;
        assert!(
            (area - area_true).abs() / area_true < 0.10,
            "area {area} vs {area_true}"
        );
        assert!(
            (vol - vol_true).abs() / vol_true < 0.05,
            "volume {vol} vs {vol_true}"
        );
        assert!(edge_use_counts(&mesh).values().all(|&c| c == 2));
    }

    #[test]
    fn random_interior_blobs_are_watertight_and_nondegenerate() {
        let mut rng = Rng::from_seed(60);
        for trial in 0..5 {
            let (nx, ny, nz) = (10, 9, 8);
            let m = mask_from_fn((nx, ny, nz), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), |i, j, k| {
                let interior = i >= 1 && i < nx - 1 && j >= 1 && j < ny - 1 && k >= 1 && k < nz - 1;
                interior && rng.uniform() < 0.4
            });
            let m = keep_largest_components(&m, 3).unwrap();
            let mesh = marching_cubes(&m, DEFAULT_ISOLEVEL);
            if mesh.is_empty() {
                continue;
            }
            for (key, count) in edge_use_counts(&mesh) {
                assert_eq!(count, 2, "trial {trial}: edge {key:?} used {count} times");
            }
            for t in &mesh.triangles {
                let [a, b, c] = tri_vertices(&mesh, t);
                let n = cross(sub(b, a), sub(c, a));
                assert!(dot(n, n) > 0.0, "degenerate triangle {t:?}");
            }
            assert!(signed_volume(&mesh) > 0.0);
        }
    }

    #[test]
    fn translation_equivariance() {
        let make = |origin| {
            let m = mask_from_fn((5, 5, 5), (1.0, 1.0, 1.0), origin, |i, j, k| {
                (1..4).contains(&i) && (1..4).contains(&j) && (2..4).contains(&k)
            });
            marching_cubes(&m, DEFAULT_ISOLEVEL)
        };
        let base = make((0.0, 0.0, 0.0));
        let moved = make((3.5, -2.0, 10.0));
        assert_eq!(base.triangles, moved.triangles);
        for (a, b) in base.vertices.iter().zip(&moved.vertices) {
            assert_eq!(b[0], a[0] + 3.5);
            assert_eq!(b[1], a[1] - 2.0);
            assert_eq!(b[2], a[2] + 10.0);
        }
    }

    #[test]
    fn spacing_covariance() {
        let make = |spacing| {
            let m = mask_from_fn((5, 5, 5), spacing, (0.0, 0.0, 0.0), |i, j, k| {
                (1..4).contains(&i) && (1..4).contains(&j) && (1..3).contains(&k)
            });
            marching_cubes(&m, DEFAULT_ISOLEVEL)
        };
        let base = make((1.0, 1.0, 1.0));
        let scaled = make((2.0, 2.0, 2.0));
        assert_eq!(base.triangles, scaled.triangles);
        for (a, b) in base.vertices.iter().zip(&scaled.vertices) {
            for ax in 0..3 {
                assert_eq!(b[ax], 2.0 * a[ax]);
            }
        }
        assert!((signed_volume(&scaled) - 8.0 * signed_volume(&base)).abs() < 1e-9);
    }

    #[test]
    fn binary_vertices_sit_on_edge_midpoints() {
        let m = mask_from_fn((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), |i, j, k| {
            (i, j, k) == (1, 1, 1) || (i, j, k) == (2, 1, 1)
        });
        let mesh = marching_cubes(&m, DEFAULT_ISOLEVEL);
        for v in &mesh.vertices {
            // exactly one coordinate is at a half-integer position
            let halves = v
                .iter()
                .filter(|&&c| (c * 2.0).fract() == 0.0 && c.fract() != 0.0)
                .count();
            assert_eq!(halves, 1, "vertex {v:?}");
        }
    }

    #[test]
    fn thin_volume_yields_empty_mesh() {
        let m = mask_from_fn((1, 5, 5), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), |_, _, _| true);
        assert!(marching_cubes(&m, DEFAULT_ISOLEVEL).is_empty());
    }
}
