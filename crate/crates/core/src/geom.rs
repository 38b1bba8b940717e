//! Small fixed-size linear algebra for registration: 3-vectors, 3x3
//! matrices, a cyclic Jacobi eigensolver for symmetric matrices, rigid
//! transforms, and exact point-to-triangle distance.
//!
//! Everything here is `f64`; mm-scale registration tolerances need the
//! precision even though volumes themselves are `f32`.

use alloc::vec::Vec;

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                c[i][j] += a[i][k] * bk[j];
            }
        }
    }
    c
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for j in 0..3 {
            t[j][i] = row[j];
        }
    }
    t
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn rotation_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    let u = scale(axis, 1.0 / n);
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            r[i][j] = c * eye + (1.0 - c) * u[i] * u[j];
        }
    }
    // + s * [u]_x
    r[0][1] -= s * u[2];
    r[0][2] += s * u[1];
    r[1][0] += s * u[2];
    r[1][2] -= s * u[0];
    r[2][0] -= s * u[1];
    r[2][1] += s * u[0];
    r
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvectors as columns, eigenvalues) sorted by descending
/// eigenvalue; the eigenvector matrix is orthonormal.
pub fn jacobi_eigen_sym<const N: usize>(a: &[[f64; N]; N]) -> ([[f64; N]; N], [f64; N]) {
    let mut a = *a;
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..N {
            for j in i + 1..N {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..N {
            for q in p + 1..N {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + libm::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: [usize; N] = [0; N];
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let mut vals = [0.0; N];
    let mut vecs = [[0.0; N]; N];
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = a[src][src];
        for k in 0..N {
            vecs[k][dst] = v[k][src];
        }
    }
    (vecs, vals)
}

/// Rotation + translation; applies as `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// `self` after `other`: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: add(mat_vec(&self.rotation, other.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        Self {
            rotation: rt,
            translation: scale(mat_vec(&rt, self.translation), -1.0),
        }
    }

    /// RᵀR = I and det R = +1, both within 1e-9.
    pub fn is_valid(&self) -> bool {
        let g = mat_mul(&transpose(&self.rotation), &self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let eye = if i == j { 1.0 } else { 0.0 };
                if (g[i][j] - eye).abs() > 1e-9 {
                    return false;
                }
            }
        }
        (det(&self.rotation) - 1.0).abs() < 1e-9
    }
}

/// Best-fit rotation + translation mapping `src` onto `dst` in the
/// least-squares sense (Horn's quaternion method; always a proper
/// rotation, robust to planar point sets).
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    assert_eq!(src.len(), dst.len());
    assert!(!src.is_empty());
    let n = src.len() as f64;
    let mut cs = [0.0; 3];
    let mut cd = [0.0; 3];
    for (s, d) in src.iter().zip(dst) {
        cs = add(cs, *s);
        cd = add(cd, *d);
    }
    cs = scale(cs, 1.0 / n);
    cd = scale(cd, 1.0 / n);
    // cross-covariance H = sum (s - cs)(d - cd)^T
    let mut h = [[0.0; 3]; 3];
    for (s, d) in src.iter().zip(dst) {
        let a = sub(*s, cs);
        let b = sub(*d, cd);
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += a[i] * b[j];
            }
        }
    }
    // Horn's symmetric 4x4 matrix; its top eigenvector is the optimal
    // unit quaternion (w, x, y, z).
    let tr = h[0][0] + h[1][1] + h[2][2];
    let m = [
        [tr, h[1][2] - h[2][1], h[2][0] - h[0][2], h[0][1] - h[1][0]],
        [
            h[1][2] - h[2][1],
            h[0][0] - h[1][1] - h[2][2],
            h[0][1] + h[1][0],
            h[2][0] + h[0][2],
        ],
        [
            h[2][0] - h[0][2],
            h[0][1] + h[1][0],
            h[1][1] - h[0][0] - h[2][2],
            h[1][2] + h[2][1],
        ],
        [
            h[0][1] - h[1][0],
            h[2][0] + h[0][2],
            h[1][2] + h[2][1],
            h[2][2] - h[0][0] - h[1][1],
        ],
    ];
    let (vecs, _vals) = jacobi_eigen_sym(&m);
    let q = [vecs[0][0], vecs[1][0], vecs[2][0], vecs[3][0]];
    let rotation = quat_to_mat(q);
    let translation = sub(cd, mat_vec(&rotation, cs));
    RigidTransform {
        rotation,
        translation,
    }
}

fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            w * w + x * x - y * y - z * z,
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            w * w - x * x + y * y - z * z,
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            w * w - x * x - y * y + z * z,
        ],
    ]
}

/// Closest point on triangle (a, b, c) to p, by Voronoi-region
/// classification (vertex, edge, and face regions handled exactly).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

/// Centroid of a point cloud.
pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len() as f64)
}

/// Covariance matrix of a point cloud about its centroid (unnormalized).
pub fn scatter_matrix(points: &[Vec3], center: Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for p in points {
        let d = sub(*p, center);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += d[i] * d[j];
            }
        }
    }
    m
}

/// Collects points into a Vec — convenience for f32 mesh vertices.
pub fn to_f64_points(vertices: &[[f32; 3]]) -> Vec<Vec3> {
    vertices
        .iter()
        .map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec::Vec;

    fn random_unit(rng: &mut Rng) -> Vec3 {
        loop {
            let v = [
                rng.uniform_range(-1.0, 1.0),
                rng.uniform_range(-1.0, 1.0),
                rng.uniform_range(-1.0, 1.0),
            ];
            let n = norm(v);
            if n > 1e-3 {
                return scale(v, 1.0 / n);
            }
        }
    }

    fn random_rotation(rng: &mut Rng) -> Mat3 {
        rotation_axis_angle(random_unit(rng), rng.uniform_range(-core::f64::consts::PI, core::f64::consts::PI))
    }

    #[test]
    fn jacobi_diagonal_matrix() {
        let a = [[3.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 7.0]];
        let (v, vals) = jacobi_eigen_sym(&a);
        assert_eq!(vals, [7.0, 3.0, -1.0]);
        // eigenvectors are signed unit axes
        for (col, axis) in [(0, 2), (1, 0), (2, 1)] {
            for k in 0..3 {
                let expect = if k == axis { 1.0 } else { 0.0 };
                assert!((v[k][col].abs() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_random_symmetric_reconstructs() {
        let mut rng = Rng::from_seed(70);
        for _ in 0..20 {
            let mut a = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    let x = rng.uniform_range(-5.0, 5.0);
                    a[i][j] = x;
                    a[j][i] = x;
                }
            }
            let (v, vals) = jacobi_eigen_sym(&a);
            // A v_i = lambda_i v_i and V orthonormal
            for i in 0..3 {
                let col = [v[0][i], v[1][i], v[2][i]];
                let av = mat_vec(&a, col);
                let lv = scale(col, vals[i]);
                assert!(norm(sub(av, lv)) < 1e-9, "residual {}", norm(sub(av, lv)));
            }
            let g = mat_mul(&transpose(&v), &v);
            for i in 0..3 {
                for j in 0..3 {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    assert!((g[i][j] - eye).abs() < 1e-12);
                }
            }
            assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        }
    }

    #[test]
    fn rotation_is_orthonormal_det_one() {
        let mut rng = Rng::from_seed(71);
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let t = RigidTransform {
                rotation: r,
                translation: [0.0; 3],
            };
            assert!(t.is_valid());
        }
    }

    #[test]
    fn transform_compose_inverse() {
        let mut rng = Rng::from_seed(72);
        let a = RigidTransform {
            rotation: random_rotation(&mut rng),
            translation: [1.0, -2.0, 0.5],
        };
        let b = RigidTransform {
            rotation: random_rotation(&mut rng),
            translation: [-4.0, 0.25, 3.0],
        };
        let p = [0.3, 1.7, -2.2];
        let q = a.compose(&b).apply(p);
        let q2 = a.apply(b.apply(p));
        assert!(norm(sub(q, q2)) < 1e-12);
        let back = a.inverse().apply(a.apply(p));
        assert!(norm(sub(back, p)) < 1e-12);
    }

    #[test]
    fn triangle_distance_closed_forms() {
        let a = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        let c = [0.0, 1.0, 0.0];
        // interior projection: distance 1 straight down
        let q = closest_point_on_triangle([0.25, 0.25, 1.0], a, b, c);
        assert!(norm(sub(q, [0.25, 0.25, 0.0])) < 1e-12);
        // closest vertex
        let q = closest_point_on_triangle([2.0, 0.0, 0.0], a, b, c);
        assert!(norm(sub(q, b)) < 1e-12);
        // edge region
        let q = closest_point_on_triangle([0.5, -1.0, 0.0], a, b, c);
        assert!(norm(sub(q, [0.5, 0.0, 0.0])) < 1e-12);
        // on the triangle
        let q = closest_point_on_triangle([0.2, 0.3, 0.0], a, b, c);
        assert!(norm(sub(q, [0.2, 0.3, 0.0])) < 1e-12);
    }

    #[test]
    fn triangle_distance_matches_dense_sampling() {
        let mut rng = Rng::from_seed(73);
        for _ in 0..50 {
            let mut pt = || {
                [
                    rng.uniform_range(-2.0, 2.0),
                    rng.uniform_range(-2.0, 2.0),
                    rng.uniform_range(-2.0, 2.0),
                ]
            };
            let (a, b, c, p) = (pt(), pt(), pt(), pt());
            let q = closest_point_on_triangle(p, a, b, c);
            let d = norm(sub(p, q));
            // dense barycentric sweep can only find points at least as far
            let n = 60;
            let mut best = f64::INFINITY;
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let u = i as f64 / n as f64;
                    let v = j as f64 / n as f64;
                    let s = add(
                        scale(a, 1.0 - u - v),
                        add(scale(b, u), scale(c, v)),
                    );
                    best = best.min(norm(sub(p, s)));
                }
            }
            assert!(d <= best + 1e-12, "exact {d} vs sampled {best}");
            assert!(best - d < 0.1, "sampled bound too far: {best} vs {d}");
        }
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let mut rng = Rng::from_seed(74);
        for _ in 0..20 {
            let truth = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: [
                    rng.uniform_range(-10.0, 10.0),
                    rng.uniform_range(-10.0, 10.0),
                    rng.uniform_range(-10.0, 10.0),
                ],
            };
            let src: Vec<Vec3> = (0..12)
                .map(|_| {
                    [
                        rng.uniform_range(-5.0, 5.0),
                        rng.uniform_range(-5.0, 5.0),
                        rng.uniform_range(-5.0, 5.0),
                    ]
                })
                .collect();
            let dst: Vec<Vec3> = src.iter().map(|&p| truth.apply(p)).collect();
            let est = kabsch(&src, &dst);
            assert!(est.is_valid());
            for (s, d) in src.iter().zip(&dst) {
                assert!(norm(sub(est.apply(*s), *d)) < 1e-9);
            }
        }
    }

    #[test]
    fn kabsch_planar_points_still_proper_rotation() {
        // rank-2 cross-covariance; quaternion solution must not produce a
        // reflection
        let src = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        let r = rotation_axis_angle([0.0, 0.0, 1.0], 0.7);
        let dst: Vec<Vec3> = src
            .iter()
            .map(|&p| add(mat_vec(&r, p), [2.0, -1.0, 3.0]))
            .collect();
        let est = kabsch(&src, &dst);
        assert!(est.is_valid());
        for (s, d) in src.iter().zip(&dst) {
            assert!(norm(sub(est.apply(*s), *d)) < 1e-9);
        }
    }
}
