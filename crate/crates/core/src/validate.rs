//! Quantitative validation of reconstructed surfaces: landmark points are
//! rigidly pre-aligned to the mesh, refined with 100 ICP iterations, and
//! scored by point-to-surface mean distance, reported per vertebral level.

use crate::geom::{
    self, add, centroid, closest_point_on_triangle, dot, jacobi_eigen_sym, kabsch, mat_mul,
    mat_vec, norm, scale, scatter_matrix, sub, to_f64_points, transpose, Mat3, Vec3,
};
pub use crate::geom::RigidTransform;
use crate::reconstruct::Mesh;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const ICP_MAX_ITER: usize = 100;
pub const ICP_TOL_MM: f64 = 1e-6;

/// A labeled anatomical point in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    /// Vertebral level label, e.g. "T2".
    pub level: String,
    /// Point name within the level (free text).
    pub name: String,
    pub point: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidateError {
    EmptyMesh,
    /// Fewer than 3 points, or all (nearly) collinear.
    DegeneratePoints,
    NoLandmarks,
}

impl core::error::Error for ValidateError {}

impl core::fmt::Display for ValidateError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ValidateError::EmptyMesh => write!(f, "empty mesh"),
            ValidateError::DegeneratePoints => write!(f, "degenerate point set"),
            ValidateError::NoLandmarks => write!(f, "no landmarks"),
        }
    }
}

// ---------------------------------------------------------------------------
// closest-point queries

/// BVH over mesh triangles for exact closest-point queries. Query results
/// equal a brute-force scan over all triangles: the pruning is by
/// conservative box distance, and leaf tests use the exact point-to-
/// triangle distance.
pub struct SurfaceIndex {
    tris: Vec<[Vec3; 3]>,
    nodes: Vec<Node>,
    root: usize,
}

struct Node {
    lo: Vec3,
    hi: Vec3,
    // leaf: range into `order`; internal: child node ids
    kind: NodeKind,
}

enum NodeKind {
    Leaf { start: usize, end: usize },
    Internal { left: usize, right: usize },
}

const LEAF_SIZE: usize = 4;

impl SurfaceIndex {
    pub fn build(mesh: &Mesh) -> Result<Self, ValidateError> {
        if mesh.triangles.is_empty() {
            return Err(ValidateError::EmptyMesh);
        }
        let verts = to_f64_points(&mesh.vertices);
        let mut tris: Vec<[Vec3; 3]> = mesh
            .triangles
            .iter()
            .map(|t| [verts[t[0] as usize], verts[t[1] as usize], verts[t[2] as usize]])
            .collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        let root = Self::split(&tris, &mut order, 0, tris.len(), &mut nodes);
        // store triangles in `order` so leaves are contiguous
        let reordered: Vec<[Vec3; 3]> = order.iter().map(|&i| tris[i]).collect();
        tris = reordered;
        Ok(Self { tris, nodes, root })
    }

    fn split(
        tris: &[[Vec3; 3]],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let (lo, hi) = aabb_of(tris, &order[start..end]);
        if end - start <= LEAF_SIZE {
            nodes.push(Node {
                lo,
                hi,
                kind: NodeKind::Leaf { start, end },
            });
            return nodes.len() - 1;
        }
        // median split along the longest box axis by triangle centroid
        let ext = sub(hi, lo);
        let axis = if ext[0] >= ext[1] && ext[0] >= ext[2] {
            0
        } else if ext[1] >= ext[2] {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        order[start..end].sort_by(|&a, &b| {
            let ca = tri_centroid(&tris[a])[axis];
            let cb = tri_centroid(&tris[b])[axis];
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        let left = Self::split(tris, order, start, mid, nodes);
        let right = Self::split(tris, order, mid, end, nodes);
        nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Internal { left, right },
        });
        nodes.len() - 1
    }

    /// Closest point on the surface and its distance to `p`.
    pub fn closest_point(&self, p: Vec3) -> (Vec3, f64) {
        let mut best = f64::INFINITY;
        let mut best_q = [0.0; 3];
        self.query(self.root, p, &mut best, &mut best_q);
        (best_q, best)
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.closest_point(p).1
    }

    fn query(&self, node: usize, p: Vec3, best: &mut f64, best_q: &mut Vec3) {
        let n = &self.nodes[node];
        if aabb_distance(n.lo, n.hi, p) >= *best {
            return;
        }
        match n.kind {
            NodeKind::Leaf { start, end } => {
                for t in &self.tris[start..end] {
                    let q = closest_point_on_triangle(p, t[0], t[1], t[2]);
                    let d = norm(sub(p, q));
                    if d < *best {
                        *best = d;
                        *best_q = q;
                    }
                }
            }
            NodeKind::Internal { left, right } => {
                // visit the nearer child first for tighter pruning
                let dl = aabb_distance(self.nodes[left].lo, self.nodes[left].hi, p);
                let dr = aabb_distance(self.nodes[right].lo, self.nodes[right].hi, p);
                let (first, second) = if dl <= dr { (left, right) } else { (right, left) };
                self.query(first, p, best, best_q);
                self.query(second, p, best, best_q);
            }
        }
    }
}

fn tri_centroid(t: &[Vec3; 3]) -> Vec3 {
    scale(add(add(t[0], t[1]), t[2]), 1.0 / 3.0)
}

fn aabb_of(tris: &[[Vec3; 3]], idx: &[usize]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in idx {
        for v in &tris[i] {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
    }
    (lo, hi)
}

fn aabb_distance(lo: Vec3, hi: Vec3, p: Vec3) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let d = if p[a] < lo[a] {
            lo[a] - p[a]
        } else if p[a] > hi[a] {
            p[a] - hi[a]
        } else {
            0.0
        };
        d2 += d * d;
    }
    libm::sqrt(d2)
}

/// Exact min-over-triangles distance, brute force; the oracle for
/// `SurfaceIndex` and fine for small meshes.
pub fn point_to_surface_distance(p: Vec3, mesh: &Mesh) -> Result<f64, ValidateError> {
    if mesh.triangles.is_empty() {
        return Err(ValidateError::EmptyMesh);
    }
    let verts = to_f64_points(&mesh.vertices);
    let mut best = f64::INFINITY;
    for t in &mesh.triangles {
        let q = closest_point_on_triangle(
            p,
            verts[t[0] as usize],
            verts[t[1] as usize],
            verts[t[2] as usize],
        );
        best = best.min(norm(sub(p, q)));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// registration

/// Rough alignment of a point cloud to the mesh vertex cloud: centroids
/// are matched and principal axes aligned, with each axis sign chosen by
/// the third central moment along that axis (and the last axis flipped if
/// needed to keep the basis right-handed).
pub fn rigid_prealign(points: &[Vec3], mesh: &Mesh) -> Result<RigidTransform, ValidateError> {
    Ok(rigid_prealign_candidates(points, mesh)?[0])
}

/// All four right-handed sign hypotheses of the principal-axes alignment,
/// with the third-moment best guess first. When the moment-based sign
/// choice is ambiguous the downstream refinement can try each candidate
/// and keep the best fit.
pub fn rigid_prealign_candidates(
    points: &[Vec3],
    mesh: &Mesh,
) -> Result<Vec<RigidTransform>, ValidateError> {
    if mesh.triangles.is_empty() {
        return Err(ValidateError::EmptyMesh);
    }
    if points.len() < 3 {
        return Err(ValidateError::DegeneratePoints);
    }
    let mesh_points = to_f64_points(&mesh.vertices);
    let (pa, pc) = principal_axes(points)?;
    let (ma, mc) = principal_axes(&mesh_points)?;
    // flipping two axes at a time keeps the basis right-handed
    let mut out = Vec::with_capacity(4);
    for signs in [
        [1.0, 1.0, 1.0],
        [-1.0, -1.0, 1.0],
        [-1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0],
    ] {
        let mut flipped = pa;
        for (i, s) in signs.iter().enumerate() {
            for row in flipped.iter_mut() {
                row[i] *= s;
            }
        }
        // R maps point-cloud axes onto mesh axes: R = M P^T
        let rotation = mat_mul(&ma, &transpose(&flipped));
        let translation = sub(mc, mat_vec(&rotation, pc));
        out.push(RigidTransform {
            rotation,
            translation,
        });
    }
    Ok(out)
}

/// Right-handed orthonormal basis of principal axes (columns, descending
/// variance) with signs fixed by third central moments, plus the centroid.
fn principal_axes(points: &[Vec3]) -> Result<(Mat3, Vec3), ValidateError> {
    let c = centroid(points);
    let s = scatter_matrix(points, c);
    let (mut axes, vals) = jacobi_eigen_sym(&s);
    // collinear (or coincident) points: no usable second axis
    if vals[1] <= 1e-12 * vals[0].max(1e-300) {
        return Err(ValidateError::DegeneratePoints);
    }
    let mut skew = [0.0; 3];
    for i in 0..3 {
        let axis = [axes[0][i], axes[1][i], axes[2][i]];
        let mut m3 = 0.0;
        for p in points {
            let d = dot(sub(*p, c), axis);
            m3 += d * d * d;
        }
        if m3 < 0.0 {
            for row in axes.iter_mut() {
                row[i] = -row[i];
            }
            m3 = -m3;
        }
        skew[i] = m3;
    }
    // flip the most symmetric axis (smallest |third moment|) if the basis
    // is left-handed; its sign carried the least information
    if geom::det(&axes) < 0.0 {
        let mut weakest = 0;
        for i in 1..3 {
            if skew[i] < skew[weakest] {
                weakest = i;
            }
        }
        for row in axes.iter_mut() {
            row[weakest] = -row[weakest];
        }
    }
    Ok((axes, c))
}

/// Iterative closest point against the mesh surface. Each iteration finds
/// exact closest surface points and solves the best-fit rigid motion; the
/// transform that would increase the mean distance is rejected and
/// iteration stops, so the reported mean is non-increasing. Returns the
/// composed transform (including nothing but the ICP refinement) and the
/// final per-point distances.
pub fn icp(
    points: &[Vec3],
    mesh: &Mesh,
    max_iter: usize,
    tol: f64,
) -> Result<(RigidTransform, Vec<f64>), ValidateError> {
    let index = SurfaceIndex::build(mesh)?;
    if points.is_empty() {
        return Err(ValidateError::DegeneratePoints);
    }
    let mut current: Vec<Vec3> = points.to_vec();
    let mut total = RigidTransform::identity();
    let mut distances: Vec<f64> = current.iter().map(|&p| index.distance(p)).collect();
    let mut mean = mean_of(&distances);
    for _ in 0..max_iter {
        let targets: Vec<Vec3> = current.iter().map(|&p| index.closest_point(p).0).collect();
        if targets
            .windows(2)
            .all(|w| norm(sub(w[0], w[1])) < 1e-15)
            && targets.len() > 1
        {
            // all correspondences coincident: rotation is unconstrained
            break;
        }
        let step = kabsch(&current, &targets);
        let moved: Vec<Vec3> = current.iter().map(|&p| step.apply(p)).collect();
        let new_dist: Vec<f64> = moved.iter().map(|&p| index.distance(p)).collect();
        let new_mean = mean_of(&new_dist);
        if new_mean > mean {
            break;
        }
        let improved = mean - new_mean;
        current = moved;
        distances = new_dist;
        mean = new_mean;
        total = step.compose(&total);
        if improved < tol {
            break;
        }
    }
    Ok((total, distances))
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample (n-1) standard deviation; 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean_of(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

// ---------------------------------------------------------------------------
// per-level reporting

/// Registration result for one vertebral level of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level: String,
    pub mean_mm: f64,
    pub n_points: usize,
}

/// Per level: rigid prealignment, 100 ICP iterations, then the mean
/// point-to-surface distance. Levels keep their first-appearance order
/// from the landmark list.
pub fn per_level_report(landmarks: &[Landmark], mesh: &Mesh) -> Result<Vec<LevelResult>, ValidateError> {
    if landmarks.is_empty() {
        return Err(ValidateError::NoLandmarks);
    }
    let mut levels: Vec<String> = Vec::new();
    for lm in landmarks {
        if !levels.contains(&lm.level) {
            levels.push(lm.level.clone());
        }
    }
    let mut out = Vec::new();
    for level in levels {
        let pts: Vec<Vec3> = landmarks
            .iter()
            .filter(|lm| lm.level == level)
            .map(|lm| lm.point)
            .collect();
        // refine from the identity (landmarks digitized in mesh
        // coordinates) and from every prealignment sign hypothesis; keep
        // the best converged fit
        let mut inits = vec![RigidTransform::identity()];
        inits.extend(rigid_prealign_candidates(&pts, mesh)?);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for init in &inits {
            let aligned: Vec<Vec3> = pts.iter().map(|&p| init.apply(p)).collect();
            let (_t, distances) = icp(&aligned, mesh, ICP_MAX_ITER, ICP_TOL_MM)?;
            let mean = mean_of(&distances);
            if best.as_ref().is_none_or(|(m, _)| mean < *m) {
                best = Some((mean, distances));
            }
        }
        let (mean_mm, _distances) = best.expect("at least one init");
        out.push(LevelResult {
            level,
            mean_mm,
            n_points: pts.len(),
        });
    }
    Ok(out)
}

/// Multi-patient summary in the layout of the accuracy table: one row per
/// level with per-patient means and a "Mean per Level" column; a
/// "Mean ± S.D" row per patient; and a total over all present cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub levels: Vec<String>,
    pub patients: Vec<String>,
    /// cells[level][patient]; None renders as "N/A".
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Report {
    /// Assemble from per-patient level results; the level row order is the
    /// order of first appearance across patients.
    pub fn from_patients(patients: &[(String, Vec<LevelResult>)]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        for (_, results) in patients {
            for r in results {
                if !levels.contains(&r.level) {
                    levels.push(r.level.clone());
                }
            }
        }
        let names: Vec<String> = patients.iter().map(|(n, _)| n.clone()).collect();
        let cells = levels
            .iter()
            .map(|level| {
                patients
                    .iter()
                    .map(|(_, results)| {
                        results
                            .iter()
                            .find(|r| &r.level == level)
                            .map(|r| r.mean_mm)
                    })
                    .collect()
            })
            .collect();
        Self {
            levels,
            patients: names,
            cells,
        }
    }

    /// Mean over patients that have this level; None if no patient does.
    pub fn mean_per_level(&self, level_index: usize) -> Option<f64> {
        let xs: Vec<f64> = self.cells[level_index].iter().flatten().copied().collect();
        if xs.is_empty() {
            None
        } else {
            Some(mean_of(&xs))
        }
    }

    /// (mean, sample SD) over this patient's present levels.
    pub fn patient_mean_sd(&self, patient_index: usize) -> Option<(f64, f64)> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter_map(|row| row[patient_index])
            .collect();
        if xs.is_empty() {
            None
        } else {
            Some((mean_of(&xs), sample_sd(&xs)))
        }
    }

    /// (count, mean, sample SD) over every present level-patient cell.
    pub fn total(&self) -> (usize, f64, f64) {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .flat_map(|row| row.iter().flatten().copied())
            .collect();
        (xs.len(), mean_of(&xs), sample_sd(&xs))
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec![String::from("Level")];
        header.extend(self.patients.iter().cloned());
        header.push(String::from("Mean per Level (mm)"));
        rows.push(header);
        for (li, level) in self.levels.iter().enumerate() {
            let mut row = vec![level.clone()];
            for cell in &self.cells[li] {
                row.push(match cell {
                    Some(v) => format!("{v:.2}"),
                    None => String::from("N/A"),
                });
            }
            row.push(match self.mean_per_level(li) {
                Some(v) => format!("{v:.2}"),
                None => String::from("N/A"),
            });
            rows.push(row);
        }
        let mut sd_row = vec![String::from("Mean ± S.D")];
        for pi in 0..self.patients.len() {
            sd_row.push(match self.patient_mean_sd(pi) {
                Some((m, sd)) => format!("{m:.2} ± {sd:.2}"),
                None => String::from("N/A"),
            });
        }
        sd_row.push(String::new());
        rows.push(sd_row);

        let cols = rows[0].len();
        let mut widths = vec![0usize; cols];
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let mut out = String::from("Point-to-surface mean distance (mm)\n");
        for row in &rows {
            let mut line = String::new();
            for (i, cell) in row.iter().enumerate() {
                line.push_str(cell);
                if i + 1 < cols {
                    for _ in cell.chars().count()..widths[i] + 2 {
                        line.push(' ');
                    }
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        let (n, m, sd) = self.total();
        out.push_str(&format!(
            "Total: {n} vertebrae with a mean distance error of {m:.2} ± {sd:.2} mm\n"
        ));
        out
    }

    /// Machine-readable CSV: `level,mean_mm` rows (per-level means across
    /// patients) plus summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,mean_mm\n");
        for (li, level) in self.levels.iter().enumerate() {
            match self.mean_per_level(li) {
                Some(v) => out.push_str(&format!("{level},{v:.6}\n")),
                None => out.push_str(&format!("{level},N/A\n")),
            }
        }
        for (pi, name) in self.patients.iter().enumerate() {
            match self.patient_mean_sd(pi) {
                Some((m, sd)) => {
                    out.push_str(&format!("patient_mean:{name},{m:.6}\n"));
                    out.push_str(&format!("patient_sd:{name},{sd:.6}\n"));
                }
                None => out.push_str(&format!("patient_mean:{name},N/A\n")),
            }
        }
        let (n, m, sd) = self.total();
        out.push_str(&format!("total_count,{n}\n"));
        out.push_str(&format!("total_mean,{m:.6}\n"));
        out.push_str(&format!("total_sd,{sd:.6}\n"));
        out
    }
}
