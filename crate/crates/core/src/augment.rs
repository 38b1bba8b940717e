//! Offline, seeded 3D data augmentation: rotation, elastic deformation,
//! Gaussian noise and contrast stretching, applied in that order (geometric
//! before photometric so the noise statistics stay unwarped).

use crate::rng::{derive_seed, Rng};
use crate::volume::{percentile, Volume, VolumeError};
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("invalid augment spec: {0}")]
    InvalidSpec(&'static str),
}

/// Parameters for one augmentation corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    /// Max rotation magnitude per axis, degrees. Default ±10°.
    pub rotation_max_deg: f32,
    /// Std-dev of additive Gaussian intensity noise. Default 0.01.
    pub noise_sigma: f32,
    /// Control-point spacing of the elastic deformation lattice, voxels.
    pub elastic_grid: usize,
    /// Std-dev of control-point displacements, mm.
    pub elastic_sigma_mm: f32,
    /// Contrast-stretch percentile window.
    pub stretch_pcts: (f32, f32),
    /// Augmented copies per source volume.
    pub multiplier: usize,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_max_deg: 10.0,
            noise_sigma: 0.01,
            elastic_grid: 8,
            elastic_sigma_mm: 1.0,
            stretch_pcts: (2.0, 98.0),
            multiplier: 1,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    fn validate(&self) -> Result<(), AugmentError> {
        if self.noise_sigma < 0.0 {
            return Err(AugmentError::InvalidSpec("noise_sigma must be >= 0"));
        }
        if self.elastic_grid < 2 {
            return Err(AugmentError::InvalidSpec("elastic_grid must be >= 2"));
        }
        let (lo, hi) = self.stretch_pcts;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(AugmentError::InvalidSpec("stretch percentiles must satisfy 0 <= lo < hi <= 100"));
        }
        Ok(())
    }
}

fn rot_matrix(ax: f32, ay: f32, az: f32) -> [[f32; 3]; 3] {
    let (sx, cx) = (libm::sinf(ax.to_radians()), libm::cosf(ax.to_radians()));
    let (sy, cy) = (libm::sinf(ay.to_radians()), libm::cosf(ay.to_radians()));
    let (sz, cz) = (libm::sinf(az.to_radians()), libm::cosf(az.to_radians()));
    // R = Rz * Ry * Rx
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Rotate about the volume center (physical coordinates), trilinear
/// resampling, out-of-field voxels filled with the volume minimum.
pub fn rotate3d(v: &Volume, angles_deg: (f32, f32, f32)) -> Volume {
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let r = rot_matrix(angles_deg.0, angles_deg.1, angles_deg.2);
    let center = (
        (nx - 1) as f32 * 0.5 * sx,
        (ny - 1) as f32 * 0.5 * sy,
        (nz - 1) as f32 * 0.5 * sz,
    );
    let fill = v.min_value();
    let mut data = Vec::with_capacity(v.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = (
                    i as f32 * sx - center.0,
                    j as f32 * sy - center.1,
                    k as f32 * sz - center.2,
                );
                // backward warp: source = R^T * p (R orthonormal)
                let q = (
                    r[0][0] * p.0 + r[1][0] * p.1 + r[2][0] * p.2 + center.0,
                    r[0][1] * p.0 + r[1][1] * p.1 + r[2][1] * p.2 + center.1,
                    r[0][2] * p.0 + r[1][2] * p.1 + r[2][2] * p.2 + center.2,
                );
                let (x, y, z) = (q.0 / sx, q.1 / sy, q.2 / sz);
                let eps = 1e-4;
                let inside = x >= -eps
                    && y >= -eps
                    && z >= -eps
                    && x <= (nx - 1) as f32 + eps
                    && y <= (ny - 1) as f32 + eps
                    && z <= (nz - 1) as f32 + eps;
                data.push(if inside {
                    v.sample_clamped(x, y, z)
                } else {
                    fill
                });
            }
        }
    }
    v.with_data(data).expect("rotation preserves shape and finiteness")
}

/// Additive i.i.d. Gaussian noise, deterministic per seed.
pub fn gaussian_noise(v: &Volume, sigma: f32, seed: u64) -> Volume {
    if sigma == 0.0 {
        return v.clone();
    }
    let mut rng = Rng::from_seed(seed);
    let data = v
        .data()
        .iter()
        .map(|&x| x + sigma * rng.normal() as f32)
        .collect();
    v.with_data(data).expect("noise preserves shape")
}

/// Random smooth deformation: control-point displacements drawn from
/// N(0, magnitude_mm^2) and truncated to ±magnitude_mm (which bounds the
/// voxel-to-voxel field delta by 2·magnitude/grid), trilinearly upsampled to
/// a dense field, then backward trilinear warping.
pub fn elastic_deform(
    v: &Volume,
    grid: usize,
    magnitude_mm: f32,
    seed: u64,
) -> Result<Volume, AugmentError> {
    if grid < 2 {
        return Err(AugmentError::InvalidSpec("elastic_grid must be >= 2"));
    }
    if magnitude_mm < 0.0 {
        return Err(AugmentError::InvalidSpec("magnitude must be >= 0"));
    }
    if magnitude_mm == 0.0 {
        return Ok(v.clone());
    }
    let field = displacement_field(v.dims(), grid, magnitude_mm, seed);
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let mut data = Vec::with_capacity(v.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let d = field[i + nx * (j + ny * k)];
                data.push(v.sample_clamped(
                    i as f32 + d[0] / sx,
                    j as f32 + d[1] / sy,
                    k as f32 + d[2] / sz,
                ));
            }
        }
    }
    Ok(v.with_data(data)?)
}

/// Dense displacement field (mm) used by `elastic_deform`; exposed so tests
/// can assert smoothness at the field level.
pub fn displacement_field(
    dims: (usize, usize, usize),
    grid: usize,
    magnitude_mm: f32,
    seed: u64,
) -> Vec<[f32; 3]> {
    let (nx, ny, nz) = dims;
    let cp = |n: usize| (n - 1).div_ceil(grid) + 1;
    let (cx, cy, cz) = (cp(nx), cp(ny), cp(nz));
    let mut rng = Rng::from_seed(seed);
    let mut control = Vec::with_capacity(cx * cy * cz);
    for _ in 0..cx * cy * cz {
        let mut d = [0.0f32; 3];
        for axis in &mut d {
            let x = (rng.normal() as f32) * magnitude_mm;
            *axis = x.clamp(-magnitude_mm, magnitude_mm);
        }
        control.push(d);
    }
    let sample = |x: f32, y: f32, z: f32| -> [f32; 3] {
        let x0 = (x as usize).min(cx - 1);
        let y0 = (y as usize).min(cy - 1);
        let z0 = (z as usize).min(cz - 1);
        let x1 = (x0 + 1).min(cx - 1);
        let y1 = (y0 + 1).min(cy - 1);
        let z1 = (z0 + 1).min(cz - 1);
        let (fx, fy, fz) = (x - x0 as f32, y - y0 as f32, z - z0 as f32);
        let mut out = [0.0f32; 3];
        for a in 0..3 {
            let at = |i: usize, j: usize, k: usize| control[i + cx * (j + cy * k)][a];
            let v00 = at(x0, y0, z0) + fx * (at(x1, y0, z0) - at(x0, y0, z0));
            let v10 = at(x0, y1, z0) + fx * (at(x1, y1, z0) - at(x0, y1, z0));
            let v01 = at(x0, y0, z1) + fx * (at(x1, y0, z1) - at(x0, y0, z1));
            let v11 = at(x0, y1, z1) + fx * (at(x1, y1, z1) - at(x0, y1, z1));
            let v0 = v00 + fy * (v10 - v00);
            let v1 = v01 + fy * (v11 - v01);
            out[a] = v0 + fz * (v1 - v0);
        }
        out
    };
    let g = grid as f32;
    let mut field = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                field.push(sample(i as f32 / g, j as f32 / g, k as f32 / g));
            }
        }
    }
    field
}

/// Affine remap of the `[P_lo, P_hi]` percentile window to the volume's
/// original [min, max], clamped.
pub fn contrast_stretch(v: &Volume, pcts: (f32, f32)) -> Result<Volume, AugmentError> {
    let (lo, hi) = pcts;
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(AugmentError::InvalidSpec("percentiles must satisfy 0 <= lo < hi <= 100"));
    }
    let p_lo = percentile(v.data(), lo);
    let p_hi = percentile(v.data(), hi);
    if p_lo == p_hi {
        return Err(AugmentError::Volume(VolumeError::DegenerateIntensityRange));
    }
    let (min, max) = (v.min_value(), v.max_value());
    let scale = (max - min) / (p_hi - p_lo);
    let data = v
        .data()
        .iter()
        .map(|&x| (min + (x - p_lo) * scale).clamp(min, max))
        .collect();
    Ok(v.with_data(data)?)
}

/// Apply one augmented copy: rotate -> elastic -> noise -> stretch, with
/// rotation angles drawn per copy within the spec bound.
fn augment_one(v: &Volume, spec: &AugmentSpec, seed: u64) -> Result<Volume, AugmentError> {
    let mut rng = Rng::from_seed(derive_seed(seed, &[0]));
    let m = spec.rotation_max_deg as f64;
    let angles = (
        rng.uniform_range(-m, m) as f32,
        rng.uniform_range(-m, m) as f32,
        rng.uniform_range(-m, m) as f32,
    );
    let out = rotate3d(v, angles);
    let out = elastic_deform(&out, spec.elastic_grid, spec.elastic_sigma_mm, derive_seed(seed, &[1]))?;
    let out = gaussian_noise(&out, spec.noise_sigma, derive_seed(seed, &[2]));
    contrast_stretch(&out, spec.stretch_pcts)
}

/// Returns every input followed by its `multiplier` augmented copies. Copy k
/// of volume i is seeded with `derive_seed(spec.seed, [i, k])`.
pub fn augment_dataset(inputs: &[Volume], spec: &AugmentSpec) -> Result<Vec<Volume>, AugmentError> {
    spec.validate()?;
    if inputs.is_empty() {
        return Err(AugmentError::InvalidSpec("no input volumes"));
    }
    let mut out = Vec::with_capacity(inputs.len() * (1 + spec.multiplier));
    for (i, v) in inputs.iter().enumerate() {
        out.push(v.clone());
        for k in 1..=spec.multiplier {
            let seed = derive_seed(spec.seed, &[i as u64, k as u64]);
            out.push(augment_one(v, spec, seed)?);
        }
    }
    Ok(out)
}
