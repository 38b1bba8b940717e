//! Core 3D scalar-volume representation: cropping, resampling, intensity
//! normalization and finite-difference gradients.
//!
//! Voxel order is x-fastest (MetaImage convention): index (i, j, k) lives at
//! `data[i + nx * (j + ny * k)]`. Internal scalar type is `f32`; the
//! validation geometry (module `validate`) uses `f64`.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("data size mismatch: dims {dims:?} imply {expected} voxels, got {actual}")]
    DataSizeMismatch {
        dims: (usize, usize, usize),
        expected: usize,
        actual: usize,
    },
    #[error("invalid dims {0:?}: every component must be >= 1")]
    InvalidDims((usize, usize, usize)),
    #[error("invalid spacing {0:?}: every component must be > 0")]
    InvalidSpacing((f32, f32, f32)),
    #[error("non-finite voxel value at linear index {0}")]
    NonFinite(usize),
    #[error("region out of bounds: start {start:?} extent {extent:?} vs dims {dims:?}")]
    RegionOutOfBounds {
        start: (usize, usize, usize),
        extent: (usize, usize, usize),
        dims: (usize, usize, usize),
    },
    #[error("invalid region extent {0:?}: every component must be >= 1")]
    InvalidExtent((usize, usize, usize)),
    #[error("degenerate intensity range")]
    DegenerateIntensityRange,
    #[error("invalid percentile window ({0}, {1})")]
    InvalidPercentiles(f32, f32),
    #[error("axis {axis:?} has extent {len}, need >= 2 for gradients")]
    AxisTooShort { axis: Axis, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Voxel-index sub-region of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub start: (usize, usize, usize),
    pub extent: (usize, usize, usize),
}

/// 3D scalar grid with physical voxel spacing (mm) and origin (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    origin: (f32, f32, f32),
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        origin: (f32, f32, f32),
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(VolumeError::InvalidDims(dims));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(VolumeError::DataSizeMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(dims: (usize, usize, usize), value: f32) -> Result<Self, VolumeError> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), vec![value; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }
    pub fn origin(&self) -> (f32, f32, f32) {
        self.origin
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn set_spacing(&mut self, spacing: (f32, f32, f32)) -> Result<(), VolumeError> {
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        self.spacing = spacing;
        Ok(())
    }

    pub fn set_origin(&mut self, origin: (f32, f32, f32)) {
        self.origin = origin;
    }

    /// Replace voxel data, keeping geometry. Length and finiteness checked.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, VolumeError> {
        Volume::new(self.dims, self.spacing, self.origin, data)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn crop(&self, r: Region) -> Result<Volume, VolumeError> {
        let (ex, ey, ez) = r.extent;
        if ex == 0 || ey == 0 || ez == 0 {
            return Err(VolumeError::InvalidExtent(r.extent));
        }
        let (sx, sy, sz) = r.start;
        if sx + ex > self.dims.0 || sy + ey > self.dims.1 || sz + ez > self.dims.2 {
            return Err(VolumeError::RegionOutOfBounds {
                start: r.start,
                extent: r.extent,
                dims: self.dims,
            });
        }
        let mut data = Vec::with_capacity(ex * ey * ez);
        for k in 0..ez {
            for j in 0..ey {
                let row = self.index(sx, sy + j, sz + k);
                data.extend_from_slice(&self.data[row..row + ex]);
            }
        }
        let origin = (
            self.origin.0 + sx as f32 * self.spacing.0,
            self.origin.1 + sy as f32 * self.spacing.1,
            self.origin.2 + sz as f32 * self.spacing.2,
        );
        Volume::new((ex, ey, ez), self.spacing, origin, data)
    }

    /// Trilinear sample at continuous voxel coordinates, clamped to the grid.
    pub fn sample_clamped(&self, x: f32, y: f32, z: f32) -> f32 {
        let (nx, ny, nz) = self.dims;
        let cx = x.clamp(0.0, (nx - 1) as f32);
        let cy = y.clamp(0.0, (ny - 1) as f32);
        let cz = z.clamp(0.0, (nz - 1) as f32);
        let x0 = cx as usize;
        let y0 = cy as usize;
        let z0 = cz as usize;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let fx = cx - x0 as f32;
        let fy = cy - y0 as f32;
        let fz = cz - z0 as f32;
        let v000 = self.at(x0, y0, z0);
        let v100 = self.at(x1, y0, z0);
        let v010 = self.at(x0, y1, z0);
        let v110 = self.at(x1, y1, z0);
        let v001 = self.at(x0, y0, z1);
        let v101 = self.at(x1, y0, z1);
        let v011 = self.at(x0, y1, z1);
        let v111 = self.at(x1, y1, z1);
        let v00 = v000 + fx * (v100 - v000);
        let v10 = v010 + fx * (v110 - v010);
        let v01 = v001 + fx * (v101 - v001);
        let v11 = v011 + fx * (v111 - v011);
        let v0 = v00 + fy * (v10 - v00);
        let v1 = v01 + fy * (v11 - v01);
        v0 + fz * (v1 - v0)
    }

    /// Resample onto a grid of `target_dims` voxels spanning the same
    /// physical extent. Values are trilinearly interpolated at the output
    /// voxel centers with clamped boundary sampling.
    pub fn resample_trilinear(
        &self,
        target_dims: (usize, usize, usize),
    ) -> Result<Volume, VolumeError> {
        let (tx, ty, tz) = target_dims;
        if tx == 0 || ty == 0 || tz == 0 {
            return Err(VolumeError::InvalidDims(target_dims));
        }
        let extent = (
            self.dims.0 as f32 * self.spacing.0,
            self.dims.1 as f32 * self.spacing.1,
            self.dims.2 as f32 * self.spacing.2,
        );
        let spacing = (extent.0 / tx as f32, extent.1 / ty as f32, extent.2 / tz as f32);
        // Map output voxel center (i + 0.5) * out_spacing to input index space.
        let scale = (
            spacing.0 / self.spacing.0,
            spacing.1 / self.spacing.1,
            spacing.2 / self.spacing.2,
        );
        let mut data = Vec::with_capacity(tx * ty * tz);
        for k in 0..tz {
            let z = (k as f32 + 0.5) * scale.2 - 0.5;
            for j in 0..ty {
                let y = (j as f32 + 0.5) * scale.1 - 0.5;
                for i in 0..tx {
                    let x = (i as f32 + 0.5) * scale.0 - 0.5;
                    data.push(self.sample_clamped(x, y, z));
                }
            }
        }
        Volume::new(target_dims, spacing, self.origin, data)
    }

    /// Affine map of the `[P_lo, P_hi]` percentile window to [-1, 1], clamped.
    pub fn normalize_intensity(&self, lo_pct: f32, hi_pct: f32) -> Result<Volume, VolumeError> {
        if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct
        {
            return Err(VolumeError::InvalidPercentiles(lo_pct, hi_pct));
        }
        let p_lo = percentile(&self.data, lo_pct);
        let p_hi = percentile(&self.data, hi_pct);
        if p_lo == p_hi {
            return Err(VolumeError::DegenerateIntensityRange);
        }
        let scale = 2.0 / (p_hi - p_lo);
        let data = self
            .data
            .iter()
            .map(|&v| (((v - p_lo) * scale) - 1.0).clamp(-1.0, 1.0))
            .collect();
        self.with_data(data)
    }

    /// Pure index-space finite differences along one axis: central stencil
    /// on the interior, one-sided at the two boundary faces. Spacing is not
    /// folded in.
    pub fn gradient(&self, axis: Axis) -> Result<Volume, VolumeError> {
        let (nx, ny, nz) = self.dims;
        let len = match axis {
            Axis::X => nx,
            Axis::Y => ny,
            Axis::Z => nz,
        };
        if len < 2 {
            return Err(VolumeError::AxisTooShort { axis, len });
        }
        let mut out = vec![0.0f32; self.data.len()];
        gradient_raw(&self.data, (nx, ny, nz), axis, &mut out);
        self.with_data(out)
    }
}

/// Finite-difference stencil on a raw x-fastest buffer; shared with the
/// autodiff spatial-gradient op so both paths agree bit-for-bit.
pub fn gradient_raw<T: crate::Scalar>(
    data: &[T],
    dims: (usize, usize, usize),
    axis: Axis,
    out: &mut [T],
) {
    let (nx, ny, nz) = dims;
    let stride = match axis {
        Axis::X => 1,
        Axis::Y => nx,
        Axis::Z => nx * ny,
    };
    let len = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    debug_assert!(len >= 2);
    let half = T::from_f64(0.5);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let pos = match axis {
                    Axis::X => i,
                    Axis::Y => j,
                    Axis::Z => k,
                };
                out[idx] = if pos == 0 {
                    data[idx + stride] - data[idx]
                } else if pos == len - 1 {
                    data[idx] - data[idx - stride]
                } else {
                    (data[idx + stride] - data[idx - stride]) * half
                };
            }
        }
    }
}

/// Transpose of `gradient_raw`, accumulated into `out`. Used by the autodiff
/// backward pass.
pub fn gradient_raw_transpose<T: crate::Scalar>(
    grad_out: &[T],
    dims: (usize, usize, usize),
    axis: Axis,
    out: &mut [T],
) {
    let (nx, ny, nz) = dims;
    let stride = match axis {
        Axis::X => 1,
        Axis::Y => nx,
        Axis::Z => nx * ny,
    };
    let len = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    let half = T::from_f64(0.5);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let pos = match axis {
                    Axis::X => i,
                    Axis::Y => j,
                    Axis::Z => k,
                };
                let g = grad_out[idx];
                if pos == 0 {
                    out[idx + stride] += g;
                    out[idx] -= g;
                } else if pos == len - 1 {
                    out[idx] += g;
                    out[idx - stride] -= g;
                } else {
                    out[idx + stride] += g * half;
                    out[idx - stride] -= g * half;
                }
            }
        }
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(data: &[f32], pct: f32) -> f32 {
    debug_assert!(!data.is_empty());
    let mut sorted: Vec<f32> = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = pct as f64 / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank as usize; // floor, rank >= 0
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = (rank - lo as f64) as f32;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: (usize, usize, usize)) -> Volume {
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n).map(|i| i as f32).collect();
        Volume::new(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data).unwrap()
    }

    #[test]
    fn new_rejects_size_mismatch() {
        let err = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), vec![0.0; 63])
            .unwrap_err();
        assert!(matches!(err, VolumeError::DataSizeMismatch { .. }));
    }

    #[test]
    fn new_rejects_nan() {
        let err = Volume::new((2, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), vec![0.0, f32::NAN])
            .unwrap_err();
        assert_eq!(err, VolumeError::NonFinite(1));
    }

    #[test]
    fn crop_full_region_is_identity() {
        let v = ramp_volume((3, 4, 5));
        let c = v
            .crop(Region {
                start: (0, 0, 0),
                extent: (3, 4, 5),
            })
            .unwrap();
        assert_eq!(c, v);
    }

    #[test]
    fn crop_matches_index_arithmetic() {
        let v = ramp_volume((4, 4, 4));
        let c = v
            .crop(Region {
                start: (1, 1, 1),
                extent: (2, 2, 2),
            })
            .unwrap();
        assert_eq!(c.dims(), (2, 2, 2));
        // direct index enumeration oracle
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    assert_eq!(c.at(i, j, k), v.at(i + 1, j + 1, k + 1));
                }
            }
        }
        assert_eq!(c.origin(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn crop_zero_extent_errors() {
        let v = ramp_volume((4, 4, 4));
        let err = v
            .crop(Region {
                start: (0, 0, 0),
                extent: (0, 2, 2),
            })
            .unwrap_err();
        assert!(matches!(err, VolumeError::InvalidExtent(_)));
    }

    #[test]
    fn crop_composition() {
        let v = ramp_volume((6, 5, 4));
        let a = Region {
            start: (1, 1, 0),
            extent: (4, 3, 3),
        };
        let b = Region {
            start: (1, 0, 1),
            extent: (2, 2, 2),
        };
        let two_step = v.crop(a).unwrap().crop(b).unwrap();
        let composed = v
            .crop(Region {
                start: (2, 1, 1),
                extent: (2, 2, 2),
            })
            .unwrap();
        assert_eq!(two_step.data(), composed.data());
    }

    #[test]
    fn resample_identity() {
        let v = ramp_volume((4, 3, 2));
        let r = v.resample_trilinear((4, 3, 2)).unwrap();
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_constant() {
        let v = Volume::filled((5, 5, 5), 3.25).unwrap();
        let r = v.resample_trilinear((2, 7, 3)).unwrap();
        assert!(r.data().iter().all(|&x| (x - 3.25).abs() < 1e-6));
    }

    #[test]
    fn resample_linear_ramp_matches_analytic() {
        // f(i) = i along x, 8 -> 4. Output voxel centers in input index space:
        // x = (i + 0.5) * 2 - 0.5.
        let v = ramp_volume((8, 1, 1));
        let r = v.resample_trilinear((4, 1, 1)).unwrap();
        for i in 0..4 {
            let x = (i as f32 + 0.5) * 2.0 - 0.5;
            let expected = x.clamp(0.0, 7.0);
            assert!((r.data()[i] - expected).abs() < 1e-6, "i={i}");
        }
        assert_eq!(r.spacing().0, 2.0);
    }

    #[test]
    fn resample_preserves_bounds() {
        let v = ramp_volume((5, 4, 3));
        let r = v.resample_trilinear((9, 2, 7)).unwrap();
        let (lo, hi) = (v.min_value(), v.max_value());
        assert!(r.data().iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn normalize_minmax() {
        let v = ramp_volume((101, 1, 1)); // 0..=100
        let n = v.normalize_intensity(0.0, 100.0).unwrap();
        assert!((n.min_value() + 1.0).abs() < 1e-6);
        assert!((n.max_value() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_constant_errors() {
        let v = Volume::filled((3, 3, 3), 5.0).unwrap();
        assert_eq!(
            v.normalize_intensity(0.0, 100.0).unwrap_err(),
            VolumeError::DegenerateIntensityRange
        );
    }

    #[test]
    fn normalize_clamp_fraction() {
        // uniform-random volume, pct (2, 98): at most ~4% of voxels clamp.
        let mut rng = crate::rng::Rng::from_seed(3);
        let data: Vec<f32> = (0..64 * 64).map(|_| rng.uniform() as f32).collect();
        let v = Volume::new((64, 64, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data).unwrap();
        let n = v.normalize_intensity(2.0, 98.0).unwrap();
        let clamped = n
            .data()
            .iter()
            .filter(|&&x| x == -1.0 || x == 1.0)
            .count();
        assert!(clamped as f32 / n.len() as f32 <= 0.045, "clamped {clamped}");
    }

    #[test]
    fn gradient_constant_is_zero() {
        let v = Volume::filled((4, 4, 4), 2.0).unwrap();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let g = v.gradient(axis).unwrap();
            assert!(g.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradient_ramp() {
        let dims = (5, 2, 2);
        let n = 5 * 2 * 2;
        let mut data = vec![0.0; n];
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..5 {
                    data[i + 5 * (j + 2 * k)] = 2.0 * i as f32;
                }
            }
        }
        let v = Volume::new(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data).unwrap();
        let g = v.gradient(Axis::X).unwrap();
        // boundary one-sided stencils also equal 2 on a ramp
        assert!(g.data().iter().all(|&x| (x - 2.0).abs() < 1e-6));
    }

    #[test]
    fn gradient_matches_brute_force_stencil() {
        let mut rng = crate::rng::Rng::from_seed(9);
        let data: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
        let v = Volume::new((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data).unwrap();
        let g = v.gradient(Axis::Y).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let expected = if j == 0 {
                        v.at(i, 1, k) - v.at(i, 0, k)
                    } else if j == 3 {
                        v.at(i, 3, k) - v.at(i, 2, k)
                    } else {
                        0.5 * (v.at(i, j + 1, k) - v.at(i, j - 1, k))
                    };
                    assert_eq!(g.at(i, j, k), expected);
                }
            }
        }
    }

    #[test]
    fn gradient_too_short_axis_errors() {
        let v = Volume::filled((1, 4, 4), 0.0).unwrap();
        assert!(matches!(
            v.gradient(Axis::X).unwrap_err(),
            VolumeError::AxisTooShort { .. }
        ));
    }

    #[test]
    fn gradient_is_linear() {
        let mut rng = crate::rng::Rng::from_seed(21);
        let a: Vec<f32> = (0..27).map(|_| rng.normal() as f32).collect();
        let b: Vec<f32> = (0..27).map(|_| rng.normal() as f32).collect();
        let (alpha, beta) = (1.5f32, -0.7f32);
        let va = Volume::new((3, 3, 3), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), a.clone()).unwrap();
        let vb = Volume::new((3, 3, 3), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), b.clone()).unwrap();
        let mixed: Vec<f32> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let vm = va.with_data(mixed).unwrap();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let gm = vm.gradient(axis).unwrap();
            let ga = va.gradient(axis).unwrap();
            let gb = vb.gradient(axis).unwrap();
            for ((m, a), b) in gm.data().iter().zip(ga.data()).zip(gb.data()) {
                assert!((m - (alpha * a + beta * b)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn percentile_linear_interpolation() {
        let data = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&data, 0.0), 0.0);
        assert_eq!(percentile(&data, 100.0), 4.0);
        assert_eq!(percentile(&data, 50.0), 2.0);
        assert!((percentile(&data, 62.5) - 2.5).abs() < 1e-6);
    }
}
