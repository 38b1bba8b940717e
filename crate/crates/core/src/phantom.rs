//! Synthetic two-modality spine phantoms: ellipsoidal "vertebrae" stacked
//! along a laterally curved centerline inside a soft-tissue cylinder,
//! rendered under MR-like and CT-like intensity maps with seeded noise.
//! Ground truth comes for free, which makes the phantoms the backbone of
//! the end-to-end tests.

use crate::rng::{derive_seed, Rng};
use crate::segment::Mask;
use crate::volume::Volume;
use alloc::vec;
use thiserror::Error;

/// Intensity window that isolates soft tissue + bone (excludes background)
/// in the default CT map; per-slice Otsu inside it recovers the bone mask
/// exactly on noise-free phantoms.
pub const CT_BONE_WINDOW: (f32, f32) = (-0.5, 1.0);

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("vertebra blobs do not fit the volume dims")]
    BlobsDoNotFit,
    #[error("bad phantom spec: {0}")]
    BadSpec(&'static str),
}

/// Intensity triples are (background, soft_tissue, bone).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub n_vertebra_blobs: usize,
    /// Peak lateral (x) deviation of the spine centerline, in voxels.
    pub curvature_amplitude: f32,
    pub mr_intensity_map: (f32, f32, f32),
    pub ct_intensity_map: (f32, f32, f32),
    /// Standard deviation of the additive Gaussian texture noise; 0 gives
    /// a noise-free phantom.
    pub noise_sd: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (32, 16, 16),
            n_vertebra_blobs: 4,
            curvature_amplitude: 3.0,
            // bone dark in MR, bright in CT; soft tissue the other way
            mr_intensity_map: (-0.8, 0.4, -0.4),
            ct_intensity_map: (-0.8, -0.2, 0.8),
            noise_sd: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Label {
    Background,
    Soft,
    Bone,
}

struct Geometry {
    blob_centers: vec::Vec<(f32, f32, f32)>,
    radii: (f32, f32, f32),
    soft_radius: f32,
    cy: f32,
}

impl PhantomSpec {
    fn validate(&self) -> Result<(), PhantomError> {
        let (nx, ny, nz) = self.dims;
        if nx < 8 || ny < 8 || nz < 4 {
            return Err(PhantomError::BadSpec("dims too small"));
        }
        if self.n_vertebra_blobs == 0 {
            return Err(PhantomError::BadSpec("need at least one blob"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(PhantomError::BadSpec("noise_sd must be >= 0"));
        }
        for map in [self.mr_intensity_map, self.ct_intensity_map] {
            let (bg, soft, bone) = map;
            if bg == soft || soft == bone || bg == bone {
                return Err(PhantomError::BadSpec("intensity triple not distinct"));
            }
        }
        // the translation task needs opposite bone contrast in the two maps
        let mr_contrast = self.mr_intensity_map.2 - self.mr_intensity_map.1;
        let ct_contrast = self.ct_intensity_map.2 - self.ct_intensity_map.1;
        if mr_contrast * ct_contrast >= 0.0 {
            return Err(PhantomError::BadSpec(
                "bone contrast must have opposite sign in MR and CT maps",
            ));
        }
        Ok(())
    }

    /// Centerline x position at slice z.
    fn centerline_x(&self, z: f32) -> f32 {
        let (nx, _, nz) = self.dims;
        let cx = (nx as f32 - 1.0) / 2.0;
        let phase = core::f32::consts::PI * z / (nz as f32 - 1.0);
        cx + self.curvature_amplitude * libm::sinf(phase)
    }

    fn geometry(&self) -> Result<Geometry, PhantomError> {
        let (nx, ny, nz) = self.dims;
        let n = self.n_vertebra_blobs;
        let cy = (ny as f32 - 1.0) / 2.0;
        let r_xy = 0.2 * nx.min(ny) as f32;
        let z_margin = 0.15 * (nz as f32 - 1.0);
        let span = nz as f32 - 1.0 - 2.0 * z_margin;
        let gap = if n > 1 { span / (n as f32 - 1.0) } else { span };
        // blob half-length along z: adjacent blobs overlap slightly and the
        // end blobs reach past the margins, so every axial slice contains
        // bone — per-slice thresholding then always sees both tissue
        // classes, as in a real spine scan
        let r_z = (0.7 * gap).max(1.15 * z_margin).max(1.0);
        let soft_radius = 0.45 * ny as f32;
        let mut blob_centers = vec::Vec::with_capacity(n);
        for i in 0..n {
            let z = if n > 1 {
                z_margin + i as f32 * gap
            } else {
                (nz as f32 - 1.0) / 2.0
            };
            let x = self.centerline_x(z);
            // blobs must fit laterally; along z they may touch the faces
            if x - r_xy < 0.0
                || x + r_xy > nx as f32 - 1.0
                || cy - r_xy < 0.0
                || cy + r_xy > ny as f32 - 1.0
            {
                return Err(PhantomError::BlobsDoNotFit);
            }
            blob_centers.push((x, cy, z));
        }
        Ok(Geometry {
            blob_centers,
            radii: (r_xy, r_xy, r_z),
            soft_radius,
            cy,
        })
    }

    /// Analytic total volume (voxel units) of the vertebra ellipsoids.
    pub fn analytic_bone_volume(&self) -> Result<f64, PhantomError> {
        let g = self.geometry()?;
        let (rx, ry, rz) = g.radii;
        Ok(self.n_vertebra_blobs as f64
            * (4.0 / 3.0)
            * core::f64::consts::PI
            * rx as f64
            * ry as f64
            * rz as f64)
    }
}

/// Renders the same geometry under both intensity maps (independent noise
/// streams) and returns (mr, ct, bone_mask). Deterministic in the spec.
pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<(Volume, Volume, Mask), PhantomError> {
    spec.validate()?;
    let geo = spec.geometry()?;
    let (nx, ny, nz) = spec.dims;
    let n_vox = nx * ny * nz;

    let mut labels = vec![Label::Background; n_vox];
    for k in 0..nz {
        let line_x = spec.centerline_x(k as f32);
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let dx = i as f32 - line_x;
                let dy = j as f32 - geo.cy;
                if dx * dx + dy * dy <= geo.soft_radius * geo.soft_radius {
                    labels[idx] = Label::Soft;
                }
                let (rx, ry, rz) = geo.radii;
                for &(bx, by, bz) in &geo.blob_centers {
                    let ex = (i as f32 - bx) / rx;
                    let ey = (j as f32 - by) / ry;
                    let ez = (k as f32 - bz) / rz;
                    if ex * ex + ey * ey + ez * ez <= 1.0 {
                        labels[idx] = Label::Bone;
                        break;
                    }
                }
            }
        }
    }

    let render = |map: (f32, f32, f32), salt: u64| {
        let mut rng = Rng::from_seed(derive_seed(spec.seed, &[salt]));
        let data = labels
            .iter()
            .map(|l| {
                let base = match l {
                    Label::Background => map.0,
                    Label::Soft => map.1,
                    Label::Bone => map.2,
                };
                base + spec.noise_sd * rng.normal() as f32
            })
            .collect();
        Volume::new(spec.dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data).unwrap()
    };
    let mr = render(spec.mr_intensity_map, 1);
    let ct = render(spec.ct_intensity_map, 2);

    let mask_data = labels
        .iter()
        .map(|l| if *l == Label::Bone { 1.0 } else { 0.0 })
        .collect();
    let mask = Mask::from_volume(
        Volume::new(spec.dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), mask_data).unwrap(),
    )
    .unwrap();
    Ok((mr, ct, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{dice, segment_volume};
    use alloc::vec::Vec;

    #[test]
    fn every_axial_slice_contains_bone() {
        // per-slice thresholding relies on both tissue classes appearing
        // in each slice
        for dims in [(32usize, 16usize, 16usize), (8, 8, 8), (16, 12, 12), (32, 32, 24)] {
            // keep the lateral deviation inside narrow volumes
            let max_amp = 0.9 * ((dims.0 as f32 - 1.0) / 2.0 - 0.2 * dims.0.min(dims.1) as f32);
            let spec = PhantomSpec {
                dims,
                curvature_amplitude: max_amp.min(3.0),
                ..PhantomSpec::default()
            };
            let (_, _, mask) = generate_phantom_pair(&spec).unwrap();
            let (nx, ny, nz) = mask.dims();
            for k in 0..nz {
                let fg = mask.data()[k * nx * ny..(k + 1) * nx * ny]
                    .iter()
                    .filter(|&&v| v == 1.0)
                    .count();
                assert!(fg > 0, "dims {dims:?}: slice {k} has no bone");
            }
        }
    }

    #[test]
    fn deterministic_in_spec() {
        let spec = PhantomSpec::default();
        let (mr1, ct1, m1) = generate_phantom_pair(&spec).unwrap();
        let (mr2, ct2, m2) = generate_phantom_pair(&spec).unwrap();
        assert_eq!(mr1.data(), mr2.data());
        assert_eq!(ct1.data(), ct2.data());
        assert_eq!(m1.volume().data(), m2.volume().data());
    }

    #[test]
    fn straight_column_centroid_constant() {
        let spec = PhantomSpec {
            curvature_amplitude: 0.0,
            ..PhantomSpec::default()
        };
        let (_, _, mask) = generate_phantom_pair(&spec).unwrap();
        let (nx, ny, nz) = mask.dims();
        let data = mask.volume().data();
        let mut centroids: Vec<f32> = Vec::new();
        for k in 0..nz {
            let mut sum = 0.0f32;
            let mut count = 0u32;
            for j in 0..ny {
                for i in 0..nx {
                    if data[i + nx * (j + ny * k)] > 0.5 {
                        sum += i as f32;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                centroids.push(sum / count as f32);
            }
        }
        assert!(!centroids.is_empty());
        let first = centroids[0];
        for c in &centroids {
            assert!((c - first).abs() <= 0.5, "centroid drifted: {c} vs {first}");
        }
    }

    #[test]
    fn curved_column_centroid_moves() {
        let spec = PhantomSpec {
            curvature_amplitude: 4.0,
            ..PhantomSpec::default()
        };
        let (_, _, mask) = generate_phantom_pair(&spec).unwrap();
        let (nx, ny, nz) = mask.dims();
        let data = mask.volume().data();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for k in 0..nz {
            let mut sum = 0.0f32;
            let mut count = 0u32;
            for j in 0..ny {
                for i in 0..nx {
                    if data[i + nx * (j + ny * k)] > 0.5 {
                        sum += i as f32;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                let c = sum / count as f32;
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
        assert!(hi - lo > 1.0, "lateral deviation too small: {lo}..{hi}");
    }

    #[test]
    fn bone_fraction_matches_analytic() {
        let spec = PhantomSpec::default();
        let (_, _, mask) = generate_phantom_pair(&spec).unwrap();
        let measured = mask.count_foreground() as f64;
        let analytic = spec.analytic_bone_volume().unwrap();
        let rel = (measured - analytic).abs() / analytic;
        assert!(rel < 0.2, "voxelized {measured} vs analytic {analytic}");
    }

    #[test]
    fn noise_free_ct_otsu_recovers_mask_exactly() {
        let spec = PhantomSpec {
            noise_sd: 0.0,
            ..PhantomSpec::default()
        };
        let (_, ct, truth) = generate_phantom_pair(&spec).unwrap();
        let (seg, _thresholds) = segment_volume(&ct, CT_BONE_WINDOW).unwrap();
        assert_eq!(dice(&seg, &truth), 1.0);
    }

    #[test]
    fn modalities_differ_but_share_mask() {
        let spec = PhantomSpec::default();
        let (mr, ct, _) = generate_phantom_pair(&spec).unwrap();
        let differing = mr
            .data()
            .iter()
            .zip(ct.data())
            .filter(|(a, b)| a != b)
            .count();
        assert!(differing > mr.data().len() / 2);
    }

    #[test]
    fn oversized_blobs_rejected() {
        let spec = PhantomSpec {
            curvature_amplitude: 20.0,
            ..PhantomSpec::default()
        };
        assert_eq!(
            generate_phantom_pair(&spec).unwrap_err(),
            PhantomError::BlobsDoNotFit
        );
    }

    #[test]
    fn same_contrast_sign_rejected() {
        let spec = PhantomSpec {
            mr_intensity_map: (-0.8, -0.2, 0.8),
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom_pair(&spec).unwrap_err(),
            PhantomError::BadSpec(_)
        ));
    }
}
