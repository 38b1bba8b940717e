//! Bone segmentation from synthesized CT volumes: per-axial-slice Otsu
//! thresholding inside a tunable intensity window, binary median smoothing
//! (majority vote), and connected-component cleanup.

use crate::volume::Volume;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("degenerate slice")]
    DegenerateSlice,
    #[error("window lo {0} must be < hi {1}")]
    BadWindow(f32, f32),
    #[error("bins must be >= 2")]
    BadBins,
    #[error("radius must be >= 1")]
    BadRadius,
    #[error("component count must be >= 1")]
    BadComponentCount,
    #[error("mask voxel {index} is {value}, not 0 or 1")]
    NotBinary { index: usize, value: f32 },
}

/// Binary volume; geometry matches the source volume, data is {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    vol: Volume,
}

impl Mask {
    pub fn from_volume(vol: Volume) -> Result<Self, SegmentError> {
        if let Some((index, &value)) = vol
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(SegmentError::NotBinary { index, value });
        }
        Ok(Mask { vol })
    }

    pub fn volume(&self) -> &Volume {
        &self.vol
    }
    pub fn into_volume(self) -> Volume {
        self.vol
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        self.vol.dims()
    }
    pub fn data(&self) -> &[f32] {
        self.vol.data()
    }
    pub fn count_foreground(&self) -> usize {
        self.vol.data().iter().filter(|&&v| v == 1.0).count()
    }

    fn with_data(&self, data: Vec<f32>) -> Mask {
        Mask {
            vol: self.vol.with_data(data).expect("same length"),
        }
    }
}

/// Dice overlap coefficient of two same-shaped masks: 2|A∩B| / (|A|+|B|).
/// Two empty masks count as perfect agreement (1.0).
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    assert_eq!(a.dims(), b.dims(), "mask dims differ");
    let mut inter = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x == 1.0 && y == 1.0 {
            inter += 1;
        }
    }
    let total = a.count_foreground() + b.count_foreground();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub const OTSU_BINS: usize = 256;

/// Otsu's threshold over `bins` equal-width histogram bins spanning
/// `window` (or the slice min/max). Returns the bin edge maximizing the
/// between-class variance `w0*w1*(mu0-mu1)^2`, ties broken toward the
/// lowest edge; callers classify foreground as `value > threshold`.
/// Values outside the window are excluded from the histogram.
pub fn otsu_threshold(
    values: &[f32],
    bins: usize,
    window: Option<(f32, f32)>,
) -> Result<f32, SegmentError> {
    if bins < 2 {
        return Err(SegmentError::BadBins);
    }
    if let Some((lo, hi)) = window {
        if !(lo < hi) {
            return Err(SegmentError::BadWindow(lo, hi));
        }
    }
    let in_window = |v: f32| match window {
        Some((lo, hi)) => v >= lo && v <= hi,
        None => true,
    };
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut distinct: Option<f32> = None;
    let mut has_two = false;
    for &v in values.iter().filter(|&&v| in_window(v)) {
        lo = lo.min(v);
        hi = hi.max(v);
        match distinct {
            None => distinct = Some(v),
            Some(d) if d != v => has_two = true,
            _ => {}
        }
    }
    if !has_two {
        return Err(SegmentError::DegenerateSlice);
    }
    let (lo, hi) = window.unwrap_or((lo, hi));
    let width = (hi - lo) / bins as f32;

    // per-bin counts and value sums give exact class means
    let mut count = vec![0u64; bins];
    let mut sum = vec![0.0f64; bins];
    for &v in values.iter().filter(|&&v| in_window(v)) {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        count[b] += 1;
        sum[b] += v as f64;
    }
    let total: u64 = count.iter().sum();
    let total_sum: f64 = sum.iter().sum();

    let mut best_edge = 1usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut c0 = 0u64;
    let mut s0 = 0.0f64;
    for edge in 1..bins {
        c0 += count[edge - 1];
        s0 += sum[edge - 1];
        let c1 = total - c0;
        if c0 == 0 || c1 == 0 {
            continue;
        }
        let w0 = c0 as f64 / total as f64;
        let w1 = c1 as f64 / total as f64;
        let mu0 = s0 / c0 as f64;
        let mu1 = (total_sum - s0) / c1 as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_edge = edge;
        }
    }
    Ok(lo + best_edge as f32 * width)
}

/// Per-slice threshold outcomes from `segment_volume`; degenerate slices
/// carry no threshold and contribute only background.
pub type SliceThresholds = Vec<Option<f32>>;

/// Threshold each axial (z) slice independently with Otsu inside `window`;
/// degenerate slices become all-background.
pub fn segment_volume(
    v: &Volume,
    window: (f32, f32),
) -> Result<(Mask, SliceThresholds), SegmentError> {
    if !(window.0 < window.1) {
        return Err(SegmentError::BadWindow(window.0, window.1));
    }
    let (nx, ny, nz) = v.dims();
    let slice_len = nx * ny;
    let mut data = vec![0.0f32; v.len()];
    let mut thresholds = Vec::with_capacity(nz);
    for k in 0..nz {
        let slice = &v.data()[k * slice_len..(k + 1) * slice_len];
        match otsu_threshold(slice, OTSU_BINS, Some(window)) {
            Ok(t) => {
                for (o, &val) in data[k * slice_len..(k + 1) * slice_len]
                    .iter_mut()
                    .zip(slice)
                {
                    if val > t {
                        *o = 1.0;
                    }
                }
                thresholds.push(Some(t));
            }
            Err(SegmentError::DegenerateSlice) => thresholds.push(None),
            Err(e) => return Err(e),
        }
    }
    let mask = Mask {
        vol: v.with_data(data).expect("same length"),
    };
    Ok((mask, thresholds))
}

/// Binary median filter as a majority vote over the `(2r+1)^3`
/// neighborhood, zero-padded at the boundary.
pub fn median_smooth(m: &Mask, radius: usize) -> Result<Mask, SegmentError> {
    if radius < 1 {
        return Err(SegmentError::BadRadius);
    }
    let (nx, ny, nz) = m.dims();
    let r = radius as isize;
    let need = {
        let side = 2 * radius + 1;
        (side * side * side / 2 + 1) as u32
    };
    let src = m.data();
    let mut out = vec![0.0f32; src.len()];
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    for k in 0..nz as isize {
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                let mut ones = 0u32;
                for dz in -r..=r {
                    let z = k + dz;
                    if z < 0 || z >= nz as isize {
                        continue;
                    }
                    for dy in -r..=r {
                        let y = j + dy;
                        if y < 0 || y >= ny as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let x = i + dx;
                            if x < 0 || x >= nx as isize {
                                continue;
                            }
                            if src[idx(x as usize, y as usize, z as usize)] == 1.0 {
                                ones += 1;
                            }
                        }
                    }
                }
                if ones >= need {
                    out[idx(i as usize, j as usize, k as usize)] = 1.0;
                }
            }
        }
    }
    Ok(m.with_data(out))
}

/// Label 6-connected foreground components and keep the `n` largest by
/// voxel count; equal sizes tie toward the lowest (scan-order) label.
pub fn keep_largest_components(m: &Mask, n: usize) -> Result<Mask, SegmentError> {
    if n < 1 {
        return Err(SegmentError::BadComponentCount);
    }
    let (nx, ny, nz) = m.dims();
    let src = m.data();
    let mut label = vec![u32::MAX; src.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..src.len() {
        if src[start] != 1.0 || label[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            sizes[id as usize] += 1;
            let i = p % nx;
            let j = (p / nx) % ny;
            let k = p / (nx * ny);
            let neighbors = [
                (i > 0).then(|| p - 1),
                (i + 1 < nx).then(|| p + 1),
                (j > 0).then(|| p - nx),
                (j + 1 < ny).then(|| p + nx),
                (k > 0).then(|| p - nx * ny),
                (k + 1 < nz).then(|| p + nx * ny),
            ];
            for q in neighbors.into_iter().flatten() {
                if src[q] == 1.0 && label[q] == u32::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            }
        }
    }
    // rank labels by (size desc, label asc)
    let mut order: Vec<u32> = (0..sizes.len() as u32).collect();
    order.sort_by(|&a, &b| {
        sizes[b as usize]
            .cmp(&sizes[a as usize])
            .then(a.cmp(&b))
    });
    let keep: Vec<u32> = order.into_iter().take(n).collect();
    let mut out = vec![0.0f32; src.len()];
    for (o, &l) in out.iter_mut().zip(&label) {
        if l != u32::MAX && keep.contains(&l) {
            *o = 1.0;
        }
    }
    Ok(m.with_data(out))
}
