//! Adversarial, cycle-consistency, normalized-cross-correlation and
//! gradient-correlation losses, composed into the total training objective.
//!
//! `gradient_correlation` keeps the 1/2 coefficient in front of the three
//! axis terms exactly as printed in its source formula; see
//! [`GC_AXIS_COEFFICIENT`]. Correcting it to 1/3 would only rescale the gc
//! weight and is deliberately not done silently.

use crate::autograd::{AutogradError, Graph, TensorId};
use crate::scalar::Scalar;
use crate::volume::Axis;
use thiserror::Error;

/// Coefficient applied to the sum of the three per-axis NCC terms. Kept
/// verbatim from the printed formula (1/2 with three terms), so
/// `gradient_correlation(a, a) == 3/2`.
pub const GC_AXIS_COEFFICIENT: f64 = 0.5;

/// Probability clamp applied before `log`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("discriminator output outside [0, 1]: {0} (missing sigmoid?)")]
    ProbabilityOutOfRange(f64),
    #[error("degenerate NCC input (zero variance)")]
    DegenerateNcc,
    #[error("shape mismatch between paired tensors")]
    ShapeMismatch,
}

/// Weights for the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cycle: f64,
    pub gamma_gc: f64,
}

impl Default for LossWeights {
    /// lambda = 10.0, gamma = 0.1 * lambda.
    fn default() -> Self {
        LossWeights {
            lambda_cycle: 10.0,
            gamma_gc: 1.0,
        }
    }
}

/// Per-step scalar loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub adv_ct: f64,
    pub adv_mr: f64,
    pub cycle: f64,
    pub gc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn compose(adv_ct: f64, adv_mr: f64, cycle: f64, gc: f64, w: &LossWeights) -> Self {
        LossReport {
            adv_ct,
            adv_mr,
            cycle,
            gc,
            total: adv_ct + adv_mr + w.lambda_cycle * cycle + w.gamma_gc * gc,
        }
    }
}

fn check_probabilities<T: Scalar>(g: &Graph<T>, id: TensorId) -> Result<(), LossError> {
    for &v in g.values(id) {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(LossError::ProbabilityOutOfRange(f));
        }
    }
    Ok(())
}

/// mean(log d_real) + mean(log(1 - d_fake)), with inputs clamped to
/// [eps, 1 - eps]. The discriminator ascends this; generators use
/// `generator_adversarial` instead.
pub fn adversarial_loss<T: Scalar>(
    g: &mut Graph<T>,
    d_real: TensorId,
    d_fake: TensorId,
) -> Result<TensorId, LossError> {
    check_probabilities(g, d_real)?;
    check_probabilities(g, d_fake)?;
    let eps = T::from_f64(PROB_EPS);
    let one_m_eps = T::from_f64(1.0 - PROB_EPS);
    let real = g.clamp(d_real, eps, one_m_eps);
    let log_real = g.log(real)?;
    let m_real = g.mean(log_real);
    let one_m_fake = g.affine(d_fake, -T::ONE, T::ONE);
    let fake = g.clamp(one_m_fake, eps, one_m_eps);
    let log_fake = g.log(fake)?;
    let m_fake = g.mean(log_fake);
    Ok(g.add(m_real, m_fake)?)
}

/// Adversarial term for the CT-domain discriminator.
pub fn adversarial_loss_ct<T: Scalar>(
    g: &mut Graph<T>,
    d_real: TensorId,
    d_fake: TensorId,
) -> Result<TensorId, LossError> {
    adversarial_loss(g, d_real, d_fake)
}

/// Adversarial term for the MR-domain discriminator; same pure function.
pub fn adversarial_loss_mr<T: Scalar>(
    g: &mut Graph<T>,
    d_real: TensorId,
    d_fake: TensorId,
) -> Result<TensorId, LossError> {
    adversarial_loss(g, d_real, d_fake)
}

/// Generator-side adversarial surrogate. Non-saturating form
/// `-mean(log d_fake)` by default; the saturating minimax form
/// `mean(log(1 - d_fake))` stays available behind the flag.
pub fn generator_adversarial<T: Scalar>(
    g: &mut Graph<T>,
    d_fake: TensorId,
    saturating: bool,
) -> Result<TensorId, LossError> {
    check_probabilities(g, d_fake)?;
    let eps = T::from_f64(PROB_EPS);
    let one_m_eps = T::from_f64(1.0 - PROB_EPS);
    if saturating {
        let one_m_fake = g.affine(d_fake, -T::ONE, T::ONE);
        let c = g.clamp(one_m_fake, eps, one_m_eps);
        let l = g.log(c)?;
        Ok(g.mean(l))
    } else {
        let c = g.clamp(d_fake, eps, one_m_eps);
        let l = g.log(c)?;
        let m = g.mean(l);
        Ok(g.neg(m))
    }
}

/// Mean-per-voxel L1 between real and recovered volumes, summed over the
/// two domains.
pub fn cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    real_ct: TensorId,
    rec_ct: TensorId,
    real_mr: TensorId,
    rec_mr: TensorId,
) -> Result<TensorId, LossError> {
    if g.shape(real_ct) != g.shape(rec_ct) || g.shape(real_mr) != g.shape(rec_mr) {
        return Err(LossError::ShapeMismatch);
    }
    let d_ct = g.sub(rec_ct, real_ct)?;
    let a_ct = g.abs(d_ct);
    let m_ct = g.mean(a_ct);
    let d_mr = g.sub(rec_mr, real_mr)?;
    let a_mr = g.abs(d_mr);
    let m_mr = g.mean(a_mr);
    Ok(g.add(m_ct, m_mr)?)
}

/// Pearson-style normalized cross-correlation of two equally shaped
/// tensors; result in [-1, 1], differentiable. Errors on zero variance.
pub fn ncc<T: Scalar>(
    g: &mut Graph<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch);
    }
    let variance_of = |g: &Graph<T>, id: TensorId| {
        let vals = g.values(id);
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        vals.iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
    };
    if variance_of(g, a) == 0.0 || variance_of(g, b) == 0.0 {
        return Err(LossError::DegenerateNcc);
    }
    let ma = g.mean(a);
    let mb = g.mean(b);
    let ca = g.sub(a, ma)?;
    let cb = g.sub(b, mb)?;
    let prod = g.mul(ca, cb)?;
    let num = g.sum(prod);
    let ca2 = g.mul(ca, ca)?;
    let cb2 = g.mul(cb, cb)?;
    let sa2 = g.sum(ca2);
    let sb2 = g.sum(cb2);
    let na = g.sqrt(sa2);
    let nb = g.sqrt(sb2);
    let den = g.mul(na, nb)?;
    Ok(g.div(num, den)?)
}

/// Gradient correlation between two 5D tensor volumes:
/// `GC_AXIS_COEFFICIENT * (ncc(grad_x a, grad_x b) + ncc(grad_y ..) +
/// ncc(grad_z ..))`. Gradients use the shared finite-difference stencil.
pub fn gradient_correlation<T: Scalar>(
    g: &mut Graph<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch);
    }
    let mut acc: Option<TensorId> = None;
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let ga = g.spatial_gradient(a, axis)?;
        let gb = g.spatial_gradient(b, axis)?;
        let term = ncc(g, ga, gb)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(g.scalar_mul(acc.unwrap(), T::from_f64(GC_AXIS_COEFFICIENT)))
}

/// Gradient-consistency loss:
/// `1/2 * [(1 - GC(real_ct, fake_mr)) + (1 - GC(real_mr, fake_ct))]`.
pub fn gc_loss<T: Scalar>(
    g: &mut Graph<T>,
    real_ct: TensorId,
    fake_mr: TensorId,
    real_mr: TensorId,
    fake_ct: TensorId,
) -> Result<TensorId, LossError> {
    let gc_ct = gradient_correlation(g, real_ct, fake_mr)?;
    let gc_mr = gradient_correlation(g, real_mr, fake_ct)?;
    let half = T::from_f64(0.5);
    let t_ct = g.affine(gc_ct, -T::ONE, T::ONE);
    let t_mr = g.affine(gc_mr, -T::ONE, T::ONE);
    let sum = g.add(t_ct, t_mr)?;
    Ok(g.scalar_mul(sum, half))
}

/// Compose the four scalar loss terms into a weighted total on the graph;
/// returns the total tensor plus the numeric report.
pub fn total_objective<T: Scalar>(
    g: &mut Graph<T>,
    adv_ct: TensorId,
    adv_mr: TensorId,
    cycle: TensorId,
    gc: TensorId,
    w: &LossWeights,
) -> Result<(TensorId, LossReport), LossError> {
    let wc = g.scalar_mul(cycle, T::from_f64(w.lambda_cycle));
    let wg = g.scalar_mul(gc, T::from_f64(w.gamma_gc));
    let s1 = g.add(adv_ct, adv_mr)?;
    let s2 = g.add(s1, wc)?;
    let total = g.add(s2, wg)?;
    let report = LossReport::compose(
        g.scalar_value(adv_ct).to_f64(),
        g.scalar_value(adv_mr).to_f64(),
        g.scalar_value(cycle).to_f64(),
        g.scalar_value(gc).to_f64(),
        w,
    );
    Ok((total, report))
}

/// Per-element loop oracles used by verification suites; kept independent of
/// the graph path on purpose.
pub mod oracle {
    use alloc::vec::Vec;

    pub fn adversarial(d_real: &[f64], d_fake: &[f64], eps: f64) -> f64 {
        let m1: f64 = d_real
            .iter()
            .map(|&v| v.clamp(eps, 1.0 - eps))
            .map(libm::log)
            .sum::<f64>()
            / d_real.len() as f64;
        let m2: f64 = d_fake
            .iter()
            .map(|&v| (1.0 - v).clamp(eps, 1.0 - eps))
            .map(libm::log)
            .sum::<f64>()
            / d_fake.len() as f64;
        m1 + m2
    }

    pub fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64
    }

    pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma: f64 = a.iter().sum::<f64>() / n;
        let mb: f64 = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (libm::sqrt(da) * libm::sqrt(db))
    }

    /// Finite-difference gradient of a (w, h, d) x-fastest buffer, matching
    /// the production stencil by independent re-derivation.
    pub fn gradient(data: &[f64], dims: (usize, usize, usize), axis: usize) -> Vec<f64> {
        let (nx, ny, nz) = dims;
        let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
        let mut out = alloc::vec![0.0; data.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let (pos, len) = match axis {
                        0 => (i, nx),
                        1 => (j, ny),
                        _ => (k, nz),
                    };
                    let get = |p: usize| match axis {
                        0 => data[idx(p, j, k)],
                        1 => data[idx(i, p, k)],
                        _ => data[idx(i, j, p)],
                    };
                    out[idx(i, j, k)] = if pos == 0 {
                        get(1) - get(0)
                    } else if pos == len - 1 {
                        get(len - 1) - get(len - 2)
                    } else {
                        0.5 * (get(pos + 1) - get(pos - 1))
                    };
                }
            }
        }
        out
    }

    pub fn gradient_correlation(
        a: &[f64],
        b: &[f64],
        dims: (usize, usize, usize),
        coefficient: f64,
    ) -> f64 {
        let mut acc = 0.0;
        for axis in 0..3 {
            acc += ncc(&gradient(a, dims, axis), &gradient(b, dims, axis));
        }
        coefficient * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn adversarial_perfect_discriminator_near_zero() {
        let mut g = Graph::<f64>::new();
        let eps = PROB_EPS;
        let real = g.leaf(&[8], vec![1.0 - eps; 8], false);
        let fake = g.leaf(&[8], vec![eps; 8], false);
        let l = adversarial_loss(&mut g, real, fake).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-5);
    }

    #[test]
    fn adversarial_half_half() {
        let mut g = Graph::<f64>::new();
        let real = g.leaf(&[4], vec![0.5; 4], false);
        let fake = g.leaf(&[4], vec![0.5; 4], false);
        let l = adversarial_loss(&mut g, real, fake).unwrap();
        assert!((g.scalar_value(l) - 2.0 * 0.5f64.ln()).abs() < 1e-9);
        assert!((g.scalar_value(l) + 1.3863).abs() < 1e-3);
    }

    #[test]
    fn adversarial_rejects_out_of_range() {
        let mut g = Graph::<f64>::new();
        let real = g.leaf(&[2], vec![0.5, 1.2], false);
        let fake = g.leaf(&[2], vec![0.5, 0.5], false);
        assert!(matches!(
            adversarial_loss(&mut g, real, fake).unwrap_err(),
            LossError::ProbabilityOutOfRange(_)
        ));
    }

    #[test]
    fn adversarial_matches_loop_oracle() {
        let mut rng = Rng::from_seed(31);
        let dr: Vec<f64> = (0..32).map(|_| rng.uniform()).collect();
        let df: Vec<f64> = (0..32).map(|_| rng.uniform()).collect();
        let mut g = Graph::<f64>::new();
        let real = g.leaf(&[32], dr.clone(), false);
        let fake = g.leaf(&[32], df.clone(), false);
        let l = adversarial_loss(&mut g, real, fake).unwrap();
        let expect = oracle::adversarial(&dr, &df, PROB_EPS);
        assert!((g.scalar_value(l) - expect).abs() < 1e-9);
    }

    #[test]
    fn mr_and_ct_are_the_same_pure_function() {
        let mut rng = Rng::from_seed(32);
        let dr: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let df: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let mut g = Graph::<f64>::new();
        let r = g.leaf(&[16], dr, false);
        let f = g.leaf(&[16], df, false);
        let a = adversarial_loss_ct(&mut g, r, f).unwrap();
        let b = adversarial_loss_mr(&mut g, r, f).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
    }

    #[test]
    fn cycle_zero_when_recovered() {
        let mut rng = Rng::from_seed(33);
        let a = randn(&mut rng, 27);
        let b = randn(&mut rng, 27);
        let mut g = Graph::<f64>::new();
        let rc = g.leaf(&[27], a.clone(), false);
        let xc = g.leaf(&[27], a, false);
        let rm = g.leaf(&[27], b.clone(), false);
        let xm = g.leaf(&[27], b, false);
        let l = cycle_loss(&mut g, rc, xc, rm, xm).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn cycle_constant_offset() {
        let mut rng = Rng::from_seed(34);
        let a = randn(&mut rng, 27);
        let b = randn(&mut rng, 27);
        let b_off: Vec<f64> = b.iter().map(|v| v + 0.1).collect();
        let mut g = Graph::<f64>::new();
        let rc = g.leaf(&[27], a.clone(), false);
        let xc = g.leaf(&[27], a, false);
        let rm = g.leaf(&[27], b, false);
        let xm = g.leaf(&[27], b_off, false);
        let l = cycle_loss(&mut g, rc, xc, rm, xm).unwrap();
        assert!((g.scalar_value(l) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn cycle_matches_loop_oracle() {
        let mut rng = Rng::from_seed(35);
        let (a, ar) = (randn(&mut rng, 40), randn(&mut rng, 40));
        let (b, br) = (randn(&mut rng, 40), randn(&mut rng, 40));
        let mut g = Graph::<f64>::new();
        let rc = g.leaf(&[40], a.clone(), false);
        let xc = g.leaf(&[40], ar.clone(), false);
        let rm = g.leaf(&[40], b.clone(), false);
        let xm = g.leaf(&[40], br.clone(), false);
        let l = cycle_loss(&mut g, rc, xc, rm, xm).unwrap();
        let expect = oracle::l1_mean(&a, &ar) + oracle::l1_mean(&b, &br);
        assert!((g.scalar_value(l) - expect).abs() < 1e-6);
    }

    #[test]
    fn ncc_self_is_one() {
        let mut rng = Rng::from_seed(36);
        let a = randn(&mut rng, 30);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[30], a.clone(), false);
        let y = g.leaf(&[30], a, false);
        let n = ncc(&mut g, x, y).unwrap();
        assert!((g.scalar_value(n) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_affine_invariance() {
        let mut rng = Rng::from_seed(37);
        let a = randn(&mut rng, 30);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let aff: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[30], a.clone(), false);
        let yn = g.leaf(&[30], neg, false);
        let ya = g.leaf(&[30], aff, false);
        let n1 = ncc(&mut g, x, yn).unwrap();
        let n2 = ncc(&mut g, x, ya).unwrap();
        assert!((g.scalar_value(n1) + 1.0).abs() < 1e-9);
        assert!((g.scalar_value(n2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_degenerate_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[4], vec![1.0; 4], false);
        let y = g.leaf(&[4], vec![0.0, 1.0, 2.0, 3.0], false);
        assert_eq!(ncc(&mut g, x, y).unwrap_err(), LossError::DegenerateNcc);
    }

    #[test]
    fn ncc_matches_loop_oracle() {
        let mut rng = Rng::from_seed(38);
        let a = randn(&mut rng, 50);
        let b = randn(&mut rng, 50);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[50], a.clone(), false);
        let y = g.leaf(&[50], b.clone(), false);
        let n = ncc(&mut g, x, y).unwrap();
        assert!((g.scalar_value(n) - oracle::ncc(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn gc_self_is_three_halves() {
        let mut rng = Rng::from_seed(39);
        let a = randn(&mut rng, 64);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 4, 4, 4], a.clone(), false);
        let y = g.leaf(&[1, 1, 4, 4, 4], a, false);
        let gc = gradient_correlation(&mut g, x, y).unwrap();
        assert!((g.scalar_value(gc) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn gc_kills_constant_offsets() {
        let mut rng = Rng::from_seed(40);
        let a = randn(&mut rng, 64);
        let off: Vec<f64> = a.iter().map(|v| v + 7.5).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 4, 4, 4], a.clone(), false);
        let y = g.leaf(&[1, 1, 4, 4, 4], off, false);
        let x2 = g.leaf(&[1, 1, 4, 4, 4], a.clone(), false);
        let y2 = g.leaf(&[1, 1, 4, 4, 4], a, false);
        let gc1 = gradient_correlation(&mut g, x, y).unwrap();
        let gc2 = gradient_correlation(&mut g, x2, y2).unwrap();
        assert!((g.scalar_value(gc1) - g.scalar_value(gc2)).abs() < 1e-9);
    }

    #[test]
    fn gc_matches_composed_oracle() {
        let mut rng = Rng::from_seed(41);
        let a = randn(&mut rng, 60);
        let b = randn(&mut rng, 60);
        let mut g = Graph::<f64>::new();
        // tensor [1,1,D=3,H=4,W=5]; oracle dims are (w,h,d) x-fastest
        let x = g.leaf(&[1, 1, 3, 4, 5], a.clone(), false);
        let y = g.leaf(&[1, 1, 3, 4, 5], b.clone(), false);
        let gc = gradient_correlation(&mut g, x, y).unwrap();
        let expect = oracle::gradient_correlation(&a, &b, (5, 4, 3), GC_AXIS_COEFFICIENT);
        assert!((g.scalar_value(gc) - expect).abs() < 1e-9);
    }

    #[test]
    fn gc_loss_identical_volumes() {
        // GC(a, a) = 3/2 under the printed coefficient, so the loss at
        // perfect agreement is 1 - 3/2 = -1/2.
        let mut rng = Rng::from_seed(42);
        let a = randn(&mut rng, 64);
        let b = randn(&mut rng, 64);
        let mut g = Graph::<f64>::new();
        let rc = g.leaf(&[1, 1, 4, 4, 4], a.clone(), false);
        let fm = g.leaf(&[1, 1, 4, 4, 4], a, false);
        let rm = g.leaf(&[1, 1, 4, 4, 4], b.clone(), false);
        let fc = g.leaf(&[1, 1, 4, 4, 4], b, false);
        let l = gc_loss(&mut g, rc, fm, rm, fc).unwrap();
        assert!((g.scalar_value(l) + 0.5).abs() < 1e-9);
    }

    #[test]
    fn gc_loss_negated_gradients() {
        // negated volumes flip every axis NCC to -1, GC = -3/2, so the loss
        // is 1/2 * ((1 + 3/2) + (1 + 3/2)) = 5/2. At GC = -1 the closed form
        // would give 2.
        let mut rng = Rng::from_seed(43);
        let a = randn(&mut rng, 64);
        let an: Vec<f64> = a.iter().map(|v| -v).collect();
        let mut g = Graph::<f64>::new();
        let rc = g.leaf(&[1, 1, 4, 4, 4], a.clone(), false);
        let fm = g.leaf(&[1, 1, 4, 4, 4], an.clone(), false);
        let rm = g.leaf(&[1, 1, 4, 4, 4], a, false);
        let fc = g.leaf(&[1, 1, 4, 4, 4], an, false);
        let l = gc_loss(&mut g, rc, fm, rm, fc).unwrap();
        assert!((g.scalar_value(l) - 2.5).abs() < 1e-9);
    }

    #[test]
    fn gc_loss_matches_composed_oracle() {
        let mut rng = Rng::from_seed(44);
        let (a, b) = (randn(&mut rng, 64), randn(&mut rng, 64));
        let (c, d) = (randn(&mut rng, 64), randn(&mut rng, 64));
        let mut g = Graph::<f64>::new();
        let rc = g.leaf(&[1, 1, 4, 4, 4], a.clone(), false);
        let fm = g.leaf(&[1, 1, 4, 4, 4], b.clone(), false);
        let rm = g.leaf(&[1, 1, 4, 4, 4], c.clone(), false);
        let fc = g.leaf(&[1, 1, 4, 4, 4], d.clone(), false);
        let l = gc_loss(&mut g, rc, fm, rm, fc).unwrap();
        let dims = (4, 4, 4);
        let expect = 0.5
            * ((1.0 - oracle::gradient_correlation(&a, &b, dims, GC_AXIS_COEFFICIENT))
                + (1.0 - oracle::gradient_correlation(&c, &d, dims, GC_AXIS_COEFFICIENT)));
        assert!((g.scalar_value(l) - expect).abs() < 1e-5);
    }

    #[test]
    fn total_objective_zero_components() {
        let mut g = Graph::<f64>::new();
        let z1 = g.scalar(0.0);
        let z2 = g.scalar(0.0);
        let z3 = g.scalar(0.0);
        let z4 = g.scalar(0.0);
        let (t, rep) = total_objective(&mut g, z1, z2, z3, z4, &LossWeights::default()).unwrap();
        assert_eq!(g.scalar_value(t), 0.0);
        assert_eq!(rep.total, 0.0);
    }

    #[test]
    fn total_objective_default_weights() {
        let mut g = Graph::<f64>::new();
        let z1 = g.scalar(0.0);
        let z2 = g.scalar(0.0);
        let cyc = g.scalar(1.0);
        let gc = g.scalar(1.0);
        let (t, rep) = total_objective(&mut g, z1, z2, cyc, gc, &LossWeights::default()).unwrap();
        assert!((g.scalar_value(t) - 11.0).abs() < 1e-12);
        assert_eq!(rep.total, 11.0);
    }

    #[test]
    fn total_objective_linear_combination() {
        let mut rng = Rng::from_seed(45);
        let vals: Vec<f64> = randn(&mut rng, 4);
        let w = LossWeights {
            lambda_cycle: 3.5,
            gamma_gc: 0.25,
        };
        let mut g = Graph::<f64>::new();
        let ids: Vec<TensorId> = vals.iter().map(|&v| g.scalar(v)).collect();
        let (t, rep) = total_objective(&mut g, ids[0], ids[1], ids[2], ids[3], &w).unwrap();
        let expect = vals[0] + vals[1] + 3.5 * vals[2] + 0.25 * vals[3];
        assert!((g.scalar_value(t) - expect).abs() < 1e-6);
        assert!((rep.total - expect).abs() < 1e-6);
        assert!(
            (rep.total - (rep.adv_ct + rep.adv_mr + 3.5 * rep.cycle + 0.25 * rep.gc)).abs() < 1e-5
        );
    }

    #[test]
    fn composed_losses_pass_grad_check() {
        use crate::autograd::grad_check;
        let mut rng = Rng::from_seed(46);
        let a = randn(&mut rng, 27);
        let b = randn(&mut rng, 27);
        let err = grad_check(
            |g, ids| {
                let gc = gradient_correlation(g, ids[0], ids[1]).map_err(|e| match e {
                    LossError::Autograd(e) => e,
                    _ => AutogradError::LogDomain,
                })?;
                let c = cycle_loss(g, ids[0], ids[1], ids[0], ids[1]).map_err(|e| match e {
                    LossError::Autograd(e) => e,
                    _ => AutogradError::LogDomain,
                })?;
                let s = g.add(gc, c)?;
                Ok(s)
            },
            &[(vec![1, 1, 3, 3, 3], a), (vec![1, 1, 3, 3, 3], b)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn ncc_affine_invariance_property() {
        let mut rng = Rng::from_seed(47);
        for _ in 0..10 {
            let a = randn(&mut rng, 20);
            let b = randn(&mut rng, 20);
            let alpha = rng.uniform() * 3.0 + 0.1;
            let beta = rng.normal();
            let bt: Vec<f64> = b.iter().map(|v| alpha * v + beta).collect();
            let mut g = Graph::<f64>::new();
            let x = g.leaf(&[20], a.clone(), false);
            let y = g.leaf(&[20], b, false);
            let yt = g.leaf(&[20], bt, false);
            let n1 = ncc(&mut g, x, y).unwrap();
            let n2 = ncc(&mut g, x, yt).unwrap();
            assert!((g.scalar_value(n1) - g.scalar_value(n2)).abs() < 1e-5);
        }
    }
}
