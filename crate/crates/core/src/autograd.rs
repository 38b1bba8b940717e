//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Eager tape: every op computes its forward values on creation and records
//! itself in the graph; `backward` walks the tape in reverse. The engine is
//! generic over the scalar type — training runs in `f32`, finite-difference
//! verification (`grad_check`) in `f64`.
//!
//! Tensors are at most rank 5 with layout `[N, C, D, H, W]`, W fastest.
//! Convolutions are realized with im2col plus a small blocked matmul; the
//! volumes involved are desk scale so direct evaluation stays tractable and
//! exactly testable.

use crate::scalar::Scalar;
use crate::volume::{gradient_raw, gradient_raw_transpose, Axis};
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected rank-{expected} tensor, got shape {shape:?}")]
    BadRank { expected: usize, shape: Vec<usize> },
    #[error("kernel does not fit padded input: input {input:?}, kernel {kernel:?}, stride {stride}, pad {pad}")]
    KernelDoesNotFit {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        pad: usize,
    },
    #[error("log of non-positive input")]
    LogDomain,
    #[error("backward called on non-scalar tensor of shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("instance norm needs spatial size >= 2, got {0}")]
    SpatialTooSmall(usize),
    #[error("stride must be >= 1")]
    BadStride,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

/// Negative slope of leaky relu.
pub const LEAKY_SLOPE: f64 = 0.2;

enum Op<T> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    /// a * x + b, elementwise with scalar constants.
    Affine { x: TensorId, a: T },
    Mean(TensorId),
    Sum(TensorId),
    Abs(TensorId),
    Sqrt(TensorId),
    Log(TensorId),
    Clamp {
        x: TensorId,
        lo: T,
        hi: T,
    },
    Act {
        x: TensorId,
        kind: Activation,
    },
    Conv3d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose3d {
        input: TensorId,
        weight: TensorId,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Cached per-(n, c): (mean, 1/sqrt(var + eps)).
        stats: Vec<(T, T)>,
    },
    SpatialGradient {
        input: TensorId,
        axis: Axis,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(values.len(), numel(&shape));
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> TensorId {
        assert_eq!(values.len(), numel(shape), "leaf value count must match shape");
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> TensorId {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- elementwise binary ops (same shape, or one side scalar) ----

    fn binary_shapes(
        &self,
        a: TensorId,
        b: TensorId,
    ) -> Result<Vec<usize>, AutogradError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(AutogradError::ShapeMismatch(sa.to_vec(), sb.to_vec()))
        }
    }

    fn broadcast_eval(
        &self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
    ) -> Vec<T> {
        let va = self.values(a);
        let vb = self.values(b);
        if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            let y = vb[0];
            va.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = va[0];
            vb.iter().map(|&y| f(x, y)).collect()
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let shape = self.binary_shapes(a, b)?;
        let values = self.broadcast_eval(a, b, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, values, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let shape = self.binary_shapes(a, b)?;
        let values = self.broadcast_eval(a, b, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, values, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let shape = self.binary_shapes(a, b)?;
        let values = self.broadcast_eval(a, b, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, values, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let shape = self.binary_shapes(a, b)?;
        let values = self.broadcast_eval(a, b, |x, y| x / y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(shape, values, rg, Op::Div(a, b)))
    }

    /// a * x + b with scalar constants.
    pub fn affine(&mut self, x: TensorId, a: T, b: T) -> TensorId {
        let values = self.values(x).iter().map(|&v| a * v + b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, values, rg, Op::Affine { x, a })
    }

    pub fn scalar_mul(&mut self, x: TensorId, a: T) -> TensorId {
        self.affine(x, a, T::ZERO)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.affine(x, -T::ONE, T::ZERO)
    }

    // ---- reductions and elementwise unary ----

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.values(x).len();
        let sum: T = self.values(x).iter().copied().sum();
        let v = sum / T::from_f64(n as f64);
        let rg = self.requires(x);
        self.push(vec![1], vec![v], rg, Op::Mean(x))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let sum: T = self.values(x).iter().copied().sum();
        let rg = self.requires(x);
        self.push(vec![1], vec![sum], rg, Op::Sum(x))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let values = self.values(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, values, rg, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let values = self.values(x).iter().map(|v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, values, rg, Op::Sqrt(x))
    }

    /// Natural log. Errors on any non-positive input; callers clamp first.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        if self.values(x).iter().any(|&v| v <= T::ZERO) {
            return Err(AutogradError::LogDomain);
        }
        let values = self.values(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, values, rg, Op::Log(x)))
    }

    /// Clamp to [lo, hi]; gradient passes only where the value was inside.
    pub fn clamp(&mut self, x: TensorId, lo: T, hi: T) -> TensorId {
        let values = self
            .values(x)
            .iter()
            .map(|&v| v.max(lo).min(hi))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, values, rg, Op::Clamp { x, lo, hi })
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> TensorId {
        let slope = T::from_f64(LEAKY_SLOPE);
        let values = self
            .values(x)
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(T::ZERO),
                Activation::LeakyRelu => {
                    if v > T::ZERO {
                        v
                    } else {
                        slope * v
                    }
                }
                Activation::Tanh => v.tanh(),
                Activation::Sigmoid => T::ONE / (T::ONE + (-v).exp()),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(shape, values, rg, Op::Act { x, kind })
    }

    // ---- convolution ----

    /// Cross-correlation of `input [N,Cin,D,H,W]` with `weight
    /// [Cout,Cin,kd,kh,kw]`, optional `bias [Cout]`. Output spatial size is
    /// `floor((S + 2*pad - k) / stride) + 1` per axis.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, AutogradError> {
        if stride == 0 {
            return Err(AutogradError::BadStride);
        }
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 5 {
            return Err(AutogradError::BadRank {
                expected: 5,
                shape: ishape,
            });
        }
        if wshape.len() != 5 {
            return Err(AutogradError::BadRank {
                expected: 5,
                shape: wshape,
            });
        }
        let (n, cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
        let (cout, wcin, kd, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]);
        if cin != wcin {
            return Err(AutogradError::ShapeMismatch(ishape, wshape));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(AutogradError::ShapeMismatch(
                    self.shape(b).to_vec(),
                    vec![cout],
                ));
            }
        }
        let out_sp = conv_out_dims((d, h, w), (kd, kh, kw), stride, pad).ok_or(
            AutogradError::KernelDoesNotFit {
                input: ishape.clone(),
                kernel: wshape.clone(),
                stride,
                pad,
            },
        )?;
        let (od, oh, ow) = out_sp;
        let m = od * oh * ow;
        let k = cin * kd * kh * kw;
        let mut values = vec![T::ZERO; n * cout * m];
        let direct = use_direct_conv(stride, cout);
        let mut col = vec![T::ZERO; if direct { 0 } else { k * m }];
        let in_stride = cin * d * h * w;
        for ni in 0..n {
            let out_n_range = ni * cout * m..(ni + 1) * cout * m;
            if direct {
                conv3d_direct_fwd(
                    &self.values(input)[ni * in_stride..(ni + 1) * in_stride],
                    (cin, d, h, w),
                    self.values(weight),
                    cout,
                    (kd, kh, kw),
                    pad,
                    (od, oh, ow),
                    &mut values[out_n_range.clone()],
                );
            } else {
                im2col(
                    &self.values(input)[ni * in_stride..(ni + 1) * in_stride],
                    (cin, d, h, w),
                    (kd, kh, kw),
                    stride,
                    pad,
                    (od, oh, ow),
                    &mut col,
                );
                matmul_nn_acc(
                    self.values(weight),
                    &col,
                    &mut values[out_n_range.clone()],
                    cout,
                    k,
                    m,
                );
            }
            let out_n = &mut values[out_n_range];
            if let Some(b) = bias {
                let bv = self.values(b);
                for c in 0..cout {
                    let bc = bv[c];
                    for o in &mut out_n[c * m..(c + 1) * m] {
                        *o += bc;
                    }
                }
            }
        }
        let rg = self.requires(input)
            || self.requires(weight)
            || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(
            vec![n, cout, od, oh, ow],
            values,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Adjoint of `conv3d` with the same parameters: the forward map here
    /// equals the backward-data map of `conv3d`. Input is `[N,Cout,D,H,W]`,
    /// weight `[Cout,Cin,kd,kh,kw]`, output `[N,Cin,OD,OH,OW]` with
    /// `OS = (S-1)*stride - 2*pad + k`.
    pub fn conv3d_transpose(
        &mut self,
        input: TensorId,
        weight: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, AutogradError> {
        if stride == 0 {
            return Err(AutogradError::BadStride);
        }
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 5 || wshape.len() != 5 {
            return Err(AutogradError::BadRank {
                expected: 5,
                shape: if ishape.len() != 5 { ishape } else { wshape },
            });
        }
        let (n, cout, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
        let (wcout, cin, kd, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]);
        if cout != wcout {
            return Err(AutogradError::ShapeMismatch(ishape, wshape));
        }
        let od = (d - 1) * stride + kd;
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        if od < 2 * pad + 1 || oh < 2 * pad + 1 || ow < 2 * pad + 1 {
            return Err(AutogradError::KernelDoesNotFit {
                input: ishape,
                kernel: wshape,
                stride,
                pad,
            });
        }
        let (od, oh, ow) = (od - 2 * pad, oh - 2 * pad, ow - 2 * pad);
        let m = d * h * w;
        let k = cin * kd * kh * kw;
        let mut values = vec![T::ZERO; n * cin * od * oh * ow];
        let mut col = vec![T::ZERO; k * m];
        let in_stride = cout * m;
        let out_stride = cin * od * oh * ow;
        for ni in 0..n {
            col.iter_mut().for_each(|c| *c = T::ZERO);
            matmul_at_acc(
                self.values(weight),
                &self.values(input)[ni * in_stride..(ni + 1) * in_stride],
                &mut col,
                cout,
                k,
                m,
            );
            col2im(
                &col,
                (cin, od, oh, ow),
                (kd, kh, kw),
                stride,
                pad,
                (d, h, w),
                &mut values[ni * out_stride..(ni + 1) * out_stride],
            );
        }
        let rg = self.requires(input) || self.requires(weight);
        Ok(self.push(
            vec![n, cin, od, oh, ow],
            values,
            rg,
            Op::ConvTranspose3d {
                input,
                weight,
                stride,
                pad,
            },
        ))
    }

    /// Per-(sample, channel) standardization over D*H*W, then affine
    /// (gamma, beta).
    pub fn instance_norm3d(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<TensorId, AutogradError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 5 {
            return Err(AutogradError::BadRank {
                expected: 5,
                shape: ishape,
            });
        }
        let (n, c) = (ishape[0], ishape[1]);
        let sp = ishape[2] * ishape[3] * ishape[4];
        if sp < 2 {
            return Err(AutogradError::SpatialTooSmall(sp));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(AutogradError::ShapeMismatch(
                self.shape(gamma).to_vec(),
                vec![c],
            ));
        }
        let mut values = vec![T::ZERO; n * c * sp];
        let mut stats = Vec::with_capacity(n * c);
        let inv_sp = T::ONE / T::from_f64(sp as f64);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * sp;
                let xs = &self.values(input)[base..base + sp];
                let mean: T = xs.iter().copied().sum::<T>() * inv_sp;
                let var: T = xs
                    .iter()
                    .map(|&x| (x - mean) * (x - mean))
                    .sum::<T>()
                    * inv_sp;
                let invstd = T::ONE / (var + eps).sqrt();
                stats.push((mean, invstd));
                let g = self.values(gamma)[ci];
                let b = self.values(beta)[ci];
                for (o, &x) in values[base..base + sp].iter_mut().zip(xs) {
                    *o = g * ((x - mean) * invstd) + b;
                }
            }
        }
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            ishape,
            values,
            rg,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            },
        ))
    }

    /// Index-space finite differences over the (D, H, W) block of a 5D
    /// tensor, per (n, c) slice; same stencil as `Volume::gradient`
    /// (Axis::X differentiates along W, Y along H, Z along D).
    pub fn spatial_gradient(
        &mut self,
        input: TensorId,
        axis: Axis,
    ) -> Result<TensorId, AutogradError> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 5 {
            return Err(AutogradError::BadRank {
                expected: 5,
                shape: ishape,
            });
        }
        let (n, c, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
        let len = match axis {
            Axis::X => w,
            Axis::Y => h,
            Axis::Z => d,
        };
        if len < 2 {
            return Err(AutogradError::BadRank {
                expected: 2,
                shape: ishape,
            });
        }
        let sp = d * h * w;
        let mut values = vec![T::ZERO; n * c * sp];
        for s in 0..n * c {
            gradient_raw(
                &self.values(input)[s * sp..(s + 1) * sp],
                (w, h, d),
                axis,
                &mut values[s * sp..(s + 1) * sp],
            );
        }
        let rg = self.requires(input);
        Ok(self.push(ishape, values, rg, Op::SpatialGradient { input, axis }))
    }

    // ---- backward ----

    fn accumulate(&mut self, id: TensorId, delta: &[T]) {
        let g = self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; self.nodes[id.0].values.len()]);
        if delta.len() == g.len() {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        } else {
            debug_assert_eq!(g.len(), 1);
            g[0] += delta.iter().copied().sum();
        }
    }

    /// Populate `grad` on every `requires_grad` node reachable from the
    /// scalar `output`; accumulation is a sum over all paths.
    pub fn backward(&mut self, output: TensorId) -> Result<(), AutogradError> {
        if self.values(output).len() != 1 {
            return Err(AutogradError::NonScalarBackward(
                self.shape(output).to_vec(),
            ));
        }
        self.grads[output.0] = Some(vec![T::ONE]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.step_backward(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, grad: &[T]) {
        // Ops are dispatched out of a short-lived borrow of the node; the
        // accumulate calls below re-borrow mutably.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate(a, grad);
                }
                if self.requires(b) {
                    self.accumulate(b, grad);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate(a, grad);
                }
                if self.requires(b) {
                    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let d = self.broadcast_grad_factor(grad, b);
                    self.accumulate(a, &d);
                }
                if self.requires(b) {
                    let d = self.broadcast_grad_factor(grad, a);
                    self.accumulate(b, &d);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let vb = self.values(b);
                    let d: Vec<T> = if vb.len() == grad.len() {
                        grad.iter().zip(vb).map(|(&g, &y)| g / y).collect()
                    } else if vb.len() == 1 {
                        let y = vb[0];
                        grad.iter().map(|&g| g / y).collect()
                    } else {
                        let y: Vec<T> = vb.to_vec();
                        grad.iter().zip(&y).map(|(&g, &yv)| g / yv).collect()
                    };
                    self.accumulate(a, &d);
                }
                if self.requires(b) {
                    let va = self.values(a);
                    let vb = self.values(b);
                    let get = |v: &[T], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                    let d: Vec<T> = (0..grad.len())
                        .map(|j| {
                            let x = get(va, j);
                            let y = get(vb, j);
                            -grad[j] * x / (y * y)
                        })
                        .collect();
                    self.accumulate(b, &d);
                }
            }
            Op::Affine { x, a } => {
                let (x, a) = (*x, *a);
                let d: Vec<T> = grad.iter().map(|&g| g * a).collect();
                self.accumulate(x, &d);
            }
            Op::Mean(x) => {
                let x = *x;
                let n = T::from_f64(self.values(x).len() as f64);
                let g = grad[0] / n;
                let d = vec![g; self.values(x).len()];
                self.accumulate(x, &d);
            }
            Op::Sum(x) => {
                let x = *x;
                let d = vec![grad[0]; self.values(x).len()];
                self.accumulate(x, &d);
            }
            Op::Abs(x) => {
                let x = *x;
                let d: Vec<T> = self
                    .values(x)
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| {
                        if v > T::ZERO {
                            g
                        } else if v < T::ZERO {
                            -g
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(x, &d);
            }
            Op::Sqrt(x) => {
                let x = *x;
                let two = T::from_f64(2.0);
                let d: Vec<T> = self.nodes[i]
                    .values
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g / (two * y))
                    .collect();
                self.accumulate(x, &d);
            }
            Op::Log(x) => {
                let x = *x;
                let d: Vec<T> = self
                    .values(x)
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| g / v)
                    .collect();
                self.accumulate(x, &d);
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let d: Vec<T> = self
                    .values(x)
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v >= lo && v <= hi { g } else { T::ZERO })
                    .collect();
                self.accumulate(x, &d);
            }
            Op::Act { x, kind } => {
                let (x, kind) = (*x, *kind);
                let slope = T::from_f64(LEAKY_SLOPE);
                let d: Vec<T> = match kind {
                    Activation::Relu => self
                        .values(x)
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                        .collect(),
                    Activation::LeakyRelu => self
                        .values(x)
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| if v > T::ZERO { g } else { g * slope })
                        .collect(),
                    Activation::Tanh => self.nodes[i]
                        .values
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| g * (T::ONE - y * y))
                        .collect(),
                    Activation::Sigmoid => self.nodes[i]
                        .values
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| g * y * (T::ONE - y))
                        .collect(),
                };
                self.accumulate(x, &d);
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                self.conv3d_backward(i, input, weight, bias, stride, pad, grad);
            }
            Op::ConvTranspose3d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (input, weight, stride, pad) = (*input, *weight, *stride, *pad);
                self.conv3d_transpose_backward(input, weight, stride, pad, grad);
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
                ..
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let stats = stats.clone();
                self.instance_norm_backward(input, gamma, beta, &stats, grad);
            }
            Op::SpatialGradient { input, axis } => {
                let (input, axis) = (*input, *axis);
                let shape = self.shape(input).to_vec();
                let (d, h, w) = (shape[2], shape[3], shape[4]);
                let sp = d * h * w;
                let slices = shape[0] * shape[1];
                let mut dx = vec![T::ZERO; slices * sp];
                for s in 0..slices {
                    gradient_raw_transpose(
                        &grad[s * sp..(s + 1) * sp],
                        (w, h, d),
                        axis,
                        &mut dx[s * sp..(s + 1) * sp],
                    );
                }
                self.accumulate(input, &dx);
            }
        }
    }

    /// grad * values(other) with scalar broadcasting on either side.
    fn broadcast_grad_factor(&self, grad: &[T], other: TensorId) -> Vec<T> {
        let vo = self.values(other);
        if vo.len() == grad.len() {
            grad.iter().zip(vo).map(|(&g, &v)| g * v).collect()
        } else if vo.len() == 1 {
            let v = vo[0];
            grad.iter().map(|&g| g * v).collect()
        } else {
            // grad is scalar, other is a tensor: result matches other
            let g = grad[0];
            vo.iter().map(|&v| g * v).collect()
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv3d_backward(
        &mut self,
        out: usize,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
        grad: &[T],
    ) {
        let oshape = self.nodes[out].shape.clone();
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let (n, cout) = (oshape[0], oshape[1]);
        let (od, oh, ow) = (oshape[2], oshape[3], oshape[4]);
        let (cin, d, h, w) = (ishape[1], ishape[2], ishape[3], ishape[4]);
        let (kd, kh, kw) = (wshape[2], wshape[3], wshape[4]);
        let m = od * oh * ow;
        let k = cin * kd * kh * kw;
        let in_stride = cin * d * h * w;

        let need_input = self.requires(input);
        let need_weight = self.requires(weight);
        let mut d_input = if need_input {
            Some(vec![T::ZERO; n * in_stride])
        } else {
            None
        };
        let mut d_weight = if need_weight {
            Some(vec![T::ZERO; cout * k])
        } else {
            None
        };
        let direct = use_direct_conv(stride, cout);
        let mut col = vec![T::ZERO; if direct { 0 } else { k * m }];
        for ni in 0..n {
            let g_n = &grad[ni * cout * m..(ni + 1) * cout * m];
            if need_input {
                if direct {
                    conv3d_direct_bwd_data(
                        g_n,
                        (cin, d, h, w),
                        self.values(weight),
                        cout,
                        (kd, kh, kw),
                        pad,
                        (od, oh, ow),
                        &mut d_input.as_mut().unwrap()[ni * in_stride..(ni + 1) * in_stride],
                    );
                } else {
                    col.iter_mut().for_each(|c| *c = T::ZERO);
                    matmul_at_acc(self.values(weight), g_n, &mut col, cout, k, m);
                    col2im(
                        &col,
                        (cin, d, h, w),
                        (kd, kh, kw),
                        stride,
                        pad,
                        (od, oh, ow),
                        &mut d_input.as_mut().unwrap()[ni * in_stride..(ni + 1) * in_stride],
                    );
                }
            }
            if need_weight {
                if direct {
                    conv3d_direct_bwd_weight(
                        g_n,
                        &self.values(input)[ni * in_stride..(ni + 1) * in_stride],
                        (cin, d, h, w),
                        cout,
                        (kd, kh, kw),
                        pad,
                        (od, oh, ow),
                        d_weight.as_mut().unwrap(),
                    );
                } else {
                    im2col(
                        &self.values(input)[ni * in_stride..(ni + 1) * in_stride],
                        (cin, d, h, w),
                        (kd, kh, kw),
                        stride,
                        pad,
                        (od, oh, ow),
                        &mut col,
                    );
                    matmul_bt_acc(g_n, &col, d_weight.as_mut().unwrap(), cout, m, k);
                }
            }
        }
        if let Some(d) = d_input {
            self.accumulate(input, &d);
        }
        if let Some(d) = d_weight {
            self.accumulate(weight, &d);
        }
        if let Some(b) = bias {
            if self.requires(b) {
                let mut d = vec![T::ZERO; cout];
                for ni in 0..n {
                    for c in 0..cout {
                        let base = (ni * cout + c) * m;
                        d[c] += grad[base..base + m].iter().copied().sum();
                    }
                }
                self.accumulate(b, &d);
            }
        }
    }

    fn conv3d_transpose_backward(
        &mut self,
        input: TensorId,
        weight: TensorId,
        stride: usize,
        pad: usize,
        grad: &[T],
    ) {
        // forward: out = col2im(W^T . in). Backward:
        //   d_in = W . im2col(grad)         (= conv3d forward of grad)
        //   d_W  = in . im2col(grad)^T
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let (n, cout, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
        let (cin, kd, kh, kw) = (wshape[1], wshape[2], wshape[3], wshape[4]);
        let od = (d - 1) * stride + kd - 2 * pad;
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;
        let m = d * h * w;
        let k = cin * kd * kh * kw;
        let out_stride = cin * od * oh * ow;
        let in_stride = cout * m;

        let need_input = self.requires(input);
        let need_weight = self.requires(weight);
        let mut d_input = if need_input {
            Some(vec![T::ZERO; n * in_stride])
        } else {
            None
        };
        let mut d_weight = if need_weight {
            Some(vec![T::ZERO; cout * k])
        } else {
            None
        };
        let mut col = vec![T::ZERO; k * m];
        for ni in 0..n {
            im2col(
                &grad[ni * out_stride..(ni + 1) * out_stride],
                (cin, od, oh, ow),
                (kd, kh, kw),
                stride,
                pad,
                (d, h, w),
                &mut col,
            );
            if need_input {
                matmul_nn_acc(
                    self.values(weight),
                    &col,
                    &mut d_input.as_mut().unwrap()[ni * in_stride..(ni + 1) * in_stride],
                    cout,
                    k,
                    m,
                );
            }
            if need_weight {
                matmul_bt_acc(
                    &self.values(input)[ni * in_stride..(ni + 1) * in_stride],
                    &col,
                    d_weight.as_mut().unwrap(),
                    cout,
                    m,
                    k,
                );
            }
        }
        if let Some(d) = d_input {
            self.accumulate(input, &d);
        }
        if let Some(d) = d_weight {
            self.accumulate(weight, &d);
        }
    }

    fn instance_norm_backward(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &[(T, T)],
        grad: &[T],
    ) {
        let ishape = self.shape(input).to_vec();
        let (n, c) = (ishape[0], ishape[1]);
        let sp = ishape[2] * ishape[3] * ishape[4];
        let inv_sp = T::ONE / T::from_f64(sp as f64);

        let need_input = self.requires(input);
        let mut d_input = if need_input {
            Some(vec![T::ZERO; n * c * sp])
        } else {
            None
        };
        let mut d_gamma = vec![T::ZERO; c];
        let mut d_beta = vec![T::ZERO; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * sp;
                let (mean, invstd) = stats[ni * c + ci];
                let xs = &self.values(input)[base..base + sp];
                let gs = &grad[base..base + sp];
                let mut sum_g = T::ZERO;
                let mut sum_gx = T::ZERO;
                for (&x, &g) in xs.iter().zip(gs) {
                    let xhat = (x - mean) * invstd;
                    sum_g += g;
                    sum_gx += g * xhat;
                }
                d_beta[ci] += sum_g;
                d_gamma[ci] += sum_gx;
                if let Some(d) = d_input.as_mut() {
                    let gm = self.values(gamma)[ci];
                    let mean_g = sum_g * inv_sp;
                    let mean_gx = sum_gx * inv_sp;
                    for ((o, &x), &g) in d[base..base + sp].iter_mut().zip(xs).zip(gs) {
                        let xhat = (x - mean) * invstd;
                        *o = gm * invstd * (g - mean_g - xhat * mean_gx);
                    }
                }
            }
        }
        if let Some(d) = d_input {
            self.accumulate(input, &d);
        }
        if self.requires(gamma) {
            self.accumulate(gamma, &d_gamma);
        }
        if self.requires(beta) {
            self.accumulate(beta, &d_beta);
        }
    }
}

pub fn conv_out_dims(
    (d, h, w): (usize, usize, usize),
    (kd, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Option<(usize, usize, usize)> {
    let one = |s: usize, k: usize| {
        let padded = s + 2 * pad;
        if padded < k {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    };
    Some((one(d, kd)?, one(h, kh)?, one(w, kw)?))
}

/// The im2col route materializes a `k*m` column buffer; with few output
/// channels nothing amortizes that traffic, so a direct stride-1 kernel
/// wins there.
fn use_direct_conv(stride: usize, cout: usize) -> bool {
    stride == 1 && cout <= 8
}

/// Valid output range along one axis for kernel offset `ko` at stride 1:
/// input index `o + ko - pad` must fall in `[0, in_len)`.
#[inline]
fn axis_range(out_len: usize, in_len: usize, ko: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(ko);
    let hi = (in_len + pad - ko).min(out_len);
    (lo, hi.max(lo))
}

/// Direct stride-1 cross-correlation of one sample; accumulates into `out`.
#[allow(clippy::too_many_arguments)]
fn conv3d_direct_fwd<T: Scalar>(
    input: &[T],
    (cin, d, h, w): (usize, usize, usize, usize),
    weight: &[T],
    cout: usize,
    (kd, kh, kw): (usize, usize, usize),
    pad: usize,
    (od, oh, ow): (usize, usize, usize),
    out: &mut [T],
) {
    for co in 0..cout {
        let out_c = &mut out[co * od * oh * ow..(co + 1) * od * oh * ow];
        for ci in 0..cin {
            let in_c = &input[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..kd {
                let (z0, z1) = axis_range(od, d, kz, pad);
                for ky in 0..kh {
                    let (y0, y1) = axis_range(oh, h, ky, pad);
                    for kx in 0..kw {
                        let (x0, x1) = axis_range(ow, w, kx, pad);
                        let wv = weight[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx];
                        for oz in z0..z1 {
                            let z = oz + kz - pad;
                            for oy in y0..y1 {
                                let y = oy + ky - pad;
                                let orow = &mut out_c[(oz * oh + oy) * ow + x0..(oz * oh + oy) * ow + x1];
                                let irow = &in_c
                                    [(z * h + y) * w + x0 + kx - pad..(z * h + y) * w + x1 + kx - pad];
                                for (o, &iv) in orow.iter_mut().zip(irow) {
                                    *o = iv.mul_add(wv, *o);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of the direct kernel in the data argument: scatter `grad` back
/// through the stride-1 correlation.
#[allow(clippy::too_many_arguments)]
fn conv3d_direct_bwd_data<T: Scalar>(
    grad: &[T],
    (cin, d, h, w): (usize, usize, usize, usize),
    weight: &[T],
    cout: usize,
    (kd, kh, kw): (usize, usize, usize),
    pad: usize,
    (od, oh, ow): (usize, usize, usize),
    d_input: &mut [T],
) {
    for co in 0..cout {
        let g_c = &grad[co * od * oh * ow..(co + 1) * od * oh * ow];
        for ci in 0..cin {
            let in_c = &mut d_input[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..kd {
                let (z0, z1) = axis_range(od, d, kz, pad);
                for ky in 0..kh {
                    let (y0, y1) = axis_range(oh, h, ky, pad);
                    for kx in 0..kw {
                        let (x0, x1) = axis_range(ow, w, kx, pad);
                        let wv = weight[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx];
                        for oz in z0..z1 {
                            let z = oz + kz - pad;
                            for oy in y0..y1 {
                                let y = oy + ky - pad;
                                let grow = &g_c[(oz * oh + oy) * ow + x0..(oz * oh + oy) * ow + x1];
                                let irow = &mut in_c
                                    [(z * h + y) * w + x0 + kx - pad..(z * h + y) * w + x1 + kx - pad];
                                for (i, &gv) in irow.iter_mut().zip(grow) {
                                    *i = gv.mul_add(wv, *i);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient of the direct kernel: per-tap dot products over the
/// overlapping rows, with lane-split accumulators so the reduction
/// vectorizes.
#[allow(clippy::too_many_arguments)]
fn conv3d_direct_bwd_weight<T: Scalar>(
    grad: &[T],
    input: &[T],
    (cin, d, h, w): (usize, usize, usize, usize),
    cout: usize,
    (kd, kh, kw): (usize, usize, usize),
    pad: usize,
    (od, oh, ow): (usize, usize, usize),
    d_weight: &mut [T],
) {
    const LANES: usize = 8;
    for co in 0..cout {
        let g_c = &grad[co * od * oh * ow..(co + 1) * od * oh * ow];
        for ci in 0..cin {
            let in_c = &input[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..kd {
                let (z0, z1) = axis_range(od, d, kz, pad);
                for ky in 0..kh {
                    let (y0, y1) = axis_range(oh, h, ky, pad);
                    for kx in 0..kw {
                        let (x0, x1) = axis_range(ow, w, kx, pad);
                        let mut acc = [T::ZERO; LANES];
                        let mut tail = T::ZERO;
                        let run = x1 - x0;
                        let chunks = run / LANES;
                        for oz in z0..z1 {
                            let z = oz + kz - pad;
                            for oy in y0..y1 {
                                let y = oy + ky - pad;
                                let grow = &g_c[(oz * oh + oy) * ow + x0..(oz * oh + oy) * ow + x1];
                                let irow = &in_c
                                    [(z * h + y) * w + x0 + kx - pad..(z * h + y) * w + x1 + kx - pad];
                                for ch in 0..chunks {
                                    let gs = &grow[ch * LANES..(ch + 1) * LANES];
                                    let is = &irow[ch * LANES..(ch + 1) * LANES];
                                    for l in 0..LANES {
                                        acc[l] = gs[l].mul_add(is[l], acc[l]);
                                    }
                                }
                                for l in chunks * LANES..run {
                                    tail = grow[l].mul_add(irow[l], tail);
                                }
                            }
                        }
                        let sum: T = acc.iter().copied().sum();
                        d_weight[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx] += sum + tail;
                    }
                }
            }
        }
    }
}

/// c(m x n) += a(m x k) . b(k x n)
///
/// Processes four output rows at once so each streamed row of `b` is
/// reused fourfold; the kernels are memory-bound at these shapes.
fn matmul_nn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i0 = 0;
    while i0 + 4 <= m {
        let rows = &mut c[i0 * n..(i0 + 4) * n];
        let (c0, rest) = rows.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i0 * k..(i0 + 1) * k];
        let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
        let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
        let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let (x0, x1, x2, x3) = (a0[l], a1[l], a2[l], a3[l]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] = bv.mul_add(x0, c0[j]);
                c1[j] = bv.mul_add(x1, c1[j]);
                c2[j] = bv.mul_add(x2, c2[j]);
                c3[j] = bv.mul_add(x3, c3[j]);
            }
        }
        i0 += 4;
    }
    for i in i0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = bv.mul_add(a_il, *cv);
            }
        }
    }
}

/// c(k x n) += a(p x k)^T . b(p x n), with the same four-row reuse along p.
fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, k: usize, n: usize) {
    let mut l0 = 0;
    while l0 + 4 <= p {
        let a0 = &a[l0 * k..(l0 + 1) * k];
        let a1 = &a[(l0 + 1) * k..(l0 + 2) * k];
        let a2 = &a[(l0 + 2) * k..(l0 + 3) * k];
        let a3 = &a[(l0 + 3) * k..(l0 + 4) * k];
        let b0 = &b[l0 * n..(l0 + 1) * n];
        let b1 = &b[(l0 + 1) * n..(l0 + 2) * n];
        let b2 = &b[(l0 + 2) * n..(l0 + 3) * n];
        let b3 = &b[(l0 + 3) * n..(l0 + 4) * n];
        for i in 0..k {
            let crow = &mut c[i * n..(i + 1) * n];
            let (x0, x1, x2, x3) = (a0[i], a1[i], a2[i], a3[i]);
            for j in 0..n {
                let mut v = crow[j];
                v = b0[j].mul_add(x0, v);
                v = b1[j].mul_add(x1, v);
                v = b2[j].mul_add(x2, v);
                v = b3[j].mul_add(x3, v);
                crow[j] = v;
            }
        }
        l0 += 4;
    }
    for l in l0..p {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &a_li) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = bv.mul_add(a_li, *cv);
            }
        }
    }
}

/// c(m x n) += a(m x p) . b(n x p)^T
fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, n: usize) {
    // eight independent partial sums break the serial dependency chain of a
    // plain dot product, letting the reduction vectorize; four output rows
    // share each streamed row of b
    const LANES: usize = 8;
    let chunks = p / LANES;
    let mut i0 = 0;
    while i0 + 4 <= m {
        let a0 = &a[i0 * p..(i0 + 1) * p];
        let a1 = &a[(i0 + 1) * p..(i0 + 2) * p];
        let a2 = &a[(i0 + 2) * p..(i0 + 3) * p];
        let a3 = &a[(i0 + 3) * p..(i0 + 4) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = [[T::ZERO; LANES]; 4];
            for ch in 0..chunks {
                let bv = &brow[ch * LANES..(ch + 1) * LANES];
                let s0 = &a0[ch * LANES..(ch + 1) * LANES];
                let s1 = &a1[ch * LANES..(ch + 1) * LANES];
                let s2 = &a2[ch * LANES..(ch + 1) * LANES];
                let s3 = &a3[ch * LANES..(ch + 1) * LANES];
                for l in 0..LANES {
                    acc[0][l] = s0[l].mul_add(bv[l], acc[0][l]);
                    acc[1][l] = s1[l].mul_add(bv[l], acc[1][l]);
                    acc[2][l] = s2[l].mul_add(bv[l], acc[2][l]);
                    acc[3][l] = s3[l].mul_add(bv[l], acc[3][l]);
                }
            }
            let mut tails = [T::ZERO; 4];
            for l in chunks * LANES..p {
                let bv = brow[l];
                tails[0] = a0[l].mul_add(bv, tails[0]);
                tails[1] = a1[l].mul_add(bv, tails[1]);
                tails[2] = a2[l].mul_add(bv, tails[2]);
                tails[3] = a3[l].mul_add(bv, tails[3]);
            }
            for r in 0..4 {
                let sum: T = acc[r].iter().copied().sum();
                c[(i0 + r) * n + j] += sum + tails[r];
            }
        }
        i0 += 4;
    }
    for i in i0..m {
        let arow = &a[i * p..(i + 1) * p];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = [T::ZERO; LANES];
            for ch in 0..chunks {
                let av = &arow[ch * LANES..(ch + 1) * LANES];
                let bv = &brow[ch * LANES..(ch + 1) * LANES];
                for l in 0..LANES {
                    acc[l] = av[l].mul_add(bv[l], acc[l]);
                }
            }
            let mut tail = T::ZERO;
            for l in chunks * LANES..p {
                tail = arow[l].mul_add(brow[l], tail);
            }
            let sum: T = acc.iter().copied().sum();
            *cv += sum + tail;
        }
    }
}

/// Unfold one sample `[C,D,H,W]` into `col[(c,kz,ky,kx), (od,oh,ow)]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    (cin, d, h, w): (usize, usize, usize, usize),
    (kd, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (od, oh, ow): (usize, usize, usize),
    col: &mut [T],
) {
    let m = od * oh * ow;
    debug_assert_eq!(col.len(), cin * kd * kh * kw * m);
    let mut row = 0;
    for c in 0..cin {
        let chan = &input[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * m..(row + 1) * m];
                    row += 1;
                    let mut o = 0;
                    for oz in 0..od {
                        let z = (oz * stride + kz) as isize - pad as isize;
                        for oy in 0..oh {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let in_plane = z >= 0 && z < d as isize && y >= 0 && y < h as isize;
                            if !in_plane {
                                for v in &mut dst[o..o + ow] {
                                    *v = T::ZERO;
                                }
                                o += ow;
                                continue;
                            }
                            let plane = (z as usize * h + y as usize) * w;
                            if stride == 1 {
                                // contiguous x-run fast path
                                let x0 = kx as isize - pad as isize;
                                for ox in 0..ow {
                                    let x = x0 + ox as isize;
                                    dst[o + ox] = if x >= 0 && x < w as isize {
                                        chan[plane + x as usize]
                                    } else {
                                        T::ZERO
                                    };
                                }
                            } else {
                                for ox in 0..ow {
                                    let x = (ox * stride + kx) as isize - pad as isize;
                                    dst[o + ox] = if x >= 0 && x < w as isize {
                                        chan[plane + x as usize]
                                    } else {
                                        T::ZERO
                                    };
                                }
                            }
                            o += ow;
                        }
                    }
                }
            }
        }
    }
}

/// Fold `col` back into one sample `[C,D,H,W]`, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    (cin, d, h, w): (usize, usize, usize, usize),
    (kd, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (od, oh, ow): (usize, usize, usize),
    out: &mut [T],
) {
    let m = od * oh * ow;
    debug_assert_eq!(out.len(), cin * d * h * w);
    let mut row = 0;
    for c in 0..cin {
        let chan = &mut out[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * m..(row + 1) * m];
                    row += 1;
                    let mut o = 0;
                    for oz in 0..od {
                        let z = (oz * stride + kz) as isize - pad as isize;
                        for oy in 0..oh {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            if z < 0 || z >= d as isize || y < 0 || y >= h as isize {
                                o += ow;
                                continue;
                            }
                            let plane = (z as usize * h + y as usize) * w;
                            for ox in 0..ow {
                                let x = (ox * stride + kx) as isize - pad as isize;
                                if x >= 0 && x < w as isize {
                                    chan[plane + x as usize] += src[o + ox];
                                }
                            }
                            o += ow;
                        }
                    }
                }
            }
        }
    }
}

/// Central finite differences on every input coordinate of `f`; returns the
/// max over coordinates of |analytic - numeric| / max(1e-8, |analytic| +
/// |numeric|). Runs in 64-bit regardless of the training scalar type.
pub fn grad_check<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<f64, AutogradError>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, AutogradError>,
{
    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(shape, values)| g.leaf(shape, values.clone(), true))
        .collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.values(id).len()])
        })
        .collect();

    let eval = |perturbed: &[(Vec<usize>, Vec<f64>)]| -> Result<f64, AutogradError> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .map(|(shape, values)| g.leaf(shape, values.clone(), false))
            .collect();
        let out = f(&mut g, &ids)?;
        Ok(g.scalar_value(out))
    };

    let mut max_err = 0.0f64;
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (ti, (_, values)) in inputs.iter().enumerate() {
        for ci in 0..values.len() {
            let orig = values[ci];
            work[ti].1[ci] = orig + eps;
            let fp = eval(&work)?;
            work[ti].1[ci] = orig - eps;
            let fm = eval(&work)?;
            work[ti].1[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn linear_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true);
        let y = g.affine(x, 3.0, 0.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn quadratic_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3], vec![1.0, -2.0, 0.5], true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true);
        assert!(matches!(
            g.backward(x).unwrap_err(),
            AutogradError::NonScalarBackward(_)
        ));
    }

    #[test]
    fn gradient_accumulates_over_paths() {
        // y = sum(x*x) via two uses of x equals single-use gradient 2x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2], vec![3.0, -1.0], true);
        let a = g.add(x, x).unwrap(); // 2x
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[3], vec![0.0, -1.0, 2.0], true);
        let t = g.activation(x, Activation::Tanh);
        assert_eq!(g.values(t)[0], 0.0);
        let s = g.activation(x, Activation::Sigmoid);
        assert_eq!(g.values(s)[0], 0.5);
        let l = g.activation(x, Activation::LeakyRelu);
        assert!((g.values(l)[1] + 0.2).abs() < 1e-12);
        let r = g.activation(x, Activation::Relu);
        assert_eq!(g.values(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[4], vec![2.5; 4], false);
        let m = g.mean(x);
        assert_eq!(g.scalar_value(m), 2.5);
    }

    #[test]
    fn abs_gradient_signs() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2], vec![1.5, -0.5], true);
        let a = g.abs(x);
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2], vec![1.0, 0.0], false);
        assert_eq!(g.log(x).unwrap_err(), AutogradError::LogDomain);
    }

    #[test]
    fn conv_1x1x1_is_scalar_mul() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::from_seed(1);
        let xv = randn(&mut rng, 2 * 3 * 3 * 3);
        let x = g.leaf(&[1, 2, 3, 3, 3], xv.clone(), false);
        let w = g.leaf(&[2, 2, 1, 1, 1], vec![2.0, 0.0, 0.0, 2.0], false);
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        for (a, b) in g.values(y).iter().zip(&xv) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_box_kernel_on_constant() {
        let mut g = Graph::<f64>::new();
        let c = 1.75;
        let x = g.leaf(&[1, 1, 5, 5, 5], vec![c; 125], false);
        let w = g.leaf(&[1, 1, 3, 3, 3], vec![1.0 / 27.0; 27], false);
        let y = g.conv3d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 5, 5, 5]);
        // interior voxels
        let v = g.values(y);
        for z in 1..4 {
            for yy in 1..4 {
                for xx in 1..4 {
                    let idx = (z * 5 + yy) * 5 + xx;
                    assert!((v[idx] - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_six_loop_oracle() {
        let mut rng = Rng::from_seed(2);
        let xv = randn(&mut rng, 64);
        let wv = randn(&mut rng, 27);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 4, 4, 4], xv.clone(), false);
        let w = g.leaf(&[1, 1, 3, 3, 3], wv.clone(), false);
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
        // direct 6-loop convolution oracle
        for oz in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = 0.0;
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += xv[((oz + kz) * 4 + oy + ky) * 4 + ox + kx]
                                    * wv[(kz * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    let got = g.values(y)[(oz * 2 + oy) * 2 + ox];
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_stride_and_pad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 8, 8, 8], vec![0.0; 512], false);
        let w = g.leaf(&[4, 1, 3, 3, 3], vec![0.0; 4 * 27], false);
        let y = g.conv3d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4, 4]);
    }

    #[test]
    fn conv_transpose_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::from_seed(3);
        let xv = randn(&mut rng, 27);
        let x = g.leaf(&[1, 1, 3, 3, 3], xv.clone(), false);
        let w = g.leaf(&[1, 1, 1, 1, 1], vec![1.0], false);
        let y = g.conv3d_transpose(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3, 3]);
        for (a, b) in g.values(y).iter().zip(&xv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_stride2_block() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 1, 1, 1], vec![3.0], false);
        let w = g.leaf(&[1, 1, 2, 2, 2], vec![1.0; 8], false);
        let y = g.conv3d_transpose(x, w, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
        assert!(g.values(y).iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x; w), y> == <x, conv_transpose(y; w)>
        let mut rng = Rng::from_seed(4);
        // sizes chosen so (S + 2*pad - k) divides the stride evenly and the
        // transpose reproduces the conv input shape
        for &(s, stride, pad) in &[(6usize, 1usize, 0usize), (6, 1, 1), (7, 2, 1)] {
            let xv = randn(&mut rng, 2 * s * s * s);
            let wv = randn(&mut rng, 3 * 2 * 3 * 3 * 3);
            let mut g = Graph::<f64>::new();
            let x = g.leaf(&[1, 2, s, s, s], xv.clone(), false);
            let w = g.leaf(&[3, 2, 3, 3, 3], wv.clone(), false);
            let fx = g.conv3d(x, w, None, stride, pad).unwrap();
            let yshape = g.shape(fx).to_vec();
            let yv = randn(&mut rng, yshape.iter().product());
            let y = g.leaf(&yshape, yv.clone(), false);
            let fty = g.conv3d_transpose(y, w, stride, pad).unwrap();
            assert_eq!(g.shape(fty), &[1, 2, s, s, s]);
            let lhs: f64 = g.values(fx).iter().zip(&yv).map(|(a, b)| a * b).sum();
            let rhs: f64 = xv.iter().zip(g.values(fty)).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() / (lhs.abs() + rhs.abs()).max(1e-9) < 1e-10,
                "stride {stride} pad {pad}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut rng = Rng::from_seed(5);
        let xv = randn(&mut rng, 2 * 27);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 2, 3, 3, 3], xv, false);
        let gamma = g.leaf(&[2], vec![1.0, 1.0], false);
        let beta = g.leaf(&[2], vec![0.0, 0.0], false);
        let y = g.instance_norm3d(x, gamma, beta, 1e-9).unwrap();
        for c in 0..2 {
            let vals = &g.values(y)[c * 27..(c + 1) * 27];
            let mean: f64 = vals.iter().sum::<f64>() / 27.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 27.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_norm_constant_channel_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 2, 2, 2], vec![4.0; 8], false);
        let gamma = g.leaf(&[1], vec![3.0], false);
        let beta = g.leaf(&[1], vec![-0.5], false);
        let y = g.instance_norm3d(x, gamma, beta, 1e-5).unwrap();
        for &v in g.values(y) {
            assert!((v + 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_rejects_single_voxel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 1, 1, 1], vec![1.0], false);
        let gamma = g.leaf(&[1], vec![1.0], false);
        let beta = g.leaf(&[1], vec![0.0], false);
        assert!(matches!(
            g.instance_norm3d(x, gamma, beta, 1e-5).unwrap_err(),
            AutogradError::SpatialTooSmall(1)
        ));
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let err = grad_check(
            |g, ids| {
                let y = g.affine(ids[0], 4.0, 1.0);
                Ok(g.sum(y))
            },
            &[(vec![5], vec![0.3, -0.2, 0.9, 1.4, -2.0])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_conv_leaky_stack() {
        let mut rng = Rng::from_seed(6);
        let xv = randn(&mut rng, 64);
        let wv: Vec<f64> = randn(&mut rng, 27).iter().map(|v| v * 0.3).collect();
        let err = grad_check(
            |g, ids| {
                let y = g.conv3d(ids[0], ids[1], None, 1, 1)?;
                let a = g.activation(y, Activation::LeakyRelu);
                Ok(g.mean(a))
            },
            &[
                (vec![1, 1, 4, 4, 4], xv),
                (vec![1, 1, 3, 3, 3], wv),
            ],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn grad_check_instance_norm() {
        let mut rng = Rng::from_seed(7);
        let xv = randn(&mut rng, 2 * 27);
        let err = grad_check(
            |g, ids| {
                let y = g.instance_norm3d(ids[0], ids[1], ids[2], 1e-5)?;
                let t = g.activation(y, Activation::Tanh);
                Ok(g.mean(t))
            },
            &[
                (vec![1, 2, 3, 3, 3], xv),
                (vec![2], vec![1.3, 0.7]),
                (vec![2], vec![0.1, -0.2]),
            ],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn grad_check_composite_arith() {
        let mut rng = Rng::from_seed(8);
        let a = randn(&mut rng, 12);
        let b: Vec<f64> = randn(&mut rng, 12).iter().map(|v| v + 3.0).collect();
        let err = grad_check(
            |g, ids| {
                let m = g.mul(ids[0], ids[0])?;
                let d = g.div(m, ids[1])?;
                let sq = g.mul(d, d)?;
                let half = g.affine(sq, 0.5, 0.1);
                Ok(g.mean(half))
            },
            &[(vec![12], a), (vec![12], b)],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "err {err}");
    }

    #[test]
    fn grad_check_detects_corrupted_backward() {
        // mutation fixture: analytic gradient deliberately off by 2x
        let mut g = Graph::<f64>::new();
        let xv = vec![0.7, -0.3, 1.1];
        let x = g.leaf(&[3], xv.clone(), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let analytic: Vec<f64> = g.grad(x).unwrap().iter().map(|v| v * 2.0).collect();
        let eps = 1e-4;
        let mut max_err = 0.0f64;
        for ci in 0..3 {
            let mut wp = xv.clone();
            wp[ci] += eps;
            let fp: f64 = wp.iter().map(|v| v * v).sum();
            wp[ci] -= 2.0 * eps;
            let fm: f64 = wp.iter().map(|v| v * v).sum();
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[ci] - numeric).abs()
                / f64::max(1e-8, analytic[ci].abs() + numeric.abs());
            max_err = max_err.max(err);
        }
        assert!(max_err > 0.3, "mutation not detected: {max_err}");
    }

    #[test]
    fn forward_deterministic() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let mut rng = Rng::from_seed(99);
            let xv: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
            let wv: Vec<f32> = (0..27).map(|_| rng.normal() as f32).collect();
            let x = g.leaf(&[1, 1, 4, 4, 4], xv, false);
            let w = g.leaf(&[1, 1, 3, 3, 3], wv, false);
            let y = g.conv3d(x, w, None, 1, 1).unwrap();
            let t = g.activation(y, Activation::Tanh);
            let m = g.mean(t);
            g.scalar_value(m)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
