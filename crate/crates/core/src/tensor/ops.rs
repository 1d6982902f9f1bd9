//! Forward implementations of the differentiable primitives.
//!
//! Broadcasting is deliberately restricted to scalar-vs-tensor (one
//! operand with a single element) and identical shapes, which keeps every
//! backward rule auditable.

use super::{Op, Tensor};
use crate::error::{Error, Result};

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // Overflow-safe branch: for large x, log(1+e^x) = x + log(1+e^-x).
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!(
                "shapes {:?} and {:?} are neither identical nor scalar-vs-tensor",
                a.shape(),
                b.shape()
            ),
        ))
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
    } else if a.len() == 1 {
        b.iter().map(|y| f(a[0], *y)).collect()
    } else {
        a.iter().map(|x| f(*x, b[0])).collect()
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape("add", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x + y)));
        Ok(Tensor::result_of(shape, data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape("sub", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x - y)));
        Ok(Tensor::result_of(shape, data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape("mul", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x * y)));
        Ok(Tensor::result_of(shape, data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape("div", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| zip_map(a, b, |x, y| x / y)));
        Ok(Tensor::result_of(shape, data, Op::Div(self.clone(), other.clone())))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| -x).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x * c).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::MulScalar(self.clone(), c))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| sigmoid_scalar(*x)).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.max(0.0)).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    pub fn softplus(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| softplus_scalar(*x)).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::Softplus(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.exp()).collect());
        Tensor::result_of(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        let bad = self.with_data(|a| a.iter().position(|x| *x <= 0.0));
        if let Some(i) = bad {
            let v = self.with_data(|a| a[i]);
            return Err(Error::domain("log", format!("non-positive value {v} at flat index {i}")));
        }
        let data = self.with_data(|a| a.iter().map(|x| x.ln()).collect());
        Ok(Tensor::result_of(self.shape().to_vec(), data, Op::Log(self.clone())))
    }

    pub fn sum_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        let plan = ReducePlan::new("sum", self.shape(), axes, keepdims)?;
        let data = self.with_data(|a| plan.apply_sum(a));
        Ok(Tensor::result_of(
            plan.out_shape.clone(),
            data,
            Op::Sum { input: self.clone(), axes: axes.to_vec(), keepdims },
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        let plan = ReducePlan::new("mean", self.shape(), axes, keepdims)?;
        let n = plan.group as f64;
        let mut data = self.with_data(|a| plan.apply_sum(a));
        for v in data.iter_mut() {
            *v /= n;
        }
        Ok(Tensor::result_of(
            plan.out_shape.clone(),
            data,
            Op::Mean { input: self.clone(), axes: axes.to_vec(), keepdims },
        ))
    }

    /// Population variance over `axes` (divisor = group size).
    pub fn var_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        let plan = ReducePlan::new("var", self.shape(), axes, keepdims)?;
        let data = self.with_data(|a| plan.apply_var(a));
        Ok(Tensor::result_of(
            plan.out_shape.clone(),
            data,
            Op::Var { input: self.clone(), axes: axes.to_vec(), keepdims },
        ))
    }

    pub fn min_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        let plan = ReducePlan::new("min", self.shape(), axes, keepdims)?;
        let data = self.with_data(|a| plan.apply_extremum(a, false));
        Ok(Tensor::result_of(
            plan.out_shape.clone(),
            data,
            Op::Min { input: self.clone(), axes: axes.to_vec(), keepdims },
        ))
    }

    pub fn max_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        let plan = ReducePlan::new("max", self.shape(), axes, keepdims)?;
        let data = self.with_data(|a| plan.apply_extremum(a, true));
        Ok(Tensor::result_of(
            plan.out_shape.clone(),
            data,
            Op::Max { input: self.clone(), axes: axes.to_vec(), keepdims },
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false).expect("full reduction is always valid")
    }

    pub fn mean_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes, false).expect("full reduction is always valid")
    }

    /// Channel-wise L2 norm of a `[B, C, ...]` tensor, yielding `[B, 1, ...]`.
    pub fn channel_l2_norm(&self) -> Result<Tensor> {
        if self.shape().len() < 2 {
            return Err(Error::shape("channel_l2_norm", format!("needs rank >= 2, got {:?}", self.shape())));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        let sp: usize = self.shape()[2..].iter().product();
        let mut out = vec![0.0; b * sp];
        self.with_data(|a| {
            for bi in 0..b {
                for ci in 0..c {
                    let chan = &a[(bi * c + ci) * sp..][..sp];
                    let orow = &mut out[bi * sp..][..sp];
                    for (o, x) in orow.iter_mut().zip(chan) {
                        *o += x * x;
                    }
                }
            }
        });
        for v in out.iter_mut() {
            *v = v.sqrt();
        }
        let mut shape = self.shape().to_vec();
        shape[1] = 1;
        Ok(Tensor::result_of(shape, out, Op::ChannelL2Norm(self.clone())))
    }

    /// Softmax over the channel axis of a `[B, C, ...]` tensor.
    pub fn channel_softmax(&self) -> Result<Tensor> {
        if self.shape().len() < 2 {
            return Err(Error::shape("channel_softmax", format!("needs rank >= 2, got {:?}", self.shape())));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        let sp: usize = self.shape()[2..].iter().product();
        let mut out = vec![0.0; b * c * sp];
        self.with_data(|a| {
            for bi in 0..b {
                for s in 0..sp {
                    let mut mx = f64::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(a[(bi * c + ci) * sp + s]);
                    }
                    let mut denom = 0.0;
                    for ci in 0..c {
                        let e = (a[(bi * c + ci) * sp + s] - mx).exp();
                        out[(bi * c + ci) * sp + s] = e;
                        denom += e;
                    }
                    for ci in 0..c {
                        out[(bi * c + ci) * sp + s] /= denom;
                    }
                }
            }
        });
        Ok(Tensor::result_of(self.shape().to_vec(), out, Op::ChannelSoftmax(self.clone())))
    }

    /// Per-sample min-max normalization over all non-batch axes:
    /// `(v - min) / (max - min + eps)`.
    pub fn minmax_norm(&self, eps: f64) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::shape("minmax_norm", "needs rank >= 1".to_string()));
        }
        let b = self.shape()[0];
        let sp: usize = self.shape()[1..].iter().product();
        if sp == 0 {
            return Err(Error::shape("minmax_norm", "empty sample".to_string()));
        }
        let mut out = vec![0.0; b * sp];
        self.with_data(|a| {
            for bi in 0..b {
                let block = &a[bi * sp..][..sp];
                let mut mn = block[0];
                let mut mx = block[0];
                for &v in block {
                    if v < mn {
                        mn = v;
                    }
                    if v > mx {
                        mx = v;
                    }
                }
                let denom = mx - mn + eps;
                for (o, v) in out[bi * sp..][..sp].iter_mut().zip(block) {
                    *o = (v - mn) / denom;
                }
            }
        });
        Ok(Tensor::result_of(self.shape().to_vec(), out, Op::MinMaxNorm { input: self.clone(), eps }))
    }

    /// Resize the spatial dims of a `[B, C, H, W, D]` tensor.
    ///
    /// `trilinear` follows the align-corners=false convention and is
    /// differentiable; `nearest` replicates `floor(index * scale)`.
    pub fn interp3d(&self, dims: [usize; 3], mode: InterpMode) -> Result<Tensor> {
        if self.shape().len() != 5 {
            return Err(Error::shape("interp3d", format!("expected [B,C,H,W,D], got {:?}", self.shape())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("interp3d", format!("target dims must be >= 1, got {:?}", dims)));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        let ish = [self.shape()[2], self.shape()[3], self.shape()[4]];
        let shape = vec![b, c, dims[0], dims[1], dims[2]];
        let data = match mode {
            InterpMode::Nearest => {
                self.with_data(|a| interp_nearest_raw(a, b * c, ish, dims))
            }
            InterpMode::Trilinear => {
                self.with_data(|a| interp_trilinear_raw(a, b * c, ish, dims))
            }
        };
        let op = match mode {
            InterpMode::Nearest => Op::InterpNearest { input: self.clone(), dims },
            InterpMode::Trilinear => Op::InterpTrilinear { input: self.clone(), dims },
        };
        Ok(Tensor::result_of(shape, data, op))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Trilinear,
}

/// Concatenate along `axis`; all other dims must match.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no tensors given".to_string()));
    }
    let ndim = parts[0].shape().len();
    if axis >= ndim {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {ndim}")));
    }
    for p in parts {
        if p.shape().len() != ndim {
            return Err(Error::shape("concat", "rank mismatch".to_string()));
        }
        for (i, (&a, &b)) in p.shape().iter().zip(parts[0].shape()).enumerate() {
            if i != axis && a != b {
                return Err(Error::shape(
                    "concat",
                    format!("axis {i} differs: {a} vs {b} (only axis {axis} may differ)"),
                ));
            }
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total_axis = shape[axis];
    let mut data = vec![0.0; outer * total_axis * inner];
    let mut offset = 0;
    for p in parts {
        let pa = p.shape()[axis];
        p.with_data(|src| {
            for o in 0..outer {
                let dst_start = (o * total_axis + offset) * inner;
                let src_start = o * pa * inner;
                data[dst_start..dst_start + pa * inner]
                    .copy_from_slice(&src[src_start..src_start + pa * inner]);
            }
        });
        offset += pa;
    }
    Ok(Tensor::result_of(shape, data, Op::Concat { parts: parts.to_vec(), axis }))
}

// ── reduction machinery ──────────────────────────────────────────────

pub(crate) struct ReducePlan {
    pub ishape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Output index contribution of a unit step along each input axis.
    pub contrib: Vec<usize>,
    pub out_numel: usize,
    pub group: usize,
}

impl ReducePlan {
    pub fn new(op: &'static str, ishape: &[usize], axes: &[usize], keepdims: bool) -> Result<ReducePlan> {
        if axes.is_empty() {
            return Err(Error::shape(op, "empty reduction axis list".to_string()));
        }
        let ndim = ishape.len();
        let mut mask = vec![false; ndim];
        for &a in axes {
            if a >= ndim {
                return Err(Error::shape(op, format!("axis {a} out of range for rank {ndim}")));
            }
            if mask[a] {
                return Err(Error::shape(op, format!("duplicate axis {a}")));
            }
            mask[a] = true;
        }
        let kept_dims: Vec<usize> =
            ishape.iter().enumerate().map(|(i, &d)| if mask[i] { 1 } else { d }).collect();
        let mut strides = vec![0usize; ndim];
        let mut s = 1;
        for i in (0..ndim).rev() {
            strides[i] = s;
            s *= kept_dims[i];
        }
        let contrib: Vec<usize> =
            (0..ndim).map(|i| if mask[i] { 0 } else { strides[i] }).collect();
        let out_numel: usize = kept_dims.iter().product();
        let group: usize =
            ishape.iter().enumerate().filter(|(i, _)| mask[*i]).map(|(_, &d)| d).product();
        let out_shape = if keepdims {
            kept_dims
        } else {
            let squeezed: Vec<usize> = ishape
                .iter()
                .enumerate()
                .filter(|(i, _)| !mask[*i])
                .map(|(_, &d)| d)
                .collect();
            if squeezed.is_empty() {
                vec![1]
            } else {
                squeezed
            }
        };
        Ok(ReducePlan { ishape: ishape.to_vec(), out_shape, contrib, out_numel, group })
    }

    /// Visit every input element with its output slot.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let ndim = self.ishape.len();
        let n: usize = self.ishape.iter().product();
        let mut coords = vec![0usize; ndim];
        let mut oidx = 0usize;
        for idx in 0..n {
            f(idx, oidx);
            // odometer increment
            for ax in (0..ndim).rev() {
                coords[ax] += 1;
                oidx += self.contrib[ax];
                if coords[ax] < self.ishape[ax] {
                    break;
                }
                oidx -= self.contrib[ax] * self.ishape[ax];
                coords[ax] = 0;
            }
        }
    }

    pub fn apply_sum(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_numel];
        self.for_each(|i, o| out[o] += a[i]);
        out
    }

    pub fn apply_var(&self, a: &[f64]) -> Vec<f64> {
        let n = self.group as f64;
        let mut mean = vec![0.0; self.out_numel];
        self.for_each(|i, o| mean[o] += a[i]);
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut out = vec![0.0; self.out_numel];
        self.for_each(|i, o| {
            let d = a[i] - mean[o];
            out[o] += d * d;
        });
        for v in out.iter_mut() {
            *v /= n;
        }
        out
    }

    pub fn apply_extremum(&self, a: &[f64], want_max: bool) -> Vec<f64> {
        let init = if want_max { f64::NEG_INFINITY } else { f64::INFINITY };
        let mut out = vec![init; self.out_numel];
        self.for_each(|i, o| {
            if (want_max && a[i] > out[o]) || (!want_max && a[i] < out[o]) {
                out[o] = a[i];
            }
        });
        out
    }

    /// First-occurrence arg-extremum per output slot.
    pub fn arg_extremum(&self, a: &[f64], want_max: bool) -> Vec<usize> {
        let init = if want_max { f64::NEG_INFINITY } else { f64::INFINITY };
        let mut best = vec![init; self.out_numel];
        let mut arg = vec![usize::MAX; self.out_numel];
        self.for_each(|i, o| {
            if (want_max && a[i] > best[o]) || (!want_max && a[i] < best[o]) {
                best[o] = a[i];
                arg[o] = i;
            }
        });
        arg
    }
}

// ── interpolation kernels ────────────────────────────────────────────

fn nearest_axis_map(out_n: usize, in_n: usize) -> Vec<usize> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n).map(|o| (((o as f64) * scale).floor() as usize).min(in_n - 1)).collect()
}

pub(crate) fn interp_nearest_raw(
    a: &[f64],
    channels: usize,
    ish: [usize; 3],
    osh: [usize; 3],
) -> Vec<f64> {
    let isp = ish[0] * ish[1] * ish[2];
    let osp = osh[0] * osh[1] * osh[2];
    let mx = nearest_axis_map(osh[0], ish[0]);
    let my = nearest_axis_map(osh[1], ish[1]);
    let mz = nearest_axis_map(osh[2], ish[2]);
    let mut out = vec![0.0; channels * osp];
    for ch in 0..channels {
        let src = &a[ch * isp..][..isp];
        let dst = &mut out[ch * osp..][..osp];
        let mut di = 0;
        for ox in 0..osh[0] {
            for oy in 0..osh[1] {
                let base = (mx[ox] * ish[1] + my[oy]) * ish[2];
                for oz in 0..osh[2] {
                    dst[di] = src[base + mz[oz]];
                    di += 1;
                }
            }
        }
    }
    out
}

/// Per-axis (low index, high index, high weight) for align-corners=false.
pub(crate) fn trilinear_axis_map(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_n as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn interp_trilinear_raw(
    a: &[f64],
    channels: usize,
    ish: [usize; 3],
    osh: [usize; 3],
) -> Vec<f64> {
    let isp = ish[0] * ish[1] * ish[2];
    let osp = osh[0] * osh[1] * osh[2];
    let mx = trilinear_axis_map(osh[0], ish[0]);
    let my = trilinear_axis_map(osh[1], ish[1]);
    let mz = trilinear_axis_map(osh[2], ish[2]);
    let mut out = vec![0.0; channels * osp];
    for ch in 0..channels {
        let src = &a[ch * isp..][..isp];
        let dst = &mut out[ch * osp..][..osp];
        let mut di = 0;
        for &(x0, x1, wx) in &mx {
            for &(y0, y1, wy) in &my {
                let b00 = (x0 * ish[1] + y0) * ish[2];
                let b01 = (x0 * ish[1] + y1) * ish[2];
                let b10 = (x1 * ish[1] + y0) * ish[2];
                let b11 = (x1 * ish[1] + y1) * ish[2];
                for &(z0, z1, wz) in &mz {
                    let c000 = src[b00 + z0];
                    let c001 = src[b00 + z1];
                    let c010 = src[b01 + z0];
                    let c011 = src[b01 + z1];
                    let c100 = src[b10 + z0];
                    let c101 = src[b10 + z1];
                    let c110 = src[b11 + z0];
                    let c111 = src[b11 + z1];
                    let c00 = c000 + (c001 - c000) * wz;
                    let c01 = c010 + (c011 - c010) * wz;
                    let c10 = c100 + (c101 - c100) * wz;
                    let c11 = c110 + (c111 - c110) * wz;
                    let c0 = c00 + (c01 - c00) * wy;
                    let c1 = c10 + (c11 - c10) * wy;
                    dst[di] = c0 + (c1 - c0) * wx;
                    di += 1;
                }
            }
        }
    }
    out
}
