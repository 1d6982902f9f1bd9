//! Direct 3D cross-correlation and its adjoints.
//!
//! The stride-1 paths run contiguous inner-z loops (axpy / dot), which is
//! what keeps whole-volume training viable on one CPU core. Strided paths
//! only appear in the cheap downsampling layers.

use super::{Op, Tensor};
use crate::error::{Error, Result};

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Row stencil for stride-1, k=3, pad=1 along z (out and inp same length):
/// `out[z] += w0*inp[z-1] + w1*inp[z] + w2*inp[z+1]` with edge clipping.
#[inline]
fn stencil3_row(out: &mut [f64], inp: &[f64], w0: f64, w1: f64, w2: f64) {
    let n = out.len();
    debug_assert_eq!(inp.len(), n);
    if n == 0 {
        return;
    }
    if n == 1 {
        out[0] += w1 * inp[0];
        return;
    }
    out[0] += w1 * inp[0] + w2 * inp[1];
    let dst = &mut out[1..n - 1];
    let left = &inp[..n - 2];
    let mid = &inp[1..n - 1];
    let right = &inp[2..n];
    for (((o, l), m), r) in dst.iter_mut().zip(left).zip(mid).zip(right) {
        *o += w0 * *l + w1 * *m + w2 * *r;
    }
    out[n - 1] += w0 * inp[n - 2] + w1 * inp[n - 1];
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Fixed 4-way association so the reduction both vectorizes and stays
    // bit-deterministic.
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub ish: [usize; 3],
    pub osh: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn isp(&self) -> usize {
        self.ish[0] * self.ish[1] * self.ish[2]
    }
    pub fn osp(&self) -> usize {
        self.osh[0] * self.osh[1] * self.osh[2]
    }
}

fn out_extent(op: &'static str, i: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = i + 2 * padding;
    if span < k {
        return Err(Error::shape(op, format!("input extent {i} with padding {padding} smaller than kernel {k}")));
    }
    Ok((span - k) / stride + 1)
}

fn validate(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 5 {
        return Err(Error::shape("conv3d", format!("input must be [B,Ci,H,W,D], got {is:?}")));
    }
    if ws.len() != 5 {
        return Err(Error::shape("conv3d", format!("weight must be [Co,Ci,k,k,k], got {ws:?}")));
    }
    let (k1, k2, k3) = (ws[2], ws[3], ws[4]);
    if k1 != k2 || k2 != k3 {
        return Err(Error::shape("conv3d", format!("kernel must be cubic, got {k1}x{k2}x{k3}")));
    }
    if k1 % 2 == 0 {
        return Err(Error::shape("conv3d", format!("kernel size must be odd, got {k1}")));
    }
    if is[1] != ws[1] {
        return Err(Error::shape(
            "conv3d",
            format!("input channel axis 1 has size {}, weight channel axis 1 expects {}", is[1], ws[1]),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv3d", "stride must be >= 1".to_string()));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv3d",
                format!("bias shape {:?} does not match output channels [{}]", b.shape(), ws[0]),
            ));
        }
    }
    let osh = [
        out_extent("conv3d", is[2], k1, stride, padding)?,
        out_extent("conv3d", is[3], k1, stride, padding)?,
        out_extent("conv3d", is[4], k1, stride, padding)?,
    ];
    Ok(ConvDims {
        batch: is[0],
        ci: is[1],
        co: ws[0],
        k: k1,
        ish: [is[2], is[3], is[4]],
        osh,
        stride,
        padding,
    })
}

/// Valid output range along one axis for kernel offset `ko` (stride 1):
/// indices `o` with `o + ko - padding` inside `[0, in_n)`.
#[inline]
fn range_s1(out_n: usize, in_n: usize, ko: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(ko);
    let hi = (in_n + padding - ko).min(out_n);
    (lo, hi.max(lo))
}

/// Same for arbitrary stride: `o*stride + ko - padding` inside `[0, in_n)`.
#[inline]
fn range_strided(out_n: usize, in_n: usize, ko: usize, padding: usize, stride: usize) -> (usize, usize) {
    let lo = if ko >= padding { 0 } else { (padding - ko).div_ceil(stride) };
    let last_in = in_n + padding - ko; // exclusive bound on o*stride
    let hi = (last_in.div_ceil(stride)).min(out_n);
    (lo.min(out_n), hi.max(lo.min(out_n)))
}

pub(crate) fn forward_raw(inp: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let (isp, osp) = (d.isp(), d.osp());
    let k = d.k;
    // Same-resolution 3^3 convs dominate; fuse the z taps into one row pass.
    let fused3 = d.stride == 1 && k == 3 && d.padding == 1 && d.osh == d.ish;
    let mut out = vec![0.0; d.batch * d.co * osp];
    for b in 0..d.batch {
        for co in 0..d.co {
            let och = &mut out[(b * d.co + co) * osp..][..osp];
            if let Some(bs) = bias {
                och.fill(bs[co]);
            }
            for ci in 0..d.ci {
                let ich = &inp[(b * d.ci + ci) * isp..][..isp];
                if fused3 {
                    for kx in 0..3 {
                        let (xlo, xhi) = range_s1(d.osh[0], d.ish[0], kx, 1);
                        for ky in 0..3 {
                            let (ylo, yhi) = range_s1(d.osh[1], d.ish[1], ky, 1);
                            let wbase = (((co * d.ci + ci) * 3 + kx) * 3 + ky) * 3;
                            let (w0, w1, w2) = (w[wbase], w[wbase + 1], w[wbase + 2]);
                            for x in xlo..xhi {
                                let ix = x + kx - 1;
                                for y in ylo..yhi {
                                    let iy = y + ky - 1;
                                    let orow = &mut och[(x * d.osh[1] + y) * d.osh[2]..][..d.osh[2]];
                                    let irow = &ich[(ix * d.ish[1] + iy) * d.ish[2]..][..d.ish[2]];
                                    stencil3_row(orow, irow, w0, w1, w2);
                                }
                            }
                        }
                    }
                    continue;
                }
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let wv = w[(((co * d.ci + ci) * k + kx) * k + ky) * k + kz];
                            if d.stride == 1 {
                                let (xlo, xhi) = range_s1(d.osh[0], d.ish[0], kx, d.padding);
                                let (ylo, yhi) = range_s1(d.osh[1], d.ish[1], ky, d.padding);
                                let (zlo, zhi) = range_s1(d.osh[2], d.ish[2], kz, d.padding);
                                if zhi <= zlo {
                                    continue;
                                }
                                let zoff = zlo + kz - d.padding;
                                for x in xlo..xhi {
                                    let ix = x + kx - d.padding;
                                    for y in ylo..yhi {
                                        let iy = y + ky - d.padding;
                                        let orow = &mut och[(x * d.osh[1] + y) * d.osh[2] + zlo..][..zhi - zlo];
                                        let irow = &ich[(ix * d.ish[1] + iy) * d.ish[2] + zoff..][..zhi - zlo];
                                        axpy(orow, wv, irow);
                                    }
                                }
                            } else {
                                let s = d.stride;
                                let (xlo, xhi) = range_strided(d.osh[0], d.ish[0], kx, d.padding, s);
                                let (ylo, yhi) = range_strided(d.osh[1], d.ish[1], ky, d.padding, s);
                                let (zlo, zhi) = range_strided(d.osh[2], d.ish[2], kz, d.padding, s);
                                for x in xlo..xhi {
                                    let ix = x * s + kx - d.padding;
                                    for y in ylo..yhi {
                                        let iy = y * s + ky - d.padding;
                                        let obase = (x * d.osh[1] + y) * d.osh[2];
                                        let ibase = (ix * d.ish[1] + iy) * d.ish[2];
                                        for z in zlo..zhi {
                                            let iz = z * s + kz - d.padding;
                                            och[obase + z] += wv * ich[ibase + iz];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input_raw(gout: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (isp, osp) = (d.isp(), d.osp());
    let k = d.k;
    let fused3 = d.stride == 1 && k == 3 && d.padding == 1 && d.osh == d.ish;
    let mut din = vec![0.0; d.batch * d.ci * isp];
    for b in 0..d.batch {
        for co in 0..d.co {
            let gch = &gout[(b * d.co + co) * osp..][..osp];
            for ci in 0..d.ci {
                let dch = &mut din[(b * d.ci + ci) * isp..][..isp];
                if fused3 {
                    for kx in 0..3 {
                        let (xlo, xhi) = range_s1(d.osh[0], d.ish[0], kx, 1);
                        for ky in 0..3 {
                            let (ylo, yhi) = range_s1(d.osh[1], d.ish[1], ky, 1);
                            let wbase = (((co * d.ci + ci) * 3 + kx) * 3 + ky) * 3;
                            // adjoint taps run in reverse kernel order
                            let (w0, w1, w2) = (w[wbase + 2], w[wbase + 1], w[wbase]);
                            for x in xlo..xhi {
                                let ix = x + kx - 1;
                                for y in ylo..yhi {
                                    let iy = y + ky - 1;
                                    let drow = &mut dch[(ix * d.ish[1] + iy) * d.ish[2]..][..d.ish[2]];
                                    let grow = &gch[(x * d.osh[1] + y) * d.osh[2]..][..d.osh[2]];
                                    stencil3_row(drow, grow, w0, w1, w2);
                                }
                            }
                        }
                    }
                    continue;
                }
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let wv = w[(((co * d.ci + ci) * k + kx) * k + ky) * k + kz];
                            if d.stride == 1 {
                                let (xlo, xhi) = range_s1(d.osh[0], d.ish[0], kx, d.padding);
                                let (ylo, yhi) = range_s1(d.osh[1], d.ish[1], ky, d.padding);
                                let (zlo, zhi) = range_s1(d.osh[2], d.ish[2], kz, d.padding);
                                if zhi <= zlo {
                                    continue;
                                }
                                let zoff = zlo + kz - d.padding;
                                for x in xlo..xhi {
                                    let ix = x + kx - d.padding;
                                    for y in ylo..yhi {
                                        let iy = y + ky - d.padding;
                                        let grow = &gch[(x * d.osh[1] + y) * d.osh[2] + zlo..][..zhi - zlo];
                                        let drow = &mut dch[(ix * d.ish[1] + iy) * d.ish[2] + zoff..][..zhi - zlo];
                                        axpy(drow, wv, grow);
                                    }
                                }
                            } else {
                                let s = d.stride;
                                let (xlo, xhi) = range_strided(d.osh[0], d.ish[0], kx, d.padding, s);
                                let (ylo, yhi) = range_strided(d.osh[1], d.ish[1], ky, d.padding, s);
                                let (zlo, zhi) = range_strided(d.osh[2], d.ish[2], kz, d.padding, s);
                                for x in xlo..xhi {
                                    let ix = x * s + kx - d.padding;
                                    for y in ylo..yhi {
                                        let iy = y * s + ky - d.padding;
                                        let obase = (x * d.osh[1] + y) * d.osh[2];
                                        let ibase = (ix * d.ish[1] + iy) * d.ish[2];
                                        for z in zlo..zhi {
                                            let iz = z * s + kz - d.padding;
                                            dch[ibase + iz] += wv * gch[obase + z];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// All three z-tap dot products of a row pair in one pass:
/// `(Σ g[z]·i[z-1], Σ g[z]·i[z], Σ g[z]·i[z+1])` with edge clipping.
#[inline]
fn dot3(g: &[f64], i: &[f64]) -> (f64, f64, f64) {
    let n = g.len();
    debug_assert_eq!(i.len(), n);
    if n == 1 {
        return (0.0, g[0] * i[0], 0.0);
    }
    let (mut a0, mut b0, mut c0) = (0.0, 0.0, 0.0);
    let (mut a1, mut b1, mut c1) = (0.0, 0.0, 0.0);
    let gm = &g[1..n - 1];
    let il = &i[..n - 2];
    let im = &i[1..n - 1];
    let ir = &i[2..n];
    let mut z = 0;
    let m = gm.len();
    while z + 2 <= m {
        a0 += gm[z] * il[z];
        b0 += gm[z] * im[z];
        c0 += gm[z] * ir[z];
        a1 += gm[z + 1] * il[z + 1];
        b1 += gm[z + 1] * im[z + 1];
        c1 += gm[z + 1] * ir[z + 1];
        z += 2;
    }
    while z < m {
        a0 += gm[z] * il[z];
        b0 += gm[z] * im[z];
        c0 += gm[z] * ir[z];
        z += 1;
    }
    let mut d0 = a0 + a1;
    let mut d1 = b0 + b1;
    let mut d2 = c0 + c1;
    // edges: z = 0 contributes to d1, d2; z = n-1 contributes to d0, d1
    d1 += g[0] * i[0] + g[n - 1] * i[n - 1];
    d2 += g[0] * i[1];
    d0 += g[n - 1] * i[n - 2];
    (d0, d1, d2)
}

pub(crate) fn backward_weight_raw(gout: &[f64], inp: &[f64], d: &ConvDims) -> Vec<f64> {
    let (isp, osp) = (d.isp(), d.osp());
    let k = d.k;
    let fused3 = d.stride == 1 && k == 3 && d.padding == 1 && d.osh == d.ish;
    let mut dw = vec![0.0; d.co * d.ci * k * k * k];
    for b in 0..d.batch {
        for co in 0..d.co {
            let gch = &gout[(b * d.co + co) * osp..][..osp];
            for ci in 0..d.ci {
                let ich = &inp[(b * d.ci + ci) * isp..][..isp];
                if fused3 {
                    for kx in 0..3 {
                        let (xlo, xhi) = range_s1(d.osh[0], d.ish[0], kx, 1);
                        for ky in 0..3 {
                            let (ylo, yhi) = range_s1(d.osh[1], d.ish[1], ky, 1);
                            let wbase = (((co * d.ci + ci) * 3 + kx) * 3 + ky) * 3;
                            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                            for x in xlo..xhi {
                                let ix = x + kx - 1;
                                for y in ylo..yhi {
                                    let iy = y + ky - 1;
                                    let grow = &gch[(x * d.osh[1] + y) * d.osh[2]..][..d.osh[2]];
                                    let irow = &ich[(ix * d.ish[1] + iy) * d.ish[2]..][..d.ish[2]];
                                    let (d0, d1, d2) = dot3(grow, irow);
                                    s0 += d0;
                                    s1 += d1;
                                    s2 += d2;
                                }
                            }
                            dw[wbase] += s0;
                            dw[wbase + 1] += s1;
                            dw[wbase + 2] += s2;
                        }
                    }
                    continue;
                }
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let widx = (((co * d.ci + ci) * k + kx) * k + ky) * k + kz;
                            let mut acc = 0.0;
                            if d.stride == 1 {
                                let (xlo, xhi) = range_s1(d.osh[0], d.ish[0], kx, d.padding);
                                let (ylo, yhi) = range_s1(d.osh[1], d.ish[1], ky, d.padding);
                                let (zlo, zhi) = range_s1(d.osh[2], d.ish[2], kz, d.padding);
                                if zhi <= zlo {
                                    continue;
                                }
                                let zoff = zlo + kz - d.padding;
                                for x in xlo..xhi {
                                    let ix = x + kx - d.padding;
                                    for y in ylo..yhi {
                                        let iy = y + ky - d.padding;
                                        let grow = &gch[(x * d.osh[1] + y) * d.osh[2] + zlo..][..zhi - zlo];
                                        let irow = &ich[(ix * d.ish[1] + iy) * d.ish[2] + zoff..][..zhi - zlo];
                                        acc += dot(grow, irow);
                                    }
                                }
                            } else {
                                let s = d.stride;
                                let (xlo, xhi) = range_strided(d.osh[0], d.ish[0], kx, d.padding, s);
                                let (ylo, yhi) = range_strided(d.osh[1], d.ish[1], ky, d.padding, s);
                                let (zlo, zhi) = range_strided(d.osh[2], d.ish[2], kz, d.padding, s);
                                for x in xlo..xhi {
                                    let ix = x * s + kx - d.padding;
                                    for y in ylo..yhi {
                                        let iy = y * s + ky - d.padding;
                                        let obase = (x * d.osh[1] + y) * d.osh[2];
                                        let ibase = (ix * d.ish[1] + iy) * d.ish[2];
                                        for z in zlo..zhi {
                                            let iz = z * s + kz - d.padding;
                                            acc += gch[obase + z] * ich[ibase + iz];
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

pub(crate) fn backward_bias_raw(gout: &[f64], d: &ConvDims) -> Vec<f64> {
    let osp = d.osp();
    let mut db = vec![0.0; d.co];
    for b in 0..d.batch {
        for co in 0..d.co {
            let gch = &gout[(b * d.co + co) * osp..][..osp];
            let mut acc = 0.0;
            for &g in gch {
                acc += g;
            }
            db[co] += acc;
        }
    }
    db
}

/// 3D cross-correlation of `[B,Ci,H,W,D]` with `[Co,Ci,k,k,k]`.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let dims = validate(input, weight, bias, stride, padding)?;
    let data = input.with_data(|i| {
        weight.with_data(|w| match bias {
            Some(b) => b.with_data(|bs| forward_raw(i, w, Some(bs), &dims)),
            None => forward_raw(i, w, None, &dims),
        })
    });
    let shape = vec![dims.batch, dims.co, dims.osh[0], dims.osh[1], dims.osh[2]];
    Ok(Tensor::result_of(
        shape,
        data,
        Op::Conv3d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            stride,
            padding,
        },
    ))
}

pub(crate) fn conv_dims_of(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> ConvDims {
    let is = input.shape();
    let ws = weight.shape();
    let k = ws[2];
    let ext = |i: usize| (i + 2 * padding - k) / stride + 1;
    ConvDims {
        batch: is[0],
        ci: is[1],
        co: ws[0],
        k,
        ish: [is[2], is[3], is[4]],
        osh: [ext(is[2]), ext(is[3]), ext(is[4])],
        stride,
        padding,
    }
}
