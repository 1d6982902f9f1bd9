//! Reverse-mode backward pass.
//!
//! Gradients are propagated in reverse topological order with a fixed
//! accumulation sequence, so repeated runs produce bit-identical grads.

use std::collections::{HashMap, HashSet};

use super::conv::{backward_bias_raw, backward_input_raw, backward_weight_raw, conv_dims_of};
use super::ops::{sigmoid_scalar, trilinear_axis_map, ReducePlan};
use super::{Op, Tensor};
use crate::error::{Error, Result};

fn topo_sort(root: &Tensor) -> Vec<Tensor> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Tensor> = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, idx)) = stack.pop() {
        let parents: Vec<Tensor> = t
            .inner
            .op
            .as_ref()
            .map(|o| o.parents().into_iter().cloned().collect())
            .unwrap_or_default();
        if idx < parents.len() {
            stack.push((t, idx + 1));
            let p = parents[idx].clone();
            if p.inner.requires_grad && visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

struct GradSink {
    map: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    fn add_to(&mut self, t: &Tensor, g: Vec<f64>) {
        if !t.inner.requires_grad {
            return;
        }
        match self.map.get_mut(&t.id()) {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(t.id(), g);
            }
        }
    }
}

/// Grad of a broadcast operand: full shape passes through, single-element
/// operands receive the sum.
fn unbroadcast(t: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if t.numel() == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

/// Accumulate gradients of a scalar loss into every reachable
/// `requires_grad` tensor. Repeat calls accumulate until grads are cleared.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", loss.shape())));
    }
    if !loss.inner.requires_grad {
        return Err(Error::domain(
            "backward",
            "loss is not reachable from any requires_grad tensor".to_string(),
        ));
    }
    let order = topo_sort(loss);
    let mut sink = GradSink { map: HashMap::new() };
    sink.map.insert(loss.id(), vec![1.0]);

    for node in order.iter().rev() {
        let g = match sink.map.remove(&node.id()) {
            Some(g) => g,
            None => continue,
        };
        node.accumulate_grad(&g);
        let op = match &node.inner.op {
            Some(op) => op.clone(),
            None => continue,
        };
        propagate(node, &op, &g, &mut sink);
    }
    Ok(())
}

fn broadcast_pair(a: &Tensor, b: &Tensor, g: &[f64], f: impl Fn(f64, f64, f64) -> (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let ad = a.inner.data.borrow();
    let bd = b.inner.data.borrow();
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let n = g.len();
    for i in 0..n {
        let av = if ad.len() == 1 { ad[0] } else { ad[i] };
        let bv = if bd.len() == 1 { bd[0] } else { bd[i] };
        let (da, db) = f(g[i], av, bv);
        if ad.len() == 1 {
            ga[0] += da;
        } else {
            ga[i] += da;
        }
        if bd.len() == 1 {
            gb[0] += db;
        } else {
            gb[i] += db;
        }
    }
    (ga, gb)
}

fn propagate(node: &Tensor, op: &Op, g: &[f64], sink: &mut GradSink) {
    match op {
        Op::Add(a, b) => {
            sink.add_to(a, unbroadcast(a, g.to_vec()));
            sink.add_to(b, unbroadcast(b, g.to_vec()));
        }
        Op::Sub(a, b) => {
            sink.add_to(a, unbroadcast(a, g.to_vec()));
            sink.add_to(b, unbroadcast(b, g.iter().map(|x| -x).collect()));
        }
        Op::Mul(a, b) => {
            let (ga, gb) = broadcast_pair(a, b, g, |gi, av, bv| (gi * bv, gi * av));
            sink.add_to(a, ga);
            sink.add_to(b, gb);
        }
        Op::Div(a, b) => {
            let (ga, gb) = broadcast_pair(a, b, g, |gi, av, bv| (gi / bv, -gi * av / (bv * bv)));
            sink.add_to(a, ga);
            sink.add_to(b, gb);
        }
        Op::Neg(a) => sink.add_to(a, g.iter().map(|x| -x).collect()),
        Op::AddScalar(a) => sink.add_to(a, g.to_vec()),
        Op::MulScalar(a, c) => sink.add_to(a, g.iter().map(|x| x * c).collect()),
        Op::Sigmoid(a) => {
            let out = node.inner.data.borrow();
            sink.add_to(a, g.iter().zip(out.iter()).map(|(gi, p)| gi * p * (1.0 - p)).collect());
        }
        Op::Relu(a) => {
            let x = a.inner.data.borrow();
            sink.add_to(a, g.iter().zip(x.iter()).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect());
        }
        Op::Softplus(a) => {
            let x = a.inner.data.borrow();
            sink.add_to(a, g.iter().zip(x.iter()).map(|(gi, xi)| gi * sigmoid_scalar(*xi)).collect());
        }
        Op::Exp(a) => {
            let out = node.inner.data.borrow();
            sink.add_to(a, g.iter().zip(out.iter()).map(|(gi, e)| gi * e).collect());
        }
        Op::Log(a) => {
            let x = a.inner.data.borrow();
            sink.add_to(a, g.iter().zip(x.iter()).map(|(gi, xi)| gi / xi).collect());
        }
        Op::Conv3d { input, weight, bias, stride, padding } => {
            let dims = conv_dims_of(input, weight, *stride, *padding);
            if input.inner.requires_grad {
                let din = weight.with_data(|w| backward_input_raw(g, w, &dims));
                sink.add_to(input, din);
            }
            if weight.inner.requires_grad {
                let dw = input.with_data(|i| backward_weight_raw(g, i, &dims));
                sink.add_to(weight, dw);
            }
            if let Some(b) = bias {
                if b.inner.requires_grad {
                    sink.add_to(b, backward_bias_raw(g, &dims));
                }
            }
        }
        Op::InterpNearest { input, dims } => {
            let ish = [input.shape()[2], input.shape()[3], input.shape()[4]];
            let channels = input.shape()[0] * input.shape()[1];
            let isp = ish[0] * ish[1] * ish[2];
            let osp = dims[0] * dims[1] * dims[2];
            let map_axis = |out_n: usize, in_n: usize| -> Vec<usize> {
                let scale = in_n as f64 / out_n as f64;
                (0..out_n).map(|o| (((o as f64) * scale).floor() as usize).min(in_n - 1)).collect()
            };
            let mx = map_axis(dims[0], ish[0]);
            let my = map_axis(dims[1], ish[1]);
            let mz = map_axis(dims[2], ish[2]);
            let mut din = vec![0.0; channels * isp];
            for ch in 0..channels {
                let gch = &g[ch * osp..][..osp];
                let dch = &mut din[ch * isp..][..isp];
                let mut gi = 0;
                for ox in 0..dims[0] {
                    for oy in 0..dims[1] {
                        let base = (mx[ox] * ish[1] + my[oy]) * ish[2];
                        for oz in 0..dims[2] {
                            dch[base + mz[oz]] += gch[gi];
                            gi += 1;
                        }
                    }
                }
            }
            sink.add_to(input, din);
        }
        Op::InterpTrilinear { input, dims } => {
            let ish = [input.shape()[2], input.shape()[3], input.shape()[4]];
            let channels = input.shape()[0] * input.shape()[1];
            let isp = ish[0] * ish[1] * ish[2];
            let osp = dims[0] * dims[1] * dims[2];
            let mx = trilinear_axis_map(dims[0], ish[0]);
            let my = trilinear_axis_map(dims[1], ish[1]);
            let mz = trilinear_axis_map(dims[2], ish[2]);
            let mut din = vec![0.0; channels * isp];
            for ch in 0..channels {
                let gch = &g[ch * osp..][..osp];
                let dch = &mut din[ch * isp..][..isp];
                let mut gi = 0;
                for &(x0, x1, wx) in &mx {
                    for &(y0, y1, wy) in &my {
                        for &(z0, z1, wz) in &mz {
                            let gv = gch[gi];
                            gi += 1;
                            let w000 = (1.0 - wx) * (1.0 - wy) * (1.0 - wz);
                            let w001 = (1.0 - wx) * (1.0 - wy) * wz;
                            let w010 = (1.0 - wx) * wy * (1.0 - wz);
                            let w011 = (1.0 - wx) * wy * wz;
                            let w100 = wx * (1.0 - wy) * (1.0 - wz);
                            let w101 = wx * (1.0 - wy) * wz;
                            let w110 = wx * wy * (1.0 - wz);
                            let w111 = wx * wy * wz;
                            dch[(x0 * ish[1] + y0) * ish[2] + z0] += gv * w000;
                            dch[(x0 * ish[1] + y0) * ish[2] + z1] += gv * w001;
                            dch[(x0 * ish[1] + y1) * ish[2] + z0] += gv * w010;
                            dch[(x0 * ish[1] + y1) * ish[2] + z1] += gv * w011;
                            dch[(x1 * ish[1] + y0) * ish[2] + z0] += gv * w100;
                            dch[(x1 * ish[1] + y0) * ish[2] + z1] += gv * w101;
                            dch[(x1 * ish[1] + y1) * ish[2] + z0] += gv * w110;
                            dch[(x1 * ish[1] + y1) * ish[2] + z1] += gv * w111;
                        }
                    }
                }
            }
            sink.add_to(input, din);
        }
        Op::Sum { input, axes, keepdims } => {
            let plan = ReducePlan::new("sum", input.shape(), axes, *keepdims).expect("validated at forward");
            let mut din = vec![0.0; input.numel()];
            plan.for_each(|i, o| din[i] = g[o]);
            sink.add_to(input, din);
        }
        Op::Mean { input, axes, keepdims } => {
            let plan = ReducePlan::new("mean", input.shape(), axes, *keepdims).expect("validated at forward");
            let inv = 1.0 / plan.group as f64;
            let mut din = vec![0.0; input.numel()];
            plan.for_each(|i, o| din[i] = g[o] * inv);
            sink.add_to(input, din);
        }
        Op::Var { input, axes, keepdims } => {
            let plan = ReducePlan::new("var", input.shape(), axes, *keepdims).expect("validated at forward");
            let n = plan.group as f64;
            let x = input.inner.data.borrow();
            let mut mean = vec![0.0; plan.out_numel];
            plan.for_each(|i, o| mean[o] += x[i]);
            for m in mean.iter_mut() {
                *m /= n;
            }
            let mut din = vec![0.0; input.numel()];
            plan.for_each(|i, o| din[i] = g[o] * 2.0 * (x[i] - mean[o]) / n);
            drop(x);
            sink.add_to(input, din);
        }
        Op::Min { input, axes, keepdims } | Op::Max { input, axes, keepdims } => {
            let want_max = matches!(op, Op::Max { .. });
            let plan = ReducePlan::new("minmax", input.shape(), axes, *keepdims).expect("validated at forward");
            let x = input.inner.data.borrow();
            let args = plan.arg_extremum(&x, want_max);
            drop(x);
            let mut din = vec![0.0; input.numel()];
            for (o, &i) in args.iter().enumerate() {
                din[i] += g[o];
            }
            sink.add_to(input, din);
        }
        Op::ChannelL2Norm(input) => {
            let (b, c) = (input.shape()[0], input.shape()[1]);
            let sp: usize = input.shape()[2..].iter().product();
            let x = input.inner.data.borrow();
            let out = node.inner.data.borrow();
            let mut din = vec![0.0; input.numel()];
            for bi in 0..b {
                for ci in 0..c {
                    for s in 0..sp {
                        let n = out[bi * sp + s];
                        if n > 0.0 {
                            din[(bi * c + ci) * sp + s] = g[bi * sp + s] * x[(bi * c + ci) * sp + s] / n;
                        }
                    }
                }
            }
            drop(x);
            drop(out);
            sink.add_to(input, din);
        }
        Op::ChannelSoftmax(input) => {
            let (b, c) = (input.shape()[0], input.shape()[1]);
            let sp: usize = input.shape()[2..].iter().product();
            let p = node.inner.data.borrow();
            let mut din = vec![0.0; input.numel()];
            for bi in 0..b {
                for s in 0..sp {
                    let mut gp = 0.0;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * sp + s;
                        gp += g[idx] * p[idx];
                    }
                    for ci in 0..c {
                        let idx = (bi * c + ci) * sp + s;
                        din[idx] = p[idx] * (g[idx] - gp);
                    }
                }
            }
            drop(p);
            sink.add_to(input, din);
        }
        Op::MinMaxNorm { input, eps } => {
            let b = input.shape()[0];
            let sp: usize = input.shape()[1..].iter().product();
            let x = input.inner.data.borrow();
            let out = node.inner.data.borrow();
            let mut din = vec![0.0; input.numel()];
            for bi in 0..b {
                let block = &x[bi * sp..][..sp];
                let gblk = &g[bi * sp..][..sp];
                let nblk = &out[bi * sp..][..sp];
                let mut imin = 0;
                let mut imax = 0;
                for (i, &v) in block.iter().enumerate() {
                    if v < block[imin] {
                        imin = i;
                    }
                    if v > block[imax] {
                        imax = i;
                    }
                }
                let denom = block[imax] - block[imin] + eps;
                let gsum: f64 = gblk.iter().sum();
                let gn: f64 = gblk.iter().zip(nblk).map(|(gi, ni)| gi * ni).sum();
                let dblk = &mut din[bi * sp..][..sp];
                for (d, gi) in dblk.iter_mut().zip(gblk) {
                    *d = gi / denom;
                }
                dblk[imin] -= gsum / denom;
                dblk[imax] -= gn / denom;
                dblk[imin] += gn / denom;
            }
            drop(x);
            drop(out);
            sink.add_to(input, din);
        }
        Op::Concat { parts, axis } => {
            let shape = node.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total_axis = shape[*axis];
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[*axis];
                if p.inner.requires_grad {
                    let mut gp = vec![0.0; p.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * pa * inner;
                        gp[dst..dst + pa * inner].copy_from_slice(&g[src..src + pa * inner]);
                    }
                    sink.add_to(p, gp);
                }
                offset += pa;
            }
        }
    }
}
