//! Finite-difference verification of analytic gradients.

use super::{backward, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn forward_value(f: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    let out = f()?;
    if out.numel() != 1 {
        return Err(Error::shape("grad_check", format!("f must be scalar-valued, got shape {:?}", out.shape())));
    }
    Ok(out.item())
}

/// Max relative error between analytic gradients of `f` and central finite
/// differences, over every element of every tensor in `params`.
///
/// Relative error is `|analytic - numeric| / max(1e-12, |numeric|)`.
pub fn grad_check(f: &dyn Fn() -> Result<Tensor>, params: &[Tensor], h: f64) -> Result<f64> {
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    grad_check_at(f, params, h, &all)
}

/// Like [`grad_check`] but verifying at most `max_per_param` randomly chosen
/// elements per tensor. Keeps composite-model checks affordable.
pub fn grad_check_sampled(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[Tensor],
    h: f64,
    max_per_param: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let n = p.numel();
            if n <= max_per_param {
                (0..n).collect()
            } else {
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                idx.truncate(max_per_param);
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    grad_check_at(f, params, h, &picks)
}

/// Like [`grad_check_sampled`], but only verifies elements whose analytic
/// gradient magnitude is at least `min_grad`. With a loss of magnitude L,
/// central differences at step h carry roundoff noise of order
/// eps*L/h in the derivative, so elements below that floor cannot be
/// certified by finite differences at all.
pub fn grad_check_above(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[Tensor],
    h: f64,
    min_grad: f64,
    max_per_param: usize,
    rng: &mut Rng,
) -> Result<f64> {
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut idx: Vec<usize> =
                (0..p.numel()).filter(|&i| g[i].abs() >= min_grad).collect();
            if idx.len() > max_per_param {
                rng.shuffle(&mut idx);
                idx.truncate(max_per_param);
                idx.sort_unstable();
            }
            idx
        })
        .collect();
    for p in params {
        p.zero_grad();
    }
    grad_check_at(f, params, h, &picks)
}

fn grad_check_at(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[Tensor],
    h: f64,
    element_sets: &[Vec<usize>],
) -> Result<f64> {
    // Determinism guard: two identical forwards must agree bitwise.
    let v1 = forward_value(f)?;
    let v2 = forward_value(f)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::domain(
            "grad_check",
            format!("f is not deterministic: {v1} vs {v2} on identical inputs"),
        ));
    }

    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for &ei in &element_sets[pi] {
            let orig = p.with_data(|d| d[ei]);
            set_elem(p, ei, orig + h);
            let fp = forward_value(f)?;
            set_elem(p, ei, orig - h);
            let fm = forward_value(f)?;
            set_elem(p, ei, orig);
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[pi][ei] - numeric).abs() / numeric.abs().max(1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}

fn set_elem(t: &Tensor, idx: usize, value: f64) {
    t.inner.data.borrow_mut()[idx] = value;
}
