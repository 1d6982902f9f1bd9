//! Stage-1 training objective: per-channel soft Dice plus binary
//! cross-entropy with weighted deep supervision, and the feature-vs-
//! attention self-distillation term.

use crate::backbone::NetOutput;
use crate::error::{Error, Result};
use crate::tensor::{InterpMode, Tensor};

pub const MINMAX_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Deep auxiliary head weight.
    pub lambda1: f64,
    /// Shallow auxiliary head weight.
    pub lambda2: f64,
    pub distill_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.4, lambda2: 0.2, distill_weight: 0.2, dice_smooth: 1e-5 }
    }
}

fn validate_pair(op: &'static str, logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            op,
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    if logits.shape().len() < 3 {
        return Err(Error::shape(op, format!("expected [B,C,spatial...], got {:?}", logits.shape())));
    }
    let bad = target.with_data(|d| d.iter().find(|v| **v != 0.0 && **v != 1.0).copied());
    if let Some(v) = bad {
        return Err(Error::domain(op, format!("target value {v} is not binary")));
    }
    Ok(())
}

/// Per-channel soft Dice loss over sigmoid probabilities:
/// `1 - mean_{b,c} (2*Σ p*y + eps) / (Σ p + Σ y + eps)`.
pub fn soft_dice(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    validate_pair("soft_dice", logits, target)?;
    let spatial: Vec<usize> = (2..logits.shape().len()).collect();
    let p = logits.sigmoid();
    let inter = p.mul(target)?.sum_axes(&spatial, false)?;
    let psum = p.sum_axes(&spatial, false)?;
    let ysum = target.sum_axes(&spatial, false)?;
    let frac = inter.mul_scalar(2.0).add_scalar(smooth).div(&psum.add(&ysum)?.add_scalar(smooth))?;
    Ok(frac.mean_all().neg().add_scalar(1.0))
}

/// Mean binary cross-entropy on logits, written with softplus so saturated
/// logits stay finite: `y*softplus(-x) + (1-y)*softplus(x)`.
pub fn binary_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    validate_pair("binary_cross_entropy", logits, target)?;
    let ones_minus = Tensor::from_vec(
        target.shape(),
        target.with_data(|d| d.iter().map(|y| 1.0 - y).collect()),
    )?;
    let pos = target.mul(&logits.neg().softplus())?;
    let neg = ones_minus.mul(&logits.softplus())?;
    Ok(pos.add(&neg)?.mean_all())
}

/// Combined segmentation loss: soft Dice + BCE.
pub fn dice_ce(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    soft_dice(logits, target, smooth)?.add(&binary_cross_entropy(logits, target)?)
}

/// Nearest-neighbor downsampling of a binary target to an aux resolution.
pub fn aux_target(target: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    target.detach().interp3d(dims, InterpMode::Nearest)
}

/// Main loss plus weighted auxiliary losses at their native resolutions.
pub fn seg_loss(out: &NetOutput, target: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let mut total = dice_ce(&out.logits_main, target, w.dice_smooth)?;
    let lambdas = [w.lambda1, w.lambda2];
    for (aux, lambda) in out.logits_aux.iter().zip(lambdas) {
        let dims = [aux.shape()[2], aux.shape()[3], aux.shape()[4]];
        let t = aux_target(target, dims)?;
        total = total.add(&dice_ce(aux, &t, w.dice_smooth)?.mul_scalar(lambda))?;
    }
    Ok(total)
}

/// Alignment between gated decoder feature magnitude and the attention map.
///
/// Per stage: the channel-wise L2 norm of the features and the resized
/// channel-mean attention are both min-max normalized per sample, and the
/// mean squared difference is taken over voxels; stages are summed.
pub fn distill_loss(gated: &[Tensor], att_mean: &Tensor) -> Result<Tensor> {
    if gated.is_empty() {
        return Err(Error::domain("distill_loss", "needs at least one gated stage".to_string()));
    }
    let mut total: Option<Tensor> = None;
    for stage in gated {
        let dims = [stage.shape()[2], stage.shape()[3], stage.shape()[4]];
        let feat_norm = stage.channel_l2_norm()?.minmax_norm(MINMAX_EPS)?;
        let att = att_mean.interp3d(dims, InterpMode::Trilinear)?.minmax_norm(MINMAX_EPS)?;
        let diff = feat_norm.sub(&att)?;
        let term = diff.mul(&diff)?.mean_all();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one stage"))
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub seg: f64,
    pub distill: Option<f64>,
}

/// Stage-1 objective: `seg + distill_weight * distill`. The distillation
/// term only exists when both the attention map and the gates are wired.
pub fn total_loss(out: &NetOutput, target: &Tensor, w: &LossWeights) -> Result<LossParts> {
    let seg = seg_loss(out, target, w)?;
    let seg_val = seg.item();
    match (&out.att_map, &out.att_mean) {
        (Some(_), Some(att_mean)) => {
            let distill = distill_loss(&out.gated, att_mean)?;
            let distill_val = distill.item();
            let total = seg.add(&distill.mul_scalar(w.distill_weight))?;
            Ok(LossParts { total, seg: seg_val, distill: Some(distill_val) })
        }
        _ => Ok(LossParts { total: seg, seg: seg_val, distill: None }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Model, ModelFlags, MODALITIES};
    use crate::rng::Rng;
    use crate::tensor::{grad_check, Tensor};

    fn binary_target(shape: &[usize], seed: u64, fill: f64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| if rng.uniform() < fill { 1.0 } else { 0.0 }).collect())
            .unwrap()
    }

    #[test]
    fn saturated_perfect_prediction_vanishes() {
        let y = binary_target(&[1, 3, 2, 2, 2], 1, 0.5);
        let logits = Tensor::from_vec(
            y.shape(),
            y.with_data(|d| d.iter().map(|v| if *v > 0.5 { 40.0 } else { -40.0 }).collect()),
        )
        .unwrap();
        let loss = dice_ce(&logits, &y, 1e-5).unwrap().item();
        assert!((0.0..1e-6).contains(&loss), "{loss}");
    }

    #[test]
    fn zero_logits_give_ln2_cross_entropy() {
        let y = binary_target(&[1, 1, 2, 2, 2], 2, 0.5);
        let logits = Tensor::zeros(y.shape());
        let ce = binary_cross_entropy(&logits, &y).unwrap().item();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15, "{ce}");
    }

    /// Independent scalar re-implementation of dice_ce.
    fn dice_ce_reference(logits: &[f64], target: &[f64], dims: (usize, usize, usize), eps: f64) -> f64 {
        let (b, c, sp) = dims;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let softplus = |x: f64| if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        let mut dice_acc = 0.0;
        for bi in 0..b {
            for ci in 0..c {
                let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
                for s in 0..sp {
                    let idx = (bi * c + ci) * sp + s;
                    let p = sigmoid(logits[idx]);
                    inter += p * target[idx];
                    ps += p;
                    ys += target[idx];
                }
                dice_acc += (2.0 * inter + eps) / (ps + ys + eps);
            }
        }
        let dice_loss = 1.0 - dice_acc / (b * c) as f64;
        let mut ce = 0.0;
        for i in 0..b * c * sp {
            ce += target[i] * softplus(-logits[i]) + (1.0 - target[i]) * softplus(logits[i]);
        }
        dice_loss + ce / (b * c * sp) as f64
    }

    #[test]
    fn dice_ce_matches_scalar_reference() {
        let mut rng = Rng::new(3);
        let shape = [2, 3, 2, 2, 2];
        let n: usize = shape.iter().product();
        let logits =
            Tensor::from_vec(&shape, (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap();
        let y = binary_target(&shape, 4, 0.4);
        let got = dice_ce(&logits, &y, 1e-5).unwrap().item();
        let want = logits.with_data(|l| y.with_data(|t| dice_ce_reference(l, t, (2, 3, 8), 1e-5)));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn dice_ce_rejects_non_binary_target() {
        let logits = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let y = Tensor::full(&[1, 1, 2, 2, 2], 0.3);
        assert!(matches!(dice_ce(&logits, &y, 1e-5), Err(crate::Error::Domain { .. })));
    }

    #[test]
    fn dice_ce_nonnegative_on_random_cases() {
        let mut rng = Rng::new(5);
        for seed in 0..10 {
            let shape = [1, 2, 3, 3, 3];
            let n: usize = shape.iter().product();
            let logits =
                Tensor::from_vec(&shape, (0..n).map(|_| rng.uniform_in(-5.0, 5.0)).collect())
                    .unwrap();
            let y = binary_target(&shape, seed, 0.5);
            assert!(dice_ce(&logits, &y, 1e-5).unwrap().item() >= 0.0);
        }
    }

    fn forward_small(seed: u64) -> (crate::backbone::NetOutput, Tensor) {
        let model = Model::new(ModelFlags::full(), seed);
        let mut rng = Rng::new(seed + 100);
        let n = MODALITIES * 8 * 8 * 8;
        let x = Tensor::from_vec(&[1, MODALITIES, 8, 8, 8], (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        let y = binary_target(&[1, 3, 8, 8, 8], seed + 200, 0.3);
        (model.forward(&x).unwrap(), y)
    }

    #[test]
    fn seg_loss_recomposes_from_parts() {
        let (out, y) = forward_small(7);
        let w = LossWeights::default();
        let main = dice_ce(&out.logits_main, &y, w.dice_smooth).unwrap().item();
        let t_deep = aux_target(&y, [1, 1, 1]).unwrap();
        let t_shallow = aux_target(&y, [2, 2, 2]).unwrap();
        let a1 = dice_ce(&out.logits_aux[0], &t_deep, w.dice_smooth).unwrap().item();
        let a2 = dice_ce(&out.logits_aux[1], &t_shallow, w.dice_smooth).unwrap().item();
        let got = seg_loss(&out, &y, &w).unwrap().item();
        let want = main + 0.4 * a1 + 0.2 * a2;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn zero_lambdas_reduce_to_main_loss() {
        let (out, y) = forward_small(8);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, ..LossWeights::default() };
        let got = seg_loss(&out, &y, &w).unwrap().item();
        let main = dice_ce(&out.logits_main, &y, w.dice_smooth).unwrap().item();
        assert_eq!(got, main);
    }

    #[test]
    fn perfect_main_and_aux_vanish() {
        let y = binary_target(&[1, 3, 8, 8, 8], 11, 0.4);
        let saturate = |t: &Tensor| {
            Tensor::from_vec(
                t.shape(),
                t.with_data(|d| d.iter().map(|v| if *v > 0.5 { 40.0 } else { -40.0 }).collect()),
            )
            .unwrap()
        };
        let t_deep = aux_target(&y, [1, 1, 1]).unwrap();
        let t_shallow = aux_target(&y, [2, 2, 2]).unwrap();
        let out = crate::backbone::NetOutput {
            logits_main: saturate(&y),
            logits_aux: vec![saturate(&t_deep), saturate(&t_shallow)],
            att_map: None,
            unc_map: None,
            att_mean: None,
            gated: vec![],
            head_input: Tensor::zeros(&[1, 1, 1, 1, 1]),
        };
        let v = seg_loss(&out, &y, &LossWeights::default()).unwrap().item();
        assert!(v < 1e-6, "{v}");
    }

    #[test]
    fn distill_is_scale_invariant_up_to_eps() {
        let mut rng = Rng::new(12);
        let n = 16 * 64;
        let feat =
            Tensor::from_vec(&[1, 16, 4, 4, 4], (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
                .unwrap();
        let att = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|_| rng.uniform_in(0.1, 0.9)).collect())
            .unwrap();
        let l1 = distill_loss(&[feat.clone()], &att).unwrap().item();
        let l2 = distill_loss(&[feat.mul_scalar(7.0)], &att).unwrap().item();
        // exact up to the 1e-6 epsilon in the min-max denominator
        assert!((l1 - l2).abs() < 1e-6, "{l1} vs {l2}");
    }

    #[test]
    fn constant_maps_distill_to_zero() {
        let feat = Tensor::full(&[1, 16, 4, 4, 4], 2.5);
        let att = Tensor::full(&[1, 1, 8, 8, 8], 0.7);
        assert_eq!(distill_loss(&[feat], &att).unwrap().item(), 0.0);
    }

    /// Independent scalar re-implementation for one stage at matching
    /// resolution.
    fn distill_reference(feat: &[f64], c: usize, sp: usize, att_resized: &[f64]) -> f64 {
        let mut norm = vec![0.0; sp];
        for s in 0..sp {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += feat[ci * sp + s] * feat[ci * sp + s];
            }
            norm[s] = acc.sqrt();
        }
        let minmax = |v: &[f64]| -> Vec<f64> {
            let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.iter().map(|x| (x - mn) / (mx - mn + MINMAX_EPS)).collect()
        };
        let a = minmax(&norm);
        let b = minmax(att_resized);
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / sp as f64
    }

    #[test]
    fn distill_matches_scalar_reference() {
        let mut rng = Rng::new(13);
        let feat = Tensor::from_vec(&[1, 3, 4, 4, 4], (0..192).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        let att = Tensor::from_vec(&[1, 1, 4, 4, 4], (0..64).map(|_| rng.uniform_in(0.2, 0.8)).collect())
            .unwrap();
        let got = distill_loss(&[feat.clone()], &att).unwrap().item();
        let want = feat.with_data(|f| att.with_data(|a| distill_reference(f, 3, 64, a)));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn total_loss_without_distill_weight_equals_seg() {
        let (out, y) = forward_small(14);
        let w = LossWeights { distill_weight: 0.0, ..LossWeights::default() };
        let parts = total_loss(&out, &y, &w).unwrap();
        let seg = seg_loss(&out, &y, &w).unwrap().item();
        assert_eq!(parts.total.item(), seg);
        assert!(parts.distill.is_some());
    }

    #[test]
    fn total_loss_finite_on_zero_input() {
        let model = Model::new(ModelFlags::full(), 15);
        let x = Tensor::zeros(&[1, MODALITIES, 8, 8, 8]);
        let y = binary_target(&[1, 3, 8, 8, 8], 16, 0.3);
        let out = model.forward(&x).unwrap();
        let parts = total_loss(&out, &y, &LossWeights::default()).unwrap();
        assert!(parts.total.item().is_finite());
    }

    #[test]
    fn gradcheck_total_loss_wrt_alpha_and_gamma() {
        let model = Model::new(ModelFlags::full(), 17);
        let mut rng = Rng::new(18);
        let n = MODALITIES * 8 * 8 * 8;
        let x = Tensor::from_vec(&[1, MODALITIES, 8, 8, 8], (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        let y = binary_target(&[1, 3, 8, 8, 8], 19, 0.3);
        let alpha = model.fusion.as_ref().unwrap().alpha.clone();
        // start from a nonzero alpha so the derivative is informative
        alpha.set_data(&[0.3]);
        let gamma = model.gates.as_ref().unwrap().gamma.clone();
        let f = {
            let (model, x, y) = (model.clone(), x.clone(), y.clone());
            move || {
                let out = model.forward(&x)?;
                Ok(total_loss(&out, &y, &LossWeights::default())?.total)
            }
        };
        let err = grad_check(&f, &[alpha, gamma], 1e-5).unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
