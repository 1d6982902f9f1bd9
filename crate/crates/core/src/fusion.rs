//! Input-level modality attention with a zero-initialized residual scale,
//! and the gated refinement of decoder features driven by that attention.

use crate::error::{Error, Result};
use crate::layers::Conv3dLayer;
use crate::rng::Rng;
use crate::tensor::{InterpMode, Tensor};

/// Attention recalibration of the input modalities.
///
/// `fused = x + alpha * (x ⊙ att_map)` with `alpha` starting at exactly 0,
/// so an untrained module is an identity mapping. The companion
/// `unc_map` is produced and surfaced for logging but feeds no loss.
#[derive(Debug, Clone)]
pub struct ModalityFusion {
    pub enc1: Conv3dLayer,
    pub enc2: Conv3dLayer,
    pub att_head: Conv3dLayer,
    pub unc_head: Conv3dLayer,
    pub alpha: Tensor,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Tensor,
    /// Per-modality spatial attention in (0, 1), shape `[B, C, S, S, S]`.
    pub att_map: Tensor,
    /// Voxel-wise guidance map in (0, 1), shape `[B, 1, S, S, S]`.
    pub unc_map: Tensor,
}

pub const FUSION_HIDDEN: usize = 8;

impl ModalityFusion {
    pub fn new(modalities: usize, rng: &mut Rng) -> ModalityFusion {
        ModalityFusion {
            enc1: Conv3dLayer::new(modalities, FUSION_HIDDEN, 3, 1, 1, rng),
            enc2: Conv3dLayer::new(FUSION_HIDDEN, FUSION_HIDDEN, 3, 1, 1, rng),
            att_head: Conv3dLayer::new(FUSION_HIDDEN, modalities, 1, 1, 0, rng),
            unc_head: Conv3dLayer::new(FUSION_HIDDEN, 1, 1, 1, 0, rng),
            alpha: Tensor::scalar_param(0.0),
        }
    }

    pub fn with_alpha(modalities: usize, alpha_init: f64, rng: &mut Rng) -> ModalityFusion {
        let mut m = ModalityFusion::new(modalities, rng);
        m.alpha = Tensor::scalar_param(alpha_init);
        m
    }

    pub fn forward(&self, x: &Tensor) -> Result<FusionOutput> {
        let expected = self.att_head.out_channels();
        if x.shape().len() != 5 || x.shape()[1] != expected {
            return Err(Error::shape(
                "modality_fusion",
                format!("input {:?} does not carry {expected} modality channels", x.shape()),
            ));
        }
        let f = self.enc1.forward(x)?.relu();
        let f = self.enc2.forward(&f)?.relu();
        let att_map = self.att_head.forward(&f)?.sigmoid();
        let unc_map = self.unc_head.forward(&f)?.sigmoid();
        let fused = x.add(&self.alpha.mul(&x.mul(&att_map)?)?)?;
        Ok(FusionOutput { fused, att_map, unc_map })
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        self.enc1.collect_params("fusion.enc1", out);
        self.enc2.collect_params("fusion.enc2", out);
        self.att_head.collect_params("fusion.att_head", out);
        self.unc_head.collect_params("fusion.unc_head", out);
        out.push(("fusion.alpha".to_string(), self.alpha.clone()));
    }
}

/// Channel mean of the attention map, `[B, C, ...] -> [B, 1, ...]`.
pub fn attention_channel_mean(att_map: &Tensor) -> Result<Tensor> {
    att_map.mean_axes(&[1], true)
}

/// Spatially constant stand-in attention (post-sigmoid neutral 0.5) for
/// wirings where gating runs without the fusion module.
pub fn neutral_attention(batch: usize, size: usize) -> Tensor {
    Tensor::full(&[batch, 1, size, size, size], 0.5)
}

/// Multiplicative residual gates on decoder features.
///
/// Stage `i` applies `d ⊙ (1 + gamma * sigmoid(proj_i(resize(att_mean))))`
/// with one 1x1x1 projection per gated stage and a single shared `gamma`
/// initialized to 0.1.
#[derive(Debug, Clone)]
pub struct DecoderGates {
    pub projs: Vec<Conv3dLayer>,
    pub gamma: Tensor,
}

pub const GAMMA_INIT: f64 = 0.1;

impl DecoderGates {
    pub fn new(stage_channels: &[usize], rng: &mut Rng) -> DecoderGates {
        DecoderGates {
            projs: stage_channels.iter().map(|&c| Conv3dLayer::new(1, c, 1, 1, 0, rng)).collect(),
            gamma: Tensor::scalar_param(GAMMA_INIT),
        }
    }

    pub fn stages(&self) -> usize {
        self.projs.len()
    }

    /// Gate decoder features of one stage with the (resized) attention map.
    pub fn gate(&self, stage: usize, features: &Tensor, att_mean: &Tensor) -> Result<Tensor> {
        let proj = self.projs.get(stage).ok_or_else(|| {
            Error::config(format!("gate stage {stage} has no registered projection ({} stages)", self.projs.len()))
        })?;
        let dims = [features.shape()[2], features.shape()[3], features.shape()[4]];
        let resized = att_mean.interp3d(dims, InterpMode::Trilinear)?;
        let squashed = proj.forward(&resized)?.sigmoid();
        let gate = self.gamma.mul(&squashed)?.add_scalar(1.0);
        features.mul(&gate)
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, p) in self.projs.iter().enumerate() {
            p.collect_params(&format!("gates.proj{i}"), out);
        }
        out.push(("gates.gamma".to_string(), self.gamma.clone()));
    }
}
