//! Compact 3-stage convolutional encoder-decoder with skip connections,
//! auxiliary heads on the two coarsest decoding resolutions, and optional
//! fusion/gating wiring.
//!
//! Resolutions for input size S (S divisible by 8):
//!   encoder stages at S, S/2, S/4; bottleneck at S/8.
//!   Auxiliary logits come from the bottleneck output (64 ch, S/8) and the
//!   first decoder stage (32 ch, S/4); the main head runs at S.

use crate::error::{Error, Result};
use crate::fusion::{attention_channel_mean, neutral_attention, DecoderGates, ModalityFusion};
use crate::layers::{Conv3dLayer, ConvBlock};
use crate::rng::Rng;
use crate::tensor::{concat, InterpMode, Tensor};

pub const MODALITIES: usize = 4;
pub const REGIONS: usize = 3;
pub const ENC_CHANNELS: [usize; 3] = [16, 32, 64];
/// Output channels of the three gated decoder stages (S/4, S/2, S).
pub const DEC_CHANNELS: [usize; 3] = [32, 16, 16];
/// Bias of the segmentation heads at init; negative so fresh models favor
/// background, which is the majority class.
const HEAD_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelFlags {
    pub use_fusion: bool,
    pub use_gates: bool,
}

impl ModelFlags {
    pub fn full() -> Self {
        ModelFlags { use_fusion: true, use_gates: true }
    }

    pub fn baseline() -> Self {
        ModelFlags { use_fusion: false, use_gates: false }
    }

    pub fn label(&self) -> &'static str {
        match (self.use_fusion, self.use_gates) {
            (false, false) => "baseline",
            (true, false) => "fusion_only",
            (false, true) => "gates_only",
            (true, true) => "full",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub enc: [ConvBlock; 3],
    pub down: [Conv3dLayer; 3],
    pub bottleneck: ConvBlock,
    pub dec: [ConvBlock; 3],
    pub main_head: Conv3dLayer,
    /// 64 -> 3 at S/8 (bottleneck output).
    pub aux_head_deep: Conv3dLayer,
    /// 32 -> 3 at S/4 (first decoder stage).
    pub aux_head_shallow: Conv3dLayer,
}

impl Backbone {
    pub fn new(rng: &mut Rng) -> Backbone {
        let [c1, c2, c3] = ENC_CHANNELS;
        let [d1, d2, d3] = DEC_CHANNELS;
        Backbone {
            enc: [
                ConvBlock::new(MODALITIES, c1, rng),
                ConvBlock::new(c2, c2, rng),
                ConvBlock::new(c3, c3, rng),
            ],
            down: [
                Conv3dLayer::new(c1, c2, 3, 2, 1, rng),
                Conv3dLayer::new(c2, c3, 3, 2, 1, rng),
                Conv3dLayer::new(c3, c3, 3, 2, 1, rng),
            ],
            bottleneck: ConvBlock::new(c3, c3, rng),
            dec: [
                ConvBlock::new(c3 + c3, d1, rng),
                ConvBlock::new(d1 + c2, d2, rng),
                ConvBlock::new(d2 + c1, d3, rng),
            ],
            main_head: Conv3dLayer::with_bias(d3, REGIONS, 1, 1, 0, HEAD_BIAS_INIT, rng),
            aux_head_deep: Conv3dLayer::with_bias(c3, REGIONS, 1, 1, 0, HEAD_BIAS_INIT, rng),
            aux_head_shallow: Conv3dLayer::with_bias(d1, REGIONS, 1, 1, 0, HEAD_BIAS_INIT, rng),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.enc.iter().enumerate() {
            b.collect_params(&format!("backbone.enc{}", i + 1), out);
        }
        for (i, d) in self.down.iter().enumerate() {
            d.collect_params(&format!("backbone.down{}", i + 1), out);
        }
        self.bottleneck.collect_params("backbone.bottleneck", out);
        for (i, b) in self.dec.iter().enumerate() {
            b.collect_params(&format!("backbone.dec{}", i + 1), out);
        }
        self.main_head.collect_params("backbone.main_head", out);
        self.aux_head_deep.collect_params("backbone.aux_deep", out);
        self.aux_head_shallow.collect_params("backbone.aux_shallow", out);
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits_main: Tensor,
    /// Deep (S/8) first, then shallow (S/4).
    pub logits_aux: Vec<Tensor>,
    pub att_map: Option<Tensor>,
    pub unc_map: Option<Tensor>,
    /// Channel-mean attention actually used by the gates, if any.
    pub att_mean: Option<Tensor>,
    /// Gated decoder features, one per decoder stage.
    pub gated: Vec<Tensor>,
    /// Input of the main head (full-resolution decoder features).
    pub head_input: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub flags: ModelFlags,
    pub fusion: Option<ModalityFusion>,
    pub gates: Option<DecoderGates>,
    pub backbone: Backbone,
}

impl Model {
    /// Component init streams are derived per component, so two models
    /// built from the same seed share backbone weights regardless of flags.
    pub fn new(flags: ModelFlags, seed: u64) -> Model {
        Model::with_alpha(flags, seed, 0.0)
    }

    pub fn with_alpha(flags: ModelFlags, seed: u64, alpha_init: f64) -> Model {
        let fusion = flags
            .use_fusion
            .then(|| ModalityFusion::with_alpha(MODALITIES, alpha_init, &mut Rng::derived(seed, 1)));
        let gates = flags.use_gates.then(|| DecoderGates::new(&DEC_CHANNELS, &mut Rng::derived(seed, 3)));
        let backbone = Backbone::new(&mut Rng::derived(seed, 2));
        Model { flags, fusion, gates, backbone }
    }

    /// Same parameters, different wiring. Requires the components the new
    /// flags ask for to exist on `self`.
    pub fn ablation_view(&self, flags: ModelFlags) -> Result<Model> {
        if flags.use_fusion && self.fusion.is_none() {
            return Err(Error::config("view needs a fusion module the model lacks".to_string()));
        }
        if flags.use_gates && self.gates.is_none() {
            return Err(Error::config("view needs gate modules the model lacks".to_string()));
        }
        Ok(Model {
            flags,
            fusion: flags.use_fusion.then(|| self.fusion.clone().expect("checked above")),
            gates: flags.use_gates.then(|| self.gates.clone().expect("checked above")),
            backbone: self.backbone.clone(),
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(f) = &self.fusion {
            f.collect_params(&mut out);
        }
        self.backbone.collect_params(&mut out);
        if let Some(g) = &self.gates {
            g.collect_params(&mut out);
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn alpha(&self) -> Option<f64> {
        self.fusion.as_ref().map(|f| f.alpha.item())
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gates.as_ref().map(|g| g.gamma.item())
    }

    pub fn forward(&self, x: &Tensor) -> Result<NetOutput> {
        if x.shape().len() != 5 || x.shape()[1] != MODALITIES {
            return Err(Error::shape("model_forward", format!("expected [B,{MODALITIES},S,S,S], got {:?}", x.shape())));
        }
        let s = x.shape()[2];
        if x.shape()[3] != s || x.shape()[4] != s {
            return Err(Error::config(format!("volume must be cubic, got {:?}", &x.shape()[2..])));
        }
        if s % 8 != 0 || s == 0 {
            return Err(Error::config(format!("spatial size {s} not divisible by 8")));
        }
        let batch = x.shape()[0];

        // input recalibration
        let (fused, att_map, unc_map) = match &self.fusion {
            Some(f) => {
                let out = f.forward(x)?;
                (out.fused, Some(out.att_map), Some(out.unc_map))
            }
            None => (x.clone(), None, None),
        };

        // encoder, keeping skips
        let e1 = self.backbone.enc[0].forward(&fused)?;
        let e2 = self.backbone.enc[1].forward(&self.backbone.down[0].forward(&e1)?)?;
        let e3 = self.backbone.enc[2].forward(&self.backbone.down[1].forward(&e2)?)?;
        let b0 = self.backbone.bottleneck.forward(&self.backbone.down[2].forward(&e3)?)?;

        let att_mean = match (&self.gates, &att_map) {
            (Some(_), Some(att)) => Some(attention_channel_mean(att)?),
            (Some(_), None) => Some(neutral_attention(batch, s)),
            (None, _) => None,
        };

        let aux_deep = self.backbone.aux_head_deep.forward(&b0)?;

        let mut gated = Vec::with_capacity(3);
        let mut apply_gate = |stage: usize, features: Tensor| -> Result<Tensor> {
            let refined = match (&self.gates, &att_mean) {
                (Some(g), Some(m)) => g.gate(stage, &features, m)?,
                _ => features,
            };
            gated.push(refined.clone());
            Ok(refined)
        };

        // decoder: upsample, concat skip, conv block, gate
        let up1 = b0.interp3d([s / 4, s / 4, s / 4], InterpMode::Trilinear)?;
        let d1 = self.backbone.dec[0].forward(&concat(&[up1, e3], 1)?)?;
        let r1 = apply_gate(0, d1)?;
        let aux_shallow = self.backbone.aux_head_shallow.forward(&r1)?;

        let up2 = r1.interp3d([s / 2, s / 2, s / 2], InterpMode::Trilinear)?;
        let d2 = self.backbone.dec[1].forward(&concat(&[up2, e2], 1)?)?;
        let r2 = apply_gate(1, d2)?;

        let up3 = r2.interp3d([s, s, s], InterpMode::Trilinear)?;
        let d3 = self.backbone.dec[2].forward(&concat(&[up3, e1], 1)?)?;
        let r3 = apply_gate(2, d3)?;

        let logits_main = self.backbone.main_head.forward(&r3)?;

        Ok(NetOutput {
            logits_main,
            logits_aux: vec![aux_deep, aux_shallow],
            att_map,
            unc_map,
            att_mean,
            gated,
            head_input: r3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(batch: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = batch * MODALITIES * s * s * s;
        Tensor::from_vec(&[batch, MODALITIES, s, s, s], (0..n).map(|_| rng.uniform_in(-1.5, 1.5)).collect())
            .unwrap()
    }

    #[test]
    fn output_shapes_match_contract() {
        let model = Model::new(ModelFlags::full(), 7);
        let x = random_volume(2, 16, 1);
        let out = model.forward(&x).unwrap();
        assert_eq!(out.logits_main.shape(), &[2, 3, 16, 16, 16]);
        assert_eq!(out.logits_aux[0].shape(), &[2, 3, 2, 2, 2]);
        assert_eq!(out.logits_aux[1].shape(), &[2, 3, 4, 4, 4]);
        assert_eq!(out.gated.len(), 3);
        assert_eq!(out.head_input.shape(), &[2, 16, 16, 16, 16]);
    }

    #[test]
    fn zero_init_fusion_and_zero_gamma_match_plain_backbone_bitwise() {
        let model = Model::new(ModelFlags::full(), 21);
        model.gates.as_ref().unwrap().gamma.set_data(&[0.0]);
        let plain = model.ablation_view(ModelFlags::baseline()).unwrap();
        for seed in 0..10 {
            let x = random_volume(1, 16, 100 + seed);
            let a = model.forward(&x).unwrap();
            let b = plain.forward(&x).unwrap();
            assert!(a.logits_main.bit_eq(&b.logits_main), "seed {seed}");
            assert!(a.logits_aux[0].bit_eq(&b.logits_aux[0]));
            assert!(a.logits_aux[1].bit_eq(&b.logits_aux[1]));
        }
    }

    #[test]
    fn batch_of_two_equals_two_batches_of_one() {
        let model = Model::new(ModelFlags::full(), 3);
        let x = random_volume(2, 16, 9);
        let full = model.forward(&x).unwrap();
        let xd = x.to_vec();
        let half = xd.len() / 2;
        let x0 = Tensor::from_vec(&[1, MODALITIES, 16, 16, 16], xd[..half].to_vec()).unwrap();
        let x1 = Tensor::from_vec(&[1, MODALITIES, 16, 16, 16], xd[half..].to_vec()).unwrap();
        let o0 = model.forward(&x0).unwrap();
        let o1 = model.forward(&x1).unwrap();
        let mut joined = o0.logits_main.to_vec();
        joined.extend(o1.logits_main.to_vec());
        let full_bits: Vec<u64> = full.logits_main.to_vec().iter().map(|v| v.to_bits()).collect();
        let join_bits: Vec<u64> = joined.iter().map(|v| v.to_bits()).collect();
        assert_eq!(full_bits, join_bits);
    }

    #[test]
    fn rejects_size_not_divisible_by_8() {
        let model = Model::new(ModelFlags::baseline(), 1);
        let x = Tensor::zeros(&[1, MODALITIES, 12, 12, 12]);
        assert!(model.forward(&x).is_err());
    }

    #[test]
    fn parameter_counts_per_wiring() {
        // hand-computed from the fixed channel plan
        let backbone = 880_537;
        let fusion = 2_654;
        let gates = 129;
        assert_eq!(Model::new(ModelFlags::baseline(), 4).param_count(), backbone);
        assert_eq!(
            Model::new(ModelFlags { use_fusion: true, use_gates: false }, 4).param_count(),
            backbone + fusion
        );
        assert_eq!(
            Model::new(ModelFlags { use_fusion: false, use_gates: true }, 4).param_count(),
            backbone + gates
        );
        assert_eq!(Model::new(ModelFlags::full(), 4).param_count(), backbone + fusion + gates);
    }

    #[test]
    fn gates_only_wiring_runs_on_neutral_attention() {
        let model = Model::new(ModelFlags { use_fusion: false, use_gates: true }, 5);
        let x = random_volume(1, 16, 11);
        let out = model.forward(&x).unwrap();
        assert!(out.att_map.is_none());
        let m = out.att_mean.expect("neutral attention present");
        assert!(m.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(ModelFlags::full(), 13);
        let x = random_volume(1, 16, 2);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert!(a.logits_main.bit_eq(&b.logits_main));
    }

    #[test]
    fn conv_block_receptive_field_radius_two() {
        // two stacked 3^3 convs reach exactly radius 2
        let mut rng = Rng::new(17);
        let block = ConvBlock::new(1, 4, &mut rng);
        let s = 12;
        let zeros = Tensor::zeros(&[1, 1, s, s, s]);
        let mut bumped = vec![0.0; s * s * s];
        let c = s / 2;
        bumped[(c * s + c) * s + c] = 1.0;
        let bump = Tensor::from_vec(&[1, 1, s, s, s], bumped).unwrap();
        let a = block.forward(&zeros).unwrap().to_vec();
        let b = block.forward(&bump).unwrap().to_vec();
        let sp = s * s * s;
        for (i, (u, v)) in a.iter().zip(&b).enumerate() {
            if (u - v).abs() > 0.0 {
                let vox = i % sp;
                let (x, rem) = (vox / (s * s), vox % (s * s));
                let (y, z) = (rem / s, rem % s);
                let cheb = (x as i64 - c as i64)
                    .abs()
                    .max((y as i64 - c as i64).abs())
                    .max((z as i64 - c as i64).abs());
                assert!(cheb <= 2, "voxel at Chebyshev distance {cheb} changed");
            }
        }
    }

    #[test]
    fn named_params_are_unique_and_ordered() {
        let model = Model::new(ModelFlags::full(), 2);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.iter().any(|n| n == "fusion.alpha"));
        assert!(names.iter().any(|n| n == "gates.gamma"));
    }
}
