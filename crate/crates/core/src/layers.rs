//! Conv building blocks shared by the fusion modules and the backbone.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{conv3d, Tensor};

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dLayer {
    /// Kaiming-normal weights (std = sqrt(2 / fan_in)), zero bias.
    pub fn new(ci: usize, co: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Conv3dLayer {
        Conv3dLayer::with_bias(ci, co, k, stride, padding, 0.0, rng)
    }

    pub fn with_bias(
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias_value: f64,
        rng: &mut Rng,
    ) -> Conv3dLayer {
        let fan_in = (ci * k * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut w = vec![0.0; co * ci * k * k * k];
        rng.fill_normal(&mut w, std);
        Conv3dLayer {
            weight: Tensor::param(&[co, ci, k, k, k], w).expect("consistent weight shape"),
            bias: Tensor::param(&[co], vec![bias_value; co]).expect("consistent bias shape"),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Two 3x3x3 convs, each followed by relu.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub c1: Conv3dLayer,
    pub c2: Conv3dLayer,
}

impl ConvBlock {
    pub fn new(ci: usize, co: usize, rng: &mut Rng) -> ConvBlock {
        ConvBlock {
            c1: Conv3dLayer::new(ci, co, 3, 1, 1, rng),
            c2: Conv3dLayer::new(co, co, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(x)?.relu();
        Ok(self.c2.forward(&h)?.relu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.c1.collect_params(&format!("{prefix}.c1"), out);
        self.c2.collect_params(&format!("{prefix}.c2"), out);
    }
}
