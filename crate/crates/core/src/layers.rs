//! Reusable trainable layers shared by the VAE and the U-Net.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, Param, Tensor};

/// 2-D convolution with bias.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming fan-in initialized kernel, zero bias.
    pub fn new(rng: &mut Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            weight: Param::kaiming(rng, vec![cout, cin, k, k], cin * k * k),
            bias: Param::zeros(vec![cout]),
            stride,
            padding,
        }
    }

    /// All-zero kernel and bias; the layer starts as the constant zero map.
    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            weight: Param::zeros(vec![cout, cin, k, k]),
            bias: Param::zeros(vec![cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        if g.shape(y).len() == 4 {
            g.add_chan_bias(y, b)
        } else {
            // unbatched [c, h, w]: lift to a batch of one for the bias add
            let s = g.shape(y).to_vec();
            let y4 = g.reshape(y, vec![1, s[0], s[1], s[2]])?;
            let y4 = g.add_chan_bias(y4, b)?;
            g.reshape(y4, s)
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    /// Deep copy with fresh storage.
    pub fn clone_detached(&self) -> Conv2d {
        Conv2d {
            weight: Param::new(self.weight.to_vec(), self.weight.shape().to_vec()).unwrap(),
            bias: Param::new(self.bias.to_vec(), self.bias.shape().to_vec()).unwrap(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Fully connected layer on `[rows, in]` matrices.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Param::kaiming(rng, vec![fan_in, fan_out], fan_in),
            bias: Param::zeros(vec![fan_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn clone_detached(&self) -> Linear {
        Linear {
            weight: Param::new(self.weight.to_vec(), self.weight.shape().to_vec()).unwrap(),
            bias: Param::new(self.bias.to_vec(), self.bias.shape().to_vec()).unwrap(),
        }
    }
}

/// Group normalization with learned per-channel scale and shift.
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> GroupNorm {
        GroupNorm {
            gamma: Param::new(vec![1.0; channels], vec![channels]).unwrap(),
            beta: Param::zeros(vec![channels]),
            groups,
            eps: 1e-5,
        }
    }

    /// Picks the largest group count <= 8 dividing `channels`.
    pub fn auto(channels: usize) -> GroupNorm {
        let mut groups = 8.min(channels);
        while channels % groups != 0 {
            groups -= 1;
        }
        GroupNorm::new(channels, groups)
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let ga = g.param(&self.gamma);
        let be = g.param(&self.beta);
        g.group_norm(x, ga, be, self.groups, self.eps)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn clone_detached(&self) -> GroupNorm {
        GroupNorm {
            gamma: Param::new(self.gamma.to_vec(), self.gamma.shape().to_vec()).unwrap(),
            beta: Param::new(self.beta.to_vec(), self.beta.shape().to_vec()).unwrap(),
            groups: self.groups,
            eps: self.eps,
        }
    }
}
