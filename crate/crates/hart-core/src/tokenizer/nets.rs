//! Convolutional encoder/decoder pair around the quantizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HartError, Result};
use crate::num::{ops, Tensor};

pub struct ConvLayer {
    pub weight: Tensor, // [O, C, k, k]
    pub bias: Tensor,   // [O]
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        let std = (2.0 / (in_c * k * k) as f32).sqrt();
        ConvLayer {
            weight: Tensor::param(&[out_c, in_c, k, k], std, rng),
            bias: Tensor::zeros(&[out_c]).requires_grad(true),
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

fn stage_widths(base: usize, stages: usize) -> Vec<usize> {
    (0..stages).map(|i| (base << i).min(4 * base)).collect()
}

/// CNN encoder: image [3,H,W] -> latent [C, H/f, W/f] via log2(f) stride-2
/// convolutions with SiLU between stages.
pub struct Encoder {
    convs: Vec<ConvLayer>,
    pub downsample: usize,
}

impl Encoder {
    pub fn new(latent_channels: usize, downsample: usize, base_width: usize, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        if !downsample.is_power_of_two() || downsample < 2 {
            return Err(HartError::arg(
                "downsample",
                format!("must be a power of two >= 2, got {downsample}"),
            ));
        }
        let stages = downsample.trailing_zeros() as usize;
        let widths = stage_widths(base_width, stages);
        let mut convs = Vec::new();
        let mut in_c = 3;
        for &w in &widths {
            convs.push(ConvLayer::new(in_c, w, 3, 2, rng));
            in_c = w;
        }
        convs.push(ConvLayer::new(in_c, latent_channels, 3, 1, rng));
        Ok(Encoder { convs, downsample })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(HartError::shape("encode", format!("expected [3,H,W], got {s:?}")));
        }
        if s[1] % self.downsample != 0 || s[2] % self.downsample != 0 {
            return Err(HartError::arg(
                "resolution",
                format!("{}x{} not divisible by downsample factor {}", s[1], s[2], self.downsample),
            ));
        }
        let mut x = image.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != last {
                x = ops::silu(&x)?;
            }
        }
        Ok(x)
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("enc.conv{i}.weight"), c.weight.clone()));
            out.push((format!("enc.conv{i}.bias"), c.bias.clone()));
        }
    }
}

/// CNN decoder: features [C,h,w] -> image [3, h*f, w*f] in [-1,1] (tanh).
pub struct Decoder {
    conv_in: ConvLayer,
    stages: Vec<ConvLayer>, // each preceded by 2x bilinear upsampling
    conv_out: ConvLayer,
    pub upsample: usize,
    pub latent_channels: usize,
}

impl Decoder {
    pub fn new(latent_channels: usize, upsample: usize, base_width: usize, rng: &mut ChaCha8Rng) -> Result<Decoder> {
        if !upsample.is_power_of_two() || upsample < 2 {
            return Err(HartError::arg(
                "upsample",
                format!("must be a power of two >= 2, got {upsample}"),
            ));
        }
        let n_stages = upsample.trailing_zeros() as usize;
        let mut widths = stage_widths(base_width, n_stages);
        widths.reverse(); // widest first, mirroring the encoder
        let conv_in = ConvLayer::new(latent_channels, widths[0], 3, 1, rng);
        let mut stages = Vec::new();
        for i in 1..n_stages {
            stages.push(ConvLayer::new(widths[i - 1], widths[i], 3, 1, rng));
        }
        let conv_out = ConvLayer::new(*widths.last().unwrap(), 3, 3, 1, rng);
        Ok(Decoder { conv_in, stages, conv_out, upsample, latent_channels })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let s = features.shape();
        if s.len() != 3 || s[0] != self.latent_channels {
            return Err(HartError::shape(
                "decode",
                format!("expected [{}, h, w], got {s:?}", self.latent_channels),
            ));
        }
        let mut x = self.conv_in.forward(features)?;
        let mut side_h = s[1];
        let mut side_w = s[2];
        for stage in &self.stages {
            side_h *= 2;
            side_w *= 2;
            x = ops::interpolate_bilinear(&ops::silu(&x)?, side_h, side_w)?;
            x = stage.forward(&x)?;
        }
        side_h *= 2;
        side_w *= 2;
        x = ops::interpolate_bilinear(&ops::silu(&x)?, side_h, side_w)?;
        x = self.conv_out.forward(&x)?;
        ops::tanh(&x)
    }

    pub fn named_params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("dec.conv_in.weight".into(), self.conv_in.weight.clone()));
        out.push(("dec.conv_in.bias".into(), self.conv_in.bias.clone()));
        for (i, c) in self.stages.iter().enumerate() {
            out.push((format!("dec.stage{i}.weight"), c.weight.clone()));
            out.push((format!("dec.stage{i}.bias"), c.bias.clone()));
        }
        out.push(("dec.conv_out.weight".into(), self.conv_out.weight.clone()));
        out.push(("dec.conv_out.bias".into(), self.conv_out.bias.clone()));
    }
}
