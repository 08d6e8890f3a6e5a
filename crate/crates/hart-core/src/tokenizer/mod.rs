//! Hybrid tokenizer: a CNN autoencoder whose latent is decomposed into
//! multi-scale discrete tokens plus a continuous residual, with one shared
//! decoder for both paths, trained by 50/50 alternation between them.

pub mod nets;
pub mod quantize;

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HartError, Result};
use crate::io::checkpoint;
use crate::num::{ops, tape, Tensor};

pub use nets::{Decoder, Encoder};
pub use quantize::{
    accumulate_from_grids, add_upsampled_grid, multiscale_quantize, multiscale_quantize_detailed,
    standardize_rows, ChannelStats, Codebook, MultiScaleTokens, QuantizeDetail, ResidualLatent,
    ScaleSchedule,
};

#[derive(Clone, Debug)]
pub struct TokenizerConfig {
    pub latent_channels: usize,
    pub downsample: usize,
    pub vocab: usize,
    pub base_width: usize,
    pub schedule_sides: Vec<usize>,
    pub beta_commit: f32,
    /// Train only the decoder, keeping encoder and codebook fixed.
    pub freeze_encoder_quantizer: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            latent_channels: 16,
            downsample: 4,
            vocab: 512,
            base_width: 16,
            schedule_sides: vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16],
            beta_commit: 0.25,
            freeze_encoder_quantizer: false,
        }
    }
}

/// Which decode route `reconstruct` takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconPath {
    Discrete,
    Continuous,
    Hybrid,
}

impl FromStr for ReconPath {
    type Err = HartError;
    fn from_str(s: &str) -> Result<ReconPath> {
        match s {
            "discrete" => Ok(ReconPath::Discrete),
            "continuous" => Ok(ReconPath::Continuous),
            "hybrid" => Ok(ReconPath::Hybrid),
            other => Err(HartError::arg(
                "path",
                format!("unknown reconstruction path `{other}` (discrete|continuous|hybrid)"),
            )),
        }
    }
}

pub struct StepInfo {
    pub loss: f32,
    pub pixel_mse: f32,
    pub commit: f32,
    pub codebook: f32,
    pub discrete_path: bool,
}

pub struct HybridTokenizer {
    pub cfg: TokenizerConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub schedule: ScaleSchedule,
    pub norm_stats: Option<ChannelStats>,
}

impl HybridTokenizer {
    pub fn new(cfg: TokenizerConfig, rng: &mut ChaCha8Rng) -> Result<HybridTokenizer> {
        let schedule = ScaleSchedule::new(cfg.schedule_sides.clone())?;
        let encoder = Encoder::new(cfg.latent_channels, cfg.downsample, cfg.base_width, rng)?;
        let decoder = Decoder::new(cfg.latent_channels, cfg.downsample, cfg.base_width, rng)?;
        let codebook = Codebook::new(cfg.vocab, cfg.latent_channels, 0.5, rng)?;
        Ok(HybridTokenizer { cfg, encoder, decoder, codebook, schedule, norm_stats: None })
    }

    /// Image [3,H,W] -> continuous latent [C, H/f, W/f].
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.encoder.forward(image)
    }

    /// Latent -> (discrete multi-scale tokens, continuous residual).
    pub fn quantize(&self, latent: &Tensor) -> Result<(MultiScaleTokens, ResidualLatent)> {
        let (tokens, mut residual) = multiscale_quantize(latent, &self.codebook, &self.schedule)?;
        residual.norm_stats = self.norm_stats.clone();
        Ok((tokens, residual))
    }

    pub fn quantize_detailed(&self, latent: &Tensor) -> Result<QuantizeDetail> {
        let mut d = multiscale_quantize_detailed(latent, &self.codebook, &self.schedule)?;
        d.residual.norm_stats = self.norm_stats.clone();
        Ok(d)
    }

    /// Feature map [C,h,w] -> image in [-1,1]. The same weights decode both
    /// the discrete sum and the full continuous latent.
    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        self.decoder.forward(features)
    }

    /// encode -> quantize -> decode via the requested path. The hybrid path
    /// decodes accumulated + residual, which is also what the continuous
    /// path decodes, so the two produce identical bytes.
    pub fn reconstruct(&self, image: &Tensor, path: ReconPath) -> Result<Tensor> {
        tape::no_grad(|| {
            let latent = self.encode(image)?;
            let (tokens, residual) = self.quantize(&latent)?;
            match path {
                ReconPath::Discrete => self.decode(&tokens.accumulated),
                ReconPath::Continuous | ReconPath::Hybrid => {
                    let features = ops::add(&tokens.accumulated, &residual.residual)?;
                    self.decode(&features)
                }
            }
        })
    }

    /// One alternating training step over a batch. Flips a 50/50 coin for
    /// the whole step: either the decoder sees the accumulated discrete
    /// features (straight-through to the encoder, plus commitment and
    /// codebook terms) or the raw continuous latent (plain autoencoder).
    pub fn train_step(
        &mut self,
        batch: &[Tensor],
        opt: &mut crate::num::AdamW,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepInfo> {
        if batch.is_empty() {
            return Err(HartError::arg("batch", "empty batch".to_string()));
        }
        let discrete = rng.gen_bool(0.5);
        tape::reset();
        opt.zero_grad();

        let mut total: Option<Tensor> = None;
        let mut pixel_sum = 0.0f32;
        let mut commit_sum = 0.0f32;
        let mut cb_sum = 0.0f32;
        let mut usage: Vec<MultiScaleTokens> = Vec::new();
        for image in batch {
            let latent = if self.cfg.freeze_encoder_quantizer {
                tape::no_grad(|| self.encode(image))?
            } else {
                self.encode(image)?
            };
            let img_loss = if discrete {
                let detail = self.quantize_detailed(&latent)?;
                let dec_in = ops::straight_through(&latent, &detail.tokens.accumulated)?;
                let recon = self.decode(&dec_in)?;
                let pixel = ops::mse(&recon, image)?;
                pixel_sum += pixel.item();
                let mut loss = pixel;
                if !self.cfg.freeze_encoder_quantizer {
                    let commit = ops::mse(&latent, &detail.tokens.accumulated)?;
                    commit_sum += commit.item();
                    loss = ops::add(&loss, &ops::scale(&commit, self.cfg.beta_commit))?;
                    let mut cb: Option<Tensor> = None;
                    for (grid, target) in detail.tokens.grids.iter().zip(&detail.scale_targets) {
                        let ids: Vec<usize> = grid.iter().map(|&i| i as usize).collect();
                        let picked = ops::embedding(self.codebook.entries(), &ids)?;
                        let term = ops::mse(&picked, target)?;
                        cb = Some(match cb {
                            Some(acc) => ops::add(&acc, &term)?,
                            None => term,
                        });
                    }
                    let cb = ops::scale(&cb.unwrap(), 1.0 / self.schedule.num_steps() as f32);
                    cb_sum += cb.item();
                    loss = ops::add(&loss, &cb)?;
                }
                usage.push(detail.tokens);
                loss
            } else {
                let recon = self.decode(&latent)?;
                let pixel = ops::mse(&recon, image)?;
                pixel_sum += pixel.item();
                pixel
            };
            total = Some(match total {
                Some(t) => ops::add(&t, &img_loss)?,
                None => img_loss,
            });
        }
        let loss = ops::scale(&total.unwrap(), 1.0 / batch.len() as f32);
        let loss_val = loss.item();
        tape::backward(&loss)?;
        opt.step();
        self.codebook.pin_zero_entry();
        for tokens in &usage {
            self.codebook.tally_usage(tokens);
        }
        tape::reset();
        Ok(StepInfo {
            loss: loss_val,
            pixel_mse: pixel_sum / batch.len() as f32,
            commit: commit_sum / batch.len() as f32,
            codebook: cb_sum / batch.len() as f32,
            discrete_path: discrete,
        })
    }

    /// Per-channel residual statistics over a dataset; stored for the
    /// diffusion head and written into the checkpoint.
    pub fn compute_norm_stats(&mut self, images: &[Tensor]) -> Result<()> {
        if images.is_empty() {
            return Err(HartError::arg("images", "need at least one image".to_string()));
        }
        let c = self.cfg.latent_channels;
        let mut sum = vec![0.0f64; c];
        let mut sumsq = vec![0.0f64; c];
        let mut count = 0usize;
        tape::no_grad(|| -> Result<()> {
            for image in images {
                let latent = self.encode(image)?;
                let (_, residual) = self.quantize(&latent)?;
                let d = residual.residual.data();
                let hw = d.len() / c;
                for ch in 0..c {
                    for p in 0..hw {
                        let v = d[ch * hw + p] as f64;
                        sum[ch] += v;
                        sumsq[ch] += v * v;
                    }
                }
                count += hw;
            }
            Ok(())
        })?;
        let mean: Vec<f32> = sum.iter().map(|s| (s / count as f64) as f32).collect();
        let std: Vec<f32> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                ((((sq / count as f64) - (*m as f64) * (*m as f64)).max(1e-8)).sqrt() as f32).max(1e-4)
            })
            .collect();
        self.norm_stats = Some(ChannelStats { mean, std });
        Ok(())
    }

    /// Parameters receiving gradients under the current config.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        if self.cfg.freeze_encoder_quantizer {
            self.decoder.named_params(&mut named);
        } else {
            self.encoder.named_params(&mut named);
            self.decoder.named_params(&mut named);
            named.push(("codebook".into(), self.codebook.entries().clone()));
        }
        named.into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut named = Vec::new();
        self.encoder.named_params(&mut named);
        self.decoder.named_params(&mut named);
        named.push(("codebook".into(), self.codebook.entries().clone()));
        named
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.named_params();
        let meta = vec![
            self.cfg.latent_channels as f32,
            self.cfg.downsample as f32,
            self.cfg.vocab as f32,
            self.cfg.base_width as f32,
            self.cfg.beta_commit,
        ];
        entries.push(("meta.tokenizer".into(), Tensor::from_vec(meta, &[5])));
        let sides: Vec<f32> = self.schedule.sides().iter().map(|&s| s as f32).collect();
        let n = sides.len();
        entries.push(("meta.schedule".into(), Tensor::from_vec(sides, &[n])));
        if let Some(stats) = &self.norm_stats {
            let c = stats.mean.len();
            entries.push(("norm.mean".into(), Tensor::from_vec(stats.mean.clone(), &[c])));
            entries.push(("norm.std".into(), Tensor::from_vec(stats.std.clone(), &[c])));
        }
        checkpoint::save_checkpoint(&entries, path)
    }

    pub fn load(path: &Path) -> Result<HybridTokenizer> {
        let entries = checkpoint::load_checkpoint(path)?;
        let meta = checkpoint::find(&entries, "meta.tokenizer")?.to_vec();
        if meta.len() != 5 {
            return Err(HartError::format("checkpoint", "bad meta.tokenizer entry".to_string()));
        }
        let sides: Vec<usize> = checkpoint::find(&entries, "meta.schedule")?
            .to_vec()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let cfg = TokenizerConfig {
            latent_channels: meta[0] as usize,
            downsample: meta[1] as usize,
            vocab: meta[2] as usize,
            base_width: meta[3] as usize,
            schedule_sides: sides,
            beta_commit: meta[4],
            freeze_encoder_quantizer: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tok = HybridTokenizer::new(cfg, &mut rng)?;
        for (name, param) in tok.named_params() {
            let stored = checkpoint::find(&entries, &name)?;
            if stored.shape() != param.shape() {
                return Err(HartError::format(
                    "checkpoint",
                    format!("entry `{name}` has shape {:?}, expected {:?}", stored.shape(), param.shape()),
                ));
            }
            param.copy_from(&stored.data());
        }
        if let (Ok(mean), Ok(std)) = (
            checkpoint::find(&entries, "norm.mean"),
            checkpoint::find(&entries, "norm.std"),
        ) {
            tok.norm_stats = Some(ChannelStats { mean: mean.to_vec(), std: std.to_vec() });
        }
        Ok(tok)
    }
}

#[cfg(test)]
mod tests;
