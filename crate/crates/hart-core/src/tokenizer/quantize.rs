//! Multi-scale residual vector quantization.
//!
//! A continuous latent [C,h,w] is decomposed scale by scale: at each scale
//! the current residual is downsampled, matched per position to the nearest
//! codebook entry (L2, lowest index wins ties), and the upsampled quantized
//! grid is added to the running accumulation. What remains at the end is the
//! continuous residual. All arithmetic here runs on raw slices in a fixed
//! order, so the accumulation is bit-for-bit recomputable from the grids.

use rand::Rng;

use crate::error::{HartError, Result};
use crate::num::kernels;
use crate::num::Tensor;

/// Vector-quantization codebook: V entries of C channels.
pub struct Codebook {
    entries: Tensor, // [V, C], trainable
    usage_counts: Vec<u64>,
}

impl Codebook {
    /// Gaussian-initialized codebook with entry 0 pinned to the zero vector.
    pub fn new<R: Rng>(vocab: usize, channels: usize, std: f32, rng: &mut R) -> Result<Codebook> {
        if vocab < 2 {
            return Err(HartError::arg("vocab", format!("need at least 2 entries, got {vocab}")));
        }
        let entries = Tensor::param(&[vocab, channels], std, rng);
        entries.update_data(|d| d[..channels].fill(0.0));
        Ok(Codebook { entries, usage_counts: vec![0; vocab] })
    }

    pub fn from_entries(entries: Tensor) -> Result<Codebook> {
        let s = entries.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(HartError::arg("entries", format!("expected [V>=2, C], got {s:?}")));
        }
        if entries.data().iter().any(|v| v.is_nan()) {
            return Err(HartError::arg("entries", "codebook contains NaN".to_string()));
        }
        let vocab = s[0];
        Ok(Codebook { entries, usage_counts: vec![0; vocab] })
    }

    pub fn vocab(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.entries.shape()[1]
    }

    /// The entry matrix as a trainable tensor (for the codebook loss).
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    /// Re-zero entry 0 after an optimizer step; keeping the zero vector in
    /// the book makes scale-by-scale refinement non-expanding.
    pub fn pin_zero_entry(&self) {
        let c = self.channels();
        self.entries.update_data(|d| d[..c].fill(0.0));
    }

    /// Nearest entry to `vec` by squared L2; ties resolve to lowest index.
    pub fn nearest(&self, vec: &[f32]) -> u32 {
        let c = self.channels();
        debug_assert_eq!(vec.len(), c);
        let d = self.entries.data();
        let mut best = 0u32;
        let mut best_dist = f32::INFINITY;
        for v in 0..self.vocab() {
            let e = &d[v * c..(v + 1) * c];
            let mut dist = 0.0f32;
            for (x, y) in vec.iter().zip(e) {
                let diff = x - y;
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = v as u32;
            }
        }
        best
    }

    pub fn tally_usage(&mut self, tokens: &MultiScaleTokens) {
        for grid in &tokens.grids {
            for &i in grid {
                self.usage_counts[i as usize] += 1;
            }
        }
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }
}

/// Ascending grid side lengths; the last side is the full latent resolution
/// and the length equals the number of autoregressive sampling steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSchedule {
    sides: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(sides: Vec<usize>) -> Result<ScaleSchedule> {
        if sides.is_empty() {
            return Err(HartError::arg("schedule", "must not be empty".to_string()));
        }
        if sides[0] == 0 {
            return Err(HartError::arg("schedule", "sides must be positive".to_string()));
        }
        if sides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HartError::arg(
                "schedule",
                format!("sides must be strictly ascending, got {sides:?}"),
            ));
        }
        Ok(ScaleSchedule { sides })
    }

    /// Stock schedules: 10 steps for 16x16 latents, 6 steps for 8x8.
    pub fn default_for(latent_side: usize) -> Result<ScaleSchedule> {
        match latent_side {
            8 => ScaleSchedule::new(vec![1, 2, 3, 4, 6, 8]),
            16 => ScaleSchedule::new(vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16]),
            _ => Err(HartError::arg(
                "latent_side",
                format!("no stock schedule for side {latent_side}; pass one explicitly"),
            )),
        }
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn num_steps(&self) -> usize {
        self.sides.len()
    }

    pub fn final_side(&self) -> usize {
        *self.sides.last().unwrap()
    }

    pub fn total_tokens(&self) -> usize {
        self.sides.iter().map(|s| s * s).sum()
    }
}

/// Per-scale index grids plus the accumulated quantized feature map.
pub struct MultiScaleTokens {
    /// grids[k] holds sides[k]^2 codebook indices, row-major.
    pub grids: Vec<Vec<u32>>,
    /// Sum over scales of the upsampled quantized grids, shape [C,h,w].
    pub accumulated: Tensor,
}

/// Continuous remainder after subtracting the accumulated discrete features.
pub struct ResidualLatent {
    /// latent - accumulated, shape [C,h,w].
    pub residual: Tensor,
    /// Per-channel statistics used to standardize the residual for the
    /// diffusion head; populated from a trained tokenizer.
    pub norm_stats: Option<ChannelStats>,
}

#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ResidualLatent {
    /// (residual - mean) / std per channel, flattened to [tokens, C] rows.
    pub fn standardized_rows(&self) -> Result<Tensor> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| HartError::Contract("tokenizer norm_stats missing (untrained tokenizer)".into()))?;
        standardize_rows(&self.residual, stats)
    }
}

/// Channel-major [C,h,w] map -> [h*w, C] rows standardized by `stats`.
pub fn standardize_rows(map: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 || s[0] != stats.mean.len() {
        return Err(HartError::shape(
            "standardize_rows",
            format!("map {s:?} vs {} channel stats", stats.mean.len()),
        ));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = map.data();
    let mut rows = vec![0.0f32; hw * c];
    for p in 0..hw {
        for ch in 0..c {
            rows[p * c + ch] = (d[ch * hw + p] - stats.mean[ch]) / stats.std[ch];
        }
    }
    Ok(Tensor::from_vec(rows, &[hw, c]))
}

/// Inverse of `standardize_rows`: [h*w, C] rows -> [C,h,w] map.
pub fn destandardize_to_map(rows: &Tensor, stats: &ChannelStats, h: usize, w: usize) -> Result<Tensor> {
    let s = rows.shape();
    if s.len() != 2 || s[0] != h * w || s[1] != stats.mean.len() {
        return Err(HartError::shape(
            "destandardize",
            format!("rows {s:?} vs [{}, {}]", h * w, stats.mean.len()),
        ));
    }
    let c = s[1];
    let d = rows.data();
    let mut map = vec![0.0f32; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            map[ch * h * w + p] = d[p * c + ch] * stats.std[ch] + stats.mean[ch];
        }
    }
    Ok(Tensor::from_vec(map, &[c, h, w]))
}

/// Output of `multiscale_quantize` with the per-scale downsampled residuals
/// kept around for the codebook loss.
pub struct QuantizeDetail {
    pub tokens: MultiScaleTokens,
    pub residual: ResidualLatent,
    /// scale_targets[k]: the downsampled residual the quantizer matched at
    /// scale k, as [s_k^2, C] rows.
    pub scale_targets: Vec<Tensor>,
}

/// Iterative residual quantization over the scale schedule.
pub fn multiscale_quantize(
    latent: &Tensor,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<(MultiScaleTokens, ResidualLatent)> {
    let d = multiscale_quantize_detailed(latent, codebook, schedule)?;
    Ok((d.tokens, d.residual))
}

pub fn multiscale_quantize_detailed(
    latent: &Tensor,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<QuantizeDetail> {
    let shape = latent.shape();
    let c = codebook.channels();
    if shape.len() != 3 || shape[0] != c {
        return Err(HartError::shape(
            "multiscale_quantize",
            format!("latent {shape:?} vs codebook channels {c}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    if h != w || schedule.final_side() != h {
        return Err(HartError::shape(
            "multiscale_quantize",
            format!("schedule ends at {} but latent is {h}x{w}", schedule.final_side()),
        ));
    }
    let hw = h * w;
    let latent_d = latent.to_vec();
    let book = codebook.entries.to_vec();

    let mut acc = vec![0.0f32; c * hw];
    let mut grids = Vec::with_capacity(schedule.num_steps());
    let mut scale_targets = Vec::with_capacity(schedule.num_steps());
    let mut r = vec![0.0f32; c * hw];
    for &s in schedule.sides() {
        for i in 0..c * hw {
            r[i] = latent_d[i] - acc[i];
        }
        // Downsample the residual to s x s.
        let mut r_s = vec![0.0f32; c * s * s];
        for ch in 0..c {
            kernels::bilinear_plane(&r[ch * hw..(ch + 1) * hw], h, w, &mut r_s[ch * s * s..(ch + 1) * s * s], s, s);
        }
        // Nearest codebook entry per position.
        let mut grid = vec![0u32; s * s];
        let mut rows = vec![0.0f32; s * s * c];
        let mut vec_buf = vec![0.0f32; c];
        for p in 0..s * s {
            for ch in 0..c {
                vec_buf[ch] = r_s[ch * s * s + p];
            }
            rows[p * c..(p + 1) * c].copy_from_slice(&vec_buf);
            grid[p] = codebook.nearest(&vec_buf);
        }
        // Quantized grid, upsampled to full resolution, added to the sum.
        let mut q = vec![0.0f32; c * s * s];
        for p in 0..s * s {
            let e = &book[grid[p] as usize * c..(grid[p] as usize + 1) * c];
            for ch in 0..c {
                q[ch * s * s + p] = e[ch];
            }
        }
        let mut up = vec![0.0f32; c * hw];
        for ch in 0..c {
            kernels::bilinear_plane(&q[ch * s * s..(ch + 1) * s * s], s, s, &mut up[ch * hw..(ch + 1) * hw], h, w);
        }
        for i in 0..c * hw {
            acc[i] += up[i];
        }
        grids.push(grid);
        scale_targets.push(Tensor::from_vec(rows, &[s * s, c]));
    }
    let residual: Vec<f32> = latent_d.iter().zip(&acc).map(|(l, a)| l - a).collect();
    Ok(QuantizeDetail {
        tokens: MultiScaleTokens {
            grids,
            accumulated: Tensor::from_vec(acc, &[c, h, w]),
        },
        residual: ResidualLatent {
            residual: Tensor::from_vec(residual, &[c, h, w]),
            norm_stats: None,
        },
        scale_targets,
    })
}

/// Rebuild the accumulated feature map from grids + codebook alone, using
/// the same arithmetic order as `multiscale_quantize`.
pub fn accumulate_from_grids(
    grids: &[Vec<u32>],
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<Tensor> {
    if grids.len() != schedule.num_steps() {
        return Err(HartError::shape(
            "accumulate_from_grids",
            format!("{} grids vs {} scales", grids.len(), schedule.num_steps()),
        ));
    }
    let c = codebook.channels();
    let h = schedule.final_side();
    let hw = h * h;
    let book = codebook.entries.to_vec();
    let mut acc = vec![0.0f32; c * hw];
    for (&s, grid) in schedule.sides().iter().zip(grids) {
        if grid.len() != s * s {
            return Err(HartError::shape(
                "accumulate_from_grids",
                format!("grid has {} entries for side {s}", grid.len()),
            ));
        }
        let mut q = vec![0.0f32; c * s * s];
        for (p, &idx) in grid.iter().enumerate() {
            if idx as usize >= codebook.vocab() {
                return Err(HartError::arg("grid", format!("index {idx} out of vocab")));
            }
            let e = &book[idx as usize * c..(idx as usize + 1) * c];
            for ch in 0..c {
                q[ch * s * s + p] = e[ch];
            }
        }
        let mut up = vec![0.0f32; c * hw];
        for ch in 0..c {
            kernels::bilinear_plane(&q[ch * s * s..(ch + 1) * s * s], s, s, &mut up[ch * hw..(ch + 1) * hw], h, h);
        }
        for i in 0..c * hw {
            acc[i] += up[i];
        }
    }
    Ok(Tensor::from_vec(acc, &[c, h, h]))
}

/// Accumulate one quantized grid into a running feature map (used by the
/// incremental sampling loop). Same arithmetic as the quantizer.
pub fn add_upsampled_grid(acc: &mut [f32], grid: &[u32], side: usize, codebook: &Codebook, h: usize) {
    let c = codebook.channels();
    let hw = h * h;
    let book = codebook.entries.to_vec();
    let mut q = vec![0.0f32; c * side * side];
    for (p, &idx) in grid.iter().enumerate() {
        let e = &book[idx as usize * c..(idx as usize + 1) * c];
        for ch in 0..c {
            q[ch * side * side + p] = e[ch];
        }
    }
    let mut up = vec![0.0f32; c * hw];
    for ch in 0..c {
        kernels::bilinear_plane(&q[ch * side * side..(ch + 1) * side * side], side, side, &mut up[ch * hw..(ch + 1) * hw], h, h);
    }
    for i in 0..c * hw {
        acc[i] += up[i];
    }
}
