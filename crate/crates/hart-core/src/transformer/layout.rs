//! Flat sequence layout: condition prefix followed by one block per scale.

use crate::error::{HartError, Result};
use crate::num::Tensor;
use crate::tokenizer::ScaleSchedule;

/// Where each scale's block lives in the flattened token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub cond_len: usize,
    pub sides: Vec<usize>,
    /// offsets[k] = start index of scale k's block.
    pub offsets: Vec<usize>,
    pub total_len: usize,
}

pub fn build_layout(schedule: &ScaleSchedule, cond_len: usize) -> Result<TokenLayout> {
    if cond_len < 1 {
        return Err(HartError::arg("cond_len", "must be >= 1".to_string()));
    }
    if schedule.num_steps() == 0 {
        return Err(HartError::arg("schedule", "empty schedule".to_string()));
    }
    let sides = schedule.sides().to_vec();
    let mut offsets = Vec::with_capacity(sides.len());
    let mut pos = cond_len;
    for &s in &sides {
        offsets.push(pos);
        pos += s * s;
    }
    Ok(TokenLayout { cond_len, sides, offsets, total_len: pos })
}

impl TokenLayout {
    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    pub fn visual_len(&self) -> usize {
        self.total_len - self.cond_len
    }

    /// Index range of scale k's block (0-based scale index).
    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.offsets[k];
        start..start + self.sides[k] * self.sides[k]
    }

    /// Sequence length covering the condition prefix and scales 0..k.
    pub fn prefix_len(&self, k: usize) -> usize {
        if k == 0 {
            self.cond_len
        } else {
            self.offsets[k - 1] + self.sides[k - 1] * self.sides[k - 1]
        }
    }

    /// Stage of a position: None for the condition prefix, Some(k) for
    /// scale k.
    pub fn stage_of(&self, pos: usize) -> Option<usize> {
        if pos < self.cond_len {
            return None;
        }
        let mut k = 0;
        while k + 1 < self.sides.len() && pos >= self.offsets[k + 1] {
            k += 1;
        }
        Some(k)
    }

    /// Last visible index + 1 for a query at `pos`: condition tokens see
    /// only the prefix; a visual token sees everything through the end of
    /// its own scale block.
    pub fn visible_end(&self, pos: usize) -> usize {
        match self.stage_of(pos) {
            None => self.cond_len,
            Some(k) => self.block(k).end,
        }
    }

    /// Additive attention mask [total, total]: 0 where visible, -1e9 where
    /// not. Condition tokens attend only among themselves; a visual token in
    /// scale k attends to the condition prefix and all blocks through k.
    pub fn attn_mask(&self) -> Tensor {
        let n = self.total_len;
        let mut m = vec![-1e9f32; n * n];
        for i in 0..n {
            let end = self.visible_end(i);
            m[i * n..i * n + end].fill(0.0);
        }
        Tensor::from_vec(m, &[n, n])
    }
}
