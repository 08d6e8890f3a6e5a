//! Tokenizer tests: quantizer oracles, residual identity, path alternation,
//! straight-through gradients, and checkpoint round trips.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::num::gradcheck::check_gradients;
use crate::num::{ops, tape, AdamW, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_cfg() -> TokenizerConfig {
    TokenizerConfig {
        latent_channels: 4,
        downsample: 4,
        vocab: 8,
        base_width: 4,
        schedule_sides: vec![1, 2, 4],
        beta_commit: 0.25,
        freeze_encoder_quantizer: false,
    }
}

fn rand_image(side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f32> = (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, &[3, side, side])
}

fn rand_latent(c: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f32> = (0..c * side * side).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(data, &[c, side, side])
}

// ── schedule ─────────────────────────────────────────────────────────

#[test]
fn schedule_validation() {
    assert!(ScaleSchedule::new(vec![]).is_err());
    assert!(ScaleSchedule::new(vec![2, 2]).is_err());
    assert!(ScaleSchedule::new(vec![3, 2]).is_err());
    assert_eq!(ScaleSchedule::default_for(16).unwrap().num_steps(), 10);
    assert_eq!(ScaleSchedule::default_for(8).unwrap().sides(), &[1, 2, 3, 4, 6, 8]);
    assert_eq!(ScaleSchedule::default_for(16).unwrap().total_tokens(), 680);
}

// ── encode ───────────────────────────────────────────────────────────

#[test]
fn encode_shape_contract_and_determinism() {
    let mut r = rng(1);
    let tok = HybridTokenizer::new(TokenizerConfig::default(), &mut r).unwrap();
    let img = rand_image(64, &mut r);
    let a = tape::no_grad(|| tok.encode(&img)).unwrap();
    assert_eq!(a.shape(), vec![16, 16, 16]);
    let b = tape::no_grad(|| tok.encode(&img)).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn encode_rejects_indivisible_resolution() {
    let mut r = rng(2);
    let tok = HybridTokenizer::new(TokenizerConfig::default(), &mut r).unwrap();
    let img = rand_image(30, &mut r);
    assert!(tok.encode(&img).is_err());
}

#[test]
fn random_encoder_latent_is_sane() {
    let mut r = rng(3);
    let tok = HybridTokenizer::new(TokenizerConfig::default(), &mut r).unwrap();
    let img = rand_image(64, &mut r);
    let latent = tape::no_grad(|| tok.encode(&img)).unwrap();
    let d = latent.to_vec();
    assert!(d.iter().all(|v| v.is_finite()));
    let hw = 16 * 16;
    for c in 0..16 {
        let chan = &d[c * hw..(c + 1) * hw];
        let mean: f32 = chan.iter().sum::<f32>() / hw as f32;
        let var: f32 = chan.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / hw as f32;
        let std = var.sqrt();
        assert!(std > 0.0 && std < 100.0, "channel {c}: std {std}");
    }
}

// ── quantizer ────────────────────────────────────────────────────────

#[test]
fn perfectly_representable_latent_has_zero_residual() {
    let mut r = rng(4);
    let codebook = Codebook::new(8, 4, 0.5, &mut r).unwrap();
    let schedule = ScaleSchedule::new(vec![4]).unwrap();
    // Latent that equals codebook entry 5 at every position.
    let entry: Vec<f32> = codebook.entries().to_vec()[5 * 4..6 * 4].to_vec();
    let mut latent = vec![0.0f32; 4 * 16];
    for ch in 0..4 {
        for p in 0..16 {
            latent[ch * 16 + p] = entry[ch];
        }
    }
    let latent = Tensor::from_vec(latent, &[4, 4, 4]);
    let (tokens, residual) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
    assert!(tokens.grids[0].iter().all(|&i| i == 5));
    assert!(residual.residual.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_identity_is_exact_and_accumulation_recomputable() {
    let mut r = rng(5);
    for seed in 0..20 {
        let mut rr = rng(seed);
        let codebook = Codebook::new(8, 4, 0.5, &mut rr).unwrap();
        let schedule = ScaleSchedule::new(vec![1, 2, 4]).unwrap();
        let latent = rand_latent(4, 4, &mut r);
        let (tokens, residual) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
        // Accumulation is bit-exactly recomputable from grids + codebook.
        let acc2 = accumulate_from_grids(&tokens.grids, &codebook, &schedule).unwrap();
        for (a, b) in tokens.accumulated.to_vec().iter().zip(acc2.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // residual == latent - accumulated, same arithmetic, max abs diff 0.
        let ld = latent.to_vec();
        let ad = tokens.accumulated.to_vec();
        let rd = residual.residual.to_vec();
        for i in 0..rd.len() {
            assert_eq!((ld[i] - ad[i]).to_bits(), rd[i].to_bits());
        }
    }
}

/// Brute-force reimplementation of the per-scale nearest-neighbor search.
fn quantize_oracle(latent: &Tensor, codebook: &Codebook, schedule: &ScaleSchedule) -> Vec<Vec<u32>> {
    use crate::num::kernels;
    let c = codebook.channels();
    let h = schedule.final_side();
    let hw = h * h;
    let book = codebook.entries().to_vec();
    let latent = latent.to_vec();
    let mut acc = vec![0.0f32; c * hw];
    let mut grids = Vec::new();
    for &s in schedule.sides() {
        let r: Vec<f32> = latent.iter().zip(&acc).map(|(l, a)| l - a).collect();
        let mut r_s = vec![0.0f32; c * s * s];
        for ch in 0..c {
            kernels::bilinear_plane(&r[ch * hw..(ch + 1) * hw], h, h, &mut r_s[ch * s * s..(ch + 1) * s * s], s, s);
        }
        let mut grid = vec![0u32; s * s];
        for p in 0..s * s {
            let mut best = 0u32;
            let mut best_d = f32::INFINITY;
            for v in 0..codebook.vocab() {
                let mut dist = 0.0f32;
                for ch in 0..c {
                    let diff = r_s[ch * s * s + p] - book[v * c + ch];
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = v as u32;
                }
            }
            grid[p] = best;
        }
        let mut q = vec![0.0f32; c * s * s];
        for p in 0..s * s {
            for ch in 0..c {
                q[ch * s * s + p] = book[grid[p] as usize * c + ch];
            }
        }
        let mut up = vec![0.0f32; c * hw];
        for ch in 0..c {
            kernels::bilinear_plane(&q[ch * s * s..(ch + 1) * s * s], s, s, &mut up[ch * hw..(ch + 1) * hw], h, h);
        }
        for i in 0..c * hw {
            acc[i] += up[i];
        }
        grids.push(grid);
    }
    grids
}

#[test]
fn quantizer_matches_exhaustive_oracle() {
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let c = r.gen_range(2..5);
        let v = r.gen_range(2..17);
        let codebook = Codebook::new(v, c, 0.5, &mut r).unwrap();
        let schedule = ScaleSchedule::new(vec![1, 2, 4]).unwrap();
        let latent = rand_latent(c, 4, &mut r);
        let (tokens, _) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
        let oracle = quantize_oracle(&latent, &codebook, &schedule);
        assert_eq!(tokens.grids, oracle, "seed {seed}");
    }
}

#[test]
fn ties_resolve_to_lowest_index() {
    let mut r = rng(7);
    // All entries identical: every distance ties, index 0 must win.
    let row: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut entries = Vec::new();
    for _ in 0..6 {
        entries.extend_from_slice(&row);
    }
    let codebook = Codebook::from_entries(Tensor::from_vec(entries, &[6, 4])).unwrap();
    let latent = rand_latent(4, 2, &mut r);
    let schedule = ScaleSchedule::new(vec![1, 2]).unwrap();
    let (tokens, _) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
    for grid in &tokens.grids {
        assert!(grid.iter().all(|&i| i == 0));
    }
}

#[test]
fn quantizer_is_deterministic() {
    let mut r = rng(8);
    let codebook = Codebook::new(16, 4, 0.5, &mut r).unwrap();
    let schedule = ScaleSchedule::new(vec![1, 2, 4]).unwrap();
    let latent = rand_latent(4, 4, &mut r);
    let (t1, _) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
    let (t2, _) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
    assert_eq!(t1.grids, t2.grids);
    assert_eq!(t1.accumulated.to_vec(), t2.accumulated.to_vec());
}

/// Smooth latent: coarse noise bilinearly upsampled, the texture an encoder
/// actually produces. Monotone refinement is not a theorem for bilinear
/// resampling on white noise (cross-cell leakage of the upsampled grid can
/// grow the full-resolution residual), but it holds on smooth maps and is
/// exact at the final scale where resampling is the identity.
fn smooth_latent(c: usize, side: usize, coarse: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use crate::num::kernels;
    let mut data = vec![0.0f32; c * side * side];
    for ch in 0..c {
        let base: Vec<f32> = (0..coarse * coarse).map(|_| rng.gen_range(-2.0..2.0)).collect();
        kernels::bilinear_plane(&base, coarse, coarse, &mut data[ch * side * side..(ch + 1) * side * side], side, side);
    }
    Tensor::from_vec(data, &[c, side, side])
}

#[test]
fn refinement_is_monotone_with_zero_entry() {
    // Entry 0 is the zero vector, so each scale's nearest-neighbor step can
    // always leave the accumulation unchanged; the residual norm after each
    // scale must not grow on encoder-like latents.
    for seed in 0..200 {
        let mut r = rng(2000 + seed);
        let codebook = Codebook::new(12, 3, 0.6, &mut r).unwrap();
        let schedule = ScaleSchedule::new(vec![1, 2, 3, 4, 6, 8]).unwrap();
        let latent = smooth_latent(3, 8, 3, &mut r);
        let ld = latent.to_vec();
        let hw = 64;
        let mut acc = vec![0.0f32; ld.len()];
        let mut prev = f64::INFINITY;
        for &s in schedule.sides() {
            let mut grid = vec![0u32; s * s];
            let mut r_s = vec![0.0f32; 3 * s * s];
            let res: Vec<f32> = ld.iter().zip(&acc).map(|(l, a)| l - a).collect();
            for ch in 0..3 {
                crate::num::kernels::bilinear_plane(
                    &res[ch * hw..(ch + 1) * hw],
                    8,
                    8,
                    &mut r_s[ch * s * s..(ch + 1) * s * s],
                    s,
                    s,
                );
            }
            let mut v = vec![0.0f32; 3];
            for p in 0..s * s {
                for ch in 0..3 {
                    v[ch] = r_s[ch * s * s + p];
                }
                grid[p] = codebook.nearest(&v);
            }
            add_upsampled_grid(&mut acc, &grid, s, &codebook, 8);
            let norm: f64 = ld.iter().zip(&acc).map(|(l, a)| ((l - a) as f64).powi(2)).sum();
            assert!(
                norm <= prev * (1.0 + 1e-6),
                "seed {seed} scale {s}: {norm} > {prev}"
            );
            prev = norm;
        }
    }
}

#[test]
fn final_scale_refinement_never_expands() {
    // At the final scale resampling is the identity, so per-position
    // nearest-neighbor with the zero entry available cannot grow the
    // residual, whatever the latent looks like.
    for seed in 0..100 {
        let mut r = rng(4000 + seed);
        let codebook = Codebook::new(12, 3, 0.6, &mut r).unwrap();
        let schedule = ScaleSchedule::new(vec![1, 2, 3, 4, 6, 8]).unwrap();
        let latent = rand_latent(3, 8, &mut r);
        let (tokens, residual) = multiscale_quantize(&latent, &codebook, &schedule).unwrap();
        // Accumulation through the second-to-last scale, rebuilt manually.
        let mut acc_before = vec![0.0f32; 3 * 64];
        for (k, &s) in [1usize, 2, 3, 4, 6].iter().enumerate() {
            add_upsampled_grid(&mut acc_before, &tokens.grids[k], s, &codebook, 8);
        }
        let before: f64 = latent
            .to_vec()
            .iter()
            .zip(&acc_before)
            .map(|(l, a)| ((l - a) as f64).powi(2))
            .sum();
        let after: f64 = residual.residual.to_vec().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(after <= before * (1.0 + 1e-6), "seed {seed}: {after} > {before}");
    }
}

// ── decode / reconstruct ─────────────────────────────────────────────

#[test]
fn decode_stays_in_range_and_zero_features_are_deterministic() {
    let mut r = rng(9);
    let tok = HybridTokenizer::new(tiny_cfg(), &mut r).unwrap();
    let zero = Tensor::zeros(&[4, 4, 4]);
    let a = tape::no_grad(|| tok.decode(&zero)).unwrap();
    let b = tape::no_grad(|| tok.decode(&zero)).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    assert!(a.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
    let latent = rand_latent(4, 4, &mut r);
    let (tokens, residual) = tok.quantize(&latent).unwrap();
    let disc = tape::no_grad(|| tok.decode(&tokens.accumulated)).unwrap();
    let cont = tape::no_grad(|| {
        let f = ops::add(&tokens.accumulated, &residual.residual).unwrap();
        tok.decode(&f)
    })
    .unwrap();
    assert!(disc.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(cont.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn hybrid_path_is_bit_identical_to_continuous() {
    let mut r = rng(10);
    let tok = HybridTokenizer::new(tiny_cfg(), &mut r).unwrap();
    let img = rand_image(16, &mut r);
    let h = tok.reconstruct(&img, ReconPath::Hybrid).unwrap();
    let c = tok.reconstruct(&img, ReconPath::Continuous).unwrap();
    for (a, b) in h.to_vec().iter().zip(c.to_vec()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let d = tok.reconstruct(&img, ReconPath::Discrete).unwrap();
    assert!(d.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn unknown_path_name_is_rejected() {
    assert!("discrete".parse::<ReconPath>().is_ok());
    let err = "fancy".parse::<ReconPath>().unwrap_err().to_string();
    assert!(err.contains("unknown reconstruction path"), "{err}");
}

// ── training step ────────────────────────────────────────────────────

#[test]
fn train_step_rejects_empty_batch() {
    let mut r = rng(11);
    let mut tok = HybridTokenizer::new(tiny_cfg(), &mut r).unwrap();
    let mut opt = AdamW::new(tok.trainable_params(), 1e-3, (0.9, 0.999), 0.0).unwrap();
    assert!(tok.train_step(&[], &mut opt, &mut r).is_err());
}

#[test]
fn training_steps_run_and_losses_are_finite() {
    let mut r = rng(12);
    let mut tok = HybridTokenizer::new(tiny_cfg(), &mut r).unwrap();
    let mut opt = AdamW::new(tok.trainable_params(), 1e-3, (0.9, 0.999), 0.0).unwrap();
    let batch: Vec<Tensor> = (0..2).map(|_| rand_image(16, &mut r)).collect();
    let mut discrete_seen = false;
    let mut continuous_seen = false;
    for _ in 0..12 {
        let info = tok.train_step(&batch, &mut opt, &mut r).unwrap();
        assert!(info.loss.is_finite());
        discrete_seen |= info.discrete_path;
        continuous_seen |= !info.discrete_path;
    }
    assert!(discrete_seen && continuous_seen);
}

#[test]
fn path_selection_frequency_is_balanced() {
    let mut r = rng(13);
    let mut count = 0;
    let n = 10_000;
    for _ in 0..n {
        if r.gen_bool(0.5) {
            count += 1;
        }
    }
    let freq = count as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}

#[test]
fn straight_through_grad_matches_surrogate() {
    // Through the discrete path the encoder-latent gradient equals the
    // gradient a plain leaf placed at the accumulated features would get.
    let mut r = rng(14);
    let tok = HybridTokenizer::new(tiny_cfg(), &mut r).unwrap();
    let img = rand_image(16, &mut r);
    let latent = tape::no_grad(|| tok.encode(&img)).unwrap().requires_grad(true);
    let (tokens, _) = tok.quantize(&latent).unwrap();

    tape::reset();
    let dec_in = ops::straight_through(&latent, &tokens.accumulated).unwrap();
    let recon = tok.decode(&dec_in).unwrap();
    let loss = ops::mse(&recon, &img).unwrap();
    tape::backward(&loss).unwrap();
    let st_grad = latent.grad().unwrap();

    // Continuous surrogate: a fresh leaf holding the accumulated features.
    let surrogate = tokens.accumulated.detach().requires_grad(true);
    tape::reset();
    let recon2 = tok.decode(&surrogate).unwrap();
    let loss2 = ops::mse(&recon2, &img).unwrap();
    tape::backward(&loss2).unwrap();
    let direct_grad = surrogate.grad().unwrap();
    for (a, b) in st_grad.iter().zip(&direct_grad) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }

    // And the surrogate's gradient itself passes a finite-difference check.
    let (tok2, img2) = (tok, img);
    let report = check_gradients(&[surrogate.clone()], 10, 1e-3, 1e-3, 15, move || {
        let recon = tok2.decode(&surrogate).unwrap();
        ops::mse(&recon, &img2).unwrap()
    });
    report.assert_ok("decode through accumulated features");
}

#[test]
fn checkpoint_round_trip_preserves_behavior() {
    let mut r = rng(16);
    let mut tok = HybridTokenizer::new(tiny_cfg(), &mut r).unwrap();
    let images: Vec<Tensor> = (0..3).map(|_| rand_image(16, &mut r)).collect();
    tok.compute_norm_stats(&images).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.ckpt");
    tok.save(&path).unwrap();
    let loaded = HybridTokenizer::load(&path).unwrap();
    let img = rand_image(16, &mut r);
    let a = tok.reconstruct(&img, ReconPath::Discrete).unwrap();
    let b = loaded.reconstruct(&img, ReconPath::Discrete).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    let stats = loaded.norm_stats.unwrap();
    assert_eq!(stats.mean.len(), 4);
    assert!(stats.std.iter().all(|&s| s > 0.0));
}
