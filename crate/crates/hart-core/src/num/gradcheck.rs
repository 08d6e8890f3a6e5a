//! Central finite-difference gradient checking.
//!
//! Probes random parameter scalars, compares the secant slope of the f32
//! forward pass against the tape's gradient, and reports the worst probe.
//! The comparison allows a small absolute floor to absorb f32 quantization
//! of the loss, which dominates once the true derivative is tiny.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::num::tape;
use crate::num::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub fd: f32,
    pub ad: f32,
    pub rel: f32,
    pub pass: bool,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub rtol: f32,
    pub atol: f32,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.probes.iter().all(|p| p.pass)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel.partial_cmp(&b.rel).unwrap_or(std::cmp::Ordering::Equal))
    }

    pub fn assert_ok(&self, what: &str) {
        assert!(
            self.ok(),
            "gradient check failed for {what}: worst probe {:?} (rtol={}, atol={})",
            self.worst(),
            self.rtol,
            self.atol
        );
    }
}

/// Check `n_probes` random scalars of `params` against central differences
/// of `forward` with step `h`. `forward` must be deterministic.
pub fn check_gradients(
    params: &[Tensor],
    n_probes: usize,
    h: f32,
    rtol: f32,
    seed: u64,
    mut forward: impl FnMut() -> Tensor,
) -> GradCheckReport {
    // Reference backward pass.
    tape::reset();
    for p in params {
        p.zero_grad();
    }
    let loss = forward();
    let loss0 = loss.item();
    tape::backward(&loss).expect("gradcheck backward failed");
    let grads: Vec<Option<Vec<f32>>> = params.iter().map(|p| p.grad()).collect();
    tape::reset();

    // f32 loss quantization bounds the resolvable slope.
    let scale = loss0.abs().max(1.0);
    let atol = 8.0 * f32::EPSILON * scale / h;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "gradcheck needs at least one parameter scalar");

    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let param = &params[pi];
        let orig = param.to_vec()[flat];

        param.update_data(|d| d[flat] = orig + h);
        let lp = tape::no_grad(&mut forward).item();
        param.update_data(|d| d[flat] = orig - h);
        let lm = tape::no_grad(&mut forward).item();
        param.update_data(|d| d[flat] = orig);

        let fd = (lp - lm) / (2.0 * h);
        let ad = grads[pi].as_ref().map_or(0.0, |g| g[flat]);
        let denom = fd.abs().max(ad.abs());
        let rel = if denom > 0.0 { (fd - ad).abs() / denom } else { 0.0 };
        let pass = (fd - ad).abs() <= rtol * denom + atol;
        probes.push(Probe { param: pi, index: flat, fd, ad, rel, pass });
    }
    GradCheckReport { probes, rtol, atol }
}
