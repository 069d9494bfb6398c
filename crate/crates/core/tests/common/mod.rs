#![allow(dead_code)]

pub mod oracles;

use dsmrefine::nn::{backward, forward, init_weights, BnMode, Tensor, UNetConfig, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small network used by the finite-difference oracle.
pub fn gradcheck_config() -> UNetConfig {
    UNetConfig { input_channels: 3, depth: 2, base_filters: 4, max_filters: 64, tile: 16 }
}

/// Weights with every parameter perturbed away from its structured init
/// (zero output conv, unit scales) so that no gradient path is blocked.
pub fn random_weights(cfg: &UNetConfig, seed: u64) -> WeightSet<f64> {
    let mut w = init_weights::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in w.params_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    w
}

pub fn random_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_vec(c, n, h, w, (0..c * n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Maximum relative error between analytic and central-difference
/// gradients of `L = sum(g * refined)` over all parameters and inputs.
pub fn max_gradient_error(cfg: &UNetConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = random_weights(cfg, seed);
    let x = random_tensor(cfg.input_channels, 2, cfg.tile, cfg.tile, &mut rng);
    let g = random_tensor(1, 2, cfg.tile, cfg.tile, &mut rng);
    let loss = |w: &WeightSet<f64>, x: &Tensor<f64>| {
        let out = forward(w, x, BnMode::Train).unwrap();
        out.refined.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let pass = forward(&w, &x, BnMode::Train).unwrap();
    let grads = backward(&w, &pass, &g).unwrap();
    let h = 1e-6;
    // Conv biases feeding batch norm have an exact zero gradient; their
    // central differences are pure round-off (~1e-9). The floor keeps those
    // from dominating while leaving real gradients (order 1) fully relative.
    let tau = 1e-3;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(tau);
    let mut worst: f64 = 0.0;
    for i in 0..w.params().len() {
        let orig = w.params()[i];
        w.params_mut()[i] = orig + h;
        let lp = loss(&w, &x);
        w.params_mut()[i] = orig - h;
        let lm = loss(&w, &x);
        w.params_mut()[i] = orig;
        worst = worst.max(rel(grads.params[i], (lp - lm) / (2.0 * h)));
    }
    let mut xp = x.clone();
    for i in (0..x.data.len()).step_by(7) {
        let orig = x.data[i];
        xp.data[i] = orig + h;
        let lp = loss(&w, &xp);
        xp.data[i] = orig - h;
        let lm = loss(&w, &xp);
        xp.data[i] = orig;
        worst = worst.max(rel(grads.input.data[i], (lp - lm) / (2.0 * h)));
    }
    worst
}
