//! Shared fixtures for integration tests: tiny models, random inputs and a
//! central finite-difference oracle that only ever calls forward evaluation.
#![allow(dead_code)]

use lsd_core::model::{Model, ModelConfig, Tensor};
use lsd_core::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn example_vocab() -> Vocabulary {
    Vocabulary::from_pieces(&["a", "b", "c", "t", "at", "ca", "cat"]).unwrap()
}

pub fn tiny_config(input_dim: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        vocab_size: vocab,
        enc_hidden: 3,
        enc_layers: 3,
        subsample: 2,
        dec_hidden: 4,
        att_dim: 3,
        emb_dim: 3,
        mlp_hidden: 4,
    }
}

/// Model with every parameter uniform in `[-scale, scale]`.
pub fn random_model(config: ModelConfig, scale: f64, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::zeros(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut().tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
    m
}

pub fn random_input(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        &[frames, dim],
        (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Large enough that rounding in the difference stays well below the
/// relative-error floor for gradients near 1e-6.
pub const FD_STEP: f64 = 1e-4;

/// Central difference of `f` with respect to flat parameter `coord`.
pub fn central_difference(model: &Model<f64>, coord: usize, f: &dyn Fn(&Model<f64>) -> f64) -> f64 {
    let mut m = model.clone();
    let x0 = m.params().flat(coord);
    m.params_mut().set_flat(coord, x0 + FD_STEP);
    let plus = f(&m);
    m.params_mut().set_flat(coord, x0 - FD_STEP);
    let minus = f(&m);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is ~0 are judged on absolute agreement.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Distinct coordinates, `n` of them (or all if fewer), chosen with a seeded RNG.
pub fn sample_coords(total: usize, n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, total, n.min(total)).into_vec();
    v.sort_unstable();
    v
}

/// Indices of coordinates belonging to tensors whose name starts with `prefix`.
pub fn coords_with_prefix(model: &Model<f64>, prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut base = 0;
    for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
        if name.starts_with(prefix) {
            out.extend(base..base + t.len());
        }
        base += t.len();
    }
    out
}

/// Largest relative error over `coords`.
pub fn max_grad_error(
    model: &Model<f64>,
    analytic: &lsd_core::ParamSet<f64>,
    coords: &[usize],
    f: &dyn Fn(&Model<f64>) -> f64,
) -> (f64, usize) {
    coords
        .iter()
        .map(|&c| (rel_err(analytic.flat(c), central_difference(model, c, f)), c))
        .fold((0.0, 0), |acc, e| if e.0 > acc.0 { e } else { acc })
}
