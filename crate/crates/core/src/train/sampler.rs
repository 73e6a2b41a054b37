//! Left-to-right epsilon-greedy sampling of a decomposition of a known target.

use rand::Rng;

use crate::error::{LsdError, Result};
use crate::lattice::{enumerate_decompositions, DecompositionSet};
use crate::model::{Model, Tape, Tensor};
use crate::real::{log_sum_exp, Real};
use crate::token::{Decomposition, TokenId, Vocabulary};

/// Probabilities of choosing each of `valid` given the model's next-token
/// log-probabilities: `epsilon` uniform, `1 - epsilon` model mass renormalised
/// over the valid set.
fn choice_probs<F: Real>(log_probs: &[F], valid: &[TokenId], epsilon: f64) -> Vec<f64> {
    let scores: Vec<f64> = valid.iter().map(|&k| log_probs[k].to_f64_lossy()).collect();
    let total = log_sum_exp(&scores);
    let uniform = 1.0 / valid.len() as f64;
    scores
        .iter()
        .map(|&s| {
            let model = if total.is_finite() { (s - total).exp() } else { uniform };
            epsilon * uniform + (1.0 - epsilon) * model
        })
        .collect()
}

fn pick<F: Real, R: Rng + ?Sized>(log_probs: &[F], valid: &[TokenId], epsilon: f64, rng: &mut R) -> TokenId {
    if rng.random::<f64>() < epsilon {
        return valid[rng.random_range(0..valid.len())];
    }
    let scores: Vec<f64> = valid.iter().map(|&k| log_probs[k].to_f64_lossy()).collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return valid[rng.random_range(0..valid.len())];
    }
    let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let u = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (w, &k) in weights.iter().zip(valid) {
        acc += w;
        if u < acc {
            return k;
        }
    }
    *valid.last().expect("non-empty")
}

/// Samples a decomposition of `y` (terminated by end-of-sequence) and returns
/// the tape of the forward pass along it, ready for backpropagation.
pub fn sample_with_tape<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[char],
    vocab: &Vocabulary,
    epsilon: f64,
    rng: &mut R,
) -> Result<(Decomposition, Tape<F>)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(LsdError::config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    vocab.check_target(y)?;
    let mut rec = model.record(x)?;
    let mut pos = 0;
    loop {
        let valid = vocab.valid_extensions(y, pos)?;
        let tok = if valid.len() == 1 {
            rec.distribution()?;
            valid[0]
        } else {
            let lp = rec.distribution()?;
            pick(lp, &valid, epsilon, rng)
        };
        rec.emit(tok)?;
        if tok == vocab.eos() {
            break;
        }
        pos += vocab.tokens()[tok].len();
    }
    let z = Decomposition::new(rec.emitted().to_vec());
    Ok((z, rec.finish()))
}

/// Samples a decomposition of `y`, terminated by end-of-sequence.
pub fn sample_decomposition<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[char],
    vocab: &Vocabulary,
    epsilon: f64,
    rng: &mut R,
) -> Result<Decomposition> {
    Ok(sample_with_tape(model, x, y, vocab, epsilon, rng)?.0)
}

/// Exact distribution of the sampler's output over every decomposition of
/// `y`, as log-weights on the enumerated set (items without end-of-sequence).
pub fn sampler_distribution<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[char],
    vocab: &Vocabulary,
    epsilon: f64,
    limit: usize,
) -> Result<DecompositionSet> {
    let mut set = enumerate_decompositions(y, vocab, limit)?;
    let enc = model.encode(x)?;
    let mut logs = Vec::with_capacity(set.len());
    for z in &set.items {
        let mut state = model.initial_state();
        let mut prev = model.start_token();
        let mut pos = 0;
        let mut total = 0.0;
        for &tok in z.iter() {
            let out = model.decode_step(&enc, &state, prev)?;
            let valid = vocab.valid_extensions(y, pos)?;
            let probs = choice_probs(&out.log_probs, &valid, epsilon);
            let k = valid
                .iter()
                .position(|&v| v == tok)
                .expect("enumerated paths are valid");
            total += probs[k].ln();
            pos += vocab.tokens()[tok].len();
            state = out.state;
            prev = tok;
        }
        logs.push(total);
    }
    set.log_weights = Some(logs);
    Ok(set)
}

/// Total-variation distance between two weightings of the same set.
pub fn total_variation(a: &DecompositionSet, b: &DecompositionSet) -> Result<f64> {
    if a.items != b.items {
        return Err(LsdError::input("distributions are over different decomposition sets"));
    }
    let (wa, wb) = match (a.weights(), b.weights()) {
        (Some(wa), Some(wb)) => (wa, wb),
        _ => return Err(LsdError::input("decomposition set has no weights")),
    };
    Ok(0.5 * wa.iter().zip(&wb).map(|(p, q)| (p - q).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model<f64>, Tensor<f64>, Vocabulary) {
        let vocab = Vocabulary::from_pieces(&["c", "a", "t", "s", "ca", "at", "cat"]).unwrap();
        let cfg = ModelConfig {
            input_dim: 3,
            vocab_size: vocab.len(),
            enc_hidden: 3,
            enc_layers: 2,
            subsample: 1,
            dec_hidden: 4,
            att_dim: 3,
            emb_dim: 3,
            mlp_hidden: 4,
        };
        let mut model = Model::<f64>::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        model.params_mut().init_uniform(1.0, &mut rng);
        let x = Tensor::from_vec(&[5, 3], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        (model, x, vocab)
    }

    #[test]
    fn samples_are_valid_and_terminated() {
        let (model, x, vocab) = setup();
        let y: Vec<char> = "cats".chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for eps in [0.0, 0.3, 1.0] {
            for _ in 0..50 {
                let (z, tape) = sample_with_tape(&model, &x, &y, &vocab, eps, &mut rng).unwrap();
                assert_eq!(*z.last().unwrap(), vocab.eos());
                assert_eq!(vocab.collapse(&z).unwrap(), "cats");
                let direct = model.log_prob_sequence(&x, &z).unwrap();
                assert!((tape.log_prob().unwrap() - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distribution_sums_to_one_and_eps_one_is_uniform_per_step() {
        let (model, x, vocab) = setup();
        let y: Vec<char> = "cat".chars().collect();
        for eps in [0.0, 0.5, 1.0] {
            let d = sampler_distribution(&model, &x, &y, &vocab, eps, 1000).unwrap();
            let s: f64 = d.weights().unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // cat: c-a-t, c-at, ca-t, cat; the first step picks among {c, ca, cat}
        let d = sampler_distribution(&model, &x, &y, &vocab, 1.0, 1000).unwrap();
        let w = d.weights().unwrap();
        let by = |pieces: &[&str]| w[d.items.iter().position(|z| **z == *vocab.ids(pieces)).unwrap()];
        assert!((by(&["cat"]) - 1.0 / 3.0).abs() < 1e-12);
        assert!((by(&["c", "a", "t"]) - 1.0 / 6.0).abs() < 1e-12);
        assert!((by(&["ca", "t"]) - 1.0 / 3.0).abs() < 1e-12);
        assert!(total_variation(&d, &d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_epsilon_and_target() {
        let (model, x, vocab) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_decomposition(&model, &x, &['c'], &vocab, 1.5, &mut rng).is_err());
        assert!(sample_decomposition(&model, &x, &['z'], &vocab, 0.5, &mut rng).is_err());
    }
}
