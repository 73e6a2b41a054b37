mod common;

use common::*;
use lsd_core::model::Model;

const TOL: f64 = 1e-4;

#[test]
fn encoder_weights_match_finite_differences() {
    let model = random_model(tiny_config(3, 6), 0.5, 1);
    let x = random_input(11, 3, 2);
    let z = [2, 4, 1, 0];
    let (_, grads) = model.grad_log_prob(&x, &z).unwrap();
    let coords = coords_with_prefix(&model, "encoder.");
    assert!(coords.len() > 500);
    let f = |m: &Model<f64>| m.log_prob_sequence(&x, &z).unwrap();
    let (err, at) = max_grad_error(&model, &grads, &coords, &f);
    assert!(err <= TOL, "max rel err {err:e} at coordinate {at}");
}

#[test]
fn attention_parameters_match_finite_differences() {
    let model = random_model(tiny_config(3, 6), 0.8, 3);
    let x = random_input(16, 3, 4);
    let z = [5, 3, 3, 1, 0];
    let (_, grads) = model.grad_log_prob(&x, &z).unwrap();
    let coords = coords_with_prefix(&model, "attention.");
    let f = |m: &Model<f64>| m.log_prob_sequence(&x, &z).unwrap();
    let (err, at) = max_grad_error(&model, &grads, &coords, &f);
    assert!(err <= TOL, "max rel err {err:e} at coordinate {at}");
}

#[test]
fn decoder_and_output_match_finite_differences() {
    let model = random_model(tiny_config(2, 5), 0.7, 5);
    let x = random_input(8, 2, 6);
    let z = [1, 2, 3, 4, 0];
    let (_, grads) = model.grad_log_prob(&x, &z).unwrap();
    let mut coords = coords_with_prefix(&model, "decoder.");
    coords.extend(coords_with_prefix(&model, "output."));
    let f = |m: &Model<f64>| m.log_prob_sequence(&x, &z).unwrap();
    let (err, at) = max_grad_error(&model, &grads, &coords, &f);
    assert!(err <= TOL, "max rel err {err:e} at coordinate {at}");
}

#[test]
fn odd_length_inputs_and_no_subsampling() {
    for (subsample, frames) in [(0usize, 5usize), (1, 7), (2, 13)] {
        let cfg = lsd_core::ModelConfig {
            subsample,
            ..tiny_config(3, 4)
        };
        let model = random_model(cfg, 0.6, 7 + subsample as u64);
        let x = random_input(frames, 3, 8);
        let z = [3, 0];
        let (_, grads) = model.grad_log_prob(&x, &z).unwrap();
        let coords = sample_coords(model.params().num_elements(), 300, 9);
        let f = |m: &Model<f64>| m.log_prob_sequence(&x, &z).unwrap();
        let (err, at) = max_grad_error(&model, &grads, &coords, &f);
        assert!(err <= TOL, "subsample {subsample}: max rel err {err:e} at {at}");
    }
}

#[test]
fn zero_model_output_bias_gradient_is_one_hot_minus_uniform() {
    let vocab = 6;
    let model = Model::<f64>::zeros(tiny_config(3, vocab)).unwrap();
    let x = random_input(8, 3, 1);
    let (lp, grads) = model.grad_log_prob(&x, &[4]).unwrap();
    assert!((lp - (1.0 / vocab as f64).ln()).abs() < 1e-12);
    let bias = grads.by_name("output.proj.bias").unwrap();
    for (k, g) in bias.data.iter().enumerate() {
        let expected = if k == 4 { 1.0 } else { 0.0 } - 1.0 / vocab as f64;
        assert!((g - expected).abs() < 1e-12, "k={k}: {g} vs {expected}");
    }
}
