mod common;

use common::*;
use lsd_core::harness::{format_record, parse_record, Input, Record};
use lsd_core::lattice::{count_decompositions, enumerate_decompositions, DEFAULT_ENUMERATION_LIMIT};
use lsd_core::token::symbols;
use lsd_core::train::{fixed_decomposition, sample_decomposition};
use lsd_core::{Tensor, Vocabulary};
use num_traits::ToPrimitive;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab_and_target() -> impl Strategy<Value = (Vec<String>, String)> {
    let piece = "[abc]{2,4}";
    (prop::collection::vec(piece, 0..10), "[abc ]{1,10}")
}

fn build(pieces: &[String]) -> Vocabulary {
    let mut all: Vec<&str> = vec!["a", "b", "c"];
    for p in pieces {
        if !all.contains(&p.as_str()) {
            all.push(p);
        }
    }
    Vocabulary::from_pieces(&all).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn max_ext_collapses_to_target((pieces, y) in vocab_and_target()) {
        let vocab = build(&pieces);
        let z = vocab.max_ext(&symbols(&y)).unwrap();
        prop_assert_eq!(vocab.collapse(&z).unwrap(), y.clone());
        let fixed = fixed_decomposition(&vocab, &symbols(&y)).unwrap();
        prop_assert_eq!(fixed.last().copied(), Some(vocab.eos()));
        prop_assert_eq!(&fixed[..fixed.len() - 1], &z[..]);
    }

    #[test]
    fn enumeration_matches_count_and_collapses((pieces, y) in vocab_and_target()) {
        let vocab = build(&pieces);
        let y = symbols(&y);
        let count = count_decompositions(&y, &vocab).unwrap().to_usize().unwrap();
        let set = enumerate_decompositions(&y, &vocab, DEFAULT_ENUMERATION_LIMIT).unwrap();
        prop_assert_eq!(set.len(), count);
        prop_assert!(set.items.windows(2).all(|w| w[0] < w[1]));
        let target: String = y.iter().collect();
        for z in &set.items {
            prop_assert!(vocab.is_valid_decomposition(z, &target));
        }
    }

    #[test]
    fn valid_extensions_match_a_prefix((pieces, y) in vocab_and_target(), pos in 0usize..10) {
        let vocab = build(&pieces);
        let y = symbols(&y);
        let pos = pos.min(y.len());
        let ext = vocab.valid_extensions(&y, pos).unwrap();
        for (id, tok) in vocab.tokens().iter().enumerate() {
            let matches = if pos == y.len() {
                tok.is_eos()
            } else {
                !tok.is_eos() && y[pos..].starts_with(&tok.chars)
            };
            prop_assert_eq!(ext.contains(&id), matches, "token {:?}", tok.text);
        }
    }

    #[test]
    fn sampled_decompositions_are_valid((pieces, y) in vocab_and_target(), eps in 0.0f64..=1.0, seed in 0u64..1000) {
        let vocab = build(&pieces);
        let model = random_model(tiny_config(2, vocab.len()), 1.0, seed);
        let x = random_input(5, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_decomposition(&model, &x, &symbols(&y), &vocab, eps, &mut rng).unwrap();
        prop_assert_eq!(z.last().copied(), Some(vocab.eos()));
        prop_assert!(vocab.is_valid_decomposition(&z, &y));
    }

    #[test]
    fn frame_records_round_trip(rows in 1usize..6, cols in 1usize..5, target in "[a-z ]{1,12}", seed in any::<u64>()) {
        let x = random_input(rows, cols, seed).cast::<f32>();
        let record = Record { input: Input::Frames(x), target };
        prop_assert_eq!(parse_record(&format_record(&record).unwrap()).unwrap(), record);
    }

    #[test]
    fn text_records_round_trip(input in "[a-z ]{1,12}", target in "[a-z ]{1,12}") {
        let record = Record { input: Input::Text(input), target };
        prop_assert_eq!(parse_record(&format_record(&record).unwrap()).unwrap(), record);
    }
}

#[test]
fn frame_tensor_round_trip_is_bit_exact() {
    let x = Tensor::from_vec(&[2, 3], vec![0.1f32, -0.0, f32::MIN_POSITIVE, 1e30, -7.25, 3.0]).unwrap();
    let record = Record {
        input: Input::Frames(x),
        target: "ab c".into(),
    };
    let line = format_record(&record).unwrap();
    assert!(line.starts_with("F:2x3:"));
    assert_eq!(parse_record(&line).unwrap(), record);
}
