//! Synthetic frame-input datasets and the TSV dataset format.
//!
//! Each target character is rendered as a run of one to `max_duration` noisy
//! copies of that character's embedding, so the input carries segmentation
//! evidence. Rows are `input-spec<TAB>target`; the input spec is either
//! `F:<T>x<D>:<base64 of little-endian f32 frames>` or a raw string.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LsdError, Result};
use crate::model::Tensor;
use crate::real::Real;
use crate::token::{BaseAlphabet, EOS, SPACE};
use crate::train::Example;

/// Toy target languages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Language {
    /// Words from a small seeded lexicon of consonant-vowel syllables.
    Lexicon,
    /// As `Lexicon`, but with frequent `qu` syllables: every `q` is followed by `u`.
    Qu,
}

impl FromStr for Language {
    type Err = LsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexicon" => Ok(Language::Lexicon),
            "qu" => Ok(Language::Qu),
            _ => Err(LsdError::config(format!(
                "unknown language {s:?} (expected lexicon or qu)"
            ))),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Lexicon => "lexicon",
            Language::Qu => "qu",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub language: Language,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Number of distinct words in the lexicon.
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub max_duration: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            language: Language::Lexicon,
            train_size: 400,
            dev_size: 40,
            test_size: 40,
            lexicon_size: 24,
            min_words: 1,
            max_words: 2,
            feature_dim: 8,
            noise_std: 0.3,
            max_duration: 3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(LsdError::config("train_size must be positive"));
        }
        if self.lexicon_size == 0 || self.min_words == 0 || self.min_words > self.max_words {
            return Err(LsdError::config(
                "need lexicon_size >= 1 and 1 <= min_words <= max_words",
            ));
        }
        if self.feature_dim == 0 || self.max_duration == 0 {
            return Err(LsdError::config("feature_dim and max_duration must be positive"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(LsdError::config("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Input side of a dataset row.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Frames(Tensor<f32>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub input: Input,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Record>,
    pub dev: Vec<Record>,
    pub test: Vec<Record>,
}

/// Generated inputs are zero-padded to at least this many frames.
pub const MIN_FRAMES: usize = 4;

const CONSONANTS: &[char] = &['t', 'r', 's', 'n', 'l', 'k', 'm', 'p'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

fn syllable(rng: &mut ChaCha8Rng, language: Language) -> String {
    if language == Language::Qu && rng.random_bool(0.3) {
        let v = VOWELS[rng.random_range(0..VOWELS.len() - 1)]; // a, e, i, o
        return format!("qu{v}");
    }
    let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
    let v = VOWELS[rng.random_range(0..VOWELS.len())];
    format!("{c}{v}")
}

fn lexicon(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Vec<String> {
    let mut words: Vec<String> = Vec::with_capacity(spec.lexicon_size);
    let mut attempts = 0;
    while words.len() < spec.lexicon_size {
        let n = rng.random_range(1..=3);
        let w: String = (0..n).map(|_| syllable(rng, spec.language)).collect();
        attempts += 1;
        if !words.contains(&w) || attempts > 100 * spec.lexicon_size {
            words.push(w);
        }
    }
    words
}

/// Symbols that can appear in targets of `language`.
pub fn language_alphabet(language: Language) -> BaseAlphabet {
    let mut symbols: Vec<char> = CONSONANTS.iter().chain(VOWELS).copied().collect();
    if language == Language::Qu {
        symbols.push('q');
    }
    BaseAlphabet::new(symbols)
}

/// Renders a target as noisy embedded frames.
fn render(target: &str, embeddings: &[(char, Vec<f32>)], spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut data = Vec::new();
    let mut frames = 0;
    for c in target.chars() {
        let emb = &embeddings.iter().find(|(s, _)| *s == c).expect("symbol in alphabet").1;
        for _ in 0..rng.random_range(1..=spec.max_duration) {
            data.extend(emb.iter().map(|&e| e + noise.sample(rng) as f32));
            frames += 1;
        }
    }
    // the default encoder shortens time fourfold and needs that many frames
    while frames < MIN_FRAMES {
        data.extend(std::iter::repeat_n(0.0, spec.feature_dim));
        frames += 1;
    }
    Tensor::from_vec(&[frames, spec.feature_dim], data).expect("consistent frame size")
}

/// Deterministic train/dev/test splits for `spec`. Word frequencies follow a
/// Zipf-like `1/rank` law over the lexicon.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alphabet = language_alphabet(spec.language);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let embeddings: Vec<(char, Vec<f32>)> = alphabet
        .symbols()
        .iter()
        .filter(|&&c| c != EOS)
        .map(|&c| (c, (0..spec.feature_dim).map(|_| unit.sample(&mut rng) as f32).collect()))
        .collect();
    let words = lexicon(&mut rng, spec);
    let weights: Vec<f64> = (1..=words.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();

    let make = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Record> {
        (0..n)
            .map(|_| {
                let count = rng.random_range(spec.min_words..=spec.max_words);
                let target = (0..count)
                    .map(|_| {
                        let mut u = rng.random::<f64>() * total;
                        let mut pick = words.len() - 1;
                        for (i, w) in weights.iter().enumerate() {
                            if u < *w {
                                pick = i;
                                break;
                            }
                            u -= w;
                        }
                        words[pick].clone()
                    })
                    .collect::<Vec<_>>()
                    .join(&SPACE.to_string());
                let input = Input::Frames(render(&target, &embeddings, spec, rng));
                Record { input, target }
            })
            .collect()
    };
    let train = make(spec.train_size, &mut rng);
    let dev = make(spec.dev_size, &mut rng);
    let test = make(spec.test_size, &mut rng);
    Ok(Splits { train, dev, test })
}

/// One TSV row without the trailing newline.
pub fn format_record(r: &Record) -> Result<String> {
    if r.target.contains(['\t', '\n']) {
        return Err(LsdError::input("targets may not contain tabs or newlines"));
    }
    let input = match &r.input {
        Input::Frames(t) => {
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            format!("F:{}x{}:{}", t.rows(), t.cols(), B64.encode(bytes))
        }
        Input::Text(s) => {
            if s.contains(['\t', '\n']) || s.starts_with("F:") {
                return Err(LsdError::input(
                    "text inputs may not contain tabs or newlines or start with F:",
                ));
            }
            s.clone()
        }
    };
    Ok(format!("{input}\t{}", r.target))
}

pub fn parse_record(line: &str) -> Result<Record> {
    let (input, target) = line
        .split_once('\t')
        .ok_or_else(|| LsdError::input("dataset row needs input<TAB>target"))?;
    if target.contains('\t') {
        return Err(LsdError::input("dataset row has more than two columns"));
    }
    let input = match input.strip_prefix("F:") {
        Some(rest) => {
            let (dims, payload) = rest
                .split_once(':')
                .ok_or_else(|| LsdError::input("frame spec needs F:<T>x<D>:<base64>"))?;
            let (t, d) = dims
                .split_once('x')
                .and_then(|(t, d)| Some((t.parse::<usize>().ok()?, d.parse::<usize>().ok()?)))
                .ok_or_else(|| LsdError::input(format!("bad frame dimensions {dims:?}")))?;
            let bytes = B64
                .decode(payload)
                .map_err(|e| LsdError::input(format!("bad base64 frame payload: {e}")))?;
            if t == 0 || d == 0 || bytes.len() != t * d * 4 {
                return Err(LsdError::input(format!(
                    "frame payload has {} bytes, expected {t}x{d} f32 values",
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Input::Frames(Tensor::from_vec(&[t, d], data)?)
        }
        None => Input::Text(input.to_string()),
    };
    Ok(Record {
        input,
        target: target.to_string(),
    })
}

pub fn write_tsv(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(format_record(r)?.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| LsdError::io(path, e))?;
    f.write_all(&out).map_err(|e| LsdError::io(path, e))
}

pub fn read_tsv(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path).map_err(|e| LsdError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LsdError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|e| LsdError::input(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

/// Writes `train.tsv`, `dev.tsv` and `test.tsv` into `dir`.
pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LsdError::io(dir, e))?;
    write_tsv(&dir.join("train.tsv"), &splits.train)?;
    write_tsv(&dir.join("dev.tsv"), &splits.dev)?;
    write_tsv(&dir.join("test.tsv"), &splits.test)
}

/// Maps records to model inputs. Frame inputs must all have the same width;
/// text inputs become one-hot frames over `text_alphabet`.
#[derive(Debug, Clone, PartialEq)]
pub enum InputEncoder {
    Frames { dim: usize },
    OneHot { alphabet: Vec<char> },
}

impl InputEncoder {
    /// Infers the encoding from training records.
    pub fn fit(records: &[Record]) -> Result<Self> {
        match records.first().map(|r| &r.input) {
            None => Err(LsdError::input("no records to infer the input format from")),
            Some(Input::Frames(t)) => Ok(InputEncoder::Frames { dim: t.cols() }),
            Some(Input::Text(_)) => {
                let mut alphabet: Vec<char> = Vec::new();
                for r in records {
                    if let Input::Text(s) = &r.input {
                        alphabet.extend(s.chars());
                    }
                }
                alphabet.sort_unstable();
                alphabet.dedup();
                Ok(InputEncoder::OneHot { alphabet })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InputEncoder::Frames { dim } => *dim,
            InputEncoder::OneHot { alphabet } => alphabet.len().max(1),
        }
    }

    pub fn encode<F: Real>(&self, input: &Input) -> Result<Tensor<F>> {
        match (self, input) {
            (InputEncoder::Frames { dim }, Input::Frames(t)) => {
                if t.cols() != *dim {
                    return Err(LsdError::input(format!("frame width {} but expected {dim}", t.cols())));
                }
                Ok(t.cast())
            }
            (InputEncoder::OneHot { alphabet }, Input::Text(s)) => {
                let dim = self.dim();
                let chars: Vec<char> = s.chars().collect();
                let rows = chars.len().max(1);
                let mut data = vec![F::zero(); rows * dim];
                for (i, c) in chars.iter().enumerate() {
                    // symbols unseen in training map to an all-zero frame
                    if let Ok(k) = alphabet.binary_search(c) {
                        data[i * dim + k] = F::one();
                    }
                }
                Tensor::from_vec(&[rows, dim], data)
            }
            _ => Err(LsdError::input("dataset mixes frame and text inputs")),
        }
    }

    pub fn examples<F: Real>(&self, records: &[Record]) -> Result<Vec<Example<F>>> {
        records
            .iter()
            .map(|r| Ok(Example::new(self.encode(&r.input)?, &r.target)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let spec = DatasetSpec {
            train_size: 20,
            dev_size: 3,
            test_size: 4,
            ..Default::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (20, 3, 4));
        let c = generate_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn qu_language_constraint() {
        let spec = DatasetSpec {
            language: Language::Qu,
            train_size: 200,
            ..Default::default()
        };
        let d = generate_dataset(&spec).unwrap();
        let mut qs = 0;
        for r in d.train.iter().chain(&d.dev).chain(&d.test) {
            let chars: Vec<char> = r.target.chars().collect();
            for (i, &c) in chars.iter().enumerate() {
                if c == 'q' {
                    qs += 1;
                    assert_eq!(chars.get(i + 1), Some(&'u'), "{}", r.target);
                }
            }
        }
        assert!(qs > 50);
    }

    #[test]
    fn frames_track_durations() {
        let spec = DatasetSpec {
            train_size: 30,
            max_duration: 3,
            ..Default::default()
        };
        for r in generate_dataset(&spec).unwrap().train {
            let Input::Frames(t) = &r.input else { panic!() };
            let n = r.target.chars().count();
            assert!(t.rows() >= n.min(MIN_FRAMES) && t.rows() <= (3 * n).max(MIN_FRAMES));
            assert_eq!(t.cols(), 8);
        }
    }

    #[test]
    fn tsv_round_trip() {
        let spec = DatasetSpec {
            train_size: 5,
            dev_size: 0,
            test_size: 0,
            ..Default::default()
        };
        let mut recs = generate_dataset(&spec).unwrap().train;
        recs.push(Record {
            input: Input::Text("hello".into()),
            target: "h e".into(),
        });
        for r in &recs {
            let line = format_record(r).unwrap();
            assert_eq!(&parse_record(&line).unwrap(), r);
        }
        assert!(parse_record("F:2x2:AAAA\tx").is_err());
        assert!(parse_record("no tab").is_err());
    }

    #[test]
    fn one_hot_text_inputs() {
        let recs = vec![
            Record {
                input: Input::Text("ab".into()),
                target: "x".into(),
            },
            Record {
                input: Input::Text("ca".into()),
                target: "y".into(),
            },
        ];
        let enc = InputEncoder::fit(&recs).unwrap();
        assert_eq!(enc.dim(), 3);
        let t: Tensor<f64> = enc.encode(&recs[1].input).unwrap();
        assert_eq!(t.data, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
