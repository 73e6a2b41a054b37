//! Flat `key = value` experiment configuration. Blank lines and text after
//! `#` are ignored. Every key is listed in [`KEYS`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decode::BeamConfig;
use crate::error::{LsdError, Result};
use crate::model::ModelConfig;
use crate::real::Precision;
use crate::train::{EpsilonSchedule, OptimizerConfig, ScheduleShape, TrainConfig, TrainMode};

use super::dataset::{DatasetSpec, Language};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "experiment name, used in reports"),
    ("seed", "seed for data generation, initialisation and sampling"),
    ("threads", "worker cap; 0 = all cores, 1 = sequential"),
    ("modes", "comma-separated subset of lsd, maxext, char-baseline"),
    ("precision", "f32 or f64"),
    (
        "data.train",
        "training TSV (with data.dev and data.test replaces the generator)",
    ),
    ("data.dev", "validation TSV"),
    ("data.test", "test TSV"),
    ("data.language", "generator language: lexicon or qu"),
    ("data.train_size", "generated training examples"),
    ("data.dev_size", "generated validation examples"),
    ("data.test_size", "generated test examples"),
    ("data.lexicon_size", "distinct words in the generated lexicon"),
    ("data.min_words", "minimum words per generated target"),
    ("data.max_words", "maximum words per generated target"),
    ("data.feature_dim", "generated frame width"),
    ("data.noise_std", "additive frame noise"),
    ("data.max_duration", "maximum frames per character"),
    ("vocab.path", "vocabulary file (overrides vocab.n_max and vocab.size)"),
    ("vocab.n_max", "longest token in characters"),
    ("vocab.size", "vocabulary size including singletons and end-of-sequence"),
    ("model.enc_hidden", "encoder units per direction"),
    ("model.enc_layers", "encoder layers"),
    (
        "model.subsample",
        "lower encoder layers followed by pairwise frame concatenation",
    ),
    ("model.dec_hidden", "decoder units"),
    ("model.att_dim", "attention hidden size"),
    ("model.emb_dim", "token embedding size"),
    ("model.mlp_hidden", "output MLP hidden size"),
    ("train.steps", "optimizer updates"),
    ("train.batch_size", "examples per update"),
    ("train.eval_every", "validation interval in steps; 0 disables"),
    ("train.patience", "evaluations without improvement before stopping"),
    ("train.eval_max_steps", "decode-length cap during validation"),
    (
        "train.record_wall_time",
        "true or false; false makes stats byte-reproducible",
    ),
    ("epsilon.start", "initial exploration rate"),
    ("epsilon.end", "final exploration rate"),
    (
        "epsilon.decay_steps",
        "steps to reach epsilon.end (default: a quarter of train.steps)",
    ),
    ("epsilon.shape", "linear or exponential"),
    ("optim.beta1", "Adam first-moment decay"),
    ("optim.beta2", "Adam second-moment decay"),
    ("optim.adam_eps", "Adam stabiliser"),
    ("optim.lr_start", "initial learning rate"),
    ("optim.lr_end", "final learning rate"),
    ("optim.lr_shape", "linear or exponential"),
    ("optim.grad_clip_norm", "global gradient norm bound; 0 disables"),
    ("optim.weight_noise_std", "Gaussian weight noise during training"),
    ("optim.l2_decay", "L2 weight decay"),
    ("decode.beam_width", "beam width"),
    ("decode.max_steps", "decode-length cap"),
    ("decode.n_best", "hypotheses kept per input"),
    ("decode.collapse_merge", "merge n-best rows with the same output string"),
    (
        "decode.length_penalty",
        "per-token bonus added when ranking finished hypotheses",
    ),
    ("report.nbest_samples", "test inputs included in the n-best dump"),
];

/// Where examples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Generate(DatasetSpec),
    Files {
        train: PathBuf,
        dev: PathBuf,
        test: PathBuf,
    },
}

/// Model dimensions other than the input width and vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub subsample: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub emb_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1);
        ModelDims {
            enc_hidden: d.enc_hidden,
            enc_layers: d.enc_layers,
            subsample: d.subsample,
            dec_hidden: d.dec_hidden,
            att_dim: d.att_dim,
            emb_dim: d.emb_dim,
            mlp_hidden: d.mlp_hidden,
        }
    }
}

impl ModelDims {
    pub fn config(&self, input_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            vocab_size,
            enc_hidden: self.enc_hidden,
            enc_layers: self.enc_layers,
            subsample: self.subsample,
            dec_hidden: self.dec_hidden,
            att_dim: self.att_dim,
            emb_dim: self.emb_dim,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: String,
    pub seed: u64,
    pub threads: usize,
    pub modes: Vec<TrainMode>,
    pub precision: Precision,
    pub data: DataSource,
    pub vocab_path: Option<PathBuf>,
    pub n_max: usize,
    pub vocab_size: usize,
    pub model: ModelDims,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub patience: usize,
    pub eval_max_steps: usize,
    pub record_wall_time: bool,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// `None` means a quarter of `steps`.
    pub epsilon_decay_steps: Option<u64>,
    pub epsilon_shape: ScheduleShape,
    pub optimizer: OptimizerConfig,
    pub decode: BeamConfig,
    pub nbest_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: "synthetic".into(),
            seed: 0,
            threads: 0,
            modes: vec![TrainMode::Lsd],
            precision: Precision::F32,
            data: DataSource::Generate(DatasetSpec::default()),
            vocab_path: None,
            n_max: 2,
            vocab_size: 32,
            model: ModelDims::default(),
            steps: 1000,
            batch_size: 16,
            eval_every: 100,
            patience: 10,
            eval_max_steps: 100,
            record_wall_time: true,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_steps: None,
            epsilon_shape: ScheduleShape::Linear,
            optimizer: OptimizerConfig::default(),
            decode: BeamConfig {
                max_steps: 100,
                ..BeamConfig::default()
            },
            nbest_samples: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LsdError::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(LsdError::config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn epsilon(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            decay_steps: self.epsilon_decay_steps.unwrap_or((self.steps / 4).max(1)),
            shape: self.epsilon_shape,
        }
    }

    /// Training settings for `mode` with a per-mode seed.
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            epsilon: self.epsilon(),
            optimizer: self.optimizer.clone(),
            eval_every: self.eval_every,
            patience: self.patience,
            eval_max_steps: self.eval_max_steps,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(LsdError::config("modes must name at least one mode"));
        }
        if self.n_max == 0 {
            return Err(LsdError::config("vocab.n_max must be at least 1"));
        }
        if let DataSource::Generate(spec) = &self.data {
            spec.validate()?;
        }
        self.model.config(1, 2).validate()?;
        self.train_config(TrainMode::Lsd).validate()?;
        self.decode.validate()
    }

    fn dataset_mut(&mut self) -> Result<&mut DatasetSpec> {
        match &mut self.data {
            DataSource::Generate(spec) => Ok(spec),
            DataSource::Files { .. } => Err(LsdError::config(
                "generator keys cannot be combined with data file paths",
            )),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "task" => self.task = v.to_string(),
            "seed" => {
                self.seed = parse(key, v)?;
                if let DataSource::Generate(spec) = &mut self.data {
                    spec.seed = self.seed;
                }
            }
            "threads" => self.threads = parse(key, v)?,
            "modes" | "mode" => {
                self.modes = v
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<Vec<TrainMode>>>()?;
            }
            "precision" => self.precision = parse(key, v)?,
            "data.train" | "data.dev" | "data.test" => {
                let path = PathBuf::from(v);
                let (mut train, mut dev, mut test) = match &self.data {
                    DataSource::Files { train, dev, test } => (train.clone(), dev.clone(), test.clone()),
                    DataSource::Generate(_) => Default::default(),
                };
                match key {
                    "data.train" => train = path,
                    "data.dev" => dev = path,
                    _ => test = path,
                }
                self.data = DataSource::Files { train, dev, test };
            }
            "data.language" => self.dataset_mut()?.language = parse::<Language>(key, v)?,
            "data.train_size" => self.dataset_mut()?.train_size = parse(key, v)?,
            "data.dev_size" => self.dataset_mut()?.dev_size = parse(key, v)?,
            "data.test_size" => self.dataset_mut()?.test_size = parse(key, v)?,
            "data.lexicon_size" => self.dataset_mut()?.lexicon_size = parse(key, v)?,
            "data.min_words" => self.dataset_mut()?.min_words = parse(key, v)?,
            "data.max_words" => self.dataset_mut()?.max_words = parse(key, v)?,
            "data.feature_dim" => self.dataset_mut()?.feature_dim = parse(key, v)?,
            "data.noise_std" => self.dataset_mut()?.noise_std = parse(key, v)?,
            "data.max_duration" => self.dataset_mut()?.max_duration = parse(key, v)?,
            "vocab.path" => self.vocab_path = Some(PathBuf::from(v)),
            "vocab.n_max" => self.n_max = parse(key, v)?,
            "vocab.size" => self.vocab_size = parse(key, v)?,
            "model.enc_hidden" => self.model.enc_hidden = parse(key, v)?,
            "model.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "model.subsample" => self.model.subsample = parse(key, v)?,
            "model.dec_hidden" => self.model.dec_hidden = parse(key, v)?,
            "model.att_dim" => self.model.att_dim = parse(key, v)?,
            "model.emb_dim" => self.model.emb_dim = parse(key, v)?,
            "model.mlp_hidden" => self.model.mlp_hidden = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "train.patience" => self.patience = parse(key, v)?,
            "train.eval_max_steps" => self.eval_max_steps = parse(key, v)?,
            "train.record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            "epsilon.start" => self.epsilon_start = parse(key, v)?,
            "epsilon.end" => self.epsilon_end = parse(key, v)?,
            "epsilon.decay_steps" => self.epsilon_decay_steps = Some(parse(key, v)?),
            "epsilon.shape" => self.epsilon_shape = parse(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "optim.adam_eps" => self.optimizer.adam_eps = parse(key, v)?,
            "optim.lr_start" => self.optimizer.lr_start = parse(key, v)?,
            "optim.lr_end" => self.optimizer.lr_end = parse(key, v)?,
            "optim.lr_shape" => self.optimizer.lr_shape = parse(key, v)?,
            "optim.grad_clip_norm" => self.optimizer.grad_clip_norm = parse(key, v)?,
            "optim.weight_noise_std" => self.optimizer.weight_noise_std = parse(key, v)?,
            "optim.l2_decay" => self.optimizer.l2_decay = parse(key, v)?,
            "decode.beam_width" => self.decode.beam_width = parse(key, v)?,
            "decode.max_steps" => self.decode.max_steps = parse(key, v)?,
            "decode.n_best" => self.decode.n_best = parse(key, v)?,
            "decode.collapse_merge" => self.decode.collapse_merge = parse_bool(key, v)?,
            "decode.length_penalty" => self.decode.length_penalty = parse(key, v)?,
            "report.nbest_samples" => self.nbest_samples = parse(key, v)?,
            _ => {
                return Err(LsdError::config(format!(
                    "unknown key {key:?}; accepted keys are listed by `lsd report --keys`"
                )))
            }
        }
        Ok(())
    }

    /// Parses config text over the defaults. Later lines override earlier ones.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LsdError::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| LsdError::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LsdError::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.clone());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv(
            "modes",
            self.modes.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        kv("precision", self.precision.to_string());
        match &self.data {
            DataSource::Files { train, dev, test } => {
                kv("data.train", train.display().to_string());
                kv("data.dev", dev.display().to_string());
                kv("data.test", test.display().to_string());
            }
            DataSource::Generate(d) => {
                kv("data.language", d.language.to_string());
                kv("data.train_size", d.train_size.to_string());
                kv("data.dev_size", d.dev_size.to_string());
                kv("data.test_size", d.test_size.to_string());
                kv("data.lexicon_size", d.lexicon_size.to_string());
                kv("data.min_words", d.min_words.to_string());
                kv("data.max_words", d.max_words.to_string());
                kv("data.feature_dim", d.feature_dim.to_string());
                kv("data.noise_std", d.noise_std.to_string());
                kv("data.max_duration", d.max_duration.to_string());
            }
        }
        if let Some(p) = &self.vocab_path {
            kv("vocab.path", p.display().to_string());
        }
        kv("vocab.n_max", self.n_max.to_string());
        kv("vocab.size", self.vocab_size.to_string());
        let m = &self.model;
        kv("model.enc_hidden", m.enc_hidden.to_string());
        kv("model.enc_layers", m.enc_layers.to_string());
        kv("model.subsample", m.subsample.to_string());
        kv("model.dec_hidden", m.dec_hidden.to_string());
        kv("model.att_dim", m.att_dim.to_string());
        kv("model.emb_dim", m.emb_dim.to_string());
        kv("model.mlp_hidden", m.mlp_hidden.to_string());
        kv("train.steps", self.steps.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.eval_every", self.eval_every.to_string());
        kv("train.patience", self.patience.to_string());
        kv("train.eval_max_steps", self.eval_max_steps.to_string());
        kv("train.record_wall_time", self.record_wall_time.to_string());
        kv("epsilon.start", self.epsilon_start.to_string());
        kv("epsilon.end", self.epsilon_end.to_string());
        if let Some(d) = self.epsilon_decay_steps {
            kv("epsilon.decay_steps", d.to_string());
        }
        kv("epsilon.shape", self.epsilon_shape.to_string());
        let o = &self.optimizer;
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.adam_eps", o.adam_eps.to_string());
        kv("optim.lr_start", o.lr_start.to_string());
        kv("optim.lr_end", o.lr_end.to_string());
        kv("optim.lr_shape", o.lr_shape.to_string());
        kv("optim.grad_clip_norm", o.grad_clip_norm.to_string());
        kv("optim.weight_noise_std", o.weight_noise_std.to_string());
        kv("optim.l2_decay", o.l2_decay.to_string());
        let d = &self.decode;
        kv("decode.beam_width", d.beam_width.to_string());
        kv("decode.max_steps", d.max_steps.to_string());
        kv("decode.n_best", d.n_best.to_string());
        kv("decode.collapse_merge", d.collapse_merge.to_string());
        kv("decode.length_penalty", d.length_penalty.to_string());
        kv("report.nbest_samples", self.nbest_samples.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = ExperimentConfig::parse_str(
            "# sweep\nmodes = char-baseline, maxext,lsd\nseed = 7  # trailing\n\ntrain.steps = 40\nepsilon.end = 0\n",
        )
        .unwrap();
        assert_eq!(
            cfg.modes,
            vec![TrainMode::CharBaseline, TrainMode::MaxExt, TrainMode::Lsd]
        );
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epsilon().decay_steps, 10);
        assert_eq!(cfg.epsilon_end, 0.0);
        let DataSource::Generate(spec) = &cfg.data else {
            panic!()
        };
        assert_eq!(spec.seed, 7);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let e = ExperimentConfig::parse_str("bogus = 1").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
        assert!(ExperimentConfig::parse_str("train.steps = many").is_err());
        assert!(ExperimentConfig::parse_str("no equals sign").is_err());
        assert!(ExperimentConfig::parse_str("decode.n_best = 20").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("modes", "maxext,lsd").unwrap();
        cfg.set("epsilon.decay_steps", "12").unwrap();
        cfg.set("optim.weight_noise_std", "0").unwrap();
        let again = ExperimentConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        let files = ExperimentConfig::parse_str("data.train = a.tsv\ndata.dev = b.tsv\ndata.test = c.tsv").unwrap();
        assert_eq!(ExperimentConfig::parse_str(&files.to_text()).unwrap(), files);
    }

    #[test]
    fn every_key_is_settable() {
        for (key, _) in KEYS {
            let mut cfg = ExperimentConfig::default();
            let value = match *key {
                "task" | "data.train" | "data.dev" | "data.test" | "vocab.path" => "x",
                "modes" => "lsd",
                "precision" => "f64",
                "data.language" => "qu",
                "epsilon.shape" | "optim.lr_shape" => "linear",
                "train.record_wall_time" | "decode.collapse_merge" => "false",
                _ => "1",
            };
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
