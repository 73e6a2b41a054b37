use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::decode::{
    coverage_distribution, decode_batch, edit_distance_metrics, format_nbest, BeamConfig, ErrorRate, Hypothesis, Unit,
};
use crate::error::{LsdError, Result};
use crate::model::Model;
use crate::par;
use crate::real::{Precision, Real};
use crate::token::{BaseAlphabet, Decomposition, Vocabulary};
use crate::train::{train_run, Example, TrainMode, TrainOutcome};
use crate::vocab::{build_vocab, count_ngrams};

use super::config::{DataSource, ExperimentConfig};
use super::dataset::{generate_dataset, read_tsv, write_splits, InputEncoder, Record, Splits};

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub mode: TrainMode,
    pub n_max: usize,
    pub size: usize,
    pub wer: f64,
    pub cer: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "mode,n_max,size,wer,cer";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.mode, self.n_max, self.size, self.wer, self.cer
        )
    }
}

/// Results for one training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub metrics: MetricsRow,
    /// Character coverage by token length over the top test decodes.
    pub coverage: BTreeMap<usize, f64>,
    /// Top decode per test example.
    pub decodes: Vec<Option<Hypothesis>>,
    pub best_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub modes: Vec<ModeReport>,
}

impl ExperimentReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{}\n", MetricsRow::CSV_HEADER);
        for m in &self.modes {
            let _ = writeln!(s, "{}", m.metrics.csv_row());
        }
        s
    }

    pub fn coverage_csv(&self) -> String {
        let mut s = String::from("mode,token_length,fraction\n");
        for m in &self.modes {
            for (len, frac) in &m.coverage {
                let _ = writeln!(s, "{},{len},{frac:.9}", m.metrics.mode);
            }
        }
        s
    }
}

/// Loads or generates the three splits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.data {
        DataSource::Generate(spec) => generate_dataset(spec),
        DataSource::Files { train, dev, test } => Ok(Splits {
            train: read_tsv(train)?,
            dev: read_tsv(dev)?,
            test: read_tsv(test)?,
        }),
    }
}

/// Vocabulary for `mode`: singletons for the character baseline, otherwise
/// the configured file or n-gram vocabulary built from training targets.
pub fn mode_vocab(mode: TrainMode, cfg: &ExperimentConfig, train: &[Record]) -> Result<Vocabulary> {
    let alphabet = BaseAlphabet::from_corpus(train.iter().map(|r| r.target.as_str()));
    if mode == TrainMode::CharBaseline {
        return Ok(Vocabulary::singletons(&alphabet));
    }
    if let Some(path) = &cfg.vocab_path {
        return Vocabulary::load(path);
    }
    let targets: Vec<&str> = train.iter().map(|r| r.target.as_str()).collect();
    let counts = count_ngrams(&targets, cfg.n_max)?;
    build_vocab(&counts, &alphabet, cfg.n_max, cfg.vocab_size)
}

/// Word and character error rates plus the n-best list per example.
pub type Evaluation = (ErrorRate, ErrorRate, Vec<Option<Vec<Hypothesis>>>);

/// Beam-decodes every example and scores the top hypotheses.
/// Inputs with no finished hypothesis count as empty outputs.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    vocab: &Vocabulary,
    data: &[Example<F>],
    beam: &BeamConfig,
) -> Result<Evaluation> {
    let inputs: Vec<_> = data.iter().map(|e| &e.input).collect();
    let mut hyps = Vec::with_capacity(data.len());
    for r in decode_batch(model, &inputs, vocab, beam) {
        match r {
            Ok(h) => hyps.push(Some(h)),
            Err(LsdError::EmptyResult { .. }) => hyps.push(None),
            Err(e) => return Err(e),
        }
    }
    let mut words = Vec::with_capacity(data.len());
    let mut chars = Vec::with_capacity(data.len());
    for (ex, h) in data.iter().zip(&hyps) {
        let out = match h {
            Some(h) => vocab.collapse(&h[0].tokens)?,
            None => String::new(),
        };
        let reference = ex.target_string();
        words.push(edit_distance_metrics(&out, &reference, Unit::Word));
        chars.push(edit_distance_metrics(&out, &reference, Unit::Char));
    }
    Ok((ErrorRate::pooled(&words), ErrorRate::pooled(&chars), hyps))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LsdError::io(path, e))
}

/// Builds the vocabulary for `mode` and trains a fresh model on `data`,
/// writing `vocab.txt`, `model.ckpt` and `stats.csv` into `dir` if given.
pub fn train_mode<F: Real>(
    mode: TrainMode,
    cfg: &ExperimentConfig,
    data: &Splits,
    encoder: &InputEncoder,
    dir: Option<&Path>,
) -> Result<(Vocabulary, TrainOutcome<F>)> {
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| LsdError::io(d, e))?;
    }
    let vocab = mode_vocab(mode, cfg, &data.train).map_err(|e| e.in_stage(format!("{mode}: vocabulary")))?;
    if let Some(d) = dir {
        vocab.save(&d.join("vocab.txt"))?;
    }
    let train = encoder
        .examples::<F>(&data.train)
        .map_err(|e| e.in_stage("data: train"))?;
    let dev = encoder.examples::<F>(&data.dev).map_err(|e| e.in_stage("data: dev"))?;
    let model = Model::<F>::new(cfg.model.config(encoder.dim(), vocab.len()), cfg.seed)
        .map_err(|e| e.in_stage(format!("{mode}: model")))?;
    let outcome = train_run(model, &train, &dev, &vocab, cfg.train_config(mode), dir)
        .map_err(|e| e.in_stage(format!("{mode}: training")))?;
    Ok((vocab, outcome))
}

fn run_mode<F: Real>(
    mode: TrainMode,
    cfg: &ExperimentConfig,
    data: &Splits,
    encoder: &InputEncoder,
    out_dir: Option<&Path>,
) -> Result<ModeReport> {
    let dir = out_dir.map(|d| d.join(mode.to_string()));
    let (vocab, outcome) = train_mode::<F>(mode, cfg, data, encoder, dir.as_deref())?;
    let test = encoder
        .examples::<F>(&data.test)
        .map_err(|e| e.in_stage("data: test"))?;

    let (wer, cer, hyps) =
        evaluate(&outcome.model, &vocab, &test, &cfg.decode).map_err(|e| e.in_stage(format!("{mode}: decoding")))?;
    let tops: Vec<Decomposition> = hyps.iter().flatten().map(|h| h[0].tokens.clone()).collect();
    let coverage = coverage_distribution(&tops, &vocab)?;

    if let Some(d) = &dir {
        let mut dump = String::new();
        for (i, (ex, h)) in test.iter().zip(&hyps).take(cfg.nbest_samples).enumerate() {
            let _ = writeln!(dump, "# example {i}: {}", ex.target_string());
            match h {
                Some(h) => dump.push_str(&format_nbest(h, &vocab)),
                None => dump.push_str("# no finished hypothesis\n"),
            }
        }
        write(&d.join("nbest.txt"), &dump)?;
        let mut decodes = String::from("reference\thypothesis\n");
        for (ex, h) in test.iter().zip(&hyps) {
            let out = match h {
                Some(h) => vocab.collapse(&h[0].tokens)?,
                None => String::new(),
            };
            let _ = writeln!(decodes, "{}\t{out}", ex.target_string());
        }
        write(&d.join("decodes.tsv"), &decodes)?;
    }
    Ok(ModeReport {
        metrics: MetricsRow {
            mode,
            n_max: vocab.n_max(),
            size: vocab.len(),
            wer: wer.rate,
            cer: cer.rate,
        },
        coverage,
        decodes: hyps.into_iter().map(|h| h.map(|mut v| v.swap_remove(0))).collect(),
        best_step: outcome.best_step,
    })
}

/// Trains and evaluates every configured mode and writes the report files
/// (`metrics.csv`, `coverage.csv`, per-mode vocabulary, checkpoint, stats and
/// n-best dump) when `out_dir` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    par::with_threads(cfg.threads, || {
        let data = load_data(cfg).map_err(|e| e.in_stage("data"))?;
        if data.train.is_empty() {
            return Err(LsdError::input("training split is empty").in_stage("data"));
        }
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(|e| LsdError::io(d, e))?;
            write(&d.join("config.txt"), &cfg.to_text())?;
            if matches!(cfg.data, DataSource::Generate(_)) {
                write_splits(&d.join("data"), &data)?;
            }
        }
        let encoder = InputEncoder::fit(&data.train).map_err(|e| e.in_stage("data"))?;
        let mut modes = Vec::with_capacity(cfg.modes.len());
        for &mode in &cfg.modes {
            log::info!("training mode {mode}");
            let report = match cfg.precision {
                Precision::F32 => run_mode::<f32>(mode, cfg, &data, &encoder, out_dir)?,
                Precision::F64 => run_mode::<f64>(mode, cfg, &data, &encoder, out_dir)?,
            };
            modes.push(report);
        }
        let report = ExperimentReport { modes };
        if let Some(d) = out_dir {
            write(&d.join("metrics.csv"), &report.metrics_csv())?;
            write(&d.join("coverage.csv"), &report.coverage_csv())?;
        }
        Ok(report)
    })
}
