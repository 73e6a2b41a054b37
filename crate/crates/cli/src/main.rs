use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use lsd_core::decode::{collapse_nbest, format_nbest, render_pieces, BeamConfig, Hypothesis};
use lsd_core::harness::{
    evaluate, generate_dataset, read_tsv, run_experiment, train_mode, write_splits, DatasetSpec, ExperimentConfig,
    InputEncoder, Language, Record, KEYS,
};
use lsd_core::lattice::{count_decompositions, enumerate_decompositions, exact_posterior, DEFAULT_ENUMERATION_LIMIT};
use lsd_core::model::checkpoint_precision;
use lsd_core::token::{symbols, BaseAlphabet};
use lsd_core::train::TrainMode;
use lsd_core::vocab::{build_vocab, count_ngrams};
use lsd_core::{par, LsdError, Model, Precision, Real, Vocabulary};

/// Latent sequence decompositions: vocabularies, training, decoding and exact oracles.
#[derive(Parser)]
#[command(name = "lsd", version)]
struct Cli {
    /// Worker threads; 0 uses every core, 1 is sequential and bit-deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vocabulary construction.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Train one mode from a config file.
    Train(TrainArgs),
    /// Beam-decode inputs and print Appendix-style n-best lists.
    Decode(DecodeArgs),
    /// Beam-decode a labelled TSV and print WER and CER.
    Eval(EvalArgs),
    /// Exact decomposition oracles for small targets.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Synthetic datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Run a full experiment and print the metrics table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum VocabCmd {
    /// Build a vocabulary from corpus lines (or TSV targets with --tsv).
    Build {
        #[arg(long)]
        corpus: PathBuf,
        /// Read the target column of a dataset TSV instead of plain lines.
        #[arg(long)]
        tsv: bool,
        #[arg(long, default_value_t = 2)]
        n_max: usize,
        /// Total tokens including singletons and end-of-sequence.
        #[arg(long)]
        size: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        for o in &self.overrides {
            if !o.contains('=') {
                bail!("--set expects KEY=VALUE, got {o:?}");
            }
            text.push('\n');
            text.push_str(o);
        }
        Ok(ExperimentConfig::parse_str(&text)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// lsd, maxext or char-baseline; defaults to the first configured mode.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Directory for vocab.txt, model.ckpt, stats.csv and evals.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BeamArgs {
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, default_value_t = 200)]
    max_steps: usize,
    /// Merge hypotheses with the same output string.
    #[arg(long)]
    merge: bool,
    #[arg(long, default_value_t = 0.0)]
    length_penalty: f64,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary file the model was trained with.
    #[arg(long)]
    vocab: PathBuf,
    /// Dataset TSV; its rows are the inputs.
    #[arg(long)]
    input: PathBuf,
    /// TSV used to fit the input encoding for text inputs (defaults to --input).
    #[arg(long)]
    train_tsv: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    beam: BeamArgs,
    #[arg(long, default_value_t = 8)]
    nbest: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    beam: BeamArgs,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Number of decompositions of the target (exact, arbitrary precision).
    Count(OracleTarget),
    /// Every decomposition, one per line as pieces joined by `|`.
    Enumerate(OracleTarget),
    /// Exact posterior over decompositions under a model for one input row.
    Posterior {
        #[command(flatten)]
        target: OracleTarget,
        #[arg(long)]
        model: PathBuf,
        /// Dataset TSV holding the input.
        #[arg(long)]
        input: PathBuf,
        /// Zero-based row of --input.
        #[arg(long, default_value_t = 0)]
        row: usize,
    },
}

#[derive(Args)]
struct OracleTarget {
    #[arg(long)]
    target: String,
    #[arg(long)]
    vocab: PathBuf,
    /// Refuse to enumerate more paths than this.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_LIMIT)]
    limit: usize,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Write train.tsv, dev.tsv and test.tsv.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// lexicon or qu.
        #[arg(long, default_value = "lexicon")]
        language: Language,
        #[arg(long, default_value_t = DatasetSpec::default().train_size)]
        train_size: usize,
        #[arg(long, default_value_t = DatasetSpec::default().dev_size)]
        dev_size: usize,
        #[arg(long, default_value_t = DatasetSpec::default().test_size)]
        test_size: usize,
        #[arg(long, default_value_t = DatasetSpec::default().lexicon_size)]
        lexicon_size: usize,
        #[arg(long, default_value_t = DatasetSpec::default().feature_dim)]
        feature_dim: usize,
        #[arg(long, default_value_t = DatasetSpec::default().noise_std)]
        noise_std: f64,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Report directory.
    #[arg(long, required_unless_present = "keys")]
    out: Option<PathBuf>,
    /// List every config key and exit.
    #[arg(long)]
    keys: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<LsdError>().map(LsdError::category) {
        Some("config") => 3,
        Some("input") => 4,
        Some("capacity") => 5,
        Some("checkpoint") => 6,
        Some("state") => 7,
        Some("numeric") => 8,
        Some("decode") => 9,
        Some("io") => 10,
        _ => 1,
    }
}

fn hint(err: &anyhow::Error) -> Option<&'static str> {
    match err.downcast_ref::<LsdError>()?.category() {
        "config" => Some("check the config keys with `lsd report --keys`"),
        "capacity" => Some("raise --limit or use a shorter target"),
        "checkpoint" => Some("the checkpoint must come from `lsd train` with a matching vocabulary"),
        "io" => Some("check that the path exists and is readable"),
        _ => None,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = cli.threads;
    match par::with_threads(threads, move || run(cli.command, threads)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err.downcast_ref::<LsdError>().map_or("error", LsdError::category);
            eprintln!("error[{category}]: {err:#}");
            if let Some(h) = hint(&err) {
                eprintln!("hint: {h}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(command: Command, threads: usize) -> anyhow::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Vocab(VocabCmd::Build {
            corpus,
            tsv,
            n_max,
            size,
            out: path,
        }) => {
            let lines: Vec<String> = if tsv {
                read_tsv(&corpus)?.into_iter().map(|r| r.target).collect()
            } else {
                let f = fs::File::open(&corpus).map_err(|e| LsdError::io(&corpus, e))?;
                io::BufReader::new(f)
                    .lines()
                    .collect::<io::Result<_>>()
                    .map_err(|e| LsdError::io(&corpus, e))?
            };
            let counts = count_ngrams(&lines, n_max)?;
            let alphabet = BaseAlphabet::from_corpus(lines.iter().map(String::as_str));
            let vocab = build_vocab(&counts, &alphabet, n_max, size)?;
            match path {
                Some(p) => vocab.save(&p)?,
                None => vocab.write_to(&mut out)?,
            }
        }
        Command::Train(args) => {
            let mut cfg = args.config.load()?;
            cfg.threads = threads;
            let mode = args.mode.unwrap_or(cfg.modes[0]);
            let data = lsd_core::harness::load_data(&cfg)?;
            let encoder = InputEncoder::fit(&data.train)?;
            let best = match cfg.precision {
                Precision::F32 => {
                    train_mode::<f32>(mode, &cfg, &data, &encoder, Some(&args.out))?
                        .1
                        .best_step
                }
                Precision::F64 => {
                    train_mode::<f64>(mode, &cfg, &data, &encoder, Some(&args.out))?
                        .1
                        .best_step
                }
            };
            fs::write(args.out.join("config.txt"), cfg.to_text()).map_err(|e| LsdError::io(&args.out, e))?;
            writeln!(out, "{}", args.out.join("model.ckpt").display())?;
            log::info!("best checkpoint from step {best}");
        }
        Command::Decode(args) => {
            let beam = beam_config(&args.beam, args.nbest)?;
            decode(load_any(&args.model)?.as_ref(), &beam, &mut out)?;
        }
        Command::Eval(args) => {
            let beam = beam_config(&args.beam, 1)?;
            eval(load_any(&args.model)?.as_ref(), &beam, &mut out)?;
        }
        Command::Oracle(cmd) => oracle(cmd, &mut out)?,
        Command::Dataset(DatasetCmd::Generate {
            out: dir,
            seed,
            language,
            train_size,
            dev_size,
            test_size,
            lexicon_size,
            feature_dim,
            noise_std,
        }) => {
            let spec = DatasetSpec {
                seed,
                language,
                train_size,
                dev_size,
                test_size,
                lexicon_size,
                feature_dim,
                noise_std,
                ..DatasetSpec::default()
            };
            write_splits(&dir, &generate_dataset(&spec)?)?;
            writeln!(out, "{}", dir.display())?;
        }
        Command::Report(args) => {
            if args.keys {
                for (k, d) in KEYS {
                    writeln!(out, "{k}\t{d}")?;
                }
                return Ok(());
            }
            let mut cfg = args.config.load()?;
            cfg.threads = threads;
            let dir = args.out.expect("required by clap");
            let report = run_experiment(&cfg, Some(&dir))?;
            write!(out, "{}", report.metrics_csv())?;
        }
    }
    Ok(())
}

fn beam_config(args: &BeamArgs, n_best: usize) -> anyhow::Result<BeamConfig> {
    let cfg = BeamConfig {
        beam_width: args.beam,
        max_steps: args.max_steps,
        n_best,
        collapse_merge: args.merge,
        length_penalty: args.length_penalty,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a decode or eval command needs, at the checkpoint's precision.
struct Loaded<F: Real> {
    model: Model<F>,
    vocab: Vocabulary,
    records: Vec<Record>,
    encoder: InputEncoder,
}

/// Precision-erased access used by the decode and eval commands.
trait ErasedLoaded {
    fn decode(&self, beam: &BeamConfig) -> anyhow::Result<Vec<Result<Vec<Hypothesis>, LsdError>>>;
    fn evaluate(&self, beam: &BeamConfig) -> anyhow::Result<(f64, f64)>;
    fn vocab(&self) -> &Vocabulary;
}

impl<F: Real> ErasedLoaded for Loaded<F> {
    fn decode(&self, beam: &BeamConfig) -> anyhow::Result<Vec<Result<Vec<Hypothesis>, LsdError>>> {
        let inputs = self
            .records
            .iter()
            .map(|r| self.encoder.encode::<F>(&r.input))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = inputs.iter().collect();
        Ok(lsd_core::decode::decode_batch(&self.model, &refs, &self.vocab, beam))
    }

    fn evaluate(&self, beam: &BeamConfig) -> anyhow::Result<(f64, f64)> {
        let examples = self.encoder.examples::<F>(&self.records)?;
        let (wer, cer, _) = evaluate(&self.model, &self.vocab, &examples, beam)?;
        Ok((wer.rate, cer.rate))
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
}

fn load<F: Real>(args: &ModelArgs) -> anyhow::Result<Loaded<F>> {
    let model = Model::<F>::load(&args.model)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    if model.vocab_size() != vocab.len() {
        bail!(LsdError::CorruptCheckpoint(format!(
            "checkpoint emits {} tokens but {} has {}",
            model.vocab_size(),
            args.vocab.display(),
            vocab.len()
        )));
    }
    let records = read_tsv(&args.input)?;
    let fit_on = match &args.train_tsv {
        Some(p) => read_tsv(p)?,
        None => records.clone(),
    };
    let encoder = InputEncoder::fit(&fit_on)?;
    if encoder.dim() != model.config().input_dim {
        bail!(LsdError::InvalidInput(format!(
            "inputs have width {} but the model expects {}",
            encoder.dim(),
            model.config().input_dim
        )));
    }
    Ok(Loaded {
        model,
        vocab,
        records,
        encoder,
    })
}

fn load_any(args: &ModelArgs) -> anyhow::Result<Box<dyn ErasedLoaded>> {
    let bytes = fs::read(&args.model).map_err(|e| LsdError::io(&args.model, e))?;
    Ok(match checkpoint_precision(&bytes)? {
        Precision::F32 => Box::new(load::<f32>(args)?),
        Precision::F64 => Box::new(load::<f64>(args)?),
    })
}

fn decode(m: &dyn ErasedLoaded, beam: &BeamConfig, out: &mut impl Write) -> anyhow::Result<()> {
    let results = m.decode(beam)?;
    for (i, r) in results.into_iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        match r {
            Ok(hyps) => {
                let hyps = if beam.collapse_merge {
                    collapse_nbest(&hyps, m.vocab(), true)?
                        .into_iter()
                        .map(|row| Hypothesis {
                            tokens: row.tokens,
                            log_prob: row.log_prob,
                            finished: true,
                        })
                        .collect()
                } else {
                    hyps
                };
                write!(out, "{}", format_nbest(&hyps, m.vocab()))?;
            }
            Err(LsdError::EmptyResult {
                max_steps,
                best_partial,
                ..
            }) => {
                log::warn!("input {i}: nothing finished within {max_steps} steps (best partial {best_partial:.6})");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn eval(m: &dyn ErasedLoaded, beam: &BeamConfig, out: &mut impl Write) -> anyhow::Result<()> {
    let (wer, cer) = m.evaluate(beam)?;
    writeln!(out, "wer,cer")?;
    writeln!(out, "{wer:.6},{cer:.6}")?;
    Ok(())
}

fn oracle(cmd: OracleCmd, out: &mut impl Write) -> anyhow::Result<()> {
    match cmd {
        OracleCmd::Count(t) => {
            let vocab = Vocabulary::load(&t.vocab)?;
            writeln!(out, "{}", count_decompositions(&symbols(&t.target), &vocab)?)?;
        }
        OracleCmd::Enumerate(t) => {
            let vocab = Vocabulary::load(&t.vocab)?;
            let set = enumerate_decompositions(&symbols(&t.target), &vocab, t.limit)?;
            for z in &set.items {
                writeln!(out, "{}", render_pieces(z, &vocab))?;
            }
        }
        OracleCmd::Posterior {
            target,
            model,
            input,
            row,
        } => {
            let vocab = Vocabulary::load(&target.vocab)?;
            let records = read_tsv(&input)?;
            let record = records
                .get(row)
                .ok_or_else(|| anyhow!(LsdError::InvalidInput(format!("{} has no row {row}", input.display()))))?;
            let encoder = InputEncoder::fit(&records)?;
            let y = symbols(&target.target);
            let bytes = fs::read(&model).map_err(|e| LsdError::io(&model, e))?;
            let set = match checkpoint_precision(&bytes)? {
                Precision::F32 => posterior::<f32>(&model, &encoder, record, &y, &vocab, target.limit)?,
                Precision::F64 => posterior::<f64>(&model, &encoder, record, &y, &vocab, target.limit)?,
            };
            let weights = set.log_weights.as_ref().expect("posterior is weighted");
            for (z, w) in set.items.iter().zip(weights) {
                writeln!(out, "{}\t{w:.6}", render_pieces(z, &vocab))?;
            }
        }
    }
    Ok(())
}

fn posterior<F: Real>(
    path: &Path,
    encoder: &InputEncoder,
    record: &Record,
    y: &[char],
    vocab: &Vocabulary,
    limit: usize,
) -> anyhow::Result<lsd_core::lattice::DecompositionSet> {
    let model = Model::<F>::load(path)?;
    if model.vocab_size() != vocab.len() {
        bail!(LsdError::CorruptCheckpoint(
            "checkpoint and vocabulary sizes differ".into()
        ));
    }
    let x = encoder.encode::<F>(&record.input)?;
    Ok(exact_posterior(&model, &x, y, vocab, limit)?)
}
