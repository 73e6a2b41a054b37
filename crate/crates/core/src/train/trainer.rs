use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{edit_distance_metrics, greedy_decode, ErrorRate, Unit};
use crate::error::{LsdError, Result};
use crate::model::{Model, ParamSet, Tensor};
use crate::par;
use crate::real::Real;
use crate::token::{Decomposition, Vocabulary};

use super::optimizer::{add_l2, clip_global_norm, Adam, OptimizerConfig};
use super::sampler::sample_with_tape;
use super::schedule::EpsilonSchedule;

/// How the training decomposition of each target is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainMode {
    /// Sampled from the model with epsilon-greedy exploration each step.
    Lsd,
    /// Fixed greedy longest-match decomposition.
    MaxExt,
    /// Single characters; the vocabulary must contain only singletons.
    CharBaseline,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Lsd, TrainMode::MaxExt, TrainMode::CharBaseline];
}

impl FromStr for TrainMode {
    type Err = LsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsd" => Ok(TrainMode::Lsd),
            "maxext" => Ok(TrainMode::MaxExt),
            "char" | "char-baseline" => Ok(TrainMode::CharBaseline),
            _ => Err(LsdError::config(format!(
                "unknown mode {s:?} (expected lsd, maxext or char-baseline)"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Lsd => "lsd",
            TrainMode::MaxExt => "maxext",
            TrainMode::CharBaseline => "char-baseline",
        })
    }
}

/// An input sequence with its target string.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<F> {
    pub input: Tensor<F>,
    pub target: Vec<char>,
}

impl<F> Example<F> {
    pub fn new(input: Tensor<F>, target: &str) -> Self {
        Example {
            input,
            target: target.chars().collect(),
        }
    }

    pub fn target_string(&self) -> String {
        self.target.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: EpsilonSchedule,
    pub optimizer: OptimizerConfig,
    /// Validation interval in steps; 0 disables validation and early stopping.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Decode-length cap during validation.
    pub eval_max_steps: usize,
    /// Write elapsed milliseconds to the stats; off gives byte-identical reruns.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, steps: u64) -> Self {
        TrainConfig {
            mode,
            steps,
            batch_size: 16,
            seed: 0,
            epsilon: EpsilonSchedule::default_for(steps),
            optimizer: OptimizerConfig::default(),
            eval_every: 0,
            patience: 10,
            eval_max_steps: 200,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(LsdError::config("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LsdError::config("batch_size must be positive"));
        }
        if self.eval_max_steps == 0 {
            return Err(LsdError::config("eval_max_steps must be positive"));
        }
        self.epsilon.validate()?;
        self.optimizer.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub step: u64,
    /// `None` for modes with fixed decompositions.
    pub epsilon: Option<f64>,
    pub lr: f64,
    /// Mean `-log p(z|x)` over the batch before the update.
    pub loss: f64,
    /// Emitted tokens (without end-of-sequence) per target character.
    pub len_ratio: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl TrainStats {
    pub const CSV_HEADER: &'static str = "step,epsilon,lr,loss,len_ratio,grad_norm,wall_ms";

    pub fn csv_row(&self) -> String {
        let eps = self.epsilon.map_or_else(|| "n/a".to_string(), |e| format!("{e:.6}"));
        format!(
            "{},{},{:.8},{:.6},{:.6},{:.6},{}",
            self.step, eps, self.lr, self.loss, self.len_ratio, self.grad_norm, self.wall_ms
        )
    }
}

pub fn write_stats_csv(path: &Path, stats: &[TrainStats]) -> Result<()> {
    let mut out = String::from(TrainStats::CSV_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| LsdError::io(path, e))
}

/// Generator for the example at `idx` of the batch at `step`.
pub fn example_rng(seed: u64, step: u64, idx: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&idx.to_le_bytes());
    key[24..].copy_from_slice(b"lsd-step");
    ChaCha8Rng::from_seed(key)
}

/// Gradient of `-log p(z | x)` for a decomposition `z` of `y` that ends with
/// end-of-sequence. Averaged over samples from the posterior this is an
/// unbiased estimate of the gradient of `-log p(y | x)`.
pub fn estimate_gradient<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[char],
    z: &[usize],
    vocab: &Vocabulary,
) -> Result<(f64, ParamSet<F>)> {
    if z.last() != Some(&vocab.eos()) {
        return Err(LsdError::input("decomposition must end with end-of-sequence"));
    }
    let target: String = y.iter().collect();
    if !vocab.is_valid_decomposition(z, &target) {
        return Err(LsdError::input(format!(
            "decomposition does not collapse to {target:?}"
        )));
    }
    let mut tape = model.forward(x, z)?;
    let lp = tape.log_prob().expect("fresh tape");
    let mut grads = model.zero_grads();
    tape.backward(model, -F::one(), &mut grads)?;
    Ok((-lp.to_f64_lossy(), grads))
}

struct ExampleResult<F> {
    loss: f64,
    grads: ParamSet<F>,
    tokens: usize,
    chars: usize,
}

/// Mutable training state: model, optimizer moments and step counter.
pub struct Trainer<'v, F: Real> {
    model: Model<F>,
    adam: Adam<F>,
    cfg: TrainConfig,
    vocab: &'v Vocabulary,
    step: u64,
    started: Instant,
}

impl<'v, F: Real> Trainer<'v, F> {
    pub fn new(model: Model<F>, vocab: &'v Vocabulary, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.vocab_size() != vocab.len() {
            return Err(LsdError::config(format!(
                "model emits {} tokens but the vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        if cfg.mode == TrainMode::CharBaseline && vocab.n_max() != 1 {
            return Err(LsdError::config("char-baseline mode needs a singleton vocabulary"));
        }
        let adam = Adam::new(model.params());
        Ok(Trainer {
            model,
            adam,
            cfg,
            vocab,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn example(&self, ex: &Example<F>, global_idx: usize, batch_pos: usize, epsilon: f64) -> Result<ExampleResult<F>> {
        let mut rng = example_rng(self.cfg.seed, self.step, batch_pos as u64);
        let noisy;
        let model = if self.cfg.optimizer.weight_noise_std > 0.0 {
            let mut m = self.model.clone();
            m.params_mut()
                .add_weight_noise(self.cfg.optimizer.weight_noise_std, &mut rng);
            noisy = m;
            &noisy
        } else {
            &self.model
        };
        let (z, mut tape) = match self.cfg.mode {
            TrainMode::Lsd => sample_with_tape(model, &ex.input, &ex.target, self.vocab, epsilon, &mut rng)?,
            TrainMode::MaxExt | TrainMode::CharBaseline => {
                let z = self.vocab.max_ext(&ex.target)?.terminated(self.vocab.eos());
                let tape = model.forward(&ex.input, &z)?;
                (z, tape)
            }
        };
        let lp = tape.log_prob().expect("fresh tape").to_f64_lossy();
        if !lp.is_finite() {
            return Err(LsdError::NonFinite {
                what: "log-probability",
                example: global_idx,
            });
        }
        let mut grads = model.zero_grads();
        tape.backward(model, -F::one(), &mut grads)?;
        if !grads.all_finite() {
            return Err(LsdError::NonFinite {
                what: "gradient",
                example: global_idx,
            });
        }
        Ok(ExampleResult {
            loss: -lp,
            grads,
            tokens: z.len() - 1,
            chars: ex.target.len(),
        })
    }

    /// One optimizer update on the examples `batch` (indices into `data`).
    /// Per-example gradients are computed in parallel and averaged in batch order.
    pub fn train_step(&mut self, data: &[Example<F>], batch: &[usize]) -> Result<TrainStats> {
        if batch.is_empty() {
            return Err(LsdError::input("empty batch"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
            return Err(LsdError::input(format!("example index {bad} out of range")));
        }
        let epsilon = self.cfg.epsilon.value(self.step);
        let results: Vec<ExampleResult<F>> =
            par::map_slice(&batch.iter().enumerate().collect::<Vec<_>>(), |&(pos, &i)| {
                self.example(&data[i], i, pos, epsilon)
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let n = results.len() as f64;
        let mut grads = self.model.zero_grads();
        let inv = F::lit(1.0 / n);
        for r in &results {
            grads.add_scaled(&r.grads, inv);
        }
        add_l2(&mut grads, self.model.params(), self.cfg.optimizer.l2_decay);
        let grad_norm = clip_global_norm(&mut grads, self.cfg.optimizer.grad_clip_norm);
        let lr = self.cfg.optimizer.learning_rate(self.step, self.cfg.steps);
        self.adam
            .update(self.model.params_mut(), &grads, lr, &self.cfg.optimizer);

        let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
        let tokens: usize = results.iter().map(|r| r.tokens).sum();
        let chars: usize = results.iter().map(|r| r.chars).sum();
        let stats = TrainStats {
            step: self.step,
            epsilon: (self.cfg.mode == TrainMode::Lsd).then_some(epsilon),
            lr,
            loss,
            len_ratio: if chars == 0 { 0.0 } else { tokens as f64 / chars as f64 },
            grad_norm,
            wall_ms: if self.cfg.record_wall_time {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        self.step += 1;
        Ok(stats)
    }
}

/// Corpus-level character error rate of greedy decodes.
pub fn evaluate_cer<F: Real>(
    model: &Model<F>,
    data: &[Example<F>],
    vocab: &Vocabulary,
    max_steps: usize,
) -> Result<ErrorRate> {
    let per: Vec<ErrorRate> = par::map_slice(data, |ex| {
        let hyp = match greedy_decode(model, &ex.input, vocab, max_steps) {
            Ok(h) => vocab.collapse(&h.tokens)?,
            Err(LsdError::EmptyResult { .. }) => String::new(),
            Err(e) => return Err(e),
        };
        Ok(edit_distance_metrics(&hyp, &ex.target_string(), Unit::Char))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(ErrorRate::pooled(&per))
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Real> {
    /// Lowest-validation-CER model, or the final model without validation.
    pub model: Model<F>,
    pub stats: Vec<TrainStats>,
    /// `(step, dev CER)` per evaluation; the step counts completed updates.
    pub evals: Vec<(u64, f64)>,
    pub best_step: u64,
    pub stopped_early: bool,
}

/// Trains for `cfg.steps` updates over shuffled mini-batches, validating every
/// `eval_every` steps and stopping after `patience` evaluations without a
/// strict improvement. Writes `model.ckpt` and `stats.csv` into `out_dir`.
pub fn train_run<F: Real>(
    model: Model<F>,
    train: &[Example<F>],
    dev: &[Example<F>],
    vocab: &Vocabulary,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    if train.is_empty() {
        return Err(LsdError::input("empty training set"));
    }
    let validate = cfg.eval_every > 0 && !dev.is_empty();
    let mut trainer = Trainer::new(model, vocab, cfg.clone())?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut stats = Vec::with_capacity(cfg.steps as usize);
    let mut evals = Vec::new();
    let mut best: Option<(f64, u64, Model<F>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    while trainer.step() < cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut example_rng(cfg.seed, epoch, u64::MAX));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let row = trainer.train_step(train, &batch)?;
        log::debug!("{}", row.csv_row());
        stats.push(row);

        let done = trainer.step();
        if validate && (done % cfg.eval_every == 0 || done == cfg.steps) {
            let cer = evaluate_cer(trainer.model(), dev, vocab, cfg.eval_max_steps)?.rate;
            log::info!("step {done}: dev CER {cer:.4}");
            evals.push((done, cer));
            if best.as_ref().is_none_or(|(b, _, _)| cer < *b) {
                best = Some((cer, done, trainer.model().clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = done < cfg.steps;
                    break;
                }
            }
        }
    }
    let final_step = trainer.step();
    let (model, best_step) = match best {
        Some((_, step, m)) => (m, step),
        None => (trainer.into_model(), final_step),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| LsdError::io(dir, e))?;
        model.save(&dir.join("model.ckpt"))?;
        write_stats_csv(&dir.join("stats.csv"), &stats)?;
        let mut f = fs::File::create(dir.join("evals.csv")).map_err(|e| LsdError::io(dir, e))?;
        let mut text = String::from("step,dev_cer\n");
        for (s, c) in &evals {
            text.push_str(&format!("{s},{c:.6}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| LsdError::io(dir, e))?;
    }
    Ok(TrainOutcome {
        model,
        stats,
        evals,
        best_step,
        stopped_early,
    })
}

/// The fixed decomposition used by the non-sampling modes.
pub fn fixed_decomposition(vocab: &Vocabulary, y: &[char]) -> Result<Decomposition> {
    Ok(vocab.max_ext(y)?.terminated(vocab.eos()))
}
