//! Beam search over the open token space, n-best handling and error metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{LsdError, Result};
use crate::model::{DecoderState, Model, Tensor};
use crate::par;
use crate::real::{log_sum_exp, Real};
use crate::token::{Decomposition, TokenId, Vocabulary};

/// A finished (or, inside errors, partial) decoding hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Token ids, ending with end-of-sequence when finished.
    pub tokens: Decomposition,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_steps: usize,
    pub n_best: usize,
    pub collapse_merge: bool,
    /// Finished hypotheses are ranked by `log_prob + length_penalty * len`.
    /// Zero (the default) ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 8,
            max_steps: 200,
            n_best: 8,
            collapse_merge: false,
            length_penalty: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn greedy(max_steps: usize) -> Self {
        BeamConfig {
            beam_width: 1,
            max_steps,
            n_best: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 || self.n_best > self.beam_width {
            return Err(LsdError::config(format!(
                "n_best {} must be in 1..={}",
                self.n_best, self.beam_width
            )));
        }
        if self.max_steps == 0 {
            return Err(LsdError::config("max_steps must be at least 1"));
        }
        Ok(())
    }
}

struct Live<F> {
    tokens: Vec<TokenId>,
    score: F,
    state: DecoderState<F>,
}

struct Finished {
    tokens: Vec<TokenId>,
    log_prob: f64,
    rank_score: f64,
}

fn by_score_then_ids(a_score: f64, a_ids: &[TokenId], b_score: f64, b_ids: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_ids.cmp(b_ids))
}

/// Left-to-right beam search. Every live hypothesis is expanded over the whole
/// vocabulary and the best `beam_width` candidates survive; candidates ending
/// in end-of-sequence retire to a pool and stop taking beam slots. Returns the
/// top `n_best` finished hypotheses, best first, ties broken by token ids.
pub fn beam_search<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    vocab: &Vocabulary,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if model.vocab_size() != vocab.len() {
        return Err(LsdError::input(format!(
            "model emits {} tokens but the vocabulary has {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let eos = vocab.eos();
    let enc = model.encode(x)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: F::zero(),
        state: model.initial_state(),
    }];
    let mut pool: Vec<Finished> = Vec::new();
    // retiring can only lower scores, so once the best live hypothesis is
    // strictly below the n-th pooled one the result is settled
    let exact_stop = cfg.length_penalty == 0.0;

    for _ in 0..cfg.max_steps {
        if live.is_empty() {
            break;
        }
        let mut outs = Vec::with_capacity(live.len());
        for h in &live {
            let prev = h.tokens.last().copied().unwrap_or(model.start_token());
            outs.push(model.decode_step(&enc, &h.state, prev)?);
        }
        let mut cands: Vec<(F, usize, TokenId)> = Vec::with_capacity(live.len() * vocab.len());
        for (i, (h, out)) in live.iter().zip(&outs).enumerate() {
            for (k, &lp) in out.log_probs.iter().enumerate() {
                cands.push((h.score + lp, i, k));
            }
        }
        let cmp = |a: &(F, usize, TokenId), b: &(F, usize, TokenId)| {
            b.0.to_f64_lossy()
                .total_cmp(&a.0.to_f64_lossy())
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        };
        if cands.len() > cfg.beam_width {
            cands.select_nth_unstable_by(cfg.beam_width - 1, cmp);
            cands.truncate(cfg.beam_width);
        }
        cands.sort_by(cmp);

        let mut next = Vec::with_capacity(cands.len());
        for (score, i, k) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(k);
            if k == eos {
                let log_prob = score.to_f64_lossy();
                let rank_score = log_prob + cfg.length_penalty * tokens.len() as f64;
                pool.push(Finished {
                    tokens,
                    log_prob,
                    rank_score,
                });
            } else {
                next.push(Live {
                    tokens,
                    score,
                    state: outs[i].state.clone(),
                });
            }
        }
        live = next;
        pool.sort_by(|a, b| by_score_then_ids(a.rank_score, &a.tokens, b.rank_score, &b.tokens));
        pool.truncate(cfg.n_best);
        if exact_stop && pool.len() == cfg.n_best {
            let floor = pool[cfg.n_best - 1].rank_score;
            if live.iter().all(|h| h.score.to_f64_lossy() < floor) {
                break;
            }
        }
    }

    if pool.is_empty() {
        live.sort_by(|a, b| by_score_then_ids(a.score.to_f64_lossy(), &a.tokens, b.score.to_f64_lossy(), &b.tokens));
        return Err(LsdError::EmptyResult {
            max_steps: cfg.max_steps,
            best_partial: live.first().map_or(f64::NEG_INFINITY, |h| h.score.to_f64_lossy()),
            partials: live.into_iter().map(|h| h.tokens).collect(),
        });
    }
    Ok(pool
        .into_iter()
        .map(|f| Hypothesis {
            tokens: Decomposition::new(f.tokens),
            log_prob: f.log_prob,
            finished: true,
        })
        .collect())
}

/// Best single hypothesis from a width-1 beam.
pub fn greedy_decode<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    vocab: &Vocabulary,
    max_steps: usize,
) -> Result<Hypothesis> {
    let mut hyps = beam_search(model, x, vocab, &BeamConfig::greedy(max_steps))?;
    Ok(hyps.remove(0))
}

/// Decodes many inputs concurrently against one model, preserving order.
pub fn decode_batch<F: Real>(
    model: &Model<F>,
    inputs: &[&Tensor<F>],
    vocab: &Vocabulary,
    cfg: &BeamConfig,
) -> Vec<Result<Vec<Hypothesis>>> {
    par::map_slice(inputs, |x| beam_search(model, x, vocab, cfg))
}

/// One n-best row: output string, its decomposition and score.
#[derive(Debug, Clone, PartialEq)]
pub struct NbestRow {
    pub text: String,
    pub tokens: Decomposition,
    pub log_prob: f64,
}

/// Collapses hypotheses to output strings. Without merging each decomposition
/// keeps its own row; with merging, rows sharing an output string are reduced
/// to the best-scoring decomposition. Input order is otherwise preserved.
pub fn collapse_nbest(hyps: &[Hypothesis], vocab: &Vocabulary, merge: bool) -> Result<Vec<NbestRow>> {
    let mut rows: Vec<NbestRow> = Vec::with_capacity(hyps.len());
    for h in hyps {
        if !h.finished {
            return Err(LsdError::input("cannot collapse an unfinished hypothesis"));
        }
        let text = vocab.collapse(&h.tokens)?;
        if merge {
            if let Some(row) = rows.iter_mut().find(|r| r.text == text) {
                if h.log_prob > row.log_prob {
                    row.tokens = h.tokens.clone();
                    row.log_prob = h.log_prob;
                }
                continue;
            }
        }
        rows.push(NbestRow {
            text,
            tokens: h.tokens.clone(),
            log_prob: h.log_prob,
        });
    }
    if merge {
        rows.sort_by(|a, b| by_score_then_ids(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
    }
    Ok(rows)
}

/// Total probability of each output string among the hypotheses, best first.
pub fn string_posteriors(hyps: &[Hypothesis], vocab: &Vocabulary) -> Result<Vec<(String, f64)>> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for h in hyps {
        groups.entry(vocab.collapse(&h.tokens)?).or_default().push(h.log_prob);
    }
    let mut out: Vec<(String, f64)> = groups.into_iter().map(|(k, v)| (k, log_sum_exp(&v))).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Pieces joined by `|`, end-of-sequence omitted, e.g. `a| |ca|t`.
pub fn render_pieces(tokens: &[TokenId], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .filter(|&&t| t != vocab.eos())
        .map(|&t| vocab.display_piece(t))
        .collect::<Vec<_>>()
        .join("|")
}

/// Appendix-style dump: `rank<TAB>pieces<TAB>log_prob`, ranks from 1.
pub fn format_nbest(hyps: &[Hypothesis], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (rank, h) in hyps.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}",
            rank + 1,
            render_pieces(&h.tokens, vocab),
            h.log_prob
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Word,
    Char,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRate {
    pub errors: usize,
    pub ref_len: usize,
    pub rate: f64,
}

impl ErrorRate {
    /// Corpus-level rate: summed errors over summed reference length.
    pub fn pooled(items: &[ErrorRate]) -> ErrorRate {
        let errors = items.iter().map(|e| e.errors).sum();
        let ref_len = items.iter().map(|e| e.ref_len).sum();
        ErrorRate {
            errors,
            ref_len,
            rate: rate(errors, ref_len),
        }
    }
}

fn rate(errors: usize, ref_len: usize) -> f64 {
    if ref_len == 0 {
        errors as f64
    } else {
        errors as f64 / ref_len as f64
    }
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ai) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = diag + usize::from(ai != bj);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Edit distance between `hyp` and `reference` in words (split on spaces) or
/// characters. An empty reference gives `rate = errors`.
pub fn edit_distance_metrics(hyp: &str, reference: &str, unit: Unit) -> ErrorRate {
    let (errors, ref_len) = match unit {
        Unit::Word => {
            let h: Vec<&str> = hyp.split(' ').filter(|w| !w.is_empty()).collect();
            let r: Vec<&str> = reference.split(' ').filter(|w| !w.is_empty()).collect();
            (levenshtein(&h, &r), r.len())
        }
        Unit::Char => {
            let h: Vec<char> = hyp.chars().collect();
            let r: Vec<char> = reference.chars().collect();
            (levenshtein(&h, &r), r.len())
        }
    };
    ErrorRate {
        errors,
        ref_len,
        rate: rate(errors, ref_len),
    }
}

/// Fraction of non-space characters emitted inside tokens of each length.
/// Empty when no such characters occur.
pub fn coverage_distribution(decompositions: &[Decomposition], vocab: &Vocabulary) -> Result<BTreeMap<usize, f64>> {
    let mut buckets: BTreeMap<usize, usize> = BTreeMap::new();
    for z in decompositions {
        for &id in z.iter() {
            let tok = vocab.token(id)?;
            if tok.is_eos() || tok.is_space() {
                continue;
            }
            *buckets.entry(tok.len()).or_insert(0) += tok.len();
        }
    }
    let total: usize = buckets.values().sum();
    Ok(buckets
        .into_iter()
        .map(|(len, chars)| (len, chars as f64 / total as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_pieces(&["a", "c", "t", "ca", "at"]).unwrap()
    }

    #[test]
    fn metrics_examples() {
        let w = edit_distance_metrics("a cat", "the cat", Unit::Word);
        assert_eq!((w.errors, w.ref_len), (1, 2));
        assert_eq!(w.rate, 0.5);
        let c = edit_distance_metrics("cat", "cut", Unit::Char);
        assert!((c.rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(edit_distance_metrics("cat", "cat", Unit::Char).rate, 0.0);
        let empty = edit_distance_metrics("ab", "", Unit::Char);
        assert_eq!((empty.errors, empty.rate), (2, 2.0));
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein::<u8>(b"", b"abc"), 3);
    }

    #[test]
    fn coverage_examples() {
        let v = vocab();
        let cov = coverage_distribution(&[v.ids(&["ca", "t"])], &v).unwrap();
        assert!((cov[&2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((cov[&1] - 1.0 / 3.0).abs() < 1e-15);
        let uni = coverage_distribution(&[v.ids(&["c", "a", "t", " ", "a"]).terminated(v.eos())], &v).unwrap();
        assert_eq!(uni.len(), 1);
        assert_eq!(uni[&1], 1.0);
        assert!(coverage_distribution(&[], &v).unwrap().is_empty());
    }

    #[test]
    fn nbest_rendering_and_merge() {
        let v = vocab();
        let h1 = Hypothesis {
            tokens: v.ids(&["a", " ", "ca", "t"]).terminated(v.eos()),
            log_prob: -1.25,
            finished: true,
        };
        let h2 = Hypothesis {
            tokens: v.ids(&["a", " ", "c", "at"]).terminated(v.eos()),
            log_prob: -2.5,
            finished: true,
        };
        let dump = format_nbest(&[h1.clone(), h2.clone()], &v);
        assert_eq!(dump, "1\ta| |ca|t\t-1.250000\n2\ta| |c|at\t-2.500000\n");
        assert_eq!(collapse_nbest(&[h1.clone(), h2.clone()], &v, false).unwrap().len(), 2);
        let merged = collapse_nbest(&[h2.clone(), h1.clone()], &v, true).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].log_prob, -1.25);
        assert_eq!(merged[0].text, "a cat");
        assert!(collapse_nbest(&[], &v, true).unwrap().is_empty());
        let post = string_posteriors(&[h1, h2], &v).unwrap();
        assert!((post[0].1 - (f64::exp(-1.25) + f64::exp(-2.5)).ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(BeamConfig::default().validate().is_ok());
        assert!(BeamConfig {
            n_best: 9,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BeamConfig {
            max_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
