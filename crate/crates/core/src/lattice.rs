//! Exact oracles over the set of decompositions of a target string.
//!
//! Model probabilities condition on the full token history, so paths through
//! the lattice cannot be merged: marginals, posteriors and gradients here are
//! computed by enumerating every decomposition. Enumeration is guarded by a
//! path limit and refuses (rather than truncates) when the count exceeds it.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use crate::error::{LsdError, Result};
use crate::model::{Model, ParamSet, Tensor};
use crate::par;
use crate::real::{log_sum_exp, Real};
use crate::token::{Decomposition, TokenId, Vocabulary};

pub const DEFAULT_ENUMERATION_LIMIT: usize = 100_000;

/// Decompositions of one target, in lexicographic token-id order, optionally
/// with per-item log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionSet {
    pub target: String,
    /// Decompositions without the end-of-sequence token.
    pub items: Vec<Decomposition>,
    pub log_weights: Option<Vec<f64>>,
}

impl DecompositionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Normalised probabilities (`exp` of the log-weights).
    pub fn weights(&self) -> Option<Vec<f64>> {
        self.log_weights.as_ref().map(|w| w.iter().map(|v| v.exp()).collect())
    }
}

/// Number of decompositions of `y`: `N[|y|] = 1`,
/// `N[pos] = sum over valid extensions t of N[pos + |t|]`.
pub fn count_decompositions(y: &[char], vocab: &Vocabulary) -> Result<BigUint> {
    vocab.check_target(y)?;
    let n = y.len();
    let mut counts = vec![BigUint::zero(); n + 1];
    counts[n] = BigUint::one();
    for pos in (0..n).rev() {
        let mut acc = BigUint::zero();
        for id in vocab.valid_extensions(y, pos)? {
            acc += &counts[pos + vocab.tokens()[id].len()];
        }
        counts[pos] = acc;
    }
    Ok(counts.swap_remove(0))
}

/// Every decomposition of `y`, in lexicographic order of token-id sequences.
pub fn enumerate_decompositions(y: &[char], vocab: &Vocabulary, limit: usize) -> Result<DecompositionSet> {
    let count = count_decompositions(y, vocab)?;
    if count > BigUint::from(limit) {
        return Err(LsdError::Capacity {
            count: count.to_string(),
            limit,
        });
    }
    let mut items = Vec::with_capacity(count.to_usize().unwrap_or(0));
    let mut path = Vec::new();
    dfs(y, 0, vocab, &mut path, &mut items)?;
    Ok(DecompositionSet {
        target: y.iter().collect(),
        items,
        log_weights: None,
    })
}

fn dfs(
    y: &[char],
    pos: usize,
    vocab: &Vocabulary,
    path: &mut Vec<TokenId>,
    out: &mut Vec<Decomposition>,
) -> Result<()> {
    if pos == y.len() {
        out.push(Decomposition::new(path.clone()));
        return Ok(());
    }
    for id in vocab.valid_extensions(y, pos)? {
        path.push(id);
        dfs(y, pos + vocab.tokens()[id].len(), vocab, path, out)?;
        path.pop();
    }
    Ok(())
}

/// Anything that assigns `log p(z | x)` to complete token sequences.
pub trait SequenceScorer: Sync {
    type Input: ?Sized + Sync;

    /// Log-probability of a sequence that ends with end-of-sequence.
    fn log_prob(&self, input: &Self::Input, z: &[TokenId]) -> Result<f64>;

    /// Scores many sequences for one input.
    fn log_probs(&self, input: &Self::Input, zs: &[Decomposition]) -> Result<Vec<f64>> {
        par::map_slice(zs, |z| self.log_prob(input, z)).into_iter().collect()
    }
}

impl<F: Real> SequenceScorer for Model<F> {
    type Input = Tensor<F>;

    fn log_prob(&self, input: &Tensor<F>, z: &[TokenId]) -> Result<f64> {
        Ok(self.log_prob_sequence(input, z)?.to_f64_lossy())
    }

    fn log_probs(&self, input: &Tensor<F>, zs: &[Decomposition]) -> Result<Vec<f64>> {
        let enc = self.encode(input)?;
        par::map_slice(zs, |z| self.log_prob_encoded(&enc, z).map(Real::to_f64_lossy))
            .into_iter()
            .collect()
    }
}

/// A scorer whose per-token probabilities depend only on the symbol position
/// where the token starts, not on the token history.
pub trait PositionScorer: Sync {
    fn log_prob_at(&self, pos: usize, token: TokenId) -> f64;
}

/// Adapts a [`PositionScorer`] to whole sequences over a vocabulary.
pub struct Positional<'v, S> {
    pub scorer: S,
    pub vocab: &'v Vocabulary,
}

impl<S: PositionScorer> SequenceScorer for Positional<'_, S> {
    type Input = ();

    fn log_prob(&self, _input: &(), z: &[TokenId]) -> Result<f64> {
        let mut pos = 0;
        let mut total = 0.0;
        for &id in z {
            total += self.scorer.log_prob_at(pos, id);
            let token = self.vocab.token(id)?;
            if !token.is_eos() {
                pos += token.len();
            }
        }
        Ok(total)
    }
}

/// Forward-algorithm marginal for history-free scorers. Only valid when token
/// probabilities do not depend on the preceding tokens.
pub fn dp_log_marginal<S: PositionScorer>(scorer: &S, y: &[char], vocab: &Vocabulary) -> Result<f64> {
    vocab.check_target(y)?;
    let n = y.len();
    let mut alpha = vec![f64::NEG_INFINITY; n + 1];
    alpha[0] = 0.0;
    for pos in 0..n {
        if alpha[pos] == f64::NEG_INFINITY {
            continue;
        }
        for id in vocab.valid_extensions(y, pos)? {
            let end = pos + vocab.tokens()[id].len();
            alpha[end] = log_sum_exp(&[alpha[end], alpha[pos] + scorer.log_prob_at(pos, id)]);
        }
    }
    Ok(alpha[n] + scorer.log_prob_at(n, vocab.eos()))
}

fn scored_set<S: SequenceScorer>(
    scorer: &S,
    input: &S::Input,
    y: &[char],
    vocab: &Vocabulary,
    limit: usize,
) -> Result<(DecompositionSet, Vec<f64>)> {
    let set = enumerate_decompositions(y, vocab, limit)?;
    let terminated: Vec<Decomposition> = set.items.iter().map(|z| z.terminated(vocab.eos())).collect();
    let scores = scorer.log_probs(input, &terminated)?;
    Ok((set, scores))
}

/// `log p(y | x) = log sum over decompositions z of y of p(z | x)`.
pub fn exact_log_marginal<S: SequenceScorer>(
    scorer: &S,
    input: &S::Input,
    y: &[char],
    vocab: &Vocabulary,
    limit: usize,
) -> Result<f64> {
    let (_, scores) = scored_set(scorer, input, y, vocab, limit)?;
    Ok(log_sum_exp(&scores))
}

/// Every decomposition with its normalised posterior log-weight
/// `log p(z | x) - log p(y | x)`.
pub fn exact_posterior<S: SequenceScorer>(
    scorer: &S,
    input: &S::Input,
    y: &[char],
    vocab: &Vocabulary,
    limit: usize,
) -> Result<DecompositionSet> {
    let (mut set, scores) = scored_set(scorer, input, y, vocab, limit)?;
    let total = log_sum_exp(&scores);
    set.log_weights = Some(scores.iter().map(|s| s - total).collect());
    Ok(set)
}

/// Exact gradient of `log p(y | x)`: the posterior-weighted average of
/// `grad log p(z | x)` over all decompositions. Returns the log-marginal too.
///
/// Per-path backpropagation runs in parallel; the weighted sum is taken in
/// enumeration order so the result does not depend on scheduling.
pub fn exact_gradient<F: Real>(
    model: &Model<F>,
    x: &Tensor<F>,
    y: &[char],
    vocab: &Vocabulary,
    limit: usize,
) -> Result<(f64, ParamSet<F>)> {
    let set = enumerate_decompositions(y, vocab, limit)?;
    let per_path: Vec<(F, ParamSet<F>)> =
        par::map_slice(&set.items, |z| model.grad_log_prob(x, &z.terminated(vocab.eos())))
            .into_iter()
            .collect::<Result<_>>()?;
    let scores: Vec<f64> = per_path.iter().map(|(lp, _)| lp.to_f64_lossy()).collect();
    let total = log_sum_exp(&scores);
    let mut grad = model.zero_grads();
    for ((_, g), s) in per_path.iter().zip(&scores) {
        grad.add_scaled(g, F::lit((s - total).exp()));
    }
    Ok((total, grad))
}

/// Inverse-CDF sampler over a posterior [`DecompositionSet`].
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    set: DecompositionSet,
    cumulative: Vec<f64>,
}

impl PosteriorSampler {
    pub fn new(set: DecompositionSet) -> Result<Self> {
        let weights = set
            .weights()
            .ok_or_else(|| LsdError::input("decomposition set has no posterior weights"))?;
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(PosteriorSampler { set, cumulative })
    }

    /// Index of the item drawn with a single uniform variate.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap_or(&0.0);
        let u: f64 = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len().saturating_sub(1))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Decomposition {
        &self.set.items[self.sample_index(rng)]
    }

    pub fn set(&self) -> &DecompositionSet {
        &self.set
    }
}

/// Draws one decomposition of `y` from the exact posterior.
pub fn sample_posterior<S: SequenceScorer, R: Rng + ?Sized>(
    scorer: &S,
    input: &S::Input,
    y: &[char],
    vocab: &Vocabulary,
    limit: usize,
    rng: &mut R,
) -> Result<Decomposition> {
    let sampler = PosteriorSampler::new(exact_posterior(scorer, input, y, vocab, limit)?)?;
    Ok(sampler.sample(rng).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::symbols;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example() -> Vocabulary {
        Vocabulary::from_pieces(&["a", "b", "c", "t", "at", "ca", "cat"]).unwrap()
    }

    struct Uniform(f64);

    impl PositionScorer for Uniform {
        fn log_prob_at(&self, _pos: usize, _token: TokenId) -> f64 {
            self.0
        }
    }

    /// Assigns every complete sequence the same probability.
    struct Flat(f64);

    impl SequenceScorer for Flat {
        type Input = ();
        fn log_prob(&self, _: &(), _: &[TokenId]) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn enumeration_examples() {
        let v = example();
        let set = enumerate_decompositions(&symbols("cat"), &v, 100).unwrap();
        let expected = [vec!["c", "a", "t"], vec!["c", "at"], vec!["ca", "t"], vec!["cat"]];
        assert_eq!(set.items.len(), 4);
        for (item, want) in set.items.iter().zip(expected) {
            assert_eq!(*item, v.ids(&want));
        }
        assert_eq!(
            enumerate_decompositions(&[], &v, 10).unwrap().items,
            vec![Decomposition::default()]
        );
        assert_eq!(
            enumerate_decompositions(&symbols("b"), &v, 10).unwrap().items,
            vec![v.ids(&["b"])]
        );
    }

    #[test]
    fn counting_examples() {
        let v = example();
        assert_eq!(count_decompositions(&symbols("cat"), &v).unwrap(), BigUint::from(4u32));
        assert_eq!(count_decompositions(&[], &v).unwrap(), BigUint::from(1u32));
        let aa = Vocabulary::from_pieces(&["a", "aa"]).unwrap();
        assert_eq!(
            count_decompositions(&symbols("aaaa"), &aa).unwrap(),
            BigUint::from(5u32)
        );
    }

    #[test]
    fn capacity_guard_reports_the_count() {
        let aa = Vocabulary::from_pieces(&["a", "aa"]).unwrap();
        let y = symbols(&"a".repeat(30));
        match enumerate_decompositions(&y, &aa, 1000) {
            Err(LsdError::Capacity { count, limit }) => {
                assert_eq!(count, "1346269");
                assert_eq!(limit, 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_is_exact_beyond_u64() {
        let aa = Vocabulary::from_pieces(&["a", "aa"]).unwrap();
        // Fibonacci(201)
        let n = count_decompositions(&symbols(&"a".repeat(200)), &aa).unwrap();
        assert_eq!(n.to_string(), "453973694165307953197296969697410619233826");
    }

    #[test]
    fn flat_scorer_marginal_and_posterior() {
        let v = example();
        let q = (0.01f64).ln();
        let lm = exact_log_marginal(&Flat(q), &(), &symbols("cat"), &v, 100).unwrap();
        assert!((lm - (4.0 * 0.01f64).ln()).abs() < 1e-12);
        let post = exact_posterior(&Flat(q), &(), &symbols("cat"), &v, 100).unwrap();
        for w in post.weights().unwrap() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        let single = exact_posterior(&Flat(q), &(), &symbols("b"), &v, 100).unwrap();
        assert_eq!(single.weights().unwrap(), vec![1.0]);
    }

    #[test]
    fn dp_matches_enumeration_for_history_free_scores() {
        let v = example();
        let s = Positional {
            scorer: Uniform(-1.3),
            vocab: &v,
        };
        let y = symbols("catcab");
        let dp = dp_log_marginal(&s.scorer, &y, &v).unwrap();
        let en = exact_log_marginal(&s, &(), &y, &v, 1000).unwrap();
        assert!((dp - en).abs() < 1e-12, "{dp} vs {en}");
    }

    #[test]
    fn posterior_sampler_single_path_is_deterministic() {
        let v = example();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z = sample_posterior(&Flat(-2.0), &(), &symbols("bb"), &v, 10, &mut rng).unwrap();
            assert_eq!(z, v.ids(&["b", "b"]));
        }
    }
}
