//! Token vocabulary construction from character n-gram counts.
//!
//! N-grams never span a space; the space symbol is only ever counted as a
//! unigram, so word pieces break on word boundaries. The vocabulary keeps
//! every alphabet singleton plus end-of-sequence, and fills the remaining
//! budget with the most frequent multi-symbol n-grams.

use std::collections::BTreeMap;

use crate::error::{LsdError, Result};
use crate::par;
use crate::token::{BaseAlphabet, Vocabulary, EOS, SPACE};

/// Occurrence counts of character n-grams, keyed by text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NgramCounts {
    counts: BTreeMap<String, u64>,
}

impl NgramCounts {
    pub fn get(&self, text: &str) -> u64 {
        self.counts.get(text).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn merge(&mut self, other: NgramCounts) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }
}

fn count_line(line: &str, n_max: usize, counts: &mut BTreeMap<String, u64>) {
    let chars: Vec<char> = line.chars().collect();
    for word in chars.split(|&c| c == SPACE) {
        for start in 0..word.len() {
            for n in 1..=n_max.min(word.len() - start) {
                let gram: String = word[start..start + n].iter().collect();
                *counts.entry(gram).or_insert(0) += 1;
            }
        }
    }
    let spaces = chars.iter().filter(|&&c| c == SPACE).count() as u64;
    if spaces > 0 {
        *counts.entry(SPACE.to_string()).or_insert(0) += spaces;
    }
}

/// Sliding-window counts of every n-gram with `1 <= n <= n_max` that does not
/// cross a space; spaces are counted as unigrams.
pub fn count_ngrams<S: AsRef<str> + Sync>(lines: &[S], n_max: usize) -> Result<NgramCounts> {
    if n_max == 0 {
        return Err(LsdError::config("n_max must be at least 1"));
    }
    if lines.iter().any(|l| l.as_ref().contains(EOS)) {
        return Err(LsdError::input("corpus contains the reserved end-of-sequence symbol"));
    }
    const SHARD: usize = 256;
    let shards: Vec<&[S]> = lines.chunks(SHARD).collect();
    let partial = par::map_slice(&shards, |shard| {
        let mut counts = BTreeMap::new();
        for line in shard.iter() {
            count_line(line.as_ref(), n_max, &mut counts);
        }
        NgramCounts { counts }
    });
    let mut total = NgramCounts::default();
    for p in partial {
        total.merge(p);
    }
    Ok(total)
}

/// Vocabulary size used at paper scale for a maximum piece length.
pub fn preset_size(n_max: usize) -> Option<usize> {
    match n_max {
        2 | 3 => Some(256),
        4 | 5 => Some(512),
        _ => None,
    }
}

/// Builds a vocabulary of exactly `size` tokens when the counts supply enough
/// n-grams: end-of-sequence, every alphabet singleton, then the most frequent
/// multi-symbol n-grams of length `<= n_max` (ties broken lexicographically).
/// With too few n-grams every available one is included and a warning is logged.
pub fn build_vocab(counts: &NgramCounts, alphabet: &BaseAlphabet, n_max: usize, size: usize) -> Result<Vocabulary> {
    if n_max == 0 {
        return Err(LsdError::config("n_max must be at least 1"));
    }
    // the alphabet already includes space and end-of-sequence
    if size < alphabet.len() {
        return Err(LsdError::config(format!(
            "vocabulary size {size} cannot hold the {} singletons (including space and end-of-sequence)",
            alphabet.len()
        )));
    }
    let mut entries: Vec<(String, u64)> = alphabet
        .symbols()
        .iter()
        .map(|c| {
            let text = c.to_string();
            let count = counts.get(&text);
            (text, count)
        })
        .collect();
    let mut grams: Vec<(&str, u64)> = counts
        .iter()
        .filter(|(text, _)| {
            let len = text.chars().count();
            len >= 2 && len <= n_max && !text.contains(SPACE) && text.chars().all(|c| alphabet.contains(c))
        })
        .collect();
    grams.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let budget = size - alphabet.len();
    if grams.len() < budget {
        log::warn!(
            "only {} multi-symbol n-grams available for {budget} slots; vocabulary will have {} tokens",
            grams.len(),
            alphabet.len() + grams.len()
        );
    }
    entries.extend(grams.into_iter().take(budget).map(|(t, c)| (t.to_string(), c)));
    Vocabulary::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_cat_cat() {
        let c = count_ngrams(&["cat cat"], 2).unwrap();
        assert_eq!(c.get("ca"), 2);
        assert_eq!(c.get("at"), 2);
        assert_eq!(c.get("c"), 2);
        assert_eq!(c.get(" "), 1);
        assert_eq!(c.get("t "), 0);
        assert_eq!(c.get("cat"), 0);
    }

    #[test]
    fn empty_corpus_and_unigrams() {
        assert!(count_ngrams::<&str>(&[], 3).unwrap().is_empty());
        let c = count_ngrams(&["abca", "b"], 1).unwrap();
        let got: Vec<_> = c.iter().collect();
        assert_eq!(got, vec![("a", 2), ("b", 2), ("c", 1)]);
    }

    #[test]
    fn build_respects_size_and_tie_break() {
        let lines = ["ab ab ba", "abc"];
        let counts = count_ngrams(&lines, 3).unwrap();
        let alphabet = BaseAlphabet::from_corpus(lines.iter().copied());
        assert_eq!(alphabet.len(), 5); // eos, space, a, b, c
        let v = build_vocab(&counts, &alphabet, 3, 7).unwrap();
        let texts: Vec<&str> = v.tokens().iter().map(|t| t.text.as_str()).collect();
        // ab:3, then ba and bc and abc at 1 each -> lexicographic "abc" < "ba" < "bc"
        assert_eq!(texts[5..], ["ab", "abc"]);
        assert_eq!(v.len(), 7);
        assert!(build_vocab(&counts, &alphabet, 3, 4).is_err());
        // fewer n-grams than slots: everything fits
        let all = build_vocab(&counts, &alphabet, 3, 100).unwrap();
        assert_eq!(all.len(), 5 + 4);
    }

    #[test]
    fn presets() {
        assert_eq!(preset_size(2), Some(256));
        assert_eq!(preset_size(3), Some(256));
        assert_eq!(preset_size(4), Some(512));
        assert_eq!(preset_size(5), Some(512));
        assert_eq!(preset_size(7), None);
    }

    proptest! {
        #[test]
        fn built_vocabularies_keep_singletons_and_isolate_space(
            lines in proptest::collection::vec("[abq u]{0,12}", 1..8),
            n_max in 1usize..5,
            extra in 0usize..20,
        ) {
            let counts = count_ngrams(&lines, n_max).unwrap();
            let alphabet = BaseAlphabet::from_corpus(lines.iter().map(String::as_str));
            let size = alphabet.len() + extra;
            let v = build_vocab(&counts, &alphabet, n_max, size).unwrap();
            for &c in alphabet.symbols() {
                prop_assert!(v.id_of(&c.to_string()).is_some());
            }
            for t in v.tokens() {
                prop_assert!(t.len() <= n_max.max(1));
                if t.chars.contains(&SPACE) {
                    prop_assert!(t.is_space());
                }
            }
            prop_assert!(v.len() <= size);
            let again = build_vocab(&counts, &alphabet, n_max, size).unwrap();
            prop_assert_eq!(again.tokens(), v.tokens());
        }
    }
}
