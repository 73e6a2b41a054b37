//! Base alphabet, word-piece vocabulary, collapse, valid extensions and the
//! longest-match (MaxExt) decomposer.
//!
//! A vocabulary always contains every singleton of its alphabet, so every
//! string over the alphabet has at least one decomposition. The end-of-sequence
//! marker is an ordinary singleton token whose symbol never appears in targets.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::ops::Deref;
use std::path::Path;

use crate::error::{LsdError, Result};

pub type TokenId = usize;

/// Word separator symbol. May only appear as a singleton token.
pub const SPACE: char = ' ';
/// End-of-sequence marker symbol (ASCII ETX). Reserved; never part of a target.
pub const EOS: char = '\u{3}';

/// Ordered set of base symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseAlphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl BaseAlphabet {
    /// Builds an alphabet from symbols in the given order, dropping duplicates.
    /// Space and the end-of-sequence marker are always members.
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Self {
        let mut alphabet = BaseAlphabet {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        alphabet.insert(EOS);
        alphabet.insert(SPACE);
        for c in symbols {
            alphabet.insert(c);
        }
        alphabet
    }

    /// Alphabet of every symbol appearing in `lines`, sorted by code point.
    pub fn from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = lines.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        BaseAlphabet::new(chars.into_iter().filter(|&c| c != EOS))
    }

    fn insert(&mut self, c: char) {
        if !self.index.contains_key(&c) {
            self.index.insert(c, self.symbols.len());
            self.symbols.push(c);
        }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn position(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Number of symbols, counting space and the end-of-sequence marker.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: TokenId,
    pub text: String,
    pub chars: Vec<char>,
    pub count: u64,
}

impl Token {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn is_eos(&self) -> bool {
        self.chars == [EOS]
    }

    pub fn is_space(&self) -> bool {
        self.chars == [SPACE]
    }
}

/// A sequence of token ids. Complete model sequences end with the
/// end-of-sequence token; lattice enumeration returns them without it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decomposition(Vec<TokenId>);

impl Decomposition {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Decomposition(ids)
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// Copy with `eos` appended, unless it already ends with it.
    pub fn terminated(&self, eos: TokenId) -> Decomposition {
        let mut ids = self.0.clone();
        if ids.last() != Some(&eos) {
            ids.push(eos);
        }
        Decomposition(ids)
    }

    /// Copy with every `eos` removed.
    pub fn without_eos(&self, eos: TokenId) -> Decomposition {
        Decomposition(self.0.iter().copied().filter(|&t| t != eos).collect())
    }
}

impl Deref for Decomposition {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Decomposition {
    fn from(ids: Vec<TokenId>) -> Self {
        Decomposition(ids)
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<char, usize>,
    token: Option<TokenId>,
}

/// Prefix index over token texts.
#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn new() -> Self {
        Trie {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, chars: &[char], id: TokenId) {
        let mut node = 0;
        for &c in chars {
            node = match self.nodes[node].children.get(&c) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(c, next);
                    next
                }
            };
        }
        self.nodes[node].token = Some(id);
    }

    /// Token ids of every vocabulary entry that is a prefix of `text`, shortest first.
    fn prefixes<'a>(&'a self, text: &'a [char]) -> impl Iterator<Item = TokenId> + 'a {
        let mut node = 0;
        let mut iter = text.iter();
        std::iter::from_fn(move || loop {
            let c = iter.next()?;
            node = *self.nodes[node].children.get(c)?;
            if let Some(id) = self.nodes[node].token {
                return Some(id);
            }
        })
    }
}

/// The token space: all singletons of the alphabet, the end-of-sequence
/// token and a set of multi-symbol word pieces. Immutable once built.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    by_text: HashMap<String, TokenId>,
    trie: Trie,
    alphabet: BaseAlphabet,
    n_max: usize,
    eos: TokenId,
    space: TokenId,
}

impl Vocabulary {
    /// Builds a vocabulary from `(text, count)` entries. Ids follow entry order.
    ///
    /// Entries must include the end-of-sequence and space singletons, and a
    /// singleton for every symbol used by a longer piece.
    pub fn new(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut by_text = HashMap::with_capacity(entries.len());
        let mut trie = Trie::new();
        let mut n_max = 0;
        for (id, (text, count)) in entries.into_iter().enumerate() {
            let chars: Vec<char> = text.chars().collect();
            if chars.is_empty() {
                return Err(LsdError::input(format!("token {id} is empty")));
            }
            if chars.len() > 1 && chars.iter().any(|&c| c == SPACE || c == EOS) {
                return Err(LsdError::input(format!(
                    "token {:?} mixes space or end-of-sequence with other symbols",
                    text
                )));
            }
            if by_text.insert(text.clone(), id).is_some() {
                return Err(LsdError::input(format!("duplicate token {:?}", text)));
            }
            trie.insert(&chars, id);
            n_max = n_max.max(chars.len());
            tokens.push(Token { id, text, chars, count });
        }
        let eos = *by_text
            .get(&EOS.to_string())
            .ok_or_else(|| LsdError::input("vocabulary has no end-of-sequence token"))?;
        let space = *by_text
            .get(&SPACE.to_string())
            .ok_or_else(|| LsdError::input("vocabulary has no space token"))?;

        let singles = tokens
            .iter()
            .filter(|t| t.len() == 1 && !t.is_eos() && !t.is_space())
            .map(|t| t.chars[0]);
        let alphabet = BaseAlphabet::new(singles);
        for t in &tokens {
            if let Some(&c) = t.chars.iter().find(|&&c| !alphabet.contains(c)) {
                return Err(LsdError::input(format!(
                    "token {:?} uses symbol {:?} which has no singleton token",
                    t.text, c
                )));
            }
        }
        Ok(Vocabulary {
            tokens,
            by_text,
            trie,
            alphabet,
            n_max,
            eos,
            space,
        })
    }

    /// Convenience constructor: end-of-sequence and space first (ids 0 and 1),
    /// then `pieces` in order. Missing singletons for symbols used by pieces are
    /// an error, as with [`Vocabulary::new`].
    pub fn from_pieces(pieces: &[&str]) -> Result<Self> {
        let mut entries = vec![(EOS.to_string(), 0), (SPACE.to_string(), 0)];
        entries.extend(
            pieces
                .iter()
                .filter(|p| **p != " " && **p != EOS.to_string())
                .map(|p| (p.to_string(), 0)),
        );
        Vocabulary::new(entries)
    }

    /// Singleton-only vocabulary over `alphabet` (character baseline).
    pub fn singletons(alphabet: &BaseAlphabet) -> Self {
        let entries = alphabet.symbols().iter().map(|c| (c.to_string(), 0)).collect();
        Vocabulary::new(entries).expect("alphabet singletons form a valid vocabulary")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn space(&self) -> TokenId {
        self.space
    }

    pub fn alphabet(&self) -> &BaseAlphabet {
        &self.alphabet
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Result<&Token> {
        self.tokens
            .get(id)
            .ok_or_else(|| LsdError::input(format!("unknown token id {id} (vocabulary has {})", self.len())))
    }

    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.by_text.get(text).copied()
    }

    /// Ids for a list of token texts; panics on unknown text. Intended for tests and examples.
    pub fn ids(&self, texts: &[&str]) -> Decomposition {
        texts
            .iter()
            .map(|t| self.id_of(t).unwrap_or_else(|| panic!("token {t:?} not in vocabulary")))
            .collect::<Vec<_>>()
            .into()
    }

    /// Concatenation of token texts; the end-of-sequence token contributes nothing.
    pub fn collapse(&self, z: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in z {
            let token = self.token(id)?;
            if !token.is_eos() {
                out.push_str(&token.text);
            }
        }
        Ok(out)
    }

    /// Rejects targets containing symbols outside the alphabet or the reserved marker.
    pub fn check_target(&self, y: &[char]) -> Result<()> {
        match y.iter().find(|&&c| c == EOS || !self.alphabet.contains(c)) {
            Some(c) => Err(LsdError::input(format!(
                "target symbol {:?} is not in the vocabulary alphabet",
                c
            ))),
            None => Ok(()),
        }
    }

    /// Tokens whose text equals `y[pos..pos + len]`, in id order. At the end of
    /// the target the only valid extension is end-of-sequence.
    pub fn valid_extensions(&self, y: &[char], pos: usize) -> Result<Vec<TokenId>> {
        if pos > y.len() {
            return Err(LsdError::input(format!(
                "position {pos} beyond target length {}",
                y.len()
            )));
        }
        if pos == y.len() {
            return Ok(vec![self.eos]);
        }
        let mut ids: Vec<TokenId> = self.trie.prefixes(&y[pos..]).collect();
        if ids.is_empty() {
            return Err(LsdError::input(format!(
                "target symbol {:?} at position {pos} is not in the vocabulary",
                y[pos]
            )));
        }
        ids.sort_unstable();
        Ok(ids)
    }

    /// Greedy left-to-right longest-match decomposition (without end-of-sequence).
    pub fn max_ext(&self, y: &[char]) -> Result<Decomposition> {
        self.check_target(y)?;
        let mut pos = 0;
        let mut out = Vec::new();
        while pos < y.len() {
            let id = self
                .trie
                .prefixes(&y[pos..])
                .last()
                .ok_or_else(|| LsdError::input(format!("no token matches at position {pos}")))?;
            pos += self.tokens[id].len();
            out.push(id);
        }
        Ok(out.into())
    }

    pub fn is_valid_decomposition(&self, z: &[TokenId], y: &str) -> bool {
        matches!(self.collapse(z), Ok(s) if s == y)
    }

    /// Piece text as shown in n-best dumps: end-of-sequence is empty.
    pub fn display_piece(&self, id: TokenId) -> &str {
        match self.tokens.get(id) {
            Some(t) if t.is_eos() => "",
            Some(t) => &t.text,
            None => "<unk>",
        }
    }

    /// Writes the vocabulary file: one `<text>\t<count>` line per token in id order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{}\t{}", escape(&t.text), t.count)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| LsdError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| LsdError::io(path, e))?;
        w.flush().map_err(|e| LsdError::io(path, e))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| LsdError::input(format!("line {}: {e}", lineno + 1)))?;
            if line.is_empty() {
                continue;
            }
            let (text, count) = line
                .split_once('\t')
                .ok_or_else(|| LsdError::input(format!("line {}: expected `<text>\\t<count>`", lineno + 1)))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| LsdError::input(format!("line {}: bad count {:?}", lineno + 1, count)))?;
            entries.push((
                unescape(text).map_err(|e| LsdError::input(format!("line {}: {e}", lineno + 1)))?,
                count,
            ));
        }
        Vocabulary::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| LsdError::io(path, e))?;
        Vocabulary::read_from(BufReader::new(file))
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            SPACE => out.push_str("\\s"),
            EOS => out.push_str("\\e"),
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('s') => out.push(SPACE),
            Some('e') => out.push(EOS),
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

/// Target string as a symbol vector.
pub fn symbols(y: &str) -> Vec<char> {
    y.chars().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Vocabulary {
        Vocabulary::from_pieces(&["a", "b", "c", "t", "at", "ca", "cat"]).unwrap()
    }

    fn texts(v: &Vocabulary, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| v.token(i).unwrap().text.clone()).collect()
    }

    #[test]
    fn collapse_examples() {
        let v = example();
        assert_eq!(v.collapse(&v.ids(&["ca", "t"])).unwrap(), "cat");
        assert_eq!(v.collapse(&[]).unwrap(), "");
        assert_eq!(v.collapse(&v.ids(&["cat"])).unwrap(), "cat");
        let with_eos = v.ids(&["c", "at"]).terminated(v.eos());
        assert_eq!(v.collapse(&with_eos).unwrap(), "cat");
        assert!(matches!(v.collapse(&[99]), Err(LsdError::InvalidInput(_))));
    }

    #[test]
    fn valid_extension_examples() {
        let v = example();
        let y = symbols("cat");
        assert_eq!(texts(&v, &v.valid_extensions(&y, 0).unwrap()), ["c", "ca", "cat"]);
        assert_eq!(v.valid_extensions(&y, 3).unwrap(), vec![v.eos()]);
        assert_eq!(texts(&v, &v.valid_extensions(&y, 1).unwrap()), ["a", "at"]);
        assert!(v.valid_extensions(&y, 4).is_err());
    }

    #[test]
    fn max_ext_examples() {
        let v = example();
        assert_eq!(v.max_ext(&symbols("cat")).unwrap(), v.ids(&["cat"]));
        assert_eq!(v.max_ext(&symbols("cab")).unwrap(), v.ids(&["ca", "b"]));
        assert_eq!(v.max_ext(&symbols("b")).unwrap(), v.ids(&["b"]));
        assert!(v.max_ext(&symbols("dog")).is_err());
    }

    #[test]
    fn validity_examples() {
        let v = example();
        assert!(v.is_valid_decomposition(&v.ids(&["c", "at"]), "cat"));
        assert!(!v.is_valid_decomposition(&v.ids(&["ca"]), "cat"));
        assert!(v.is_valid_decomposition(&[], ""));
    }

    #[test]
    fn constructor_rejects_bad_vocabularies() {
        assert!(Vocabulary::from_pieces(&["a", "ab"]).is_err(), "missing singleton b");
        assert!(Vocabulary::from_pieces(&["a", "a"]).is_err(), "duplicate");
        assert!(
            Vocabulary::from_pieces(&["a", "a b", "b"]).is_err(),
            "space inside piece"
        );
        assert!(
            Vocabulary::new(vec![("a".into(), 1), (" ".into(), 1)]).is_err(),
            "no eos"
        );
    }

    #[test]
    fn unknown_target_symbol_is_an_error() {
        let v = example();
        assert!(v.valid_extensions(&symbols("cz"), 1).is_err());
        assert!(v.check_target(&symbols("c\u{3}")).is_err());
    }

    #[test]
    fn file_round_trip_with_escapes() {
        let v = Vocabulary::new(vec![
            (EOS.to_string(), 0),
            (" ".into(), 7),
            ("\\".into(), 1),
            ("q".into(), 3),
            ("u".into(), 3),
            ("qu".into(), 3),
        ])
        .unwrap();
        let text = v.to_string();
        assert_eq!(text, "\\e\t0\n\\s\t7\n\\\\\t1\nq\t3\nu\t3\nqu\t3\n");
        let back = Vocabulary::read_from(text.as_bytes()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.eos(), 0);
        assert_eq!(back.space(), 1);
        assert_eq!(back.n_max(), 2);
    }
}
