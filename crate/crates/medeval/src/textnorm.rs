//! Shared text substrate for the lexical metrics: normalization, n-gram
//! extraction, longest-common-subsequence length, and suffix stripping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sequences longer than this are refused by [`lcs_length`] instead of
/// allocating an unbounded DP table.
pub const LCS_MAX_LEN: usize = 10_000;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("sequence too long for LCS: {0} tokens (limit {LCS_MAX_LEN})")]
    LcsTooLong(usize),
}

/// How punctuation is treated during tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PunctuationMode {
    /// Punctuation splits tokens and is discarded.
    #[default]
    Drop,
    /// Each punctuation character becomes a standalone token.
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationPolicy {
    pub lowercase: bool,
    pub punctuation: PunctuationMode,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        NormalizationPolicy {
            lowercase: true,
            punctuation: PunctuationMode::Drop,
        }
    }
}

/// A normalized token sequence. Tokens are never empty strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source_len_chars: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Split `text` into normalized tokens.
///
/// Default policy: Unicode lowercasing, punctuation dropped, whitespace
/// splitting. Re-tokenizing the space-joined token stream reproduces the
/// sequence (idempotence).
pub fn tokenize(text: &str, policy: &NormalizationPolicy) -> TokenSequence {
    let source_len_chars = text.chars().count();
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            if policy.lowercase {
                for lc in ch.to_lowercase() {
                    current.push(lc);
                }
            } else {
                current.push(ch);
            }
        } else if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else {
            flush(&mut current, &mut tokens);
            if policy.punctuation == PunctuationMode::Keep {
                tokens.push(ch.to_string());
            }
        }
    }
    flush(&mut current, &mut tokens);
    TokenSequence {
        tokens,
        source_len_chars,
    }
}

/// Multiset of order-`n` token windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramMultiset {
    pub n: usize,
    pub counts: HashMap<Vec<String>, usize>,
}

impl NGramMultiset {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Sliding-window n-gram multiset; empty when the sequence is shorter than `n`.
pub fn ngrams(seq: &TokenSequence, n: usize) -> NGramMultiset {
    assert!(n >= 1, "n-gram order must be >= 1");
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    if seq.len() >= n {
        for window in seq.tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    NGramMultiset { n, counts }
}

/// Length of the longest common subsequence (order-preserving, not
/// necessarily contiguous), computed with a two-row DP.
pub fn lcs_length(a: &TokenSequence, b: &TokenSequence) -> Result<usize, TextError> {
    if a.len() > LCS_MAX_LEN {
        return Err(TextError::LcsTooLong(a.len()));
    }
    if b.len() > LCS_MAX_LEN {
        return Err(TextError::LcsTooLong(b.len()));
    }
    // Keep the shorter sequence on the inner axis.
    let (outer, inner) = if a.len() >= b.len() {
        (&a.tokens, &b.tokens)
    } else {
        (&b.tokens, &a.tokens)
    };
    let mut prev = vec![0usize; inner.len() + 1];
    let mut curr = vec![0usize; inner.len() + 1];
    for x in outer.iter() {
        for (j, y) in inner.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[inner.len()])
}

/// Porter suffix-stripping stemmer over lowercase ASCII tokens.
///
/// Tokens containing non-ASCII-alphabetic characters are returned unchanged.
/// The rule set is the classic five-step Porter algorithm.
pub fn stem(token: &str) -> String {
    if token.len() <= 2 || !token.bytes().all(|b| b.is_ascii_lowercase()) {
        return token.to_string();
    }
    let mut s = Porter {
        b: token.as_bytes().to_vec(),
        k: token.len() - 1,
        j: -1,
    };
    s.step1ab();
    s.step1c();
    s.step2();
    s.step3();
    s.step4();
    s.step5();
    String::from_utf8(s.b[..=s.k].to_vec()).expect("ascii stem")
}

struct Porter {
    b: Vec<u8>,
    k: usize,
    // Last index of the stem preceding a matched suffix; -1 for an empty stem.
    j: isize,
}

impl Porter {
    fn cons(&self, i: usize) -> bool {
        match self.b[i] {
            b'a' | b'e' | b'i' | b'o' | b'u' => false,
            b'y' => {
                if i == 0 {
                    true
                } else {
                    !self.cons(i - 1)
                }
            }
            _ => true,
        }
    }

    // Measure of the 0..=j prefix: number of VC spans.
    fn m(&self) -> usize {
        let mut n = 0;
        let mut i: isize = 0;
        loop {
            if i > self.j {
                return n;
            }
            if !self.cons(i as usize) {
                break;
            }
            i += 1;
        }
        i += 1;
        loop {
            loop {
                if i > self.j {
                    return n;
                }
                if self.cons(i as usize) {
                    break;
                }
                i += 1;
            }
            i += 1;
            n += 1;
            loop {
                if i > self.j {
                    return n;
                }
                if !self.cons(i as usize) {
                    break;
                }
                i += 1;
            }
            i += 1;
        }
    }

    fn vowel_in_stem(&self) -> bool {
        (0..=self.j).any(|i| !self.cons(i as usize))
    }

    fn double_c(&self, i: usize) -> bool {
        i >= 1 && self.b[i] == self.b[i - 1] && self.cons(i)
    }

    // consonant-vowel-consonant ending at i, final consonant not w/x/y
    fn cvc(&self, i: usize) -> bool {
        if i < 2 || !self.cons(i) || self.cons(i - 1) || !self.cons(i - 2) {
            return false;
        }
        !matches!(self.b[i], b'w' | b'x' | b'y')
    }

    fn ends(&mut self, s: &[u8]) -> bool {
        if s.len() > self.k + 1 {
            return false;
        }
        let start = self.k + 1 - s.len();
        if &self.b[start..=self.k] != s {
            return false;
        }
        self.j = start as isize - 1;
        true
    }

    fn set_to(&mut self, s: &[u8]) {
        self.b.truncate((self.j + 1) as usize);
        self.b.extend_from_slice(s);
        self.k = self.b.len() - 1;
    }

    fn replace_if_m(&mut self, s: &[u8]) {
        if self.m() > 0 {
            self.set_to(s);
        }
    }

    fn step1ab(&mut self) {
        if self.b[self.k] == b's' {
            if self.ends(b"sses") {
                self.k -= 2;
            } else if self.ends(b"ies") {
                self.set_to(b"i");
            } else if self.b[self.k - 1] != b's' {
                self.k -= 1;
            }
        }
        if self.ends(b"eed") {
            if self.m() > 0 {
                self.k -= 1;
            }
        } else if (self.ends(b"ed") || self.ends(b"ing")) && self.vowel_in_stem() {
            self.k = self.j as usize;
            if self.ends(b"at") {
                self.set_to(b"ate");
            } else if self.ends(b"bl") {
                self.set_to(b"ble");
            } else if self.ends(b"iz") {
                self.set_to(b"ize");
            } else if self.double_c(self.k) {
                if !matches!(self.b[self.k], b'l' | b's' | b'z') {
                    self.k -= 1;
                }
            } else if self.m() == 1 && self.cvc(self.k) {
                self.j = self.k as isize;
                self.set_to(b"e");
            }
        }
        self.b.truncate(self.k + 1);
    }

    fn step1c(&mut self) {
        if self.ends(b"y") && self.vowel_in_stem() {
            self.b[self.k] = b'i';
        }
    }

    fn step2(&mut self) {
        let rules: &[(&[u8], &[u8])] = &[
            (b"ational", b"ate"),
            (b"tional", b"tion"),
            (b"enci", b"ence"),
            (b"anci", b"ance"),
            (b"izer", b"ize"),
            (b"bli", b"ble"),
            (b"alli", b"al"),
            (b"entli", b"ent"),
            (b"eli", b"e"),
            (b"ousli", b"ous"),
            (b"ization", b"ize"),
            (b"ation", b"ate"),
            (b"ator", b"ate"),
            (b"alism", b"al"),
            (b"iveness", b"ive"),
            (b"fulness", b"ful"),
            (b"ousness", b"ous"),
            (b"aliti", b"al"),
            (b"iviti", b"ive"),
            (b"biliti", b"ble"),
            (b"logi", b"log"),
        ];
        for (suffix, replacement) in rules {
            if self.ends(suffix) {
                self.replace_if_m(replacement);
                return;
            }
        }
    }

    fn step3(&mut self) {
        let rules: &[(&[u8], &[u8])] = &[
            (b"icate", b"ic"),
            (b"ative", b""),
            (b"alize", b"al"),
            (b"iciti", b"ic"),
            (b"ical", b"ic"),
            (b"ful", b""),
            (b"ness", b""),
        ];
        for (suffix, replacement) in rules {
            if self.ends(suffix) {
                self.replace_if_m(replacement);
                return;
            }
        }
    }

    fn step4(&mut self) {
        let suffixes: &[&[u8]] = &[
            b"al", b"ance", b"ence", b"er", b"ic", b"able", b"ible", b"ant", b"ement", b"ment",
            b"ent", b"ou", b"ism", b"ate", b"iti", b"ous", b"ive", b"ize",
        ];
        for suffix in suffixes {
            if self.ends(suffix) {
                if self.m() > 1 {
                    self.k = self.j as usize;
                    self.b.truncate(self.k + 1);
                }
                return;
            }
        }
        if self.ends(b"ion")
            && self.j >= 0
            && matches!(self.b[self.j as usize], b's' | b't')
            && self.m() > 1
        {
            self.k = self.j as usize;
            self.b.truncate(self.k + 1);
        }
    }

    fn step5(&mut self) {
        self.j = self.k as isize;
        if self.b[self.k] == b'e' {
            let a = self.m();
            if a > 1 || (a == 1 && !self.cvc(self.k - 1)) {
                self.k -= 1;
            }
        }
        if self.b[self.k] == b'l' && self.double_c(self.k) && self.m() > 1 {
            self.k -= 1;
        }
        self.b.truncate(self.k + 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            source_len_chars: 0,
        }
    }

    #[test]
    fn tokenize_default_policy() {
        let policy = NormalizationPolicy::default();
        assert_eq!(tokenize("The cat sat.", &policy).tokens, ["the", "cat", "sat"]);
        assert!(tokenize("", &policy).tokens.is_empty());
        assert_eq!(tokenize("Hello, HELLO", &policy).tokens, ["hello", "hello"]);
    }

    #[test]
    fn tokenize_keep_punctuation() {
        let policy = NormalizationPolicy {
            lowercase: true,
            punctuation: PunctuationMode::Keep,
        };
        assert_eq!(tokenize("Hi, there!", &policy).tokens, ["hi", ",", "there", "!"]);
    }

    #[test]
    fn ngram_counts() {
        let s = seq(&["the", "cat", "sat"]);
        let bi = ngrams(&s, 2);
        assert_eq!(bi.total(), 2);
        assert_eq!(bi.counts[&vec!["the".to_string(), "cat".to_string()]], 1);
        assert_eq!(bi.counts[&vec!["cat".to_string(), "sat".to_string()]], 1);
        assert!(ngrams(&s, 4).counts.is_empty());
        let rep = seq(&["a", "a", "a"]);
        assert_eq!(ngrams(&rep, 1).counts[&vec!["a".to_string()]], 3);
    }

    #[test]
    fn lcs_known_value() {
        // character-level classic: abcbdab vs bdcaba -> 4
        let a = seq(&["a", "b", "c", "b", "d", "a", "b"]);
        let b = seq(&["b", "d", "c", "a", "b", "a"]);
        assert_eq!(lcs_length(&a, &b).unwrap(), 4);
        assert_eq!(lcs_length(&a, &a).unwrap(), a.len());
        assert_eq!(lcs_length(&a, &seq(&[])).unwrap(), 0);
    }

    #[test]
    fn lcs_length_guard() {
        let long = TokenSequence {
            tokens: vec!["x".to_string(); LCS_MAX_LEN + 1],
            source_len_chars: 0,
        };
        assert!(lcs_length(&long, &seq(&["x"])).is_err());
    }

    #[test]
    fn porter_published_vectors() {
        let cases = [
            ("caresses", "caress"),
            ("ponies", "poni"),
            ("ties", "ti"),
            ("caress", "caress"),
            ("cats", "cat"),
            ("feed", "feed"),
            ("agreed", "agre"),
            ("plastered", "plaster"),
            ("bled", "bled"),
            ("motoring", "motor"),
            ("sing", "sing"),
            ("conflated", "conflat"),
            ("troubled", "troubl"),
            ("sized", "size"),
            ("hopping", "hop"),
            ("tanned", "tan"),
            ("falling", "fall"),
            ("hissing", "hiss"),
            ("fizzed", "fizz"),
            ("failing", "fail"),
            ("filing", "file"),
            ("happy", "happi"),
            ("sky", "sky"),
            ("relational", "relat"),
            ("conditional", "condit"),
            ("rational", "ration"),
            ("digitizer", "digit"),
            ("operator", "oper"),
            ("feudalism", "feudal"),
            ("decisiveness", "decis"),
            ("hopefulness", "hope"),
            ("formaliti", "formal"),
            ("sensitiviti", "sensit"),
            ("triplicate", "triplic"),
            ("formative", "form"),
            ("formalize", "formal"),
            ("electrical", "electr"),
            ("hopeful", "hope"),
            ("goodness", "good"),
            ("revival", "reviv"),
            ("allowance", "allow"),
            ("inference", "infer"),
            ("airliner", "airlin"),
            ("adjustment", "adjust"),
            ("dependent", "depend"),
            ("adoption", "adopt"),
            ("communism", "commun"),
            ("activate", "activ"),
            ("angulariti", "angular"),
            ("homologous", "homolog"),
            ("effective", "effect"),
            ("bowdlerize", "bowdler"),
            ("probate", "probat"),
            ("rate", "rate"),
            ("cease", "ceas"),
            ("controll", "control"),
            ("roll", "roll"),
            ("running", "run"),
            ("cat", "cat"),
        ];
        for (input, expected) in cases {
            assert_eq!(stem(input), expected, "stem({input})");
        }
    }

    // The classic algorithm is deliberately not idempotent
    // ("comprehensiveness" -> "comprehens" -> "comprehen"), so domain
    // vocabulary is frozen against single-pass outputs only.
    #[test]
    fn stem_domain_vocabulary() {
        let cases = [
            ("running", "run"),
            ("cat", "cat"),
            ("patient", "patient"),
            ("symptoms", "symptom"),
            ("medication", "medic"),
            ("treatment", "treatment"),
            ("doctor", "doctor"),
            ("infections", "infect"),
            ("prescribed", "prescrib"),
            ("generalized", "gener"),
            ("conditional", "condit"),
            ("helpful", "help"),
            ("accurately", "accur"),
            ("comprehensiveness", "comprehens"),
            ("relevance", "relev"),
        ];
        for (input, expected) in cases {
            assert_eq!(stem(input), expected, "stem({input})");
        }
    }

    proptest! {
        #[test]
        fn ngram_total_multiplicity(tokens in proptest::collection::vec("[a-c]{1,3}", 0..40), n in 1usize..5) {
            let s = TokenSequence { tokens, source_len_chars: 0 };
            let expected = if s.len() >= n { s.len() - n + 1 } else { 0 };
            prop_assert_eq!(ngrams(&s, n).total(), expected);
        }

        #[test]
        fn lcs_symmetric_and_bounded(a in proptest::collection::vec("[a-c]", 0..30),
                                     b in proptest::collection::vec("[a-c]", 0..30)) {
            let sa = TokenSequence { tokens: a, source_len_chars: 0 };
            let sb = TokenSequence { tokens: b, source_len_chars: 0 };
            let l = lcs_length(&sa, &sb).unwrap();
            prop_assert_eq!(l, lcs_length(&sb, &sa).unwrap());
            prop_assert!(l <= sa.len().min(sb.len()));
        }

        #[test]
        fn tokenize_idempotent(text in ".{0,80}") {
            let policy = NormalizationPolicy::default();
            let first = tokenize(&text, &policy);
            let rejoined = first.tokens.join(" ");
            let second = tokenize(&rejoined, &policy);
            prop_assert_eq!(first.tokens, second.tokens);
        }
    }
}
