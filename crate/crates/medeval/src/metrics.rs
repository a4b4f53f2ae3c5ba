//! Track A lexical similarity metrics: BLEU, ROUGE-1F/2F/LF, and METEOR.
//!
//! Conventions the source formulas leave open are pinned here: the brevity
//! penalty uses the standard exp(1 - r/c) closed form capped at 1, zero
//! n-gram precisions are smoothed with a small epsilon, count clipping uses
//! the per-n-gram reference maximum, and every 0/0 case scores 0.

use serde::{Deserialize, Serialize};

use crate::corpus::EvalPair;
use crate::textnorm::{lcs_length, ngrams, stem, tokenize, NormalizationPolicy, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum Smoothing {
    None,
    AddEpsilon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BleuConfig {
    pub max_order: usize,
    /// Per-order weights; must sum to 1. Empty means uniform 1/max_order.
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            weights: Vec::new(),
            smoothing: Smoothing::AddEpsilon(1e-9),
        }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_order < 1 {
            return Err("bleu max_order must be >= 1".into());
        }
        if !self.weights.is_empty() {
            if self.weights.len() != self.max_order {
                return Err(format!(
                    "bleu weights length {} != max_order {}",
                    self.weights.len(),
                    self.max_order
                ));
            }
            let sum: f64 = self.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("bleu weights sum to {sum}, expected 1"));
            }
        }
        Ok(())
    }

    fn weight(&self, order_idx: usize) -> f64 {
        if self.weights.is_empty() {
            1.0 / self.max_order as f64
        } else {
            self.weights[order_idx]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RougeLConfig {
    pub beta: f64,
}

impl Default for RougeLConfig {
    fn default() -> Self {
        RougeLConfig { beta: 1.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeteorMatching {
    Exact,
    #[default]
    ExactPlusStem,
}

/// Per-pair, per-system metric values. All five scores lie in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub record_id: String,
    pub system_id: String,
    pub bleu: f64,
    pub rouge1f: f64,
    pub rouge2f: f64,
    pub rougelf: f64,
    pub meteor: f64,
}

impl PairScores {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "bleu" => Some(self.bleu),
            "rouge1f" => Some(self.rouge1f),
            "rouge2f" => Some(self.rouge2f),
            "rougelf" => Some(self.rougelf),
            "meteor" => Some(self.meteor),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["bleu", "rouge1f", "rouge2f", "rougelf", "meteor"];

/// Clipped n-gram matches and the candidate n-gram total, kept separate so
/// corpus-level aggregation can sum numerators and denominators.
pub fn modified_precision(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    n: usize,
) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let total = cand.total();
    if total == 0 {
        return (0, 0);
    }
    let ref_grams: Vec<_> = references.iter().map(|r| ngrams(r, n)).collect();
    let mut clipped = 0;
    for (gram, &count) in &cand.counts {
        let max_ref = ref_grams
            .iter()
            .map(|r| r.counts.get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        clipped += count.min(max_ref);
    }
    (clipped, total)
}

/// Standard closed-form brevity penalty: 1 when the candidate is at least as
/// long as the reference, exp(1 - r/c) otherwise, 0 for an empty candidate.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

fn bleu_from_counts(
    counts: &[(usize, usize)],
    candidate_len: usize,
    reference_len: usize,
    config: &BleuConfig,
) -> f64 {
    let bp = brevity_penalty(candidate_len, reference_len);
    if bp == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (i, &(clipped, total)) in counts.iter().enumerate() {
        let p = if total > 0 && clipped > 0 {
            clipped as f64 / total as f64
        } else {
            match config.smoothing {
                Smoothing::None => return 0.0,
                Smoothing::AddEpsilon(eps) => eps,
            }
        };
        log_sum += config.weight(i) * p.ln();
    }
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Reference length for the brevity penalty: the reference whose length is
/// closest to the candidate's (shorter wins ties).
fn effective_ref_len(candidate_len: usize, references: &[TokenSequence]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| {
            let diff = l.abs_diff(candidate_len);
            (diff, l)
        })
        .unwrap_or(0)
}

/// Sentence-level BLEU: geometric mean of clipped n-gram precisions times
/// the brevity penalty.
pub fn bleu(candidate: &TokenSequence, references: &[TokenSequence], config: &BleuConfig) -> f64 {
    assert!(!references.is_empty(), "bleu requires at least one reference");
    let counts: Vec<_> = (1..=config.max_order)
        .map(|n| modified_precision(candidate, references, n))
        .collect();
    bleu_from_counts(
        &counts,
        candidate.len(),
        effective_ref_len(candidate.len(), references),
        config,
    )
}

/// Corpus-level BLEU: clipped matches and totals are summed per order across
/// all segments, and the brevity penalty is taken on total lengths.
pub fn bleu_corpus(segments: &[(TokenSequence, Vec<TokenSequence>)], config: &BleuConfig) -> f64 {
    let mut counts = vec![(0usize, 0usize); config.max_order];
    let mut cand_len = 0;
    let mut ref_len = 0;
    for (candidate, references) in segments {
        for (i, slot) in counts.iter_mut().enumerate() {
            let (c, t) = modified_precision(candidate, references, i + 1);
            slot.0 += c;
            slot.1 += t;
        }
        cand_len += candidate.len();
        ref_len += effective_ref_len(candidate.len(), references);
    }
    bleu_from_counts(&counts, cand_len, ref_len, config)
}

/// ROUGE-N F1: clipped n-gram overlap as precision against the candidate
/// total and recall against the reference total.
pub fn rouge_n_f(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> f64 {
    let cand = ngrams(candidate, n);
    let refr = ngrams(reference, n);
    let overlap: usize = cand
        .counts
        .iter()
        .map(|(g, &c)| c.min(refr.counts.get(g).copied().unwrap_or(0)))
        .sum();
    let (ct, rt) = (cand.total(), refr.total());
    if ct == 0 || rt == 0 || overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / ct as f64;
    let r = overlap as f64 / rt as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-L F-measure over LCS precision and recall with recall weight beta.
pub fn rouge_l_f(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    config: &RougeLConfig,
) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(candidate, reference).expect("sequences within LCS bound") as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = config.beta * config.beta;
    let denom = r + b2 * p;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

/// Unigram matches with each token matched at most once: exact matches
/// first, then (optionally) stem matches over the residual tokens.
fn meteor_matches(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    matching: MeteorMatching,
) -> usize {
    let cand = ngrams(candidate, 1);
    let refr = ngrams(reference, 1);
    let mut matched = 0;
    let mut cand_residual: Vec<String> = Vec::new();
    let mut ref_residual = std::collections::HashMap::new();
    for (gram, &c) in &cand.counts {
        let r = refr.counts.get(gram).copied().unwrap_or(0);
        matched += c.min(r);
        for _ in r.min(c)..c {
            cand_residual.push(gram[0].clone());
        }
    }
    if matching == MeteorMatching::Exact {
        return matched;
    }
    for (gram, &r) in &refr.counts {
        let c = cand.counts.get(gram).copied().unwrap_or(0);
        if r > c {
            *ref_residual.entry(stem(&gram[0])).or_insert(0usize) += r - c;
        }
    }
    for token in &cand_residual {
        let stemmed = stem(token);
        if let Some(count) = ref_residual.get_mut(&stemmed) {
            if *count > 0 {
                *count -= 1;
                matched += 1;
            }
        }
    }
    matched
}

/// METEOR in its recall-weighted harmonic-mean form 10PR/(R + 9P).
pub fn meteor(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    matching: MeteorMatching,
) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let m = meteor_matches(candidate, reference, matching) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    10.0 * p * r / (r + 9.0 * p)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfigs {
    pub tokenize: NormalizationPolicy,
    pub bleu: BleuConfig,
    pub rouge_l: RougeLConfig,
    pub meteor_matching: MeteorMatching,
}

/// Score one response text against one reference text on all five metrics.
pub fn score_texts(candidate_text: &str, reference_text: &str, configs: &MetricConfigs) -> [f64; 5] {
    let cand = tokenize(candidate_text, &configs.tokenize);
    let reference = tokenize(reference_text, &configs.tokenize);
    let refs = std::slice::from_ref(&reference);
    [
        bleu(&cand, refs, &configs.bleu),
        rouge_n_f(&cand, &reference, 1),
        rouge_n_f(&cand, &reference, 2),
        rouge_l_f(&cand, &reference, &configs.rouge_l),
        meteor(&cand, &reference, configs.meteor_matching),
    ]
}

/// Score both systems of a pair against the shared reference. Degenerate
/// responses yield zero scores, never errors.
pub fn score_pair(pair: &EvalPair, configs: &MetricConfigs) -> (PairScores, PairScores) {
    let build = |system_id: &str, text: &str| {
        let [bleu, rouge1f, rouge2f, rougelf, meteor] =
            score_texts(text, &pair.record.reference_output, configs);
        PairScores {
            record_id: pair.record.id.clone(),
            system_id: system_id.to_string(),
            bleu,
            rouge1f,
            rouge2f,
            rougelf,
            meteor,
        }
    };
    (
        build(&pair.response_a.system_id, &pair.response_a.text),
        build(&pair.response_b.system_id, &pair.response_b.text),
    )
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

    const TOL: f64 = 1e-9;

    #[test]
    fn modified_precision_clipping() {
        let cand = seq(&["the", "the", "the"]);
        let r = [seq(&["the", "cat"])];
        assert_eq!(modified_precision(&cand, &r, 1), (1, 3));
        let same = seq(&["a", "b", "c"]);
        assert_eq!(modified_precision(&same, std::slice::from_ref(&same), 2), (2, 2));
        assert_eq!(modified_precision(&seq(&["a", "b"]), &[seq(&["c", "d"])], 1), (0, 2));
        assert_eq!(modified_precision(&seq(&[]), &[seq(&["a"])], 1), (0, 0));
    }

    #[test]
    fn brevity_penalty_cases() {
        assert_eq!(brevity_penalty(10, 10), 1.0);
        assert!((brevity_penalty(5, 10) - (-1.0f64).exp()).abs() < TOL);
        assert_eq!(brevity_penalty(0, 10), 0.0);
        assert_eq!(brevity_penalty(12, 10), 1.0);
    }

    #[test]
    fn bleu_hand_cases() {
        let cfg = BleuConfig::default();
        let x = seq(&["a", "b", "c", "d", "e"]);
        assert!((bleu(&x, std::slice::from_ref(&x), &cfg) - 1.0).abs() < TOL);

        // p1 = 3/3, p2 = 2/2, BP = e^(1-2)
        let cfg2 = BleuConfig {
            max_order: 2,
            ..Default::default()
        };
        let cand = seq(&["the", "cat", "sat"]);
        let reference = seq(&["the", "cat", "sat", "on", "the", "mat"]);
        let got = bleu(&cand, &[reference], &cfg2);
        assert!((got - (-1.0f64).exp()).abs() < TOL, "got {got}");
    }

    #[test]
    fn bleu_unsmoothed_zero_on_missing_order() {
        let cfg = BleuConfig {
            smoothing: Smoothing::None,
            ..Default::default()
        };
        let cand = seq(&["a", "b"]);
        let reference = seq(&["a", "c", "b", "d"]);
        assert_eq!(bleu(&cand, &[reference], &cfg), 0.0);
    }

    #[test]
    fn rouge_n_hand_cases() {
        let cand = seq(&["the", "cat", "sat"]);
        let reference = seq(&["the", "cat", "sat", "on", "the", "mat"]);
        let f1 = rouge_n_f(&cand, &reference, 1);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-5, "got {f1}");
        let f2 = rouge_n_f(&cand, &reference, 2);
        assert!((f2 - 2.0 * 1.0 * 0.4 / 1.4).abs() < 1e-5, "got {f2}");
        assert_eq!(rouge_n_f(&seq(&["x"]), &seq(&["y"]), 1), 0.0);
        // any length-1 candidate has no bigrams
        assert_eq!(rouge_n_f(&seq(&["the"]), &reference, 2), 0.0);
    }

    #[test]
    fn rouge_l_hand_cases() {
        let cfg = RougeLConfig::default();
        let cand = seq(&["the", "cat", "sat"]);
        let reference = seq(&["the", "cat", "sat", "on", "the", "mat"]);
        let got = rouge_l_f(&cand, &reference, &cfg);
        let expected = (1.0 + 1.44) * 1.0 * 0.5 / (0.5 + 1.44);
        assert!((got - expected).abs() < TOL, "got {got}");
        assert!((rouge_l_f(&cand, &cand, &cfg) - 1.0).abs() < TOL);
        // beta = 1 reduces to the harmonic mean
        let beta1 = RougeLConfig { beta: 1.0 };
        let hm = 2.0 * 1.0 * 0.5 / 1.5;
        assert!((rouge_l_f(&cand, &reference, &beta1) - hm).abs() < TOL);
    }

    #[test]
    fn meteor_hand_cases() {
        // P = 1, R = 0.5 -> 10*0.5/(0.5+9)
        let cand = seq(&["the", "cat", "sat"]);
        let reference = seq(&["the", "cat", "sat", "on", "a", "mat"]);
        let got = meteor(&cand, &reference, MeteorMatching::Exact);
        assert!((got - 5.0 / 9.5).abs() < TOL, "got {got}");
        // P = R = p -> score = p
        let half = seq(&["the", "dog"]);
        let reference2 = seq(&["the", "cat"]);
        let got2 = meteor(&half, &reference2, MeteorMatching::Exact);
        assert!((got2 - 0.5).abs() < TOL);
        // stems unify "runs" and "running"
        let got3 = meteor(&seq(&["runs"]), &seq(&["running"]), MeteorMatching::ExactPlusStem);
        assert!((got3 - 1.0).abs() < TOL, "got {got3}");
        assert_eq!(meteor(&seq(&["runs"]), &seq(&["running"]), MeteorMatching::Exact), 0.0);
    }

    #[test]
    fn score_texts_identity() {
        let configs = MetricConfigs::default();
        let text = "Take rest and drink plenty of fluids today.";
        for s in score_texts(text, text, &configs) {
            assert!((s - 1.0).abs() < TOL);
        }
    }

    fn token_seq_strategy() -> impl Strategy<Value = TokenSequence> {
        proptest::collection::vec("[a-e]{1,4}", 0..25).prop_map(|tokens| TokenSequence {
            tokens,
            source_len_chars: 0,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn all_metrics_in_unit_range(cand in token_seq_strategy(), reference in token_seq_strategy()) {
            let cfg = BleuConfig::default();
            let rl = RougeLConfig::default();
            if !reference.is_empty() {
                let b = bleu(&cand, std::slice::from_ref(&reference), &cfg);
                prop_assert!((0.0..=1.0).contains(&b));
            }
            for n in 1..=2 {
                let f = rouge_n_f(&cand, &reference, n);
                prop_assert!((0.0..=1.0).contains(&f));
            }
            let l = rouge_l_f(&cand, &reference, &rl);
            prop_assert!((0.0..=1.0).contains(&l));
            let m = meteor(&cand, &reference, MeteorMatching::ExactPlusStem);
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn identity_is_maximal(tokens in proptest::collection::vec("[a-e]{1,4}", 4..20)) {
            let x = TokenSequence { tokens, source_len_chars: 0 };
            let cfg = BleuConfig::default();
            prop_assert!((bleu(&x, std::slice::from_ref(&x), &cfg) - 1.0).abs() < TOL);
            prop_assert!((rouge_n_f(&x, &x, 1) - 1.0).abs() < TOL);
            prop_assert!((rouge_n_f(&x, &x, 2) - 1.0).abs() < TOL);
            prop_assert!((rouge_l_f(&x, &x, &RougeLConfig::default()) - 1.0).abs() < TOL);
            prop_assert!((meteor(&x, &x, MeteorMatching::ExactPlusStem) - 1.0).abs() < TOL);
        }

        #[test]
        fn brevity_penalty_monotone_under_truncation(c in 1usize..30, r in 1usize..30) {
            // removing tokens from a short candidate never increases BP
            if c <= r && c > 1 {
                prop_assert!(brevity_penalty(c - 1, r) <= brevity_penalty(c, r) + TOL);
            }
        }
    }
}
