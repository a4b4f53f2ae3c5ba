//! Shared helpers for the integration suites.
#![allow(dead_code)] // each test binary uses a different subset

use std::path::PathBuf;

use medeval::corpus::{
    load_candidates, load_dialogues, pair_and_filter, CorpusFormat, EvalPair, FilterAudit,
    FilterPolicy,
};
use medeval::textnorm::NormalizationPolicy;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn load_pairs(dir: &str) -> (Vec<EvalPair>, FilterAudit) {
    let policy = NormalizationPolicy::default();
    let records = load_dialogues(fixture(&format!("{dir}/references.json")), CorpusFormat::JsonArray)
        .expect("references fixture");
    let baseline = load_candidates(fixture(&format!("{dir}/baseline.jsonl")), "baseline", &policy)
        .expect("baseline fixture");
    let finetuned =
        load_candidates(fixture(&format!("{dir}/finetuned.jsonl")), "finetuned", &policy)
            .expect("finetuned fixture");
    pair_and_filter(&records, &baseline, &finetuned, &FilterPolicy::default(), &policy)
        .expect("pairing fixture")
}
