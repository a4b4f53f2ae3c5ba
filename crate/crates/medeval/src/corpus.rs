//! Corpus ingestion: reference dialogues, candidate responses, response
//! flagging, pairing with a filter policy, and seeded subsampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::textnorm::{tokenize, NormalizationPolicy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse failure in {path} at byte offset {offset} (record index {index}): {detail}")]
    Parse {
        path: String,
        offset: usize,
        index: usize,
        detail: String,
    },
    #[error("record {index} in {path}: missing or empty required field \"{field}\"")]
    MissingField {
        path: String,
        index: usize,
        field: String,
    },
    #[error("duplicate record ids in {path}: {ids:?}")]
    DuplicateIds { path: String, ids: Vec<String> },
    #[error("no pairs survived filtering (audit: {audit:?})")]
    EmptyAfterFilter { audit: FilterAudit },
    #[error("sample size {requested} exceeds available pairs {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("filter policy invalid: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    JsonArray,
    Jsonl,
}

/// One reference exchange: the task prompt, optional patient input, and the
/// ground-truth reply every metric scores against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub instruction: String,
    pub patient_input: String,
    pub reference_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFlag {
    Empty,
    Truncated,
    GenerationError,
}

/// Optional per-response metadata carried in the candidate file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateMeta {
    pub generation_len: Option<usize>,
    pub max_generation_len: Option<usize>,
    pub generation_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub record_id: String,
    pub system_id: String,
    pub text: String,
    pub flags: BTreeSet<ResponseFlag>,
    #[serde(default)]
    pub meta: CandidateMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub record: DialogueRecord,
    pub response_a: CandidateResponse,
    pub response_b: CandidateResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub min_tokens: usize,
    pub max_tokens: Option<usize>,
    pub drop_flags: BTreeSet<ResponseFlag>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_tokens: 1,
            max_tokens: None,
            drop_flags: [
                ResponseFlag::Empty,
                ResponseFlag::Truncated,
                ResponseFlag::GenerationError,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_tokens < 1 {
            return Err(CorpusError::InvalidPolicy("min_tokens must be >= 1".into()));
        }
        if let Some(max) = self.max_tokens {
            if max < self.min_tokens {
                return Err(CorpusError::InvalidPolicy(format!(
                    "max_tokens {max} < min_tokens {}",
                    self.min_tokens
                )));
            }
        }
        Ok(())
    }
}

/// Per-reason drop counts attached to every pairing run.
/// `kept` plus all drop reasons always sums to the record count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub records: usize,
    pub kept: usize,
    pub unmatched: usize,
    pub flagged: BTreeMap<String, usize>,
    pub length: usize,
}

fn byte_offset(content: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in content.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

fn record_from_value(
    value: &Value,
    index: usize,
    path: &str,
) -> Result<DialogueRecord, CorpusError> {
    let missing = |field: &str| CorpusError::MissingField {
        path: path.to_string(),
        index,
        field: field.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| missing("<object>"))?;
    let get_str = |key: &str| obj.get(key).and_then(Value::as_str);
    let instruction = get_str("instruction").ok_or_else(|| missing("instruction"))?;
    let output = get_str("output").ok_or_else(|| missing("output"))?;
    if output.trim().is_empty() {
        return Err(missing("output"));
    }
    let id = get_str("id")
        .map(str::to_string)
        .unwrap_or_else(|| index.to_string());
    Ok(DialogueRecord {
        id,
        instruction: instruction.to_string(),
        patient_input: get_str("input").unwrap_or("").to_string(),
        reference_output: output.to_string(),
    })
}

/// Load reference dialogues from a JSON array or JSONL file.
/// Ids come from an explicit `id` field when present, else the zero-based
/// record index; input order is preserved.
pub fn load_dialogues(
    path: impl AsRef<Path>,
    format: CorpusFormat,
) -> Result<Vec<DialogueRecord>, CorpusError> {
    let path_str = path.as_ref().display().to_string();
    let content = fs::read_to_string(path.as_ref()).map_err(|source| CorpusError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut records = Vec::new();
    match format {
        CorpusFormat::JsonArray => {
            let values: Vec<Value> =
                serde_json::from_str(&content).map_err(|e| CorpusError::Parse {
                    path: path_str.clone(),
                    offset: byte_offset(&content, e.line(), e.column()),
                    index: 0,
                    detail: e.to_string(),
                })?;
            for (index, value) in values.iter().enumerate() {
                records.push(record_from_value(value, index, &path_str)?);
            }
        }
        CorpusFormat::Jsonl => {
            let mut offset = 0;
            let mut index = 0;
            for line in content.lines() {
                if !line.trim().is_empty() {
                    let value: Value =
                        serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                            path: path_str.clone(),
                            offset: offset + e.column().saturating_sub(1),
                            index,
                            detail: e.to_string(),
                        })?;
                    records.push(record_from_value(&value, index, &path_str)?);
                    index += 1;
                }
                offset += line.len() + 1;
            }
        }
    }
    let mut seen = BTreeSet::new();
    let dupes: Vec<String> = records
        .iter()
        .filter(|r| !seen.insert(r.id.clone()))
        .map(|r| r.id.clone())
        .collect();
    if !dupes.is_empty() {
        return Err(CorpusError::DuplicateIds {
            path: path_str,
            ids: dupes,
        });
    }
    Ok(records)
}

#[derive(Debug, Deserialize)]
struct RawCandidate {
    record_id: String,
    text: String,
    #[serde(default)]
    meta: CandidateMeta,
}

fn compute_flags(
    text: &str,
    meta: &CandidateMeta,
    policy: &NormalizationPolicy,
) -> BTreeSet<ResponseFlag> {
    let mut flags = BTreeSet::new();
    if tokenize(text, policy).is_empty() {
        flags.insert(ResponseFlag::Empty);
    }
    if let (Some(len), Some(max)) = (meta.generation_len, meta.max_generation_len) {
        let terminal = text
            .trim_end()
            .chars()
            .last()
            .map(|c| matches!(c, '.' | '!' | '?'))
            .unwrap_or(false);
        if len >= max && !terminal {
            flags.insert(ResponseFlag::Truncated);
        }
    }
    if meta.generation_error {
        flags.insert(ResponseFlag::GenerationError);
    }
    flags
}

/// Load one system's responses from JSONL, computing flags deterministically.
/// Unknown record_ids are permitted here and rejected at join time.
pub fn load_candidates(
    path: impl AsRef<Path>,
    system_id: &str,
    tokenize_policy: &NormalizationPolicy,
) -> Result<Vec<CandidateResponse>, CorpusError> {
    let path_str = path.as_ref().display().to_string();
    let content = fs::read_to_string(path.as_ref()).map_err(|source| CorpusError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut responses = Vec::new();
    let mut offset = 0;
    let mut index = 0;
    for line in content.lines() {
        if !line.trim().is_empty() {
            let raw: RawCandidate = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                path: path_str.clone(),
                offset: offset + e.column().saturating_sub(1),
                index,
                detail: e.to_string(),
            })?;
            let flags = compute_flags(&raw.text, &raw.meta, tokenize_policy);
            responses.push(CandidateResponse {
                record_id: raw.record_id,
                system_id: system_id.to_string(),
                text: raw.text,
                flags,
                meta: raw.meta,
            });
            index += 1;
        }
        offset += line.len() + 1;
    }
    let mut seen = BTreeSet::new();
    let dupes: Vec<String> = responses
        .iter()
        .filter(|r| !seen.insert(r.record_id.clone()))
        .map(|r| r.record_id.clone())
        .collect();
    if !dupes.is_empty() {
        return Err(CorpusError::DuplicateIds {
            path: path_str,
            ids: dupes,
        });
    }
    Ok(responses)
}

fn drop_reason(
    response: &CandidateResponse,
    policy: &FilterPolicy,
    tokenize_policy: &NormalizationPolicy,
) -> Option<String> {
    if let Some(flag) = response.flags.iter().find(|f| policy.drop_flags.contains(f)) {
        return Some(format!("{flag:?}").to_lowercase());
    }
    let len = tokenize(&response.text, tokenize_policy).len();
    if len < policy.min_tokens || policy.max_tokens.is_some_and(|max| len > max) {
        return Some("length".to_string());
    }
    None
}

/// Join both systems' responses onto the reference records and drop pairs
/// per the filter policy. Emission order follows record order.
pub fn pair_and_filter(
    records: &[DialogueRecord],
    side_a: &[CandidateResponse],
    side_b: &[CandidateResponse],
    policy: &FilterPolicy,
    tokenize_policy: &NormalizationPolicy,
) -> Result<(Vec<EvalPair>, FilterAudit), CorpusError> {
    policy.validate()?;
    let by_id = |side: &[CandidateResponse]| -> HashMap<String, CandidateResponse> {
        side.iter().map(|r| (r.record_id.clone(), r.clone())).collect()
    };
    let a_map = by_id(side_a);
    let b_map = by_id(side_b);
    let mut audit = FilterAudit {
        records: records.len(),
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for record in records {
        let (a, b) = match (a_map.get(&record.id), b_map.get(&record.id)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                audit.unmatched += 1;
                continue;
            }
        };
        let reason_a = drop_reason(a, policy, tokenize_policy);
        let reason_b = drop_reason(b, policy, tokenize_policy);
        match reason_a.or(reason_b) {
            Some(reason) if reason == "length" => audit.length += 1,
            Some(reason) => *audit.flagged.entry(reason).or_insert(0) += 1,
            None => {
                pairs.push(EvalPair {
                    record: record.clone(),
                    response_a: a.clone(),
                    response_b: b.clone(),
                });
                audit.kept += 1;
            }
        }
    }
    if pairs.is_empty() {
        return Err(CorpusError::EmptyAfterFilter { audit });
    }
    Ok((pairs, audit))
}

/// Uniform sample of `n` pairs without replacement, fully determined by the
/// seed (ChaCha8). Output preserves the input's relative order.
pub fn sample_subset(pairs: &[EvalPair], n: usize, seed: u64) -> Result<Vec<EvalPair>, CorpusError> {
    if n > pairs.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, pairs.len(), n).into_vec();
    indices.sort_unstable();
    Ok(indices.into_iter().map(|i| pairs[i].clone()).collect())
}
