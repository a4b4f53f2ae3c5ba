//! Track B: blinded rubric prompts, submission to an OpenAI-compatible
//! chat-completion endpoint with bounded concurrency and retries, and
//! parsing of 1-5 verdicts back into unblinded structured scores.

pub mod stub;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::EvalPair;

pub const SCALE_MIN: u8 = 1;
pub const SCALE_MAX: u8 = 5;

pub const LABEL_FIRST: &str = "Response 1";
pub const LABEL_SECOND: &str = "Response 2";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("endpoint returned HTTP {status}: {detail}")]
    Protocol { status: u16, detail: String },
    #[error("malformed completion payload: {0}")]
    BadCompletion(String),
    #[error("cannot parse verdict ({reason}); raw reply: {raw}")]
    Parse { reason: String, raw: String },
    #[error("no pairs to judge")]
    NoPairs,
    #[error("all {0} pairs failed")]
    AllFailed(usize),
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricDimension {
    pub name: String,
    pub definition: String,
}

/// The four-dimension clinical scoring rubric shown to the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRubric {
    pub dimensions: Vec<RubricDimension>,
    pub scale_min: u8,
    pub scale_max: u8,
}

impl Default for JudgeRubric {
    fn default() -> Self {
        let dim = |name: &str, definition: &str| RubricDimension {
            name: name.to_string(),
            definition: definition.to_string(),
        };
        JudgeRubric {
            dimensions: vec![
                dim(
                    "Helpfulness",
                    "How much the response practically helps the patient reach their \
                     health-related goal or resolve the medical question they asked.",
                ),
                dim(
                    "Relevance",
                    "How strictly the response stays aligned with the specific symptoms, \
                     questions, or clinical concerns the user raised; off-topic or generic \
                     content is penalized.",
                ),
                dim(
                    "Accuracy",
                    "The factual and medical correctness of the information given: advice \
                     must be scientifically valid, safe, and consistent with current \
                     medical consensus.",
                ),
                dim(
                    "Comprehensiveness",
                    "The depth and breadth of the clinical information: a strong response \
                     covers the essential aspects and nuances of the query without \
                     drowning the patient in tangents or dense jargon.",
                ),
            ],
            scale_min: SCALE_MIN,
            scale_max: SCALE_MAX,
        }
    }
}

impl JudgeRubric {
    pub fn dimension_names(&self) -> Vec<String> {
        self.dimensions.iter().map(|d| d.name.clone()).collect()
    }
}

/// Which system's response appears under "Response 1".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindAssignment {
    pub record_id: String,
    pub first_system: String,
    pub second_system: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic per-record blinding: the label order is a pure function of
/// (seed, record_id), independent of submission order.
pub fn blind_assignment(pair: &EvalPair, seed: u64) -> BlindAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(pair.record.id.as_bytes()));
    let swap: bool = rng.gen();
    let (first, second) = if swap {
        (&pair.response_b, &pair.response_a)
    } else {
        (&pair.response_a, &pair.response_b)
    };
    BlindAssignment {
        record_id: pair.record.id.clone(),
        first_system: first.system_id.clone(),
        second_system: second.system_id.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    pub max_concurrent: usize,
    /// Name of the environment variable holding the bearer token; empty
    /// means the endpoint needs no credential (e.g. the bundled stub).
    pub api_key_source: String,
}

impl Default for JudgeEndpointConfig {
    fn default() -> Self {
        JudgeEndpointConfig {
            base_url: String::new(),
            model_name: "gpt-4".to_string(),
            temperature: 0.0,
            max_retries: 3,
            backoff_base_ms: 500,
            timeout_ms: 60_000,
            max_concurrent: 4,
            api_key_source: "JUDGE_API_KEY".to_string(),
        }
    }
}

impl JudgeEndpointConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_url.is_empty() {
            return Err("judge base_url is empty".into());
        }
        if self.max_concurrent < 1 {
            return Err("judge max_concurrent must be >= 1".into());
        }
        if self.temperature < 0.0 {
            return Err("judge temperature must be >= 0".into());
        }
        Ok(())
    }
}

/// Unblinded per-system rubric scores for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub record_id: String,
    /// system_id -> dimension -> integer score in [1,5]
    pub scores: BTreeMap<String, BTreeMap<String, u8>>,
    pub raw_response: String,
    pub assignment: BlindAssignment,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgePresentation {
    /// Both blinded responses in one prompt (comparative scoring).
    #[default]
    Pairwise,
    /// One response per prompt; kept for ablation.
    Single,
}

fn patient_query(pair: &EvalPair) -> String {
    if pair.record.patient_input.trim().is_empty() {
        pair.record.instruction.clone()
    } else {
        format!("{}\n\n{}", pair.record.instruction, pair.record.patient_input)
    }
}

fn response_text<'a>(pair: &'a EvalPair, system: &str) -> &'a str {
    if pair.response_a.system_id == system {
        &pair.response_a.text
    } else {
        &pair.response_b.text
    }
}

/// Build the blinded evaluation prompt: patient query, both responses under
/// anonymous labels in assignment order, the rubric, and a strict-JSON
/// answer instruction.
pub fn build_prompt(pair: &EvalPair, rubric: &JudgeRubric, assignment: &BlindAssignment) -> String {
    let mut prompt = String::new();
    prompt.push_str("You are scoring two anonymous responses to the same patient query.\n\n");
    prompt.push_str("## Patient query\n\n");
    prompt.push_str(&patient_query(pair));
    prompt.push_str("\n\n## Response 1\n\n");
    prompt.push_str(response_text(pair, &assignment.first_system));
    prompt.push_str("\n\n## Response 2\n\n");
    prompt.push_str(response_text(pair, &assignment.second_system));
    prompt.push_str("\n\n## Scoring dimensions\n\n");
    for d in &rubric.dimensions {
        prompt.push_str(&format!("- {}: {}\n", d.name, d.definition));
    }
    prompt.push_str(&format!(
        "\nScore each response on every dimension with an integer from {} to {}.\n",
        rubric.scale_min, rubric.scale_max
    ));
    prompt.push_str(
        "Answer with only a JSON object of this exact shape, no prose:\n\
         {\"Response 1\": {",
    );
    let dims: Vec<String> = rubric
        .dimensions
        .iter()
        .map(|d| format!("\"{}\": <int>", d.name))
        .collect();
    prompt.push_str(&dims.join(", "));
    prompt.push_str("}, \"Response 2\": {");
    prompt.push_str(&dims.join(", "));
    prompt.push_str("}}\n");
    prompt
}

const SYSTEM_MESSAGE: &str =
    "You are a careful clinical evaluation assistant. You score anonymous \
     responses against a fixed rubric and reply only in the requested JSON format.";

const REFORMAT_REMINDER: &str = "\n\nYour previous reply could not be parsed. \
     Reply again with ONLY the JSON object in the exact shape requested, nothing else.";

#[derive(Debug, Serialize)]
struct AuditLine<'a> {
    record_id: &'a str,
    attempt: u32,
    request_hash: String,
    status: u16,
    latency_ms: u64,
    raw_response: &'a str,
}

/// Append-only JSONL log of every HTTP attempt.
pub struct AuditLog {
    writer: Mutex<Box<dyn Write + Send>>,
}

impl AuditLog {
    pub fn to_file(path: &Path) -> Result<Self, JudgeError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(AuditLog {
            writer: Mutex::new(Box::new(std::io::BufWriter::new(file))),
        })
    }

    pub fn sink() -> Self {
        AuditLog {
            writer: Mutex::new(Box::new(std::io::sink())),
        }
    }

    fn record(&self, line: &AuditLine) {
        let mut w = self.writer.lock().expect("audit log lock");
        if let Ok(s) = serde_json::to_string(line) {
            let _ = writeln!(w, "{s}");
            let _ = w.flush();
        }
    }
}

pub struct JudgeClient {
    config: JudgeEndpointConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl JudgeClient {
    /// Resolves the credential up front: a missing key fails here, before
    /// any network traffic.
    pub fn new(config: JudgeEndpointConfig) -> Result<Self, JudgeError> {
        let api_key = if config.api_key_source.is_empty() {
            None
        } else {
            Some(
                std::env::var(&config.api_key_source)
                    .map_err(|_| JudgeError::MissingCredential(config.api_key_source.clone()))?,
            )
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| JudgeError::Transport {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(JudgeClient {
            config,
            api_key,
            http,
        })
    }

    /// One chat-completion request, retried with exponential backoff on
    /// transport errors and HTTP 429/5xx. Returns the first choice's
    /// message content and the number of attempts used.
    pub fn submit(
        &self,
        prompt: &str,
        record_id: &str,
        audit: &AuditLog,
    ) -> Result<(String, u32), JudgeError> {
        let url = format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.config.temperature,
        });
        let request_hash = {
            let bytes = serde_json::to_vec(&body).expect("serializable body");
            let digest = Sha256::digest(&bytes);
            digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        let max_attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let backoff = self.config.backoff_base_ms * (1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let start = Instant::now();
            let mut request = self.http.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status().as_u16();
                    let text = response.text().unwrap_or_default();
                    audit.record(&AuditLine {
                        record_id,
                        attempt,
                        request_hash: request_hash.clone(),
                        status,
                        latency_ms: start.elapsed().as_millis() as u64,
                        raw_response: &text,
                    });
                    if (200..300).contains(&status) {
                        let content = extract_content(&text)?;
                        return Ok((content, attempt));
                    }
                    if status == 429 || status >= 500 {
                        last_error = format!("HTTP {status}");
                        continue;
                    }
                    return Err(JudgeError::Protocol {
                        status,
                        detail: text,
                    });
                }
                Err(e) => {
                    audit.record(&AuditLine {
                        record_id,
                        attempt,
                        request_hash: request_hash.clone(),
                        status: 0,
                        latency_ms: start.elapsed().as_millis() as u64,
                        raw_response: &e.to_string(),
                    });
                    last_error = e.to_string();
                }
            }
        }
        Err(JudgeError::Transport {
            attempts: max_attempts,
            detail: last_error,
        })
    }
}

fn extract_content(body: &str) -> Result<String, JudgeError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| JudgeError::BadCompletion(e.to_string()))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| JudgeError::BadCompletion("missing choices[0].message.content".into()))
}

/// Find the first balanced JSON object embedded in prose.
fn first_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + ch.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parse the judge's reply into an unblinded verdict: strict JSON first,
/// then a lenient pass over the first embedded JSON object.
pub fn parse_verdict(
    raw: &str,
    rubric: &JudgeRubric,
    assignment: &BlindAssignment,
) -> Result<JudgeVerdict, JudgeError> {
    type LabelScores = BTreeMap<String, BTreeMap<String, i64>>;
    let parse_err = |reason: String| JudgeError::Parse {
        reason,
        raw: raw.to_string(),
    };
    let strict: Result<LabelScores, _> = serde_json::from_str(raw.trim());
    let by_label: LabelScores = match strict {
        Ok(v) => v,
        Err(_) => {
            let embedded = first_json_object(raw)
                .ok_or_else(|| parse_err("no JSON object found".to_string()))?;
            serde_json::from_str(embedded).map_err(|e| parse_err(e.to_string()))?
        }
    };
    let mut scores = BTreeMap::new();
    for (label, system) in [
        (LABEL_FIRST, &assignment.first_system),
        (LABEL_SECOND, &assignment.second_system),
    ] {
        let label_scores = by_label
            .get(label)
            .ok_or_else(|| parse_err(format!("missing \"{label}\"")))?;
        let mut per_dim = BTreeMap::new();
        for d in &rubric.dimensions {
            let value = *label_scores
                .get(&d.name)
                .ok_or_else(|| parse_err(format!("missing dimension \"{}\"", d.name)))?;
            if value < rubric.scale_min as i64 || value > rubric.scale_max as i64 {
                return Err(parse_err(format!(
                    "score {value} for dimension \"{}\" outside [{}, {}]",
                    d.name, rubric.scale_min, rubric.scale_max
                )));
            }
            per_dim.insert(d.name.clone(), value as u8);
        }
        scores.insert(system.clone(), per_dim);
    }
    Ok(JudgeVerdict {
        record_id: assignment.record_id.clone(),
        scores,
        raw_response: raw.to_string(),
        assignment: assignment.clone(),
        attempts: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedPair {
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct TrackBRun {
    pub verdicts: Vec<JudgeVerdict>,
    pub failures: Vec<FailedPair>,
}

fn judge_one(
    client: &JudgeClient,
    pair: &EvalPair,
    rubric: &JudgeRubric,
    seed: u64,
    audit: &AuditLog,
) -> Result<JudgeVerdict, JudgeError> {
    let assignment = blind_assignment(pair, seed);
    let prompt = build_prompt(pair, rubric, &assignment);
    let (raw, attempts) = client.submit(&prompt, &pair.record.id, audit)?;
    match parse_verdict(&raw, rubric, &assignment) {
        Ok(mut verdict) => {
            verdict.attempts = attempts;
            Ok(verdict)
        }
        Err(_) => {
            // one reformat-resubmit, then hard failure
            let retry_prompt = format!("{prompt}{REFORMAT_REMINDER}");
            let (raw2, attempts2) = client.submit(&retry_prompt, &pair.record.id, audit)?;
            let mut verdict = parse_verdict(&raw2, rubric, &assignment)?;
            verdict.attempts = attempts + attempts2;
            Ok(verdict)
        }
    }
}

/// Judge every pair with at most `max_concurrent` requests in flight.
/// Per-pair failures are isolated; output is sorted by record_id.
pub fn run_track_b(
    pairs: &[EvalPair],
    rubric: &JudgeRubric,
    config: &JudgeEndpointConfig,
    seed: u64,
    audit: &AuditLog,
) -> Result<TrackBRun, JudgeError> {
    if pairs.is_empty() {
        return Err(JudgeError::NoPairs);
    }
    let client = JudgeClient::new(config.clone())?;
    let next = AtomicUsize::new(0);
    let verdicts = Mutex::new(Vec::new());
    let failures = Mutex::new(Vec::new());
    let workers = config.max_concurrent.min(pairs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pairs.len() {
                    break;
                }
                match judge_one(&client, &pairs[i], rubric, seed, audit) {
                    Ok(v) => verdicts.lock().expect("verdicts lock").push(v),
                    Err(e) => failures.lock().expect("failures lock").push(FailedPair {
                        record_id: pairs[i].record.id.clone(),
                        error: e.to_string(),
                    }),
                }
            });
        }
    });
    let mut verdicts = verdicts.into_inner().expect("verdicts");
    let mut failures = failures.into_inner().expect("failures");
    verdicts.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    failures.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    if verdicts.is_empty() {
        return Err(JudgeError::AllFailed(failures.len()));
    }
    Ok(TrackBRun { verdicts, failures })
}
