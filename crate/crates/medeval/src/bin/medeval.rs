//! Pipeline orchestrator: ingest-check, score, judge, report, demo-adapter.
//!
//! Exit codes: 0 success, 1 check failure, 2 invalid config or unreadable
//! input, 3 empty corpus or missing summaries, 4 endpoint unreachable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medeval::adapter::{
    cross_entropy, cross_entropy_from_logits, cross_entropy_logit_gradient, finite_diff_gradient,
    lora_apply, lora_merge, lora_param_savings, swiglu, swiglu_jacobian, DenseMatrix, LoraAdapter,
    SwigluParams, TokenDistributionSequence,
};
use medeval::config::RunConfig;
use medeval::corpus::{load_candidates, load_dialogues, pair_and_filter, sample_subset, EvalPair};
use medeval::judge::{run_track_b, AuditLog, JudgeError, JudgeRubric};
use medeval::metrics::{score_pair, PairScores};
use medeval::report::{build_divergence, render, ProvenanceMeta, RenderFormat};
use medeval::stats::{
    attach_printed_improvement, summarize_track_a, summarize_track_b, TrackASummary, TrackBSummary,
};

#[derive(Parser)]
#[command(name = "medeval", version, about = "Dual-track dialogue evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load references and candidates, report counts and the filter audit.
    IngestCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Track A: score all pairs and write per-pair scores plus the summary.
    Score {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the summary to these metrics (default: all five).
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Worker threads for metric scoring.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Track B: sample a subset, query the judge endpoint, write verdicts.
    Judge {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fuse track summaries into the divergence report.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Also emit markdown.
        #[arg(long)]
        markdown: bool,
        /// Also emit CSV.
        #[arg(long)]
        csv: bool,
        /// JSON file mapping metric name to an externally published
        /// improvement percentage; rows are flagged on disagreement.
        #[arg(long)]
        printed: Option<PathBuf>,
    },
    /// Run the numeric-kernel invariant and gradient suites.
    DemoAdapter {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional JSON fixture with matrices and an expected merge result.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::IngestCheck { config } => cmd_ingest_check(&config),
        Command::Score {
            config,
            metrics,
            workers,
        } => cmd_score(&config, &metrics, workers),
        Command::Judge { config } => cmd_judge(&config),
        Command::Report {
            config,
            markdown,
            csv,
            printed,
        } => cmd_report(&config, markdown, csv, printed.as_deref()),
        Command::DemoAdapter {
            trials,
            seed,
            fixture,
        } => cmd_demo_adapter(trials, seed, fixture.as_deref()),
    };
    ExitCode::from(code)
}

fn fail(code: u8, message: impl std::fmt::Display) -> u8 {
    eprintln!("error: {message}");
    code
}

fn load_config(path: &Path) -> Result<RunConfig, u8> {
    RunConfig::load(path).map_err(|e| fail(2, e))
}

struct LoadedCorpus {
    pairs: Vec<EvalPair>,
    audit: medeval::corpus::FilterAudit,
}

fn load_corpus(config: &RunConfig) -> Result<LoadedCorpus, u8> {
    let records = load_dialogues(&config.paths.references, config.paths.references_format)
        .map_err(|e| fail(2, e))?;
    let baseline = load_candidates(
        &config.paths.candidates_baseline,
        &config.labels.baseline,
        &config.metrics.tokenize,
    )
    .map_err(|e| fail(2, e))?;
    let treatment = load_candidates(
        &config.paths.candidates_treatment,
        &config.labels.treatment,
        &config.metrics.tokenize,
    )
    .map_err(|e| fail(2, e))?;
    let (pairs, audit) = pair_and_filter(
        &records,
        &baseline,
        &treatment,
        &config.filter,
        &config.metrics.tokenize,
    )
    .map_err(|e| fail(3, e))?;
    Ok(LoadedCorpus { pairs, audit })
}

/// Output directories are append-only per run id.
fn claim_dir(dir: &Path) -> Result<(), u8> {
    if dir.exists() {
        return Err(fail(
            2,
            format!(
                "{} already exists; reruns never overwrite prior artifacts, pick a new run_id",
                dir.display()
            ),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| fail(2, format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), u8> {
    fs::write(path, content).map_err(|e| fail(2, format!("cannot write {}: {e}", path.display())))
}

fn cmd_ingest_check(config_path: &Path) -> u8 {
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let corpus = match load_corpus(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "pairs": corpus.pairs.len(),
            "audit": corpus.audit,
        }))
        .expect("serializable audit")
    );
    0
}

fn score_all(pairs: &[EvalPair], config: &RunConfig, workers: usize) -> Vec<PairScores> {
    let workers = workers.max(1).min(pairs.len().max(1));
    let mut slots: Vec<Option<(PairScores, PairScores)>> = vec![None; pairs.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= pairs.len() {
                    break;
                }
                let scored = score_pair(&pairs[i], &config.metrics);
                slot_refs.lock().expect("slots")[i] = Some(scored);
            });
        }
    });
    slots
        .into_iter()
        .flat_map(|s| {
            let (a, b) = s.expect("every pair scored");
            [a, b]
        })
        .collect()
}

fn cmd_score(config_path: &Path, metric_filter: &[String], workers: usize) -> u8 {
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let corpus = match load_corpus(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let dir = config.run_dir().join("track_a");
    if let Err(code) = claim_dir(&dir) {
        return code;
    }
    let all_scores = score_all(&corpus.pairs, &config, workers);
    let mut summary = match summarize_track_a(
        &all_scores,
        &config.labels.baseline,
        &config.labels.treatment,
        config.stats.alternative,
    ) {
        Ok(s) => s,
        Err(e) => return fail(2, e),
    };
    if !metric_filter.is_empty() {
        summary.rows.retain(|r| metric_filter.contains(&r.metric_name));
        if summary.rows.is_empty() {
            return fail(2, "metric filter matched no metrics");
        }
    }
    let jsonl: String = all_scores
        .iter()
        .map(|s| serde_json::to_string(s).expect("serializable scores") + "\n")
        .collect();
    let mut csv_out = String::from("record_id,system_id,bleu,rouge1f,rouge2f,rougelf,meteor\n");
    for s in &all_scores {
        csv_out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.record_id, s.system_id, s.bleu, s.rouge1f, s.rouge2f, s.rougelf, s.meteor
        ));
    }
    let steps = [
        write_file(&dir.join("pair_scores.jsonl"), &jsonl),
        write_file(&dir.join("pair_scores.csv"), &csv_out),
        write_file(
            &dir.join("summary.json"),
            &(serde_json::to_string_pretty(&summary).expect("serializable summary") + "\n"),
        ),
        write_file(
            &dir.join("filter_audit.json"),
            &(serde_json::to_string_pretty(&corpus.audit).expect("serializable audit") + "\n"),
        ),
    ];
    for step in steps {
        if let Err(code) = step {
            return code;
        }
    }
    println!("track A written to {}", dir.display());
    0
}

fn cmd_judge(config_path: &Path) -> u8 {
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Err(e) = config.judge.validate() {
        return fail(2, e);
    }
    // fail on a missing credential before any corpus or network work
    if !config.judge.api_key_source.is_empty()
        && std::env::var(&config.judge.api_key_source).is_err()
    {
        return fail(
            2,
            JudgeError::MissingCredential(config.judge.api_key_source.clone()),
        );
    }
    let corpus = match load_corpus(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let subset = match sample_subset(&corpus.pairs, config.sample.size, config.sample.seed) {
        Ok(s) => s,
        Err(e) => return fail(3, e),
    };
    let dir = config.run_dir().join("track_b");
    if let Err(code) = claim_dir(&dir) {
        return code;
    }
    let logs = config.run_dir().join("logs");
    if let Err(e) = fs::create_dir_all(&logs) {
        return fail(2, format!("cannot create {}: {e}", logs.display()));
    }
    let audit = match AuditLog::to_file(&logs.join("judge_audit.jsonl")) {
        Ok(a) => a,
        Err(e) => return fail(2, e),
    };
    let rubric = JudgeRubric::default();
    let run = match run_track_b(&subset, &rubric, &config.judge, config.sample.seed, &audit) {
        Ok(r) => r,
        Err(e @ (JudgeError::AllFailed(_) | JudgeError::Transport { .. })) => return fail(4, e),
        Err(e) => return fail(2, e),
    };
    let summary = match summarize_track_b(
        &run.verdicts,
        &rubric.dimension_names(),
        &config.labels.baseline,
        &config.labels.treatment,
        config.stats.alternative,
    ) {
        Ok(s) => s,
        Err(e) => return fail(2, e),
    };
    let jsonl: String = run
        .verdicts
        .iter()
        .map(|v| serde_json::to_string(v).expect("serializable verdict") + "\n")
        .collect();
    let steps = [
        write_file(&dir.join("verdicts.jsonl"), &jsonl),
        write_file(
            &dir.join("summary.json"),
            &(serde_json::to_string_pretty(&summary).expect("serializable summary") + "\n"),
        ),
        if run.failures.is_empty() {
            Ok(())
        } else {
            write_file(
                &dir.join("failures.json"),
                &(serde_json::to_string_pretty(&run.failures).expect("serializable failures")
                    + "\n"),
            )
        },
    ];
    for step in steps {
        if let Err(code) = step {
            return code;
        }
    }
    println!(
        "track B written to {} ({} verdicts, {} failures)",
        dir.display(),
        run.verdicts.len(),
        run.failures.len()
    );
    0
}

fn cmd_report(config_path: &Path, markdown: bool, csv: bool, printed: Option<&Path>) -> u8 {
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let track_a_path = config.run_dir().join("track_a").join("summary.json");
    if !track_a_path.exists() {
        return fail(3, format!("no Track A summary at {}", track_a_path.display()));
    }
    let mut track_a: TrackASummary = match fs::read_to_string(&track_a_path)
        .map_err(|e| e.to_string())
        .and_then(|s| serde_json::from_str(&s).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => return fail(2, format!("malformed {}: {e}", track_a_path.display())),
    };
    if let Some(printed_path) = printed {
        let printed_map: BTreeMap<String, f64> = match fs::read_to_string(printed_path)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str(&s).map_err(|e| e.to_string()))
        {
            Ok(m) => m,
            Err(e) => return fail(2, format!("malformed {}: {e}", printed_path.display())),
        };
        for row in &mut track_a.rows {
            if let Some(&pct) = printed_map.get(&row.metric_name) {
                attach_printed_improvement(row, pct);
            }
        }
    }
    let track_b_path = config.run_dir().join("track_b").join("summary.json");
    let track_b: Option<TrackBSummary> = if track_b_path.exists() {
        match fs::read_to_string(&track_b_path)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str(&s).map_err(|e| e.to_string()))
        {
            Ok(s) => Some(s),
            Err(e) => return fail(2, format!("malformed {}: {e}", track_b_path.display())),
        }
    } else {
        None
    };
    let audit_path = config.run_dir().join("track_a").join("filter_audit.json");
    let filter_audit = fs::read_to_string(&audit_path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let provenance = ProvenanceMeta {
        corpus_id: config
            .paths
            .references
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default(),
        filter_audit,
        seeds: BTreeMap::from([("sample".to_string(), config.sample.seed)]),
        judge_endpoint: config.judge.base_url.clone(),
        training_meta: config.training_meta.clone(),
    };
    let report = build_divergence(&track_a, track_b.as_ref(), provenance);
    let dir = config.run_dir().join("report");
    if let Err(code) = claim_dir(&dir) {
        return code;
    }
    if let Err(code) = write_file(&dir.join("report.json"), &render(&report, RenderFormat::Json)) {
        return code;
    }
    if markdown {
        if let Err(code) = write_file(
            &dir.join("report.md"),
            &render(&report, RenderFormat::Markdown),
        ) {
            return code;
        }
    }
    if csv {
        if let Err(code) =
            write_file(&dir.join("report.csv"), &render(&report, RenderFormat::Csv))
        {
            return code;
        }
    }
    println!("report written to {}", dir.display());
    0
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run_check(name: &'static str, f: impl FnOnce() -> Result<(), String>) -> Check {
    match f() {
        Ok(()) => Check {
            name,
            passed: true,
            detail: "ok".to_string(),
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

#[derive(serde::Deserialize)]
struct AdapterFixture {
    w0: DenseMatrix,
    b: DenseMatrix,
    a: DenseMatrix,
    expected_merge: DenseMatrix,
}

fn cmd_demo_adapter(trials: usize, seed: u64, fixture: Option<&Path>) -> u8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let random_matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        DenseMatrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("finite random matrix")
    };

    checks.push(run_check("frozen_base_bit_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..trials {
            let (d, k) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let r = rng.gen_range(1..d.min(k));
            let w0 = random_matrix(&mut rng, d, k);
            let bits: Vec<u64> = w0.entries.iter().map(|e| e.to_bits()).collect();
            let adapter = LoraAdapter::new(
                w0,
                random_matrix(&mut rng, d, r),
                random_matrix(&mut rng, r, k),
            )
            .map_err(|e| e.to_string())?;
            let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            lora_apply(&adapter, &x).map_err(|e| e.to_string())?;
            lora_merge(&adapter).map_err(|e| e.to_string())?;
            let after: Vec<u64> = adapter.base().entries.iter().map(|e| e.to_bits()).collect();
            if bits != after {
                return Err("base weights changed bit pattern".to_string());
            }
        }
        Ok(())
    }));

    checks.push(run_check("merge_apply_agreement", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for _ in 0..trials {
            let (d, k) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let r = rng.gen_range(1..d.min(k));
            let adapter = LoraAdapter::new(
                random_matrix(&mut rng, d, k),
                random_matrix(&mut rng, d, r),
                random_matrix(&mut rng, r, k),
            )
            .map_err(|e| e.to_string())?;
            let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let factored = lora_apply(&adapter, &x).map_err(|e| e.to_string())?;
            let merged = lora_merge(&adapter)
                .and_then(|m| m.matvec(&x))
                .map_err(|e| e.to_string())?;
            let x_norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff: f64 = factored
                .iter()
                .zip(&merged)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            if diff > 1e-10 * x_norm.max(1.0) {
                return Err(format!("factored vs merged mismatch: {diff}"));
            }
        }
        Ok(())
    }));

    checks.push(run_check("param_savings", || {
        let (full, lora, ratio) = lora_param_savings(1024, 1024, 8).map_err(|e| e.to_string())?;
        if full != 1_048_576 || lora != 16_384 || (ratio - 64.0).abs() > 1e-12 {
            return Err(format!("unexpected savings: {full} {lora} {ratio}"));
        }
        Ok(())
    }));

    checks.push(run_check("cross_entropy_uniform", || {
        let v = 32_000usize;
        let dist = TokenDistributionSequence::new(vec![vec![1.0 / v as f64; v]; 2], vec![3, 99])
            .map_err(|e| e.to_string())?;
        let loss = cross_entropy(&dist);
        let expected = (v as f64).ln();
        if (loss - expected).abs() > 1e-9 {
            return Err(format!("loss {loss} vs ln V {expected}"));
        }
        Ok(())
    }));

    checks.push(run_check("cross_entropy_lower_bound", || {
        let sure = TokenDistributionSequence::new(vec![vec![0.0, 1.0]], vec![1])
            .map_err(|e| e.to_string())?;
        if cross_entropy(&sure) != 0.0 {
            return Err("certain targets should give zero loss".to_string());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for _ in 0..trials {
            let vocab = rng.gen_range(2..6);
            let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let dist = TokenDistributionSequence::new(vec![probs], vec![0])
                .map_err(|e| e.to_string())?;
            if cross_entropy(&dist) < 0.0 {
                return Err("negative loss".to_string());
            }
        }
        Ok(())
    }));

    checks.push(run_check("swiglu_gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        for _ in 0..trials {
            let n = rng.gen_range(2..5);
            let params = SwigluParams {
                w: random_matrix(&mut rng, n, n),
                bias: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                beta: rng.gen_range(0.1..3.0),
            };
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let direction: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jac = swiglu_jacobian(&x, &params).map_err(|e| e.to_string())?;
            let numeric = finite_diff_gradient(
                |v| {
                    swiglu(v, &params)
                        .expect("conformable")
                        .iter()
                        .zip(&direction)
                        .map(|(o, u)| o * u)
                        .sum()
                },
                &x,
                1e-5,
            );
            for (j, num) in numeric.iter().enumerate() {
                let analytic: f64 = (0..n).map(|i| jac.get(i, j) * direction[i]).sum();
                if (analytic - num).abs() / analytic.abs().max(1e-6) > 1e-4 {
                    return Err(format!("component {j}: {analytic} vs {num}"));
                }
            }
        }
        Ok(())
    }));

    checks.push(run_check("cross_entropy_gradient", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        for _ in 0..trials {
            let steps = rng.gen_range(1..4);
            let vocab = rng.gen_range(3..7);
            let logits: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let targets: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..vocab)).collect();
            let analytic =
                cross_entropy_logit_gradient(&logits, &targets).map_err(|e| e.to_string())?;
            let flat: Vec<f64> = logits.iter().flatten().copied().collect();
            let numeric = finite_diff_gradient(
                |v| {
                    let rows: Vec<Vec<f64>> = v.chunks(vocab).map(|c| c.to_vec()).collect();
                    cross_entropy_from_logits(&rows, &targets).expect("valid logits")
                },
                &flat,
                1e-5,
            );
            for (i, (a, n)) in analytic.iter().flatten().zip(&numeric).enumerate() {
                if (a - n).abs() / a.abs().max(1e-6) > 1e-4 {
                    return Err(format!("component {i}: {a} vs {n}"));
                }
            }
        }
        Ok(())
    }));

    if let Some(path) = fixture {
        let loaded: Result<AdapterFixture, String> = fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str(&s).map_err(|e| e.to_string()));
        checks.push(run_check("merge_fixture", || {
            let fx = loaded?;
            let adapter = LoraAdapter::new(fx.w0, fx.b, fx.a).map_err(|e| e.to_string())?;
            let merged = lora_merge(&adapter).map_err(|e| e.to_string())?;
            if merged.rows != fx.expected_merge.rows || merged.cols != fx.expected_merge.cols {
                return Err("fixture merge shape mismatch".to_string());
            }
            let worst = merged
                .entries
                .iter()
                .zip(&fx.expected_merge.entries)
                .map(|(m, e)| (m - e).abs())
                .fold(0.0f64, f64::max);
            if worst > 1e-12 {
                return Err(format!("fixture merge differs by {worst}"));
            }
            Ok(())
        }));
    }

    let _ = &mut rng;
    let mut all_passed = true;
    for check in &checks {
        println!(
            "{} {} ({})",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
        all_passed &= check.passed;
    }
    if all_passed {
        0
    } else {
        1
    }
}
