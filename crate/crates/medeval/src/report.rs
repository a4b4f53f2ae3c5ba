//! Fuses the Track A and Track B summaries into a divergence report and
//! renders it as JSON (canonical), markdown, or CSV.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::corpus::FilterAudit;
use crate::stats::{TrackASummary, TrackBSummary};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Baseline,
    Treatment,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowVerdict {
    pub winner: Winner,
    pub significant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceClass {
    Concordant,
    DivergentSignificantVsNonsignificant,
    DivergentBothSignificant,
    Inconclusive,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvenanceMeta {
    pub corpus_id: String,
    pub filter_audit: Option<FilterAudit>,
    pub seeds: BTreeMap<String, u64>,
    pub judge_endpoint: String,
    /// Free-form training-run metadata carried as provenance only.
    pub training_meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSection {
    pub per_metric_winner: BTreeMap<String, RowVerdict>,
    pub per_dimension_winner: BTreeMap<String, RowVerdict>,
    pub classification: DivergenceClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub schema_version: u32,
    pub track_a: TrackASummary,
    /// Absent when only the offline track ran.
    pub track_b: Option<TrackBSummary>,
    pub divergence: Option<DivergenceSection>,
    pub provenance: ProvenanceMeta,
}

fn verdict(baseline_mean: f64, treatment_mean: f64, significant: bool) -> RowVerdict {
    let winner = if treatment_mean > baseline_mean {
        Winner::Treatment
    } else if treatment_mean < baseline_mean {
        Winner::Baseline
    } else {
        Winner::Tie
    };
    RowVerdict {
        winner,
        significant,
    }
}

/// Ties carry no information; classification looks only at decided rows.
fn consensus(rows: &BTreeMap<String, RowVerdict>) -> Option<Winner> {
    let mut decided = rows.values().filter(|r| r.winner != Winner::Tie);
    let first = decided.next()?.winner;
    decided.all(|r| r.winner == first).then_some(first)
}

pub fn classify(
    per_metric: &BTreeMap<String, RowVerdict>,
    per_dimension: &BTreeMap<String, RowVerdict>,
) -> DivergenceClass {
    let decided = |rows: &BTreeMap<String, RowVerdict>| -> Vec<RowVerdict> {
        rows.values().filter(|r| r.winner != Winner::Tie).cloned().collect()
    };
    let (a_rows, b_rows) = (decided(per_metric), decided(per_dimension));
    if a_rows.is_empty() || b_rows.is_empty() {
        return DivergenceClass::Inconclusive;
    }
    let (a_winner, b_winner) = match (consensus(per_metric), consensus(per_dimension)) {
        (Some(a), Some(b)) => (a, b),
        _ => return DivergenceClass::Inconclusive,
    };
    if a_winner == b_winner {
        return DivergenceClass::Concordant;
    }
    let a_all_significant = a_rows.iter().all(|r| r.significant);
    let b_all_significant = b_rows.iter().all(|r| r.significant);
    let b_none_significant = b_rows.iter().all(|r| !r.significant);
    if a_all_significant && b_none_significant {
        DivergenceClass::DivergentSignificantVsNonsignificant
    } else if a_all_significant && b_all_significant {
        DivergenceClass::DivergentBothSignificant
    } else {
        DivergenceClass::Inconclusive
    }
}

/// Build the full report. The divergence section needs both tracks.
pub fn build_divergence(
    track_a: &TrackASummary,
    track_b: Option<&TrackBSummary>,
    provenance: ProvenanceMeta,
) -> DivergenceReport {
    let per_metric: BTreeMap<String, RowVerdict> = track_a
        .rows
        .iter()
        .map(|r| {
            (
                r.metric_name.clone(),
                verdict(r.baseline_mean, r.treatment_mean, r.significant),
            )
        })
        .collect();
    let divergence = track_b.map(|b| {
        let per_dimension: BTreeMap<String, RowVerdict> = b
            .rows
            .iter()
            .map(|r| {
                (
                    r.dimension.clone(),
                    verdict(r.baseline_mean, r.treatment_mean, r.significant),
                )
            })
            .collect();
        let classification = classify(&per_metric, &per_dimension);
        DivergenceSection {
            per_metric_winner: per_metric.clone(),
            per_dimension_winner: per_dimension,
            classification,
        }
    });
    DivergenceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        track_a: track_a.clone(),
        track_b: track_b.cloned(),
        divergence,
        provenance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    Markdown,
    Json,
    Csv,
}

pub fn render(report: &DivergenceReport, format: RenderFormat) -> String {
    match format {
        RenderFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("serializable report");
            s.push('\n');
            s
        }
        RenderFormat::Markdown => render_markdown(report),
        RenderFormat::Csv => render_csv(report),
    }
}

pub fn parse_json(text: &str) -> Result<DivergenceReport, serde_json::Error> {
    serde_json::from_str(text)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn render_markdown(report: &DivergenceReport) -> String {
    let a = &report.track_a;
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    out.push_str(&format!(
        "## Track A: lexical metrics ({} pairs)\n\n",
        a.pair_count
    ));
    let metric_names: Vec<&str> = a.rows.iter().map(|r| r.metric_name.as_str()).collect();
    out.push_str(&format!("| Model | {} |\n", metric_names.join(" | ")));
    out.push_str(&format!("|---|{}|\n", "---|".repeat(metric_names.len())));
    out.push_str(&format!(
        "| {} | {} |\n",
        a.baseline_label,
        a.rows.iter().map(|r| fmt4(r.baseline_mean)).collect::<Vec<_>>().join(" | ")
    ));
    out.push_str(&format!(
        "| {} | {} |\n",
        a.treatment_label,
        a.rows.iter().map(|r| fmt4(r.treatment_mean)).collect::<Vec<_>>().join(" | ")
    ));
    out.push_str(&format!(
        "| Difference | {} |\n",
        a.rows
            .iter()
            .map(|r| format!("{:+.4}", r.difference))
            .collect::<Vec<_>>()
            .join(" | ")
    ));
    out.push_str(&format!(
        "| Improvement (%) | {} |\n",
        a.rows
            .iter()
            .map(|r| {
                let base = match r.improvement_pct {
                    Some(pct) => format!("{pct:+.2}%"),
                    None => "undefined".to_string(),
                };
                if r.printed_discrepancy {
                    format!(
                        "{base} (printed {:.2}%, discrepancy)",
                        r.printed_improvement_pct.unwrap_or(f64::NAN)
                    )
                } else {
                    base
                }
            })
            .collect::<Vec<_>>()
            .join(" | ")
    ));
    out.push_str(&format!(
        "| p-value | {} |\n",
        a.rows.iter().map(|r| fmt4(r.p_value)).collect::<Vec<_>>().join(" | ")
    ));
    out.push('\n');
    match &report.track_b {
        Some(b) => {
            out.push_str(&format!(
                "## Track B: judge scores ({} verdicts)\n\n",
                b.verdict_count
            ));
            out.push_str(&format!(
                "| Dimension | {} | {} | p-value |\n|---|---|---|---|\n",
                b.baseline_label, b.treatment_label
            ));
            for row in &b.rows {
                out.push_str(&format!(
                    "| {} | {:.2} | {:.2} | {} |\n",
                    row.dimension,
                    row.baseline_mean,
                    row.treatment_mean,
                    fmt4(row.p_value)
                ));
            }
            out.push('\n');
        }
        None => out.push_str("## Track B\n\nNot run (offline report).\n\n"),
    }
    if let Some(div) = &report.divergence {
        out.push_str("## Divergence\n\n");
        out.push_str(&format!(
            "Classification: **{}**\n\n",
            serde_json::to_value(div.classification)
                .expect("enum")
                .as_str()
                .unwrap_or("?")
        ));
        out.push_str(
            "The classification is this harness's formalization of the track \
             comparison; the underlying study drew the conclusion qualitatively.\n\n",
        );
    }
    out.push_str(&format!(
        "Provenance: corpus `{}`, judge endpoint `{}`\n",
        report.provenance.corpus_id, report.provenance.judge_endpoint
    ));
    out
}

fn render_csv(report: &DivergenceReport) -> String {
    let mut out = String::from(
        "track,row,baseline_mean,treatment_mean,difference,improvement_pct,p_value,significant\n",
    );
    for r in &report.track_a.rows {
        out.push_str(&format!(
            "a,{},{},{},{},{},{},{}\n",
            r.metric_name,
            r.baseline_mean,
            r.treatment_mean,
            r.difference,
            r.improvement_pct.map(|p| p.to_string()).unwrap_or_default(),
            r.p_value,
            r.significant
        ));
    }
    if let Some(b) = &report.track_b {
        for r in &b.rows {
            out.push_str(&format!(
                "b,{},{},{},{},,{},{}\n",
                r.dimension,
                r.baseline_mean,
                r.treatment_mean,
                r.treatment_mean - r.baseline_mean,
                r.p_value,
                r.significant
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{DimensionRow, ImprovementRow, UTestMethod};

    fn row(name: &str, baseline: f64, treatment: f64, p: f64) -> ImprovementRow {
        ImprovementRow {
            metric_name: name.into(),
            baseline_mean: baseline,
            treatment_mean: treatment,
            difference: treatment - baseline,
            improvement_pct: (baseline != 0.0).then(|| 100.0 * (treatment - baseline) / baseline),
            p_value: p,
            significant: p < 0.05,
            method: UTestMethod::NormalApproxTieCorrected,
            printed_improvement_pct: None,
            printed_discrepancy: false,
        }
    }

    fn track_a(rows: Vec<ImprovementRow>) -> TrackASummary {
        TrackASummary {
            baseline_label: "baseline".into(),
            treatment_label: "finetuned".into(),
            pair_count: 84,
            rows,
        }
    }

    fn track_b(rows: Vec<DimensionRow>) -> TrackBSummary {
        TrackBSummary {
            baseline_label: "baseline".into(),
            treatment_label: "finetuned".into(),
            verdict_count: 20,
            rows,
        }
    }

    fn dim(name: &str, baseline: f64, treatment: f64, p: f64) -> DimensionRow {
        DimensionRow {
            dimension: name.into(),
            baseline_mean: baseline,
            treatment_mean: treatment,
            p_value: p,
            significant: p < 0.05,
        }
    }

    #[test]
    fn published_aggregates_classify_divergent() {
        let a = track_a(vec![
            row("bleu", 0.0033, 0.0216, 0.0040),
            row("rouge1f", 0.1819, 0.2211, 0.0070),
            row("rouge2f", 0.0298, 0.0549, 0.0162),
            row("rougelf", 0.1696, 0.2061, 0.0100),
            row("meteor", 0.1004, 0.1227, 0.0450),
        ]);
        let b = track_b(vec![
            dim("Accuracy", 2.80, 2.65, 0.6868),
            dim("Comprehensiveness", 3.55, 3.30, 0.4026),
            dim("Helpfulness", 3.25, 3.15, 0.7605),
            dim("Relevance", 2.75, 2.60, 0.6889),
        ]);
        let report = build_divergence(&a, Some(&b), ProvenanceMeta::default());
        assert_eq!(
            report.divergence.unwrap().classification,
            DivergenceClass::DivergentSignificantVsNonsignificant
        );
    }

    #[test]
    fn agreement_is_concordant() {
        let a = track_a(vec![row("bleu", 0.1, 0.2, 0.01)]);
        let b = track_b(vec![dim("Accuracy", 2.0, 3.0, 0.01)]);
        let report = build_divergence(&a, Some(&b), ProvenanceMeta::default());
        assert_eq!(
            report.divergence.unwrap().classification,
            DivergenceClass::Concordant
        );
    }

    #[test]
    fn mixed_winners_inconclusive() {
        let a = track_a(vec![row("bleu", 0.1, 0.2, 0.01), row("rouge1f", 0.3, 0.1, 0.01)]);
        let b = track_b(vec![dim("Accuracy", 2.0, 3.0, 0.5)]);
        let report = build_divergence(&a, Some(&b), ProvenanceMeta::default());
        assert_eq!(
            report.divergence.unwrap().classification,
            DivergenceClass::Inconclusive
        );
    }

    #[test]
    fn conflicting_and_both_significant() {
        let a = track_a(vec![row("bleu", 0.1, 0.2, 0.01)]);
        let b = track_b(vec![dim("Accuracy", 3.0, 2.0, 0.01)]);
        let report = build_divergence(&a, Some(&b), ProvenanceMeta::default());
        assert_eq!(
            report.divergence.unwrap().classification,
            DivergenceClass::DivergentBothSignificant
        );
    }

    #[test]
    fn classification_total_over_all_combinations() {
        // one A row x one B row, every winner/flag combination on each side
        let winners = [Winner::Baseline, Winner::Treatment, Winner::Tie];
        for aw in winners {
            for a_sig in [false, true] {
                for bw in winners {
                    for b_sig in [false, true] {
                        let pm: BTreeMap<String, RowVerdict> = [(
                            "bleu".to_string(),
                            RowVerdict {
                                winner: aw,
                                significant: a_sig,
                            },
                        )]
                        .into();
                        let pd: BTreeMap<String, RowVerdict> = [(
                            "Accuracy".to_string(),
                            RowVerdict {
                                winner: bw,
                                significant: b_sig,
                            },
                        )]
                        .into();
                        let class = classify(&pm, &pd);
                        // spot-check the definition on each combination
                        let expected = if aw == Winner::Tie || bw == Winner::Tie {
                            DivergenceClass::Inconclusive
                        } else if aw == bw {
                            DivergenceClass::Concordant
                        } else if a_sig && !b_sig {
                            DivergenceClass::DivergentSignificantVsNonsignificant
                        } else if a_sig && b_sig {
                            DivergenceClass::DivergentBothSignificant
                        } else {
                            DivergenceClass::Inconclusive
                        };
                        assert_eq!(class, expected, "aw={aw:?} a_sig={a_sig} bw={bw:?} b_sig={b_sig}");
                    }
                }
            }
        }
    }

    #[test]
    fn json_roundtrip_stable() {
        let a = track_a(vec![row("bleu", 0.1, 0.2, 0.01)]);
        let b = track_b(vec![dim("Accuracy", 2.0, 3.0, 0.5)]);
        let report = build_divergence(&a, Some(&b), ProvenanceMeta::default());
        let json = render(&report, RenderFormat::Json);
        let back = parse_json(&json).unwrap();
        assert_eq!(report, back);
        assert_eq!(render(&back, RenderFormat::Json), json);
    }

    #[test]
    fn markdown_contains_table2_style_row() {
        let a = track_a(vec![row("bleu", 0.0033, 0.0216, 0.0040)]);
        let b = track_b(vec![dim("Accuracy", 2.80, 2.65, 0.6868)]);
        let report = build_divergence(&a, Some(&b), ProvenanceMeta::default());
        let md = render(&report, RenderFormat::Markdown);
        assert!(md.contains("| Accuracy | 2.80 | 2.65 | 0.6868 |"), "{md}");
    }

    #[test]
    fn track_a_only_report() {
        let a = track_a(vec![row("bleu", 0.1, 0.2, 0.01)]);
        let report = build_divergence(&a, None, ProvenanceMeta::default());
        assert!(report.divergence.is_none());
        let md = render(&report, RenderFormat::Markdown);
        assert!(md.contains("Not run"));
    }
}
