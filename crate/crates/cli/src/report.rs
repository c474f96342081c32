//! Markdown summaries of campaign results, campaign CSVs and analysis
//! reports.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use divex_core::analysis::{BoundReport, ComparisonReport, Satisfied};
use divex_core::faults::{CampaignResult, ProgramSource, CAMPAIGN_FORMAT};
use serde::Deserialize;

use crate::analyze::{AnalysisReport, ANALYSIS_FORMAT};
use crate::config::{read_text, usage};
use crate::output;
use crate::ReportArgs;

fn table(out: &mut String, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out.push('\n');
}

fn status(s: Satisfied) -> &'static str {
    match s {
        Satisfied::Holds => "holds",
        Satisfied::Violated => "violated",
        Satisfied::UnresolvableAtSampleSize => "unresolvable-at-sample-size",
    }
}

fn comparison(out: &mut String, c: &ComparisonReport) {
    out.push_str(&format!(
        "### Bound comparison\n\n{} counted trials, {} benign excluded, bound from replica {}.\n\n",
        c.trials, c.excluded_benign, c.bound_replica
    ));
    table(
        out,
        &["k", "undetected ≥ k", "empirical rate", "bound", "1/n", "status"],
        c.rows.iter().map(|r| {
            vec![
                r.k.to_string(),
                r.undetected_at_k.to_string(),
                r.empirical_rate.decimal(4),
                r.bound.decimal(4),
                r.resolution.decimal(4),
                status(r.satisfied).to_string(),
            ]
        }),
    );
    if !c.flags.is_empty() {
        let flags: Vec<String> = c.flags.iter().map(|f| format!("`{}`", serde_json::to_value(f).expect("flag").as_str().unwrap_or(""))).collect();
        out.push_str(&format!("Flags: {}\n\n", flags.join(", ")));
    }
    for n in &c.notes {
        out.push_str(&format!("- {n}\n"));
    }
    if !c.notes.is_empty() {
        out.push('\n');
    }
}

fn campaign(r: &CampaignResult) -> String {
    let a = &r.aggregates;
    let program = match &r.spec.program {
        ProgramSource::Corpus(n) => format!("corpus:{n}"),
        ProgramSource::Path(p) => p.display().to_string(),
        ProgramSource::Source(_) => "inline source".to_string(),
    };
    let mut out = format!("## Campaign `{}`\n\n", r.spec.name);
    table(
        &mut out,
        &["field", "value"],
        [
            ("family", r.family.clone()),
            ("program", program),
            ("replicas", r.replicas.to_string()),
            ("seed", r.spec.seed.to_string()),
            ("reference slices", r.reference_slices.to_string()),
            ("trials", a.trials.to_string()),
            ("counted", a.counted.to_string()),
            ("detected", a.detected.to_string()),
            ("undetected", a.undetected.to_string()),
            ("timeouts", a.timeouts.to_string()),
            ("benign", a.benign.to_string()),
            ("errors", a.errors.to_string()),
            ("detection rate", a.detection_rate.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into())),
        ]
        .into_iter()
        .map(|(k, v)| vec![k.to_string(), v]),
    );
    if !a.by_layer.is_empty() {
        out.push_str("### Detections by layer\n\n");
        table(&mut out, &["layer", "trials"], a.by_layer.iter().map(|(l, n)| vec![l.clone(), n.to_string()]));
    }
    if !a.latency_histogram.is_empty() {
        out.push_str("### Detection latency\n\n");
        table(&mut out, &["slices", "trials"], a.latency_histogram.iter().map(|(l, n)| vec![l.to_string(), n.to_string()]));
    }
    if let Some(c) = &r.comparison {
        comparison(&mut out, c);
    }
    out
}

fn bounds(out: &mut String, bounds: &[BoundReport]) {
    table(
        out,
        &["replica", "|S|", "C_max", "γ", "ε", "log2 per-step"],
        bounds.iter().map(|b| {
            vec![
                b.replica.to_string(),
                b.s_count.to_string(),
                b.c_max.to_string(),
                b.gamma.to_string(),
                format!("2^-{}", b.epsilon_exponent),
                format!("{:.3}", b.p_step.log2()),
            ]
        }),
    );
}

fn analysis(r: &AnalysisReport) -> String {
    let mut out = format!("## Bounds for {}\n\n", r.source);
    bounds(&mut out, &r.bounds);
    if let Some(w) = r.bounds.iter().find(|b| b.replica == r.worst_replica) {
        out.push_str(&format!("### Undetected-execution bound, replica {}\n\n", w.replica));
        table(
            &mut out,
            &["k", "exact", "decimal"],
            w.p_undetected.iter().enumerate().map(|(i, p)| vec![(i + 1).to_string(), p.to_string(), p.decimal(6)]),
        );
    }
    if let Some(c) = &r.comparison {
        comparison(&mut out, c);
    }
    out
}

#[derive(Deserialize)]
struct CsvRow {
    correlation: String,
    verdict: String,
    latency: Option<u64>,
}

fn csv_summary(name: &str, text: &str) -> Result<String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut cells: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut latency: BTreeMap<u64, usize> = BTreeMap::new();
    let mut total = 0;
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| usage(format!("{name}: {e}")))?;
        total += 1;
        *cells.entry((row.correlation, row.verdict)).or_default() += 1;
        if let Some(l) = row.latency {
            *latency.entry(l).or_default() += 1;
        }
    }
    let mut out = format!("## Trials in `{name}`\n\n{total} trials.\n\n");
    table(&mut out, &["correlation", "status", "trials"], cells.into_iter().map(|((c, v), n)| vec![c, v, n.to_string()]));
    if !latency.is_empty() {
        out.push_str("### Detection latency\n\n");
        table(&mut out, &["slices", "trials"], latency.into_iter().map(|(l, n)| vec![l.to_string(), n.to_string()]));
    }
    Ok(out)
}

fn render(path: &Path) -> Result<String> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    if path.extension().is_some_and(|e| e == "csv") {
        return csv_summary(&name, &text);
    }
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{name}: {e}")))?;
    let bad = |e: serde_json::Error| usage(format!("{name}: {e}"));
    match value.get("format").and_then(|f| f.as_str()) {
        Some(CAMPAIGN_FORMAT) => Ok(campaign(&serde_json::from_value(value).map_err(bad)?)),
        Some(ANALYSIS_FORMAT) => Ok(analysis(&serde_json::from_value(value).map_err(bad)?)),
        other => Err(usage(format!("{name}: unrecognised format {other:?}"))),
    }
}

pub fn cmd_report(a: ReportArgs) -> Result<u8> {
    let mut out = String::from("# divex report\n\n");
    for p in &a.inputs {
        out.push_str(&render(p)?);
    }
    output::emit(a.output.as_deref(), &out)?;
    Ok(0)
}
