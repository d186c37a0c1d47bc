//! Table rendering for reports and transfer matrices.
//!
//! Report tables put one training method per row and one adversary per
//! column. Transfer matrices render target rows against source columns; the
//! CSV form is a pure grid so an r-by-c matrix is c header fields plus r
//! records. All percentages round half-up to one decimal.

use crate::artifacts::{ProbeDoc, ReportDoc, TransferDoc};
use crate::config::ConfigError;

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Markdown => "md",
            Format::Csv => "csv",
        }
    }
}

/// Accuracy fraction as a half-up one-decimal percentage, `0.4567` -> `45.7%`.
pub fn percent(p: f64) -> String {
    // f64::round is half-away-from-zero, which is half-up for the
    // non-negative accuracies rendered here.
    format!("{:.1}%", (p * 1000.0).round() / 10.0)
}

/// Attack columns in first-seen order across all reports.
fn attack_columns(docs: &[ReportDoc]) -> Vec<String> {
    let mut columns: Vec<String> = Vec::new();
    for doc in docs {
        for entry in &doc.entries {
            if !columns.iter().any(|c| c == &entry.attack) {
                columns.push(entry.attack.clone());
            }
        }
    }
    columns
}

fn cell_for(doc: &ReportDoc, attack: &str) -> Option<String> {
    doc.entries
        .iter()
        .find(|e| e.attack == attack)
        .map(|e| e.percent.clone())
}

/// Render one row per report; empty report sets and mixed class counts are
/// rejected.
pub fn render_reports(docs: &[ReportDoc], format: Format) -> Result<String> {
    let Some(first) = docs.first() else {
        return Err(ConfigError("no reports to render".into()));
    };
    for doc in docs {
        if doc.classes != first.classes {
            return Err(ConfigError(format!(
                "mixed class counts across reports: '{}' has {} classes, '{}' has {}",
                first.training, first.classes, doc.training, doc.classes
            )));
        }
    }
    let columns = attack_columns(docs);
    let mut out = String::new();
    match format {
        Format::Markdown => {
            out.push_str("| training |");
            for c in &columns {
                out.push_str(&format!(" {c} |"));
            }
            out.push('\n');
            out.push_str("| --- |");
            for _ in &columns {
                out.push_str(" --- |");
            }
            out.push('\n');
            for doc in docs {
                out.push_str(&format!("| {} |", doc.training));
                for c in &columns {
                    let cell = cell_for(doc, c).unwrap_or_default();
                    out.push_str(&format!(" {cell} |"));
                }
                out.push('\n');
            }
        }
        Format::Csv => {
            out.push_str("training");
            for c in &columns {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
            for doc in docs {
                out.push_str(&doc.training);
                for c in &columns {
                    out.push(',');
                    out.push_str(&cell_for(doc, c).unwrap_or_default());
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Render a transfer matrix, target rows by source columns.
pub fn render_transfer(doc: &TransferDoc, format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Markdown => {
            out.push_str(&format!(
                "| target \\ source ({}) |",
                doc.attack
            ));
            for s in &doc.sources {
                out.push_str(&format!(" {s} |"));
            }
            out.push('\n');
            out.push_str("| --- |");
            for _ in &doc.sources {
                out.push_str(" --- |");
            }
            out.push('\n');
            for (t, target) in doc.targets.iter().enumerate() {
                out.push_str(&format!("| {target} |"));
                for s in 0..doc.sources.len() {
                    out.push_str(&format!(" {} |", percent(doc.accuracies[s][t])));
                }
                out.push('\n');
            }
        }
        Format::Csv => {
            // Pure grid: source labels as the header, one record per target.
            out.push_str(&doc.sources.join(","));
            out.push('\n');
            for t in 0..doc.targets.len() {
                let row: Vec<String> = (0..doc.sources.len())
                    .map(|s| percent(doc.accuracies[s][t]))
                    .collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
    }
    out
}

/// Human-readable probe summary; always markdown.
pub fn render_probe(doc: &ProbeDoc) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Probe: {} ({} examples, seed {})\n\n",
        doc.training, doc.examples, doc.seed
    ));
    out.push_str("## Gradient masking\n\n| attack | accuracy |\n| --- | --- |\n");
    for d in &doc.masking.pgd {
        out.push_str(&format!("| pgd-{} | {} |\n", d.steps, d.percent));
    }
    out.push_str(&format!("| spsa | {} |\n\n", doc.masking.spsa_percent));
    out.push_str(&format!(
        "SPSA minus deepest PGD: {:+.4} ({})\n\n",
        doc.masking.spsa_minus_deepest_pgd,
        if doc.masking.flagged {
            "FLAGGED: possible gradient masking"
        } else {
            "no masking signal"
        }
    ));
    out.push_str("## Logit statistics\n\n| split | mean | variance | min | max |\n| --- | --- | --- | --- | --- |\n");
    for (name, s) in [("clean", &doc.clean_logits), ("adversarial", &doc.adversarial_logits)] {
        out.push_str(&format!(
            "| {name} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            s.mean, s.variance, s.min, s.max
        ));
    }
    out.push('\n');
    out.push_str("## Pairing-gradient checks\n\n| gamma | analytic | finite difference | relative error | signs agree |\n| --- | --- | --- | --- | --- |\n");
    for c in &doc.pairing_checks {
        out.push_str(&format!(
            "| {} | {:.6e} | {:.6e} | {:.3e} | {} |\n",
            c.gamma, c.analytic, c.finite_difference, c.relative_error, c.sign_agrees
        ));
    }
    out
}
