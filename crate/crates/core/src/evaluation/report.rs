//! Rendering evaluation reports as text, JSON or a markdown accuracy table.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EvalReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no reports to render")]
    NoReports,
    #[error("report for model {0:?} has no frameworks")]
    NoFrameworks(String),
    #[error("unknown report format {0:?} (expected text, json or markdown)")]
    UnknownFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" | "markdown-table" => Ok(ReportFormat::Markdown),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

/// Human label for a framework name; unknown names pass through.
pub fn display_name(framework: &str) -> &str {
    match framework {
        "single_i" => "Single Model I",
        "single_ii" => "Single Model II",
        "cascade" => "Coarse-to-fine Models",
        other => other,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let model = if r.model.is_empty() { "-" } else { &r.model };
        let c = &r.corpus.classes;
        let _ = writeln!(out, "model: {model}");
        let _ = writeln!(
            out,
            "corpus: {} scenes ({} positive, {} negative; b={} a={} c={} plain={})",
            r.corpus.total, r.corpus.positives, r.corpus.negatives, c.b, c.a, c.c, c.plain_negative
        );
        let _ = writeln!(out, "assumptions: {}", r.assumptions);
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}",
            "framework", "tp", "fp", "tn", "fn", "errors", "accuracy", "precision", "recall"
        );
        for f in &r.frameworks {
            let k = &f.confusion;
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9.4} {:>9} {:>9}",
                display_name(&f.name),
                k.tp,
                k.fp,
                k.tn,
                k.fn_,
                k.errors,
                f.accuracy,
                opt(f.precision),
                opt(f.recall)
            );
        }
    }
    out
}

/// Models × Frameworks × Accuracy, one row per framework, the cascade bolded.
fn markdown(reports: &[EvalReport]) -> String {
    let mut out = String::from("| Models | Frameworks | Accuracy |\n|---|---|---|\n");
    for r in reports {
        for (i, f) in r.frameworks.iter().enumerate() {
            let model = if i == 0 { r.model.as_str() } else { "" };
            let row = if f.name == "cascade" {
                format!("| {model} | **{}** | **{:.3}** |\n", display_name(&f.name), f.accuracy)
            } else {
                format!("| {model} | {} | {:.3} |\n", display_name(&f.name), f.accuracy)
            };
            out.push_str(&row);
        }
    }
    out
}

/// JSON is a single object for one report and an array otherwise.
pub fn render(reports: &[EvalReport], format: ReportFormat) -> Result<String, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    if let Some(r) = reports.iter().find(|r| r.frameworks.is_empty()) {
        return Err(ReportError::NoFrameworks(r.model.clone()));
    }
    Ok(match format {
        ReportFormat::Text => text(reports),
        ReportFormat::Json => {
            let mut s = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(reports)?
            };
            s.push('\n');
            s
        }
        ReportFormat::Markdown => markdown(reports),
    })
}
