use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{Averages, ConfusionMatrix, MetricsReport};
use crate::data::{GradeLabel, NUM_GRADES};
use crate::error::{Error, Result};
use crate::labels::Regime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "txt" | "text" => Ok(ReportFormat::Text),
            other => Err(Error::InvalidArgument(format!(
                "unknown format `{other}` (expected json, md or txt)"
            ))),
        }
    }
}

/// One row of a cross-study comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub classifier: String,
    pub classes: usize,
    /// Grade accuracy, trace/total.
    pub accuracy: f64,
    /// Macro-averaged recall.
    pub recall: f64,
}

pub fn comparison_row(report: &MetricsReport) -> ComparisonRow {
    let regime = match report.regime {
        Regime::Single => "single-label",
        Regime::Multi => "multi-label",
    };
    ComparisonRow {
        classifier: format!("DenseNet121 ({regime})"),
        classes: NUM_GRADES,
        accuracy: report.accuracy,
        recall: report.macro_avg.recall,
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Single => "single-label (one-hot, softmax)",
        Regime::Multi => "multi-label (cumulative ordinal, sigmoid)",
    }
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::Other(e.to_string())),
        ReportFormat::Markdown => Ok(markdown(report)),
        ReportFormat::Text => Ok(text(report)),
    }
}

fn markdown(r: &MetricsReport) -> String {
    let mut s = String::new();
    let total = r.confusion.total();
    let _ = writeln!(s, "# Evaluation report\n");
    let _ = writeln!(s, "- Regime: {}", regime_name(r.regime));
    let _ = writeln!(s, "- Samples: {total}");
    let _ = writeln!(s, "- Accuracy: {}", pct(r.accuracy));
    if let Some(q) = r.qwk {
        let _ = writeln!(s, "- Quadratic weighted kappa: {q:.4}");
    }
    if let Some(m) = r.multilabel_accuracy {
        let _ = writeln!(s, "- Multi-label (per-unit) accuracy: {}", pct(m));
    }
    let _ = writeln!(s, "\n## Per-class metrics\n");
    let _ = writeln!(s, "| Grade | Precision | Recall | F1-score | Support |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|");
    for c in &r.per_class {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {} |",
            c.grade.name(),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
    for (label, a) in [("Macro average", &r.macro_avg), ("Weighted average", &r.weighted)] {
        let _ = writeln!(
            s,
            "| {label} | {:.2} | {:.2} | {:.2} | {total} |",
            a.precision, a.recall, a.f1
        );
    }
    let _ = writeln!(
        s,
        "\n## Confusion matrix (rows: true grade, columns: predicted grade)\n"
    );
    let names: Vec<&str> = GradeLabel::ALL.iter().map(|g| g.name()).collect();
    let _ = writeln!(s, "| | {} |", names.join(" | "));
    let _ = writeln!(s, "|---|{}", "---:|".repeat(NUM_GRADES));
    for g in GradeLabel::ALL {
        let row: Vec<String> = r.confusion.counts()[g.index()].iter().map(u64::to_string).collect();
        let _ = writeln!(s, "| {} | {} |", g.name(), row.join(" | "));
    }
    let row = comparison_row(r);
    let _ = writeln!(s, "\n## Comparison\n");
    let _ = writeln!(s, "| Classifier | Classes | Accuracy | Recall |");
    let _ = writeln!(s, "|---|---:|---:|---:|");
    let _ = writeln!(
        s,
        "| {} | {} | {} | {} |",
        row.classifier,
        row.classes,
        pct(row.accuracy),
        pct(row.recall)
    );
    if !r.warnings.is_empty() {
        let _ = writeln!(s, "\n## Warnings\n");
        for w in &r.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}

fn text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let total = r.confusion.total();
    let _ = writeln!(s, "regime: {}", regime_name(r.regime));
    let _ = writeln!(s, "samples: {total}");
    let _ = writeln!(s, "accuracy: {}", pct(r.accuracy));
    if let Some(q) = r.qwk {
        let _ = writeln!(s, "quadratic weighted kappa: {q:.4}");
    }
    if let Some(m) = r.multilabel_accuracy {
        let _ = writeln!(s, "multi-label accuracy: {}", pct(m));
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<18}{:>10}{:>10}{:>10}{:>10}",
        "", "precision", "recall", "f1-score", "support"
    );
    for c in &r.per_class {
        let _ = writeln!(
            s,
            "{:<18}{:>10.2}{:>10.2}{:>10.2}{:>10}",
            c.grade.name(),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
    let avg = |s: &mut String, label: &str, a: &Averages| {
        let _ = writeln!(
            s,
            "{label:<18}{:>10.2}{:>10.2}{:>10.2}{total:>10}",
            a.precision, a.recall, a.f1
        );
    };
    avg(&mut s, "macro avg", &r.macro_avg);
    avg(&mut s, "weighted avg", &r.weighted);
    let _ = writeln!(s, "\nconfusion matrix (rows true, columns predicted):");
    for g in GradeLabel::ALL {
        let row: String = r.confusion.counts()[g.index()]
            .iter()
            .map(|c| format!("{c:>6}"))
            .collect();
        let _ = writeln!(s, "{:<18}{row}", g.name());
    }
    let row = comparison_row(r);
    let _ = writeln!(
        s,
        "\n{:<32}{:>8}{:>10}{:>10}\n{:<32}{:>8}{:>10}{:>10}",
        "classifier",
        "classes",
        "accuracy",
        "recall",
        row.classifier,
        row.classes,
        pct(row.accuracy),
        pct(row.recall)
    );
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// 5×5 counts with grade names as row and column headers.
pub fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Other(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Other(format!("{}: {e}", path.display()));
    let mut header = vec!["true\\predicted"];
    header.extend(GradeLabel::ALL.iter().map(|g| g.name()));
    w.write_record(&header).map_err(csv_err)?;
    for g in GradeLabel::ALL {
        let mut row = vec![g.name().to_string()];
        row.extend(cm.counts()[g.index()].iter().map(u64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the full-precision report. The file appears only once complete.
pub fn write_metrics_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Other(e.to_string()))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("metrics.json");
    let tmp = path.with_file_name(format!(".{file_name}.partial"));
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::build_report;

    fn sample() -> MetricsReport {
        let cm = ConfusionMatrix::from_counts([
            [5, 1, 0, 0, 0],
            [1, 3, 0, 0, 0],
            [0, 0, 4, 0, 0],
            [0, 0, 1, 2, 0],
            [0, 0, 0, 0, 0],
        ]);
        let (t, p) = cm.label_lists();
        build_report(&t, &p, Regime::Single, None).unwrap()
    }

    #[test]
    fn formats_parse() {
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert_eq!("txt".parse::<ReportFormat>().unwrap(), ReportFormat::Text);
        assert!("pdf".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn markdown_has_tables_and_warnings() {
        let md = render_report(&sample(), ReportFormat::Markdown).unwrap();
        assert!(md.contains("| No DR | 0.83 | 0.83 | 0.83 | 6 |"));
        assert!(md.contains("| DenseNet121 (single-label) | 5 | 82.35% |"));
        assert!(md.contains("Proliferative DR is undefined"));
        let txt = render_report(&sample(), ReportFormat::Text).unwrap();
        assert!(txt.contains("82.35%"));
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let m = dir.path().join("metrics.json");
        write_metrics_json(&r, &m).unwrap();
        let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&m).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let c = dir.path().join("confusion.csv");
        write_confusion_csv(&r.confusion, &c).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("true\\predicted,No DR,Mild DR"));
        assert!(text.contains("\nSevere DR,0,0,1,2,0\n"));
    }
}
