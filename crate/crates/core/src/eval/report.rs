//! Report rendering.
//!
//! Binary experiments are collected into one table with a row per
//! experiment (accuracy as a whole percent, the other metrics for the
//! pathology class at two decimals). A multiclass experiment renders as a
//! table with one row per class and an accuracy footer. JSON output mirrors
//! the report structs exactly.

use super::MetricsReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// Render one or more reports.
pub fn render_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(reports).expect("reports are serializable")
        }
        ReportFormat::Markdown => render_markdown(reports),
    }
}

fn pct(v: f64) -> String {
    format!("{:.0}", v * 100.0)
}

fn two(v: f64) -> String {
    format!("{v:.2}")
}

fn render_markdown(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let binary: Vec<&MetricsReport> = reports.iter().filter(|r| r.per_class.len() == 2).collect();
    let multi: Vec<&MetricsReport> = reports.iter().filter(|r| r.per_class.len() != 2).collect();

    if !binary.is_empty() {
        out.push_str("## Binary classification\n\n");
        out.push_str(
            "| Experiment | Accuracy (%) | Precision | Recall | F1-Score | Specificity |\n",
        );
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &binary {
            let pos = r.positive_class().expect("binary report");
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.experiment_name,
                pct(r.accuracy),
                two(pos.precision),
                two(pos.recall),
                two(pos.f1),
                two(pos.specificity),
            ));
        }
        out.push('\n');
    }

    for r in &multi {
        out.push_str(&format!("## {}\n\n", r.experiment_name));
        out.push_str("| Class | Precision | Recall | F1-Score | Specificity |\n");
        out.push_str("|---|---|---|---|---|\n");
        for c in &r.per_class {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                c.class,
                two(c.precision),
                two(c.recall),
                two(c.f1),
                two(c.specificity),
            ));
        }
        out.push_str(&format!("\nAccuracy = {}%\n\n", pct(r.accuracy)));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ClassMetrics;

    fn binary_report() -> MetricsReport {
        MetricsReport {
            experiment_name: "binary_medium".into(),
            accuracy: 0.8504,
            total: 9600,
            per_class: vec![
                ClassMetrics {
                    class: "Control".into(),
                    precision: 0.79,
                    recall: 0.91,
                    f1: 0.85,
                    specificity: 0.80,
                    degenerate: false,
                },
                ClassMetrics {
                    class: "Pathology".into(),
                    precision: 0.913,
                    recall: 0.80,
                    f1: 0.853,
                    specificity: 0.91,
                    degenerate: false,
                },
            ],
        }
    }

    fn multiclass_report() -> MetricsReport {
        let classes = ["Control", "High", "Medium", "Low", "Very Low"];
        MetricsReport {
            experiment_name: "multiclass_words".into(),
            accuracy: 0.67,
            total: 7200,
            per_class: classes
                .iter()
                .enumerate()
                .map(|(i, c)| ClassMetrics {
                    class: c.to_string(),
                    precision: 0.1 * i as f64 + 0.2,
                    recall: 0.05 * i as f64 + 0.3,
                    f1: 0.07 * i as f64 + 0.25,
                    specificity: 0.06 * i as f64 + 0.4,
                    degenerate: false,
                })
                .collect(),
        }
    }

    #[test]
    fn binary_table_has_one_row_and_five_metric_columns() {
        let md = render_report(&[binary_report()], ReportFormat::Markdown);
        let row = md
            .lines()
            .find(|l| l.starts_with("| binary_medium"))
            .expect("data row");
        let cells: Vec<&str> = row.trim_matches('|').split('|').collect();
        assert_eq!(cells.len(), 6); // name + 5 metrics
        assert!(md.contains("| Experiment | Accuracy (%) | Precision | Recall | F1-Score | Specificity |"));
        assert!(row.contains("| 85 |"));
        assert!(row.contains("0.91"));
    }

    #[test]
    fn multiclass_table_has_class_rows_and_accuracy_footer() {
        let md = render_report(&[multiclass_report()], ReportFormat::Markdown);
        assert!(md.contains("| Class | Precision | Recall | F1-Score | Specificity |"));
        for class in ["Control", "High", "Medium", "Low", "Very Low"] {
            assert!(md.contains(&format!("| {class} |")), "{class} row present");
        }
        assert!(md.contains("Accuracy = 67%"));
    }

    #[test]
    fn json_roundtrips_and_markdown_matches_at_printed_precision() {
        let reports = vec![binary_report()];
        let json = render_report(&reports, ReportFormat::Json);
        let parsed: Vec<MetricsReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, reports);

        // values re-parsed from markdown equal the originals at printed precision
        let md = render_report(&reports, ReportFormat::Markdown);
        let row = md
            .lines()
            .find(|l| l.starts_with("| binary_medium"))
            .unwrap();
        let cells: Vec<&str> = row
            .trim_matches('|')
            .split('|')
            .map(str::trim)
            .collect();
        let acc: f64 = cells[1].parse::<f64>().unwrap() / 100.0;
        assert!((acc - reports[0].accuracy).abs() < 0.005);
        let pos = reports[0].positive_class().unwrap();
        let precision: f64 = cells[2].parse().unwrap();
        assert!((precision - pos.precision).abs() < 0.005);
    }
}
