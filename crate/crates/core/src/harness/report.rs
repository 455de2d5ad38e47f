use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::run::RunResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Unknown {
                kind: "report format",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    schema_version: u32,
    results: Vec<RunResult>,
}

/// Accuracy cell: fractions rendered as `"55.38 ± 0.39%"`.
pub fn format_cell(mean: f64, ci: Option<f64>) -> String {
    match ci {
        Some(ci) => format!("{:.2} ± {:.2}%", 100.0 * mean, 100.0 * ci),
        None => format!("{:.2}%", 100.0 * mean),
    }
}

/// Wall-clock cell `mean ± std` in hours when the mean exceeds one hour,
/// minutes otherwise.
pub fn format_wall(mean_s: f64, std_s: f64) -> String {
    if mean_s >= 3600.0 {
        format!("{:.2} ± {:.2} h", mean_s / 3600.0, std_s / 3600.0)
    } else {
        format!("{:.2} ± {:.2} min", mean_s / 60.0, std_s / 60.0)
    }
}

pub fn emit_report(results: &[RunResult], format: ReportFormat) -> Result<String> {
    if results.is_empty() {
        return Err(Error::Config("nothing to report: empty result list".into()));
    }
    match format {
        ReportFormat::Json => {
            let record = Record {
                schema_version: SCHEMA_VERSION,
                results: results.to_vec(),
            };
            Ok(serde_json::to_string_pretty(&record)? + "\n")
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Config(format!("csv rendering failed: {e}"));
            w.write_record([
                "name",
                "variant",
                "model",
                "family",
                "way",
                "shot",
                "query",
                "seeds",
                "accuracies",
                "mean",
                "ci95",
                "wall_mean_seconds",
                "wall_std_seconds",
            ])
            .map_err(csv_err)?;
            for r in results {
                let seeds: Vec<String> = r.seeds.iter().map(|s| s.seed.to_string()).collect();
                let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
                w.write_record([
                    r.name.clone(),
                    r.variant.clone(),
                    r.model.clone(),
                    r.family.clone(),
                    r.way.to_string(),
                    r.shot.to_string(),
                    r.query.to_string(),
                    seeds.join(";"),
                    accs.join(";"),
                    r.mean.to_string(),
                    r.ci95.map(|c| c.to_string()).unwrap_or_default(),
                    r.wall_mean_seconds.to_string(),
                    r.wall_std_seconds.to_string(),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::Config(format!("csv rendering failed: {e}")))?;
            String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
        }
        ReportFormat::Table => {
            let header = ["name", "variant", "model", "task", "accuracy", "wall-clock"];
            let rows: Vec<[String; 6]> = results
                .iter()
                .map(|r| {
                    [
                        r.name.clone(),
                        r.variant.clone(),
                        r.model.clone(),
                        format!("{}-way {}-shot", r.way, r.shot),
                        format_cell(r.mean, r.ci95),
                        format_wall(r.wall_mean_seconds, r.wall_std_seconds),
                    ]
                })
                .collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|c| {
                    rows.iter()
                        .map(|r| r[c].chars().count())
                        .chain([header[c].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String]| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                    .collect();
                format!("| {} |\n", padded.join(" | "))
            };
            let mut out = line(&header.map(String::from));
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&line(&rule));
            for r in &rows {
                out.push_str(&line(r));
            }
            Ok(out)
        }
    }
}

/// Parse a json record written by [`emit_report`].
pub fn load_results(text: &str) -> Result<Vec<RunResult>> {
    let record: Record = serde_json::from_str(text)?;
    if record.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "result schema version {} is not supported (expected {SCHEMA_VERSION})",
            record.schema_version
        )));
    }
    Ok(record.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(mean: f64, ci: Option<f64>) -> RunResult {
        RunResult {
            name: "demo".into(),
            variant: "sca_pred".into(),
            model: "lowend".into(),
            family: "gaussian_blobs".into(),
            way: 5,
            shot: 1,
            query: 15,
            accuracies: vec![mean],
            mean,
            ci95: ci,
            wall_seconds: 90.0,
            wall_mean_seconds: 30.0,
            wall_std_seconds: 1.5,
            seeds: Vec::new(),
        }
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.5538, Some(0.0039)), "55.38 ± 0.39%");
        assert_eq!(format_wall(7200.0, 360.0), "2.00 ± 0.10 h");
    }

    #[test]
    fn table_contains_cell() {
        let t = emit_report(&[result(0.5538, Some(0.0039))], ReportFormat::Table).unwrap();
        assert!(t.contains("55.38 ± 0.39%"), "{t}");
        assert!(t.contains("5-way 1-shot"));
    }

    #[test]
    fn empty_and_unknown_rejected() {
        assert!(emit_report(&[], ReportFormat::Csv).is_err());
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = result(1.0 / 3.0, Some(0.1 + 0.2));
        let back = load_results(&emit_report(&[r.clone()], ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(back, vec![r]);
    }
}
