use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::commands::{compare_markdown, CompareRow, OffsetRow, SweepRow};
use super::HarnessError;

/// Which command produced a CSV, recognized from its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvKind {
    TemperatureSweep,
    OffsetSweep,
    Compare,
}

impl CsvKind {
    pub fn required_columns(self) -> &'static [&'static str] {
        match self {
            CsvKind::TemperatureSweep => &["tau", "n_models", "accuracy", "mean_nll", "policy", "source"],
            CsvKind::OffsetSweep => &["offset", "tau", "n_models", "accuracy", "mean_nll", "source"],
            CsvKind::Compare => &["model", "variant", "n_models", "tau", "accuracy", "mean_nll", "train_runs"],
        }
    }

    fn detect(headers: &csv::StringRecord) -> Self {
        let has = |name: &str| headers.iter().any(|h| h == name);
        if has("offset") {
            CsvKind::OffsetSweep
        } else if has("model") || has("variant") || has("train_runs") {
            CsvKind::Compare
        } else {
            CsvKind::TemperatureSweep
        }
    }
}

fn read_rows<T: DeserializeOwned>(path: &Path, reader: &mut csv::Reader<std::fs::File>) -> Result<Vec<T>, HarnessError> {
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn best_indices(accuracies: impl Iterator<Item = f64>) -> Vec<usize> {
    let acc: Vec<f64> = accuracies.collect();
    let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..acc.len()).filter(|&i| acc[i] == best).collect()
}

struct Best {
    file: String,
    label: String,
    setting: String,
    accuracy: f64,
}

/// Markdown summary of sweep and comparison CSVs.
///
/// Every best cell is listed when several tie on accuracy.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String, HarnessError> {
    let mut out = String::from("# Snapshot ensemble report\n");
    let mut bests = Vec::new();
    for path in paths {
        let file = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?
            .clone();
        let kind = CsvKind::detect(&headers);
        if let Some(missing) = kind
            .required_columns()
            .iter()
            .find(|c| !headers.iter().any(|h| h == **c))
        {
            return Err(HarnessError::Io(format!(
                "{}: missing required column `{missing}`",
                path.display()
            )));
        }
        match kind {
            CsvKind::TemperatureSweep => {
                let rows: Vec<SweepRow> = read_rows(path, &mut reader)?;
                if rows.is_empty() {
                    out.push_str(&format!("\n## {file}\n\nNo rows.\n"));
                    continue;
                }
                let label = format!("policy {}, source {}", rows[0].policy, rows[0].source);
                out.push_str(&format!("\n## {file}: temperature sweep ({label})\n\n"));
                out.push_str("| τ | Number of models | Accuracy, % | Mean NLL |\n|---|---|---|---|\n");
                for i in best_indices(rows.iter().map(|r| r.accuracy)) {
                    let r = &rows[i];
                    out.push_str(&format!(
                        "| {} | {} | {:.2} | {:.4} |\n",
                        r.tau,
                        r.n_models,
                        100.0 * r.accuracy,
                        r.mean_nll
                    ));
                    bests.push(Best {
                        file: file.clone(),
                        label: label.clone(),
                        setting: format!("τ={}, n={}", r.tau, r.n_models),
                        accuracy: r.accuracy,
                    });
                }
            }
            CsvKind::OffsetSweep => {
                let rows: Vec<OffsetRow> = read_rows(path, &mut reader)?;
                out.push_str(&format!("\n## {file}: offset sweep\n\n"));
                out.push_str("| Offset | τ | Number of models | Accuracy, % | Mean NLL |\n|---|---|---|---|---|\n");
                for r in &rows {
                    out.push_str(&format!(
                        "| {} | {} | {} | {:.2} | {:.4} |\n",
                        r.offset,
                        r.tau,
                        r.n_models,
                        100.0 * r.accuracy,
                        r.mean_nll
                    ));
                }
                for i in best_indices(rows.iter().map(|r| r.accuracy)) {
                    let r = &rows[i];
                    bests.push(Best {
                        file: file.clone(),
                        label: format!("offset sweep, source {}", r.source),
                        setting: format!("offset={}, τ={}", r.offset, r.tau),
                        accuracy: r.accuracy,
                    });
                }
            }
            CsvKind::Compare => {
                let rows: Vec<CompareRow> = read_rows(path, &mut reader)?;
                out.push_str(&format!("\n## {file}: comparison\n\n"));
                out.push_str(&compare_markdown(&rows));
                for i in best_indices(rows.iter().map(|r| r.accuracy)) {
                    let r = &rows[i];
                    bests.push(Best {
                        file: file.clone(),
                        label: format!("{} ({})", r.model, r.variant),
                        setting: r.tau.map_or_else(|| format!("n={}", r.n_models), |t| format!("τ={t}, n={}", r.n_models)),
                        accuracy: r.accuracy,
                    });
                }
            }
        }
    }
    out.push_str("\n## Best cells\n\n| File | Ensemble | Setting | Accuracy, % |\n|---|---|---|---|\n");
    for b in &bests {
        out.push_str(&format!(
            "| {} | {} | {} | {:.2} |\n",
            b.file,
            b.label,
            b.setting,
            100.0 * b.accuracy
        ));
    }
    Ok(out)
}
