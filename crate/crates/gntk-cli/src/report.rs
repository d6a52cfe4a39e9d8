//! Results CSV rows and their aggregation into per-task tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, CliResult};

pub const REPORT_FILE: &str = "report.csv";

/// One fitted model on one dataset. `metric` and `timestamp` may be absent in
/// five-column files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    pub lambda: f64,
    pub val_score: f64,
    pub test_score: Option<f64>,
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

impl ResultRow {
    pub fn task(&self) -> &'static str {
        match self.metric.as_deref() {
            Some("accuracy") => "classification",
            Some("r2") => "regression",
            _ => "unspecified",
        }
    }
}

/// Appends `row` to the CSV at `path`, writing the header for a new file.
pub fn append_row(path: &Path, row: &ResultRow) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| config_err(format!("cannot open {}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

pub fn read_rows(path: &Path) -> CliResult<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Results CSVs in `dir`, sorted by name, excluding a previous report.
pub fn result_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| config_err(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter(|p| p.file_name().is_some_and(|n| n != REPORT_FILE))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Rows grouped by task, each group sorted by (dataset, model).
    pub groups: BTreeMap<&'static str, Vec<ResultRow>>,
    pub warnings: Vec<String>,
}

/// Keeps the latest row per (model, dataset); equal timestamps resolve to the
/// row read last.
pub fn aggregate(rows: Vec<ResultRow>) -> Report {
    let mut latest: BTreeMap<(String, String), ResultRow> = BTreeMap::new();
    let mut warnings = Vec::new();
    for row in rows {
        let key = (row.model.clone(), row.dataset.clone());
        if let Some(prev) = latest.get(&key) {
            warnings.push(format!(
                "duplicate result for {} on {}; keeping the latest",
                row.model, row.dataset
            ));
            if prev.timestamp.unwrap_or(0) > row.timestamp.unwrap_or(0) {
                continue;
            }
        }
        latest.insert(key, row);
    }
    let mut groups: BTreeMap<&'static str, Vec<ResultRow>> = BTreeMap::new();
    for row in latest.into_values() {
        groups.entry(row.task()).or_default().push(row);
    }
    for rows in groups.values_mut() {
        rows.sort_by(|a, b| (&a.dataset, &a.model).cmp(&(&b.dataset, &b.model)));
    }
    Report { groups, warnings }
}

impl Report {
    /// One models × datasets table of test scores per task.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (task, rows) in &self.groups {
            let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
            let models: BTreeSet<&str> = rows.iter().map(|r| r.model.as_str()).collect();
            let metric = rows.iter().find_map(|r| r.metric.as_deref()).unwrap_or("score");
            let _ = writeln!(s, "{task} (test {metric})");
            let mw = models.iter().map(|m| m.len()).max().unwrap_or(0).max(5);
            let _ = write!(s, "{:<mw$}", "model");
            for d in &datasets {
                let _ = write!(s, "  {:>w$}", d, w = d.len().max(6));
            }
            s.push('\n');
            for m in &models {
                let _ = write!(s, "{m:<mw$}");
                for d in &datasets {
                    let cell = rows
                        .iter()
                        .find(|r| r.model == *m && r.dataset == *d)
                        .and_then(|r| r.test_score)
                        .map_or("-".to_string(), |v| format!("{v:.2}"));
                    let _ = write!(s, "  {:>w$}", cell, w = d.len().max(6));
                }
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            task: &'a str,
            model: &'a str,
            dataset: &'a str,
            lambda: f64,
            val_score: f64,
            test_score: Option<f64>,
            metric: Option<&'a str>,
            timestamp: Option<u64>,
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        for (task, rows) in &self.groups {
            for row in rows {
                let line = Line {
                    task,
                    model: &row.model,
                    dataset: &row.dataset,
                    lambda: row.lambda,
                    val_score: row.val_score,
                    test_score: row.test_score,
                    metric: row.metric.as_deref(),
                    timestamp: row.timestamp,
                };
                w.serialize(line)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            }
        }
        w.flush().map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, dataset: &str, test: f64, metric: Option<&str>, ts: Option<u64>) -> ResultRow {
        ResultRow {
            model: model.into(),
            dataset: dataset.into(),
            lambda: 0.1,
            val_score: 0.5,
            test_score: Some(test),
            metric: metric.map(Into::into),
            timestamp: ts,
        }
    }

    #[test]
    fn one_row_in_one_row_out() {
        let r = aggregate(vec![row("GNTK", "cora", 0.83, Some("accuracy"), Some(1))]);
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups["classification"].len(), 1);
        assert!(r.warnings.is_empty());
        assert!(r.to_text().contains("0.83"));
    }

    #[test]
    fn duplicates_keep_the_latest_and_warn() {
        let r = aggregate(vec![
            row("GNTK", "cora", 0.80, Some("accuracy"), Some(5)),
            row("GNTK", "cora", 0.70, Some("accuracy"), Some(3)),
            row("GNTK", "cora", 0.90, Some("accuracy"), Some(5)),
        ]);
        assert_eq!(r.warnings.len(), 2);
        assert_eq!(r.groups["classification"][0].test_score, Some(0.90));
    }

    #[test]
    fn mixed_tasks_split_into_tables() {
        let r = aggregate(vec![
            row("GNTK", "cora", 0.83, Some("accuracy"), Some(1)),
            row("GNTK", "chameleon", 0.68, Some("r2"), Some(1)),
            row("NTK", "citeseer", 0.6, None, None),
        ]);
        assert_eq!(r.groups.keys().copied().collect::<Vec<_>>(), ["classification", "regression", "unspecified"]);
        let text = r.to_text();
        assert!(text.contains("classification (test accuracy)"));
        assert!(text.contains("regression (test r2)"));
    }

    #[test]
    fn sorted_by_dataset_then_model() {
        let r = aggregate(vec![
            row("b", "y", 0.1, Some("accuracy"), None),
            row("a", "y", 0.2, Some("accuracy"), None),
            row("c", "x", 0.3, Some("accuracy"), None),
        ]);
        let order: Vec<_> = r.groups["classification"].iter().map(|r| (r.dataset.as_str(), r.model.as_str())).collect();
        assert_eq!(order, [("x", "c"), ("y", "a"), ("y", "b")]);
    }

    #[test]
    fn csv_round_trip_with_five_and_seven_columns() {
        let dir = tempfile::tempdir().unwrap();
        let seven = dir.path().join("a.csv");
        append_row(&seven, &row("GNTK", "cora", 0.83, Some("accuracy"), Some(7))).unwrap();
        append_row(&seven, &row("GNNGP", "cora", 0.82, Some("accuracy"), Some(8))).unwrap();
        let text = fs::read_to_string(&seven).unwrap();
        assert_eq!(text.lines().next().unwrap(), "model,dataset,lambda,val_score,test_score,metric,timestamp");
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_rows(&seven).unwrap().len(), 2);

        let five = dir.path().join("b.csv");
        fs::write(&five, "model,dataset,lambda,val_score,test_score\nNTK,cora,0.01,0.7,0.75\n").unwrap();
        let rows = read_rows(&five).unwrap();
        assert_eq!(rows[0].metric, None);
        assert_eq!(rows[0].test_score, Some(0.75));

        fs::write(dir.path().join(REPORT_FILE), "ignored").unwrap();
        assert_eq!(result_files(dir.path()).unwrap(), vec![seven, five]);
    }
}
