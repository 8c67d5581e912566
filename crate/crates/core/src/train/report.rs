use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, Metrics};
use crate::error::{Error, Result};
use crate::label_head::{NUM_TASKS, TASKS};

pub const RESULT_COLUMNS: [&str; 12] = [
    "config", "seed", "DIAG", "PN", "BWV", "VS", "PIG", "STR", "DaG", "RS", "AVG", "meanF1",
];

/// Result columns followed by the per-epoch fields.
pub const HISTORY_COLUMNS: [&str; 15] = [
    "config",
    "seed",
    "DIAG",
    "PN",
    "BWV",
    "VS",
    "PIG",
    "STR",
    "DaG",
    "RS",
    "AVG",
    "meanF1",
    "epoch",
    "lr",
    "train_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config: String,
    pub seed: u64,
    pub accuracy: [f64; NUM_TASKS],
    pub avg: f64,
    pub mean_f1: f64,
}

impl ResultRow {
    pub fn new(config: &str, seed: u64, m: &Metrics) -> Self {
        Self {
            config: config.to_string(),
            seed,
            accuracy: m.accuracy,
            avg: m.avg,
            mean_f1: m.mean_f1,
        }
    }

    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.config.clone(), self.seed.to_string()];
        f.extend(self.accuracy.iter().map(|a| a.to_string()));
        f.push(self.avg.to_string());
        f.push(self.mean_f1.to_string());
        f
    }

    /// Scores in column order: tasks, AVG, meanF1.
    pub fn scores(&self) -> [f64; NUM_TASKS + 2] {
        let mut s = [0.0; NUM_TASKS + 2];
        s[..NUM_TASKS].copy_from_slice(&self.accuracy);
        s[NUM_TASKS] = self.avg;
        s[NUM_TASKS + 1] = self.mean_f1;
        s
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(RESULT_COLUMNS).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(
    config: &str,
    seed: u64,
    history: &[EpochRecord],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(HISTORY_COLUMNS).map_err(csv_err(path))?;
    for h in history {
        let mut f = ResultRow::new(config, seed, &h.val).fields();
        f.extend([
            h.epoch.to_string(),
            h.lr.to_string(),
            h.train_loss.to_string(),
        ]);
        w.write_record(f).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub row: ResultRow,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            row,
            column: HISTORY_COLUMNS[i].into(),
            msg: format!("bad value {:?}", rec.get(i).unwrap_or("")),
        })
}

/// Reads a history CSV written by [`write_history_csv`].
pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let head = r.headers().map_err(csv_err(path))?.clone();
    if head.iter().ne(HISTORY_COLUMNS) {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            msg: format!("unexpected header {head:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let row = i + 1;
        let mut accuracy = [0.0; NUM_TASKS];
        for (t, a) in accuracy.iter_mut().enumerate() {
            *a = num(&rec, 2 + t, row)?;
        }
        out.push(HistoryRow {
            row: ResultRow {
                config: rec[0].to_string(),
                seed: num(&rec, 1, row)?,
                accuracy,
                avg: num(&rec, 10, row)?,
                mean_f1: num(&rec, 11, row)?,
            },
            epoch: num(&rec, 12, row)?,
            lr: num(&rec, 13, row)?,
            train_loss: num(&rec, 14, row)?,
        });
    }
    Ok(out)
}

/// Reads a results CSV written by [`write_results_csv`].
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let head = r.headers().map_err(csv_err(path))?.clone();
    if head.iter().ne(RESULT_COLUMNS) {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            msg: format!("unexpected header {head:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let row = i + 1;
        let mut accuracy = [0.0; NUM_TASKS];
        for (t, a) in accuracy.iter_mut().enumerate() {
            *a = num(&rec, 2 + t, row)?;
        }
        out.push(ResultRow {
            config: rec[0].to_string(),
            seed: num(&rec, 1, row)?,
            accuracy,
            avg: num(&rec, 10, row)?,
            mean_f1: num(&rec, 11, row)?,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation per config, in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub config: String,
    pub runs: usize,
    pub mean: [f64; NUM_TASKS + 2],
    pub std: [f64; NUM_TASKS + 2],
}

pub fn summarize(rows: &[ResultRow]) -> Vec<Summary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.config.as_str()) {
            order.push(&r.config);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let group: Vec<[f64; NUM_TASKS + 2]> = rows
                .iter()
                .filter(|r| r.config == name)
                .map(ResultRow::scores)
                .collect();
            let n = group.len() as f64;
            let mut mean = [0.0; NUM_TASKS + 2];
            let mut std = [0.0; NUM_TASKS + 2];
            for c in 0..NUM_TASKS + 2 {
                mean[c] = group.iter().map(|g| g[c]).sum::<f64>() / n;
                if group.len() > 1 {
                    std[c] = (group.iter().map(|g| (g[c] - mean[c]).powi(2)).sum::<f64>()
                        / (n - 1.0))
                        .sqrt();
                }
            }
            Summary {
                config: name.to_string(),
                runs: group.len(),
                mean,
                std,
            }
        })
        .collect()
}

fn header_line(first: &str, width: usize) -> String {
    let mut s = format!("{first:<width$}");
    for t in TASKS.iter() {
        let _ = write!(s, " {:>7}", t.name);
    }
    s + "     AVG"
}

/// Fixed-width table: one row per method, task accuracies then AVG.
pub fn render_metrics_table(rows: &[(&str, &Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = header_line("Method", width);
    for (name, m) in rows {
        let _ = write!(s, "\n{name:<width$}");
        for a in m.accuracy.iter().chain([&m.avg]) {
            let _ = write!(s, " {a:>7.2}");
        }
    }
    s.push('\n');
    s
}

/// Like [`render_metrics_table`] but with `mean±std` cells.
pub fn render_summary_table(rows: &[Summary]) -> String {
    let width = rows
        .iter()
        .map(|r| r.config.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut s = format!("{:<width$}", "Method");
    for t in TASKS.iter() {
        let _ = write!(s, " {:>12}", t.name);
    }
    s.push_str("          AVG");
    for r in rows {
        let _ = write!(s, "\n{:<width$}", r.config);
        for c in 0..=NUM_TASKS {
            let _ = write!(s, " {:>12}", format!("{:.2}±{:.2}", r.mean[c], r.std[c]));
        }
    }
    s.push('\n');
    s
}
