//! Per-epoch training records and their CSV / JSON-lines persistence.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_HEADER: &str = "epoch,phase,loss,knn_top1,lr,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub knn_top1: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let knn = self.knn_top1.map(|v| format!("{v}")).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.epoch, self.phase, self.loss, knn, self.lr, self.wall_ms)
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn to_jsonl(records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Writes `metrics.csv` and `metrics.jsonl` into `dir`.
pub fn write_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::File::create(dir.join("metrics.csv"))?.write_all(to_csv(records).as_bytes())?;
    std::fs::File::create(dir.join("metrics.jsonl"))?.write_all(to_jsonl(records).as_bytes())?;
    Ok(())
}

/// A parsed CSV table: header names and string cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Table {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let columns = lines
            .next()
            .map(|h| h.split(',').map(|c| c.trim().to_string()).collect())
            .unwrap_or_default();
        let rows = lines.map(|l| l.split(',').map(|c| c.trim().to_string()).collect()).collect();
        Table { columns, rows }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, knn: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            epoch,
            phase: "distill".into(),
            loss: 1.5,
            knn_top1: knn,
            lr: 0.03,
            wall_ms: 0,
        }
    }

    #[test]
    fn csv_layout() {
        let csv = to_csv(&[rec(0, None), rec(1, Some(0.25))]);
        assert_eq!(csv, "epoch,phase,loss,knn_top1,lr,wall_ms\n0,distill,1.5,,0.03,0\n1,distill,1.5,0.25,0.03,0\n");
        let t = Table::parse(&csv);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.column_index("lr"), Some(4));
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![rec(0, None), rec(3, Some(0.5))];
        let back: Vec<MetricsRecord> = to_jsonl(&recs)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, recs);
    }
}
