//! Evaluation metric rows and their CSV encoding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// One grid cell of the evaluation: a sampler against a task model at an
/// (input size, sample size) pair, with its accuracy and Hausdorff
/// conformity. Each cell expands to two CSV lines, one per metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub sampler: String,
    pub task_model: String,
    pub n: usize,
    pub m: usize,
    pub acc: f64,
    pub hd: f64,
}

pub const METRICS_HEADER: &str = "sampler,task_model,n,m,metric,value";

/// Renders rows as CSV text: fixed 6-decimal values, '.' separator, LF
/// line endings; byte-stable for identical inputs.
pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        for (metric, value) in [("acc", row.acc), ("hd", row.hd)] {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                row.sampler, row.task_model, row.n, row.m, metric, value
            ));
        }
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(metrics_csv_string(rows).as_bytes())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_rows_give_header_only() {
        let text = metrics_csv_string(&[]);
        assert_eq!(text, "sampler,task_model,n,m,metric,value\n");
    }

    #[test]
    fn rows_expand_to_two_lines_each() {
        let rows: Vec<MetricsRow> = (0..12)
            .map(|i| MetricsRow {
                sampler: "fps".into(),
                task_model: "model1".into(),
                n: 1024,
                m: 16 << (i % 3),
                acc: 0.5,
                hd: 0.25,
            })
            .collect();
        let text = metrics_csv_string(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 24);
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "fps,model1,1024,16,acc,0.500000");
        assert_eq!(lines[2], "fps,model1,1024,16,hd,0.250000");
    }

    #[test]
    fn csv_reloads_with_a_generic_reader() {
        let rows = vec![MetricsRow {
            sampler: "as-pd".into(),
            task_model: "m".into(),
            n: 512,
            m: 33,
            acc: 1.0,
            hd: 0.125,
        }];
        let text = metrics_csv_string(&rows);
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 6);
            fields[2].parse::<usize>().unwrap();
            fields[3].parse::<usize>().unwrap();
            fields[5].parse::<f64>().unwrap();
        }
    }
}
