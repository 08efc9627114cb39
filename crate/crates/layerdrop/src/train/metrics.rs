//! Step metrics and CSV emission.
//!
//! Two files: `metrics.csv` with the deterministic per-step quantities and
//! `timing.csv` with wall-clock measurements. Timing lives in its own file
//! because identical runs must reproduce `metrics.csv` byte for byte, and
//! wall time never replays.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One training (or eval-interval) row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub theta: f64,
    pub kept_blocks: usize,
    /// Cumulative executed block FLOPs against a full-depth run, in [0, 1].
    pub cum_block_flops_fraction: f64,
    /// Wall time of the step in milliseconds (written to timing.csv only).
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str =
    "step,train_loss,val_loss,lr,theta,kept_blocks,cum_block_flops_fraction";
pub const TIMING_HEADER: &str = "step,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            opt(r.train_loss),
            opt(r.val_loss),
            r.lr,
            r.theta,
            r.kept_blocks,
            r.cum_block_flops_fraction
        );
    }
    out
}

pub fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(TIMING_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{}", r.step, r.wall_ms);
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], metrics_path: &Path, timing_path: &Path) -> Result<()> {
    std::fs::write(metrics_path, metrics_csv(rows))?;
    std::fs::write(timing_path, timing_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_is_deterministic_text_without_timing() {
        let rows = vec![MetricsRow {
            step: 1,
            train_loss: Some(4.25),
            val_loss: None,
            lr: 3e-6,
            theta: 1.0,
            kept_blocks: 6,
            cum_block_flops_fraction: 1.0,
            wall_ms: 123.456,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(METRICS_HEADER));
        assert!(csv.contains("1,4.25,,0.000003,1,6,1"));
        assert!(!csv.contains("123.456"));
        assert_eq!(metrics_csv(&rows), csv);
        let t = timing_csv(&rows);
        assert!(t.contains("1,123.456"));
    }
}
