//! The three recovery experiments and the multi-trial runner.

pub mod divfield;
pub mod lorenz;
pub mod map1d;
mod trials;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::format_float;
use crate::error::{Error, Result};
use crate::models::MlpModel;

pub use trials::{
    aggregate, run_trial, run_trials, sweep_divfield, Aggregate, BatchResult, Stats, TrialRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    /// Circle-to-R^3 map from pushforwards of von Mises densities.
    Map1d,
    /// Lorenz-63 field from density snapshots.
    Lorenz,
    /// Planar field from weighted divergence operators.
    Divfield,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Map1d => "map1d",
            Self::Lorenz => "lorenz",
            Self::Divfield => "divfield",
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of one seeded training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub final_loss: f64,
    /// Relative MSE of the learned map (map1d, lorenz flow map).
    pub mse_map: Option<f64>,
    /// Relative MSE of the learned field (lorenz, divfield).
    pub mse_field: Option<f64>,
    /// Relative L2 error of the learned field (divfield).
    pub rel_l2_field: Option<f64>,
    /// Number of densities the trial was trained on.
    pub m: usize,
    pub iterations: usize,
    /// Seconds. Excluded from serialized summaries so reruns compare equal.
    #[serde(skip)]
    pub wall_time: f64,
    pub config_digest: String,
    /// Set when the trial aborted; metrics are then absent.
    pub error: Option<String>,
}

/// Loss recorded every `record_every` iterations: the mean loss over the
/// window ending at `iteration`, and the best window mean so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
    pub best: f64,
}

/// Accumulates per-iteration losses into window means.
#[derive(Debug)]
pub(crate) struct LossRecorder {
    every: usize,
    window_sum: f64,
    window_len: usize,
    best: f64,
    curve: LossCurve,
}

impl LossRecorder {
    pub(crate) fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            window_sum: 0.0,
            window_len: 0,
            best: f64::INFINITY,
            curve: LossCurve::default(),
        }
    }

    pub(crate) fn push(&mut self, iteration: usize, loss: f64) {
        self.window_sum += loss;
        self.window_len += 1;
        if self.window_len == self.every {
            self.flush(iteration);
        }
    }

    fn flush(&mut self, iteration: usize) {
        if self.window_len == 0 {
            return;
        }
        let loss = self.window_sum / self.window_len as f64;
        self.best = self.best.min(loss);
        self.curve.points.push(LossPoint {
            iteration,
            loss,
            best: self.best,
        });
        self.window_sum = 0.0;
        self.window_len = 0;
    }

    /// Closes the trailing partial window; returns the curve and the last
    /// window mean.
    pub(crate) fn finish(mut self, iteration: usize) -> (LossCurve, f64) {
        self.flush(iteration);
        let last = self.curve.points.last().map_or(f64::NAN, |p| p.loss);
        (self.curve, last)
    }
}

/// Column-labelled numeric table written as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format_float(*v)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything a finished trial produces.
#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub summary: TrialSummary,
    pub loss_curve: LossCurve,
    pub model: MlpModel,
    /// Experiment-specific evaluation table (`eval_grid.csv`).
    pub eval_grid: Table,
    /// Extra named tables, e.g. snapshot samples for the Lorenz experiment.
    pub extra: Vec<(String, Table)>,
}

impl TrialOutput {
    /// Writes `loss_curve.csv`, `eval_grid.csv`, `model.timlp` and any extra
    /// tables into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut curve = Table::new(&["iteration", "loss", "best"]);
        for p in &self.loss_curve.points {
            curve.push(vec![p.iteration as f64, p.loss, p.best]);
        }
        curve.write_csv(fs::File::create(dir.join("loss_curve.csv"))?)?;
        self.eval_grid
            .write_csv(fs::File::create(dir.join("eval_grid.csv"))?)?;
        for (name, table) in &self.extra {
            table.write_csv(fs::File::create(dir.join(name))?)?;
        }
        self.model
            .write_checkpoint(std::io::BufWriter::new(fs::File::create(
                dir.join("model.timlp"),
            )?))?;
        Ok(())
    }
}

/// Aborts with the iteration index when a loss stops being finite.
pub(crate) fn check_loss(context: &str, iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{context} loss"), iteration))
    }
}

/// Relative sum of squares `sum |a - b|^2 / sum |b|^2` over matching rows.
pub(crate) fn relative_sq_error<'a>(pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in pairs {
        for (x, y) in a.iter().zip(b) {
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recorder_windows_and_best() {
        let mut r = LossRecorder::new(2);
        for (i, l) in [4.0, 2.0, 5.0, 5.0, 1.0].iter().enumerate() {
            r.push(i + 1, *l);
        }
        let (curve, last) = r.finish(5);
        let got: Vec<(usize, f64, f64)> = curve
            .points
            .iter()
            .map(|p| (p.iteration, p.loss, p.best))
            .collect();
        assert_eq!(got, vec![(2, 3.0, 3.0), (4, 5.0, 3.0), (5, 1.0, 1.0)]);
        assert_eq!(last, 1.0);
        assert!(curve.points.windows(2).all(|w| w[1].best <= w[0].best));
    }

    #[test]
    fn table_csv() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1.0, 0.5]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b\n1.0,0.5\n");
        assert_eq!(t.column("b"), Some(vec![0.5]));
    }

    #[test]
    fn summary_json_omits_wall_time() {
        let s = TrialSummary {
            experiment: ExperimentKind::Map1d,
            seed: 3,
            final_loss: 0.1,
            mse_map: Some(1e-4),
            mse_field: None,
            rel_l2_field: None,
            m: 5,
            iterations: 10,
            wall_time: 12.5,
            config_digest: "abc".into(),
            error: None,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert!(!text.contains("wall_time"));
        assert!(text.contains("\"experiment\":\"map1d\""));
    }
}
