use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{divfield, lorenz, map1d, ExperimentKind, Table, TrialOutput, TrialSummary};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::parallel::map_with_workers;

/// Order statistics over the successful trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stats {
    /// `None` when `values` is empty.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Some(Self {
            count: n,
            min: v[0],
            max: v[n - 1],
            median,
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub trials: usize,
    pub failed: usize,
    pub final_loss: Option<Stats>,
    pub mse_map: Option<Stats>,
    pub mse_field: Option<Stats>,
    pub rel_l2_field: Option<Stats>,
}

/// Statistics of each reported metric over trials that did not abort.
pub fn aggregate(summaries: &[TrialSummary]) -> Aggregate {
    let ok: Vec<&TrialSummary> = summaries.iter().filter(|s| s.error.is_none()).collect();
    let collect = |f: fn(&TrialSummary) -> Option<f64>| -> Option<Stats> {
        Stats::of(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>())
    };
    Aggregate {
        trials: summaries.len(),
        failed: summaries.len() - ok.len(),
        final_loss: collect(|s| Some(s.final_loss)),
        mse_map: collect(|s| s.mse_map),
        mse_field: collect(|s| s.mse_field),
        rel_l2_field: collect(|s| s.rel_l2_field),
    }
}

/// Runs one trial of `kind` with `seed` and stamps the config digest.
pub fn run_trial(kind: ExperimentKind, cfg: &RunConfig, seed: u64) -> Result<TrialOutput> {
    let mut out = match kind {
        ExperimentKind::Map1d => map1d::run(&cfg.map1d, seed, cfg.record_every)?,
        ExperimentKind::Lorenz => lorenz::run(&cfg.lorenz, seed, cfg.record_every)?,
        ExperimentKind::Divfield => divfield::run(&cfg.divfield, seed, cfg.record_every)?,
    };
    out.summary.config_digest = digest_for(kind, cfg, seed);
    Ok(out)
}

fn digest_for(kind: ExperimentKind, cfg: &RunConfig, seed: u64) -> String {
    let mut c = cfg.clone();
    c.experiment = Some(kind);
    c.digest(seed)
}

fn failed_summary(
    kind: ExperimentKind,
    cfg: &RunConfig,
    seed: u64,
    m: usize,
    err: &Error,
) -> TrialSummary {
    let iterations = match kind {
        ExperimentKind::Map1d => cfg.map1d.iterations,
        ExperimentKind::Lorenz => cfg.lorenz.iterations,
        ExperimentKind::Divfield => cfg.divfield.iterations,
    };
    TrialSummary {
        experiment: kind,
        seed,
        final_loss: f64::NAN,
        mse_map: None,
        mse_field: None,
        rel_l2_field: None,
        m,
        iterations,
        wall_time: 0.0,
        config_digest: digest_for(kind, cfg, seed),
        error: Some(err.to_string()),
    }
}

/// One trial of a batch: its summary and, unless it aborted, its artifacts.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    /// Directory name under the run directory.
    pub name: String,
    pub summary: TrialSummary,
    pub output: Option<TrialOutput>,
    /// True when the abort came from numerical breakdown.
    pub numeric_abort: bool,
}

impl TrialRecord {
    fn from_result(
        name: String,
        result: Result<TrialOutput>,
        fail: impl FnOnce(&Error) -> TrialSummary,
    ) -> Self {
        match result {
            Ok(out) => Self {
                name,
                summary: out.summary.clone(),
                output: Some(out),
                numeric_abort: false,
            },
            Err(e) => Self {
                name,
                summary: fail(&e),
                output: None,
                numeric_abort: e.is_numeric(),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub experiment: ExperimentKind,
    pub records: Vec<TrialRecord>,
    pub aggregate: Aggregate,
    /// Error-versus-`m` table, present for divergence sweeps.
    pub sweep: Option<Table>,
}

impl BatchResult {
    pub fn summaries(&self) -> Vec<TrialSummary> {
        self.records.iter().map(|r| r.summary.clone()).collect()
    }

    pub fn any_numeric_abort(&self) -> bool {
        self.records.iter().any(|r| r.numeric_abort)
    }

    /// Writes `config.resolved`, `summary.json`, `summary.csv`,
    /// `timing.json`, the sweep table if any, and one directory of artifacts
    /// per successful trial.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut resolved = cfg.clone();
        resolved.experiment = Some(self.experiment);
        resolved.write_resolved(dir)?;

        #[derive(Serialize)]
        struct SummaryFile<'a> {
            experiment: ExperimentKind,
            trials: Vec<TrialSummary>,
            aggregate: &'a Aggregate,
        }
        let file = SummaryFile {
            experiment: self.experiment,
            trials: self.summaries(),
            aggregate: &self.aggregate,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(dir.join("summary.json"), text)?;

        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record([
            "trial",
            "experiment",
            "seed",
            "m",
            "final_loss",
            "mse_map",
            "mse_field",
            "rel_l2_field",
            "iterations",
            "config_digest",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.records {
            let s = &r.summary;
            w.write_record([
                r.name.clone(),
                s.experiment.to_string(),
                s.seed.to_string(),
                s.m.to_string(),
                format!("{:?}", s.final_loss),
                opt(s.mse_map),
                opt(s.mse_field),
                opt(s.rel_l2_field),
                s.iterations.to_string(),
                s.config_digest.clone(),
                s.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;

        let timing: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| serde_json::json!({"trial": r.name, "seed": r.summary.seed, "wall_time": r.summary.wall_time}))
            .collect();
        fs::write(
            dir.join("timing.json"),
            serde_json::to_string_pretty(&timing)? + "\n",
        )?;

        if let Some(table) = &self.sweep {
            table.write_csv(fs::File::create(dir.join("sweep.csv"))?)?;
        }
        for r in &self.records {
            if let Some(out) = &r.output {
                out.write_artifacts(&dir.join(&r.name))?;
            }
        }
        Ok(())
    }
}

/// Runs `cfg.trials` trials of `kind`; trial `k` uses `cfg.seed + k`.
/// Aborted trials are recorded with their error.
pub fn run_trials(kind: ExperimentKind, cfg: &RunConfig) -> Result<BatchResult> {
    cfg.validate()?;
    let m = match kind {
        ExperimentKind::Map1d => cfg.map1d.m,
        ExperimentKind::Lorenz => cfg.lorenz.m,
        ExperimentKind::Divfield => cfg.divfield.m,
    };
    let records = map_with_workers(cfg.workers, cfg.trials, |k| {
        let seed = cfg.seed.wrapping_add(k as u64);
        TrialRecord::from_result(format!("trial-{k:03}"), run_trial(kind, cfg, seed), |e| {
            failed_summary(kind, cfg, seed, m, e)
        })
    });
    let summaries: Vec<TrialSummary> = records.iter().map(|r| r.summary.clone()).collect();
    Ok(BatchResult {
        experiment: kind,
        aggregate: aggregate(&summaries),
        records,
        sweep: None,
    })
}

/// Divergence-recovery sweep over `m = 1..=m_max` with `repeats` runs each.
/// Repeat `r` uses seed `cfg.seed + r` for every `m`, so the families are
/// nested.
pub fn sweep_divfield(cfg: &RunConfig) -> Result<BatchResult> {
    cfg.validate()?;
    let d = &cfg.divfield;
    let jobs: Vec<(usize, usize)> = (1..=d.m_max)
        .flat_map(|m| (0..d.repeats).map(move |r| (m, r)))
        .collect();
    let records = map_with_workers(cfg.workers, jobs.len(), |i| {
        let (m, r) = jobs[i];
        let seed = cfg.seed.wrapping_add(r as u64);
        let mut c = cfg.clone();
        c.divfield.m = m;
        let result = divfield::run_with_m(d, m, seed, cfg.record_every).map(|mut out| {
            out.summary.config_digest = digest_for(ExperimentKind::Divfield, &c, seed);
            out
        });
        TrialRecord::from_result(format!("m{m}-trial-{r:03}"), result, |e| {
            failed_summary(ExperimentKind::Divfield, &c, seed, m, e)
        })
    });
    let summaries: Vec<TrialSummary> = records.iter().map(|r| r.summary.clone()).collect();
    let mut table = Table::new(&["m", "n", "mean", "std", "median", "min", "max"]);
    for m in 1..=d.m_max {
        let errs: Vec<f64> = summaries
            .iter()
            .filter(|s| s.m == m && s.error.is_none())
            .filter_map(|s| s.rel_l2_field)
            .collect();
        let row = match Stats::of(&errs) {
            Some(st) => vec![
                m as f64,
                st.count as f64,
                st.mean,
                st.std,
                st.median,
                st.min,
                st.max,
            ],
            None => vec![
                m as f64,
                0.0,
                f64::NAN,
                f64::NAN,
                f64::NAN,
                f64::NAN,
                f64::NAN,
            ],
        };
        table.push(row);
    }
    Ok(BatchResult {
        experiment: ExperimentKind::Divfield,
        aggregate: aggregate(&summaries),
        records,
        sweep: Some(table),
    })
}
