//! Learning a circle-to-R^3 map from its pushforwards of von Mises densities.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_loss, ExperimentKind, LossRecorder, Table, TrialOutput, TrialSummary};
use crate::densities::{sin_cos, DensityFamily, VonMisesPreset};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::metrics::energy_mmd;
use crate::models::{energy_mmd_value_and_grad, AdamConfig, AdamState, InputFeatures, MlpModel};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Map1dConfig {
    /// Number of reference densities.
    pub m: usize,
    /// Fresh base samples per density and iteration.
    pub samples_per_density: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub iterations: usize,
    pub preset: VonMisesPreset,
    /// Points of the midpoint rule used for the relative MSE.
    pub eval_grid: usize,
}

impl Default for Map1dConfig {
    fn default() -> Self {
        Self {
            m: 5,
            samples_per_density: 100,
            hidden: vec![100, 100],
            lr: 1e-3,
            iterations: 10_000,
            preset: VonMisesPreset::circle_map(),
            eval_grid: 2048,
        }
    }
}

impl Map1dConfig {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![2];
        sizes.extend(&self.hidden);
        sizes.push(3);
        sizes
    }
}

/// The map to recover.
pub fn target_map(x: f64) -> [f64; 3] {
    let (sin3, cos3) = sin_cos(3.0 * x);
    [
        x.sin(),
        (cos3 + (2.0 * x).sin()) / 2.0,
        (sin3 + (5.0 * x).sin()) / 2.0,
    ]
}

fn target_batch(x: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((x.len(), 3));
    for (mut row, &xi) in out.rows_mut().into_iter().zip(x) {
        row.assign(&ndarray::arr1(&target_map(xi)));
    }
    out
}

/// Candidate maps evaluate a batch of angles to an `n x 3` array.
pub trait CircleMap {
    fn eval_batch(&self, x: &[f64]) -> Result<Array2<f64>>;
}

impl CircleMap for MlpModel {
    fn eval_batch(&self, x: &[f64]) -> Result<Array2<f64>> {
        let view = ArrayView2::from_shape((x.len(), 1), x).expect("column shape");
        self.forward(view)
    }
}

/// The exact map, for ground-truth checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactMap;

impl CircleMap for ExactMap {
    fn eval_batch(&self, x: &[f64]) -> Result<Array2<f64>> {
        Ok(target_batch(x))
    }
}

/// Midpoints of `n` equal cells of `[-pi, pi)`.
pub fn circle_midpoints(n: usize) -> Vec<f64> {
    let h = 2.0 * PI / n as f64;
    (0..n).map(|i| -PI + (i as f64 + 0.5) * h).collect()
}

/// Relative squared L2 error of `map` against the target on a midpoint grid.
pub fn relative_mse(map: &dyn CircleMap, grid: usize) -> Result<f64> {
    if grid == 0 {
        return Err(Error::arg("evaluation grid must be nonempty"));
    }
    let x = circle_midpoints(grid);
    let got = map.eval_batch(&x)?;
    let want = target_batch(&x);
    Ok(super::relative_sq_error(
        got.rows()
            .into_iter()
            .zip(want.rows())
            .map(|(a, b)| (a.to_slice().expect("row"), b.to_slice().expect("row"))),
    ))
}

/// `(1/m) sum_j MMD(f_# rho_j, map_# rho_j)` on fresh samples shared by both
/// maps.
pub fn objective(
    family: &DensityFamily,
    map: &dyn CircleMap,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for rho in family.members() {
        let x = rho.sample(n, rng)?.into_array().into_raw_vec_and_offset().0;
        let a = ParticleEnsemble::new(target_batch(&x))?;
        let b = ParticleEnsemble::new(map.eval_batch(&x)?)?;
        total += energy_mmd(&a, &b)?.value;
    }
    Ok(total / family.len() as f64)
}

/// Draws the trial's densities.
pub fn draw_family(cfg: &Map1dConfig, seed: u64) -> Result<DensityFamily> {
    cfg.preset.draw(cfg.m, &mut stream(seed, "map1d.densities"))
}

/// Runs one seeded training trial.
pub fn run(cfg: &Map1dConfig, seed: u64, record_every: usize) -> Result<TrialOutput> {
    let start = Instant::now();
    let family = draw_family(cfg, seed)?;
    let mut model = MlpModel::glorot(
        &cfg.sizes(),
        InputFeatures::Circle,
        &mut stream(seed, "map1d.init"),
    )?;
    let mut adam = AdamState::new(
        model.params().len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = stream(seed, "map1d.samples");
    let (m, n) = (cfg.m, cfg.samples_per_density);
    let mut recorder = LossRecorder::new(record_every);
    let mut x = vec![0.0; m * n];
    for it in 1..=cfg.iterations {
        for (j, rho) in family.members().iter().enumerate() {
            let draw = rho.sample(n, &mut rng)?;
            x[j * n..(j + 1) * n].copy_from_slice(draw.as_slice());
        }
        let target = target_batch(&x);
        let cache =
            model.forward_cached(ArrayView2::from_shape((m * n, 1), &x).expect("column shape"))?;
        let mut upstream = Array2::zeros((m * n, 3));
        let mut loss = 0.0;
        for j in 0..m {
            let rows = s![j * n..(j + 1) * n, ..];
            let (value, grad) =
                energy_mmd_value_and_grad(cache.output().slice(rows), target.slice(rows))?;
            loss += value / m as f64;
            upstream.slice_mut(rows).assign(&(grad / m as f64));
        }
        check_loss("map1d", it, loss)?;
        recorder.push(it, loss);
        let (grad, _) = model.backward(&cache, upstream.view())?;
        adam.update(model.params_mut(), &grad)?;
    }
    let (loss_curve, final_loss) = recorder.finish(cfg.iterations);
    let mse = relative_mse(&model, cfg.eval_grid)?;

    let grid = circle_midpoints(cfg.eval_grid);
    let learned = model.eval_batch(&grid)?;
    let mut eval_grid = Table::new(&["x", "f0", "f1", "f2", "f_theta0", "f_theta1", "f_theta2"]);
    for (&xi, row) in grid.iter().zip(learned.rows()) {
        let f = target_map(xi);
        eval_grid.push(vec![xi, f[0], f[1], f[2], row[0], row[1], row[2]]);
    }
    Ok(TrialOutput {
        summary: TrialSummary {
            experiment: ExperimentKind::Map1d,
            seed,
            final_loss,
            mse_map: Some(mse),
            mse_field: None,
            rel_l2_field: None,
            m,
            iterations: cfg.iterations,
            wall_time: start.elapsed().as_secs_f64(),
            config_digest: String::new(),
            error: None,
        },
        loss_curve,
        model,
        eval_grid,
        extra: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_values() {
        let f = target_map(0.0);
        assert_eq!(f, [0.0, 0.5, 0.0]);
        let f = target_map(PI / 2.0);
        assert!((f[0] - 1.0).abs() < 1e-15);
        assert!((f[1] - 0.0).abs() < 1e-15);
        assert!((f[2] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn exact_map_has_zero_error_and_objective() {
        assert_eq!(relative_mse(&ExactMap, 2048).unwrap(), 0.0);
        let family = draw_family(&Map1dConfig::default(), 1).unwrap();
        let loss = objective(&family, &ExactMap, 100, &mut stream(1, "t")).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_network_error_is_one() {
        let zero = MlpModel::zeros(&[2, 4, 3], InputFeatures::Circle).unwrap();
        assert!((relative_mse(&zero, 512).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_training_reduces_loss() {
        let cfg = Map1dConfig {
            hidden: vec![16, 16],
            iterations: 200,
            samples_per_density: 40,
            ..Map1dConfig::default()
        };
        let out = run(&cfg, 3, 50).unwrap();
        let pts = &out.loss_curve.points;
        assert_eq!(pts.len(), 4);
        assert!(pts.last().unwrap().loss < pts[0].loss);
        assert!(out.summary.mse_map.unwrap() < 1.0);
        assert_eq!(out.eval_grid.rows.len(), 2048);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = Map1dConfig {
            hidden: vec![8],
            iterations: 20,
            samples_per_density: 10,
            ..Map1dConfig::default()
        };
        let a = run(&cfg, 9, 10).unwrap();
        let b = run(&cfg, 9, 10).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.summary.final_loss, b.summary.final_loss);
    }
}
