//! Recovering a planar field from its weighted divergences `div(rho_j v)`.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_loss, ExperimentKind, LossRecorder, Table, TrialOutput, TrialSummary};
use crate::densities::{DensityFamily, GaussianPreset};
use crate::error::{Error, Result};
use crate::fields::{PendulumField, VectorField};
use crate::metrics::weighted_divergence;
use crate::models::{AdamConfig, AdamState, InputFeatures, MlpModel};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivfieldConfig {
    /// Number of densities for a single run.
    pub m: usize,
    /// Largest `m` of a sweep; every repeat draws this many densities and
    /// uses the first `m`.
    pub m_max: usize,
    /// Runs per `m` in a sweep.
    pub repeats: usize,
    /// Collocation points per iteration.
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub iterations: usize,
    pub preset: GaussianPreset,
    /// Points per axis of the evaluation grid.
    pub eval_grid: usize,
}

impl Default for DivfieldConfig {
    fn default() -> Self {
        Self {
            m: 3,
            m_max: 4,
            repeats: 5,
            batch: 200,
            hidden: vec![50, 50],
            lr: 1e-2,
            iterations: 10_000,
            preset: GaussianPreset::square_field(),
            eval_grid: 100,
        }
    }
}

impl DivfieldConfig {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![2];
        sizes.extend(&self.hidden);
        sizes.push(2);
        sizes
    }
}

/// Fields that report values and divergence on a batch of points.
pub trait PlanarField {
    fn eval_with_divergence(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)>;
}

impl PlanarField for MlpModel {
    fn eval_with_divergence(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let cache = self.forward_jacobian(x)?;
        let div = cache.divergence();
        Ok((cache.output().clone(), div))
    }
}

impl PlanarField for PendulumField {
    fn eval_with_divergence(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let mut out = Array2::zeros(x.dim());
        let mut div = Array1::zeros(x.nrows());
        for ((row, mut o), d) in x.rows().into_iter().zip(out.rows_mut()).zip(div.iter_mut()) {
            let p = [row[0], row[1]];
            self.eval_into(&p, o.as_slice_mut().expect("row"));
            *d = self.divergence(&p);
        }
        Ok((out, div))
    }
}

/// Draws `max(m, m_max)` densities for `seed` and keeps the first `m`, so
/// runs sharing a seed see nested families.
pub fn draw_family(cfg: &DivfieldConfig, m: usize, seed: u64) -> Result<DensityFamily> {
    cfg.preset
        .draw(m.max(cfg.m_max), &mut stream(seed, "divfield.densities"))?
        .truncated(m)
}

/// Uniform points in `[-1, 1]^2`.
pub fn collocation(n: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))
}

/// Per-density data at the collocation points: density, score and the true
/// weighted divergence.
struct Observations {
    rho: Vec<Vec<f64>>,
    score: Vec<Vec<[f64; 2]>>,
    truth: Vec<Vec<f64>>,
}

fn observe(family: &DensityFamily, x: ArrayView2<f64>) -> Result<Observations> {
    let field = PendulumField;
    let mut obs = Observations {
        rho: Vec::new(),
        score: Vec::new(),
        truth: Vec::new(),
    };
    for rho in family.members() {
        let (mut r, mut s, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for row in x.rows() {
            let p = [row[0], row[1]];
            let g = rho.grad_log_pdf(&p);
            r.push(rho.pdf(&p));
            s.push([g[0], g[1]]);
            t.push(weighted_divergence(rho, &field, &p)?);
        }
        obs.rho.push(r);
        obs.score.push(s);
        obs.truth.push(t);
    }
    Ok(obs)
}

/// Residuals `div(rho_j v) - div(rho_j w)` per density and point.
fn residuals(obs: &Observations, values: &Array2<f64>, div: &Array1<f64>) -> Vec<Vec<f64>> {
    (0..obs.rho.len())
        .map(|j| {
            (0..values.nrows())
                .map(|i| {
                    let s = obs.score[j][i];
                    let model =
                        obs.rho[j][i] * (s[0] * values[(i, 0)] + s[1] * values[(i, 1)] + div[i]);
                    obs.truth[j][i] - model
                })
                .collect()
        })
        .collect()
}

/// Monte-Carlo estimate of `sum_j ||div(rho_j v) - div(rho_j w)||^2` on the
/// given collocation points (mean over points).
pub fn objective(
    family: &DensityFamily,
    field: &dyn PlanarField,
    x: ArrayView2<f64>,
) -> Result<f64> {
    let obs = observe(family, x)?;
    let (values, div) = field.eval_with_divergence(x)?;
    let n = x.nrows() as f64;
    Ok(residuals(&obs, &values, &div)
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() / n)
        .sum())
}

/// Cell midpoints of a `k x k` grid on `[-1, 1]^2`, `x` varying fastest.
pub fn square_grid(k: usize) -> Array2<f64> {
    let h = 2.0 / k as f64;
    Array2::from_shape_fn((k * k, 2), |(i, c)| {
        let idx = if c == 0 { i % k } else { i / k };
        -1.0 + (idx as f64 + 0.5) * h
    })
}

/// `sqrt(sum |w - v|^2 / sum |v|^2)` over a `k x k` grid, with `v` the
/// pendulum field.
pub fn relative_l2_error(field: &dyn PlanarField, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("evaluation grid must be nonempty"));
    }
    let grid = square_grid(k);
    let (got, _) = field.eval_with_divergence(grid.view())?;
    let (want, _) = PendulumField.eval_with_divergence(grid.view())?;
    Ok(super::relative_sq_error(
        got.rows()
            .into_iter()
            .zip(want.rows())
            .map(|(a, b)| (a.to_slice().expect("row"), b.to_slice().expect("row"))),
    )
    .sqrt())
}

/// Runs one seeded trial with `cfg.m` densities.
pub fn run(cfg: &DivfieldConfig, seed: u64, record_every: usize) -> Result<TrialOutput> {
    run_with_m(cfg, cfg.m, seed, record_every)
}

/// Runs one seeded trial with `m` densities.
pub fn run_with_m(
    cfg: &DivfieldConfig,
    m: usize,
    seed: u64,
    record_every: usize,
) -> Result<TrialOutput> {
    let start = Instant::now();
    let family = draw_family(cfg, m, seed)?;
    let mut model = MlpModel::glorot(
        &cfg.sizes(),
        InputFeatures::Identity,
        &mut stream(seed, "divfield.init"),
    )?;
    let mut adam = AdamState::new(
        model.params().len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = stream(seed, "divfield.collocation");
    let n = cfg.batch;
    let scale = 2.0 / n as f64;
    let mut recorder = LossRecorder::new(record_every);
    for it in 1..=cfg.iterations {
        let x = collocation(n, &mut rng);
        let obs = observe(&family, x.view())?;
        let cache = model.forward_jacobian(x.view())?;
        let res = residuals(&obs, cache.output(), &cache.divergence());
        let mut loss = 0.0;
        let mut g_out = Array2::zeros((n, 2));
        let mut g_div = Array1::zeros(n);
        for (j, r) in res.iter().enumerate() {
            for i in 0..n {
                loss += r[i] * r[i] / n as f64;
                let w = -scale * r[i] * obs.rho[j][i];
                g_out[(i, 0)] += w * obs.score[j][i][0];
                g_out[(i, 1)] += w * obs.score[j][i][1];
                g_div[i] += w;
            }
        }
        check_loss("divfield", it, loss)?;
        recorder.push(it, loss);
        let g_jac: Vec<Array2<f64>> = (0..2)
            .map(|k| {
                let mut g = Array2::zeros((n, 2));
                g.column_mut(k).assign(&g_div);
                g
            })
            .collect();
        let grad = model.backward_jacobian(&cache, g_out.view(), &g_jac)?;
        adam.update(model.params_mut(), &grad)?;
    }
    let (loss_curve, final_loss) = recorder.finish(cfg.iterations);
    let rel = relative_l2_error(&model, cfg.eval_grid)?;

    let grid = square_grid(cfg.eval_grid);
    let (learned, _) = model.eval_with_divergence(grid.view())?;
    let (truth, _) = PendulumField.eval_with_divergence(grid.view())?;
    let mut eval_grid = Table::new(&["x", "y", "v0", "v1", "v_theta0", "v_theta1", "abs_error"]);
    for ((p, t), l) in grid
        .rows()
        .into_iter()
        .zip(truth.rows())
        .zip(learned.rows())
    {
        let err = ((l[0] - t[0]).powi(2) + (l[1] - t[1]).powi(2)).sqrt();
        eval_grid.push(vec![p[0], p[1], t[0], t[1], l[0], l[1], err]);
    }
    Ok(TrialOutput {
        summary: TrialSummary {
            experiment: ExperimentKind::Divfield,
            seed,
            final_loss,
            mse_map: None,
            mse_field: Some(rel * rel),
            rel_l2_field: Some(rel),
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
