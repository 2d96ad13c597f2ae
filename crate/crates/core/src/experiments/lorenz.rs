//! Identifying the Lorenz-63 field from density snapshots along its flow.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_loss, ExperimentKind, LossRecorder, Table, TrialOutput, TrialSummary};
use crate::densities::GaussianPreset;
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::fields::{Lorenz63, VectorField};
use crate::metrics::energy_mmd;
use crate::models::{energy_mmd_value_and_grad, AdamConfig, AdamState, InputFeatures, MlpModel};
use crate::parallel::Exec;
use crate::rng::{stream, Rng};
use crate::transport::{euler_flow, pushforward_samples_with, FlowConfig};

/// Particles per snapshot written to `snapshots.csv` and `eval_grid.csv`.
const ARTIFACT_ROWS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Number of snapshot transitions; `m + 1` snapshots are generated.
    pub m: usize,
    pub dt: f64,
    pub substep: f64,
    /// Particles per snapshot.
    pub particles: usize,
    /// Minibatch size per loss term.
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub iterations: usize,
    pub initial: GaussianPreset,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        let l = Lorenz63::default();
        Self {
            sigma: l.sigma,
            rho: l.rho,
            beta: l.beta,
            m: 7,
            dt: 0.1,
            substep: 0.01,
            particles: 10_000,
            batch: 200,
            hidden: vec![100, 100],
            lr: 1e-3,
            iterations: 2000,
            initial: GaussianPreset::lorenz_initial(),
        }
    }
}

impl LorenzConfig {
    pub fn system(&self) -> Lorenz63 {
        Lorenz63 {
            sigma: self.sigma,
            rho: self.rho,
            beta: self.beta,
        }
    }

    pub fn flow(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.dt, self.substep)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![3];
        sizes.extend(&self.hidden);
        sizes.push(3);
        sizes
    }
}

/// Snapshots `rho_0, ..., rho_m` and the affine map onto the unit cube.
#[derive(Clone, Debug)]
pub struct LorenzData {
    /// Original coordinates; `snapshots[j + 1]` is the true Euler flow of
    /// `snapshots[j]`, row by row.
    pub snapshots: Vec<ParticleEnsemble>,
    pub lo: [f64; 3],
    pub span: [f64; 3],
    /// Snapshots mapped into `[0, 1]^3`.
    pub cube: Vec<Array2<f64>>,
}

impl LorenzData {
    pub fn to_cube(&self, x: &[f64]) -> [f64; 3] {
        std::array::from_fn(|k| (x[k] - self.lo[k]) / self.span[k])
    }

    pub fn from_cube(&self, u: &[f64]) -> [f64; 3] {
        std::array::from_fn(|k| self.lo[k] + self.span[k] * u[k])
    }
}

/// Samples `rho_0` and transports it `m` times with the true flow.
pub fn generate_data(cfg: &LorenzConfig, seed: u64) -> Result<LorenzData> {
    let flow = cfg.flow()?;
    let system = cfg.system();
    let rho0 = cfg.initial.draw_one(&mut stream(seed, "lorenz.initial"))?;
    let mut snapshots = vec![rho0.sample(cfg.particles, &mut stream(seed, "lorenz.particles"))?];
    for _ in 0..cfg.m {
        let next =
            pushforward_samples_with(Exec::Sequential, snapshots.last().expect("nonempty"), |x| {
                euler_flow(&system, x, &flow).unwrap_or_else(|_| vec![f64::NAN; 3])
            })?;
        snapshots.push(next);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for snap in &snapshots {
        for r in snap.rows() {
            for k in 0..3 {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
    }
    let span: [f64; 3] = std::array::from_fn(|k| hi[k] - lo[k]);
    if span.iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(Error::domain("snapshots are degenerate along an axis"));
    }
    let cube = snapshots
        .iter()
        .map(|snap| {
            let mut u = snap.view().to_owned();
            for mut row in u.rows_mut() {
                for k in 0..3 {
                    row[k] = (row[k] - lo[k]) / span[k];
                }
            }
            u
        })
        .collect();
    Ok(LorenzData {
        snapshots,
        lo,
        span,
        cube,
    })
}

/// A vector field in unit-cube coordinates, evaluated on batches.
pub trait CubeField {
    fn eval_batch(&self, u: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl CubeField for MlpModel {
    fn eval_batch(&self, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(u)
    }
}

/// The true field conjugated into cube coordinates:
/// `v'(u) = v(lo + span * u) / span`.
#[derive(Clone, Copy, Debug)]
pub struct ConjugateLorenz {
    pub system: Lorenz63,
    pub lo: [f64; 3],
    pub span: [f64; 3],
}

impl ConjugateLorenz {
    pub fn new(system: Lorenz63, data: &LorenzData) -> Self {
        Self {
            system,
            lo: data.lo,
            span: data.span,
        }
    }
}

impl CubeField for ConjugateLorenz {
    fn eval_batch(&self, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(u.dim());
        let (mut x, mut v) = ([0.0; 3], [0.0; 3]);
        for (row, mut o) in u.rows().into_iter().zip(out.rows_mut()) {
            for k in 0..3 {
                x[k] = self.lo[k] + self.span[k] * row[k];
            }
            self.system.eval_into(&x, &mut v);
            for k in 0..3 {
                o[k] = v[k] / self.span[k];
            }
        }
        Ok(out)
    }
}

/// Euler flow of a cube field over `cfg.horizon`, applied to every row.
pub fn flow_batch(
    field: &dyn CubeField,
    u0: ArrayView2<f64>,
    cfg: &FlowConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut u = u0.to_owned();
    for step in 0..cfg.steps() {
        let v = field.eval_batch(u.view())?;
        u.scaled_add(cfg.substep, &v);
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("learned flow step", step));
        }
    }
    Ok(u)
}

fn draw_rows(source: &Array2<f64>, k: usize, rng: &mut Rng, out: &mut Array2<f64>, at: usize) {
    let n = source.nrows();
    for r in 0..k {
        let i = rng.random_range(0..n);
        out.row_mut(at + r).assign(&source.row(i));
    }
}

/// Minibatch estimate of `sum_j MMD(f_# rho_j, rho_{j+1})` in cube
/// coordinates, with independent minibatches for both sides.
pub fn objective(
    data: &LorenzData,
    field: &dyn CubeField,
    flow: &FlowConfig,
    batch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let m = data.cube.len() - 1;
    let mut total = 0.0;
    let mut x = Array2::zeros((batch, 3));
    let mut y = Array2::zeros((batch, 3));
    for j in 0..m {
        draw_rows(&data.cube[j], batch, rng, &mut x, 0);
        draw_rows(&data.cube[j + 1], batch, rng, &mut y, 0);
        let pushed = flow_batch(field, x.view(), flow)?;
        total += energy_mmd(
            &ParticleEnsemble::new(pushed)?,
            &ParticleEnsemble::new(y.clone())?,
        )?
        .value;
    }
    Ok(total)
}

/// Relative MSEs of the field and of the time-`dt` flow, weighted by the
/// uniform mixture of `rho_0, ..., rho_{m-1}` and estimated over every
/// stored particle. Returns `(mse_field, mse_map)` in original coordinates.
pub fn evaluate(
    data: &LorenzData,
    system: &Lorenz63,
    field: &dyn CubeField,
    flow: &FlowConfig,
) -> Result<(f64, f64)> {
    let m = data.cube.len() - 1;
    let (mut vn, mut vd, mut fnum, mut fden) = (0.0, 0.0, 0.0, 0.0);
    let mut v = [0.0; 3];
    for j in 0..m {
        let u = &data.cube[j];
        let learned = field.eval_batch(u.view())?;
        let pushed = flow_batch(field, u.view(), flow)?;
        for ((x, lv), (pu, fx)) in data.snapshots[j]
            .rows()
            .zip(learned.rows())
            .zip(pushed.rows().into_iter().zip(data.snapshots[j + 1].rows()))
        {
            system.eval_into(x, &mut v);
            for k in 0..3 {
                let e = data.span[k] * lv[k] - v[k];
                vn += e * e;
                vd += v[k] * v[k];
                let e = data.lo[k] + data.span[k] * pu[k] - fx[k];
                fnum += e * e;
                fden += fx[k] * fx[k];
            }
        }
    }
    Ok((vn / vd, fnum / fden))
}

/// Runs one seeded training trial.
pub fn run(cfg: &LorenzConfig, seed: u64, record_every: usize) -> Result<TrialOutput> {
    let start = Instant::now();
    let flow = cfg.flow()?;
    let data = generate_data(cfg, seed)?;
    let mut model = MlpModel::glorot(
        &cfg.sizes(),
        InputFeatures::Identity,
        &mut stream(seed, "lorenz.init"),
    )?;
    let mut adam = AdamState::new(
        model.params().len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = stream(seed, "lorenz.batches");
    let (m, b, h) = (cfg.m, cfg.batch, flow.substep);
    let mut recorder = LossRecorder::new(record_every);
    let mut x = Array2::zeros((m * b, 3));
    let mut y = Array2::zeros((m * b, 3));
    let mut caches = Vec::with_capacity(flow.steps());
    for it in 1..=cfg.iterations {
        for j in 0..m {
            draw_rows(&data.cube[j], b, &mut rng, &mut x, j * b);
            draw_rows(&data.cube[j + 1], b, &mut rng, &mut y, j * b);
        }
        caches.clear();
        let mut u = x.clone();
        for _ in 0..flow.steps() {
            let cache = model.forward_cached(u.view())?;
            u.scaled_add(h, cache.output());
            caches.push(cache);
        }
        let mut g = Array2::zeros((m * b, 3));
        let mut loss = 0.0;
        for j in 0..m {
            let rows = s![j * b..(j + 1) * b, ..];
            let (value, grad) = energy_mmd_value_and_grad(u.slice(rows), y.slice(rows))?;
            loss += value;
            g.slice_mut(rows).assign(&grad);
        }
        check_loss("lorenz", it, loss)?;
        recorder.push(it, loss);
        let mut grad = vec![0.0; model.params().len()];
        for cache in caches.iter().rev() {
            let (pg, ig) = model.backward(cache, (&g * h).view())?;
            for (a, p) in grad.iter_mut().zip(&pg) {
                *a += p;
            }
            g += &ig;
        }
        adam.update(model.params_mut(), &grad)?;
    }
    let (loss_curve, final_loss) = recorder.finish(cfg.iterations);
    let system = cfg.system();
    let (mse_field, mse_map) = evaluate(&data, &system, &model, &flow)?;

    let mut eval_grid = Table::new(&[
        "j", "x", "y", "z", "v0", "v1", "v2", "v_theta0", "v_theta1", "v_theta2",
    ]);
    let mut snapshots = Table::new(&["j", "x", "y", "z"]);
    let mut v = [0.0; 3];
    for (j, snap) in data.snapshots.iter().enumerate() {
        let k = snap.len().min(ARTIFACT_ROWS);
        for r in snap.rows().take(k) {
            snapshots.push(vec![j as f64, r[0], r[1], r[2]]);
        }
        if j == m {
            continue;
        }
        let learned = model.forward(data.cube[j].slice(s![..k, ..]))?;
        for (r, lv) in snap.rows().zip(learned.rows()) {
            system.eval_into(r, &mut v);
            let lv: Vec<f64> = (0..3).map(|i| data.span[i] * lv[i]).collect();
            eval_grid.push(vec![
                j as f64, r[0], r[1], r[2], v[0], v[1], v[2], lv[0], lv[1], lv[2],
            ]);
        }
    }
    Ok(TrialOutput {
        summary: TrialSummary {
            experiment: ExperimentKind::Lorenz,
            seed,
            final_loss,
            mse_map: Some(mse_map),
            mse_field: Some(mse_field),
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
        extra: vec![("snapshots.csv".to_string(), snapshots)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LorenzConfig {
        LorenzConfig {
            particles: 300,
            batch: 40,
            hidden: vec![16, 16],
            iterations: 30,
            ..LorenzConfig::default()
        }
    }

    #[test]
    fn snapshots_follow_the_true_flow() {
        let cfg = small();
        let data = generate_data(&cfg, 4).unwrap();
        assert_eq!(data.snapshots.len(), 8);
        let flow = cfg.flow().unwrap();
        for j in [0, 6] {
            for i in [0, 17, 299] {
                let x = data.snapshots[j].row(i);
                let want = euler_flow(&cfg.system(), x, &flow).unwrap();
                assert_eq!(data.snapshots[j + 1].row(i), &want[..]);
            }
        }
        for u in &data.cube {
            assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn conjugate_field_recovers_truth() {
        let cfg = small();
        let data = generate_data(&cfg, 2).unwrap();
        let truth = ConjugateLorenz::new(cfg.system(), &data);
        let flow = cfg.flow().unwrap();
        let (mv, mf) = evaluate(&data, &cfg.system(), &truth, &flow).unwrap();
        assert!(mv < 1e-20, "{mv}");
        assert!(mf < 1e-20, "{mf}");
    }

    #[test]
    fn short_training_runs() {
        let out = run(&small(), 5, 10).unwrap();
        assert_eq!(out.loss_curve.points.len(), 3);
        assert!(out.summary.mse_field.unwrap().is_finite());
        assert_eq!(out.extra[0].1.rows.len(), 8 * 300);
    }
}
