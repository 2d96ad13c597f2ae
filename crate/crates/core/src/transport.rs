//! Pushforward machinery: transporting samples, change of variables for
//! invertible maps, explicit Euler flows and kernel density estimates.

use serde::{Deserialize, Serialize};

use crate::densities::DensityModel;
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::fields::{check_dim, VectorField};
use crate::parallel::{map_indexed, Exec};

/// Applies `f` row by row. Output order matches input order.
pub fn pushforward_samples<F>(e: &ParticleEnsemble, f: F) -> Result<ParticleEnsemble>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    pushforward_samples_with(Exec::auto(), e, f)
}

pub fn pushforward_samples_with<F>(
    exec: Exec,
    e: &ParticleEnsemble,
    f: F,
) -> Result<ParticleEnsemble>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    let rows = map_indexed(exec, e.len(), |i| f(e.row(i)));
    let d = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::arg(format!(
                "map returned dimension {} at row {i}, expected {d}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("pushforward row", i));
        }
        flat.extend_from_slice(r);
    }
    ParticleEnsemble::from_flat(e.len(), d, flat)
}

/// `[e0, h(e0), h(h(e0)), ...]`, `m + 1` ensembles in total.
pub fn iterate_pushforward<F>(
    e0: &ParticleEnsemble,
    h: F,
    m: usize,
) -> Result<Vec<ParticleEnsemble>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    let mut out = Vec::with_capacity(m + 1);
    out.push(e0.clone());
    for _ in 0..m {
        let next = pushforward_samples(out.last().expect("nonempty"), &h)?;
        out.push(next);
    }
    Ok(out)
}

/// Density of `f_# rho` by change of variables:
/// `x -> rho(f^{-1}(x)) |det D f^{-1}(x)|`.
pub struct CovDensity<'a, Inv, Jac> {
    rho: &'a DensityModel,
    f_inverse: Inv,
    jac_det_inverse: Jac,
}

pub fn cov_density<Inv, Jac>(
    rho: &DensityModel,
    f_inverse: Inv,
    jac_det_inverse: Jac,
) -> CovDensity<'_, Inv, Jac>
where
    Inv: Fn(&[f64]) -> Vec<f64>,
    Jac: Fn(&[f64]) -> f64,
{
    CovDensity {
        rho,
        f_inverse,
        jac_det_inverse,
    }
}

impl<Inv, Jac> CovDensity<'_, Inv, Jac>
where
    Inv: Fn(&[f64]) -> Vec<f64>,
    Jac: Fn(&[f64]) -> f64,
{
    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        let jac = (self.jac_det_inverse)(x);
        if !(jac > 0.0 && jac.is_finite()) {
            return Err(Error::domain(format!(
                "inverse Jacobian magnitude must be positive, got {jac}"
            )));
        }
        Ok(self.rho.pdf(&(self.f_inverse)(x)) * jac)
    }
}

/// Time horizon and step of an explicit Euler flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub horizon: f64,
    pub substep: f64,
}

impl FlowConfig {
    pub fn new(horizon: f64, substep: f64) -> Result<Self> {
        let cfg = Self { horizon, substep };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::arg(format!(
                "flow horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.substep > 0.0 && self.substep <= self.horizon) {
            return Err(Error::arg(format!(
                "flow substep must lie in (0, horizon], got {}",
                self.substep
            )));
        }
        let ratio = self.horizon / self.substep;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::arg(format!(
                "horizon/substep = {ratio} is not an integer"
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.substep).round() as usize
    }
}

/// `horizon / substep` explicit Euler steps `x <- x + substep * v(x)`.
pub fn euler_flow(v: &dyn VectorField, x0: &[f64], cfg: &FlowConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dim(v, x0)?;
    let mut x = x0.to_vec();
    let mut dx = vec![0.0; x.len()];
    for step in 0..cfg.steps() {
        v.eval_into(&x, &mut dx);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += cfg.substep * di;
        }
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(Error::non_finite("Euler flow step", step));
        }
    }
    Ok(x)
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::arg("bandwidth needs at least two samples"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = match (var.sqrt(), iqr / 1.34) {
        (sd, q) if q > 0.0 => sd.min(q),
        (sd, _) => sd,
    };
    if spread <= 0.0 {
        return Err(Error::arg("bandwidth undefined for constant samples"));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// One-dimensional Gaussian kernel density estimate. With a period, kernels
/// are wrapped onto the circle of that circumference.
#[derive(Clone, Debug)]
pub struct Kde1d {
    samples: Vec<f64>,
    bandwidth: f64,
    period: Option<f64>,
}

impl Kde1d {
    pub fn new(samples: Vec<f64>, period: Option<f64>) -> Result<Self> {
        let bandwidth = silverman_bandwidth(&samples)?;
        Ok(Self {
            samples,
            bandwidth,
            period,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        let kernel = |u: f64| (-0.5 * (u / h).powi(2)).exp();
        let sum: f64 = match self.period {
            None => self.samples.iter().map(|s| kernel(x - s)).sum(),
            Some(p) => self
                .samples
                .iter()
                .map(|s| {
                    let u =
                        crate::densities::wrap_angle((x - s) * (2.0 * std::f64::consts::PI / p))
                            * p
                            / (2.0 * std::f64::consts::PI);
                    kernel(u) + kernel(u - p) + kernel(u + p)
                })
                .sum(),
        };
        sum * norm
    }

    pub fn evaluate(&self, exec: Exec, grid: &[f64]) -> Vec<f64> {
        map_indexed(exec, grid.len(), |i| self.pdf(grid[i]))
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::densities::{wrap_angle, VonMisesDensity};
    use crate::fields::{ConstantField, FnField, Lorenz63};
    use crate::rng::stream;

    fn smap_first(x: &[f64]) -> Vec<f64> {
        vec![x[0].sin()]
    }

    #[test]
    fn pushforward_examples() {
        let e = ParticleEnsemble::from_scalars(&[0.0, 0.4, -2.0]).unwrap();
        assert_eq!(pushforward_samples(&e, |x| x.to_vec()).unwrap(), e);

        let e = ParticleEnsemble::from_scalars(&[0.0, PI / 2.0]).unwrap();
        let out = pushforward_samples(&e, smap_first).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn pushforward_rotation_shifts_circular_mean() {
        let vm = VonMisesDensity::new(3.0, 0.5).unwrap();
        let e =
            ParticleEnsemble::from_scalars(&vm.sample(5000, &mut stream(1, "t")).unwrap()).unwrap();
        let c = 1.1;
        let out = pushforward_samples(&e, |x| vec![wrap_angle(x[0] + c)]).unwrap();
        let circ_mean = |e: &ParticleEnsemble| {
            let (s, k) = e
                .rows()
                .fold((0.0, 0.0), |(s, k), r| (s + r[0].sin(), k + r[0].cos()));
            s.atan2(k)
        };
        let shift = wrap_angle(circ_mean(&out) - circ_mean(&e));
        assert!((shift - c).abs() < 1e-10);
    }

    #[test]
    fn pushforward_reports_bad_row() {
        let e = ParticleEnsemble::from_scalars(&[1.0, 0.0, 2.0]).unwrap();
        let err = pushforward_samples(&e, |x| vec![1.0 / x[0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn cov_density_examples() {
        let rho = DensityModel::gaussian(vec![0.0], 1.0).unwrap();
        let ident = cov_density(&rho, |x| x.to_vec(), |_| 1.0);
        for x in [-1.0, 0.0, 2.5] {
            assert_eq!(ident.pdf(&[x]).unwrap(), rho.pdf(&[x]));
        }

        let affine = cov_density(&rho, |x| vec![x[0] / 2.0], |_| 0.5);
        let phi0 = 1.0 / (2.0 * PI).sqrt();
        assert!((affine.pdf(&[0.0]).unwrap() - phi0 / 2.0).abs() < 1e-15);
        assert!((affine.pdf(&[0.0]).unwrap() - 0.199_471_140_200_716_35).abs() < 1e-15);

        let vm = DensityModel::von_mises(2.0, 0.3).unwrap();
        let c = 0.8;
        let rot = cov_density(&vm, |x| vec![wrap_angle(x[0] - c)], |_| 1.0);
        for x in [-3.0, 0.0, 1.0] {
            let want = vm.pdf(&[x - c]);
            assert!((rot.pdf(&[x]).unwrap() - want).abs() < 1e-14);
        }

        let bad = cov_density(&rho, |x| x.to_vec(), |_| 0.0);
        assert!(matches!(bad.pdf(&[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn cov_density_integrates_to_one() {
        let rho = DensityModel::gaussian(vec![0.3], 0.7).unwrap();
        let dens = cov_density(&rho, |x| vec![(x[0] - 1.0) / 3.0], |_| 1.0 / 3.0);
        let n = 20_000;
        let (lo, hi) = (-20.0, 22.0);
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..n)
            .map(|i| dens.pdf(&[lo + (i as f64 + 0.5) * h]).unwrap())
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn euler_examples() {
        let cfg = FlowConfig::new(0.1, 0.01).unwrap();
        let zero = ConstantField(vec![0.0; 3]);
        assert_eq!(
            euler_flow(&zero, &[1.0, 2.0, 3.0], &cfg).unwrap(),
            vec![1.0, 2.0, 3.0]
        );

        let one_step = FlowConfig::new(0.01, 0.01).unwrap();
        let x = euler_flow(&Lorenz63::default(), &[1.0, 1.0, 1.0], &one_step).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] - 1.26).abs() < 1e-14);
        assert!((x[2] - (1.0 - 0.01 * 5.0 / 3.0)).abs() < 1e-14);

        let lin = FnField::new(1, |x: &[f64], o: &mut [f64]| o[0] = x[0]);
        let cfg = FlowConfig::new(0.1, 0.1).unwrap();
        assert!((euler_flow(&lin, &[1.0], &cfg).unwrap()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn euler_semigroup_is_exact() {
        let l = Lorenz63::default();
        let one = FlowConfig::new(0.1, 0.01).unwrap();
        let two = FlowConfig::new(0.2, 0.01).unwrap();
        let x0 = [-3.0, 4.0, 22.0];
        let a = euler_flow(&l, &x0, &two).unwrap();
        let b = euler_flow(&l, &euler_flow(&l, &x0, &one).unwrap(), &one).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn euler_reports_blowup() {
        let quad = FnField::new(1, |x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0] * 1e100);
        let cfg = FlowConfig::new(1.0, 0.1).unwrap();
        assert!(matches!(
            euler_flow(&quad, &[1e100], &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn flow_config_validation() {
        assert!(FlowConfig::new(0.1, 0.03).is_err());
        assert!(FlowConfig::new(0.1, 0.2).is_err());
        assert!(FlowConfig::new(-0.1, 0.01).is_err());
        assert_eq!(FlowConfig::new(0.1, 0.01).unwrap().steps(), 10);
    }

    #[test]
    fn iterate_examples() {
        let e0 = ParticleEnsemble::from_scalars(&[0.0]).unwrap();
        assert_eq!(
            iterate_pushforward(&e0, |x| x.to_vec(), 0).unwrap(),
            vec![e0.clone()]
        );
        let same = iterate_pushforward(&e0, |x| x.to_vec(), 3).unwrap();
        assert_eq!(same.len(), 4);
        assert!(same.iter().all(|e| *e == e0));
        let steps = iterate_pushforward(&e0, |x| vec![x[0] + 1.0], 2).unwrap();
        let got: Vec<f64> = steps.iter().map(|e| e.row(0)[0]).collect();
        assert_eq!(got, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn iterate_matches_repeated_pushforward() {
        let e0 = ParticleEnsemble::from_rows(&[[0.1, 0.2], [-1.0, 3.0], [2.0, -0.5]]).unwrap();
        let h = |x: &[f64]| vec![x[1].sin() + 0.3 * x[0], x[0] - 0.1 * x[1]];
        let traj = iterate_pushforward(&e0, h, 4).unwrap();
        let mut e = e0.clone();
        for (j, t) in traj.iter().enumerate() {
            assert_eq!(*t, e, "step {j}");
            assert_eq!(t.len(), e0.len());
            e = pushforward_samples(&e, h).unwrap();
        }
    }

    #[test]
    fn parallel_and_sequential_pushforward_agree() {
        let e = DensityModel::gaussian(vec![0.0; 3], 2.0)
            .unwrap()
            .sample(3000, &mut stream(3, "t"))
            .unwrap();
        let cfg = FlowConfig::new(0.1, 0.01).unwrap();
        let f = |x: &[f64]| euler_flow(&Lorenz63::default(), x, &cfg).unwrap();
        let a = pushforward_samples_with(Exec::Sequential, &e, f).unwrap();
        let b = pushforward_samples_with(Exec::Parallel, &e, f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn silverman_reference() {
        // sd = 1.5811, IQR/1.34 = 1.4925 for 1..=5 (linear quantiles 2 and 4)
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let want = 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((h - want).abs() < 1e-14);
        assert!(silverman_bandwidth(&[1.0]).is_err());
    }
}
