//! Discrepancies between measures and between vector fields.
//!
//! * [`energy_mmd`]: squared energy distance between two empirical measures.
//! * [`pushforward_metric`]: sum over a density family of the energy MMD
//!   between the pushforwards under two maps.
//! * [`weighted_divergence`] / [`divergence_metric`]: `div(rho v)` and the
//!   family-summed L2 distance between weighted divergence operators.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::densities::{DensityFamily, DensityModel};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::fields::{check_dim, VectorField};
use crate::parallel::{block_sum, Exec};
use crate::rng::Rng;
use crate::transport::pushforward_samples_with;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// All pairs of the two full point sets.
    ExactEmpirical,
    /// All pairs of two random subsets.
    Minibatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyValue {
    pub value: f64,
    pub estimator: Estimator,
    pub n_x: usize,
    pub n_y: usize,
}

#[inline]
pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `sum_i sum_j |a_i - b_j|`, blocked over rows of `a`.
fn pair_distance_sum(exec: Exec, a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
    block_sum(exec, a.len(), |i| {
        let ai = a.row(i);
        b.rows().map(|bj| euclid(ai, bj)).sum::<f64>()
    })
}

/// Total order on ensembles used to make the cross term independent of
/// argument order.
fn canonical_cmp(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Rows in lexicographic order, so that equal multisets become equal arrays
/// and every pair sum below is order independent.
fn sorted_rows(e: &ParticleEnsemble) -> ParticleEnsemble {
    let mut idx: Vec<usize> = (0..e.len()).collect();
    idx.sort_by(|&i, &j| {
        e.row(i)
            .iter()
            .zip(e.row(j))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    e.select(&idx).expect("indices in range")
}

/// Squared energy distance, biased V-statistic:
/// `2/(nx ny) sum |x-y| - 1/nx^2 sum |x-x'| - 1/ny^2 sum |y-y'|`,
/// clamped at zero.
pub fn energy_mmd(x: &ParticleEnsemble, y: &ParticleEnsemble) -> Result<DiscrepancyValue> {
    energy_mmd_with(Exec::auto(), x, y)
}

pub fn energy_mmd_with(
    exec: Exec,
    x: &ParticleEnsemble,
    y: &ParticleEnsemble,
) -> Result<DiscrepancyValue> {
    if x.dim() != y.dim() {
        return Err(Error::arg(format!(
            "energy MMD between dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let (x, y) = (&sorted_rows(x), &sorted_rows(y));
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let sxy = match canonical_cmp(x, y) {
        Ordering::Greater => pair_distance_sum(exec, y, x),
        _ => pair_distance_sum(exec, x, y),
    };
    let sxx = pair_distance_sum(exec, x, x);
    let syy = pair_distance_sum(exec, y, y);
    let value = 2.0 * (sxy / (nx * ny)) - (sxx / (nx * nx) + syy / (ny * ny));
    Ok(DiscrepancyValue {
        value: value.max(0.0),
        estimator: Estimator::ExactEmpirical,
        n_x: x.len(),
        n_y: y.len(),
    })
}

/// `sum_j D(f_# rho_j, g_# rho_j)` with `n` samples per density. Both maps
/// see the same base sample, so the value vanishes exactly when `f == g`.
pub fn pushforward_metric<F, G>(
    f: F,
    g: G,
    family: &DensityFamily,
    n: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
    G: Fn(&[f64]) -> Vec<f64> + Sync + Send,
{
    if n == 0 {
        return Err(Error::arg("pushforward metric needs at least one sample"));
    }
    let exec = Exec::auto();
    let mut total = 0.0;
    for rho in family.members() {
        let base = rho.sample(n, rng)?;
        let fx = pushforward_samples_with(exec, &base, &f)?;
        let gx = pushforward_samples_with(exec, &base, &g)?;
        total += energy_mmd_with(exec, &fx, &gx)?.value;
    }
    Ok(total)
}

/// `div(rho v)(x) = rho(x) (<grad log rho(x), v(x)> + div v(x))`.
pub fn weighted_divergence(rho: &DensityModel, v: &dyn VectorField, x: &[f64]) -> Result<f64> {
    check_dim(v, x)?;
    if rho.dim() != x.len() {
        return Err(Error::arg("density and point dimensions differ"));
    }
    let score = rho.grad_log_pdf(x);
    let vx = v.eval(x);
    let transport: f64 = score.iter().zip(&vx).map(|(s, w)| s * w).sum();
    Ok(rho.pdf(x) * (transport + v.divergence(x)))
}

/// `sum_j sqrt(mean_c (div(rho_j v) - div(rho_j w))^2)` over the collocation
/// points `c`.
pub fn divergence_metric(
    v: &dyn VectorField,
    w: &dyn VectorField,
    family: &DensityFamily,
    collocation: &ParticleEnsemble,
) -> Result<f64> {
    let n = collocation.len() as f64;
    let mut total = 0.0;
    for rho in family.members() {
        let mut sq = 0.0;
        for x in collocation.rows() {
            let r = weighted_divergence(rho, v, x)? - weighted_divergence(rho, w, x)?;
            sq += r * r;
        }
        total += (sq / n).sqrt();
    }
    Ok(total)
}
