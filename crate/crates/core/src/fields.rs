//! Vector fields used as ground truth and as test fixtures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step for central-difference partial derivatives.
pub const FD_STEP: f64 = 1e-5;

pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    /// `div v(x)`. The default uses central differences with [`FD_STEP`].
    fn divergence(&self, x: &[f64]) -> f64 {
        central_divergence(|p, out| self.eval_into(p, out), self.dim(), x)
    }
}

/// Central-difference divergence of an `R^d -> R^d` map.
pub fn central_divergence(f: impl Fn(&[f64], &mut [f64]), d: usize, x: &[f64]) -> f64 {
    let mut p = x.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut div = 0.0;
    for k in 0..d {
        p[k] = x[k] + FD_STEP;
        f(&p, &mut plus);
        p[k] = x[k] - FD_STEP;
        f(&p, &mut minus);
        p[k] = x[k];
        div += (plus[k] - minus[k]) / (2.0 * FD_STEP);
    }
    div
}

/// The Lorenz-63 system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lorenz63 {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for Lorenz63 {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl VectorField for Lorenz63 {
    fn dim(&self) -> usize {
        3
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let (a, b, c) = (x[0], x[1], x[2]);
        out[0] = self.sigma * (b - a);
        out[1] = a * (self.rho - c) - b;
        out[2] = a * b - self.beta * c;
    }

    fn divergence(&self, _x: &[f64]) -> f64 {
        -self.sigma - 1.0 - self.beta
    }
}

/// `v(x, y) = (y, -sin(4 pi x))` on `[-1, 1]^2`, an undamped pendulum.
/// Divergence free.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PendulumField;

impl VectorField for PendulumField {
    fn dim(&self) -> usize {
        2
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -(4.0 * std::f64::consts::PI * x[0]).sin();
    }

    fn divergence(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// The constant field `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantField(pub Vec<f64>);

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval_into(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }

    fn divergence(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Adapts a closure into a [`VectorField`]; divergence by central differences.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Checks that a field and a point agree in dimension.
pub(crate) fn check_dim(v: &dyn VectorField, x: &[f64]) -> Result<()> {
    if v.dim() != x.len() {
        return Err(Error::arg(format!(
            "field of dimension {} evaluated at a point of dimension {}",
            v.dim(),
            x.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_divergences_match_finite_differences() {
        let l = Lorenz63::default();
        let x = [1.3, -0.2, 24.0];
        let fd = central_divergence(|p, o| l.eval_into(p, o), 3, &x);
        assert!((fd - l.divergence(&x)).abs() < 1e-6);

        let p = PendulumField;
        let fd = central_divergence(|q, o| p.eval_into(q, o), 2, &[0.3, 0.7]);
        assert!(fd.abs() < 1e-9);
    }

    #[test]
    fn fn_field_uses_finite_differences() {
        let v = FnField::new(2, |x: &[f64], o: &mut [f64]| {
            o[0] = x[0] * x[0];
            o[1] = x[0] * x[1];
        });
        // div = 2x + x = 3x
        assert!((v.divergence(&[0.5, 2.0]) - 1.5).abs() < 1e-9);
    }
}
