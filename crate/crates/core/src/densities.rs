//! Closed-form density families: von Mises on the circle and isotropic
//! Gaussians on `R^d`, with log-densities, score functions, samplers and the
//! ratio map used to test whether a family separates points.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::rng::Rng;

const TWO_PI: f64 = 2.0 * PI;

/// Below this concentration the von Mises law is sampled as uniform.
const VM_UNIFORM_CUTOFF: f64 = 1e-6;

/// `(sin x, cos x)` from separate libm calls. Optimized builds otherwise fuse
/// the pair into `sincos`, which can differ in the last bit, and results
/// would depend on the optimization level.
#[inline]
pub fn sin_cos(x: f64) -> (f64, f64) {
    (x.sin(), std::hint::black_box(x).cos())
}

/// Maps an angle to its representative in `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    if (-PI..PI).contains(&x) {
        return x;
    }
    let r = x - TWO_PI * ((x + PI) / TWO_PI).floor();
    if r >= PI {
        r - TWO_PI
    } else if r < -PI {
        r + TWO_PI
    } else {
        r
    }
}

/// Geodesic distance between two angles.
pub fn circle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// `ln I0(x)` for `x >= 0`: ascending series up to 15, asymptotic expansion above.
pub fn log_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x <= 15.0 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum.ln()
    } else {
        // I0(x) ~ e^x / sqrt(2 pi x) * sum_k prod_{i<=k} (2i-1)^2 / (i 8x)
        let mut term = 1.0;
        let mut sum = 1.0;
        for i in 1..30 {
            let c = (2 * i - 1) as f64;
            let next = term * c * c / (i as f64 * 8.0 * x);
            if next > term || next < 1e-17 * sum {
                break;
            }
            term = next;
            sum += term;
        }
        x - 0.5 * (TWO_PI * x).ln() + sum.ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VonMisesParams", into = "VonMisesParams")]
pub struct VonMisesDensity {
    concentration: f64,
    center: f64,
    log_norm: f64,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VonMisesParams {
    concentration: f64,
    center: f64,
}

impl TryFrom<VonMisesParams> for VonMisesDensity {
    type Error = Error;

    fn try_from(p: VonMisesParams) -> Result<Self> {
        Self::new(p.concentration, p.center)
    }
}

impl From<VonMisesDensity> for VonMisesParams {
    fn from(d: VonMisesDensity) -> Self {
        Self {
            concentration: d.concentration,
            center: d.center,
        }
    }
}

impl VonMisesDensity {
    pub fn new(concentration: f64, center: f64) -> Result<Self> {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::arg(format!(
                "von Mises concentration must be positive, got {concentration}"
            )));
        }
        if !center.is_finite() {
            return Err(Error::arg("von Mises center must be finite"));
        }
        Ok(Self {
            concentration,
            center: wrap_angle(center),
            log_norm: (TWO_PI).ln() + log_bessel_i0(concentration),
        })
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        self.concentration * (wrap_angle(x) - self.center).cos() - self.log_norm
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn grad_log_pdf(&self, x: f64) -> f64 {
        -self.concentration * (wrap_angle(x) - self.center).sin()
    }

    /// `n` independent draws wrapped into `[-pi, pi)`, by Best-Fisher rejection.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::arg("sample count must be at least 1"));
        }
        let kappa = self.concentration;
        if kappa < VM_UNIFORM_CUTOFF {
            return Ok((0..n)
                .map(|_| wrap_angle(rng.random_range(-PI..PI)))
                .collect());
        }
        let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
        let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
        let r = (1.0 + rho * rho) / (2.0 * rho);

        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let u3: f64 = rng.random();
            let z = (PI * u1).cos();
            let f = (1.0 + r * z) / (r + z);
            let c = kappa * (r - f);
            let accept = c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0;
            if !accept {
                continue;
            }
            let theta = f.clamp(-1.0, 1.0).acos();
            let signed = if u3 < 0.5 { -theta } else { theta };
            out.push(wrap_angle(self.center + signed));
        }
        Ok(out)
    }
}

/// `N(mean, sigma^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianParams", into = "GaussianParams")]
pub struct IsotropicGaussianDensity {
    mean: Vec<f64>,
    sigma: f64,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianParams {
    mean: Vec<f64>,
    sigma: f64,
}

impl TryFrom<GaussianParams> for IsotropicGaussianDensity {
    type Error = Error;

    fn try_from(p: GaussianParams) -> Result<Self> {
        Self::new(p.mean, p.sigma)
    }
}

impl From<IsotropicGaussianDensity> for GaussianParams {
    fn from(d: IsotropicGaussianDensity) -> Self {
        Self {
            mean: d.mean,
            sigma: d.sigma,
        }
    }
}

impl IsotropicGaussianDensity {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::arg("Gaussian mean must have dimension >= 1"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::arg("Gaussian mean must be finite"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::arg(format!(
                "Gaussian sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { mean, sigma })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        let r2: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        -0.5 * r2 / s2 - 0.5 * self.dim() as f64 * (TWO_PI * s2).ln()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn grad_log_pdf(&self, x: &[f64], out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        for ((o, a), m) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = -(a - m) / s2;
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::arg("sample count must be at least 1"));
        }
        let d = self.dim();
        let mut flat = Vec::with_capacity(n * d);
        for _ in 0..n {
            for m in &self.mean {
                let z: f64 = StandardNormal.sample(rng);
                flat.push(m + self.sigma * z);
            }
        }
        ParticleEnsemble::from_flat(n, d, flat)
    }

    /// Axis-aligned box `mean +- 6.5 sigma`, holding more than `1 - 1e-9` of
    /// the mass for `d <= 3`.
    pub fn support_box(&self) -> Vec<(f64, f64)> {
        let half = 6.5 * self.sigma;
        self.mean.iter().map(|m| (m - half, m + half)).collect()
    }
}

/// Domain on which a density lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// The circle `[-pi, pi)` with endpoints identified.
    Circle,
    /// Flat `R^d`.
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityModel {
    VonMises(VonMisesDensity),
    Gaussian(IsotropicGaussianDensity),
}

impl DensityModel {
    pub fn von_mises(concentration: f64, center: f64) -> Result<Self> {
        VonMisesDensity::new(concentration, center).map(Self::VonMises)
    }

    pub fn gaussian(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        IsotropicGaussianDensity::new(mean, sigma).map(Self::Gaussian)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::VonMises(_) => 1,
            Self::Gaussian(g) => g.dim(),
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Self::VonMises(_) => Domain::Circle,
            Self::Gaussian(_) => Domain::Euclidean,
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::VonMises(v) => v.log_pdf(x[0]),
            Self::Gaussian(g) => g.log_pdf(x),
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Score `grad log rho(x)`.
    pub fn grad_log_pdf(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.grad_log_pdf_into(x, &mut out);
        out
    }

    pub fn grad_log_pdf_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::VonMises(v) => out[0] = v.grad_log_pdf(x[0]),
            Self::Gaussian(g) => g.grad_log_pdf(x, out),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<ParticleEnsemble> {
        match self {
            Self::VonMises(v) => ParticleEnsemble::from_scalars(&v.sample(n, rng)?),
            Self::Gaussian(g) => g.sample(n, rng),
        }
    }
}

/// An ordered, nonempty list of densities on a common domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyParams")]
pub struct DensityFamily {
    members: Vec<DensityModel>,
}

impl DensityFamily {
    pub fn new(members: Vec<DensityModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::arg("density family needs at least one member"))?;
        let (dim, domain) = (first.dim(), first.domain());
        if let Some(j) = members
            .iter()
            .position(|m| m.dim() != dim || m.domain() != domain)
        {
            return Err(Error::arg(format!(
                "family member {j} does not share dimension/domain with member 0"
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DensityModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    pub fn domain(&self) -> Domain {
        self.members[0].domain()
    }

    /// The first `m` members.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.len() {
            return Err(Error::arg(format!(
                "cannot take {m} members of a family of {}",
                self.len()
            )));
        }
        Self::new(self.members[..m].to_vec())
    }

    /// `(rho_1(x)/rho_m(x), ..., rho_{m-1}(x)/rho_m(x))`.
    pub fn quotient_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.len() < 2 {
            return Err(Error::arg("quotient map needs at least two densities"));
        }
        let values: Vec<f64> = self.members.iter().map(|m| m.pdf(x)).collect();
        quotient_values(&values)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyParams {
    members: Vec<DensityModel>,
}

impl TryFrom<FamilyParams> for DensityFamily {
    type Error = Error;

    fn try_from(p: FamilyParams) -> Result<Self> {
        Self::new(p.members)
    }
}

/// Ratios of the leading values to the last one. Every value must be
/// strictly positive and finite.
pub fn quotient_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::arg("quotient map needs at least two values"));
    }
    if let Some(j) = values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!(
            "density {j} is not strictly positive ({})",
            values[j]
        )));
    }
    let last = values[values.len() - 1];
    Ok(values[..values.len() - 1]
        .iter()
        .map(|v| v / last)
        .collect())
}

/// Closed interval `[lo, hi]` from which a parameter is drawn uniformly.
pub type Range = [f64; 2];

fn uniform(rng: &mut Rng, range: Range) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Random von Mises families: `alpha ~ U(concentration)`, `beta ~ U(center)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VonMisesPreset {
    pub concentration: Range,
    pub center: Range,
}

impl VonMisesPreset {
    /// `alpha ~ U[1, 3]`, `beta ~ U[-pi, pi]`.
    pub fn circle_map() -> Self {
        Self {
            concentration: [1.0, 3.0],
            center: [-PI, PI],
        }
    }

    pub fn draw(&self, m: usize, rng: &mut Rng) -> Result<DensityFamily> {
        let members = (0..m)
            .map(|_| {
                let alpha = uniform(rng, self.concentration);
                let beta = uniform(rng, self.center);
                DensityModel::von_mises(alpha, beta)
            })
            .collect::<Result<Vec<_>>>()?;
        DensityFamily::new(members)
    }
}

/// Random isotropic Gaussians with per-axis uniform means and a uniform
/// standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPreset {
    pub mean: Vec<Range>,
    pub sigma: Range,
}

impl GaussianPreset {
    /// Initial law for the Lorenz experiment: `gamma_1, gamma_2 ~ U[-15, 15]`,
    /// `gamma_3 ~ U[20, 40]`, `sigma ~ U[3, 7]`.
    pub fn lorenz_initial() -> Self {
        Self {
            mean: vec![[-15.0, 15.0], [-15.0, 15.0], [20.0, 40.0]],
            sigma: [3.0, 7.0],
        }
    }

    /// Densities for the divergence experiment: `gamma ~ U([-1, 1]^2)`,
    /// `sigma ~ U[0.75, 1.25]`.
    pub fn square_field() -> Self {
        Self {
            mean: vec![[-1.0, 1.0], [-1.0, 1.0]],
            sigma: [0.75, 1.25],
        }
    }

    pub fn draw_one(&self, rng: &mut Rng) -> Result<IsotropicGaussianDensity> {
        let mean = self.mean.iter().map(|r| uniform(rng, *r)).collect();
        let sigma = uniform(rng, self.sigma);
        IsotropicGaussianDensity::new(mean, sigma)
    }

    pub fn draw(&self, m: usize, rng: &mut Rng) -> Result<DensityFamily> {
        let members = (0..m)
            .map(|_| self.draw_one(rng).map(DensityModel::Gaussian))
            .collect::<Result<Vec<_>>>()?;
        DensityFamily::new(members)
    }
}
