//! Numerical evidence that a map is an embedding: injectivity through a
//! scale-free separation ratio and immersion through the smallest singular
//! value of a finite-difference Jacobian. Passing the check on a finite grid
//! is evidence, not a certificate.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::densities::{circle_distance, DensityFamily, DensityModel, Domain};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::metrics::euclid;
use crate::parallel::{map_indexed, Exec};
use crate::transport::{cov_density, quantile};

/// Step for the central-difference Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub min_separation_ratio: f64,
    pub min_singular_value: f64,
    pub injective_verdict: bool,
    pub immersion_verdict: bool,
    pub n_test_points: usize,
}

impl EmbeddingReport {
    pub fn is_embedding(&self) -> bool {
        self.injective_verdict && self.immersion_verdict
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub sep_threshold: f64,
    pub sv_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            sep_threshold: 1e-3,
            sv_threshold: 1e-4,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.sep_threshold > 0.0 && self.sv_threshold > 0.0) {
            return Err(Error::arg("embedding thresholds must be positive"));
        }
        Ok(())
    }
}

fn domain_distance(domain: Domain, a: &[f64], b: &[f64]) -> f64 {
    match domain {
        Domain::Circle => circle_distance(a[0], b[0]),
        Domain::Euclidean => euclid(a, b),
    }
}

/// `(y(x), y(h(x)), ..., y(h^{k-1}(x)))`.
pub fn delay_map<Y, H>(y: Y, h: H, k: usize, x: &[f64]) -> Result<Vec<f64>>
where
    Y: Fn(&[f64]) -> f64,
    H: Fn(&[f64]) -> Vec<f64>,
{
    if k == 0 {
        return Err(Error::arg("delay map needs k >= 1"));
    }
    let mut out = Vec::with_capacity(k);
    let mut p = x.to_vec();
    out.push(y(&p));
    for _ in 1..k {
        p = h(&p);
        out.push(y(&p));
    }
    Ok(out)
}

/// Separation ratio and immersion check of `y` over `test_points`.
pub fn check_embedding<Y>(
    y: Y,
    test_points: &[Vec<f64>],
    domain: Domain,
    thresholds: Thresholds,
) -> Result<EmbeddingReport>
where
    Y: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    check_embedding_with(Exec::auto(), y, test_points, domain, thresholds)
}

pub fn check_embedding_with<Y>(
    exec: Exec,
    y: Y,
    test_points: &[Vec<f64>],
    domain: Domain,
    thresholds: Thresholds,
) -> Result<EmbeddingReport>
where
    Y: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let n = test_points.len();
    if n < 2 {
        return Err(Error::arg("embedding check needs at least two test points"));
    }
    thresholds.validate()?;

    let images = map_indexed(exec, n, |i| y(&test_points[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let row_min = map_indexed(exec, n, |i| {
        let mut best = f64::INFINITY;
        for j in i + 1..n {
            let dist = domain_distance(domain, &test_points[i], &test_points[j]);
            if dist > 0.0 {
                best = best.min(euclid(&images[i], &images[j]) / dist);
            }
        }
        best
    });
    let min_separation_ratio = row_min.into_iter().fold(f64::INFINITY, f64::min);

    let svs = map_indexed(exec, n, |i| smallest_singular_value(&y, &test_points[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let min_singular_value = svs.into_iter().fold(f64::INFINITY, f64::min);

    Ok(EmbeddingReport {
        min_separation_ratio,
        min_singular_value,
        injective_verdict: min_separation_ratio >= thresholds.sep_threshold,
        immersion_verdict: min_singular_value >= thresholds.sv_threshold,
        n_test_points: n,
    })
}

fn smallest_singular_value<Y>(y: &Y, x: &[f64]) -> Result<f64>
where
    Y: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut p = x.to_vec();
    let mut columns = Vec::with_capacity(d);
    for k in 0..d {
        p[k] = x[k] + JACOBIAN_STEP;
        let plus = y(&p)?;
        p[k] = x[k] - JACOBIAN_STEP;
        let minus = y(&p)?;
        p[k] = x[k];
        columns.push(
            plus.iter()
                .zip(&minus)
                .map(|(a, b)| (a - b) / (2.0 * JACOBIAN_STEP))
                .collect::<Vec<_>>(),
        );
    }
    let rows = columns[0].len();
    if rows < d {
        return Ok(0.0);
    }
    let jac = DMatrix::from_fn(rows, d, |r, c| columns[c][r]);
    let sv = jac.singular_values();
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::non_finite("Jacobian singular values", 0));
    }
    Ok(min)
}

/// [`check_embedding`] applied to the quotient map of `family`.
pub fn quotient_embedding_check(
    family: &DensityFamily,
    test_points: &[Vec<f64>],
    thresholds: Thresholds,
) -> Result<EmbeddingReport> {
    if family.len() < 2 {
        return Err(Error::arg("quotient embedding check needs m >= 2"));
    }
    check_embedding(
        |x| family.quotient_map(x),
        test_points,
        family.domain(),
        thresholds,
    )
}

fn iterate<H: Fn(&[f64]) -> Vec<f64>>(h: &H, times: usize, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    for _ in 0..times {
        p = h(&p);
    }
    p
}

fn check_inverse<H, Hi>(
    h: &H,
    h_inverse: &Hi,
    test_points: &[Vec<f64>],
    domain: Domain,
) -> Result<()>
where
    H: Fn(&[f64]) -> Vec<f64>,
    Hi: Fn(&[f64]) -> Vec<f64>,
{
    for (i, x) in test_points.iter().enumerate() {
        let back = h(&h_inverse(x));
        if domain_distance(domain, &back, x) > 1e-8 {
            return Err(Error::arg(format!(
                "h_inverse does not invert h at test point {i}"
            )));
        }
    }
    Ok(())
}

/// Max deviation between the coordinate-reversed delay map of `(y, h)`
/// evaluated at `h^{-(k-1)}(x)` and the delay map of `(y, h^{-1})` at `x`.
pub fn reversed_delay_identity<Y, H, Hi>(
    y: Y,
    h: H,
    h_inverse: Hi,
    k: usize,
    test_points: &[Vec<f64>],
    domain: Domain,
) -> Result<f64>
where
    Y: Fn(&[f64]) -> f64,
    H: Fn(&[f64]) -> Vec<f64>,
    Hi: Fn(&[f64]) -> Vec<f64>,
{
    check_inverse(&h, &h_inverse, test_points, domain)?;
    let mut worst: f64 = 0.0;
    for x in test_points {
        let start = iterate(&h_inverse, k.saturating_sub(1), x);
        let mut forward = delay_map(&y, &h, k, &start)?;
        forward.reverse();
        let backward = delay_map(&y, &h_inverse, k, x)?;
        for (a, b) in forward.iter().zip(&backward) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Max over `j = 1..m-1` and test points of
/// `|rho_j(x) / rho_{j+1}(x) - psi(h^{-(j-1)}(x))|`, where
/// `rho_j = (h^{j-1})_# rho_1` by change of variables and
/// `psi = rho_1 / h_# rho_1`. `h` must preserve volume.
pub fn quotient_cancellation_residual<H, Hi>(
    rho1: &DensityModel,
    h: H,
    h_inverse: Hi,
    m: usize,
    test_points: &[Vec<f64>],
) -> Result<f64>
where
    H: Fn(&[f64]) -> Vec<f64>,
    Hi: Fn(&[f64]) -> Vec<f64>,
{
    if m < 2 {
        return Err(Error::arg("quotient cancellation needs m >= 2"));
    }
    check_inverse(&h, &h_inverse, test_points, rho1.domain())?;
    let unit = |_: &[f64]| 1.0;
    let h_inverse = &h_inverse;
    let snapshot =
        |j: usize| cov_density(rho1, move |x: &[f64]| iterate(h_inverse, j - 1, x), unit);
    let pushed_once = cov_density(rho1, |x: &[f64]| h_inverse(x), unit);
    let psi = |x: &[f64]| -> Result<f64> { Ok(rho1.pdf(x) / pushed_once.pdf(x)?) };

    let mut worst: f64 = 0.0;
    for j in 1..m {
        let (rho_j, rho_next) = (snapshot(j), snapshot(j + 1));
        for x in test_points {
            let ratio = rho_j.pdf(x)? / rho_next.pdf(x)?;
            let pulled = iterate(h_inverse, j - 1, x);
            worst = worst.max((ratio - psi(&pulled)?).abs());
        }
    }
    Ok(worst)
}

/// `n` equally spaced angles in `[-pi, pi)`.
pub fn circle_grid(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| vec![-PI + 2.0 * PI * i as f64 / n as f64])
        .collect()
}

/// `n` equally spaced points in `[lo, hi]`, both endpoints included.
pub fn line_grid(n: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    (0..n)
        .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
        .collect()
}

/// Tensor grid of `per_axis` points per coordinate over `[lo, hi]^d`.
pub fn cube_grid(per_axis: usize, d: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = line_grid(per_axis, lo, hi)
        .into_iter()
        .map(|p| p[0])
        .collect();
    tensor(&vec![axis; d])
}

/// Tensor grid of per-coordinate quantiles of `data`, at the levels
/// `(i + 0.5) / per_axis`.
pub fn quantile_grid(data: &ParticleEnsemble, per_axis: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = (0..data.dim())
        .map(|k| {
            let mut col: Vec<f64> = data.rows().map(|r| r[k]).collect();
            col.sort_by(f64::total_cmp);
            (0..per_axis)
                .map(|i| quantile(&col, (i as f64 + 0.5) / per_axis as f64))
                .collect()
        })
        .collect();
    tensor(&axes)
}

fn tensor(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{wrap_angle, VonMisesPreset};
    use crate::rng::stream;

    fn th() -> Thresholds {
        Thresholds::default()
    }

    fn circle_embedding(x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![x[0].sin(), x[0].cos()])
    }

    #[test]
    fn delay_examples() {
        let y = |x: &[f64]| x[0];
        assert_eq!(
            delay_map(y, |x| vec![x[0] + 1.0], 3, &[0.0]).unwrap(),
            vec![0.0, 1.0, 2.0]
        );
        assert_eq!(
            delay_map(y, |x| x.to_vec(), 4, &[0.7]).unwrap(),
            vec![0.7; 4]
        );
        assert_eq!(
            delay_map(y, |x| vec![x[0] * 3.0], 1, &[0.7]).unwrap(),
            vec![0.7]
        );
        assert!(delay_map(y, |x| x.to_vec(), 0, &[0.7]).is_err());
    }

    #[test]
    fn delay_prefix_extension() {
        let y = |x: &[f64]| x[0].sin() + 0.2 * x[0].cos();
        let h = |x: &[f64]| vec![wrap_angle(x[0] * 1.3 + 0.4)];
        for x in [-2.0, 0.1, 3.0] {
            let short = delay_map(y, h, 3, &[x]).unwrap();
            let long = delay_map(y, h, 7, &[x]).unwrap();
            assert_eq!(short[..], long[..3]);
        }
    }

    #[test]
    fn classical_fixtures() {
        let grid = circle_grid(256);
        let r = check_embedding(circle_embedding, &grid, Domain::Circle, th()).unwrap();
        assert!(r.injective_verdict && r.immersion_verdict, "{r:?}");
        assert_eq!(r.n_test_points, 256);

        let r = check_embedding(|x| Ok(vec![x[0].sin()]), &grid, Domain::Circle, th()).unwrap();
        assert!(!r.injective_verdict, "{r:?}");

        let line = line_grid(257, -1.0, 1.0);
        let r =
            check_embedding(|x| Ok(vec![x[0].powi(3)]), &line, Domain::Euclidean, th()).unwrap();
        assert!(!r.immersion_verdict, "{r:?}");
    }

    #[test]
    fn check_needs_two_points() {
        let one = circle_grid(1);
        assert!(matches!(
            check_embedding(circle_embedding, &one, Domain::Circle, th()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn verdicts_follow_thresholds() {
        let grid = circle_grid(64);
        let base = check_embedding(circle_embedding, &grid, Domain::Circle, th()).unwrap();
        let strict = Thresholds {
            sep_threshold: base.min_separation_ratio * 1.01,
            sv_threshold: base.min_singular_value * 1.01,
        };
        let r = check_embedding(circle_embedding, &grid, Domain::Circle, strict).unwrap();
        assert_eq!(r.min_separation_ratio, base.min_separation_ratio);
        assert!(!r.injective_verdict && !r.immersion_verdict);
    }

    #[test]
    fn quotient_check_degenerate_families() {
        let vm = DensityModel::von_mises(2.0, 0.5).unwrap();
        let same = DensityFamily::new(vec![vm; 3]).unwrap();
        let r = quotient_embedding_check(&same, &circle_grid(128), th()).unwrap();
        assert!(!r.injective_verdict);

        let pair = VonMisesPreset::circle_map()
            .draw(2, &mut stream(3, "pair"))
            .unwrap();
        let r = quotient_embedding_check(&pair, &circle_grid(128), th()).unwrap();
        assert_eq!(r.n_test_points, 128);

        let single = pair.truncated(1).unwrap();
        assert!(quotient_embedding_check(&single, &circle_grid(8), th()).is_err());
    }

    #[test]
    fn reversal_and_scaling_preserve_verdicts() {
        let grid = circle_grid(256);
        let fam = VonMisesPreset::circle_map()
            .draw(6, &mut stream(21, "fam"))
            .unwrap();
        let base = quotient_embedding_check(&fam, &grid, th()).unwrap();
        let reversed = check_embedding(
            |x| {
                fam.quotient_map(x).map(|mut q| {
                    q.reverse();
                    q
                })
            },
            &grid,
            Domain::Circle,
            th(),
        )
        .unwrap();
        assert_eq!(
            (base.injective_verdict, base.immersion_verdict),
            (reversed.injective_verdict, reversed.immersion_verdict)
        );
        let scales = [0.5, 2.0, 1.5, 0.8, 1.1];
        let scaled = check_embedding(
            |x| {
                fam.quotient_map(x)
                    .map(|q| q.iter().zip(&scales).map(|(a, s)| a * s).collect())
            },
            &grid,
            Domain::Circle,
            th(),
        )
        .unwrap();
        assert_eq!(
            (base.injective_verdict, base.immersion_verdict),
            (scaled.injective_verdict, scaled.immersion_verdict)
        );
    }

    #[test]
    fn log_compatibility_on_fixture_families() {
        let grid = circle_grid(256);
        for seed in 0..4 {
            let fam = VonMisesPreset::circle_map()
                .draw(6, &mut stream(seed, "fam"))
                .unwrap();
            let plain = quotient_embedding_check(&fam, &grid, th()).unwrap();
            let logged = check_embedding(
                |x| {
                    fam.quotient_map(x)
                        .map(|q| q.iter().map(|v| v.ln()).collect())
                },
                &grid,
                Domain::Circle,
                th(),
            )
            .unwrap();
            assert_eq!(
                plain.injective_verdict, logged.injective_verdict,
                "seed {seed}"
            );
            assert_eq!(
                plain.immersion_verdict, logged.immersion_verdict,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn reversed_delay_examples() {
        let grid = circle_grid(64);
        let y = |x: &[f64]| x[0].sin();
        let id = |x: &[f64]| x.to_vec();
        assert_eq!(
            reversed_delay_identity(y, id, id, 5, &grid, Domain::Circle).unwrap(),
            0.0
        );

        let c = 0.9;
        let rot = move |x: &[f64]| vec![wrap_angle(x[0] + c)];
        let unrot = move |x: &[f64]| vec![wrap_angle(x[0] - c)];
        let dev = reversed_delay_identity(y, rot, unrot, 4, &grid, Domain::Circle).unwrap();
        assert!(dev < 1e-10, "{dev}");
        assert_eq!(
            reversed_delay_identity(y, rot, unrot, 1, &grid, Domain::Circle).unwrap(),
            0.0
        );

        let wrong = move |x: &[f64]| vec![wrap_angle(x[0] - 2.0 * c)];
        assert!(matches!(
            reversed_delay_identity(y, rot, wrong, 4, &grid, Domain::Circle),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn quotient_cancellation_examples() {
        let grid = circle_grid(128);
        let rho = DensityModel::von_mises(2.2, -0.4).unwrap();
        let id = |x: &[f64]| x.to_vec();
        assert_eq!(
            quotient_cancellation_residual(&rho, id, id, 4, &grid).unwrap(),
            0.0
        );

        let c = 0.7;
        let rot = move |x: &[f64]| vec![wrap_angle(x[0] + c)];
        let unrot = move |x: &[f64]| vec![wrap_angle(x[0] - c)];
        for m in [2, 5] {
            let r = quotient_cancellation_residual(&rho, rot, unrot, m, &grid).unwrap();
            assert!(r < 1e-10, "m={m}: {r}");
        }
        // closed-form snapshots rho_j(x) = rho_1(x - (j-1)c), independent of cov_density
        for j in 1..5 {
            for x in &grid {
                let closed = rho.pdf(&[x[0] - (j - 1) as f64 * c]);
                let viaiter = rho.pdf(&iterate(&unrot, j - 1, x));
                assert!((closed - viaiter).abs() < 1e-12);
            }
        }
        assert!(quotient_cancellation_residual(&rho, rot, unrot, 1, &grid).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(cube_grid(3, 2, -1.0, 1.0).len(), 9);
        assert_eq!(cube_grid(3, 2, -1.0, 1.0)[4], vec![0.0, 0.0]);
        let e = ParticleEnsemble::from_rows(&[[0.0, 10.0], [1.0, 20.0], [2.0, 30.0]]).unwrap();
        let q = quantile_grid(&e, 2);
        assert_eq!(q.len(), 4);
        assert_eq!(q[0], vec![0.5, 15.0]);
    }

    #[test]
    fn parallel_scan_matches_sequential() {
        let grid = circle_grid(300);
        let fam = VonMisesPreset::circle_map()
            .draw(6, &mut stream(4, "fam"))
            .unwrap();
        let f = |x: &[f64]| fam.quotient_map(x);
        let a = check_embedding_with(Exec::Sequential, f, &grid, Domain::Circle, th()).unwrap();
        let b = check_embedding_with(Exec::Parallel, f, &grid, Domain::Circle, th()).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn appending_coordinates_keeps_injectivity(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1u32..5) {
                let grid = circle_grid(96);
                let base = check_embedding(circle_embedding, &grid, Domain::Circle, th()).unwrap();
                let extended = check_embedding(
                    |x| Ok(vec![x[0].sin(), x[0].cos(), a * (k as f64 * x[0]).sin() + b]),
                    &grid,
                    Domain::Circle,
                    th(),
                ).unwrap();
                prop_assert!(base.injective_verdict);
                prop_assert!(extended.injective_verdict);
                prop_assert!(extended.min_separation_ratio >= base.min_separation_ratio);
            }
        }
    }
}
