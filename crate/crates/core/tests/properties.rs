use std::f64::consts::PI;

use proptest::prelude::*;
use transport_recovery::densities::{wrap_angle, DensityModel};
use transport_recovery::embedding::delay_map;
use transport_recovery::fields::{FnField, Lorenz63, PendulumField, VectorField};
use transport_recovery::metrics::{energy_mmd, weighted_divergence};
use transport_recovery::models::{InputFeatures, MlpModel};
use transport_recovery::rng::stream;
use transport_recovery::transport::{
    euler_flow, iterate_pushforward, pushforward_samples, FlowConfig,
};
use transport_recovery::ParticleEnsemble;

fn points(d: usize, max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), 1..max_n)
}

fn ens(rows: &[Vec<f64>]) -> ParticleEnsemble {
    ParticleEnsemble::from_rows(rows).unwrap()
}

fn sorted(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_distance_is_a_metric(
        (a, b, c) in (1usize..4).prop_flat_map(|d| (points(d, 7), points(d, 7), points(d, 7)))
    ) {
        let v = |x: &[Vec<f64>], y: &[Vec<f64>]| energy_mmd(&ens(x), &ens(y)).unwrap().value;
        prop_assert_eq!(v(&a, &b), v(&b, &a));
        prop_assert!(v(&a, &b) >= 0.0);
        prop_assert!(v(&a, &c).sqrt() <= v(&a, &b).sqrt() + v(&b, &c).sqrt() + 1e-12);
    }

    #[test]
    fn energy_vanishes_exactly_on_equal_multisets(a in points(2, 7), b in points(2, 7)) {
        let shuffled: Vec<Vec<f64>> = a.iter().rev().cloned().collect();
        prop_assert_eq!(energy_mmd(&ens(&a), &ens(&shuffled)).unwrap().value, 0.0);
        let equal = sorted(a.clone()) == sorted(b.clone());
        let value = energy_mmd(&ens(&a), &ens(&b)).unwrap().value;
        prop_assert_eq!(value == 0.0, equal);
    }

    #[test]
    fn iterated_pushforward_composes(rows in points(1, 20), c in -4.0..4.0f64, m in 0usize..5) {
        let h = move |x: &[f64]| vec![wrap_angle(x[0] + c)];
        let e0 = ens(&rows.iter().map(|r| vec![wrap_angle(r[0])]).collect::<Vec<_>>());
        let seq = iterate_pushforward(&e0, h, m).unwrap();
        prop_assert_eq!(seq.len(), m + 1);
        let mut cur = e0.clone();
        for step in &seq {
            prop_assert_eq!(step, &cur);
            prop_assert_eq!(step.len(), e0.len());
            cur = pushforward_samples(&cur, h).unwrap();
        }
    }

    #[test]
    fn euler_flow_is_a_semigroup(x in prop::collection::vec(-10.0..10.0f64, 3), k in 1usize..5) {
        let system = Lorenz63::default();
        let one = FlowConfig::new(0.01 * k as f64, 0.01).unwrap();
        let two = FlowConfig::new(0.02 * k as f64, 0.01).unwrap();
        let twice = euler_flow(&system, &euler_flow(&system, &x, &one).unwrap(), &one).unwrap();
        prop_assert_eq!(euler_flow(&system, &x, &two).unwrap(), twice);
    }

    #[test]
    fn weighted_divergence_is_linear(
        x in prop::collection::vec(-1.0..1.0f64, 2),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        mx in -1.0..1.0f64,
        my in -1.0..1.0f64,
    ) {
        let rho = DensityModel::gaussian(vec![mx, my], 0.9).unwrap();
        let w = FnField::new(2, |p: &[f64], out: &mut [f64]| {
            out[0] = p[0] * p[1];
            out[1] = (p[0] - p[1]).cos();
        });
        let combo = FnField::new(2, |p: &[f64], out: &mut [f64]| {
            let v = PendulumField.eval(p);
            out[0] = a * v[0] + b * p[0] * p[1];
            out[1] = a * v[1] + b * (p[0] - p[1]).cos();
        });
        let lhs = weighted_divergence(&rho, &combo, &x).unwrap();
        let rhs = a * weighted_divergence(&rho, &PendulumField, &x).unwrap()
            + b * weighted_divergence(&rho, &w, &x).unwrap();
        // `combo` and `w` use finite-difference divergences
        prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()));
    }

    #[test]
    fn delay_map_extends_by_prefix(x in -PI..PI, c in -3.0..3.0f64, k in 1usize..6, extra in 1usize..4) {
        let y = |p: &[f64]| p[0].sin() + 0.5 * p[0].cos();
        let h = move |p: &[f64]| vec![wrap_angle(p[0] + c)];
        let short = delay_map(y, h, k, &[x]).unwrap();
        let long = delay_map(y, h, k + extra, &[x]).unwrap();
        prop_assert_eq!(&long[..k], &short[..]);
    }

    #[test]
    fn circle_features_join_the_endpoints(seed in any::<u64>()) {
        let model = MlpModel::glorot(&[2, 8, 8, 3], InputFeatures::Circle, &mut stream(seed, "test")).unwrap();
        prop_assert_eq!(model.eval(&[-PI]).unwrap(), model.eval(&[PI]).unwrap());
    }
}
