use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use transport_recovery::densities::{DensityFamily, VonMisesPreset};
use transport_recovery::embedding::{
    circle_grid, quotient_embedding_check, EmbeddingReport, Thresholds,
};
use transport_recovery::experiments::divfield::{self, square_grid, DivfieldConfig, PlanarField};
use transport_recovery::experiments::map1d::{self, target_map, Map1dConfig};
use transport_recovery::fields::PendulumField;
use transport_recovery::metrics::pushforward_metric;
use transport_recovery::models::MlpModel;
use transport_recovery::rng::stream;

#[derive(Debug, Serialize, Deserialize)]
struct QuotientFixture {
    seed: u64,
    family: DensityFamily,
    report: EmbeddingReport,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/quotient_m6.json")
}

fn quotient_fixture(seed: u64) -> QuotientFixture {
    let family = VonMisesPreset::circle_map()
        .draw(6, &mut stream(seed, "embedding.quotient"))
        .unwrap();
    let report =
        quotient_embedding_check(&family, &circle_grid(256), Thresholds::default()).unwrap();
    QuotientFixture {
        seed,
        family,
        report,
    }
}

#[test]
fn quotient_map_of_six_densities_matches_fixture() {
    let stored: QuotientFixture =
        serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap();
    let fresh = quotient_fixture(stored.seed);
    assert_eq!(fresh.family, stored.family);
    assert!(fresh.report.injective_verdict && fresh.report.immersion_verdict);
    assert_eq!(
        fresh.report.injective_verdict,
        stored.report.injective_verdict
    );
    assert_eq!(
        fresh.report.immersion_verdict,
        stored.report.immersion_verdict
    );
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    assert!(
        rel(
            fresh.report.min_separation_ratio,
            stored.report.min_separation_ratio
        ) < 1e-9
    );
    assert!(
        rel(
            fresh.report.min_singular_value,
            stored.report.min_singular_value
        ) < 1e-9
    );
}

#[test]
#[ignore = "rewrites tests/fixtures/quotient_m6.json"]
fn regenerate_quotient_fixture() {
    let text = serde_json::to_string_pretty(&quotient_fixture(0)).unwrap();
    std::fs::write(fixture_path(), text + "\n").unwrap();
}

fn short_map_config() -> Map1dConfig {
    Map1dConfig {
        iterations: 2000,
        ..Map1dConfig::default()
    }
}

#[test]
fn best_so_far_loss_never_increases() {
    let out = map1d::run(&short_map_config(), 3, 100).unwrap();
    let d = divfield::run(
        &DivfieldConfig {
            iterations: 1000,
            ..DivfieldConfig::default()
        },
        3,
        100,
    )
    .unwrap();
    for curve in [&out.loss_curve, &d.loss_curve] {
        assert!(curve.points.len() >= 10);
        for w in curve.points.windows(2) {
            assert!(w[1].best <= w[0].best);
            assert!(w[1].best <= w[1].loss);
        }
    }
}

#[test]
fn trained_map_is_close_in_the_pushforward_metric() {
    let cfg = short_map_config();
    let out = map1d::run(&cfg, 1, 100).unwrap();
    let family = map1d::draw_family(&cfg, 1).unwrap();
    let model: &MlpModel = &out.model;
    let learned = |x: &[f64]| model.eval(x).unwrap();
    let truth = |x: &[f64]| target_map(x[0]).to_vec();
    let d =
        pushforward_metric(truth, learned, &family, 2000, &mut stream(1, "test.metric")).unwrap();
    let per_density = d / family.len() as f64;
    assert!(
        per_density <= 1.1 * out.summary.final_loss,
        "metric {per_density:.3e} vs final loss {:.3e}",
        out.summary.final_loss
    );
    assert_eq!(
        pushforward_metric(truth, truth, &family, 200, &mut stream(1, "test.metric")).unwrap(),
        0.0
    );
}

#[test]
fn independent_runs_at_four_densities_agree() {
    let cfg = DivfieldConfig {
        m: 4,
        ..DivfieldConfig::default()
    };
    let a = divfield::run(&cfg, 11, 1000).unwrap();
    let b = divfield::run(&cfg, 12, 1000).unwrap();
    let (ea, eb) = (
        a.summary.rel_l2_field.unwrap(),
        b.summary.rel_l2_field.unwrap(),
    );
    assert!(ea < 0.2 && eb < 0.2, "errors {ea:.3} {eb:.3}");

    let k = 100;
    let grid = square_grid(k);
    let (va, _) = a.model.eval_with_divergence(grid.view()).unwrap();
    let (vb, _) = b.model.eval_with_divergence(grid.view()).unwrap();
    let (vt, _) = PendulumField.eval_with_divergence(grid.view()).unwrap();
    let diff = (&va - &vb).mapv(|e| e * e).sum().sqrt();
    let norm = vt.mapv(|e| e * e).sum().sqrt();
    let between = diff / norm;
    assert!(
        between <= 2.0 * ea.max(eb),
        "runs differ by {between:.3}, errors {ea:.3} {eb:.3}"
    );
}
