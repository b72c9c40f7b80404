mod common;

use bilateral_gee::estimator::{fit_gee1, fit_gee15, score, solve_gee, Gee15Options, GeeOptions};
use bilateral_gee::{materialize, ClusterData, CorrelationKind, CorrelationSpec};
use common::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn independence_matches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..40 {
        let q = rng.random_range(1..=4);
        let p = rng.random_range(0..=3);
        let n = rng.random_range(8..=40);
        let d = random_dataset(&mut rng, n, q, p, false);
        let fit = solve_gee(
            &d.clusters,
            &d.model,
            &CorrelationSpec::Independence,
            None,
            &GeeOptions::default(),
        )
        .unwrap();
        let x = oracle_design(&d.clusters, &d.model);
        let beta = ols(&x, &stacked_y(&d.clusters));
        assert!((&fit.beta_hat - &beta).amax() < 1e-8);
        assert_eq!(fit.coefficient_names, d.model.coefficient_names());
    }
}

#[test]
fn independence_sandwich_is_cluster_robust_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = random_dataset(&mut rng, 30, 3, 2, false);
    let fit = solve_gee(
        &d.clusters,
        &d.model,
        &CorrelationSpec::Independence,
        None,
        &GeeOptions::default(),
    )
    .unwrap();
    let x = oracle_design(&d.clusters, &d.model);
    let y = stacked_y(&d.clusters);
    let e = &y - &x * &fit.beta_hat;
    let bread = (x.transpose() * &x).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
    let mut start = 0;
    for c in &d.clusters {
        let xi = x.rows(start, c.len());
        let s = xi.transpose() * e.rows(start, c.len());
        meat += &s * s.transpose();
        start += c.len();
    }
    let oracle = &bread * meat * &bread;
    assert!(max_abs_diff(&fit.sandwich_cov, &oracle) < 1e-10);
}

fn scaled(clusters: &[ClusterData], c: f64) -> Vec<ClusterData> {
    clusters
        .iter()
        .map(|cl| cl.with_outcome(cl.y() * c).unwrap())
        .collect()
}

#[test]
fn outcome_scaling_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let d = random_dataset(&mut rng, 60, 2, 2, true);
    let c = 3.5;
    let big = scaled(&d.clusters, c);
    for kind in [
        CorrelationKind::Independence,
        CorrelationKind::Exchangeable,
        CorrelationKind::Unstructured,
    ] {
        let a = fit_gee1(&d.clusters, &d.model, kind, &GeeOptions::default()).unwrap();
        let b = fit_gee1(&big, &d.model, kind, &GeeOptions::default()).unwrap();
        assert!(
            (&a.beta_hat * c - &b.beta_hat).amax() < 1e-8 * c,
            "{kind:?}"
        );
        assert!(
            (&a.sandwich_cov * (c * c) - &b.sandwich_cov).amax() < 1e-8 * c * c,
            "{kind:?}"
        );
    }
    let a = fit_gee15(&d.clusters, &d.model, &Gee15Options::default()).unwrap();
    let b = fit_gee15(&big, &d.model, &Gee15Options::default()).unwrap();
    assert!((&a.beta_hat * c - &b.beta_hat).amax() < 1e-7);
    let (aa, ab) = (
        a.alpha.unwrap().alpha.as_array(),
        b.alpha.unwrap().alpha.as_array(),
    );
    for (x, y) in aa.iter().zip(ab) {
        assert!((x - y).abs() < 1e-7);
    }
}

#[test]
fn ear_labels_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = random_dataset(&mut rng, 50, 3, 2, true);
    let swapped: Vec<ClusterData> = d.clusters.iter().map(|c| c.with_swapped_ears()).collect();
    for kind in [CorrelationKind::Independence, CorrelationKind::Exchangeable] {
        let a = fit_gee1(&d.clusters, &d.model, kind, &GeeOptions::default()).unwrap();
        let b = fit_gee1(&swapped, &d.model, kind, &GeeOptions::default()).unwrap();
        assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-9, "{kind:?}");
    }
    let a = fit_gee15(&d.clusters, &d.model, &Gee15Options::default()).unwrap();
    let b = fit_gee15(&swapped, &d.model, &Gee15Options::default()).unwrap();
    assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-8);
}

#[test]
fn structured_fit_solves_its_own_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = random_dataset(&mut rng, 80, 3, 3, false);
    let fit = fit_gee15(&d.clusters, &d.model, &Gee15Options::default()).unwrap();
    assert!(fit.converged);
    let u = score(&d.clusters, &d.model, &fit.correlation, &fit.beta_hat).unwrap();
    assert!(u.amax() < 1e-8);
    // the working correlation of a complete cluster is a valid correlation matrix
    let a = match fit.correlation {
        CorrelationSpec::EarFreq(a) => a,
        ref other => panic!("unexpected {other:?}"),
    };
    let r = materialize(
        &CorrelationSpec::EarFreq(a),
        &[1, 2, 1, 2, 1, 2],
        &[1, 1, 2, 2, 3, 3],
    )
    .unwrap();
    assert!(r.symmetric_eigenvalues().min() > -1e-8);
    assert!(a.as_array().iter().all(|v| (0.0..=1.0).contains(v)));
}
