use std::f64::consts::TAU;

use nalgebra::DVector;
use num_complex::Complex64;
use proptest::prelude::*;
use wpg_core::geodesic::path_energy;
use wpg_core::welding::common_labels;
use wpg_core::{
    compute_weld, make_shape, minimize, minimize_from, DiskMobius, GeodesicConfig, GeodesicResult, ShapeKind,
    WeldingMap,
};

fn configs(labels: &[f64], w0: &WeldingMap, w1: &WeldingMap) -> (DVector<f64>, DVector<f64>) {
    let q0 = DVector::from_iterator(labels.len(), labels.iter().map(|&x| w0.eval(x)));
    let q1 = DVector::from_iterator(labels.len(), labels.iter().map(|&x| w1.eval(x)));
    (q0, q1)
}

/// Coarse solve on 40 slices, then the requested resolution.
fn solve(w0: &WeldingMap, w1: &WeldingMap, m: usize, t: usize) -> GeodesicResult {
    let labels = common_labels(&[w0, w1], m).unwrap();
    let (q0, q1) = configs(&labels, w0, w1);
    let fine = GeodesicConfig {
        time_steps: t,
        ..Default::default()
    };
    let coarse = minimize(
        &q0,
        &q1,
        &GeodesicConfig {
            time_steps: 40,
            ..fine.clone()
        },
    )
    .unwrap();
    if t == 40 {
        return coarse;
    }
    minimize_from(&q0, &q1, Some((&coarse.scheme, &coarse.state.v)), &fine).unwrap()
}

fn ellipse(r: f64) -> WeldingMap {
    compute_weld(&make_shape(ShapeKind::Ellipse(r), 512).unwrap()).unwrap()
}

/// `φ ∘ g` for a circle Möbius map `g`, resampled on `n` points.
fn compose_right(w: &WeldingMap, g: DiskMobius, n: usize) -> WeldingMap {
    let theta: Vec<f64> = (0..n).map(|k| k as f64 * TAU / n as f64).collect();
    let phi: Vec<f64> = theta.iter().map(|&x| w.eval(g.apply_angle(x))).collect();
    WeldingMap::new(&theta, &phi).unwrap()
}

fn circle_map(g: DiskMobius, n: usize) -> WeldingMap {
    compose_right(&WeldingMap::identity(n), g, n)
}

#[test]
fn ellipse_geodesic_has_constant_speed() {
    let r = solve(&ellipse(2.0), &WeldingMap::identity(512), 150, 150);
    assert!(r.converged(), "{:?}", r.stop);
    assert!(r.diagnostics.norm_constancy <= 1e-3, "{}", r.diagnostics.norm_constancy);
    assert!(r.diagnostics.endpoint_residual < 1e-9);
    assert!(r.energy_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn energy_is_right_invariant() {
    let h = ellipse(2.0);
    let g = DiskMobius::new(0.7, Complex64::new(0.2, -0.15)).unwrap();
    let direct = solve(&h, &WeldingMap::identity(512), 150, 40);
    let moved = solve(&compose_right(&h, g, 2048), &circle_map(g, 2048), 150, 40);
    assert!(direct.converged() && moved.converged());
    let rel = (direct.energy() - moved.energy()).abs() / direct.energy();
    assert!(rel < 1e-3, "{} vs {}", direct.energy(), moved.energy());
}

#[test]
fn interior_normalization_does_not_change_the_distance() {
    let h = ellipse(1.5);
    let id = WeldingMap::identity(512);
    let base = solve(&h, &id, 150, 40);
    let m = DiskMobius::new(-1.1, Complex64::new(-0.25, 0.1)).unwrap();
    let moved = solve(&h.compose_interior(m), &id, 150, 40);
    assert!(base.converged() && moved.converged());
    assert!(
        (base.energy() - moved.energy()).abs() < 1e-3,
        "{} vs {}",
        base.energy(),
        moved.energy()
    );
}

#[test]
fn reversed_weld_path_has_the_same_energy() {
    let h = ellipse(1.5);
    let id = WeldingMap::identity(512);
    let labels = common_labels(&[&h, &id], 60).unwrap();
    let (q0, q1) = configs(&labels, &h, &id);
    let config = GeodesicConfig {
        time_steps: 40,
        max_iter: 2000,
        ..Default::default()
    };
    let forward = minimize(&q0, &q1, &config).unwrap();
    let backward = minimize(&q1, &q0, &config).unwrap();
    assert!(forward.converged() && backward.converged());
    let rel = (forward.energy() - backward.energy()).abs() / forward.energy();
    assert!(rel < 1e-6, "{} vs {}", forward.energy(), backward.energy());
}

fn perturbed(m: usize, coeffs: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let q0 = DVector::from_fn(m, |i, _| i as f64 * TAU / m as f64);
    let q1 = DVector::from_fn(m, |i, _| {
        let x = q0[i];
        x + coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * ((k + 2) as f64 * x + k as f64).sin())
            .sum::<f64>()
    });
    (q0, q1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn descent_is_monotone_and_meets_the_endpoint(
        coeffs in prop::collection::vec(-0.03f64..0.03, 1..3),
        m in 10usize..16,
        t in 4usize..9,
    ) {
        let (q0, q1) = perturbed(m, &coeffs);
        let config = GeodesicConfig { time_steps: t, max_iter: 150, ..Default::default() };
        let r = minimize(&q0, &q1, &config).unwrap();
        prop_assert!(r.energy_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(r.diagnostics.endpoint_residual < 1e-9);
        prop_assert!((path_energy(&r.state) - r.energy()).abs() <= 1e-12 * r.energy().max(1.0));
        prop_assert!(r.diagnostics.norm_constancy >= 0.0);
    }

    #[test]
    fn rotating_both_endpoints_preserves_the_energy(
        coeffs in prop::collection::vec(-0.03f64..0.03, 1..3),
        shift in -3.0f64..3.0,
    ) {
        let (q0, q1) = perturbed(12, &coeffs);
        let config = GeodesicConfig { time_steps: 6, max_iter: 150, ..Default::default() };
        let a = minimize(&q0, &q1, &config).unwrap();
        let b = minimize(&q0.add_scalar(shift), &q1.add_scalar(shift), &config).unwrap();
        prop_assert!((a.energy() - b.energy()).abs() <= 1e-6 * a.energy().max(1e-12));
    }
}
