//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `WPG_ACCEPTANCE=1,3,9` restricts the run to the listed criteria.

use std::f64::consts::{PI, TAU};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpg_cli::experiments::{
    angle_sum, contour_files, contour_paths, contour_welds, corner_sweep, ellipse_sweep, linear_fit_residual,
    zero_distance, Case, ANGLE_RATIOS, CORNER_ALPHAS, ELLIPSE_RATIOS,
};
use wpg_cli::run::{write_run, RunManifest, SolverOptions};
use wpg_core::geodesic::{energy_gradient, PathState};
use wpg_core::welding::align_mobius;
use wpg_core::wp_metric::{build_gram, kernel_matrix, KERNEL_SCALE};
use wpg_core::{
    build_quadrature, compute_weld, invert_weld, make_shape, minimal_lift, Basis, ParticleConfig, SchemeKind, ShapeKind,
};

const CONSTANCY_BOUND: f64 = 1e-3;

type Criterion = (usize, fn(&mut Suite));

struct Suite {
    selected: Option<Vec<usize>>,
    results: Vec<(usize, bool, String)>,
    /// `(case, norm constancy)` of every converged geodesic run.
    converged: Vec<(String, f64)>,
    unconverged: Vec<String>,
}

impl Suite {
    fn wants(&self, n: usize) -> bool {
        self.selected.as_ref().is_none_or(|s| s.contains(&n))
    }

    fn report(&mut self, n: usize, pass: bool, detail: String) {
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((n, pass, detail));
    }

    /// Record the runs. Returns whether every case produced a path, and a
    /// note on how many met the stopping rule.
    fn collect(&mut self, cases: &[&Case]) -> (bool, String) {
        let mut solved = true;
        let mut converged = 0;
        for c in cases {
            match &c.run {
                Ok(r) if r.converged() => {
                    converged += 1;
                    self.converged
                        .push((c.name.clone(), r.result.diagnostics.norm_constancy));
                }
                Ok(r) => {
                    println!("  {} did not converge ({:?})", c.name, r.result.stop);
                    self.unconverged.push(c.name.clone());
                }
                Err(e) => {
                    println!("  {} failed: {e}", c.name);
                    solved = false;
                }
            }
        }
        (solved, format!("{converged} of {} runs converged", cases.len()))
    }
}

fn options() -> SolverOptions {
    SolverOptions {
        max_iter: 2000,
        ..SolverOptions::default()
    }
}

fn lengths(cases: &[Case]) -> Vec<f64> {
    cases.iter().map(|c| c.length().unwrap_or(f64::NAN)).collect()
}

fn zero_distance_pairs(suite: &mut Suite) {
    let cases = match zero_distance(&options(), 1) {
        Ok(c) => c,
        Err(e) => return suite.report(1, false, format!("setup failed: {e}")),
    };
    let (ok, note) = suite.collect(&cases.iter().collect::<Vec<_>>());
    let worst = cases
        .iter()
        .map(|c| c.energy().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    suite.report(
        1,
        ok && worst < 1e-6,
        format!("6 pairs at M = T = 150, largest energy {worst:.3e} (< 1e-6); {note}"),
    );
}

fn ellipse_lengths(suite: &mut Suite) {
    let cases = ellipse_sweep(&options(), &ELLIPSE_RATIOS);
    let (ok, note) = suite.collect(&cases.iter().collect::<Vec<_>>());
    let l = lengths(&cases);
    let increasing = l.windows(2).all(|w| w[1] > w[0]);
    let tail: Vec<usize> = (0..ELLIPSE_RATIOS.len())
        .filter(|&k| ELLIPSE_RATIOS[k] >= 3.0)
        .collect();
    let x: Vec<f64> = tail.iter().map(|&k| ELLIPSE_RATIOS[k]).collect();
    let y: Vec<f64> = tail.iter().map(|&k| l[k]).collect();
    let residual = linear_fit_residual(&x, &y);
    let pass = ok && increasing && l[0] < 1e-3 && residual < 0.05;
    suite.report(
        3,
        pass,
        format!(
            "lengths {:?}, increasing {increasing}, L(1) = {:.2e}, fit residual {:.2}% of range; {note}",
            l.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            l[0],
            100.0 * residual
        ),
    );
}

fn angle_sums(suite: &mut Suite) {
    let cases = angle_sum(&options(), &ANGLE_RATIOS);
    let sides: Vec<&Case> = cases.iter().flat_map(|c| c.sides.iter()).collect();
    let (ok, note) = suite.collect(&sides);
    let sums: Vec<f64> = cases.iter().map(|c| c.angle_sum().unwrap_or(f64::NAN)).collect();
    let bounded = sums.iter().all(|&s| s <= PI + 1e-3);
    // sums grow as the aspect ratio decreases toward 1
    let monotone = sums.windows(2).all(|w| w[0] > w[1]);
    suite.report(
        4,
        ok && bounded && monotone,
        format!(
            "angle sums {:?} for aspect {ANGLE_RATIOS:?}, all ≤ π + 1e-3: {bounded}, increasing toward aspect 1: {monotone}; {note}",
            sums.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    );
}

fn corner_lengths(suite: &mut Suite) {
    let cases = corner_sweep(&options(), &CORNER_ALPHAS);
    let (ok, note) = suite.collect(&cases.iter().collect::<Vec<_>>());
    let l = lengths(&cases);
    let decreasing = l.windows(2).all(|w| w[1] < w[0]);
    let ratio = l[0] / l[l.len() - 1];
    suite.report(
        5,
        ok && decreasing && ratio > 2.0,
        format!(
            "lengths {:?} for α {CORNER_ALPHAS:?}, decreasing {decreasing}, L(1.01)/L(3) = {ratio:.3} (> 2); {note}",
            l.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    );
}

fn gradient_oracle(suite: &mut Suite) {
    let (m, t, h) = (8, 5, 1e-6);
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scheme = build_quadrature(SchemeKind::PiecewiseLinear, t).unwrap();
        let q0 = DVector::from_fn(m, |i, _| (i as f64 + rng.random_range(-0.25..0.25)) * TAU / m as f64);
        let q1 = DVector::from_fn(m, |i, _| q0[i] + 0.1 * rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(m, t, |i, _| q1[i] - q0[i] + rng.random_range(-0.05..0.05));
        let state = PathState::new(q0.clone(), q1.clone(), v.clone(), &scheme).unwrap();
        let g = energy_gradient(&state, &scheme);
        for i in 0..m {
            for k in 0..t {
                let energy = |d: f64| {
                    let mut w = v.clone();
                    w[(i, k)] += d;
                    PathState::new(q0.clone(), q1.clone(), w, &scheme).unwrap().energy
                };
                let fd = (energy(h) - energy(-h)) / (2.0 * h);
                worst = worst.max((fd - g[(i, k)]).abs() / g[(i, k)].abs().max(1e-3));
            }
        }
    }
    suite.report(
        6,
        worst < 1e-5,
        format!("10 instances M = 8, T = 5, worst relative error {worst:.2e} (< 1e-5)"),
    );
}

fn norm_oracle(suite: &mut Suite) {
    let c = ParticleConfig::equispaced(128, 0.0).unwrap();
    let v = DVector::from_iterator(128, c.positions().iter().map(|&q| (2.0 * q).sin()));
    let sin2 = minimal_lift(&c, &v, Basis::Greens).unwrap().norm_sq;
    let kernel = DVector::from_iterator(128, c.positions().iter().map(|&q| 0.7 - 1.2 * q.cos() + 2.0 * q.sin()));
    let kernel_norm = minimal_lift(&c, &kernel, Basis::Greens).unwrap().norm_sq;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(6..40);
        let q: Vec<f64> = (0..m)
            .map(|k| (k as f64 + rng.random_range(-0.3..0.3)) * TAU / m as f64)
            .collect();
        let c = ParticleConfig::new(q).unwrap();
        let v = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let ours = minimal_lift(&c, &v, Basis::Greens).unwrap().norm_sq;
        let k = build_gram(&c).unwrap() * KERNEL_SCALE;
        let kinv = k.try_inverse().unwrap();
        let b = kernel_matrix(c.positions());
        let inner = (b.transpose() * &kinv * &b).try_inverse().unwrap();
        let proj = DMatrix::identity(m, m) - &b * inner * b.transpose() * &kinv;
        let explicit = (v.transpose() * kinv * proj * &v)[(0, 0)];
        worst = worst.max((ours - explicit).abs() / explicit.abs());
    }
    let pass = (sin2 - 1.5).abs() < 1e-3 && kernel_norm.abs() < 1e-14 && worst < 1e-8;
    suite.report(
        7,
        pass,
        format!("‖sin 2θ‖² = {sin2:.6}, kernel data {kernel_norm:.1e}, explicit formula worst {worst:.1e}"),
    );
}

fn welding_round_trip(suite: &mut Suite) {
    let w = compute_weld(&make_shape(ShapeKind::Ellipse(2.0), 512).unwrap()).unwrap();
    let back = invert_weld(&w, 512).and_then(|s| compute_weld(&s));
    let round = back.map(|b| align_mobius(&w, &b).sup_error).unwrap_or(f64::INFINITY);
    let circle = compute_weld(&make_shape(ShapeKind::Ellipse(1.0), 512).unwrap())
        .map(|c| c.sup_deviation_from_identity())
        .unwrap_or(f64::INFINITY);
    suite.report(
        8,
        round < 5e-2 && circle < 1e-2,
        format!("ellipse(2) round trip sup error {round:.2e} (< 5e-2), circle deviation {circle:.2e} (< 1e-2)"),
    );
}

fn contour_run(suite: &mut Suite) {
    let dir = tempfile::tempdir().unwrap();
    // a simple non-convex blob in arbitrary units and position
    let n = 400;
    let mut text = String::from("x,y\n");
    for k in 0..n {
        let t = TAU * k as f64 / n as f64;
        let r = 1.0 + 0.25 * (3.0 * t).cos() + 0.1 * (5.0 * t + 0.4).sin();
        text += &format!("{},{}\n", 40.0 + 12.0 * r * t.cos(), -7.0 + 12.0 * r * t.sin());
    }
    std::fs::write(dir.path().join("blob.csv"), text).unwrap();
    let files = contour_files(dir.path()).unwrap();
    let welds = contour_welds(&files, 512);
    let opts = options();
    let cases = contour_paths(&opts, &welds);
    let (ok, _) = suite.collect(&cases.iter().collect::<Vec<_>>());
    let detail = match cases.first().map(|c| &c.run) {
        Some(Ok(run)) => {
            let out = dir.path().join("run");
            let manifest = RunManifest::new("acceptance", Default::default(), &opts, run);
            write_run(&out, run, &manifest).unwrap();
            let text = std::fs::read_to_string(out.join("manifest.json")).unwrap();
            let read: RunManifest = serde_json::from_str(&text).unwrap();
            let d = &read.diagnostics;
            let pass = ok && read.converged && d.norm_constancy <= CONSTANCY_BOUND && d.endpoint_residual < 1e-9;
            Some((
                pass,
                format!(
                    "blob contour to identity: converged {}, constancy {:.2e}, endpoint residual {:.1e} (< 1e-9)",
                    read.converged, d.norm_constancy, d.endpoint_residual
                ),
            ))
        }
        Some(Err(e)) => Some((false, format!("blob contour failed: {e}"))),
        None => None,
    };
    let (pass, detail) = detail.unwrap_or((false, "no contour case".into()));
    suite.report(9, pass, detail);
}

fn constancy(suite: &mut Suite) {
    let worst = suite
        .converged
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = !suite.converged.is_empty() && worst.1 <= CONSTANCY_BOUND;
    suite.report(
        2,
        pass,
        format!(
            "{} converged runs, largest constancy {:.2e} ({}) (≤ 1e-3); not converged and excluded: {:?}",
            suite.converged.len(),
            worst.1,
            worst.0,
            suite.unconverged
        ),
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WPG_LOG", "wpg_cli=info")).init();
    let selected = std::env::var("WPG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut suite = Suite {
        selected,
        results: Vec::new(),
        converged: Vec::new(),
        unconverged: Vec::new(),
    };
    let start = Instant::now();
    let cheap: [Criterion; 3] = [(6, gradient_oracle), (7, norm_oracle), (8, welding_round_trip)];
    let heavy: [Criterion; 5] = [
        (1, zero_distance_pairs),
        (9, contour_run),
        (3, ellipse_lengths),
        (5, corner_lengths),
        (4, angle_sums),
    ];
    for (n, f) in cheap.into_iter().chain(heavy) {
        if suite.wants(n) {
            let t = Instant::now();
            f(&mut suite);
            println!("  ({:.0} s)", t.elapsed().as_secs_f64());
        }
    }
    if suite.wants(2) && !suite.converged.is_empty() {
        constancy(&mut suite);
    }
    suite.results.sort_by_key(|r| r.0);
    println!("\nsummary ({:.0} s):", start.elapsed().as_secs_f64());
    for (n, pass, detail) in &suite.results {
        println!("criterion {n}: {} {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    if suite.results.iter().all(|r| r.1) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
