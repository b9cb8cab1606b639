//! The experiment sweeps. Each case is solved independently; a failing case
//! is recorded and the sweep continues.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use log::info;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpg_core::geodesic::vertex_angle;
use wpg_core::welding::common_labels;
use wpg_core::{compute_weld, make_shape, DiskMobius, ParticleConfig, Shape, ShapeKind, WeldingMap};

use crate::run::{solve, solve_on_labels, GeodesicRun, SolverOptions};
use crate::Failure;

/// Boundary points used for the built-in shape families.
pub const SHAPE_POINTS: usize = 512;

pub const ELLIPSE_RATIOS: [f64; 9] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0];
pub const ANGLE_RATIOS: [f64; 4] = [1.2, 1.5, 2.0, 3.0];
pub const CORNER_ALPHAS: [f64; 6] = [1.01, 1.05, 1.2, 1.5, 2.0, 3.0];

/// Exponent of the triangle used for the zero-distance experiment.
pub const ZERO_DISTANCE_ALPHA: f64 = 2.0;

/// Largest `|a|` of the random interior normalizations.
pub const MAX_MOBIUS_SHIFT: f64 = 0.4;

#[derive(Debug)]
pub struct Case {
    pub name: String,
    pub parameter: f64,
    pub run: Result<GeodesicRun, Failure>,
}

impl Case {
    pub fn energy(&self) -> Option<f64> {
        self.run.as_ref().ok().map(|r| r.result.energy())
    }

    pub fn length(&self) -> Option<f64> {
        self.run.as_ref().ok().map(|r| r.result.length())
    }
}

fn solved(name: String, parameter: f64, run: Result<GeodesicRun, Failure>) -> Case {
    match &run {
        Ok(r) => info!(
            "{name}: E = {:.6e}, L = {:.6}, {} iterations, constancy {:.2e}, {:.1} s",
            r.result.energy(),
            r.result.length(),
            r.result.iterations,
            r.result.diagnostics.norm_constancy,
            r.wall_time
        ),
        Err(e) => info!("{name}: failed: {e}"),
    }
    Case { name, parameter, run }
}

fn weld_of(kind: ShapeKind) -> Result<WeldingMap, Failure> {
    Ok(compute_weld(&make_shape(kind, SHAPE_POINTS)?)?)
}

/// Random interior normalizations of one weld.
pub fn mobius_family(count: usize, seed: u64) -> Vec<DiskMobius> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r = MAX_MOBIUS_SHIFT * rng.random::<f64>().sqrt();
        let a = Complex64::from_polar(r, rng.random_range(0.0..TAU));
        let rotation = rng.random_range(-PI..PI);
        out.push(DiskMobius::new(rotation, a).expect("|a| < 1"));
    }
    out
}

/// Pairwise geodesics between four welds of a rounded triangle that differ
/// only by interior Möbius normalizations.
pub fn zero_distance(options: &SolverOptions, seed: u64) -> Result<Vec<Case>, Failure> {
    let base = weld_of(ShapeKind::RoundedTriangle(ZERO_DISTANCE_ALPHA))?;
    let welds: Vec<WeldingMap> = mobius_family(4, seed)
        .into_iter()
        .map(|m| base.compose_interior(m))
        .collect();
    let mut cases = Vec::new();
    for i in 0..welds.len() {
        for j in i + 1..welds.len() {
            let run = solve(&welds[i], &welds[j], options);
            cases.push(solved(format!("pair_{i}_{j}"), (10 * i + j) as f64, run));
        }
    }
    Ok(cases)
}

/// Geodesics from ellipses of the given aspect ratios to the identity.
pub fn ellipse_sweep(options: &SolverOptions, ratios: &[f64]) -> Vec<Case> {
    let id = WeldingMap::identity(SHAPE_POINTS);
    ratios
        .iter()
        .map(|&r| {
            let run = weld_of(ShapeKind::Ellipse(r)).and_then(|w| solve(&w, &id, options));
            solved(format!("ellipse_{r}"), r, run)
        })
        .collect()
}

/// Geodesics from rounded triangles of the given corner exponents to the
/// identity.
pub fn corner_sweep(options: &SolverOptions, alphas: &[f64]) -> Vec<Case> {
    let id = WeldingMap::identity(SHAPE_POINTS);
    alphas
        .iter()
        .map(|&a| {
            let run = weld_of(ShapeKind::RoundedTriangle(a)).and_then(|w| solve(&w, &id, options));
            solved(format!("corner_{a}"), a, run)
        })
        .collect()
}

/// A geodesic triangle between an ellipse and its rotations by `±2π/3`.
#[derive(Debug)]
pub struct AngleCase {
    pub ratio: f64,
    /// Sides `0→1`, `1→2`, `2→0`.
    pub sides: Vec<Case>,
    pub angles: Option<[f64; 3]>,
}

impl AngleCase {
    pub fn angle_sum(&self) -> Option<f64> {
        self.angles.map(|a| a.iter().sum())
    }
}

fn triangle_angles(labels: &[f64], welds: &[WeldingMap], sides: &[GeodesicRun]) -> Result<[f64; 3], Failure> {
    let mut angles = [0.0; 3];
    for (i, angle) in angles.iter_mut().enumerate() {
        // outgoing side i → i+1, and the reversed incoming side i−1 → i
        let outgoing = sides[i].initial_velocity();
        let incoming = -sides[(i + 2) % 3].final_velocity();
        let q: Vec<f64> = labels.iter().map(|&x| welds[i].eval(x)).collect();
        let config = ParticleConfig::new(q)?;
        *angle = vertex_angle(&config, &outgoing, &incoming)?;
    }
    Ok(angles)
}

fn angle_case(options: &SolverOptions, ratio: f64) -> Result<AngleCase, Failure> {
    let shape = make_shape(ShapeKind::Ellipse(ratio), SHAPE_POINTS)?;
    let welds = [0.0, TAU / 3.0, -TAU / 3.0]
        .iter()
        .map(|&rot| compute_weld(&shape.rotated(rot)))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&WeldingMap> = welds.iter().collect();
    let labels = common_labels(&refs, options.particles)?;
    let sides: Vec<Case> = (0..3)
        .map(|i| {
            let j = (i + 1) % 3;
            let run = solve_on_labels(&labels, &welds[i], &welds[j], options);
            solved(format!("angle_{ratio}_side_{i}{j}"), ratio, run)
        })
        .collect();
    let runs: Option<Vec<GeodesicRun>> = sides.iter().map(|c| c.run.as_ref().ok().cloned()).collect();
    let angles = match runs.map(|r| triangle_angles(&labels, &welds, &r)) {
        Some(Ok(a)) => {
            info!("angle_{ratio}: angles {a:?}, sum {:.6}", a.iter().sum::<f64>());
            Some(a)
        }
        Some(Err(e)) => {
            info!("angle_{ratio}: vertex angles failed: {e}");
            None
        }
        None => None,
    };
    Ok(AngleCase { ratio, sides, angles })
}

/// Geodesic triangles for each aspect ratio.
pub fn angle_sum(options: &SolverOptions, ratios: &[f64]) -> Vec<AngleCase> {
    ratios
        .iter()
        .map(|&ratio| {
            angle_case(options, ratio).unwrap_or_else(|e| AngleCase {
                ratio,
                sides: vec![solved(format!("angle_{ratio}"), ratio, Err(e))],
                angles: None,
            })
        })
        .collect()
}

/// Contour files (`*.csv` with an `x,y` header) in a directory, sorted.
pub fn contour_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Welds of user-supplied contours, resampled by arclength to `points`.
pub fn contour_welds(files: &[PathBuf], points: usize) -> Vec<(String, Result<WeldingMap, Failure>)> {
    files
        .iter()
        .map(|f| {
            let name = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let weld = wpg_core::io::read_shape(f)
                .and_then(|s: Shape| s.resampled(points))
                .and_then(|s| compute_weld(&s))
                .map_err(Failure::from);
            (name, weld)
        })
        .collect()
}

/// Each contour to the identity, then every pair of contours.
pub fn contour_paths(options: &SolverOptions, welds: &[(String, Result<WeldingMap, Failure>)]) -> Vec<Case> {
    let id = WeldingMap::identity(SHAPE_POINTS);
    let mut cases = Vec::new();
    for (k, (name, w)) in welds.iter().enumerate() {
        let run = match w {
            Ok(w) => solve(w, &id, options),
            Err(e) => Err(Failure::Other(format!("weld failed: {e}"))),
        };
        cases.push(solved(format!("{name}_to_identity"), k as f64, run));
    }
    for i in 0..welds.len() {
        for j in i + 1..welds.len() {
            if let (Ok(a), Ok(b)) = (&welds[i].1, &welds[j].1) {
                let run = solve(a, b, options);
                cases.push(solved(
                    format!("{}_to_{}", welds[i].0, welds[j].0),
                    (100 * i + j) as f64,
                    run,
                ));
            }
        }
    }
    cases
}

/// Least-squares line through `(x, y)`; returns the largest residual
/// divided by the fitted range over the data.
pub fn linear_fit_residual(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let fit = |a: f64| my + slope * (a - mx);
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (fit(hi) - fit(lo)).abs();
    let worst = x.iter().zip(y).map(|(&a, &b)| (b - fit(a)).abs()).fold(0.0, f64::max);
    worst / range
}
