//! Geodesic runs between welds and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use wpg_core::geodesic::StopReason;
use wpg_core::welding::common_labels;
use wpg_core::{minimize, minimize_from, GeodesicConfig, GeodesicResult, SchemeKind, WeldingMap};

use crate::Failure;

/// Solver settings shared by all commands.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub particles: usize,
    pub time_steps: usize,
    pub scheme: SchemeKind,
    pub tol_obj: f64,
    pub tol_grad: f64,
    pub max_iter: usize,
    /// Time steps of a coarse solve used to initialize the fine one; 0 or
    /// any value not below `time_steps` disables it.
    pub coarse_steps: usize,
}

/// Default coarse level for the warm start.
pub const COARSE_STEPS: usize = 40;

impl Default for SolverOptions {
    fn default() -> Self {
        let g = GeodesicConfig::default();
        SolverOptions {
            particles: 150,
            time_steps: g.time_steps,
            scheme: g.scheme,
            tol_obj: g.tol_obj,
            tol_grad: g.tol_grad,
            max_iter: g.max_iter,
            coarse_steps: COARSE_STEPS,
        }
    }
}

impl SolverOptions {
    pub fn geodesic_config(&self) -> GeodesicConfig {
        GeodesicConfig {
            scheme: self.scheme,
            time_steps: self.time_steps,
            max_iter: self.max_iter,
            tol_obj: self.tol_obj,
            tol_grad: self.tol_grad,
            ..GeodesicConfig::default()
        }
    }

    fn warm_start(&self) -> bool {
        self.coarse_steps > 0 && self.coarse_steps < self.time_steps
    }
}

/// A solved geodesic together with the particle labels it was sampled on.
#[derive(Debug, Clone)]
pub struct GeodesicRun {
    pub labels: Vec<f64>,
    pub result: GeodesicResult,
    /// Iterations spent on the coarse level, if one was used.
    pub coarse_iterations: Option<usize>,
    pub wall_time: f64,
}

impl GeodesicRun {
    pub fn converged(&self) -> bool {
        self.result.converged()
    }

    /// Velocity at `s = 0`, sampled at the start configuration.
    pub fn initial_velocity(&self) -> DVector<f64> {
        self.result.initial_velocity()
    }

    /// Velocity at `s = 1`, sampled at the end configuration.
    pub fn final_velocity(&self) -> DVector<f64> {
        self.result.scheme.velocity_at(&self.result.state.v, 1.0)
    }
}

pub fn solve_on_labels(
    labels: &[f64],
    w0: &WeldingMap,
    w1: &WeldingMap,
    options: &SolverOptions,
) -> Result<GeodesicRun, Failure> {
    let q0 = DVector::from_iterator(labels.len(), labels.iter().map(|&x| w0.eval(x)));
    let qt1 = DVector::from_iterator(labels.len(), labels.iter().map(|&x| w1.eval(x)));
    let start = Instant::now();
    let config = options.geodesic_config();
    let (result, coarse_iterations) = if options.warm_start() {
        let coarse = GeodesicConfig {
            time_steps: options.coarse_steps,
            ..config.clone()
        };
        let first = minimize(&q0, &qt1, &coarse)?;
        let fine = minimize_from(&q0, &qt1, Some((&first.scheme, &first.state.v)), &config)?;
        (fine, Some(first.iterations))
    } else {
        (minimize(&q0, &qt1, &config)?, None)
    };
    Ok(GeodesicRun {
        labels: labels.to_vec(),
        result,
        coarse_iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Geodesic from `w0` to `w1` on particles placed for the pair.
pub fn solve(w0: &WeldingMap, w1: &WeldingMap, options: &SolverOptions) -> Result<GeodesicRun, Failure> {
    let labels = common_labels(&[w0, w1], options.particles)?;
    solve_on_labels(&labels, w0, w1, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub tol_obj: f64,
    pub tol_grad: f64,
    pub max_iter: usize,
    pub coarse_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDiagnostics {
    pub norm_constancy: f64,
    pub projected_gradient_norm: f64,
    pub endpoint_residual: f64,
    pub gradient_alignment: f64,
}

/// Record of one geodesic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: BTreeMap<String, String>,
    pub particles: usize,
    pub time_steps: usize,
    pub scheme: String,
    pub tolerances: Tolerances,
    pub iterations: usize,
    pub coarse_iterations: Option<usize>,
    pub energy: f64,
    pub length: f64,
    pub stop: String,
    pub converged: bool,
    pub diagnostics: ManifestDiagnostics,
    pub energy_history: Vec<f64>,
    pub wall_time_seconds: f64,
}

pub fn stop_name(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "converged",
        StopReason::ZeroEnergy => "zero_energy",
        StopReason::Stalled => "stalled",
        StopReason::MaxIterReached => "max_iter_reached",
    }
}

impl RunManifest {
    pub fn new(
        command: &str,
        parameters: BTreeMap<String, String>,
        options: &SolverOptions,
        run: &GeodesicRun,
    ) -> Self {
        let r = &run.result;
        let d = &r.diagnostics;
        RunManifest {
            command: command.to_string(),
            parameters,
            particles: run.labels.len(),
            time_steps: r.scheme.len(),
            scheme: r.scheme.kind().to_string(),
            tolerances: Tolerances {
                tol_obj: options.tol_obj,
                tol_grad: options.tol_grad,
                max_iter: options.max_iter,
                coarse_steps: if options.warm_start() { options.coarse_steps } else { 0 },
            },
            iterations: r.iterations,
            coarse_iterations: run.coarse_iterations,
            energy: r.energy(),
            length: r.length(),
            stop: stop_name(r.stop).to_string(),
            converged: r.converged(),
            diagnostics: ManifestDiagnostics {
                norm_constancy: d.norm_constancy,
                projected_gradient_norm: d.projected_gradient_norm,
                endpoint_residual: d.endpoint_residual,
                gradient_alignment: d.gradient_alignment,
            },
            energy_history: r.energy_history.clone(),
            wall_time_seconds: run.wall_time,
        }
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

/// Particle trajectories in long format: one row per particle and time,
/// including both endpoints.
pub fn write_particles(path: &Path, run: &GeodesicRun) -> Result<(), Failure> {
    let r = &run.result;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["particle", "label", "s", "position"])?;
    let nodes = r.scheme.nodes();
    for (i, label) in run.labels.iter().enumerate() {
        let mut row = |s: f64, q: f64| w.write_record([i.to_string(), fmt(*label), fmt(s), fmt(q)]);
        row(0.0, r.state.q0[i])?;
        for (t, &s) in nodes.iter().enumerate() {
            row(s, r.state.q[(i, t)])?;
        }
        row(1.0, r.state.qt1[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Velocity grid in long format.
pub fn write_velocity(path: &Path, run: &GeodesicRun) -> Result<(), Failure> {
    let r = &run.result;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["particle", "label", "slice", "s", "velocity"])?;
    for (i, label) in run.labels.iter().enumerate() {
        for (t, &s) in r.scheme.nodes().iter().enumerate() {
            w.write_record([
                i.to_string(),
                fmt(*label),
                t.to_string(),
                fmt(s),
                fmt(r.state.v[(i, t)]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-slice squared speeds and quadrature weights.
pub fn write_slice_energy(path: &Path, run: &GeodesicRun) -> Result<(), Failure> {
    let r = &run.result;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slice", "s", "weight", "norm_sq"])?;
    let norms = r.state.slice_norms();
    for (t, ((&s, &h), n)) in r.scheme.nodes().iter().zip(r.scheme.weights()).zip(norms).enumerate() {
        w.write_record([t.to_string(), fmt(s), fmt(h), fmt(n)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Failure::Other(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Write `velocity.csv`, `particles.csv`, `energy.csv` and `manifest.json`.
pub fn write_run(dir: &Path, run: &GeodesicRun, manifest: &RunManifest) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    write_velocity(&dir.join("velocity.csv"), run)?;
    write_particles(&dir.join("particles.csv"), run)?;
    write_slice_energy(&dir.join("energy.csv"), run)?;
    write_manifest(&dir.join("manifest.json"), manifest)
}
