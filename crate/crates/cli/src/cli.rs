//! Argument parsing and command dispatch for `wpg`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wpg_core::io::{read_shape, read_weld, save_shape, save_weld};
use wpg_core::{compute_weld, invert_weld, SchemeKind, WeldingMap};

use crate::experiments::{self, AngleCase, Case};
use crate::run::{solve, stop_name, write_run, GeodesicRun, RunManifest, SolverOptions};
use crate::Failure;

/// Exit status of a run that finished but did not meet the tolerances.
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "wpg", version, about = "Weil-Petersson geodesics between planar shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the welding map of a closed curve (`x,y` CSV).
    Weld {
        shape: PathBuf,
        out: PathBuf,
        /// Resample the boundary to this many points by arclength first.
        #[arg(long)]
        resample: Option<usize>,
    },
    /// Recover a closed curve from a welding map (`theta,phi` CSV).
    Unweld {
        weld: PathBuf,
        out: PathBuf,
        /// Number of boundary points to produce.
        #[arg(long, default_value_t = 512)]
        points: usize,
    },
    /// Solve for the geodesic between two welds.
    Geodesic {
        /// One or two weld files; a missing end is the identity when
        /// `--identity` is given.
        welds: Vec<PathBuf>,
        #[arg(long)]
        identity: bool,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value = "geodesic_out")]
        out: PathBuf,
    },
    /// Run one of the experiment sweeps.
    Experiment {
        name: ExperimentName,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value = "experiment_out")]
        out: PathBuf,
        /// Seed for the random Möbius normalizations.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the swept parameter values (comma separated).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Directory of `x,y` contour files for `mpeg7`.
        #[arg(long)]
        contours: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ExperimentName {
    ZeroDistance,
    EllipseSweep,
    AngleSum,
    CornerSweep,
    Mpeg7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Pl,
    Gl,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 150)]
    pub particles: usize,
    #[arg(long, default_value_t = 150)]
    pub time_steps: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Pl)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_obj: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol_grad: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Time steps of the coarse warm-start solve (0 disables it).
    #[arg(long, default_value_t = crate::run::COARSE_STEPS)]
    pub coarse_steps: usize,
}

impl SolverArgs {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            particles: self.particles,
            time_steps: self.time_steps,
            scheme: match self.scheme {
                SchemeArg::Pl => SchemeKind::PiecewiseLinear,
                SchemeArg::Gl => SchemeKind::GaussLobatto,
            },
            tol_obj: self.tol_obj,
            tol_grad: self.tol_grad,
            max_iter: self.max_iter,
            coarse_steps: self.coarse_steps,
        }
    }

    fn parameters(&self) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("particles".into(), self.particles.to_string());
        p.insert("time_steps".into(), self.time_steps.to_string());
        p.insert("scheme".into(), format!("{:?}", self.scheme).to_lowercase());
        p.insert("tol_obj".into(), self.tol_obj.to_string());
        p.insert("tol_grad".into(), self.tol_grad.to_string());
        p.insert("max_iter".into(), self.max_iter.to_string());
        p.insert("coarse_steps".into(), self.coarse_steps.to_string());
        p
    }
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WPG_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NOT_CONVERGED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Execute a parsed command. `Ok(false)` means the command completed but
/// some geodesic did not converge.
pub fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Weld { shape, out, resample } => {
            let mut s = read_shape(&shape)?;
            if let Some(n) = resample {
                s = s.resampled(n)?;
            }
            let w = compute_weld(&s)?;
            save_weld(&out, &w)?;
            println!(
                "weld: {} samples, derivative ratio {:.3e}, sup deviation from identity {:.3e}",
                w.len(),
                w.derivative_ratio(),
                w.sup_deviation_from_identity()
            );
            Ok(true)
        }
        Command::Unweld { weld, out, points } => {
            let s = invert_weld(&read_weld(&weld)?, points)?;
            save_shape(&out, &s)?;
            println!(
                "shape: {} points, aspect ratio {:.6}, circularity defect {:.3e}",
                s.len(),
                s.aspect_ratio(),
                s.circularity_defect()
            );
            Ok(true)
        }
        Command::Geodesic {
            welds,
            identity,
            solver,
            out,
        } => geodesic(&welds, identity, &solver, &out),
        Command::Experiment {
            name,
            solver,
            out,
            seed,
            values,
            contours,
        } => experiment(name, &solver, &out, seed, values, contours.as_deref()),
    }
}

fn geodesic(files: &[PathBuf], identity: bool, solver: &SolverArgs, out: &Path) -> Result<bool, Failure> {
    let id = WeldingMap::identity(experiments::SHAPE_POINTS);
    let mut welds: Vec<WeldingMap> = files.iter().map(|f| read_weld(f)).collect::<Result<_, _>>()?;
    if welds.len() > 2 || (welds.len() < 2 && !identity) {
        return Err(Failure::Other(
            "expected two weld files, or fewer together with --identity".into(),
        ));
    }
    while welds.len() < 2 {
        welds.push(id.clone());
    }
    let options = solver.options();
    let run = solve(&welds[0], &welds[1], &options)?;
    let mut params = solver.parameters();
    for (k, f) in files.iter().enumerate() {
        params.insert(format!("weld{k}"), f.display().to_string());
    }
    params.insert("identity".into(), identity.to_string());
    let manifest = RunManifest::new("geodesic", params, &options, &run);
    write_run(out, &run, &manifest)?;
    print_run("geodesic", &run);
    Ok(run.converged())
}

fn print_run(name: &str, run: &GeodesicRun) {
    let r = &run.result;
    println!(
        "{name}: E = {:.6e}, L = {:.6e}, iterations {}, {}, constancy {:.3e}, endpoint residual {:.1e}",
        r.energy(),
        r.length(),
        r.iterations,
        stop_name(r.stop),
        r.diagnostics.norm_constancy,
        r.diagnostics.endpoint_residual
    );
}

const REPORT_HEADER: [&str; 10] = [
    "case",
    "parameter",
    "energy",
    "length",
    "iterations",
    "stop",
    "converged",
    "norm_constancy",
    "endpoint_residual",
    "error",
];

fn report_row(case: &Case) -> Vec<String> {
    match &case.run {
        Ok(run) => {
            let r = &run.result;
            vec![
                case.name.clone(),
                case.parameter.to_string(),
                format!("{:.17e}", r.energy()),
                format!("{:.17e}", r.length()),
                r.iterations.to_string(),
                stop_name(r.stop).to_string(),
                r.converged().to_string(),
                format!("{:.6e}", r.diagnostics.norm_constancy),
                format!("{:.6e}", r.diagnostics.endpoint_residual),
                String::new(),
            ]
        }
        Err(e) => {
            let mut row = vec![case.name.clone(), case.parameter.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 7));
            row.push(e.to_string());
            row
        }
    }
}

/// Write the per-case table and per-case run artifacts. Returns whether
/// every case converged.
fn write_cases(
    out: &Path,
    name: &str,
    cases: &[&Case],
    solver: &SolverArgs,
    extra: &BTreeMap<String, String>,
) -> Result<bool, Failure> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(format!("{name}.csv")))?;
    w.write_record(REPORT_HEADER)?;
    let mut ok = true;
    for case in cases {
        w.write_record(report_row(case))?;
        match &case.run {
            Ok(run) => {
                let mut params = solver.parameters();
                params.extend(extra.clone());
                params.insert("case".into(), case.name.clone());
                params.insert("parameter".into(), case.parameter.to_string());
                let manifest = RunManifest::new(&format!("experiment {name}"), params, &solver.options(), run);
                write_run(&out.join(&case.name), run, &manifest)?;
                print_run(&case.name, run);
                ok &= run.converged();
            }
            Err(e) => {
                println!("{}: failed: {e}", case.name);
                ok = false;
            }
        }
    }
    w.flush()?;
    Ok(ok)
}

fn write_angles(out: &Path, cases: &[AngleCase]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(out.join("angle_sum_angles.csv"))?;
    w.write_record(["ratio", "alpha_0", "alpha_1", "alpha_2", "sum", "pi_minus_sum"])?;
    for c in cases {
        let mut row = vec![c.ratio.to_string()];
        match c.angles {
            Some(a) => {
                let s: f64 = a.iter().sum();
                row.extend(a.iter().map(|x| format!("{x:.17e}")));
                row.push(format!("{s:.17e}"));
                row.push(format!("{:.6e}", std::f64::consts::PI - s));
                println!(
                    "angle_sum {}: sum {s:.6}, π − sum {:.3e}",
                    c.ratio,
                    std::f64::consts::PI - s
                );
            }
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn experiment(
    name: ExperimentName,
    solver: &SolverArgs,
    out: &Path,
    seed: u64,
    values: Option<Vec<f64>>,
    contours: Option<&Path>,
) -> Result<bool, Failure> {
    let options = solver.options();
    let mut extra = BTreeMap::new();
    match name {
        ExperimentName::ZeroDistance => {
            extra.insert("seed".into(), seed.to_string());
            let cases = experiments::zero_distance(&options, seed)?;
            write_cases(out, "zero_distance", &cases.iter().collect::<Vec<_>>(), solver, &extra)
        }
        ExperimentName::EllipseSweep => {
            let r = values.unwrap_or_else(|| experiments::ELLIPSE_RATIOS.to_vec());
            let cases = experiments::ellipse_sweep(&options, &r);
            let ok = write_cases(out, "ellipse_sweep", &cases.iter().collect::<Vec<_>>(), solver, &extra)?;
            let upper: Vec<(f64, f64)> = cases
                .iter()
                .filter(|c| c.parameter >= 3.0)
                .filter_map(|c| c.length().map(|l| (c.parameter, l)))
                .collect();
            if upper.len() >= 3 {
                let (x, y): (Vec<f64>, Vec<f64>) = upper.into_iter().unzip();
                println!(
                    "ellipse_sweep: linear fit residual over r >= 3 is {:.2}% of the range",
                    100.0 * experiments::linear_fit_residual(&x, &y)
                );
            }
            Ok(ok)
        }
        ExperimentName::AngleSum => {
            let r = values.unwrap_or_else(|| experiments::ANGLE_RATIOS.to_vec());
            let cases = experiments::angle_sum(&options, &r);
            let sides: Vec<&Case> = cases.iter().flat_map(|c| c.sides.iter()).collect();
            let ok = write_cases(out, "angle_sum", &sides, solver, &extra)?;
            write_angles(out, &cases)?;
            Ok(ok && cases.iter().all(|c| c.angles.is_some()))
        }
        ExperimentName::CornerSweep => {
            let a = values.unwrap_or_else(|| experiments::CORNER_ALPHAS.to_vec());
            let cases = experiments::corner_sweep(&options, &a);
            write_cases(out, "corner_sweep", &cases.iter().collect::<Vec<_>>(), solver, &extra)
        }
        ExperimentName::Mpeg7 => {
            let dir =
                contours.ok_or_else(|| Failure::Other("mpeg7 needs --contours DIR with x,y contour files".into()))?;
            extra.insert("contours".into(), dir.display().to_string());
            let files = experiments::contour_files(dir)?;
            if files.is_empty() {
                return Err(Failure::Other(format!("no .csv contours in {}", dir.display())));
            }
            let welds = experiments::contour_welds(&files, experiments::SHAPE_POINTS);
            for (n, w) in &welds {
                if let Err(e) = w {
                    println!("{n}: weld failed: {e}");
                }
            }
            let cases = experiments::contour_paths(&options, &welds);
            let ok = write_cases(out, "mpeg7", &cases.iter().collect::<Vec<_>>(), solver, &extra)?;
            Ok(ok && welds.iter().all(|w| w.1.is_ok()))
        }
    }
}
