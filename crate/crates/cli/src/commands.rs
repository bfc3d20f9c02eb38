use crate::config::{ExperimentConfig, ParticleMode};
use crate::error::CliError;
use crate::output::{ArtifactDir, Cell, Provenance};
use crate::row;
use mvflow::fpe::{evolve, uniform_times, DensityCurve, FpeConfig};
use mvflow::functionals::energy_report as build_energy_report;
use mvflow::particles::{
    martingale_test, mean_energy, simulate, step_times, trajectory_energy, CurveDensity,
    DensitySource, SimulationConfig,
};
use mvflow::transport::{metric_derivative as speed, w2_quantile, wh_distance as distance};
use mvflow::{DensityField, Grid, MobilityModel};
use std::io::Write;

/// Model, grid and initial density of a validated config.
pub struct Setup {
    pub model: MobilityModel,
    pub grid: Grid,
    pub initial: DensityField,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let model = cfg.model.build()?;
        let grid = cfg.grid.build()?;
        let initial = cfg.initial.build(&model, grid)?;
        Ok(Self {
            model,
            grid,
            initial,
        })
    }

    pub fn evolve(&self, times: &[f64]) -> Result<DensityCurve, CliError> {
        Ok(evolve(
            &self.model,
            &self.initial,
            times,
            FpeConfig::default(),
        )?)
    }
}

/// Output directory with the effective config written next to the results.
pub fn artifacts(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<ArtifactDir, CliError> {
    let provenance = Provenance {
        config_hash: cfg.hash(),
        seed,
    };
    let mut dir = ArtifactDir::create(&cfg.output.dir, provenance)?;
    dir.with_header("config.toml", "#", &cfg.canonical_toml())?;
    Ok(dir)
}

pub fn list_written(dir: &ArtifactDir, out: &mut dyn Write) -> Result<(), CliError> {
    for p in dir.written() {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

pub fn fpe_solve(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let curve = setup.evolve(&uniform_times(0.0, cfg.time.t_end, cfg.time.snapshots))?;
    let mut dir = artifacts(cfg, None)?;
    let grid = curve.grid;
    let mut rows = Vec::with_capacity(curve.len() * grid.n_cells());
    for (t, snap) in curve.times.iter().zip(&curve.snapshots) {
        for (i, &p) in snap.iter().enumerate() {
            rows.push(row![*t, grid.x(i), p]);
        }
    }
    dir.csv("density.csv", &["t", "x", "p"], &rows)?;
    let masses = curve.masses();
    let mut worst_change = 0.0f64;
    let index: Vec<Vec<Cell>> = curve
        .snapshots
        .iter()
        .enumerate()
        .map(|(k, snap)| {
            let change = snap
                .iter()
                .zip(&setup.initial.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst_change = worst_change.max(change);
            row![k, curve.times[k], masses[k], change]
        })
        .collect();
    dir.csv(
        "snapshots.csv",
        &["index", "t", "mass", "max_abs_change"],
        &index,
    )?;
    let drift = masses
        .iter()
        .fold(0.0f64, |m, v| m.max((v - masses[0]).abs()));
    writeln!(
        out,
        "{}: {} snapshots, {} steps, mass drift {drift:.3e}, max |p(t) - p(0)| {worst_change:.3e}",
        setup.model.name,
        curve.len(),
        curve.steps
    )?;
    list_written(&dir, out)
}

pub fn energy_report(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let curve = setup.evolve(&uniform_times(0.0, cfg.time.t_end, cfg.time.snapshots))?;
    let report = build_energy_report(&setup.model, &curve, None)?;
    let mut dir = artifacts(cfg, None)?;
    let rows: Vec<Vec<Cell>> = (0..report.times.len())
        .map(|k| {
            row![
                report.times[k],
                report.free_energy[k],
                report.relative_entropy[k],
                report.dissipation[k],
                report.dfdt[k],
                report.residual[k]
            ]
        })
        .collect();
    dir.csv(
        "energy_report.csv",
        &[
            "t",
            "free_energy",
            "relative_entropy",
            "dissipation",
            "dfdt",
            "residual",
        ],
        &rows,
    )?;
    let ratio = report.max_interior_residual() / report.max_dissipation();
    writeln!(
        out,
        "{}: max interior |dF/dt + I| = {:.3e} ({:.3e} of max I)",
        setup.model.name,
        report.max_interior_residual(),
        ratio
    )?;
    list_written(&dir, out)
}

fn recorded(len: usize, every: usize) -> Vec<usize> {
    (0..len)
        .filter(|k| k % every == 0 || k + 1 == len)
        .collect()
}

pub fn particles(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let p = &cfg.particles;
    let sim = SimulationConfig {
        n_paths: p.n_paths,
        dt: p.dt,
        t_end: cfg.time.t_end,
        master_seed: p.seed,
    };
    let mut dir = artifacts(cfg, Some(p.seed))?;
    match p.mode {
        ParticleMode::Kde => {
            let source = DensitySource::Kde {
                initial: &setup.initial,
                bandwidth: p.bandwidth,
            };
            let ens = simulate(&setup.model, &source, sim)?;
            let keep = recorded(ens.times.len(), p.record_every);
            let mut rows = Vec::new();
            for (j, path) in ens.positions.iter().enumerate() {
                for &k in &keep {
                    rows.push(row![j, ens.times[k], path[k]]);
                }
            }
            dir.csv("paths.csv", &["path_id", "t", "x"], &rows)?;
            let m2 = ens.second_moments();
            let rows: Vec<_> = keep.iter().map(|&k| row![ens.times[k], m2[k]]).collect();
            dir.csv("second_moment.csv", &["t", "second_moment"], &rows)?;
            writeln!(
                out,
                "{}: {} kernel-density paths to t = {}",
                setup.model.name,
                ens.n_paths(),
                cfg.time.t_end
            )?;
        }
        ParticleMode::Pde => {
            let curve = setup.evolve(&step_times(0.0, cfg.time.t_end, p.dt))?;
            let density = CurveDensity::new(&curve)?;
            let ens = simulate(&setup.model, &DensitySource::Curve(&density), sim)?;
            let paths = trajectory_energy(&ens, &setup.model, &density)?;
            let keep = recorded(ens.times.len(), p.record_every);
            let mut rows = Vec::new();
            for (j, path) in paths.iter().enumerate() {
                for &k in &keep {
                    rows.push(row![
                        j,
                        path.times[k],
                        ens.positions[j][k],
                        path.theta[k],
                        path.rate_integral[k],
                        path.martingale_residual[k]
                    ]);
                }
            }
            dir.csv(
                "paths.csv",
                &[
                    "path_id",
                    "t",
                    "x",
                    "theta",
                    "rate_integral",
                    "martingale_residual",
                ],
                &rows,
            )?;
            let (mean, se) = mean_energy(&paths);
            let report = if paths.len() >= 100 {
                Some(martingale_test(&paths)?)
            } else {
                None
            };
            let rows: Vec<_> = keep
                .iter()
                .map(|&k| {
                    let (mr, mse) = report.as_ref().map_or((f64::NAN, f64::NAN), |r| {
                        (r.mean_residual[k], r.std_error[k])
                    });
                    row![ens.times[k], mean[k], se[k], mr, mse]
                })
                .collect();
            dir.csv(
                "mean_energy.csv",
                &[
                    "t",
                    "mean_energy",
                    "std_error",
                    "mean_residual",
                    "residual_std_error",
                ],
                &rows,
            )?;
            match report {
                Some(r) => {
                    let worst = r
                        .mean_residual
                        .iter()
                        .zip(&r.std_error)
                        .filter(|(_, s)| **s > 0.0)
                        .fold(0.0f64, |m, (a, s)| m.max(a.abs() / s));
                    writeln!(
                        out,
                        "{}: martingale zero-mean test {} (worst |mean|/SE = {worst:.2}, band 4)",
                        setup.model.name,
                        if r.pass { "PASS" } else { "FAIL" }
                    )?;
                }
                None => writeln!(
                    out,
                    "{}: {} paths, too few for the martingale test (needs 100)",
                    setup.model.name,
                    paths.len()
                )?,
            }
        }
    }
    list_written(&dir, out)
}

pub fn metric_derivative(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let t = &cfg.transport;
    let reach = t.deltas.iter().cloned().fold(0.0, f64::max);
    if t.t0 + reach > cfg.time.t_end + 1e-12 {
        return Err(CliError::Validation(format!(
            "transport.t0 + max delta = {} exceeds time.t_end = {}",
            t.t0 + reach,
            cfg.time.t_end
        )));
    }
    let mut times: Vec<f64> = std::iter::once(t.t0)
        .chain(t.deltas.iter().map(|d| t.t0 + d))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let curve = setup.evolve(&times)?;
    let md = speed(&setup.model, &curve, t.t0, &t.deltas, t.solver())?;
    let mut dir = artifacts(cfg, None)?;
    let rows: Vec<_> = md
        .deltas
        .iter()
        .zip(&md.estimates)
        .map(|(&d, &e)| row![d, e])
        .collect();
    dir.csv("metric_derivative.csv", &["delta", "wh_over_delta"], &rows)?;
    dir.csv(
        "metric_derivative_summary.csv",
        &[
            "t0",
            "extrapolated",
            "sqrt_dissipation",
            "relative_error",
            "all_converged",
        ],
        &[row![
            t.t0,
            md.extrapolated,
            md.sqrt_dissipation,
            md.relative_error,
            md.all_converged
        ]],
    )?;
    writeln!(
        out,
        "{}: |dP/dt|(t0={}) extrapolated {:.6}, sqrt(I) {:.6}, relative error {:.3e}",
        setup.model.name, t.t0, md.extrapolated, md.sqrt_dissipation, md.relative_error
    )?;
    if !md.all_converged {
        writeln!(
            out,
            "warning: a transport solve stopped at transport.max_iters"
        )?;
    }
    list_written(&dir, out)
}

pub fn wh_distance(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let setup = Setup::new(cfg)?;
    let target = cfg.transport.target.build(&setup.model, setup.grid)?;
    let (w, sol) = distance(
        &setup.model,
        &setup.initial,
        &target,
        cfg.transport.solver(),
    )?;
    let w2 = match setup.model.family {
        mvflow::models::Family::Linear => w2_quantile(&setup.initial, &target)?,
        _ => f64::NAN,
    };
    let mut dir = artifacts(cfg, None)?;
    dir.csv(
        "wh_summary.csv",
        &[
            "distance",
            "action",
            "converged",
            "iterations",
            "constraint_residual",
            "w2_quantile",
        ],
        &[row![
            w,
            sol.action,
            sol.converged,
            sol.iterations,
            sol.constraint_residual,
            w2
        ]],
    )?;
    let grid = setup.grid;
    let k = sol.m.len();
    let mut rows = Vec::new();
    for (level, u) in sol.u.iter().enumerate() {
        for (i, &v) in u.iter().enumerate() {
            rows.push(row![level as f64 / k as f64, grid.x(i), v]);
        }
    }
    dir.csv("wh_density.csv", &["s", "x", "u"], &rows)?;
    let mut rows = Vec::new();
    for (level, m) in sol.m.iter().enumerate() {
        for (j, &v) in m.iter().enumerate() {
            rows.push(row![(level as f64 + 0.5) / k as f64, grid.face(j), v]);
        }
    }
    dir.csv("wh_flux.csv", &["s", "x_face", "m"], &rows)?;
    write!(
        out,
        "{}: W_h = {w:.6} after {} iterations (constraint residual {:.2e})",
        setup.model.name, sol.iterations, sol.constraint_residual
    )?;
    if w2.is_finite() {
        write!(out, ", quantile W2 = {w2:.6}")?;
    }
    writeln!(out)?;
    list_written(&dir, out)?;
    if !sol.converged {
        return Err(CliError::Numerical(format!(
            "transport solver did not converge in {} iterations",
            sol.iterations
        )));
    }
    Ok(())
}
