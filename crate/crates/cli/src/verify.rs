//! Invariant suite for one model: PDE structure, functional identities,
//! particle energy decomposition and, for concave mobilities, the transport
//! metric. Each check reports a measured value against its threshold.
use crate::commands::{artifacts, list_written, Setup};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::row;
use mvflow::fpe::{evolve, ordering_violation, rhs, uniform_times, FpeConfig};
use mvflow::functionals::{
    curve_max, dissipation, energy_report, free_energy, jets, rate_d_specialized, rate_d_terms,
    second_moment_check, second_moments, stationary_on, wh_gradient, wh_gradient_norm_sq,
};
use mvflow::grid::gaussian;
use mvflow::models::{stationary_density, Family};
use mvflow::particles::{
    conditional_rate_estimate, martingale_test, simulate, step_times, trajectory_energy,
    CurveDensity, DensitySource, InverseCdf, SimulationConfig,
};
use mvflow::perturbation::{slope_comparison, BumpField};
use mvflow::transport::{metric_derivative, w2_quantile, wh_distance};
use mvflow::{DensityField, Grid, MobilityModel};
use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    /// `None` when the check does not apply to the model.
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyTable {
    pub model: String,
    pub rows: Vec<CheckRow>,
}

impl VerifyTable {
    fn push(&mut self, name: &str, value: f64, threshold: impl Into<String>, pass: bool) {
        self.rows.push(CheckRow {
            name: name.into(),
            value,
            threshold: threshold.into(),
            pass: Some(pass && !value.is_nan()),
        });
    }

    fn skip(&mut self, name: &str, why: &str) {
        self.rows.push(CheckRow {
            name: name.into(),
            value: f64::NAN,
            threshold: why.into(),
            pass: None,
        });
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.pass == Some(false)).count()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0
    }

    pub fn get(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!("invariant suite for {}\n", self.model);
        s += &format!(
            "{:<w$}  {:>12}  {:<28}  result\n",
            "check", "value", "threshold"
        );
        for r in &self.rows {
            let result = match r.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "skip",
            };
            s += &format!(
                "{:<w$}  {:>12.4e}  {:<28}  {result}\n",
                r.name, r.value, r.threshold
            );
        }
        s += &format!(
            "{} checks, {} failed, {} skipped\n",
            self.rows.len(),
            self.failures(),
            self.rows.iter().filter(|r| r.pass.is_none()).count()
        );
        s
    }
}

fn is_power(model: &MobilityModel) -> bool {
    matches!(model.family, Family::Power { .. })
}

/// A smooth density whose wall flux vanishes: N(0.3, 1) in general; for the
/// heavy-tailed power family, the stationary profile with an odd modulation.
pub fn smooth_density(model: &MobilityModel, grid: Grid) -> Result<DensityField, CliError> {
    if is_power(model) {
        let q = stationary_on(model, grid, 1.0)?;
        let k = |y: f64| (-0.5 * y * y / 0.16).exp();
        let vals = q
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = grid.x(i);
                v * (1.0 + 0.5 * (k(x - 1.0) - k(x + 1.0)))
            })
            .collect();
        Ok(DensityField::new(grid, vals, 0.0)?)
    } else {
        Ok(DensityField::from_fn(grid, gaussian(0.3, 1.0), 0.0)?)
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs every applicable check; only setup errors abort the suite.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<VerifyTable, CliError> {
    let setup = Setup::new(cfg)?;
    let model = &setup.model;
    let grid = setup.grid;
    let mut table = VerifyTable {
        model: model.name.clone(),
        rows: Vec::new(),
    };
    let t_end = cfg.time.t_end;
    let snaps = cfg.time.snapshots.max(3);
    let curve = setup.evolve(&uniform_times(0.0, t_end, snaps))?;

    let masses = curve.masses();
    let m0 = setup.initial.mass();
    let drift = masses.iter().fold(0.0f64, |m, v| m.max((v - m0).abs()));
    table.push(
        "mass conservation",
        drift,
        "<= 1e-10 per snapshot",
        drift <= 1e-10,
    );
    let min = curve
        .snapshots
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    table.push("positivity (min p)", min, ">= 0", min >= 0.0);

    if let Some(cap) = model.saturation() {
        let max = curve_max(&curve);
        table.push(
            "saturation bound (max p)",
            max,
            format!("< {cap}"),
            max < cap,
        );
        // a pointwise smaller start must stay below
        let lower = DensityField::new(
            grid,
            setup.initial.values.iter().map(|v| 0.8 * v).collect(),
            0.0,
        )?;
        let low = evolve(model, &lower, &curve.times, FpeConfig::default())?;
        let v = ordering_violation(&low, &curve)?;
        table.push("comparison principle", v, "<= 1e-8", v <= 1e-8);
    } else {
        table.skip("saturation bound (max p)", "no saturation level");
        table.skip("comparison principle", "no saturation level");
    }

    let report = energy_report(model, &curve, None)?;
    let ratio = report.max_interior_residual() / report.max_dissipation();
    table.push(
        "dissipation identity",
        ratio,
        "<= 0.02 of max I",
        ratio <= 0.02,
    );
    if grid.n_cells() * 2 <= 4800 {
        let fine_grid = Grid::new(grid.half_width(), grid.n_cells() * 2)?;
        let fine_init = cfg.initial.build(model, fine_grid)?;
        let fine = evolve(
            model,
            &fine_init,
            &uniform_times(0.0, t_end, 2 * snaps - 1),
            FpeConfig::default(),
        )?;
        let fine_report = energy_report(model, &fine, None)?;
        let gain = report.max_interior_residual() / fine_report.max_interior_residual();
        table.push(
            "identity residual refinement",
            gain,
            ">= 2 when dx, dt halve",
            gain >= 2.0,
        );
    } else {
        table.skip("identity residual refinement", "grid too fine to double");
    }

    let h = report
        .relative_entropy
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    table.push("relative entropy (min H)", h, ">= -1e-10", h >= -1e-10);
    let h0 = report.relative_entropy[0];
    let hl = *report.relative_entropy.last().unwrap();
    table.push("entropy decays", hl - h0, "<= 0", hl <= h0);

    let mid = curve.field(curve.len() / 2);
    let a = wh_gradient_norm_sq(model, &mid)?;
    let b = dissipation(model, &mid)?;
    let rel = (a - b).abs() / b;
    table.push("gradient norm = I", rel, "<= 1e-10 relative", rel <= 1e-10);

    let mut errs = Vec::new();
    for div in [4usize, 2, 1] {
        let g = Grid::new(grid.half_width(), grid.n_cells() / div)?;
        let p = smooth_density(model, g)?;
        let neg: Vec<f64> = rhs(model, &p)?.iter().map(|v| -v).collect();
        errs.push(sup_diff(&wh_gradient(model, &p)?, &neg));
    }
    let slope = errs
        .windows(2)
        .map(|w| (w[0] / w[1]).log2())
        .fold(f64::INFINITY, f64::min);
    table.push("gradient = -rhs, order", slope, ">= 1.9", slope >= 1.9);

    let p_max = curve_max(&curve);
    let moments = second_moments(&curve);
    let gron = second_moment_check(model, &curve.times, &moments, p_max)?;
    let margin = gron
        .moments
        .iter()
        .zip(&gron.bound)
        .skip(1)
        .map(|(m, b)| m / b)
        .fold(0.0, f64::max);
    table.push("second moment / Gronwall", margin, "<= 1", gron.ok);

    let mut worst_gap = f64::INFINITY;
    for (c, r, a) in [
        (0.0, 1.0, 0.5),
        (1.0, 0.7, -0.3),
        (-1.5, 1.2, 1.0),
        (2.5, 0.5, 2.0),
        (0.5, 3.0, -0.8),
    ] {
        let beta = BumpField::new(c, r, a)?;
        for s in slope_comparison(model, &mid, &[beta])? {
            worst_gap = worst_gap.min((s.gap + 1e-10 * s.rhs) / s.rhs.max(1e-300));
        }
    }
    table.push(
        "Cauchy-Schwarz slope (5 bumps)",
        worst_gap,
        ">= 0",
        worst_gap >= 0.0,
    );

    let stat = stationary_on(model, grid, 1.0)?;
    let still = evolve(model, &stat, &[0.5], FpeConfig::default())?;
    let moved = sup_diff(&still.snapshots[0], &stat.values);
    table.push(
        "stationary density is fixed",
        moved,
        "<= 1e-6",
        moved <= 1e-6,
    );

    if matches!(model.family, Family::Linear) {
        table.skip("specialized D = generic D", "no specialized formula");
    } else {
        let p = curve.field(1);
        let pm = p.max();
        let mut worst = 0.0f64;
        for (i, jet) in jets(&p)?.into_iter().enumerate() {
            if jet.p < 1e-8 * pm {
                continue;
            }
            let x = grid.x(i);
            let terms = rate_d_terms(model, jet, x);
            let generic: f64 = terms.iter().sum();
            let special = rate_d_specialized(model, jet, x)?;
            let scale = terms
                .iter()
                .map(|t| t.abs())
                .sum::<f64>()
                .max(generic.abs())
                .max(special.abs());
            worst = worst.max((generic - special).abs() / scale);
        }
        table.push(
            "specialized D = generic D",
            worst,
            "<= 1e-8 relative",
            worst <= 1e-8,
        );
    }

    particle_checks(cfg, &setup, &mut table)?;
    transport_checks(cfg, model, &mut table)?;
    if matches!(model.family, Family::Linear) {
        linear_closed_forms(model, grid, &mut table)?;
    }
    Ok(table)
}

fn particle_checks(
    cfg: &ExperimentConfig,
    setup: &Setup,
    table: &mut VerifyTable,
) -> Result<(), CliError> {
    let model = &setup.model;
    let p = &cfg.particles;
    let t_end = cfg.time.t_end;
    let curve = setup.evolve(&step_times(0.0, t_end, p.dt))?;
    let density = CurveDensity::new(&curve)?;
    let sim = SimulationConfig {
        n_paths: p.n_paths,
        dt: p.dt,
        t_end,
        master_seed: p.seed,
    };
    let source = DensitySource::Curve(&density);
    let ens = simulate(model, &source, sim)?;
    let again = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Numerical(e.to_string()))?
        .install(|| simulate(model, &source, sim))?;
    let same = ens.positions == again.positions;
    table.push(
        "bit-identical rerun (1 thread)",
        f64::from(u8::from(!same)),
        "0 differences",
        same,
    );

    if p.n_paths >= 100 {
        let paths = trajectory_energy(&ens, model, &density)?;
        let r = martingale_test(&paths)?;
        let worst = r
            .mean_residual
            .iter()
            .zip(&r.std_error)
            .filter(|(_, s)| **s > 0.0)
            .fold(0.0f64, |m, (a, s)| m.max(a.abs() / s));
        table.push("martingale mean zero", worst, "|mean| <= 4 SE", r.pass);
    } else {
        table.skip("martingale mean zero", "needs >= 100 paths");
    }

    // branched rate estimates at quantile starts of p(t0)
    let t0 = (0.25 * t_end).min(0.5);
    let k0 = curve
        .times
        .iter()
        .position(|&t| t >= t0 - 1e-12)
        .unwrap_or(0);
    let t0 = curve.times[k0];
    let horizon = 0.04_f64.min(t_end - t0);
    let inv = InverseCdf::new(&curve.field(k0))?;
    let starts: Vec<f64> = (0..40)
        .map(|j| inv.quantile((j as f64 + 0.5) / 40.0))
        .collect();
    let est = conditional_rate_estimate(model, &density, t0, &starts, horizon, 8, 1000, p.seed)?;
    let share = est.iter().filter(|e| e.within(3.0)).count() as f64 / est.len() as f64;
    table.push(
        "conditional rate = D (share)",
        share,
        ">= 0.95 within 3 SE",
        share >= 0.95,
    );
    Ok(())
}

/// Transport checks run on [-8, 8] with 200 cells: the solver cost grows with
/// the grid and these checks do not need the experiment resolution.
fn transport_checks(
    cfg: &ExperimentConfig,
    model: &MobilityModel,
    table: &mut VerifyTable,
) -> Result<(), CliError> {
    if !model.h_concave() {
        table.skip("W_h = quantile W2", "mobility h not concave");
        table.skip("metric derivative = sqrt(I)", "mobility h not concave");
        return Ok(());
    }
    let grid = Grid::new(8.0, 200)?;
    let solver = cfg.transport.solver();
    if matches!(model.family, Family::Linear) {
        let p0 = DensityField::from_fn(grid, gaussian(-1.0, 1.0), 0.0)?;
        let p1 = DensityField::from_fn(grid, gaussian(1.5, 0.5), 0.0)?.normalized(p0.mass())?;
        let (w, _) = wh_distance(model, &p0, &p1, solver)?;
        let oracle = w2_quantile(&p0, &p1)?;
        let rel = (w - oracle).abs() / oracle;
        table.push("W_h = quantile W2", rel, "<= 0.02 relative", rel <= 0.02);
    } else {
        table.skip("W_h = quantile W2", "linear model only");
    }
    let t = &cfg.transport;
    let init = DensityField::from_fn(grid, gaussian(1.5, 0.3), 0.0)?;
    let mut times: Vec<f64> = std::iter::once(t.t0)
        .chain(t.deltas.iter().map(|d| t.t0 + d))
        .collect();
    times.sort_by(f64::total_cmp);
    let curve = evolve(model, &init, &times, FpeConfig::default())?;
    let md = metric_derivative(model, &curve, t.t0, &t.deltas, solver)?;
    table.push(
        "metric derivative = sqrt(I)",
        md.relative_error,
        "<= 0.05 relative",
        md.relative_error <= 0.05,
    );
    Ok(())
}

/// OU from N(2, 1): every snapshot is Gaussian with mean 2e^{-t} and unit
/// variance, so F, H and I have closed forms.
fn linear_closed_forms(
    model: &MobilityModel,
    grid: Grid,
    table: &mut VerifyTable,
) -> Result<(), CliError> {
    let init = DensityField::from_fn(grid, gaussian(2.0, 1.0), 0.0)?;
    let times = [0.1, 0.5, 1.0, 1.5, 2.0];
    let curve = evolve(model, &init, &times, FpeConfig::default())?;
    let f_inf = free_energy(
        model,
        &stationary_density(model, 1.0, grid.half_width())?.on_grid(grid)?,
    )?;
    let mut worst = 0.0f64;
    for (k, &t) in times.iter().enumerate() {
        let m = 2.0 * (-t).exp();
        let p = curve.field(k);
        let h = free_energy(model, &p)? - f_inf;
        let i = dissipation(model, &p)?;
        worst = worst
            .max((h - 0.5 * m * m).abs() / (0.5 * m * m))
            .max((i - m * m).abs() / (m * m));
    }
    table.push(
        "OU closed forms (H, I)",
        worst,
        "<= 0.01 relative",
        worst <= 0.01,
    );
    Ok(())
}

pub fn verify(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<VerifyTable, CliError> {
    let table = run_checks(cfg)?;
    let mut dir = artifacts(cfg, Some(cfg.particles.seed))?;
    let rows: Vec<_> = table
        .rows
        .iter()
        .map(|r| {
            let result = match r.pass {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "skip",
            };
            row![r.name.as_str(), r.value, r.threshold.as_str(), result]
        })
        .collect();
    dir.csv(
        "verify.csv",
        &["check", "value", "threshold", "result"],
        &rows,
    )?;
    write!(out, "{}", table.render())?;
    list_written(&dir, out)?;
    Ok(table)
}
