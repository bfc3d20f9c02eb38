//! Acceptance suite at desk scale ([-12, 12], 1200 cells unless noted).
//! Prints one PASS/FAIL line per criterion and exits non-zero on any failure.
use mvflow::fpe::{evolve, ordering_violation, rhs, uniform_times, DensityCurve, FpeConfig};
use mvflow::functionals::{
    bregman_entropy, curve_max, dissipation, energy_report, free_energy, jets, rate_d_specialized,
    rate_d_terms, relative_entropy, second_moment_check, second_moments, stationary_on,
    wh_gradient, wh_gradient_norm_sq,
};
use mvflow::grid::gaussian;
use mvflow::models::{stationary_density, Family};
use mvflow::particles::{
    conditional_rate_estimate, martingale_test, simulate, step_times, trajectory_energy,
    CurveDensity, DensitySource, InverseCdf, SimulationConfig,
};
use mvflow::perturbation::{slope_comparison, BumpField};
use mvflow::transport::{metric_derivative, w2_quantile, wh_distance, TransportConfig};
use mvflow::{DensityField, Grid, MobilityModel};
use mvflow_cli::config::ExperimentConfig;
use mvflow_cli::figures::{figure_summary, Figure};
use mvflow_cli::verify::smooth_density;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

const HALF: f64 = 12.0;
const CELLS: usize = 1200;

fn builtins() -> Vec<MobilityModel> {
    vec![
        MobilityModel::linear(),
        MobilityModel::fermi_dirac(),
        MobilityModel::bose(1.0).unwrap(),
        MobilityModel::bose(3.0).unwrap(),
        MobilityModel::power(1.0).unwrap(),
        MobilityModel::power(2.0).unwrap(),
    ]
}

fn is_power(model: &MobilityModel) -> bool {
    matches!(model.family, Family::Power { .. })
}

/// Half stationary profile, half N(1.5, 0.49), unit mass.
fn test_density(model: &MobilityModel, grid: Grid) -> DensityField {
    let st = stationary_on(model, grid, 1.0).unwrap();
    let g = gaussian(1.5, 0.49);
    let vals = (0..grid.n_cells())
        .map(|i| 0.5 * st.values[i] + 0.5 * g(grid.x(i)))
        .collect();
    DensityField::new(grid, vals, 0.0)
        .unwrap()
        .normalized(1.0)
        .unwrap()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            detail: String::new(),
        }
    }

    /// Records one sub-check; failing ones are marked in the detail text.
    fn check(&mut self, ok: bool, what: impl std::fmt::Display) {
        self.pass &= ok;
        let sep = if self.detail.is_empty() { "" } else { "; " };
        let mark = if ok { "" } else { "[fail] " };
        write!(self.detail, "{sep}{mark}{what}").unwrap();
    }
}

/// Unit-mass curves from the test density to t = 2, 41 snapshots.
fn base_curves() -> Vec<(MobilityModel, DensityCurve)> {
    let grid = Grid::new(HALF, CELLS).unwrap();
    builtins()
        .into_iter()
        .map(|m| {
            let init = test_density(&m, grid);
            let curve = evolve(
                &m,
                &init,
                &uniform_times(0.0, 2.0, 41),
                FpeConfig::default(),
            )
            .unwrap();
            (m, curve)
        })
        .collect()
}

fn dissipation_identity(curves: &[(MobilityModel, DensityCurve)]) -> Outcome {
    let mut o = Outcome::new();
    let fine_grid = Grid::new(HALF, 2 * CELLS).unwrap();
    for (model, curve) in curves {
        let coarse = energy_report(model, curve, None).unwrap();
        let ratio = coarse.max_interior_residual() / coarse.max_dissipation();
        let init = test_density(model, fine_grid);
        let fine_curve = evolve(
            model,
            &init,
            &uniform_times(0.0, 2.0, 81),
            FpeConfig::default(),
        )
        .unwrap();
        let fine = energy_report(model, &fine_curve, None).unwrap();
        let gain = coarse.max_interior_residual() / fine.max_interior_residual();
        o.check(
            ratio <= 0.02 && gain >= 2.0,
            format!(
                "{} {ratio:.2e} of max I, refinement gain {gain:.2}",
                model.name
            ),
        );
    }
    o
}

fn linear_closed_forms() -> Outcome {
    let mut o = Outcome::new();
    let lin = MobilityModel::linear();
    let grid = Grid::new(HALF, CELLS).unwrap();
    let init = DensityField::from_fn(grid, gaussian(2.0, 1.0), 0.0).unwrap();
    let times = [0.2, 0.5, 1.0, 1.5, 2.0];
    let curve = evolve(&lin, &init, &times, FpeConfig::default()).unwrap();
    let q = DensityField::from_fn(grid, gaussian(0.0, 1.0), 0.0).unwrap();
    // N(m, s²) with η(r) = r ln r − r: F = −ln(2πe s²)/2 − 1 + (m² + s²)/2,
    // H = (m² + s² − 1 − ln s²)/2,
    // I = m² + (s² − 1)²/s²; along OU from N(2, 1), m = 2e^{−t} and s² = 1
    let h0 = relative_entropy(&lin, &init, &q).unwrap();
    let mut worst = 0.0f64;
    let mut decay_ok = true;
    for (k, &t) in times.iter().enumerate() {
        let p = curve.field(k);
        let (m, s2) = (2.0 * (-t).exp(), 1.0f64);
        let f_exact = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s2).ln() - 1.0
            + 0.5 * (m * m + s2);
        let h_exact = 0.5 * (m * m + s2 - 1.0 - s2.ln());
        let i_exact = m * m + (s2 - 1.0).powi(2) / s2;
        let f = free_energy(&lin, &p).unwrap();
        let h = relative_entropy(&lin, &p, &q).unwrap();
        let i = dissipation(&lin, &p).unwrap();
        worst = worst
            .max((f - f_exact).abs() / f_exact.abs())
            .max((h - h_exact).abs() / h_exact)
            .max((i - i_exact).abs() / i_exact);
        decay_ok &= h <= (-2.0 * t).exp() * h0 * 1.01;
    }
    o.check(
        worst <= 0.01,
        format!("F, H, I worst relative error {worst:.2e} at 5 times"),
    );
    o.check(decay_ok, "H(t) <= e^{-2t} H(0) (1% slack)");
    o
}

fn gradient_flow_duality() -> Outcome {
    let mut o = Outcome::new();
    for model in builtins() {
        let errs: Vec<f64> = [600, 1200, 2400]
            .iter()
            .map(|&n| {
                let grid = Grid::new(HALF, n).unwrap();
                let p = smooth_density(&model, grid).unwrap();
                let neg: Vec<f64> = rhs(&model, &p).unwrap().iter().map(|v| -v).collect();
                sup_diff(&wh_gradient(&model, &p).unwrap(), &neg)
            })
            .collect();
        let slope = errs
            .windows(2)
            .map(|w| (w[0] / w[1]).log2())
            .fold(f64::INFINITY, f64::min);
        let grid = Grid::new(HALF, CELLS).unwrap();
        let p = test_density(&model, grid);
        let a = wh_gradient_norm_sq(&model, &p).unwrap();
        let b = dissipation(&model, &p).unwrap();
        let rel = (a - b).abs() / b;
        o.check(
            slope >= 1.9 && rel <= 1e-10,
            format!("{} slope {slope:.2}, |norm² − I|/I {rel:.1e}", model.name),
        );
    }
    o
}

fn metric_speed() -> Outcome {
    let mut o = Outcome::new();
    // transport runs on 300 cells: dx = 0.08, the primal-dual cost grows with n
    let grid = Grid::new(HALF, 300).unwrap();
    let lin = MobilityModel::linear();
    let cfg = TransportConfig::default();
    let pairs = [
        ((0.0, 1.0), (1.0, 1.0)),
        ((-1.0, 0.5), (1.0, 1.5)),
        ((0.0, 2.0), (0.0, 0.5)),
        ((-2.0, 1.0), (1.5, 0.7)),
        ((0.5, 0.3), (-0.5, 1.2)),
    ];
    let mut worst = 0.0f64;
    let mut oracle_err = 0.0f64;
    let mut converged = true;
    for ((m0, v0), (m1, v1)) in pairs {
        let p0 = DensityField::from_fn(grid, gaussian(m0, v0), 0.0).unwrap();
        let p1 = DensityField::from_fn(grid, gaussian(m1, v1), 0.0)
            .unwrap()
            .normalized(p0.mass())
            .unwrap();
        let (w, sol) = wh_distance(&lin, &p0, &p1, cfg).unwrap();
        let w2 = w2_quantile(&p0, &p1).unwrap();
        // Gaussian W2: √((m0 − m1)² + (s0 − s1)²)
        let exact = ((m0 - m1).powi(2) + (v0.sqrt() - v1.sqrt()).powi(2)).sqrt();
        oracle_err = oracle_err.max((w2 - exact).abs() / exact);
        worst = worst.max((w - w2).abs() / w2);
        converged &= sol.converged;
    }
    o.check(
        worst <= 0.02 && converged,
        format!("linear W_h vs quantile W2 worst {worst:.2e} on 5 pairs, converged {converged}"),
    );
    o.check(
        oracle_err <= 0.01,
        format!("quantile W2 vs Gaussian closed form {oracle_err:.1e}"),
    );
    let deltas = [0.1, 0.05, 0.025];
    let t0 = 0.2;
    let md_cfg = TransportConfig {
        n_time: 4,
        ..TransportConfig::default()
    };
    for model in [lin, MobilityModel::fermi_dirac()] {
        let init = DensityField::from_fn(grid, gaussian(1.5, 0.3), 0.0).unwrap();
        let times: Vec<f64> = [t0, t0 + 0.025, t0 + 0.05, t0 + 0.1].to_vec();
        let curve = evolve(&model, &init, &times, FpeConfig::default()).unwrap();
        let md = metric_derivative(&model, &curve, t0, &deltas, md_cfg).unwrap();
        o.check(
            md.relative_error <= 0.05,
            format!(
                "{} speed {:.4} vs √I {:.4} ({:.1e})",
                model.name, md.extrapolated, md.sqrt_dissipation, md.relative_error
            ),
        );
    }
    o
}

fn trajectorial_decomposition() -> Outcome {
    let mut o = Outcome::new();
    let grid = Grid::new(HALF, CELLS).unwrap();
    let dt = 0.01;
    let t_end = 1.0;
    for model in builtins() {
        let n_paths = if matches!(model.family, Family::Linear) {
            10_000
        } else {
            500
        };
        let init = test_density(&model, grid);
        let curve = evolve(
            &model,
            &init,
            &step_times(0.0, t_end, dt),
            FpeConfig::default(),
        )
        .unwrap();
        let density = CurveDensity::new(&curve).unwrap();
        let sim = SimulationConfig {
            n_paths,
            dt,
            t_end,
            master_seed: 11,
        };
        let ens = simulate(&model, &DensitySource::Curve(&density), sim).unwrap();
        let paths = trajectory_energy(&ens, &model, &density).unwrap();
        let report = martingale_test(&paths).unwrap();
        let worst = report
            .mean_residual
            .iter()
            .zip(&report.std_error)
            .filter(|(_, s)| **s > 0.0)
            .fold(0.0f64, |m, (a, s)| m.max(a.abs() / s));

        let t0 = 0.2;
        let k0 = curve.index_of(t0).unwrap();
        let inv = InverseCdf::new(&curve.field(k0)).unwrap();
        let starts: Vec<f64> = (0..100)
            .map(|j| inv.quantile((j as f64 + 0.5) / 100.0))
            .collect();
        let est =
            conditional_rate_estimate(&model, &density, t0, &starts, 0.04, 8, 1000, 5).unwrap();
        let share = est.iter().filter(|e| e.within(3.0)).count() as f64 / est.len() as f64;
        o.check(
            report.pass && share >= 0.95,
            format!(
                "{} martingale {n_paths} paths worst {worst:.2} SE, rates within 3 SE {:.0}%",
                model.name,
                100.0 * share
            ),
        );
    }
    // specialized D formulas at every grid point of an evolved snapshot
    let mut worst = 0.0f64;
    for model in builtins().into_iter().skip(1) {
        let init = if is_power(&model) {
            smooth_density(&model, grid).unwrap()
        } else {
            test_density(&model, grid)
        };
        let curve = evolve(&model, &init, &[0.05], FpeConfig::default()).unwrap();
        let p = curve.field(0);
        let pm = p.max();
        for (i, jet) in jets(&p).unwrap().into_iter().enumerate() {
            if jet.p < 1e-8 * pm {
                continue;
            }
            let x = grid.x(i);
            let terms = rate_d_terms(&model, jet, x);
            let generic: f64 = terms.iter().sum();
            let special = rate_d_specialized(&model, jet, x).unwrap();
            // rounding in a sum is relative to its summands
            let scale = terms
                .iter()
                .map(|t| t.abs())
                .sum::<f64>()
                .max(generic.abs())
                .max(special.abs());
            worst = worst.max((generic - special).abs() / scale);
        }
    }
    o.check(
        worst <= 1e-8,
        format!("specialized vs generic D worst {worst:.1e}"),
    );
    o
}

fn figure_reproduction() -> Outcome {
    let mut o = Outcome::new();
    let cfg = ExperimentConfig::default();
    for fig in [Figure::Fig2, Figure::Fig4, Figure::Fig6] {
        let s = figure_summary(&cfg, fig).unwrap();
        o.check(
            s.monotone.pass && s.fit.r_squared >= 0.98,
            format!(
                "{} {} R² {:.4} monotone {}",
                fig.name(),
                s.model,
                s.fit.r_squared,
                s.monotone.pass
            ),
        );
    }
    for fig in [Figure::Fig7, Figure::Fig8] {
        let s = figure_summary(&cfg, fig).unwrap();
        write!(
            o.detail,
            "; reported only: {} {} R² {:.4} monotone {} exponential {}",
            fig.name(),
            s.model,
            s.fit.r_squared,
            s.monotone.pass,
            s.exponential()
        )
        .unwrap();
    }
    o
}

fn structural_invariants(curves: &[(MobilityModel, DensityCurve)]) -> Outcome {
    let mut o = Outcome::new();
    for (model, curve) in curves {
        let masses = curve.masses();
        let drift = masses.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        let min = curve
            .snapshots
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let st = stationary_on(model, curve.grid, 1.0).unwrap();
        let h_min = (0..curve.len())
            .map(|k| bregman_entropy(model, &curve.field(k), &st).unwrap())
            .fold(f64::INFINITY, f64::min);
        let h_eq = bregman_entropy(model, &st, &st).unwrap();
        let moments = second_moments(curve);
        let gron = second_moment_check(model, &curve.times, &moments, curve_max(curve)).unwrap();
        let mid = curve.field(20);
        let betas = [
            BumpField::new(0.0, 1.0, 0.5).unwrap(),
            BumpField::new(1.0, 0.7, -0.3).unwrap(),
            BumpField::new(-1.5, 1.2, 1.0).unwrap(),
            BumpField::new(2.5, 0.5, 2.0).unwrap(),
            BumpField::new(0.5, 3.0, -0.8).unwrap(),
        ];
        let cs = slope_comparison(model, &mid, &betas).unwrap();
        let cs_ok = cs.iter().all(|s| s.lhs <= s.rhs * (1.0 + 1e-10));
        o.check(
            drift <= 1e-10 && min >= 0.0 && h_min > 0.0 && h_eq == 0.0 && gron.ok && cs_ok,
            format!(
                "{} mass drift {drift:.1e}, min p {min:.1e}, min H {h_min:.2e}, H(p∞) {h_eq}, Gronwall {}, slope inequality {}",
                model.name, gron.ok, cs_ok
            ),
        );
    }

    // Fermi-Dirac ordering between two stationary envelopes
    let fd = MobilityModel::fermi_dirac();
    let grid = Grid::new(HALF, CELLS).unwrap();
    let low = stationary_density(&fd, 0.5, HALF).unwrap();
    let high = stationary_density(&fd, 2.0, HALF).unwrap();
    let lower = low.on_grid(grid).unwrap();
    let upper = high.on_grid(grid).unwrap();
    let bump = gaussian(1.0, 0.3);
    let vals = (0..CELLS)
        .map(|i| {
            let x = grid.x(i);
            let w = (0.5 + 0.5 * (x - 1.0).tanh()) * (0.3 + bump(x)).min(1.0);
            lower.values[i] + w * (upper.values[i] - lower.values[i])
        })
        .collect();
    let mid = DensityField::new(grid, vals, 0.0).unwrap();
    let times = uniform_times(0.1, 2.0, 20);
    let run = |p: &DensityField| evolve(&fd, p, &times, FpeConfig::default()).unwrap();
    let (cl, cm, ch) = (run(&lower), run(&mid), run(&upper));
    let v = ordering_violation(&cl, &cm)
        .unwrap()
        .max(ordering_violation(&cm, &ch).unwrap());
    let cap = 1.0 / (1.0 + high.c.exp());
    let top = curve_max(&cm);
    o.check(
        v <= 1e-8 && top <= cap + 1e-8,
        format!("fermi-dirac ordering violation {v:.1e}, max p {top:.4} <= cap {cap:.4}"),
    );

    // bit-identical ensembles on 1 and 4 threads
    let (model, curve) = &curves[1];
    let density = CurveDensity::new(curve).unwrap();
    let sim = SimulationConfig {
        n_paths: 300,
        dt: 0.05,
        t_end: 2.0,
        master_seed: 99,
    };
    let on = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate(model, &DensitySource::Curve(&density), sim).unwrap())
    };
    let same = on(1).positions == on(4).positions && on(4).positions == on(4).positions;
    o.check(
        same,
        format!("ensembles on 1 and 4 threads identical: {same}"),
    );
    o
}

fn main() {
    let start = Instant::now();
    let curves = base_curves();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (
            "dissipation identity",
            Box::new(|| dissipation_identity(&curves)),
        ),
        ("linear closed forms", Box::new(linear_closed_forms)),
        ("gradient-flow duality", Box::new(gradient_flow_duality)),
        ("metric derivative", Box::new(metric_speed)),
        (
            "trajectorial decomposition",
            Box::new(trajectorial_decomposition),
        ),
        ("figure reproduction", Box::new(figure_reproduction)),
        (
            "structural invariants",
            Box::new(|| structural_invariants(&curves)),
        ),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                pass: false,
                detail: format!("panicked: {msg}"),
            }
        });
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {} {name}: {} ({:.1}s) {}",
            k + 1,
            if outcome.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
