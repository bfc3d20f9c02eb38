mod common;

use common::{builtins, gaussian_field, stationary, sup_diff, test_density};
use mvflow::fpe::{evolve, rhs, uniform_times, DensityCurve, FpeConfig};
use mvflow::functionals::*;
use mvflow::grid::{gaussian, DensityField, Grid};
use mvflow::models::{stationary_density, Family, MobilityModel};
use proptest::prelude::*;
use std::f64::consts::PI;

fn is_power(model: &MobilityModel) -> bool {
    matches!(model.family, Family::Power { .. })
}

/// A density with vanishing wall flux. Power models get their stationary
/// profile times an odd factor that is flat at the walls; the others a
/// Gaussian whose tails are far below rounding at the walls.
fn smooth_density(model: &MobilityModel, grid: Grid) -> DensityField {
    if is_power(model) {
        odd_perturbation(&stationary(model, grid), 0.5, 1.0, 0.4)
    } else {
        gaussian_field(grid, 0.3, 1.0)
    }
}

/// `q(x)(1 + amp (k(x − c) − k(x + c)))` with a unit-height Gaussian `k`.
/// Mass is unchanged for symmetric `q` and positivity holds for `|amp| < 1`.
fn odd_perturbation(q: &DensityField, amp: f64, centre: f64, width: f64) -> DensityField {
    let k = |y: f64| (-0.5 * y * y / (width * width)).exp();
    let vals = q
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = q.grid.x(i);
            v * (1.0 + amp * (k(x - centre) - k(x + centre)))
        })
        .collect();
    DensityField::new(q.grid, vals, 0.0).unwrap()
}

/// `[f(p) θ']` over both walls for a density that equals the stationary
/// profile there; this is what integration by parts leaves of `∫ D p dx + I`.
fn wall_term(model: &MobilityModel, half: f64) -> f64 {
    let p = stationary_density(model, 1.0, half).unwrap().value(half);
    if p > 0.0 {
        let dp = -half / model.dg(p);
        2.0 * model.f(p) * (model.dphi(p) * dp + half)
    } else {
        0.0
    }
}

fn weighted_average(p: &DensityField, v: &[f64]) -> f64 {
    let prod: Vec<f64> = v.iter().zip(&p.values).map(|(a, b)| a * b).collect();
    p.grid.integrate(&prod)
}

#[test]
fn gaussian_free_energy_closed_form() {
    let grid = Grid::new(12.0, 2400).unwrap();
    let p = gaussian_field(grid, 0.0, 1.0);
    let exact = -0.5 * (2.0 * PI * std::f64::consts::E).ln() - 1.0 + 0.5;
    let f = free_energy(&MobilityModel::linear(), &p).unwrap();
    assert!((f - exact).abs() < 1e-8, "{f} vs {exact}");
}

#[test]
fn gaussian_relative_entropy_and_fisher() {
    let lin = MobilityModel::linear();
    let grid = Grid::new(12.0, 2400).unwrap();
    let p = gaussian_field(grid, 2.0, 1.0);
    let q = gaussian_field(grid, 0.0, 1.0);
    assert!((relative_entropy(&lin, &p, &q).unwrap() - 2.0).abs() < 1e-6);
    assert!((relative_fisher(&lin, &p, &q).unwrap() - 4.0).abs() < 1e-4);
    assert!(relative_entropy(&lin, &q, &q).unwrap().abs() < 1e-14);
}

#[test]
fn gaussian_dissipation_closed_form() {
    let lin = MobilityModel::linear();
    let grid = Grid::new(14.0, 2800).unwrap();
    for (m, s2) in [(2.0, 1.0), (0.5, 2.0), (-1.0, 0.5)] {
        let exact = m * m + (s2 - 1.0) * (s2 - 1.0) / s2;
        let i = dissipation(&lin, &gaussian_field(grid, m, s2)).unwrap();
        assert!(
            (i - exact).abs() < 1e-4 * exact.max(1.0),
            "N({m},{s2}): {i} vs {exact}"
        );
    }
}

#[test]
fn bregman_form_matches_energy_difference() {
    let grid = Grid::new(8.0, 400).unwrap();
    for model in builtins() {
        let q = stationary(&model, grid);
        let p = test_density(&model, grid).normalized(q.mass()).unwrap();
        let a = relative_entropy(&model, &p, &q).unwrap();
        let b = bregman_entropy(&model, &p, &q).unwrap();
        assert!((a - b).abs() < 1e-6, "{}: {a} vs {b}", model.name);
        assert!(a > 0.0, "{}", model.name);
        assert!(relative_entropy(&model, &q, &q).unwrap().abs() < 1e-12);
    }
}

#[test]
fn stationary_density_minimizes_free_energy() {
    let grid = Grid::new(8.0, 400).unwrap();
    for model in builtins() {
        let st = stationary(&model, grid);
        let f0 = free_energy(&model, &st).unwrap();
        for k in 1..=5 {
            let shift = 0.2 * k as f64;
            let bump = gaussian(0.0, 0.25);
            let vals = st
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = grid.x(i);
                    v + 0.05 * (bump(x - shift) - bump(x + shift)) * x.signum().max(0.0)
                        + 0.05 * bump(x - shift).min(0.0)
                })
                .collect();
            // keep the mass fixed by renormalising
            let p = DensityField::new(grid, vals, 0.0)
                .unwrap()
                .normalized(st.mass())
                .unwrap();
            let f = free_energy(&model, &p).unwrap();
            assert!(f > f0, "{} shift {shift}: {f} <= {f0}", model.name);
        }
    }
}

#[test]
fn stationary_density_has_no_dissipation() {
    let grid = Grid::new(8.0, 400).unwrap();
    for model in builtins() {
        let st = stationary(&model, grid);
        let i = dissipation(&model, &st).unwrap();
        assert!(i.abs() <= 1e-6 * st.max(), "{}: {i}", model.name);
        let w = wh_gradient(&model, &st).unwrap();
        assert!(sup_diff(&w, &vec![0.0; 400]) < 1e-3, "{}", model.name);
    }
}

#[test]
fn relative_fisher_against_stationary_is_dissipation() {
    let grid = Grid::new(8.0, 400).unwrap();
    for model in builtins() {
        let p = test_density(&model, grid);
        let st = stationary(&model, grid);
        let a = relative_fisher(&model, &p, &st).unwrap();
        let b = dissipation(&model, &p).unwrap();
        assert!((a - b).abs() <= 1e-8 * b, "{}: {a} vs {b}", model.name);
        assert_eq!(relative_fisher(&model, &p, &p).unwrap(), 0.0);
    }
}

#[test]
fn gradient_norm_equals_dissipation() {
    let grid = Grid::new(8.0, 400).unwrap();
    for model in builtins() {
        let p = test_density(&model, grid);
        let a = wh_gradient_norm_sq(&model, &p).unwrap();
        let b = dissipation(&model, &p).unwrap();
        assert!((a - b).abs() <= 1e-10 * b, "{}: {a} vs {b}", model.name);
    }
}

#[test]
fn gradient_is_minus_pde_rhs_at_second_order() {
    for model in builtins() {
        let mut errs = vec![];
        for n in [300, 600, 1200, 2400] {
            let grid = Grid::new(12.0, n).unwrap();
            let p = smooth_density(&model, grid);
            let w = wh_gradient(&model, &p).unwrap();
            let r = rhs(&model, &p).unwrap();
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            errs.push(sup_diff(&w, &neg));
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!(slope >= 1.9, "{}: {errs:?}", model.name);
        }
    }
}

#[test]
fn average_rate_is_minus_dissipation() {
    for model in builtins() {
        let grid = Grid::new(12.0, 4800).unwrap();
        let p = smooth_density(&model, grid);
        let avg = weighted_average(&p, &rate_d_field(&model, &p).unwrap());
        let i = dissipation(&model, &p).unwrap();
        let wall = wall_term(&model, 12.0);
        assert!(
            (avg + i - wall).abs() <= 1e-3 * i,
            "{}: {avg} vs {i}",
            model.name
        );
    }
}

#[test]
fn linear_displaced_gaussian_rate_average() {
    let lin = MobilityModel::linear();
    let grid = Grid::new(12.0, 1200).unwrap();
    let p = gaussian_field(grid, 2.0, 1.0);
    let avg = weighted_average(&p, &rate_d_field(&lin, &p).unwrap());
    assert!((avg + 4.0).abs() < 1e-2, "{avg}");
}

#[test]
fn rate_vanishes_for_stationary_gaussian_jets() {
    let lin = MobilityModel::linear();
    for x in [-3.0, -0.5, 0.0, 1.2, 4.0] {
        let p = gaussian(0.0, 1.0)(x);
        let jet = LocalJet {
            p,
            dp: -x * p,
            d2p: (x * x - 1.0) * p,
        };
        assert!(rate_d_generic(&lin, jet, x).abs() < 1e-12);
    }
    // the same on a stationary curve with grid stencils
    let grid = Grid::new(10.0, 800).unwrap();
    let st = gaussian_field(grid, 0.0, 1.0);
    let curve = DensityCurve {
        grid,
        times: vec![0.0, 1.0],
        snapshots: vec![st.values.clone(), st.values.clone()],
        steps: 0,
    };
    // stencil error grows like x⁴dx², so stay in the bulk
    for i in [320, 400, 480] {
        assert!(rate_d_at(&lin, &curve, 1, i).unwrap().abs() < 1e-2);
    }
}

#[test]
fn equilibrium_rate_average_is_the_wall_term() {
    // At equilibrium the time-derivative part of D drops out and integration
    // by parts leaves ∫ D p dx = [f(p) θ'] over the two walls.
    for model in builtins() {
        let mut walls = vec![];
        for half in [8.0, 12.0, 50.0] {
            let n = (200.0 * half) as usize;
            let grid = Grid::new(half, n).unwrap();
            let st = stationary(&model, grid);
            let avg = weighted_average(&st, &rate_d_field(&model, &st).unwrap());
            let wall = wall_term(&model, half);
            // second-order stencils at dx = 0.005
            let tol = 5e-5 * wall.abs().max(1.0);
            assert!(
                (avg - wall).abs() <= tol,
                "{} L={half}: {avg} vs {wall}",
                model.name
            );
            walls.push(wall);
        }
        if !is_power(&model) {
            assert!(walls.iter().all(|w| w.abs() < 1e-10), "{}", model.name);
        }
        if model.name == "power(alpha=1)" {
            // heavy tails: the wall term only fades as L grows
            assert!(walls[0] > walls[1] && walls[1] > walls[2] && walls[2] < 0.7);
        }
    }
}

#[test]
fn specialized_rate_agrees_with_generic() {
    let cases = [
        MobilityModel::fermi_dirac(),
        MobilityModel::bose(1.0).unwrap(),
        MobilityModel::bose(3.0).unwrap(),
        MobilityModel::power(1.0).unwrap(),
        MobilityModel::power(2.0).unwrap(),
    ];
    let grid = Grid::new(8.0, 400).unwrap();
    for model in cases {
        let init = if is_power(&model) {
            smooth_density(&model, Grid::new(8.0, 400).unwrap())
        } else {
            test_density(&model, grid)
        };
        let curve = evolve(&model, &init, &[0.05], FpeConfig::default()).unwrap();
        let p = curve.field(0);
        let p_max = p.max();
        let mut worst = 0.0f64;
        for (i, jet) in jets(&p).unwrap().into_iter().enumerate() {
            if jet.p < 1e-8 * p_max {
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
        assert!(worst <= 1e-8, "{}: {worst:e}", model.name);
    }
}

#[test]
fn specialized_rate_rejects_linear_family() {
    let jet = LocalJet {
        p: 0.3,
        dp: 0.1,
        d2p: 0.0,
    };
    assert!(rate_d_specialized(&MobilityModel::linear(), jet, 0.0).is_err());
}

#[test]
fn log_gradient_energy_of_stationary_gaussian() {
    let grid = Grid::new(10.0, 1000).unwrap();
    let st = gaussian_field(grid, 0.0, 1.0);
    let curve = DensityCurve {
        grid,
        times: vec![0.0, 0.25, 0.5, 1.0],
        snapshots: vec![st.values.clone(); 4],
        steps: 0,
    };
    assert!((log_gradient_energy(&curve).unwrap() - 1.0).abs() < 1e-4);
    let evolved = evolve(
        &MobilityModel::linear(),
        &gaussian_field(grid, 2.0, 1.0),
        &uniform_times(0.0, 1.0, 5),
        FpeConfig::default(),
    )
    .unwrap();
    assert!(log_gradient_energy(&evolved).unwrap().is_finite());
}

#[test]
fn ou_second_moments_sit_below_gronwall_bound() {
    let lin = MobilityModel::linear();
    let grid = Grid::new(10.0, 400).unwrap();
    let curve = evolve(
        &lin,
        &gaussian_field(grid, 2.0, 1.0),
        &uniform_times(0.0, 2.0, 11),
        FpeConfig::default(),
    )
    .unwrap();
    let moments = second_moments(&curve);
    for (t, m) in curve.times.iter().zip(&moments) {
        let exact = 4.0 * (-2.0 * t).exp() + 1.0;
        assert!((m - exact).abs() < 2e-3, "t={t}: {m} vs {exact}");
    }
    let report = second_moment_check(&lin, &curve.times, &moments, curve_max(&curve)).unwrap();
    assert!(report.ok);
    assert_eq!(report.bound[0], moments[0]);
    assert!(report.bound.iter().all(|b| b.is_finite()));
}

#[test]
fn fermi_dirac_second_moments_bounded() {
    let fd = MobilityModel::fermi_dirac();
    let grid = Grid::new(8.0, 300).unwrap();
    let curve = evolve(
        &fd,
        &test_density(&fd, grid),
        &uniform_times(0.0, 2.0, 11),
        FpeConfig::default(),
    )
    .unwrap();
    let moments = second_moments(&curve);
    let report = second_moment_check(&fd, &curve.times, &moments, curve_max(&curve)).unwrap();
    assert!(report.ok, "{report:?}");
}

#[test]
fn dissipation_identity_holds_along_curves() {
    let grid = Grid::new(8.0, 400).unwrap();
    let times = uniform_times(0.0, 2.0, 41);
    for model in builtins() {
        let curve = evolve(
            &model,
            &test_density(&model, grid),
            &times,
            FpeConfig::default(),
        )
        .unwrap();
        let report = energy_report(&model, &curve, None).unwrap();
        let ratio = report.max_interior_residual() / report.max_dissipation();
        assert!(ratio <= 0.02, "{}: {ratio}", model.name);
        assert!(report.relative_entropy.iter().all(|h| *h >= -1e-8));
        assert!(report.dissipation.iter().all(|i| *i >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_entropy_is_nonnegative(
        which in 0usize..6,
        amp in -0.9f64..0.9,
        centre in 0.3f64..2.5,
        width in 0.1f64..0.6,
    ) {
        let model = &builtins()[which];
        let grid = Grid::new(8.0, 200).unwrap();
        let st = stationary(model, grid);
        let p = odd_perturbation(&st, amp, centre, width);
        let h = relative_entropy(model, &p, &st).unwrap();
        prop_assert!(h >= -1e-12, "{h}");
        if amp.abs() > 1e-2 {
            prop_assert!(h > 0.0);
        }
    }
}
