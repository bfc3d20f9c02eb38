//! Energy, entropy and dissipation functionals on grid densities, and the
//! pointwise dissipation rate of the energy process `θ = φ(p) + Φ`.

use crate::error::{Error, Result};
use crate::fpe::DensityCurve;
use crate::grid::{max_value, DensityField, Grid, MASK_FRACTION};
use crate::models::{bose_a, stationary_density, Family, MobilityModel};
use crate::quadrature::{self, Tolerance};

fn is_masked(p: f64, p_max: f64) -> bool {
    p <= 0.0 || p < MASK_FRACTION * p_max
}

fn check_same(p: &DensityField, q: &DensityField) -> Result<()> {
    if p.grid != q.grid {
        return Err(Error::GridMismatch(
            "densities live on different grids".into(),
        ));
    }
    let (mp, mq) = (p.mass(), q.mass());
    if (mp - mq).abs() > 1e-6 * mp.abs().max(mq.abs()).max(1.0) {
        return Err(Error::InvalidDensity(format!(
            "mass mismatch: {mp} vs {mq}"
        )));
    }
    Ok(())
}

/// `F(p) = ∫ (η(p) + Φ p) dx`.
pub fn free_energy(model: &MobilityModel, p: &DensityField) -> Result<f64> {
    let grid = p.grid;
    let mut sum = 0.0;
    for (i, &v) in p.values.iter().enumerate() {
        let eta = if v == 0.0 && !model.unbounded_below() {
            0.0
        } else {
            model.eta(v)
        };
        if !eta.is_finite() {
            return Err(Error::Domain {
                what: "eta",
                value: v,
            });
        }
        sum += eta + model.potential.value(grid.x(i)) * v;
    }
    Ok(sum * grid.dx())
}

/// `H(p | q) = F(p) − F(q)`.
pub fn relative_entropy(model: &MobilityModel, p: &DensityField, q: &DensityField) -> Result<f64> {
    check_same(p, q)?;
    Ok(free_energy(model, p)? - free_energy(model, q)?)
}

/// `∫ (η(p) − η(q) − g(q)(p − q)) dx`, which equals the relative entropy
/// when `q` is stationary.
pub fn bregman_entropy(model: &MobilityModel, p: &DensityField, q: &DensityField) -> Result<f64> {
    check_same(p, q)?;
    let mut sum = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        if b == 0.0 {
            if a == 0.0 {
                continue;
            }
            return Ok(f64::INFINITY);
        }
        let eta_a = if a == 0.0 && !model.unbounded_below() {
            0.0
        } else {
            model.eta(a)
        };
        sum += eta_a - model.eta(b) - model.g(b) * (a - b);
    }
    if sum.is_nan() {
        return Err(Error::Numerical("bregman integrand is not finite".into()));
    }
    Ok(sum * p.grid.dx())
}

/// `E_g(p) = ∫ ω_ψ(1/p) p dx`.
pub fn generalized_entropy(model: &MobilityModel, p: &DensityField) -> Result<f64> {
    let kit = model.entropy_kit()?;
    let mut sum = 0.0;
    for &v in &p.values {
        if v > 0.0 {
            let psi = model.psi(v);
            if !(psi > 0.0) {
                return Err(Error::Domain {
                    what: "psi",
                    value: v,
                });
            }
        }
        sum += kit.weighted_omega(v);
    }
    Ok(sum * p.grid.dx())
}

/// `∇g(p)` at cell centres. Cells below the mask get 0; stencils touching a
/// zero density fall back to `f'(p) ∇p / h(p)`.
pub fn g_gradient(model: &MobilityModel, p: &DensityField) -> Result<Vec<f64>> {
    let p_max = p.max();
    let gvals: Vec<f64> = p.values.iter().map(|&v| model.g(v)).collect();
    let direct = p.grid.gradient(&gvals)?;
    let dp = p.grid.gradient(&p.values)?;
    Ok(p.values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if is_masked(v, p_max) {
                0.0
            } else if direct[i].is_finite() {
                direct[i]
            } else {
                model.df(v) * dp[i] / model.h(v)
            }
        })
        .collect())
}

/// `∇(g(p) + Φ)` at cell centres.
pub fn potential_gradient(model: &MobilityModel, p: &DensityField) -> Result<Vec<f64>> {
    let mut v = g_gradient(model, p)?;
    for (i, w) in v.iter_mut().enumerate() {
        *w += model.potential.grad(p.grid.x(i));
    }
    Ok(v)
}

/// Integrand `|∇(g(p) + Φ)|² h(p)` of the dissipation.
pub fn dissipation_density(model: &MobilityModel, p: &DensityField) -> Result<Vec<f64>> {
    let a = potential_gradient(model, p)?;
    Ok(p.values
        .iter()
        .zip(&a)
        .map(|(&v, &a)| model.h(v) * a * a)
        .collect())
}

/// `I(p) = ∫ |∇(g(p) + Φ)|² b(p) p dx`.
pub fn dissipation(model: &MobilityModel, p: &DensityField) -> Result<f64> {
    let d = dissipation_density(model, p)?;
    let i = p.grid.integrate(&d);
    if !i.is_finite() {
        return Err(Error::Numerical("dissipation is not finite".into()));
    }
    Ok(i)
}

/// `I_g(p | q) = ∫ |∇(g(p) − g(q))|² h(p) dx`.
pub fn relative_fisher(model: &MobilityModel, p: &DensityField, q: &DensityField) -> Result<f64> {
    check_same(p, q)?;
    let a = g_gradient(model, p)?;
    let b = g_gradient(model, q)?;
    let d: Vec<f64> = (0..a.len())
        .map(|i| {
            let w = a[i] - b[i];
            model.h(p.values[i]) * w * w
        })
        .collect();
    Ok(p.grid.integrate(&d))
}

/// `−div(h(p) ∇(g(p) + Φ))`, written as `−∇(∇f(p) + h(p) Φ')` and
/// evaluated with central differences.
pub fn wh_gradient(model: &MobilityModel, p: &DensityField) -> Result<Vec<f64>> {
    let grid = p.grid;
    let fvals: Vec<f64> = p.values.iter().map(|&v| model.f(v)).collect();
    let mut inner = grid.gradient(&fvals)?;
    for (i, w) in inner.iter_mut().enumerate() {
        *w += model.h(p.values[i]) * model.potential.grad(grid.x(i));
    }
    Ok(grid.gradient(&inner)?.into_iter().map(|v| -v).collect())
}

/// `∫ |∇g(p) + ∇Φ|² h(p) dx`, the squared norm of the gradient.
pub fn wh_gradient_norm_sq(model: &MobilityModel, p: &DensityField) -> Result<f64> {
    dissipation(model, p)
}

/// Density and its first two derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalJet {
    pub p: f64,
    pub dp: f64,
    pub d2p: f64,
}

/// `D = φ'(p) div(Φ' b(p) p + ∇f(p)) + Δθ f(p)/p − ∇θ Φ' b(p)` with
/// `θ = φ(p) + Φ`.
pub fn rate_d_generic(model: &MobilityModel, jet: LocalJet, x: f64) -> f64 {
    rate_d_terms(model, jet, x).iter().sum()
}

/// The three summands of the generic rate. Their magnitudes set the scale
/// against which rounding in `D` should be judged near its zero crossings.
pub fn rate_d_terms(model: &MobilityModel, jet: LocalJet, x: f64) -> [f64; 3] {
    let LocalJet { p, dp, d2p } = jet;
    let grad_phi = model.potential.grad(x);
    let lap_phi = model.potential.laplacian(x);
    let b = model.b(p);
    let div = lap_phi * b * p
        + grad_phi * (model.db(p) * p + b) * dp
        + model.d2f(p) * dp * dp
        + model.df(p) * d2p;
    let d1 = model.dphi(p);
    let d2 = model.d2phi(p);
    let grad_theta = d1 * dp + grad_phi;
    let lap_theta = d2 * dp * dp + d1 * d2p + lap_phi;
    [
        d1 * div,
        lap_theta * model.f(p) / p,
        -grad_theta * grad_phi * b,
    ]
}

/// Hand-expanded `D` for the Fermi-Dirac, Bose and power families under
/// `Φ = x²/2`.
pub fn rate_d_specialized(model: &MobilityModel, jet: LocalJet, x: f64) -> Result<f64> {
    if !model.potential.bumps.is_empty() {
        return Err(Error::Unsupported(
            "specialized rate with a perturbed potential".into(),
        ));
    }
    let LocalJet { p, dp, d2p } = jet;
    if !(p > 0.0 && p.is_finite() && dp.is_finite() && d2p.is_finite()) {
        return Err(Error::Domain {
            what: "specialized rate",
            value: p,
        });
    }
    let x2 = x * x;
    let dp2 = dp * dp;
    let d = match &model.family {
        Family::FermiDirac => {
            let l = (-p).ln_1p();
            l * (1.0 - 1.0 / p + x * dp / p - 2.0 * d2p / (p * p) + 2.0 * dp2 / (p * p * p))
                + dp2 / (p * p * (1.0 - p))
                - x2 * (1.0 - p)
                + 1.0
        }
        Family::Bose { gamma } => {
            let g = *gamma;
            let pg = p.powf(g);
            let lg = g * p.ln() - pg.ln_1p();
            let a = bose_a(g, p);
            lg * (2.0 * d2p / (g * p) + (1.0 + pg) / g + x * dp * p.powf(g - 1.0)
                - 2.0 * dp2 / (g * p * p))
                + a * (-2.0 * d2p / (g * p * p) - (1.0 + pg) / (g * p) - x * dp * p.powf(g - 2.0)
                    + 2.0 * dp2 / (g * p * p * p))
                + dp2 / (p * p)
                - p.powf(g - 2.0) * dp2 / (1.0 + pg)
                + 1.0
                - x2 * (1.0 + pg)
        }
        Family::Power { alpha } if *alpha == 1.0 => {
            let l = p.ln();
            let p3 = p * p * p;
            l + x * dp * l / p + 2.0 * d2p * l / (p * p) + dp2 / p3 - 2.0 * l * dp2 / p3 + 1.0
                - x2 * p
        }
        Family::Power { alpha } => {
            let a = *alpha;
            let k = 1.0 - a;
            1.0 / k + a * x * dp / (k * p) + 2.0 * d2p / (k * p.powf(1.0 + a))
                - (1.0 + a) * dp2 / (k * p.powf(2.0 + a))
                + 1.0
                - x2 * p.powf(a)
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "no specialized rate for the {} model",
                model.name
            )))
        }
    };
    Ok(d)
}

/// Jets at every cell from central differences.
pub fn jets(p: &DensityField) -> Result<Vec<LocalJet>> {
    let dp = p.grid.gradient(&p.values)?;
    let d2p = p.grid.laplacian(&p.values)?;
    Ok((0..p.values.len())
        .map(|i| LocalJet {
            p: p.values[i],
            dp: dp[i],
            d2p: d2p[i],
        })
        .collect())
}

/// Generic `D` at every cell; masked cells get 0.
pub fn rate_d_field(model: &MobilityModel, p: &DensityField) -> Result<Vec<f64>> {
    let p_max = p.max();
    Ok(jets(p)?
        .into_iter()
        .enumerate()
        .map(|(i, jet)| {
            if is_masked(jet.p, p_max) {
                0.0
            } else {
                rate_d_generic(model, jet, p.grid.x(i))
            }
        })
        .collect())
}

/// Generic `D` at one snapshot and cell of a curve.
pub fn rate_d_at(
    model: &MobilityModel,
    curve: &DensityCurve,
    t_index: usize,
    x_index: usize,
) -> Result<f64> {
    if t_index >= curve.len() || x_index >= curve.grid.n_cells() {
        return Err(Error::InvalidParameter(format!(
            "index ({t_index}, {x_index}) outside the curve"
        )));
    }
    Ok(rate_d_field(model, &curve.field(t_index))?[x_index])
}

/// `∫ |∇p|²/p dx` with the zero-density convention.
pub fn fisher_information(p: &DensityField) -> Result<f64> {
    let dp = p.grid.gradient(&p.values)?;
    let p_max = p.max();
    let d: Vec<f64> = p
        .values
        .iter()
        .zip(&dp)
        .map(|(&v, &g)| if is_masked(v, p_max) { 0.0 } else { g * g / v })
        .collect();
    Ok(p.grid.integrate(&d))
}

/// `∫_0^T ∫ |∇p|²/p dx dt`, trapezoid rule in time.
pub fn log_gradient_energy(curve: &DensityCurve) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two snapshots".into(),
        ));
    }
    let vals = (0..curve.len())
        .map(|k| fisher_information(&curve.field(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(trapezoid(&curve.times, &vals))
}

pub fn trapezoid(t: &[f64], v: &[f64]) -> f64 {
    t.windows(2)
        .zip(v.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Second-order derivative of samples on a non-uniform time grid: centred at
/// interior points, one-sided at the ends.
pub fn time_derivative(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = t.len();
    assert_eq!(n, v.len());
    match n {
        0 => return vec![],
        1 => return vec![0.0],
        2 => {
            let s = (v[1] - v[0]) / (t[1] - t[0]);
            return vec![s, s];
        }
        _ => {}
    }
    let mut out = vec![0.0; n];
    for k in 1..n - 1 {
        let h1 = t[k] - t[k - 1];
        let h2 = t[k + 1] - t[k];
        out[k] = -h2 / (h1 * (h1 + h2)) * v[k - 1]
            + (h2 - h1) / (h1 * h2) * v[k]
            + h1 / (h2 * (h1 + h2)) * v[k + 1];
    }
    let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
    out[0] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * v[0] + (h1 + h2) / (h1 * h2) * v[1]
        - h1 / (h2 * (h1 + h2)) * v[2];
    let (h1, h2) = (t[n - 2] - t[n - 3], t[n - 1] - t[n - 2]);
    out[n - 1] = h2 / (h1 * (h1 + h2)) * v[n - 3] - (h1 + h2) / (h1 * h2) * v[n - 2]
        + (2.0 * h2 + h1) / (h2 * (h1 + h2)) * v[n - 1];
    out
}

/// `∫ x² p dx` for every snapshot.
pub fn second_moments(curve: &DensityCurve) -> Vec<f64> {
    let x2: Vec<f64> = curve.grid.centers().iter().map(|x| x * x).collect();
    curve
        .snapshots
        .iter()
        .map(|s| {
            let prod: Vec<f64> = s.iter().zip(&x2).map(|(a, b)| a * b).collect();
            curve.grid.integrate(&prod)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentReport {
    pub times: Vec<f64>,
    pub moments: Vec<f64>,
    pub bound: Vec<f64>,
    pub ok: bool,
}

/// Gronwall bound on `E|X(t)|²` from the initial moment, the growth constants
/// of `Φ` and the bounds `b ≤ b₁`, `f' ≤ γ₂` over `[0, p_max]`.
pub fn moment_bound(model: &MobilityModel, initial: f64, p_max: f64, t: f64) -> Result<f64> {
    let (c, _) = model.potential.growth_constants();
    let m_r = model.potential.inner_drift_bound();
    let (_, b1) = model.mobility_bounds(p_max);
    let (_, gamma2) = model.f_slope_bounds(p_max);
    let d = model.dim as f64;
    let slope = 2.0 * m_r * b1 + 2.0 * d * gamma2;
    let rate = 2.0 * b1 * c;
    if t == 0.0 {
        return Ok(initial);
    }
    let tail = quadrature::integrate(
        |u| (initial + slope * u) * (rate * (t - u)).exp(),
        0.0,
        t,
        Tolerance {
            abs: 1e-10,
            rel: 1e-12,
            max_intervals: 500,
        },
    )?;
    Ok(initial + slope * t + rate * tail)
}

pub fn second_moment_check(
    model: &MobilityModel,
    times: &[f64],
    moments: &[f64],
    p_max: f64,
) -> Result<SecondMomentReport> {
    if times.is_empty() || times.len() != moments.len() {
        return Err(Error::InvalidParameter(
            "times and moments must match".into(),
        ));
    }
    let t0 = times[0];
    let bound = times
        .iter()
        .map(|&t| moment_bound(model, moments[0], p_max, t - t0))
        .collect::<Result<Vec<_>>>()?;
    let ok = moments.iter().zip(&bound).all(|(m, b)| m <= b);
    Ok(SecondMomentReport {
        times: times.to_vec(),
        moments: moments.to_vec(),
        bound,
        ok,
    })
}

/// Largest density over all snapshots.
pub fn curve_max(curve: &DensityCurve) -> f64 {
    curve
        .snapshots
        .iter()
        .map(|s| max_value(s))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    pub free_energy: Vec<f64>,
    pub relative_entropy: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub dfdt: Vec<f64>,
    pub residual: Vec<f64>,
    pub metric_derivative: Option<Vec<f64>>,
}

impl EnergyReport {
    /// `max |dF/dt + I|` over interior snapshots.
    pub fn max_interior_residual(&self) -> f64 {
        let n = self.residual.len();
        if n < 3 {
            return f64::NAN;
        }
        self.residual[1..n - 1]
            .iter()
            .fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn max_dissipation(&self) -> f64 {
        self.dissipation.iter().cloned().fold(0.0, f64::max)
    }
}

/// Stationary density with the curve's mass on the curve's grid.
pub fn stationary_on(model: &MobilityModel, grid: Grid, mass: f64) -> Result<DensityField> {
    stationary_density(model, mass, grid.half_width())?.on_grid(grid)
}

/// F, `F − F(p_∞)`, I and the dissipation-identity residual along a curve.
/// The reference defaults to the stationary density of equal mass.
pub fn energy_report(
    model: &MobilityModel,
    curve: &DensityCurve,
    reference: Option<&DensityField>,
) -> Result<EnergyReport> {
    let fields: Vec<DensityField> = (0..curve.len()).map(|k| curve.field(k)).collect();
    let f = fields
        .iter()
        .map(|p| free_energy(model, p))
        .collect::<Result<Vec<_>>>()?;
    let diss = fields
        .iter()
        .map(|p| dissipation(model, p))
        .collect::<Result<Vec<_>>>()?;
    let f_ref = match reference {
        Some(r) => free_energy(model, r)?,
        None => {
            let mass = fields.first().map(|p| p.mass()).unwrap_or(1.0);
            free_energy(model, &stationary_on(model, curve.grid, mass)?)?
        }
    };
    let dfdt = time_derivative(&curve.times, &f);
    let residual = dfdt.iter().zip(&diss).map(|(a, b)| a + b).collect();
    Ok(EnergyReport {
        times: curve.times.clone(),
        relative_entropy: f.iter().map(|v| v - f_ref).collect(),
        free_energy: f,
        dissipation: diss,
        dfdt,
        residual,
        metric_derivative: None,
    })
}
