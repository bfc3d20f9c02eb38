//! Compactly supported perturbations `β` of the confining potential.

use crate::error::{Error, Result};
use crate::fpe::{evolve, DensityCurve, FpeConfig};
use crate::functionals::{dissipation, free_energy, potential_gradient, time_derivative};
use crate::grid::DensityField;
use crate::models::MobilityModel;

/// `amplitude · exp(−1/(1 − r²))` with `r = (x − center)/radius`, zero for
/// `|r| ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpField {
    pub center: f64,
    pub radius: f64,
    pub amplitude: f64,
}

// below this value of 1 − r² the exponential factor underflows
const EDGE: f64 = 1.0 / 700.0;

impl BumpField {
    pub fn new(center: f64, radius: f64, amplitude: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bump radius must be positive, got {radius}"
            )));
        }
        if !(center.is_finite() && amplitude.is_finite()) {
            return Err(Error::InvalidParameter(
                "bump parameters must be finite".into(),
            ));
        }
        Ok(Self {
            center,
            radius,
            amplitude,
        })
    }

    fn local(&self, x: f64) -> Option<(f64, f64, f64)> {
        let r = (x - self.center) / self.radius;
        let q = 1.0 - r * r;
        if q <= EDGE {
            None
        } else {
            Some((r, q, (-1.0 / q).exp()))
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self.local(x) {
            Some((_, _, e)) => self.amplitude * e,
            None => 0.0,
        }
    }

    pub fn grad(&self, x: f64) -> f64 {
        match self.local(x) {
            Some((r, q, e)) => self.amplitude * e * (-2.0 * r / (q * q)) / self.radius,
            None => 0.0,
        }
    }

    pub fn laplacian(&self, x: f64) -> f64 {
        match self.local(x) {
            Some((r, q, e)) => {
                let q2 = q * q;
                let d2 = 4.0 * r * r / (q2 * q2) - 2.0 / q2 - 8.0 * r * r / (q2 * q);
                self.amplitude * e * d2 / (self.radius * self.radius)
            }
            None => 0.0,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.radius, self.center + self.radius)
    }
}

/// The model with `β` added to its potential.
pub fn perturbed_model(model: &MobilityModel, beta: BumpField) -> MobilityModel {
    let potential = model.potential.clone().with_bump(beta);
    model.clone().with_potential(potential)
}

/// Evolves `p_t0` under the potential `Φ + β`.
pub fn perturbed_curve(
    model: &MobilityModel,
    beta: BumpField,
    p_t0: &DensityField,
    times: &[f64],
    cfg: FpeConfig,
) -> Result<DensityCurve> {
    evolve(&perturbed_model(model, beta), p_t0, times, cfg)
}

/// `∫ ⟨∇(g(p) + Φ), ∇β⟩ h(p) dx`.
pub fn cross_term(model: &MobilityModel, beta: BumpField, p: &DensityField) -> Result<f64> {
    let a = potential_gradient(model, p)?;
    let d: Vec<f64> = a
        .iter()
        .enumerate()
        .map(|(i, &a)| a * beta.grad(p.grid.x(i)) * model.h(p.values[i]))
        .collect();
    Ok(p.grid.integrate(&d))
}

/// `dF/dt + I(p) + cross term` along a curve run with `Φ + β`, where `F` and
/// `I` use the unperturbed potential of `model`.
pub fn perturbed_dissipation_residual(
    model: &MobilityModel,
    beta: BumpField,
    curve: &DensityCurve,
) -> Result<Vec<f64>> {
    let fields: Vec<DensityField> = (0..curve.len()).map(|k| curve.field(k)).collect();
    let f = fields
        .iter()
        .map(|p| free_energy(model, p))
        .collect::<Result<Vec<_>>>()?;
    let dfdt = time_derivative(&curve.times, &f);
    fields
        .iter()
        .zip(dfdt)
        .map(|(p, d)| Ok(d + dissipation(model, p)? + cross_term(model, beta, p)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeReport {
    pub beta: BumpField,
    /// `⟨a, a + b⟩ / ‖a + b‖` with `a = ∇(g(p) + Φ)`, `b = ∇β`.
    pub lhs: f64,
    /// `‖a‖`.
    pub rhs: f64,
    pub gap: f64,
    /// Whether `a + b` is numerically a positive multiple of `a`.
    pub aligned: bool,
}

/// Cauchy-Schwarz comparison of the slope along `a + b` with `‖a‖` in
/// `L²(h(p) dx)`.
pub fn slope_comparison(
    model: &MobilityModel,
    p: &DensityField,
    betas: &[BumpField],
) -> Result<Vec<SlopeReport>> {
    let a = potential_gradient(model, p)?;
    let w: Vec<f64> = p.values.iter().map(|&v| model.h(v) * p.grid.dx()).collect();
    let dot = |x: &[f64], y: &[f64]| -> f64 { (0..x.len()).map(|i| w[i] * x[i] * y[i]).sum() };
    let aa = dot(&a, &a);
    betas
        .iter()
        .map(|&beta| {
            let s: Vec<f64> = a
                .iter()
                .enumerate()
                .map(|(i, &v)| v + beta.grad(p.grid.x(i)))
                .collect();
            let ss = dot(&s, &s);
            if !(ss > 0.0) {
                return Err(Error::Numerical("‖a + b‖ vanishes".into()));
            }
            let lhs = dot(&a, &s) / ss.sqrt();
            let rhs = aa.sqrt();
            // ‖a‖‖s‖ − ⟨a, s⟩ is zero exactly when s is a positive multiple of a
            let cos = dot(&a, &s) / (aa.sqrt() * ss.sqrt());
            Ok(SlopeReport {
                beta,
                lhs,
                rhs,
                gap: rhs - lhs,
                aligned: aa > 0.0 && 1.0 - cos <= 1e-8,
            })
        })
        .collect()
}
