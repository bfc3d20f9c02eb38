//! Mobility models `(b, f, Φ)` and their derived scalar functions.
//!
//! For a model with mobility `b`, diffusion nonlinearity `f` and confining
//! potential `Φ`:
//!
//! * `h(s) = s b(s)`
//! * `g(s) = ∫_a^s f'(w) / (w b(w)) dw`, with `a` the family base point
//! * `η(r) = ∫_0^r g` (an antiderivative of `g` for the power family)
//! * `φ(u) = η(u) / u`
//! * `ψ(s) = s b(s) / f'(s)`, so that `g' = 1 / ψ`

use crate::error::{Error, Result};
use crate::perturbation::BumpField;
use crate::quadrature::{self, Tolerance};
use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::sync::Arc;

/// User-supplied mobility. Derived functions fall back to quadrature.
pub trait CustomMobility: Send + Sync + fmt::Debug {
    fn b(&self, s: f64) -> f64;
    fn db(&self, s: f64) -> f64;
    fn f(&self, s: f64) -> f64;
    fn df(&self, s: f64) -> f64;
    fn d2f(&self, s: f64) -> f64;
    /// Largest admissible density, if any.
    fn saturation(&self) -> Option<f64> {
        None
    }
    fn h_concave(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    Linear,
    FermiDirac,
    Bose { gamma: f64 },
    Power { alpha: f64 },
    Custom(Arc<dyn CustomMobility>),
}

/// `|x|²/2` plus any number of compactly supported bumps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Potential {
    pub bumps: Vec<BumpField>,
}

impl Potential {
    pub fn quadratic() -> Self {
        Self::default()
    }

    pub fn with_bump(mut self, bump: BumpField) -> Self {
        self.bumps.push(bump);
        self
    }

    pub fn value(&self, x: f64) -> f64 {
        let mut v = 0.5 * x * x;
        for b in &self.bumps {
            v += b.value(x);
        }
        v
    }

    pub fn grad(&self, x: f64) -> f64 {
        let mut v = x;
        for b in &self.bumps {
            v += b.grad(x);
        }
        v
    }

    pub fn laplacian(&self, x: f64) -> f64 {
        let mut v = 1.0;
        for b in &self.bumps {
            v += b.laplacian(x);
        }
        v
    }

    /// `(C, R)` with `|∇Φ(x)| ≤ C|x|` for `|x| > R`.
    pub fn growth_constants(&self) -> (f64, f64) {
        let r = self
            .bumps
            .iter()
            .map(|b| b.center.abs() + b.radius)
            .fold(0.0, f64::max);
        (1.0, r)
    }

    /// `max_{|x| ≤ R} |x Φ'(x)|` by sampling.
    pub fn inner_drift_bound(&self) -> f64 {
        let (_, r) = self.growth_constants();
        if r == 0.0 {
            return 0.0;
        }
        (0..=2000)
            .map(|k| {
                let x = -r + 2.0 * r * k as f64 / 2000.0;
                (x * self.grad(x)).abs()
            })
            .fold(0.0, f64::max)
    }

    fn min_on(&self, half_width: f64) -> f64 {
        let mut m = self.value(0.0);
        for k in 0..=4000 {
            let x = -half_width + 2.0 * half_width * k as f64 / 4000.0;
            m = m.min(self.value(x));
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derived {
    G,
    Eta,
    Phi,
    H,
    Psi,
}

#[derive(Debug, Clone)]
pub struct MobilityModel {
    pub name: String,
    pub family: Family,
    pub potential: Potential,
    pub dim: usize,
}

fn tight() -> Tolerance {
    Tolerance {
        abs: 1e-13,
        rel: 1e-13,
        max_intervals: 2000,
    }
}

impl MobilityModel {
    pub fn linear() -> Self {
        Self::with_family("linear", Family::Linear)
    }

    pub fn fermi_dirac() -> Self {
        Self::with_family("fermi-dirac", Family::FermiDirac)
    }

    pub fn bose(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "bose exponent must be at least 1, got {gamma}"
            )));
        }
        Ok(Self::with_family(
            &format!("bose(gamma={gamma})"),
            Family::Bose { gamma },
        ))
    }

    pub fn power(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "power exponent must be at least 1, got {alpha}"
            )));
        }
        Ok(Self::with_family(
            &format!("power(alpha={alpha})"),
            Family::Power { alpha },
        ))
    }

    pub fn custom(name: &str, mobility: Arc<dyn CustomMobility>) -> Self {
        Self::with_family(name, Family::Custom(mobility))
    }

    fn with_family(name: &str, family: Family) -> Self {
        Self {
            name: name.to_string(),
            family,
            potential: Potential::quadratic(),
            dim: 1,
        }
    }

    /// Builds a model from a family name and its parameters.
    pub fn build(family: &str, gamma: Option<f64>, alpha: Option<f64>) -> Result<Self> {
        match family {
            "linear" => Ok(Self::linear()),
            "fermi-dirac" => Ok(Self::fermi_dirac()),
            "bose" => {
                Self::bose(gamma.ok_or_else(|| Error::InvalidParameter("bose needs gamma".into()))?)
            }
            "power" => Self::power(
                alpha.ok_or_else(|| Error::InvalidParameter("power needs alpha".into()))?,
            ),
            other => Err(Error::InvalidParameter(format!("unknown family {other:?}"))),
        }
    }

    pub fn with_potential(mut self, potential: Potential) -> Self {
        self.potential = potential;
        self
    }

    pub fn b(&self, s: f64) -> f64 {
        match &self.family {
            Family::Linear => 1.0,
            Family::FermiDirac => 1.0 - s,
            Family::Bose { gamma } => 1.0 + s.powf(*gamma),
            Family::Power { alpha } => s.powf(*alpha),
            Family::Custom(c) => c.b(s),
        }
    }

    pub fn db(&self, s: f64) -> f64 {
        match &self.family {
            Family::Linear => 0.0,
            Family::FermiDirac => -1.0,
            Family::Bose { gamma } => gamma * s.powf(gamma - 1.0),
            Family::Power { alpha } => alpha * s.powf(alpha - 1.0),
            Family::Custom(c) => c.db(s),
        }
    }

    pub fn f(&self, s: f64) -> f64 {
        match &self.family {
            Family::Custom(c) => c.f(s),
            _ => s,
        }
    }

    pub fn df(&self, s: f64) -> f64 {
        match &self.family {
            Family::Custom(c) => c.df(s),
            _ => 1.0,
        }
    }

    pub fn d2f(&self, s: f64) -> f64 {
        match &self.family {
            Family::Custom(c) => c.d2f(s),
            _ => 0.0,
        }
    }

    /// `f(s)/s`, with the limit `f'(0)` at zero.
    pub fn diffusion_ratio(&self, s: f64) -> f64 {
        if s > 0.0 {
            self.f(s) / s
        } else {
            self.df(0.0)
        }
    }

    pub fn h(&self, s: f64) -> f64 {
        s * self.b(s)
    }

    pub fn dh(&self, s: f64) -> f64 {
        self.b(s) + s * self.db(s)
    }

    pub fn d2h(&self, s: f64) -> f64 {
        match &self.family {
            Family::Linear => 0.0,
            Family::FermiDirac => -2.0,
            Family::Bose { gamma } => gamma * (gamma + 1.0) * s.powf(gamma - 1.0),
            Family::Power { alpha } => alpha * (alpha + 1.0) * s.powf(alpha - 1.0),
            Family::Custom(_) => {
                let e = 1e-5 * (1.0 + s);
                (self.dh(s + e) - self.dh((s - e).max(0.0))) / (s + e - (s - e).max(0.0))
            }
        }
    }

    pub fn psi(&self, s: f64) -> f64 {
        s * self.b(s) / self.df(s)
    }

    pub fn saturation(&self) -> Option<f64> {
        match &self.family {
            Family::FermiDirac => Some(1.0),
            Family::Custom(c) => c.saturation(),
            _ => None,
        }
    }

    pub fn g_base_point(&self) -> f64 {
        match self.saturation() {
            Some(s) if s <= 1.0 => 0.5 * s,
            _ => 1.0,
        }
    }

    /// Whether `h` is concave, which the transport distance requires.
    pub fn h_concave(&self) -> bool {
        match &self.family {
            Family::Linear | Family::FermiDirac => true,
            Family::Bose { .. } | Family::Power { .. } => false,
            Family::Custom(c) => c.h_concave(),
        }
    }

    /// Power mobility vanishes at zero density, so no positive lower bound exists.
    pub fn unbounded_below(&self) -> bool {
        matches!(self.family, Family::Power { .. })
    }

    /// `(b₀, b₁)` over densities in `[0, p_max]`.
    pub fn mobility_bounds(&self, p_max: f64) -> (f64, f64) {
        match &self.family {
            Family::Linear => (1.0, 1.0),
            Family::FermiDirac => (1.0 - p_max.min(1.0), 1.0),
            Family::Bose { gamma } => (1.0, 1.0 + p_max.powf(*gamma)),
            Family::Power { alpha } => (0.0, p_max.powf(*alpha)),
            Family::Custom(_) => sampled_bounds(|s| self.b(s), p_max),
        }
    }

    /// `(γ₁, γ₂)` bounds on `f'` over `[0, p_max]`.
    pub fn f_slope_bounds(&self, p_max: f64) -> (f64, f64) {
        match &self.family {
            Family::Custom(_) => sampled_bounds(|s| self.df(s), p_max),
            _ => (1.0, 1.0),
        }
    }

    /// `g(s)`; `-∞` at zero for every builtin family, NaN outside the domain.
    pub fn g(&self, s: f64) -> f64 {
        match &self.family {
            Family::Linear => s.ln(),
            Family::FermiDirac => s.ln() - (-s).ln_1p(),
            Family::Bose { gamma } => s.ln() - ((s.powf(*gamma)).ln_1p() - LN_2) / gamma,
            Family::Power { alpha } => {
                if *alpha == 1.0 {
                    1.0 - 1.0 / s
                } else {
                    (1.0 - s.powf(-alpha)) / alpha
                }
            }
            Family::Custom(_) => {
                if s <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let a = self.g_base_point();
                quadrature::integrate(|w| self.df(w) / (w * self.b(w)), a, s, tight())
                    .unwrap_or(f64::NAN)
            }
        }
    }

    /// `g'(s) = f'(s) / (s b(s))`.
    pub fn dg(&self, s: f64) -> f64 {
        self.df(s) / (s * self.b(s))
    }

    /// `η(r)`, with `η(0) = 0` for every family except power, where it diverges.
    pub fn eta(&self, r: f64) -> f64 {
        match &self.family {
            Family::Linear => xlogx(r) - r,
            Family::FermiDirac => xlogx(r) + xlogx(1.0 - r),
            Family::Bose { gamma } => (bose_a(*gamma, r) + r * LN_2) / gamma,
            Family::Power { alpha } => {
                if *alpha == 1.0 {
                    r - 1.0 - r.ln()
                } else {
                    r.powf(1.0 - alpha) / (alpha * (alpha - 1.0)) + r / alpha
                }
            }
            Family::Custom(_) => {
                if r == 0.0 {
                    return 0.0;
                }
                quadrature::integrate(|w| self.g(w), 0.0, r, tight()).unwrap_or(f64::NAN)
            }
        }
    }

    /// `φ(u) = η(u)/u` for `u > 0`.
    pub fn phi(&self, u: f64) -> f64 {
        match &self.family {
            Family::Linear => u.ln() - 1.0,
            Family::FermiDirac => u.ln() + (1.0 - u) / u * (-u).ln_1p(),
            _ => self.eta(u) / u,
        }
    }

    /// `φ'(u) = (u g(u) − η(u)) / u²`.
    pub fn dphi(&self, u: f64) -> f64 {
        match &self.family {
            Family::Linear => 1.0 / u,
            Family::FermiDirac => -(-u).ln_1p() / (u * u),
            Family::Bose { gamma } => {
                let l = gamma * u.ln() - u.powf(*gamma).ln_1p();
                (u * l - bose_a(*gamma, u)) / (gamma * u * u)
            }
            Family::Power { alpha } => {
                if *alpha == 1.0 {
                    u.ln() / (u * u)
                } else {
                    u.powf(-1.0 - alpha) / (1.0 - alpha)
                }
            }
            Family::Custom(_) => (u * self.g(u) - self.eta(u)) / (u * u),
        }
    }

    /// `φ''(u) = g'(u)/u − 2 φ'(u)/u`.
    pub fn d2phi(&self, u: f64) -> f64 {
        self.dg(u) / u - 2.0 * self.dphi(u) / u
    }

    /// Checked evaluation of a derived function.
    pub fn eval_derived(&self, which: Derived, s: f64) -> Result<f64> {
        let name = match which {
            Derived::G => "g",
            Derived::Eta => "eta",
            Derived::Phi => "phi",
            Derived::H => "h",
            Derived::Psi => "psi",
        };
        if !(s >= 0.0) {
            return Err(Error::Domain {
                what: name,
                value: s,
            });
        }
        if let Some(sat) = self.saturation() {
            if s > sat {
                return Err(Error::Domain {
                    what: name,
                    value: s,
                });
            }
        }
        let v = match which {
            Derived::G => self.g(s),
            Derived::Eta => self.eta(s),
            Derived::H => self.h(s),
            Derived::Psi => self.psi(s),
            Derived::Phi => {
                if s == 0.0 {
                    // η(0) = 0, so the limit of η(u)/u is g(0+)
                    self.g(0.0)
                } else {
                    self.phi(s)
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else if v.is_nan() {
            Err(Error::Quadrature(format!("{name}({s}) did not evaluate")))
        } else {
            Err(Error::Domain {
                what: name,
                value: s,
            })
        }
    }

    /// Supremum of the range of `g`.
    pub fn g_sup(&self) -> f64 {
        match &self.family {
            Family::Linear | Family::FermiDirac => f64::INFINITY,
            Family::Bose { gamma } => LN_2 / gamma,
            Family::Power { alpha } => 1.0 / alpha,
            Family::Custom(_) => match self.saturation() {
                Some(s) => self.g(s),
                None => f64::INFINITY,
            },
        }
    }

    /// `g⁻¹(y)`; NaN above the range of `g`.
    pub fn g_inverse(&self, y: f64) -> f64 {
        match &self.family {
            Family::Linear => y.exp(),
            Family::FermiDirac => 1.0 / (1.0 + (-y).exp()),
            Family::Bose { gamma } => {
                // s^γ/(1+s^γ) = e^{γy}/2
                let t = 2.0 * (-gamma * y).exp() - 1.0;
                if t > 0.0 {
                    t.powf(-1.0 / gamma)
                } else {
                    f64::NAN
                }
            }
            Family::Power { alpha } => {
                let t = 1.0 - alpha * y;
                if t > 0.0 {
                    t.powf(-1.0 / alpha)
                } else {
                    f64::NAN
                }
            }
            Family::Custom(_) => self.numeric_g_inverse(y),
        }
    }

    fn numeric_g_inverse(&self, y: f64) -> f64 {
        let mut lo = 0.0_f64;
        let mut hi = match self.saturation() {
            Some(s) => s,
            None => {
                let mut hi = 1.0;
                while self.g(hi) < y && hi < 1e12 {
                    hi *= 2.0;
                }
                hi
            }
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.g(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// The generalized-entropy functions built from `ψ`.
    pub fn entropy_kit(&self) -> Result<EntropyKit<'_>> {
        if let Family::Power { .. } = self.family {
            return Err(Error::Unsupported(
                "generalized entropy (G(0) diverges for power mobility)".into(),
            ));
        }
        let eta1 = self.eta(1.0_f64.min(self.saturation().unwrap_or(1.0)));
        if !eta1.is_finite() {
            return Err(Error::Unsupported("generalized entropy".into()));
        }
        Ok(EntropyKit {
            model: self,
            big_g_zero: -eta1,
            eta_one: eta1,
        })
    }
}

fn sampled_bounds(f: impl Fn(f64) -> f64, p_max: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..=1000 {
        let v = f(p_max * k as f64 / 1000.0);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `A(r) = ∫_0^r (γ ln s − ln(1 + s^γ)) ds`.
pub(crate) fn bose_a(gamma: f64, r: f64) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    let log_part = gamma * (r * r.ln() - r);
    let soft = if gamma == 1.0 {
        (1.0 + r) * r.ln_1p() - r
    } else if gamma == 2.0 {
        r * (r * r).ln_1p() - 2.0 * r + 2.0 * r.atan()
    } else {
        quadrature::integrate(|s| s.powf(gamma).ln_1p(), 0.0, r, tight()).unwrap_or(f64::NAN)
    };
    log_part - soft
}

/// `g_ψ`, `G_ψ` and `ω_ψ` for a model whose `G_ψ(0)` is finite.
pub struct EntropyKit<'a> {
    model: &'a MobilityModel,
    big_g_zero: f64,
    eta_one: f64,
}

impl EntropyKit<'_> {
    pub fn g_psi(&self, s: f64) -> f64 {
        self.model.g(s)
    }

    /// `G_ψ(s) = ∫_1^s g_ψ`.
    pub fn big_g(&self, s: f64) -> f64 {
        self.model.eta(s) - self.eta_one
    }

    pub fn big_g_zero(&self) -> f64 {
        self.big_g_zero
    }

    /// `ω_ψ(x) = (x − 1) G_ψ(0) − x G_ψ(1/x)`.
    pub fn omega(&self, x: f64) -> f64 {
        (x - 1.0) * self.big_g_zero - x * self.big_g(1.0 / x)
    }

    /// `ω_ψ(1/p) p`, written to stay finite at `p = 0`.
    pub fn weighted_omega(&self, p: f64) -> f64 {
        (1.0 - p) * self.big_g_zero - self.big_g(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedForm {
    Gaussian,
    FermiDirac,
    BoseEinstein,
    PowerAlpha1,
    PowerAlphaGt1,
    NumericInverse,
}

/// `p_∞(x) = g⁻¹(c − Φ(x))` normalized on `[-L, L]`.
#[derive(Debug, Clone)]
pub struct StationaryDensity {
    pub model: MobilityModel,
    pub c: f64,
    pub mass: f64,
    pub half_width: f64,
    pub closed_form: ClosedForm,
}

impl StationaryDensity {
    pub fn value(&self, x: f64) -> f64 {
        self.model.g_inverse(self.c - self.model.potential.value(x))
    }

    pub fn on_grid(&self, grid: crate::grid::Grid) -> Result<crate::grid::DensityField> {
        crate::grid::DensityField::from_fn(grid, |x| self.value(x), 0.0)
    }

    /// The constant `k` in `1/(1 + k e^{x²/2})` for the Fermi-Dirac family.
    pub fn fermi_dirac_constant(&self) -> f64 {
        (-self.c).exp()
    }
}

fn mass_at(model: &MobilityModel, c: f64, half_width: f64) -> Result<f64> {
    let mut breaks = vec![0.0];
    breaks.extend(model.potential.bumps.iter().map(|b| b.center));
    breaks.sort_by(f64::total_cmp);
    quadrature::integrate_split(
        |x| model.g_inverse(c - model.potential.value(x)),
        -half_width,
        half_width,
        &breaks,
        tight(),
    )
}

/// Finds the stationary density of the requested mass on `[-L, L]` by
/// bisection on the constant `c`.
pub fn stationary_density(
    model: &MobilityModel,
    mass: f64,
    half_width: f64,
) -> Result<StationaryDensity> {
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "mass must be positive, got {mass}"
        )));
    }
    if !(half_width > 0.0) {
        return Err(Error::InvalidParameter(
            "domain half width must be positive".into(),
        ));
    }
    if let Some(sat) = model.saturation() {
        if mass >= sat * 2.0 * half_width {
            return Err(Error::Condensation {
                requested: mass,
                critical: sat * 2.0 * half_width,
            });
        }
    }
    if let Family::Bose { .. } = model.family {
        let mc = critical_mass(model, model.dim)?;
        if mass >= mc {
            return Err(Error::Condensation {
                requested: mass,
                critical: mc,
            });
        }
    }
    let closed_form = match &model.family {
        Family::Linear => ClosedForm::Gaussian,
        Family::FermiDirac => ClosedForm::FermiDirac,
        Family::Bose { .. } => ClosedForm::BoseEinstein,
        Family::Power { alpha } if *alpha == 1.0 => ClosedForm::PowerAlpha1,
        Family::Power { .. } => ClosedForm::PowerAlphaGt1,
        Family::Custom(_) => ClosedForm::NumericInverse,
    };
    let c_max = model.g_sup() + model.potential.min_on(half_width);
    // map the search variable s to c, increasing in s
    let to_c = |s: f64| {
        if c_max.is_finite() {
            c_max - (-s).exp()
        } else {
            s
        }
    };
    let f = |s: f64| -> Result<f64> { Ok(mass_at(model, to_c(s), half_width)? - mass) };

    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut step = 1.0;
    while f(lo)? > 0.0 {
        lo -= step;
        step *= 2.0;
        if step > 1e6 {
            return Err(Error::Numerical("stationary density bracket failed".into()));
        }
    }
    step = 1.0;
    loop {
        match f(hi) {
            Ok(v) if v >= 0.0 => break,
            Ok(_) => {}
            Err(_) if c_max.is_finite() => {
                return Err(Error::Condensation {
                    requested: mass,
                    critical: mass_at(model, to_c(hi - step), half_width).unwrap_or(f64::NAN),
                })
            }
            Err(e) => return Err(e),
        }
        hi += step;
        step *= 2.0;
        if step > 1e6 || (c_max.is_finite() && hi > 60.0) {
            return Err(Error::Condensation {
                requested: mass,
                critical: mass_at(model, to_c(hi), half_width).unwrap_or(f64::NAN),
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid)?;
        if v.abs() < 1e-13 * mass {
            lo = mid;
            hi = mid;
            break;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    let c = to_c(0.5 * (lo + hi));
    Ok(StationaryDensity {
        model: model.clone(),
        c,
        mass,
        half_width,
        closed_form,
    })
}

fn unit_sphere_area(d: usize) -> f64 {
    // 2 π^{d/2} / Γ(d/2)
    let half = d as f64 / 2.0;
    let gamma_half = if d % 2 == 0 {
        (1..d / 2).map(|k| k as f64).product::<f64>()
    } else {
        let mut g = PI.sqrt();
        let mut a = 0.5;
        while a < half - 1e-12 {
            g *= a;
            a += 1.0;
        }
        g
    };
    2.0 * PI.powf(half) / gamma_half
}

/// Mass of the singular Bose profile `(e^{γ|x|²/2} − 1)^{−1/γ}` over `ℝ^d`.
pub fn critical_mass(model: &MobilityModel, dim: usize) -> Result<f64> {
    let gamma = match model.family {
        Family::Bose { gamma } => gamma,
        _ => return Err(Error::Unsupported("critical mass".into())),
    };
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if 2.0 / gamma >= dim as f64 {
        return Ok(f64::INFINITY);
    }
    // r^{d-1} (e^{γr²/2} − 1)^{−1/γ} = r^a q(r) with a = d − 1 − 2/γ and q
    // bounded; substituting r = s^{1/(a+1)} removes the origin singularity.
    let a = dim as f64 - 1.0 - 2.0 / gamma;
    let k = 1.0 / (a + 1.0);
    let q = |r: f64| {
        if r == 0.0 {
            (gamma / 2.0).powf(-1.0 / gamma)
        } else {
            ((gamma * r * r / 2.0).exp_m1() / (r * r)).powf(-1.0 / gamma)
        }
    };
    let r_max: f64 = 40.0;
    let s_max = r_max.powf(a + 1.0);
    let integrand = |s: f64| q(s.powf(k));
    let mut breaks = vec![];
    let mut b = 1e-3;
    while b < s_max {
        breaks.push(b);
        b *= 4.0;
    }
    let radial = quadrature::integrate_split(integrand, 0.0, s_max, &breaks, tight())? * k;
    let area = if dim == 1 { 2.0 } else { unit_sphere_area(dim) };
    Ok(area * radial)
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn base_points() {
        let fd = MobilityModel::fermi_dirac();
        assert_eq!(fd.eval_derived(Derived::G, 0.5).unwrap(), 0.0);
        let lin = MobilityModel::linear();
        assert!((lin.eval_derived(Derived::G, std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        for m in builtins() {
            let a = m.g_base_point();
            assert!(m.g(a).abs() < 1e-14, "{}", m.name);
        }
    }

    #[test]
    fn power_two_closed_forms() {
        let m = MobilityModel::power(2.0).unwrap();
        for &s in &[0.3, 1.0, 2.5] {
            assert!((m.g(s) + (s.powi(-2) - 1.0) / 2.0).abs() < 1e-14);
            assert!((m.eta(s) - (0.5 / s + 0.5 * s)).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_consistency() {
        for m in builtins() {
            for k in 1..100 {
                let s = 0.0099 * k as f64;
                let lhs = m.dg(s);
                assert!(
                    (lhs - 1.0 / m.psi(s)).abs() <= 1e-10 * lhs.abs(),
                    "{}",
                    m.name
                );
                assert!((m.h(s) - s * m.b(s)).abs() <= 1e-12 * m.h(s).abs());
                // finite-difference checks of g' and η' = g
                let e = 1e-6 * s;
                let fd_g = (m.g(s + e) - m.g(s - e)) / (2.0 * e);
                assert!(
                    (fd_g - lhs).abs() < 1e-5 * lhs.abs(),
                    "{} g' at {s}",
                    m.name
                );
                let fd_eta = (m.eta(s + e) - m.eta(s - e)) / (2.0 * e);
                assert!(
                    (fd_eta - m.g(s)).abs() < 1e-5 * (1.0 + m.g(s).abs()),
                    "{} η' at {s}",
                    m.name
                );
                let fd_phi = (m.phi(s + e) - m.phi(s - e)) / (2.0 * e);
                assert!(
                    (fd_phi - m.dphi(s)).abs() < 1e-5 * (1.0 + m.dphi(s).abs()),
                    "{} φ' at {s}",
                    m.name
                );
                let fd_phi2 = (m.dphi(s + e) - m.dphi(s - e)) / (2.0 * e);
                assert!(
                    (fd_phi2 - m.d2phi(s)).abs() < 1e-4 * (1.0 + m.d2phi(s).abs()),
                    "{} φ'' at {s}",
                    m.name
                );
            }
        }
    }

    #[test]
    fn g_inverse_round_trip() {
        for m in builtins() {
            for k in 1..50 {
                let s = 0.019 * k as f64;
                let back = m.g_inverse(m.g(s));
                assert!((back - s).abs() < 1e-10 * s, "{} at {s}: {back}", m.name);
            }
        }
    }

    #[test]
    fn singular_points_error() {
        let lin = MobilityModel::linear();
        assert!(lin.eval_derived(Derived::G, 0.0).is_err());
        assert!(lin.eval_derived(Derived::Phi, 0.0).is_err());
        assert_eq!(lin.eval_derived(Derived::Eta, 0.0).unwrap(), 0.0);
        assert!(lin.eval_derived(Derived::G, -1.0).is_err());
        let p1 = MobilityModel::power(1.0).unwrap();
        assert!(p1.eval_derived(Derived::G, 0.0).is_err());
        assert!(p1.eval_derived(Derived::Eta, 0.0).is_err());
        let fd = MobilityModel::fermi_dirac();
        assert!(fd.eval_derived(Derived::G, 1.2).is_err());
    }

    #[test]
    fn parameter_ranges() {
        assert!(MobilityModel::bose(0.5).is_err());
        assert!(MobilityModel::power(0.0).is_err());
        assert!(MobilityModel::build("heat", None, None).is_err());
        assert!(MobilityModel::build("bose", None, None).is_err());
        assert!(MobilityModel::build("power", None, Some(2.0)).is_ok());
    }

    #[test]
    fn critical_mass_divergence_is_analytic() {
        let b1 = MobilityModel::bose(1.0).unwrap();
        assert_eq!(critical_mass(&b1, 1).unwrap(), f64::INFINITY);
        assert_eq!(critical_mass(&b1, 2).unwrap(), f64::INFINITY);
        assert!(critical_mass(&MobilityModel::linear(), 1).is_err());
    }

    #[test]
    fn sphere_areas() {
        assert!((unit_sphere_area(2) - 2.0 * PI).abs() < 1e-14);
        assert!((unit_sphere_area(3) - 4.0 * PI).abs() < 1e-13);
        assert!((unit_sphere_area(4) - 2.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn power_model_has_no_entropy_kit() {
        assert!(MobilityModel::power(2.0).unwrap().entropy_kit().is_err());
        let lin = MobilityModel::linear();
        let kit = lin.entropy_kit().unwrap();
        assert!((kit.big_g_zero() - 1.0).abs() < 1e-15);
    }
}
