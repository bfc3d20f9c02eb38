//! Dynamic transport distance with mobility `h`:
//! `W_h(p0, p1)² = min ∫∫ m²/h(u) dx dt` subject to `∂t u + ∂x m = 0`.
//!
//! Densities sit at cell centres on time levels `0..=K`, fluxes at interior
//! faces on half levels. The action is evaluated at the four-point average of
//! the surrounding densities, which keeps the problem jointly convex for
//! concave `h`. It is solved by a primal-dual (Chambolle-Pock) iteration whose
//! primal step is the Euclidean projection onto the discrete continuity
//! equation (a cosine transform in time and tridiagonal solves in space) and
//! whose dual step needs one scalar root per face.

use crate::error::{Error, Result};
use crate::fpe::DensityCurve;
use crate::functionals::dissipation;
use crate::grid::DensityField;
use crate::models::MobilityModel;
use crate::particles::InverseCdf;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    /// Number of time steps `K`.
    pub n_time: usize,
    pub max_iters: usize,
    /// Relative change of the action between checks that counts as converged.
    pub primal_tol: f64,
    /// Largest allowed continuity residual of the reported solution.
    pub constraint_tol: f64,
    pub tau: f64,
    pub sigma: f64,
    pub check_every: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            n_time: 8,
            max_iters: 20_000,
            primal_tol: 1e-6,
            constraint_tol: 1e-8,
            tau: 0.049,
            sigma: 20.0,
            check_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    /// `K + 1` density levels.
    pub u: Vec<Vec<f64>>,
    /// `K` flux levels with `n_cells + 1` faces each; the wall faces are zero.
    pub m: Vec<Vec<f64>>,
    pub action: f64,
    pub converged: bool,
    pub iterations: usize,
    pub constraint_residual: f64,
}

struct Layout {
    n: usize,
    k: usize,
    dx: f64,
    dt: f64,
}

impl Layout {
    /// Interior faces per level.
    fn nf(&self) -> usize {
        self.n - 1
    }
}

/// Density at face `j` (1-based interior index) between levels `k` and `k+1`.
fn face_average(u: &[Vec<f64>], k: usize, j: usize) -> f64 {
    0.25 * (u[k][j - 1] + u[k][j] + u[k + 1][j - 1] + u[k + 1][j])
}

fn action_density(h: f64, m: f64, m_floor: f64) -> f64 {
    if h > 0.0 {
        m * m / h
    } else if m.abs() <= m_floor {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `Σ m²/h(U) dx dt`.
fn action(model: &MobilityModel, lay: &Layout, u: &[Vec<f64>], m: &[Vec<f64>]) -> f64 {
    let m_max = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-14 * m_max;
    let mut s = 0.0;
    for k in 0..lay.k {
        for j in 1..lay.n {
            s += action_density(model.h(face_average(u, k, j)), m[k][j], floor);
        }
    }
    s * lay.dx * lay.dt
}

/// Fluxes that make `u` satisfy the discrete continuity equation exactly,
/// accumulated from whichever wall is nearer in mass.
fn fluxes_from_levels(lay: &Layout, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = lay.n;
    (0..lay.k)
        .map(|k| {
            let rate: Vec<f64> = (0..n).map(|i| (u[k + 1][i] - u[k][i]) / lay.dt).collect();
            let mut left = vec![0.0; n + 1];
            for i in 0..n {
                left[i + 1] = left[i] - lay.dx * rate[i];
            }
            let mut right = vec![0.0; n + 1];
            for i in (0..n).rev() {
                right[i] = right[i + 1] + lay.dx * rate[i];
            }
            let mut mass = vec![0.0; n + 1];
            for i in 0..n {
                mass[i + 1] = mass[i] + u[k][i] + u[k + 1][i];
            }
            let half = 0.5 * mass[n];
            (0..=n)
                .map(|j| {
                    if j == 0 || j == n {
                        0.0
                    } else if mass[j] <= half {
                        left[j]
                    } else {
                        right[j]
                    }
                })
                .collect()
        })
        .collect()
}

fn continuity_residual(lay: &Layout, u: &[Vec<f64>], m: &[Vec<f64>]) -> f64 {
    let mut r: f64 = 0.0;
    for k in 0..lay.k {
        for i in 0..lay.n {
            let v = (u[k + 1][i] - u[k][i]) / lay.dt + (m[k][i + 1] - m[k][i]) / lay.dx;
            r = r.max(v.abs());
        }
    }
    r
}

/// Orthonormal cosine basis in time, `Q[k][j] = c_j cos(π j (k + ½)/K)`.
fn cosine_basis(k: usize) -> Vec<Vec<f64>> {
    let kk = k as f64;
    (0..k)
        .map(|row| {
            (0..k)
                .map(|j| {
                    let c = if j == 0 {
                        (1.0 / kk).sqrt()
                    } else {
                        (2.0 / kk).sqrt()
                    };
                    c * (std::f64::consts::PI * j as f64 * (row as f64 + 0.5) / kk).cos()
                })
                .collect()
        })
        .collect()
}

/// Solves `(a I + L/dx²) x = r` with `L` the Neumann Laplacian
/// (diagonal `1, 2, …, 2, 1`, off-diagonal −1) by the Thomas algorithm.
fn solve_shifted_neumann(a: f64, dx: f64, r: &[f64]) -> Vec<f64> {
    let n = r.len();
    let s = 1.0 / (dx * dx);
    let diag = |i: usize| a + s * if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
    let off = -s;
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut beta = diag(0);
    c[0] = off / beta;
    d[0] = r[0] / beta;
    for i in 1..n {
        beta = diag(i) - off * c[i - 1];
        c[i] = off / beta;
        d[i] = (r[i] - off * d[i - 1]) / beta;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

struct Projector {
    basis: Vec<Vec<f64>>,
    eig: Vec<f64>,
}

impl Projector {
    fn new(lay: &Layout) -> Self {
        let k = lay.k;
        Self {
            basis: cosine_basis(k),
            eig: (0..k)
                .map(|j| {
                    (2.0 - 2.0 * (std::f64::consts::PI * j as f64 / k as f64).cos())
                        / (lay.dt * lay.dt)
                })
                .collect(),
        }
    }

    /// Euclidean projection of `(u, m)` onto the continuity constraint with
    /// the end levels of `u` held fixed.
    fn project(&self, lay: &Layout, u: &mut [Vec<f64>], m: &mut [Vec<f64>]) {
        let (n, k) = (lay.n, lay.k);
        let r: Vec<Vec<f64>> = (0..k)
            .map(|l| {
                (0..n)
                    .map(|i| (u[l + 1][i] - u[l][i]) / lay.dt + (m[l][i + 1] - m[l][i]) / lay.dx)
                    .collect()
            })
            .collect();
        // transform in time
        let mut rh = vec![vec![0.0; n]; k];
        for (j, row) in rh.iter_mut().enumerate() {
            for (l, rl) in r.iter().enumerate() {
                let q = self.basis[l][j];
                for i in 0..n {
                    row[i] += q * rl[i];
                }
            }
        }
        // mode 0 only moves the fluxes: cumulative sums of its residual
        let c0 = self.basis[0][0];
        let mut q0 = vec![0.0; n + 1];
        for i in 0..n {
            q0[i + 1] = q0[i] + lay.dx * c0 * rh[0][i];
        }
        let mut lam_hat = vec![vec![0.0; n]; k];
        for j in 1..k {
            lam_hat[j] = solve_shifted_neumann(self.eig[j], lay.dx, &rh[j]);
        }
        let mut lam = vec![vec![0.0; n]; k];
        for (l, row) in lam.iter_mut().enumerate() {
            for (j, lh) in lam_hat.iter().enumerate().skip(1) {
                let q = self.basis[l][j];
                for i in 0..n {
                    row[i] += q * lh[i];
                }
            }
        }
        // u ← u − D_tᵀ λ on interior levels
        for l in 1..k {
            for i in 0..n {
                u[l][i] -= (lam[l - 1][i] - lam[l][i]) / lay.dt;
            }
        }
        // m ← m − D_xᵀ λ − mode-0 correction
        for l in 0..k {
            for j in 1..n {
                m[l][j] -= (lam[l][j - 1] - lam[l][j]) / lay.dx + q0[j];
            }
        }
    }
}

/// Minimizer over `(m, U)` of `m²/(σ h(U)) + ½(m − a)² + ½(U − c)²`.
fn prox_face(model: &MobilityModel, sat: Option<f64>, sigma: f64, a: f64, c: f64) -> (f64, f64) {
    let lam = 1.0 / sigma;
    let clamp = |v: f64| match sat {
        Some(s) => v.clamp(0.0, s),
        None => v.max(0.0),
    };
    if a == 0.0 {
        return (0.0, clamp(c));
    }
    let k = lam * a * a;
    let grad = |v: f64| {
        let d = model.h(v) + 2.0 * lam;
        v - c - k * model.dh(v) / (d * d)
    };
    if grad(0.0) >= 0.0 {
        return (0.0, 0.0);
    }
    let mut lo = 0.0;
    let mut hi = match sat {
        Some(s) => {
            if grad(s) <= 0.0 {
                let h = model.h(s);
                return (a * h / (h + 2.0 * lam), s);
            }
            s
        }
        None => {
            let mut hi = c.abs().max(1.0);
            while grad(hi) <= 0.0 {
                hi *= 2.0;
            }
            hi
        }
    };
    let mut v = clamp(c).clamp(lo, hi);
    if v <= lo || v >= hi {
        v = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let g = grad(v);
        if g < 0.0 {
            lo = v;
        } else {
            hi = v;
        }
        let h = model.h(v);
        let d = h + 2.0 * lam;
        let dh = model.dh(v);
        let curv = 1.0 - k * (model.d2h(v) * d - 2.0 * dh * dh) / (d * d * d);
        let mut next = v - g / curv;
        if !(next > lo && next < hi) || !curv.is_finite() || curv <= 0.0 {
            next = 0.5 * (lo + hi);
        }
        if (next - v).abs() <= 1e-12 * (1.0 + v.abs()) || hi - lo <= 1e-14 * (1.0 + hi) {
            v = next;
            break;
        }
        v = next;
    }
    let h = model.h(v);
    (a * h / (h + 2.0 * lam), v)
}

fn validate(model: &MobilityModel, p0: &DensityField, p1: &DensityField) -> Result<()> {
    if p0.grid != p1.grid {
        return Err(Error::GridMismatch(
            "transport endpoints on different grids".into(),
        ));
    }
    let (a, b) = (p0.mass(), p1.mass());
    if (a - b).abs() > 1e-8 * a.max(b).max(1e-300) {
        return Err(Error::InvalidDensity(format!(
            "endpoint masses differ: {a} vs {b}"
        )));
    }
    if !model.h_concave() {
        return Err(Error::Unsupported(format!(
            "transport distance needs a concave mobility, {} is not",
            model.name
        )));
    }
    if let Some(s) = model.saturation() {
        if p0.max() > s || p1.max() > s {
            return Err(Error::InvalidDensity(
                "endpoint exceeds the saturation level".into(),
            ));
        }
    }
    Ok(())
}

/// `W_h(p0, p1)` and the optimal path. A run that hits `max_iters` returns
/// its last iterate with `converged = false`.
pub fn wh_distance(
    model: &MobilityModel,
    p0: &DensityField,
    p1: &DensityField,
    cfg: TransportConfig,
) -> Result<(f64, TransportSolution)> {
    validate(model, p0, p1)?;
    if cfg.n_time < 2 {
        return Err(Error::InvalidParameter(
            "need at least two time steps".into(),
        ));
    }
    if !(cfg.tau > 0.0 && cfg.sigma > 0.0 && cfg.tau * cfg.sigma < 1.0) {
        return Err(Error::InvalidParameter(
            "step sizes need tau * sigma < 1".into(),
        ));
    }
    let grid = p0.grid;
    let lay = Layout {
        n: grid.n_cells(),
        k: cfg.n_time,
        dx: grid.dx(),
        dt: 1.0 / cfg.n_time as f64,
    };
    let (n, kk, nf) = (lay.n, lay.k, lay.nf());
    let sat = model.saturation();
    let target_mass = p0.mass();

    let mut u: Vec<Vec<f64>> = (0..=kk)
        .map(|k| {
            let s = k as f64 / kk as f64;
            (0..n)
                .map(|i| (1.0 - s) * p0.values[i] + s * p1.values[i])
                .collect()
        })
        .collect();
    let mut m = fluxes_from_levels(&lay, &u);
    let initial_action = action(model, &lay, &u, &m);
    if p0.values == p1.values {
        return Ok((
            0.0,
            TransportSolution {
                u,
                m: vec![vec![0.0; n + 1]; kk],
                action: 0.0,
                converged: true,
                iterations: 0,
                constraint_residual: 0.0,
            },
        ));
    }

    let projector = Projector::new(&lay);
    let (tau, sigma) = (cfg.tau, cfg.sigma);
    let mut u_bar = u.clone();
    let mut m_bar = m.clone();
    let mut y_m = vec![vec![0.0; nf]; kk];
    let mut y_u = vec![vec![0.0; nf]; kk];
    let mut best = (initial_action, u.clone(), m.clone());
    let mut last_check = initial_action;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        iterations = it;
        // dual step
        for k in 0..kk {
            for f in 0..nf {
                let j = f + 1;
                let zm = y_m[k][f] + sigma * m_bar[k][j];
                let zu = y_u[k][f] + sigma * face_average(&u_bar, k, j);
                let (ms, us) = prox_face(model, sat, sigma, zm / sigma, zu / sigma);
                y_m[k][f] = zm - sigma * ms;
                y_u[k][f] = zu - sigma * us;
            }
        }
        // primal step
        let u_old = u.clone();
        let m_old = m.clone();
        for k in 1..kk {
            for i in 0..n {
                let mut adj = 0.0;
                for kh in [k - 1, k] {
                    if i >= 1 {
                        adj += y_u[kh][i - 1];
                    }
                    if i + 1 < n {
                        adj += y_u[kh][i];
                    }
                }
                u[k][i] -= tau * 0.25 * adj;
            }
        }
        for k in 0..kk {
            for f in 0..nf {
                m[k][f + 1] -= tau * y_m[k][f];
            }
        }
        projector.project(&lay, &mut u, &mut m);
        for k in 0..=kk {
            for i in 0..n {
                u_bar[k][i] = 2.0 * u[k][i] - u_old[k][i];
            }
        }
        for k in 0..kk {
            for j in 0..=n {
                m_bar[k][j] = 2.0 * m[k][j] - m_old[k][j];
            }
        }

        if it % cfg.check_every == 0 || it == cfg.max_iters {
            let (pu, pm) = polish(&lay, &u, sat, target_mass);
            let a = action(model, &lay, &pu, &pm);
            if a < best.0 {
                best = (a, pu, pm);
            }
            if a.is_finite() && (a - last_check).abs() <= cfg.primal_tol * a.max(1e-300) {
                converged = true;
                break;
            }
            last_check = a;
        }
    }
    let (action_value, u, m) = best;
    let constraint_residual = continuity_residual(&lay, &u, &m);
    let converged =
        converged && constraint_residual <= cfg.constraint_tol.max(1e-12 * scale(&u, &lay));
    Ok((
        action_value.sqrt(),
        TransportSolution {
            u,
            m,
            action: action_value,
            converged,
            iterations,
            constraint_residual,
        },
    ))
}

fn scale(u: &[Vec<f64>], lay: &Layout) -> f64 {
    u.iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()))
        / lay.dt
}

/// Clamps the interior levels into the admissible range, restores their mass
/// and rebuilds the fluxes so that continuity holds to rounding.
fn polish(
    lay: &Layout,
    u: &[Vec<f64>],
    sat: Option<f64>,
    target_mass: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut v = u.to_vec();
    for row in v.iter_mut().take(lay.k).skip(1) {
        for w in row.iter_mut() {
            *w = match sat {
                Some(s) => w.clamp(0.0, s),
                None => w.max(0.0),
            };
        }
        let mass: f64 = row.iter().sum::<f64>() * lay.dx;
        if mass > 0.0 {
            let s = target_mass / mass;
            for w in row.iter_mut() {
                *w *= s;
            }
        }
    }
    let m = fluxes_from_levels(lay, &v);
    (v, m)
}

/// Exact one-dimensional `W₂` between two grid densities through their
/// piecewise-linear quantile functions.
pub fn w2_quantile(p0: &DensityField, p1: &DensityField) -> Result<f64> {
    if p0.grid != p1.grid {
        return Err(Error::GridMismatch("densities on different grids".into()));
    }
    let (a, b) = (p0.mass(), p1.mass());
    if (a - b).abs() > 1e-8 * a.max(b) {
        return Err(Error::InvalidDensity(format!("masses differ: {a} vs {b}")));
    }
    let dx = p0.grid.dx();
    let mut breaks: Vec<f64> = Vec::new();
    for field in [p0, p1] {
        let total = field.mass();
        let mut c = 0.0;
        for &v in &field.values {
            c += v * dx;
            breaks.push((c / total).min(1.0));
        }
    }
    breaks.push(0.0);
    breaks.push(1.0);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let q0 = InverseCdf::new(p0)?;
    let q1 = InverseCdf::new(p1)?;
    let mut sum = 0.0;
    for w in breaks.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        // quantiles are linear inside each piece; evaluate just inside the ends
        let e = 1e-12 * len;
        let d0 = q0.quantile(w[0] + e) - q1.quantile(w[0] + e);
        let d1 = q0.quantile(w[1] - e) - q1.quantile(w[1] - e);
        sum += len * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
    }
    Ok((sum * a).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDerivative {
    pub deltas: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Polynomial extrapolation of the estimates to `δ = 0`.
    pub extrapolated: f64,
    /// `√I(p(t0))`.
    pub sqrt_dissipation: f64,
    pub relative_error: f64,
    pub all_converged: bool,
}

/// `W_h(p(t0), p(t0 + δ))/δ` for each `δ`, extrapolated to zero and compared
/// with the square root of the dissipation at `t0`.
pub fn metric_derivative(
    model: &MobilityModel,
    curve: &DensityCurve,
    t0: f64,
    deltas: &[f64],
    cfg: TransportConfig,
) -> Result<MetricDerivative> {
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::InvalidParameter("deltas must be positive".into()));
    }
    let k0 = curve
        .index_of(t0)
        .ok_or_else(|| Error::InvalidParameter(format!("no snapshot at t0 = {t0}")))?;
    let p0 = curve.field(k0);
    let mut estimates = Vec::with_capacity(deltas.len());
    let mut all_converged = true;
    for &d in deltas {
        let k1 = curve.index_of(t0 + d).ok_or_else(|| {
            Error::InvalidParameter(format!("no snapshot at t0 + δ = {}", t0 + d))
        })?;
        let (w, sol) = wh_distance(model, &p0, &curve.field(k1), cfg)?;
        all_converged &= sol.converged;
        estimates.push(w / d);
    }
    let extrapolated = extrapolate_to_zero(deltas, &estimates);
    let sqrt_dissipation = dissipation(model, &p0)?.sqrt();
    let relative_error = if sqrt_dissipation > 0.0 {
        (extrapolated - sqrt_dissipation).abs() / sqrt_dissipation
    } else {
        extrapolated.abs()
    };
    Ok(MetricDerivative {
        deltas: deltas.to_vec(),
        estimates,
        extrapolated,
        sqrt_dissipation,
        relative_error,
        all_converged,
    })
}

/// Value at zero of the interpolating polynomial through `(x_j, y_j)`.
pub fn extrapolate_to_zero(x: &[f64], y: &[f64]) -> f64 {
    (0..x.len())
        .map(|j| {
            let w: f64 = (0..x.len())
                .filter(|&i| i != j)
                .map(|i| x[i] / (x[i] - x[j]))
                .product();
            w * y[j]
        })
        .sum()
}
