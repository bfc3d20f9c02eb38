//! Explicit finite-volume solver for `∂t p = div(∇Φ b(p) p) + Δ f(p)` on
//! `[-L, L]` with no-flux walls.
//!
//! The equation is written as `∂t p = div(h(p) ∇(g(p) + Φ))`. Each interior
//! face carries the flux `J = −h_f (Δg + ΔΦ)/dx`, where the face mobility
//! `h_f = Δf/Δg` is the mean value of `h` between the two neighbouring cells.
//! Because `h_f Δg = Δf` exactly, the flux equals the drift-diffusion flux
//! `−h_f ΔΦ/dx − Δf/dx`, and it vanishes identically wherever `g(p) + Φ` is
//! constant, so sampled stationary densities are fixed points of the scheme.

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};
use crate::models::MobilityModel;

#[derive(Debug, Clone, Copy)]
pub struct FpeConfig {
    pub cfl_safety: f64,
    pub max_steps: usize,
}

impl Default for FpeConfig {
    fn default() -> Self {
        Self {
            cfl_safety: 0.45,
            max_steps: 200_000_000,
        }
    }
}

/// Snapshots of the density on one grid at increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    pub steps: usize,
}

impl DensityCurve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn field(&self, k: usize) -> DensityField {
        DensityField {
            grid: self.grid,
            values: self.snapshots[k].clone(),
            time: self.times[k],
        }
    }

    /// Index of the snapshot taken at `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * (1.0 + t.abs());
        let k = self.times.partition_point(|&s| s < t - tol);
        (k < self.times.len() && (self.times[k] - t).abs() <= tol).then_some(k)
    }

    pub fn masses(&self) -> Vec<f64> {
        self.snapshots
            .iter()
            .map(|s| self.grid.integrate(s))
            .collect()
    }
}

/// `count` equally spaced times from `t0` to `t_end` inclusive.
pub fn uniform_times(t0: f64, t_end: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![t_end];
    }
    (0..count)
        .map(|k| {
            if k + 1 == count {
                t_end
            } else {
                t0 + (t_end - t0) * k as f64 / (count - 1) as f64
            }
        })
        .collect()
}

struct Workspace {
    potential: Vec<f64>,
    face_grad: Vec<f64>,
    g: Vec<f64>,
    f: Vec<f64>,
    flux: Vec<f64>,
}

impl Workspace {
    fn new(model: &MobilityModel, grid: &Grid) -> Self {
        let n = grid.n_cells();
        Self {
            potential: grid.sample(|x| model.potential.value(x)),
            face_grad: (0..=n)
                .map(|j| model.potential.grad(grid.face(j)))
                .collect(),
            g: vec![0.0; n],
            f: vec![0.0; n],
            flux: vec![0.0; n + 1],
        }
    }

    fn fluxes(&mut self, model: &MobilityModel, grid: &Grid, p: &[f64]) -> Result<()> {
        let n = p.len();
        let dx = grid.dx();
        for i in 0..n {
            let g = if p[i] > 0.0 {
                model.g(p[i])
            } else {
                f64::NEG_INFINITY
            };
            if g.is_nan() {
                return Err(Error::Numerical(format!(
                    "density {} at x = {} is outside the model domain",
                    p[i],
                    grid.x(i)
                )));
            }
            self.g[i] = g;
            self.f[i] = model.f(p[i]);
        }
        self.flux[0] = 0.0;
        self.flux[n] = 0.0;
        for j in 1..n {
            let (l, r) = (j - 1, j);
            let (pl, pr) = (p[l], p[r]);
            let df = self.f[r] - self.f[l];
            let dphi = self.potential[r] - self.potential[l];
            let flux = if pl <= 0.0 || pr <= 0.0 {
                -df / dx
            } else {
                let mean = 0.5 * (pl + pr);
                if (pr - pl).abs() <= 1e-6 * mean {
                    -model.h(mean) * (self.g[r] - self.g[l] + dphi) / dx
                } else {
                    let dg = self.g[r] - self.g[l];
                    if dg.is_finite() && dg != 0.0 {
                        -df * (dg + dphi) / (dg * dx)
                    } else {
                        -df / dx
                    }
                }
            };
            if !flux.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite flux at face x = {}",
                    grid.face(j)
                )));
            }
            self.flux[j] = flux;
        }
        Ok(())
    }

    fn stable_dt(&self, model: &MobilityModel, grid: &Grid, p: &[f64], safety: f64) -> f64 {
        let dx = grid.dx();
        let mut max_df: f64 = 0.0;
        for &v in p {
            max_df = max_df.max(model.df(v).abs());
        }
        let mut max_u: f64 = 0.0;
        for j in 1..p.len() {
            let mean = 0.5 * (p[j - 1] + p[j]);
            max_u = max_u.max((self.face_grad[j] * model.b(mean)).abs());
        }
        let mut dt = f64::INFINITY;
        if max_df > 0.0 {
            dt = dt.min(dx * dx / (2.0 * max_df));
        }
        if max_u > 0.0 {
            dt = dt.min(dx / max_u);
        }
        safety * dt
    }
}

/// Face fluxes (`n_cells + 1` entries, zero at both walls).
pub fn face_fluxes(model: &MobilityModel, field: &DensityField) -> Result<Vec<f64>> {
    let mut ws = Workspace::new(model, &field.grid);
    ws.fluxes(model, &field.grid, &field.values)?;
    Ok(ws.flux)
}

/// Right-hand side `∂t p` of the semi-discrete scheme.
pub fn rhs(model: &MobilityModel, field: &DensityField) -> Result<Vec<f64>> {
    let flux = face_fluxes(model, field)?;
    Ok(field
        .grid
        .face_divergence(&flux)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

/// `safety · min(dx²/(2 max f'), dx/max|u|)` with face velocity `u = −Φ' b(p̄)`.
pub fn stable_dt(model: &MobilityModel, field: &DensityField, safety: f64) -> Result<f64> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "cfl safety must be in (0, 1], got {safety}"
        )));
    }
    let ws = Workspace::new(model, &field.grid);
    let dt = ws.stable_dt(model, &field.grid, &field.values, safety);
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Numerical("degenerate time step".into()));
    }
    Ok(dt)
}

/// Forward Euler from `init` with snapshots at `times`; steps are shortened to
/// land exactly on every snapshot time.
pub fn evolve(
    model: &MobilityModel,
    init: &DensityField,
    times: &[f64],
    cfg: FpeConfig,
) -> Result<DensityCurve> {
    if times.is_empty() {
        return Err(Error::InvalidParameter("no snapshot times".into()));
    }
    if times[0] < init.time - 1e-12 {
        return Err(Error::InvalidParameter(
            "snapshot times precede the initial time".into(),
        ));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "snapshot times must be strictly increasing".into(),
        ));
    }
    if let Some(sat) = model.saturation() {
        if init.max() > sat {
            return Err(Error::InvalidDensity(format!(
                "initial density exceeds the saturation level {sat}"
            )));
        }
    }
    let grid = init.grid;
    let dx = grid.dx();
    let mut ws = Workspace::new(model, &grid);
    let mut p = init.values.clone();
    let mut t = init.time;
    let mut steps = 0usize;
    let mut snapshots = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            ws.fluxes(model, &grid, &p)?;
            let mut dt = ws.stable_dt(model, &grid, &p, cfg.cfl_safety);
            if !(dt > 0.0) {
                return Err(Error::Numerical(format!("time step collapsed at t = {t}")));
            }
            let landing = t + dt >= target - 1e-12 * (1.0 + target.abs());
            if landing {
                dt = target - t;
            }
            for (i, v) in p.iter_mut().enumerate() {
                *v -= dt * (ws.flux[i + 1] - ws.flux[i]) / dx;
            }
            if let Some((i, &v)) = p
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
            {
                return Err(Error::Numerical(format!(
                    "density {v} at x = {} after step {steps} (t = {t}, dt = {dt})",
                    grid.x(i)
                )));
            }
            t = if landing { target } else { t + dt };
            steps += 1;
            if steps > cfg.max_steps {
                return Err(Error::Numerical("step limit reached".into()));
            }
        }
        snapshots.push(p.clone());
    }
    Ok(DensityCurve {
        grid,
        times: times.to_vec(),
        snapshots,
        steps,
    })
}

/// Largest amount by which `lower` exceeds `upper` over all snapshots.
pub fn ordering_violation(lower: &DensityCurve, upper: &DensityCurve) -> Result<f64> {
    if lower.grid != upper.grid || lower.len() != upper.len() {
        return Err(Error::GridMismatch(
            "curves differ in grid or length".into(),
        ));
    }
    Ok(lower
        .snapshots
        .iter()
        .zip(&upper.snapshots)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y))
        .fold(f64::NEG_INFINITY, f64::max))
}
