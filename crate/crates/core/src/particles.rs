//! Euler-Maruyama simulation of the particle system
//! `dX = −Φ'(X) b(p(t,X)) dt + √(2 f(p)/p) dW` whose density closes either
//! through a precomputed PDE curve or through a kernel estimate of the cloud,
//! plus the energy process `θ(t, X(t)) = φ(p) + Φ` along each path.
//!
//! Every trajectory draws from its own ChaCha stream keyed by the master seed,
//! the trajectory index and a branch index, so results do not depend on the
//! number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fpe::DensityCurve;
use crate::functionals::{rate_d_generic, LocalJet};
use crate::grid::{max_value, DensityField, Grid, MASK_FRACTION};
use crate::models::MobilityModel;

/// RNG for one trajectory (branch 0) or one of its conditional branches.
pub fn stream(master_seed: u64, trajectory: u64, branch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((trajectory << 32) | branch);
    rng
}

/// Piecewise-linear inverse of the cumulative distribution of a grid density.
#[derive(Debug, Clone)]
pub struct InverseCdf {
    grid: Grid,
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl InverseCdf {
    pub fn new(field: &DensityField) -> Result<Self> {
        let dx = field.grid.dx();
        let mut cumulative = Vec::with_capacity(field.values.len() + 1);
        cumulative.push(0.0);
        for &v in &field.values {
            cumulative.push(cumulative.last().unwrap() + v * dx);
        }
        if !(*cumulative.last().unwrap() > 0.0) {
            return Err(Error::InvalidDensity("density has no mass".into()));
        }
        Ok(Self {
            grid: field.grid,
            values: field.values.clone(),
            cumulative,
        })
    }

    /// Position of the `u`-quantile, `u ∈ [0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let target = u.clamp(0.0, 1.0) * total;
        let n = self.values.len();
        let i = self
            .cumulative
            .partition_point(|&c| c <= target)
            .saturating_sub(1)
            .min(n - 1);
        let mut i = i;
        while self.values[i] == 0.0 && i + 1 < n && self.cumulative[i + 1] <= target {
            i += 1;
        }
        if self.values[i] == 0.0 {
            return self.grid.face(i);
        }
        let x = self.grid.face(i) + (target - self.cumulative[i]) / self.values[i];
        x.min(self.grid.face(i + 1))
    }
}

/// Gaussian kernel density estimate with analytic derivatives.
#[derive(Debug, Clone)]
pub struct Kde {
    pub points: Vec<f64>,
    pub bandwidth: f64,
}

/// Kernel estimate of a particle cloud; Silverman's rule when no bandwidth is
/// given.
pub fn kde_density(points: &[f64], bandwidth: Option<f64>) -> Result<Kde> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(
            "kernel estimate needs two particles".into(),
        ));
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let bandwidth = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        None => {
            if !(var > 0.0) {
                return Err(Error::InvalidDensity(
                    "particle cloud has zero variance".into(),
                ));
            }
            1.06 * var.sqrt() * n.powf(-0.2)
        }
    };
    Ok(Kde {
        points: points.to_vec(),
        bandwidth,
    })
}

impl Kde {
    pub fn jet(&self, x: f64) -> LocalJet {
        let h = self.bandwidth;
        let norm = 1.0 / (self.points.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        let (mut p, mut dp, mut d2p) = (0.0, 0.0, 0.0);
        for &c in &self.points {
            let z = (x - c) / h;
            let k = (-0.5 * z * z).exp();
            p += k;
            dp -= z * k / h;
            d2p += (z * z - 1.0) * k / (h * h);
        }
        LocalJet {
            p: p * norm,
            dp: dp * norm,
            d2p: d2p * norm,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.jet(x).p
    }
}

/// Density, gradient and Laplacian of a PDE curve at arbitrary `(t, x)`,
/// linear in time between snapshots and linear in space between cell centres.
#[derive(Debug, Clone)]
pub struct CurveDensity<'a> {
    pub curve: &'a DensityCurve,
    dp: Vec<Vec<f64>>,
    d2p: Vec<Vec<f64>>,
    maxima: Vec<f64>,
}

impl<'a> CurveDensity<'a> {
    pub fn new(curve: &'a DensityCurve) -> Result<Self> {
        if curve.is_empty() {
            return Err(Error::InvalidParameter("empty density curve".into()));
        }
        let grid = curve.grid;
        let dp = curve
            .snapshots
            .iter()
            .map(|s| grid.gradient(s))
            .collect::<Result<Vec<_>>>()?;
        let d2p = curve
            .snapshots
            .iter()
            .map(|s| grid.laplacian(s))
            .collect::<Result<Vec<_>>>()?;
        let maxima = curve.snapshots.iter().map(|s| max_value(s)).collect();
        Ok(Self {
            curve,
            dp,
            d2p,
            maxima,
        })
    }

    pub fn start(&self) -> f64 {
        self.curve.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.curve.times.last().unwrap()
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let times = &self.curve.times;
        let n = times.len();
        if n == 1 || t <= times[0] {
            return (0, 0.0);
        }
        if t >= times[n - 1] {
            return (n - 1, 0.0);
        }
        let k = times.partition_point(|&s| s <= t) - 1;
        let w = (t - times[k]) / (times[k + 1] - times[k]);
        (k, w)
    }

    fn jet_at(&self, k: usize, x: f64) -> LocalJet {
        let g = &self.curve.grid;
        LocalJet {
            p: g.interpolate(&self.curve.snapshots[k], x),
            dp: g.interpolate(&self.dp[k], x),
            d2p: g.interpolate(&self.d2p[k], x),
        }
    }

    /// Jet at `(t, x)` and whether the density there falls under the mask.
    pub fn jet(&self, t: f64, x: f64) -> (LocalJet, bool) {
        let (k, w) = self.bracket(t);
        let a = self.jet_at(k, x);
        let (jet, p_max) = if w == 0.0 {
            (a, self.maxima[k])
        } else {
            let b = self.jet_at(k + 1, x);
            let mix = |u: f64, v: f64| u + w * (v - u);
            (
                LocalJet {
                    p: mix(a.p, b.p),
                    dp: mix(a.dp, b.dp),
                    d2p: mix(a.d2p, b.d2p),
                },
                mix(self.maxima[k], self.maxima[k + 1]),
            )
        };
        let masked = jet.p <= 0.0 || jet.p < MASK_FRACTION * p_max;
        (jet, masked)
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        let (k, w) = self.bracket(t);
        let g = &self.curve.grid;
        let a = g.interpolate(&self.curve.snapshots[k], x);
        if w == 0.0 {
            a
        } else {
            a + w * (g.interpolate(&self.curve.snapshots[k + 1], x) - a)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMode {
    PdeCoupled,
    Kde,
}

/// Where the particle drift reads its density.
pub enum DensitySource<'a> {
    Curve(&'a CurveDensity<'a>),
    Kde {
        initial: &'a DensityField,
        bandwidth: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub t_end: f64,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub times: Vec<f64>,
    /// One row per trajectory, one column per time.
    pub positions: Vec<Vec<f64>>,
    pub master_seed: u64,
    pub mode: DensityMode,
}

impl ParticleEnsemble {
    pub fn n_paths(&self) -> usize {
        self.positions.len()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.positions.iter().map(|row| row[k]).collect()
    }

    /// Sample mean of `X²` at every time.
    pub fn second_moments(&self) -> Vec<f64> {
        let n = self.n_paths() as f64;
        (0..self.times.len())
            .map(|k| self.positions.iter().map(|r| r[k] * r[k]).sum::<f64>() / n)
            .collect()
    }
}

/// Step times `t0, t0 + dt, …` landing exactly on `t_end`.
pub fn step_times(t0: f64, t_end: f64, dt: f64) -> Vec<f64> {
    let mut times = vec![t0];
    let mut k = 1u64;
    loop {
        let t = t0 + k as f64 * dt;
        if t >= t_end - 1e-9 * dt {
            times.push(t_end);
            break;
        }
        times.push(t);
        k += 1;
    }
    times
}

fn em_step(model: &MobilityModel, x: f64, p: f64, dt: f64, noise: f64) -> f64 {
    let p = p.max(0.0);
    let drift = -model.potential.grad(x) * model.b(p);
    let diffusion = (2.0 * model.diffusion_ratio(p)).sqrt();
    x + drift * dt + diffusion * dt.sqrt() * noise
}

fn check_config(cfg: &SimulationConfig) -> Result<()> {
    if cfg.n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "dt must be positive, got {}",
            cfg.dt
        )));
    }
    Ok(())
}

/// Runs the ensemble from `t0` (the curve start, or the initial field time in
/// kernel mode) to `t_end`.
pub fn simulate(
    model: &MobilityModel,
    source: &DensitySource<'_>,
    cfg: SimulationConfig,
) -> Result<ParticleEnsemble> {
    check_config(&cfg)?;
    match source {
        DensitySource::Curve(density) => simulate_coupled(model, density, cfg),
        DensitySource::Kde { initial, bandwidth } => simulate_kde(model, initial, *bandwidth, cfg),
    }
}

fn simulate_coupled(
    model: &MobilityModel,
    density: &CurveDensity<'_>,
    cfg: SimulationConfig,
) -> Result<ParticleEnsemble> {
    let t0 = density.start();
    if cfg.t_end > density.end() + 1e-9 || cfg.t_end <= t0 {
        return Err(Error::InvalidParameter(format!(
            "curve covers [{t0}, {}] but the run asks for t_end = {}",
            density.end(),
            cfg.t_end
        )));
    }
    let times = step_times(t0, cfg.t_end, cfg.dt);
    let sampler = InverseCdf::new(&density.curve.field(0))?;
    let positions = (0..cfg.n_paths)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(cfg.master_seed, j as u64, 0);
            let mut x = sampler.quantile(rng.gen::<f64>());
            let mut row = Vec::with_capacity(times.len());
            row.push(x);
            for w in times.windows(2) {
                let p = density.value(w[0], x);
                let noise: f64 = rng.sample(StandardNormal);
                x = em_step(model, x, p, w[1] - w[0], noise);
                if !x.is_finite() {
                    return Err(Error::Numerical(format!(
                        "trajectory {j} left the reals at t = {}",
                        w[1]
                    )));
                }
                row.push(x);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleEnsemble {
        times,
        positions,
        master_seed: cfg.master_seed,
        mode: DensityMode::PdeCoupled,
    })
}

fn simulate_kde(
    model: &MobilityModel,
    initial: &DensityField,
    bandwidth: Option<f64>,
    cfg: SimulationConfig,
) -> Result<ParticleEnsemble> {
    if cfg.t_end <= initial.time {
        return Err(Error::InvalidParameter(
            "t_end must follow the initial time".into(),
        ));
    }
    let times = step_times(initial.time, cfg.t_end, cfg.dt);
    let sampler = InverseCdf::new(initial)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.n_paths)
        .map(|j| stream(cfg.master_seed, j as u64, 0))
        .collect();
    let mut x: Vec<f64> = rngs
        .iter_mut()
        .map(|r| sampler.quantile(r.gen::<f64>()))
        .collect();
    let mut positions: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    for w in times.windows(2) {
        let kde = kde_density(&x, bandwidth)?;
        let dt = w[1] - w[0];
        x = x
            .par_iter()
            .zip(rngs.par_iter_mut())
            .map(|(&xi, rng)| {
                let p = kde.value(xi);
                if !(p > 0.0) {
                    return Err(Error::Numerical(format!(
                        "kernel density vanished at x = {xi}; bandwidth too small"
                    )));
                }
                let noise: f64 = rng.sample(StandardNormal);
                Ok(em_step(model, xi, p, dt, noise))
            })
            .collect::<Result<Vec<_>>>()?;
        for (row, &v) in positions.iter_mut().zip(&x) {
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite particle position".into()));
            }
            row.push(v);
        }
    }
    Ok(ParticleEnsemble {
        times,
        positions,
        master_seed: cfg.master_seed,
        mode: DensityMode::Kde,
    })
}

/// `θ = φ(p) + Φ(x)`, with `θ = Φ` where the density is masked.
pub fn theta(model: &MobilityModel, jet: LocalJet, masked: bool, x: f64) -> f64 {
    let base = model.potential.value(x);
    if masked {
        base
    } else {
        model.phi(jet.p) + base
    }
}

fn rate(model: &MobilityModel, jet: LocalJet, masked: bool, x: f64) -> f64 {
    if masked {
        0.0
    } else {
        rate_d_generic(model, jet, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnergyPath {
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    pub rate: Vec<f64>,
    pub rate_integral: Vec<f64>,
    pub martingale_residual: Vec<f64>,
}

/// Energy process, pointwise rate, its trapezoid integral and the martingale
/// remainder along every path.
pub fn trajectory_energy(
    ensemble: &ParticleEnsemble,
    model: &MobilityModel,
    density: &CurveDensity<'_>,
) -> Result<Vec<TrajectoryEnergyPath>> {
    let times = &ensemble.times;
    if *times.last().unwrap() > density.end() + 1e-9 || times[0] < density.start() - 1e-9 {
        return Err(Error::InvalidParameter(
            "density curve does not cover the ensemble times".into(),
        ));
    }
    ensemble
        .positions
        .par_iter()
        .map(|row| {
            let mut th = Vec::with_capacity(row.len());
            let mut d = Vec::with_capacity(row.len());
            for (&t, &x) in times.iter().zip(row) {
                let (jet, masked) = density.jet(t, x);
                th.push(theta(model, jet, masked, x));
                d.push(rate(model, jet, masked, x));
            }
            let mut integral = vec![0.0; row.len()];
            for k in 1..row.len() {
                integral[k] = integral[k - 1] + 0.5 * (times[k] - times[k - 1]) * (d[k] + d[k - 1]);
            }
            let residual = (0..row.len())
                .map(|k| th[k] - th[0] - integral[k])
                .collect();
            if th.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("energy process is not finite".into()));
            }
            Ok(TrajectoryEnergyPath {
                times: times.clone(),
                theta: th,
                rate: d,
                rate_integral: integral,
                martingale_residual: residual,
            })
        })
        .collect()
}

/// Mean and standard error of `θ(t) − θ(0)` across paths.
pub fn mean_energy(paths: &[TrajectoryEnergyPath]) -> (Vec<f64>, Vec<f64>) {
    column_stats(paths, |p, k| p.theta[k] - p.theta[0])
        .into_iter()
        .map(|(m, _, se)| (m, se))
        .unzip()
}

fn column_stats(
    paths: &[TrajectoryEnergyPath],
    value: impl Fn(&TrajectoryEnergyPath, usize) -> f64,
) -> Vec<(f64, f64, f64)> {
    let n = paths.len() as f64;
    let len = paths.first().map_or(0, |p| p.times.len());
    (0..len)
        .map(|k| {
            let mean = paths.iter().map(|p| value(p, k)).sum::<f64>() / n;
            let var = if paths.len() > 1 {
                paths
                    .iter()
                    .map(|p| (value(p, k) - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            (mean, var, (var / n).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub mean_residual: Vec<f64>,
    pub variance: Vec<f64>,
    pub std_error: Vec<f64>,
    pub pass: bool,
}

/// Zero-mean test of the martingale remainder at every recorded time, with a
/// band of four standard errors.
pub fn martingale_test(paths: &[TrajectoryEnergyPath]) -> Result<MartingaleReport> {
    if paths.len() < 100 {
        return Err(Error::InvalidParameter(format!(
            "martingale test needs at least 100 paths, got {}",
            paths.len()
        )));
    }
    let stats = column_stats(paths, |p, k| p.martingale_residual[k]);
    let pass = stats
        .iter()
        .all(|&(m, v, se)| v.is_finite() && m.abs() <= 4.0 * se + 1e-12);
    Ok(MartingaleReport {
        mean_residual: stats.iter().map(|s| s.0).collect(),
        variance: stats.iter().map(|s| s.1).collect(),
        std_error: stats.iter().map(|s| s.2).collect(),
        pass,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub start: f64,
    /// `D(t0, x0)` from the density curve.
    pub target: f64,
    /// Richardson combination `2 r(h/2) − r(h)` averaged over branches.
    pub estimate: f64,
    pub std_error: f64,
    pub coarse: f64,
    pub fine: f64,
}

impl RateEstimate {
    pub fn within(&self, k: f64) -> bool {
        (self.estimate - self.target).abs() <= k * self.std_error
    }
}

/// Conditional-expectation estimate of `lim (E[θ(t)|X(t0)] − θ(t0, X(t0)))/(t − t0)`
/// from `branches` independent sub-paths per start point. Each branch is
/// recorded at horizons `h/2` and `h`, and the two difference quotients are
/// Richardson-extrapolated to zero horizon.
#[allow(clippy::too_many_arguments)]
pub fn conditional_rate_estimate(
    model: &MobilityModel,
    density: &CurveDensity<'_>,
    t0: f64,
    starts: &[f64],
    horizon: f64,
    substeps: usize,
    branches: usize,
    master_seed: u64,
) -> Result<Vec<RateEstimate>> {
    if branches < 2 {
        return Err(Error::InvalidParameter("need at least two branches".into()));
    }
    if substeps < 2 || substeps % 2 != 0 {
        return Err(Error::InvalidParameter(
            "substeps must be even and at least 2".into(),
        ));
    }
    if !(horizon > 0.0) || t0 + horizon > density.end() + 1e-9 || t0 < density.start() {
        return Err(Error::InvalidParameter(
            "horizon leaves the density curve".into(),
        ));
    }
    let dt = horizon / substeps as f64;
    starts
        .par_iter()
        .enumerate()
        .map(|(j, &x0)| {
            let (jet0, masked0) = density.jet(t0, x0);
            let theta0 = theta(model, jet0, masked0, x0);
            let target = rate(model, jet0, masked0, x0);
            let mut ys = Vec::with_capacity(branches);
            let (mut coarse, mut fine) = (0.0, 0.0);
            for b in 0..branches {
                let mut rng = stream(master_seed, j as u64, b as u64 + 1);
                let mut x = x0;
                let mut half = 0.0;
                for s in 0..substeps {
                    let t = t0 + s as f64 * dt;
                    let noise: f64 = rng.sample(StandardNormal);
                    x = em_step(model, x, density.value(t, x), dt, noise);
                    if s + 1 == substeps / 2 {
                        let (jet, m) = density.jet(t + dt, x);
                        half = theta(model, jet, m, x);
                    }
                }
                let (jet, m) = density.jet(t0 + horizon, x);
                let full = theta(model, jet, m, x);
                let r_fine = (half - theta0) / (0.5 * horizon);
                let r_coarse = (full - theta0) / horizon;
                coarse += r_coarse;
                fine += r_fine;
                ys.push(2.0 * r_fine - r_coarse);
            }
            let n = branches as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if !mean.is_finite() {
                return Err(Error::Numerical("branch estimate is not finite".into()));
            }
            Ok(RateEstimate {
                start: x0,
                target,
                estimate: mean,
                std_error: (var / n).sqrt(),
                coarse: coarse / n,
                fine: fine / n,
            })
        })
        .collect()
}
