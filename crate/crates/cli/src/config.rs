//! Experiment configuration: a TOML document with one table per concern,
//! overridable key by key from the command line.
use crate::error::CliError;
use mvflow::grid::{gaussian, DensityField, Grid};
use mvflow::models::{stationary_density, MobilityModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub time: TimeSpec,
    #[serde(default)]
    pub particles: ParticleSpec,
    #[serde(default)]
    pub transport: TransportSpec,
    #[serde(default)]
    pub figure: FigureSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: "fermi-dirac".into(),
            gamma: None,
            alpha: None,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<MobilityModel, CliError> {
        Ok(MobilityModel::build(&self.family, self.gamma, self.alpha)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub half_width: f64,
    pub n_cells: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            half_width: 12.0,
            n_cells: 1200,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid, CliError> {
        Ok(Grid::new(self.half_width, self.n_cells)?)
    }
}

/// Initial density. `mixture` is half the stationary profile and half a
/// Gaussian, renormalised to `mass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    Gaussian {
        mean: f64,
        variance: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
    Stationary {
        #[serde(default = "unit")]
        mass: f64,
    },
    Mixture {
        mean: f64,
        variance: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::Mixture {
            mean: 1.5,
            variance: 0.49,
            mass: 1.0,
        }
    }
}

impl InitialSpec {
    pub fn build(&self, model: &MobilityModel, grid: Grid) -> Result<DensityField, CliError> {
        let field = match *self {
            InitialSpec::Gaussian {
                mean,
                variance,
                mass,
            } => {
                check_gaussian(variance, mass)?;
                let g = gaussian(mean, variance);
                DensityField::new(grid, grid.sample(|x| mass * g(x)), 0.0)?
            }
            InitialSpec::Stationary { mass } => {
                stationary_density(model, mass, grid.half_width())?.on_grid(grid)?
            }
            InitialSpec::Mixture {
                mean,
                variance,
                mass,
            } => {
                check_gaussian(variance, mass)?;
                let st = stationary_density(model, 1.0, grid.half_width())?.on_grid(grid)?;
                let g = gaussian(mean, variance);
                let vals = st
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| 0.5 * v + 0.5 * g(grid.x(i)))
                    .collect();
                DensityField::new(grid, vals, 0.0)?.normalized(mass)?
            }
        };
        Ok(field)
    }
}

fn check_gaussian(variance: f64, mass: f64) -> Result<(), CliError> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(CliError::Validation(format!(
            "initial.variance must be positive, got {variance}"
        )));
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(CliError::Validation(format!(
            "initial.mass must be positive, got {mass}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSpec {
    pub t_end: f64,
    pub snapshots: usize,
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self {
            t_end: 2.0,
            snapshots: 41,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParticleMode {
    Pde,
    Kde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleSpec {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub mode: ParticleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Write every `record_every`-th step to the trajectory files.
    pub record_every: usize,
}

impl Default for ParticleSpec {
    fn default() -> Self {
        Self {
            n_paths: 500,
            dt: 0.01,
            seed: 2024,
            mode: ParticleMode::Pde,
            bandwidth: None,
            record_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSpec {
    pub n_time: usize,
    pub max_iters: usize,
    pub primal_tol: f64,
    pub constraint_tol: f64,
    /// Base time of the metric-derivative quotients.
    pub t0: f64,
    pub deltas: Vec<f64>,
    /// Second density for `wh-distance`.
    pub target: InitialSpec,
}

impl Default for TransportSpec {
    fn default() -> Self {
        Self {
            n_time: 8,
            max_iters: 20_000,
            primal_tol: 1e-6,
            constraint_tol: 1e-8,
            t0: 0.2,
            deltas: vec![0.1, 0.05, 0.025],
            target: InitialSpec::Stationary { mass: 1.0 },
        }
    }
}

impl TransportSpec {
    pub fn solver(&self) -> mvflow::transport::TransportConfig {
        mvflow::transport::TransportConfig {
            n_time: self.n_time,
            max_iters: self.max_iters,
            primal_tol: self.primal_tol,
            constraint_tol: self.constraint_tol,
            ..Default::default()
        }
    }
}

/// Setup of `reproduce`: every figure starts from N(mean, variance) on its own
/// grid. Model, grid, initial density and horizon of the other sections are
/// replaced by these; the particle section is shared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureSpec {
    pub half_width: f64,
    pub n_cells: usize,
    pub mean: f64,
    pub variance: f64,
    pub t_end: f64,
    /// Spacing of the written trajectory samples and of the monotonicity test.
    pub record_interval: f64,
}

impl Default for FigureSpec {
    fn default() -> Self {
        Self {
            half_width: 30.0,
            n_cells: 1200,
            mean: 20.0,
            variance: 1.0,
            t_end: 5.0,
            record_interval: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            grid: GridSpec::default(),
            initial: InitialSpec::default(),
            time: TimeSpec::default(),
            particles: ParticleSpec::default(),
            transport: TransportSpec::default(),
            figure: FigureSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a document, applies `section.key=value` overrides and validates.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Validation(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// The experiment without its output location: where results are written
    /// does not change them.
    pub fn canonical_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serialises");
        table.remove("output");
        toml::to_string(&table).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.model.build()?;
        let grid = self.grid.build()?;
        self.initial.build(&model, grid)?;
        let bad = |msg: String| Err(CliError::Validation(msg));
        if !(self.time.t_end > 0.0 && self.time.t_end.is_finite()) {
            return bad(format!(
                "time.t_end must be positive, got {}",
                self.time.t_end
            ));
        }
        if self.time.snapshots < 2 {
            return bad("time.snapshots must be at least 2".into());
        }
        let p = &self.particles;
        if p.n_paths == 0 {
            return bad("particles.n_paths must be positive".into());
        }
        if !(p.dt > 0.0 && p.dt <= self.time.t_end) {
            return bad(format!("particles.dt must lie in (0, t_end], got {}", p.dt));
        }
        if p.record_every == 0 {
            return bad("particles.record_every must be positive".into());
        }
        if let Some(bw) = p.bandwidth {
            if !(bw > 0.0) {
                return bad(format!("particles.bandwidth must be positive, got {bw}"));
            }
        }
        let t = &self.transport;
        if t.n_time < 2 {
            return bad("transport.n_time must be at least 2".into());
        }
        if t.deltas.is_empty() || t.deltas.iter().any(|d| !(*d > 0.0)) {
            return bad("transport.deltas must be non-empty and positive".into());
        }
        if !(t.t0 >= 0.0) {
            return bad(format!("transport.t0 must be non-negative, got {}", t.t0));
        }
        if !(t.primal_tol > 0.0 && t.constraint_tol > 0.0) {
            return bad("transport tolerances must be positive".into());
        }
        t.target.build(&model, grid)?;
        let f = &self.figure;
        Grid::new(f.half_width, f.n_cells)?;
        check_gaussian(f.variance, 1.0)?;
        if !(f.t_end > 0.0 && f.record_interval > 0.0 && f.record_interval <= f.t_end) {
            return bad("figure.t_end and figure.record_interval must be positive".into());
        }
        if f.mean.abs() >= f.half_width {
            return bad("figure.mean must lie inside the figure grid".into());
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a
/// bare string, so `model.family=bose` works without quotes.
fn apply_override(doc: &mut toml::Table, arg: &str) -> Result<(), CliError> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {arg:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("bad override key {path:?}")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("{k} in {path:?} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
