#![allow(dead_code)]

use mvflow::grid::{gaussian, DensityField, Grid};
use mvflow::models::{stationary_density, MobilityModel};

pub fn builtins() -> Vec<MobilityModel> {
    vec![
        MobilityModel::linear(),
        MobilityModel::fermi_dirac(),
        MobilityModel::bose(1.0).unwrap(),
        MobilityModel::bose(3.0).unwrap(),
        MobilityModel::power(1.0).unwrap(),
        MobilityModel::power(2.0).unwrap(),
    ]
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn stationary(model: &MobilityModel, grid: Grid) -> DensityField {
    stationary_density(model, 1.0, grid.half_width())
        .unwrap()
        .on_grid(grid)
        .unwrap()
}

/// Half stationary profile, half a displaced Gaussian, unit mass.
pub fn test_density(model: &MobilityModel, grid: Grid) -> DensityField {
    let st = stationary(model, grid);
    let g = gaussian(1.5, 0.49);
    let vals = st
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| 0.5 * v + 0.5 * g(grid.x(i)))
        .collect();
    DensityField::new(grid, vals, 0.0)
        .unwrap()
        .normalized(1.0)
        .unwrap()
}

pub fn gaussian_field(grid: Grid, mean: f64, var: f64) -> DensityField {
    DensityField::from_fn(grid, gaussian(mean, var), 0.0).unwrap()
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
