//! Named experiment configurations.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::generator::{
    make_cosine_test_model, make_ou_test_model_scaled, Coefficient, Direction, MultiIndex, PolynomialGenerator,
    TestProblem,
};

pub const PRESET_NAMES: &[&str] = &[
    "cosine-d5",
    "cosine-d10",
    "cosine-d20",
    "ou1d-poly",
    "ou1d-burgers015",
    "ou1d-burgers03",
    "ou1d-zsq008",
    "ou1d-zsq02",
    "ou2d-ybz015",
    "ou2d-zsq004",
    "ou2d-zsq005",
    "ou2d-zsq01",
    "ou2d-zsq02",
    "ou2d-gscale2",
    "ou2d-gscale3",
    "ou3d-zsq015",
];

/// Published reference values of the cosine presets.
pub fn reference_value(name: &str) -> Option<f64> {
    match name {
        "cosine-d5" => Some(-0.97851),
        "cosine-d10" => Some(0.34646),
        "cosine-d20" => Some(-1.0248),
        _ => None,
    }
}

fn ones_direction(d: usize) -> Vec<Direction> {
    vec![Direction::Constant(DVector::from_element(d, 1.0))]
}

fn generator(d: usize, directions: Vec<Direction>, terms: &[(&[u32], f64)]) -> Result<PolynomialGenerator> {
    let terms = terms
        .iter()
        .map(|(e, c)| Ok((MultiIndex::new(e.to_vec())?, Coefficient::Constant(*c))))
        .collect::<Result<Vec<_>>>()?;
    PolynomialGenerator::new(d, directions, terms)
}

/// `y·(𝟙·z)` with coefficient `c`.
fn y_times_z(d: usize, c: f64) -> Result<PolynomialGenerator> {
    generator(d, ones_direction(d), &[(&[1, 1], c)])
}

/// `(𝟙·z)²` with coefficient `c`.
fn z_squared(d: usize, c: f64) -> Result<PolynomialGenerator> {
    generator(d, ones_direction(d), &[(&[0, 2], c)])
}

/// Builds the test problem registered under `name`.
pub fn load_preset(name: &str) -> Result<TestProblem> {
    match name {
        "cosine-d5" => make_cosine_test_model(5, 0.2, 0.15, 1.0),
        "cosine-d10" => make_cosine_test_model(10, 0.2, 0.15, 1.0),
        "cosine-d20" => make_cosine_test_model(20, 0.2, 0.15, 1.0),
        // y³ blows up backward from large payoffs; the mean is finite but there
        // is no global classical solution to compare a grid against
        "ou1d-poly" => make_ou_test_model_scaled(1, generator(1, vec![], &[(&[2], 0.2), (&[3], 0.3)])?, 1.0),
        "ou1d-burgers015" => make_ou_test_model_scaled(1, y_times_z(1, 0.15)?, 1.0),
        "ou1d-burgers03" => make_ou_test_model_scaled(1, y_times_z(1, 0.3)?, 1.0),
        "ou1d-zsq008" => make_ou_test_model_scaled(1, z_squared(1, 0.08)?, 1.0),
        "ou1d-zsq02" => make_ou_test_model_scaled(1, z_squared(1, 0.2)?, 1.0),
        "ou2d-ybz015" => make_ou_test_model_scaled(2, y_times_z(2, 0.15)?, 1.0),
        "ou2d-zsq004" => make_ou_test_model_scaled(2, z_squared(2, 0.04)?, 1.0),
        "ou2d-zsq005" => make_ou_test_model_scaled(2, z_squared(2, 0.05)?, 1.0),
        "ou2d-zsq01" => make_ou_test_model_scaled(2, z_squared(2, 0.1)?, 1.0),
        "ou2d-zsq02" => make_ou_test_model_scaled(2, z_squared(2, 0.2)?, 1.0),
        "ou2d-gscale2" => make_ou_test_model_scaled(2, z_squared(2, 0.05)?, 2.0),
        "ou2d-gscale3" => make_ou_test_model_scaled(2, z_squared(2, 0.05)?, 3.0),
        "ou3d-zsq015" => make_ou_test_model_scaled(3, z_squared(3, 0.15)?, 1.0),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}
