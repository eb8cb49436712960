//! JSON description of a model with constant or affine coefficients.
//!
//! ```json
//! {
//!   "dim": 1,
//!   "horizon": 1.0,
//!   "x0": [1.0],
//!   "drift": { "affine": { "offset": [1.0], "linear": [[-1.0]] } },
//!   "volatility": [[0.5]],
//!   "terminal": { "call_on_mean": { "scale": 1.0 } },
//!   "directions": [[1.0]],
//!   "terms": [ { "index": [1, 1], "coefficient": 0.15 } ],
//!   "mode": "exact_ou"
//! }
//! ```

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    call_on_mean, Coefficient, Direction, Drift, MultiIndex, PdeModel, PolynomialGenerator, SimulationMode,
    TerminalCondition, TestProblem, Volatility,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftConfig {
    Constant(Vec<f64>),
    Affine { offset: Vec<f64>, linear: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalConfig {
    /// `scale·((1/d)Σxᵢ − 1)⁺`.
    CallOnMean { scale: f64 },
    /// `cos(Σxᵢ)`.
    CosineSum,
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermConfig {
    pub index: Vec<u32>,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub drift: DriftConfig,
    /// Rows of the constant volatility matrix.
    pub volatility: Vec<Vec<f64>>,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub directions: Vec<Vec<f64>>,
    pub terms: Vec<TermConfig>,
    pub mode: SimulationMode,
    #[serde(default)]
    pub euler_step: Option<f64>,
}

fn matrix(rows: &[Vec<f64>], d: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("{what} must be a {d}×{d} matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |r, c| rows[r][c]))
}

fn vector(v: &[f64], d: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != d {
        return Err(Error::Config(format!("{what} must have length {d}")));
    }
    Ok(DVector::from_column_slice(v))
}

impl ModelConfig {
    pub fn build(&self) -> Result<TestProblem> {
        let d = self.dim;
        let drift = match &self.drift {
            DriftConfig::Constant(v) => Drift::Constant(vector(v, d, "drift")?),
            DriftConfig::Affine { offset, linear } => Drift::Affine {
                offset: vector(offset, d, "drift offset")?,
                linear: matrix(linear, d, "drift linear part")?,
            },
        };
        let terminal = match &self.terminal {
            TerminalConfig::CallOnMean { scale } => call_on_mean(d, *scale),
            TerminalConfig::CosineSum => {
                TerminalCondition::new(Arc::new(|x: &[f64]| x.iter().sum::<f64>().cos()), 1.0, (d as f64).sqrt())
            }
            TerminalConfig::Constant { value } => TerminalCondition::constant(*value),
        };
        let directions = self
            .directions
            .iter()
            .map(|b| Ok(Direction::Constant(vector(b, d, "direction")?)))
            .collect::<Result<Vec<_>>>()?;
        let terms = self
            .terms
            .iter()
            .map(|t| Ok((MultiIndex::new(t.index.clone())?, Coefficient::Constant(t.coefficient))))
            .collect::<Result<Vec<_>>>()?;
        let generator = PolynomialGenerator::new(d, directions, terms)?;
        let mut model = PdeModel::new(
            d,
            self.horizon,
            drift,
            Volatility::Constant(matrix(&self.volatility, d, "volatility")?),
            terminal,
            generator,
            self.mode,
        )?;
        if let Some(h) = self.euler_step {
            model = model.with_euler_step(h)?;
        }
        if self.x0.len() != d {
            return Err(Error::Config(format!("x0 must have length {d}")));
        }
        Ok(TestProblem { model: Arc::new(model), x0: self.x0.clone(), solution: None, gradient: None })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU_BURGERS: &str = r#"{
        "dim": 1, "horizon": 1.0, "x0": [1.0],
        "drift": { "affine": { "offset": [1.0], "linear": [[-1.0]] } },
        "volatility": [[0.5]],
        "terminal": { "call_on_mean": { "scale": 1.0 } },
        "directions": [[1.0]],
        "terms": [ { "index": [1, 1], "coefficient": 0.15 } ],
        "mode": "exact_ou"
    }"#;

    #[test]
    fn matches_preset() {
        let from_json = ModelConfig::from_json(OU_BURGERS).unwrap().build().unwrap();
        let preset = crate::harness::presets::load_preset("ou1d-burgers015").unwrap();
        assert_eq!(from_json.x0, preset.x0);
        assert_eq!(from_json.model.ou_rate(), preset.model.ou_rate());
        let (a, b) = (from_json.model.generator(), preset.model.generator());
        assert_eq!(a.eval(0.0, &[1.0], 0.7, &[2.0]).unwrap(), b.eval(0.0, &[1.0], 0.7, &[2.0]).unwrap());
        assert_eq!(from_json.model.terminal().eval(&[1.4]), preset.model.terminal().eval(&[1.4]));
    }

    #[test]
    fn shape_errors() {
        let bad = OU_BURGERS.replace("[[0.5]]", "[[0.5, 0.0]]");
        assert!(matches!(ModelConfig::from_json(&bad).unwrap().build(), Err(Error::Config(_))));
        assert!(ModelConfig::from_json("{").is_err());
    }
}
