//! Per-particle diffusion segments and their automatic-differentiation
//! weights `𝒲̄`, i.e. random vectors with
//! `∂ₓ E[φ(X_end)] = E[φ(X_end) 𝒲̄]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::generator::{PdeModel, SimulationMode};
use crate::skeleton::Mark;

/// Increments driving a segment.
#[derive(Clone, Debug, PartialEq)]
pub enum Increments {
    /// Brownian increment `ΔW` over the whole segment.
    Brownian(Vec<f64>),
    /// Standard normal vector of an exact OU step.
    Gaussian(Vec<f64>),
    /// Euler grid.
    Grid(EulerPath),
}

/// Recorded Euler grid: `states[j]` is the state at `times[j]`, and
/// `increments[j]` the Brownian increment over `[times[j], times[j+1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EulerPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub increments: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentResult {
    pub end: Vec<f64>,
    pub increments: Increments,
    /// Weight vector `𝒲̄`.
    pub weight: Vec<f64>,
    pub duration: f64,
}

fn normal_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[inline]
fn mat_vec_into(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = (0..v.len()).map(|c| m[(r, c)] * v[c]).sum();
    }
}

#[inline]
fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..m.nrows()).map(|r| (0..d).map(|c| m[(r, c)] * v[c]).sum()).collect()
}

/// `(σ₀ᵀ)⁻¹ ΔW / Δt`.
pub fn weight_const(sigma: &DMatrix<f64>, increment: &[f64], duration: f64) -> Result<Vec<f64>> {
    let inv_t = crate::generator::inverse_transpose(sigma).ok_or_else(|| Error::DegenerateDiffusion {
        t: f64::NAN,
        reason: "constant volatility is singular".into(),
    })?;
    Ok(weight_from_inverse(&inv_t, increment, duration))
}

#[inline]
fn weight_from_inverse(sigma_inv_t: &DMatrix<f64>, increment: &[f64], duration: f64) -> Vec<f64> {
    mat_vec(sigma_inv_t, increment).into_iter().map(|w| w / duration).collect()
}

/// Simulates `X` on `[t, t + Δt]` from `x` in the model's mode. `step`
/// overrides the Euler grid width and is ignored by the exact modes.
pub fn simulate_segment<R: Rng + ?Sized>(
    model: &PdeModel,
    t: f64,
    x: &[f64],
    duration: f64,
    rng: &mut R,
    step: Option<f64>,
) -> Result<SegmentResult> {
    simulate_segment_with(model, t, x, duration, rng, step, false)
}

/// As [`simulate_segment`]; with `record_path` the Euler grid is kept in the
/// result so that [`weight_general`] can recompute the weight.
pub fn simulate_segment_with<R: Rng + ?Sized>(
    model: &PdeModel,
    t: f64,
    x: &[f64],
    duration: f64,
    rng: &mut R,
    step: Option<f64>,
    record_path: bool,
) -> Result<SegmentResult> {
    let d = model.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    if !(duration > 0.0) {
        return Err(Error::DegenerateDiffusion { t, reason: format!("segment length {duration} is not positive") });
    }
    match model.mode() {
        SimulationMode::ExactConstant => {
            let sigma = model.volatility().constant().expect("validated constant volatility");
            let sqrt_dt = duration.sqrt();
            let dw: Vec<f64> = normal_vector(rng, d).into_iter().map(|z| z * sqrt_dt).collect();
            let mut end = vec![0.0; d];
            model.drift().eval_into(t, x, &mut end);
            let noise = mat_vec(sigma, &dw);
            for i in 0..d {
                end[i] = x[i] + end[i] * duration + noise[i];
            }
            let weight = weight_from_inverse(model.sigma_inv_t().expect("validated"), &dw, duration);
            Ok(SegmentResult { end, increments: Increments::Brownian(dw), weight, duration })
        }
        SimulationMode::ExactOu => simulate_ou(model, t, x, duration, rng),
        SimulationMode::Euler => simulate_euler(model, t, x, duration, rng, step, record_path),
    }
}

/// `(1 − e^{−βΔt})/β`, continuous at `β = 0`.
fn ou_mean_factor(beta: f64, duration: f64) -> f64 {
    if beta.abs() * duration < 1e-12 {
        duration
    } else {
        -(-beta * duration).exp_m1() / beta
    }
}

/// Standard deviation multiplier `√((1 − e^{−2βΔt})/(2β))`.
fn ou_std_factor(beta: f64, duration: f64) -> f64 {
    ou_mean_factor(2.0 * beta, duration).sqrt()
}

fn simulate_ou<R: Rng + ?Sized>(model: &PdeModel, t: f64, x: &[f64], duration: f64, rng: &mut R) -> Result<SegmentResult> {
    let d = model.dim();
    let beta = model.ou_rate().expect("validated OU model");
    let sigma = model.volatility().constant().expect("validated constant volatility");
    let decay = (-beta * duration).exp();
    let mean_factor = ou_mean_factor(beta, duration);
    let s = ou_std_factor(beta, duration);
    let z = normal_vector(rng, d);
    // offset a = μ(t, 0) for μ = a − βx
    let mut offset = vec![0.0; d];
    model.drift().eval_into(t, &vec![0.0; d], &mut offset);
    let noise = mat_vec(sigma, &z);
    let end: Vec<f64> = (0..d).map(|i| decay * x[i] + offset[i] * mean_factor + s * noise[i]).collect();
    let sigma_inv_t = model.sigma_inv_t().expect("validated");
    let weight = mat_vec(sigma_inv_t, &z).into_iter().map(|w| w * decay / s).collect();
    Ok(SegmentResult { end, increments: Increments::Gaussian(z), weight, duration })
}

fn euler_grid(model: &PdeModel, duration: f64, step: Option<f64>) -> (usize, f64) {
    let h0 = step.unwrap_or_else(|| model.euler_step());
    let n = ((duration / h0).ceil() as usize).max(1);
    (n, duration / n as f64)
}

/// Solves `σᵀ w = v`, i.e. `w = (σᵀ)⁻¹ v`.
fn solve_transpose(sigma: &DMatrix<f64>, v: &[f64], t: f64) -> Result<Vec<f64>> {
    let rhs = DVector::from_column_slice(v);
    let w = sigma
        .transpose()
        .lu()
        .solve(&rhs)
        .filter(|w| w.iter().all(|c| c.is_finite()))
        .ok_or_else(|| Error::DegenerateDiffusion { t, reason: "volatility matrix is singular".into() })?;
    Ok(w.as_slice().to_vec())
}

/// Tangent propagation over one grid step:
/// `Ŷ = Y + Dμ·Y·h` (used in the weight, known before the increment) and
/// `Y' = Ŷ + Σᵢ Dσᵢ·Y·ΔWⁱ`.
struct Tangent {
    y: DMatrix<f64>,
    predicted: DMatrix<f64>,
    jac_mu: DMatrix<f64>,
    jac_sigma: Vec<DMatrix<f64>>,
}

impl Tangent {
    fn new(d: usize) -> Self {
        Tangent {
            y: DMatrix::identity(d, d),
            predicted: DMatrix::zeros(d, d),
            jac_mu: DMatrix::zeros(d, d),
            jac_sigma: vec![DMatrix::zeros(d, d); d],
        }
    }

    /// Fills `self.predicted` with `Ŷ`.
    fn predict(&mut self, model: &PdeModel, t: f64, x: &[f64], h: f64) {
        model.drift().jacobian(t, x, &mut self.jac_mu);
        let d = self.y.nrows();
        for c in 0..d {
            for r in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += self.jac_mu[(r, k)] * self.y[(k, c)];
                }
                self.predicted[(r, c)] = self.y[(r, c)] + h * acc;
            }
        }
    }

    fn advance(&mut self, model: &PdeModel, t: f64, x: &[f64], dw: &[f64]) {
        if model.volatility().constant().is_none() {
            model.volatility().column_jacobians(t, x, &mut self.jac_sigma);
            for (i, js) in self.jac_sigma.iter().enumerate() {
                self.predicted.gemm(dw[i], js, &self.y, 1.0);
            }
        }
        std::mem::swap(&mut self.y, &mut self.predicted);
    }
}

fn simulate_euler<R: Rng + ?Sized>(
    model: &PdeModel,
    t: f64,
    x: &[f64],
    duration: f64,
    rng: &mut R,
    step: Option<f64>,
    record_path: bool,
) -> Result<SegmentResult> {
    let d = model.dim();
    let (n, h) = euler_grid(model, duration, step);
    let sqrt_h = h.sqrt();
    let mut state = x.to_vec();
    let mut drift = vec![0.0; d];
    let mut sigma_buf = DMatrix::zeros(d, d);
    let mut path = record_path.then(|| EulerPath {
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity(n + 1),
        increments: Vec::with_capacity(n),
    });

    let constant_sigma = model.volatility().constant();
    let frozen_tangent = constant_sigma.is_some() && model.drift().is_constant();
    let mut total_dw = vec![0.0; d];
    let mut weight = vec![0.0; d];
    let mut tangent = Tangent::new(d);

    let mut dw = vec![0.0; d];
    let mut scaled = vec![0.0; d];
    for j in 0..n {
        let tj = t + j as f64 * h;
        for v in dw.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * sqrt_h;
        }
        if let Some(p) = path.as_mut() {
            p.times.push(tj);
            p.states.push(state.clone());
            p.increments.push(dw.clone());
        }
        model.drift().eval_into(tj, &state, &mut drift);
        let sigma = match constant_sigma {
            Some(s) => s,
            None => {
                model.volatility().eval_into(tj, &state, &mut sigma_buf);
                &sigma_buf
            }
        };
        if frozen_tangent {
            for i in 0..d {
                total_dw[i] += dw[i];
            }
        } else {
            match model.sigma_inv_t() {
                Some(inv_t) => mat_vec_into(inv_t, &dw, &mut scaled),
                None => scaled.copy_from_slice(&solve_transpose(sigma, &dw, tj)?),
            }
            tangent.predict(model, tj, &state, h);
            // weight += Ŷᵀ (σᵀ)⁻¹ ΔW
            for c in 0..d {
                weight[c] += (0..d).map(|r| tangent.predicted[(r, c)] * scaled[r]).sum::<f64>();
            }
            tangent.advance(model, tj, &state, &dw);
        }
        for i in 0..d {
            let noise: f64 = (0..d).map(|c| sigma[(i, c)] * dw[c]).sum();
            state[i] += drift[i] * h + noise;
        }
    }

    let weight = if frozen_tangent {
        weight_from_inverse(model.sigma_inv_t().expect("constant volatility is invertible"), &total_dw, duration)
    } else {
        weight.into_iter().map(|w| w / duration).collect()
    };
    if let Some(p) = path.as_mut() {
        p.times.push(t + duration);
        p.states.push(state.clone());
    }
    let increments = match path {
        Some(p) => Increments::Grid(p),
        None => Increments::Brownian(vec![]),
    };
    Ok(SegmentResult { end: state, increments, weight, duration })
}

/// Recomputes the Euler weight `(1/Δt) Σⱼ Ŷⱼᵀ (σ(tⱼ, Xⱼ)ᵀ)⁻¹ ΔWⱼ` from a
/// recorded grid, propagating the tangent process along the stored path.
pub fn weight_general(model: &PdeModel, segment: &SegmentResult) -> Result<Vec<f64>> {
    let Increments::Grid(path) = &segment.increments else {
        return Err(Error::Unsupported("weight_general needs a recorded Euler grid".into()));
    };
    let d = model.dim();
    let n = path.increments.len();
    if model.volatility().constant().is_some() && model.drift().is_constant() {
        let mut total = vec![0.0; d];
        for dw in &path.increments {
            for i in 0..d {
                total[i] += dw[i];
            }
        }
        let sigma = model.volatility().constant().expect("checked above");
        return weight_const(sigma, &total, segment.duration);
    }
    let mut tangent = Tangent::new(d);
    let mut sigma = DMatrix::zeros(d, d);
    let mut weight = vec![0.0; d];
    for j in 0..n {
        let tj = path.times[j];
        let h = path.times[j + 1] - tj;
        let x = &path.states[j];
        let dw = &path.increments[j];
        model.volatility().eval_into(tj, x, &mut sigma);
        let scaled = match model.sigma_inv_t() {
            Some(inv_t) => mat_vec(inv_t, dw),
            None => solve_transpose(&sigma, dw, tj)?,
        };
        tangent.predict(model, tj, x, h);
        for c in 0..d {
            weight[c] += (0..d).map(|r| tangent.predicted[(r, c)] * scaled[r]).sum::<f64>();
        }
        tangent.advance(model, tj, x, dw);
    }
    Ok(weight.into_iter().map(|w| w / segment.duration).collect())
}

/// Frozen-coefficient step `X̂ = x + drift·Δt + σ₀ΔW`; returns the end state
/// and `𝒲̄ = (σ₀ᵀ)⁻¹ΔW/Δt`.
pub fn simulate_frozen_segment<R: Rng + ?Sized>(
    model: &PdeModel,
    x: &[f64],
    drift: &[f64],
    duration: f64,
    rng: &mut R,
) -> Result<SegmentResult> {
    let d = model.dim();
    let (Some(sigma), Some(inv_t)) = (model.volatility().constant(), model.sigma_inv_t()) else {
        return Err(Error::Unsupported(
            "the frozen-coefficient scheme needs a constant invertible volatility".into(),
        ));
    };
    let sqrt_dt = duration.sqrt();
    let dw: Vec<f64> = normal_vector(rng, d).into_iter().map(|z| z * sqrt_dt).collect();
    let noise = mat_vec(sigma, &dw);
    let end = (0..d).map(|i| x[i] + drift[i] * duration + noise[i]).collect();
    let weight = weight_from_inverse(inv_t, &dw, duration);
    Ok(SegmentResult { end, increments: Increments::Brownian(dw), weight, duration })
}

/// `𝒲_k` for a particle of the given mark born at `(birth_time, birth_state)`:
/// 1 for the value mark, `bᵢ(t, x)·𝒲̄` for gradient marks and
/// `(μ_birth − μ_parent)·𝒲̄` for the drift mark, where `drift_difference`
/// carries `μ_birth − μ_parent`.
pub fn weight_factor(
    mark: Mark,
    model: &PdeModel,
    birth_time: f64,
    birth_state: &[f64],
    segment_weight: &[f64],
    drift_difference: Option<&[f64]>,
) -> Result<f64> {
    match mark {
        Mark::Value => Ok(1.0),
        Mark::Gradient(i) => Ok(model.generator().direction(i).dot(birth_time, birth_state, segment_weight)),
        Mark::Drift => {
            let diff = drift_difference.ok_or(Error::UnexpectedDriftMark)?;
            Ok(diff.iter().zip(segment_weight).map(|(a, b)| a * b).sum())
        }
    }
}
