//! Sufficient integrability conditions for the representation: the moment
//! constants `C₁,q`, `C₂,q`, their hatted versions, the two conditions
//! (small coefficients or small horizon via the comparison ODE) and the
//! density-shape requirements on the gamma arrival law.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Direction, PdeModel};
use crate::skeleton::{ArrivalDistribution, BranchType, BranchingLaw, GammaLaw};
use crate::special::ln_gamma;

/// Largest dimension for which box suprema are found by vertex enumeration.
const MAX_VERTEX_DIM: usize = 16;
/// `η` above this is treated as blown up.
pub const BLOW_UP_LEVEL: f64 = 1e12;
const BORDERLINE_RTOL: f64 = 1e-12;

/// `sup_{|vᵢ| ≤ r} vᵀ A v` for symmetric positive semi-definite `A`. The
/// maximum of a convex function over a box is attained at a vertex; above
/// [`MAX_VERTEX_DIM`] the bound `r² Σ|A_ij|` is returned instead.
pub fn box_quadratic_sup(a: &DMatrix<f64>, radius: f64) -> f64 {
    let d = a.nrows();
    if radius == 0.0 {
        return 0.0;
    }
    if !radius.is_finite() {
        return f64::INFINITY;
    }
    if d > MAX_VERTEX_DIM {
        return radius * radius * a.iter().map(|v| v.abs()).sum::<f64>();
    }
    let mut best = f64::NEG_INFINITY;
    // the vertex set is symmetric, so fixing the first sign halves the work
    for mask in 0u32..(1u32 << (d - 1)) {
        let sign = |i: usize| if i > 0 && mask & (1 << (i - 1)) != 0 { -1.0 } else { 1.0 };
        let mut v = 0.0;
        for r in 0..d {
            for c in 0..d {
                v += sign(r) * sign(c) * a[(r, c)];
            }
        }
        best = best.max(v);
    }
    radius * radius * best
}

/// `E|N|^q` for a standard normal `N`.
pub fn normal_abs_moment(q: f64) -> f64 {
    (0.5 * q * 2f64.ln() + ln_gamma(0.5 * (q + 1.0)) - 0.5 * std::f64::consts::PI.ln()).exp()
}

/// Closed-form `(C₁,q, C₂,q)` for constant volatility `σ₀`:
///
/// ```text
/// C₁,q = |g|^q ∨ (sup_{b₀ ∈ B(L_g)} b₀ᵀΣb₀ + maxᵢ ‖bᵢᵀΣ⁻¹bᵢ‖)^q · 2^{q−1}Γ((2q+1)/2)/√π
/// C₂,q = maxᵢ ‖bᵢᵀΣ⁻¹bᵢ‖^{q/2} · 2^{q/2}Γ((q+1)/2)/√π
/// ```
///
/// with `Σ = σ₀σ₀ᵀ`; for non-constant directions the declared componentwise
/// bound defines the box over which `bᵀΣ⁻¹b` is maximized.
pub fn constants_constant_coeff(model: &PdeModel, q: f64) -> Result<(f64, f64)> {
    if !(q > 1.0) {
        return Err(Error::InvalidModel(format!("moment order must exceed 1, got {q}")));
    }
    let Some(sigma) = model.volatility().constant() else {
        return Err(Error::Unsupported(
            "closed-form constants need a constant volatility; supply C1q and C2q explicitly".into(),
        ));
    };
    let cov = sigma * sigma.transpose();
    let precision = cov.clone().try_inverse().ok_or_else(|| Error::DegenerateDiffusion {
        t: 0.0,
        reason: "σ₀σ₀ᵀ is singular".into(),
    })?;
    let b0_term = box_quadratic_sup(&cov, model.terminal().lipschitz);
    let bi_term = model
        .generator()
        .directions()
        .iter()
        .map(|b| match b {
            Direction::Constant(v) => (v.transpose() * &precision * v)[(0, 0)],
            Direction::Function { bound, .. } => box_quadratic_sup(&precision, *bound),
        })
        .fold(0.0, f64::max);
    let g_sup = model.terminal().sup_norm;
    let gaussian_1 = (((q - 1.0) * 2f64.ln()) + ln_gamma(q + 0.5) - 0.5 * std::f64::consts::PI.ln()).exp();
    let c1 = g_sup.powf(q).max((b0_term + bi_term).powf(q) * gaussian_1);
    let c2 = if model.generator().num_directions() == 0 {
        0.0
    } else {
        bi_term.powf(q / 2.0) * normal_abs_moment(q)
    };
    Ok((c1, c2))
}

/// `C₂,q` as used in the conditions: at least `T^{q/2}`, which bounds the
/// `(√Δt·𝒲)^q` moment of value-marked particles where `𝒲 = 1`.
pub fn effective_c2(c2q: f64, horizon: f64, q: f64) -> f64 {
    c2q.max(horizon.powf(q / 2.0))
}

fn gamma_law(law: &BranchingLaw) -> Result<&GammaLaw> {
    match law.arrival() {
        ArrivalDistribution::Gamma(g) => Ok(g),
        ArrivalDistribution::Fixed { .. } => {
            Err(Error::Unsupported("condition checks need the gamma arrival law".into()))
        }
    }
}

/// `sup_{t ∈ (0, T]} t^{−a}/ρ(t)` for the gamma law. Since
/// `t^{−a}/ρ(t) = Γ(κ)θ^κ t^{1−κ−a} e^{t/θ}`, it is attained at `T` when
/// `κ ≤ 1 − a` and infinite otherwise.
pub fn gamma_inverse_density_sup(g: &GammaLaw, a: f64, horizon: f64) -> f64 {
    let exponent = 1.0 - g.shape() - a;
    if exponent < 0.0 {
        return f64::INFINITY;
    }
    (-g.log_density(horizon) - a * horizon.ln()).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionI {
    pub holds: bool,
    /// One of the two quantities equals 1 up to rounding.
    pub borderline: bool,
    /// `C₁,q / F̄(T)^q`.
    pub terminal_term: f64,
    /// `sup_{ℓ,t} C₂,q (|c_ℓ|/(p_ℓ √t ρ(t)))^q`.
    pub branching_term: f64,
    /// Multi-index attaining the branching supremum when it exceeds 1.
    pub offending_index: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaSolution {
    /// `η(start)`, or `None` after a blow-up.
    pub eta_at_start: Option<f64>,
    /// Time interval `[lower, upper]` containing the blow-up.
    pub blow_up_bracket: Option<(f64, f64)>,
    /// `(t, η(t))` on the grid, from the horizon backwards.
    pub path: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionII {
    pub applicable: bool,
    pub holds: bool,
    pub eta_at_start: Option<f64>,
    pub blow_up_bracket: Option<(f64, f64)>,
    /// `∫_{Ĉ₁,q}^∞ dx / (Ĉ₂,q Σ|c_ℓ| x^{|ℓ|})`.
    pub integral: Option<f64>,
    pub integral_holds: Option<bool>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityShape {
    /// `κ ≤ 1/2`, so that `ρ(t) ≥ C t^{−1/2}` near 0.
    pub mode_i_ok: bool,
    /// `κ ≤ 1 − q/(2(q−1))`; false when `q ≤ 2`.
    pub mode_ii_ok: bool,
    pub required_kappa_mode_i: f64,
    pub required_kappa_mode_ii: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub q: f64,
    pub c1q: f64,
    pub c2q: f64,
    pub c2q_effective: f64,
    pub c1q_hat: f64,
    pub c2q_hat: f64,
    pub condition_i: ConditionI,
    pub condition_ii: ConditionII,
    pub density_shape: DensityShape,
}

pub fn check_density_shape(law: &BranchingLaw, q: f64) -> Result<DensityShape> {
    let kappa = gamma_law(law)?.shape();
    let required_ii = (q > 2.0).then(|| 1.0 - q / (2.0 * (q - 1.0)));
    Ok(DensityShape {
        mode_i_ok: kappa <= 0.5,
        mode_ii_ok: required_ii.is_some_and(|k| kappa <= k),
        required_kappa_mode_i: 0.5,
        required_kappa_mode_ii: required_ii,
    })
}

fn is_borderline(v: f64) -> bool {
    (v - 1.0).abs() <= BORDERLINE_RTOL
}

/// Condition (i) given `C₁,q` and the effective `C₂,q`.
pub fn check_condition_i(law: &BranchingLaw, model: &PdeModel, q: f64, c1q: f64, c2q_eff: f64) -> Result<ConditionI> {
    let g = gamma_law(law)?;
    let horizon = model.horizon();
    let terminal_term = c1q / law.survival(horizon).powf(q);
    let inv_sqrt_density = gamma_inverse_density_sup(g, 0.5, horizon);
    let mut branching_term = 0.0f64;
    let mut worst = None;
    for (k, term) in model.generator().terms().iter().enumerate() {
        let ratio = term.coefficient.sup_norm() / law.probability(BranchType::Term(k));
        let value = if ratio == 0.0 { 0.0 } else { c2q_eff * (ratio * inv_sqrt_density).powf(q) };
        if value > branching_term || worst.is_none() {
            branching_term = branching_term.max(value);
            worst = Some(term.index.to_string());
        }
    }
    let holds = terminal_term <= 1.0 && branching_term <= 1.0;
    Ok(ConditionI {
        holds,
        borderline: is_borderline(terminal_term) || is_borderline(branching_term),
        terminal_term,
        branching_term,
        offending_index: if branching_term > 1.0 { worst } else { None },
    })
}

/// `(Ĉ₁,q, Ĉ₂,q)` from `C₁,q` and the effective `C₂,q`.
pub fn hat_constants(law: &BranchingLaw, model: &PdeModel, q: f64, c1q: f64, c2q_eff: f64) -> Result<(f64, f64)> {
    let g = gamma_law(law)?;
    let horizon = model.horizon();
    let c1_hat = c1q / law.survival(horizon).powf(q - 1.0);
    let a = q / (2.0 * (q - 1.0));
    let inv = gamma_inverse_density_sup(g, a, horizon);
    let sup_ratio = model
        .generator()
        .terms()
        .iter()
        .enumerate()
        .map(|(k, t)| t.coefficient.sup_norm() / law.probability(BranchType::Term(k)))
        .fold(0.0, f64::max);
    let c2_hat = if sup_ratio == 0.0 { 0.0 } else { c2q_eff * (sup_ratio * inv).powf(q - 1.0) };
    Ok((c1_hat, c2_hat))
}

/// Right-hand side `F(η) = Ĉ₂ Σ |c_ℓ| η^{|ℓ|}` of the backward ODE.
fn eta_rhs(c2_hat: f64, terms: &[(u32, f64)], eta: f64) -> f64 {
    c2_hat * terms.iter().map(|(order, c)| c * eta.powi(*order as i32)).sum::<f64>()
}

fn rk4(c2_hat: f64, terms: &[(u32, f64)], eta: f64, h: f64) -> f64 {
    let f = |y: f64| eta_rhs(c2_hat, terms, y);
    let k1 = f(eta);
    let k2 = f(eta + 0.5 * h * k1);
    let k3 = f(eta + 0.5 * h * k2);
    let k4 = f(eta + h * k3);
    eta + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

enum StepOutcome {
    Value(f64),
    BlowUp,
}

/// Advances `η` by `h` with RK4, halving recursively until a full step and
/// two half steps agree to `1e−6` relative.
fn adaptive_step(c2_hat: f64, terms: &[(u32, f64)], eta: f64, h: f64, depth: u32) -> Result<StepOutcome> {
    let full = rk4(c2_hat, terms, eta, h);
    let half = rk4(c2_hat, terms, rk4(c2_hat, terms, eta, 0.5 * h), 0.5 * h);
    if !full.is_finite() || !half.is_finite() || half > BLOW_UP_LEVEL {
        return Ok(StepOutcome::BlowUp);
    }
    if (full - half).abs() <= 1e-6 * half.abs().max(1.0) {
        return Ok(StepOutcome::Value(half));
    }
    if depth >= 40 {
        if half > 1e6 {
            return Ok(StepOutcome::BlowUp);
        }
        return Err(Error::Refinement(format!("step halving did not converge at η = {half}")));
    }
    match adaptive_step(c2_hat, terms, eta, 0.5 * h, depth + 1)? {
        StepOutcome::Value(mid) => adaptive_step(c2_hat, terms, mid, 0.5 * h, depth + 1),
        StepOutcome::BlowUp => Ok(StepOutcome::BlowUp),
    }
}

/// Integrates `η' = −Ĉ₂ Σ|c_ℓ| η^{|ℓ|}` backwards from `η(T) = Ĉ₁` on a
/// uniform grid of `grid` steps over `[start, horizon]`. `terms` lists
/// `(|ℓ|, |c_ℓ|_∞)`.
pub fn solve_eta(
    c1_hat: f64,
    c2_hat: f64,
    terms: &[(u32, f64)],
    start: f64,
    horizon: f64,
    grid: usize,
) -> Result<EtaSolution> {
    if grid == 0 || !(start < horizon) {
        return Err(Error::Refinement("need a positive grid on a non-empty interval".into()));
    }
    let h = (horizon - start) / grid as f64;
    let mut eta = c1_hat;
    let mut path = vec![(horizon, eta)];
    if !eta.is_finite() {
        return Ok(EtaSolution { eta_at_start: None, blow_up_bracket: Some((horizon, horizon)), path });
    }
    for j in 0..grid {
        let upper = horizon - j as f64 * h;
        let lower = horizon - (j + 1) as f64 * h;
        match adaptive_step(c2_hat, terms, eta, h, 0)? {
            StepOutcome::Value(v) => {
                eta = v;
                path.push((lower, eta));
            }
            StepOutcome::BlowUp => {
                return Ok(EtaSolution { eta_at_start: None, blow_up_bracket: Some((lower.max(start), upper)), path });
            }
        }
    }
    Ok(EtaSolution { eta_at_start: Some(eta), blow_up_bracket: None, path })
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
}

/// `∫_{Ĉ₁}^∞ dx / (Ĉ₂ Σ|c_ℓ| x^{|ℓ|})`, computed after the substitution
/// `x = Ĉ₁/s`. Infinite when no term has order at least 2.
pub fn blow_up_integral(c1_hat: f64, c2_hat: f64, terms: &[(u32, f64)]) -> f64 {
    let active: Vec<(u32, f64)> = terms.iter().copied().filter(|(_, c)| *c > 0.0).collect();
    let max_order = active.iter().map(|(o, _)| *o).max().unwrap_or(0);
    if c2_hat == 0.0 || active.is_empty() || max_order <= 1 {
        return f64::INFINITY;
    }
    if !c1_hat.is_finite() || !c2_hat.is_finite() {
        return 0.0;
    }
    if c1_hat == 0.0 {
        // the integral near 0 diverges unless every term has positive order
        if active.iter().any(|(o, _)| *o == 0) {
            return f64::INFINITY;
        }
    }
    // dx/F(x) = Ĉ₁ ds / (s² F(Ĉ₁/s)) = Ĉ₁ ds / (Ĉ₂ Σ c Ĉ₁^ℓ s^{2−ℓ})
    let f = move |s: f64| {
        let denom: f64 = active
            .iter()
            .map(|(o, c)| c * c1_hat.powi(*o as i32) * s.powi(2 - *o as i32))
            .sum::<f64>()
            * c2_hat;
        c1_hat / denom
    };
    let fa = f(0.0);
    let fb = f(1.0);
    let (m, fm, whole) = simpson(&f, 0.0, fa, 1.0, fb);
    adaptive_simpson(&f, 0.0, fa, 1.0, fb, m, fm, whole, 1e-12, 50)
}

fn order_terms(model: &PdeModel) -> Vec<(u32, f64)> {
    model
        .generator()
        .terms()
        .iter()
        .map(|t| (t.index.order(), t.coefficient.sup_norm()))
        .collect()
}

/// Condition (ii) given the hatted constants.
pub fn check_condition_ii(
    law: &BranchingLaw,
    model: &PdeModel,
    q: f64,
    c1_hat: f64,
    c2_hat: f64,
    grid: usize,
) -> Result<ConditionII> {
    let shape = check_density_shape(law, q)?;
    let terms = order_terms(model);
    let mut note = None;
    if q <= 2.0 {
        return Ok(ConditionII {
            applicable: false,
            holds: false,
            eta_at_start: None,
            blow_up_bracket: None,
            integral: None,
            integral_holds: None,
            note: Some(format!("condition (ii) needs q > 2, got q = {q}")),
        });
    }
    if !c2_hat.is_finite() {
        return Ok(ConditionII {
            applicable: false,
            holds: false,
            eta_at_start: None,
            blow_up_bracket: None,
            integral: None,
            integral_holds: None,
            note: Some(format!(
                "Ĉ2,q is infinite: the arrival density is too light near 0 (need κ ≤ {:.6})",
                shape.required_kappa_mode_ii.unwrap_or(f64::NAN)
            )),
        });
    }
    if !shape.mode_ii_ok {
        note = Some("density shape requirement for condition (ii) is not met".to_string());
    }
    let eta = solve_eta(c1_hat, c2_hat, &terms, 0.0, model.horizon(), grid)?;
    let integral = blow_up_integral(c1_hat, c2_hat, &terms);
    Ok(ConditionII {
        applicable: true,
        holds: eta.eta_at_start.is_some(),
        eta_at_start: eta.eta_at_start,
        blow_up_bracket: eta.blow_up_bracket,
        integral: Some(integral),
        integral_holds: Some(model.horizon() < integral),
        note,
    })
}

/// Full report. `constants` overrides `(C₁,q, C₂,q)`, which is required for
/// non-constant volatility.
pub fn check_conditions(
    law: &BranchingLaw,
    model: &PdeModel,
    q: f64,
    grid: usize,
    constants: Option<(f64, f64)>,
) -> Result<ConditionReport> {
    let (c1q, c2q) = match constants {
        Some(c) => c,
        None => constants_constant_coeff(model, q)?,
    };
    let c2q_effective = effective_c2(c2q, model.horizon(), q);
    let condition_i = check_condition_i(law, model, q, c1q, c2q_effective)?;
    let (c1q_hat, c2q_hat) = hat_constants(law, model, q, c1q, c2q_effective)?;
    let condition_ii = check_condition_ii(law, model, q, c1q_hat, c2q_hat, grid)?;
    Ok(ConditionReport {
        q,
        c1q,
        c2q,
        c2q_effective,
        c1q_hat,
        c2q_hat,
        condition_i,
        condition_ii,
        density_shape: check_density_shape(law, q)?,
    })
}
