//! PDE model description: diffusion coefficients, terminal condition and the
//! polynomial nonlinearity
//!
//! ```text
//! f(t, x, y, z) = Σ_{ℓ ∈ L} c_ℓ(t, x) · y^{ℓ₀} · Π_{i=1..m} (b_i(t, x) · z)^{ℓᵢ}
//! ```
//!
//! together with the two closed-form test families (the cosine model and the
//! Ornstein–Uhlenbeck call-on-mean model).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(f64, &[f64], &mut DMatrix<f64>) + Send + Sync>;
/// Writes `∂σ_{·,i}/∂x` into `out[i]` for every column `i`.
pub type VolatilityJacobian = Arc<dyn Fn(f64, &[f64], &mut [DMatrix<f64>]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Exponent vector `ℓ = (ℓ₀, ℓ₁, …, ℓ_m)`: `ℓ₀` is the power of `u`, `ℓᵢ` the
/// power of the directional derivative `bᵢ · Du`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidModel("multi-index must have at least one entry".into()));
        }
        Ok(MultiIndex(entries))
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    /// `|ℓ|`, the number of offspring of a branching of this type.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Number of gradient directions `m` this index is written for.
    pub fn directions(&self) -> usize {
        self.0.len() - 1
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// Coefficient `c_ℓ(t, x)` with its declared sup-norm.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Function { eval: ScalarField, bound: f64 },
}

impl Coefficient {
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Function { eval, .. } => eval(t, x),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            Coefficient::Constant(c) => c.abs(),
            Coefficient::Function { bound, .. } => *bound,
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Function { bound, .. } => write!(f, "Function(|c| <= {bound})"),
        }
    }
}

/// Direction field `b_i(t, x)`. For functions, `bound` is the declared sup of
/// the absolute value of every component.
#[derive(Clone)]
pub enum Direction {
    Constant(DVector<f64>),
    Function { eval: VectorField, bound: f64 },
}

impl Direction {
    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Direction::Constant(b) => out.copy_from_slice(b.as_slice()),
            Direction::Function { eval, .. } => eval(t, x, out),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.eval_into(t, x, out.as_mut_slice());
        out
    }

    #[inline]
    pub fn dot(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        match self {
            Direction::Constant(b) => b.iter().zip(v).map(|(a, b)| a * b).sum(),
            Direction::Function { eval, .. } => {
                let mut out = vec![0.0; v.len()];
                eval(t, x, &mut out);
                out.iter().zip(v).map(|(a, b)| a * b).sum()
            }
        }
    }
}

impl fmt::Debug for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Constant(b) => write!(f, "Constant({:?})", b.as_slice()),
            Direction::Function { bound, .. } => write!(f, "Function(|b| <= {bound})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Term {
    pub index: MultiIndex,
    pub coefficient: Coefficient,
}

/// The polynomial nonlinearity. Terms are kept sorted by multi-index.
#[derive(Clone, Debug)]
pub struct PolynomialGenerator {
    dim: usize,
    directions: Vec<Direction>,
    terms: Vec<Term>,
}

impl PolynomialGenerator {
    pub fn new(
        dim: usize,
        directions: Vec<Direction>,
        terms: Vec<(MultiIndex, Coefficient)>,
    ) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidModel("generator needs at least one term".into()));
        }
        let m = directions.len();
        for dir in &directions {
            if let Direction::Constant(b) = dir {
                if b.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: b.len() });
                }
            }
        }
        let mut terms: Vec<Term> = terms
            .into_iter()
            .map(|(index, coefficient)| Term { index, coefficient })
            .collect();
        for term in &terms {
            if term.index.directions() != m {
                return Err(Error::InvalidModel(format!(
                    "multi-index {} has {} entries, expected {}",
                    term.index,
                    term.index.entries().len(),
                    m + 1
                )));
            }
        }
        terms.sort_by(|a, b| a.index.cmp(&b.index));
        if let Some(w) = terms.windows(2).find(|w| w[0].index == w[1].index) {
            return Err(Error::InvalidModel(format!("duplicate multi-index {}", w[0].index)));
        }
        Ok(PolynomialGenerator { dim, directions, terms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of gradient directions `m`.
    pub fn num_directions(&self) -> usize {
        self.directions.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn indices(&self) -> Vec<MultiIndex> {
        self.terms.iter().map(|t| t.index.clone()).collect()
    }

    /// Direction `b_i`, 1-based as in the nonlinearity.
    pub fn direction(&self, i: usize) -> &Direction {
        &self.directions[i - 1]
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    fn check_dims(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: z.len() });
        }
        Ok(())
    }

    fn projections(&self, t: f64, x: &[f64], z: &[f64]) -> Vec<f64> {
        self.directions.iter().map(|b| b.dot(t, x, z)).collect()
    }

    fn monomial(index: &MultiIndex, y: f64, bz: &[f64]) -> f64 {
        let e = index.entries();
        let mut v = y.powi(e[0] as i32);
        for (p, &k) in bz.iter().zip(&e[1..]) {
            v *= p.powi(k as i32);
        }
        v
    }

    /// Contribution of the `k`-th (sorted) term alone.
    pub fn eval_term(&self, k: usize, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
        self.check_dims(x, z)?;
        let bz = self.projections(t, x, z);
        let term = &self.terms[k];
        Ok(term.coefficient.eval(t, x) * Self::monomial(&term.index, y, &bz))
    }

    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
        self.check_dims(x, z)?;
        let bz = self.projections(t, x, z);
        Ok(self
            .terms
            .iter()
            .map(|term| term.coefficient.eval(t, x) * Self::monomial(&term.index, y, &bz))
            .sum())
    }
}

/// `f(t, x, y, z)`; `0⁰ = 1`, so pure source terms evaluate to `c_ℓ(t, x)`.
pub fn eval_generator(gen: &PolynomialGenerator, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
    gen.eval(t, x, y, z)
}

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

#[derive(Clone)]
pub enum Drift {
    Constant(DVector<f64>),
    /// `μ(t, x) = offset + linear · x`.
    Affine { offset: DVector<f64>, linear: DMatrix<f64> },
    /// General drift; the Jacobian falls back to central differences.
    Function { eval: VectorField, jacobian: Option<MatrixField> },
}

impl Drift {
    #[inline]
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Constant(m) => out.copy_from_slice(m.as_slice()),
            Drift::Affine { offset, linear } => {
                let d = x.len();
                for r in 0..d {
                    let mut acc = offset[r];
                    for c in 0..d {
                        acc += linear[(r, c)] * x[c];
                    }
                    out[r] = acc;
                }
            }
            Drift::Function { eval, .. } => eval(t, x, out),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.eval_into(t, x, out.as_mut_slice());
        out
    }

    pub fn jacobian(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        match self {
            Drift::Constant(_) => out.fill(0.0),
            Drift::Affine { linear, .. } => out.copy_from(linear),
            Drift::Function { jacobian: Some(jac), .. } => jac(t, x, out),
            Drift::Function { eval, jacobian: None } => {
                let d = x.len();
                let mut xp = x.to_vec();
                let mut up = vec![0.0; d];
                let mut dn = vec![0.0; d];
                for c in 0..d {
                    let h = fd_step(x[c]);
                    xp[c] = x[c] + h;
                    eval(t, &xp, &mut up);
                    xp[c] = x[c] - h;
                    eval(t, &xp, &mut dn);
                    xp[c] = x[c];
                    for r in 0..d {
                        out[(r, c)] = (up[r] - dn[r]) / (2.0 * h);
                    }
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Drift::Constant(_))
    }
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Constant(m) => write!(f, "Constant({:?})", m.as_slice()),
            Drift::Affine { .. } => write!(f, "Affine"),
            Drift::Function { .. } => write!(f, "Function"),
        }
    }
}

#[derive(Clone)]
pub enum Volatility {
    Constant(DMatrix<f64>),
    Function { eval: MatrixField, jacobian: Option<VolatilityJacobian> },
}

impl Volatility {
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        match self {
            Volatility::Constant(s) => out.copy_from(s),
            Volatility::Function { eval, .. } => eval(t, x, out),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let mut out = DMatrix::zeros(d, d);
        self.eval_into(t, x, &mut out);
        out
    }

    /// `out[i][(r, c)] = ∂σ_{r,i} / ∂x_c`.
    pub fn column_jacobians(&self, t: f64, x: &[f64], out: &mut [DMatrix<f64>]) {
        match self {
            Volatility::Constant(_) => out.iter_mut().for_each(|m| m.fill(0.0)),
            Volatility::Function { jacobian: Some(jac), .. } => jac(t, x, out),
            Volatility::Function { eval, jacobian: None } => {
                let d = x.len();
                let mut xp = x.to_vec();
                let mut up = DMatrix::zeros(d, d);
                let mut dn = DMatrix::zeros(d, d);
                for c in 0..d {
                    let h = fd_step(x[c]);
                    xp[c] = x[c] + h;
                    eval(t, &xp, &mut up);
                    xp[c] = x[c] - h;
                    eval(t, &xp, &mut dn);
                    xp[c] = x[c];
                    for (i, m) in out.iter_mut().enumerate() {
                        for r in 0..d {
                            m[(r, c)] = (up[(r, i)] - dn[(r, i)]) / (2.0 * h);
                        }
                    }
                }
            }
        }
    }

    pub fn constant(&self) -> Option<&DMatrix<f64>> {
        match self {
            Volatility::Constant(s) => Some(s),
            Volatility::Function { .. } => None,
        }
    }
}

impl fmt::Debug for Volatility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Volatility::Constant(s) => write!(f, "Constant({}x{})", s.nrows(), s.ncols()),
            Volatility::Function { .. } => write!(f, "Function"),
        }
    }
}

/// Terminal condition `g` with declared sup-norm and Lipschitz constant
/// (Euclidean norm). Unbounded payoffs declare `sup_norm = ∞`.
#[derive(Clone)]
pub struct TerminalCondition {
    eval: TerminalFn,
    pub sup_norm: f64,
    pub lipschitz: f64,
}

impl TerminalCondition {
    pub fn new(eval: TerminalFn, sup_norm: f64, lipschitz: f64) -> Self {
        TerminalCondition { eval, sup_norm, lipschitz }
    }

    pub fn constant(value: f64) -> Self {
        TerminalCondition::new(Arc::new(move |_| value), value.abs(), 0.0)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TerminalCondition(|g| <= {}, L = {})", self.sup_norm, self.lipschitz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// Euler–Maruyama with co-simulated tangent process.
    Euler,
    /// Constant drift and volatility: one Gaussian step per segment.
    ExactConstant,
    /// Mean-reverting drift `a - βx` with constant volatility, sampled exactly.
    ExactOu,
}

/// Semilinear parabolic PDE
/// `∂ₜu + μ·Du + ½σσᵀ:D²u + f(·, u, Du) = 0` on `[0, T) × ℝᵈ`, `u(T, ·) = g`.
#[derive(Clone, Debug)]
pub struct PdeModel {
    dim: usize,
    horizon: f64,
    drift: Drift,
    volatility: Volatility,
    terminal: TerminalCondition,
    generator: PolynomialGenerator,
    mode: SimulationMode,
    euler_step: Option<f64>,
    sigma_inv_t: Option<DMatrix<f64>>,
    ou_rate: Option<f64>,
}

/// `(σᵀ)⁻¹`, or `None` when `σ` is singular.
pub fn inverse_transpose(sigma: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = sigma.clone().try_inverse()?;
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv.transpose())
    } else {
        None
    }
}

impl PdeModel {
    pub fn new(
        dim: usize,
        horizon: f64,
        drift: Drift,
        volatility: Volatility,
        terminal: TerminalCondition,
        generator: PolynomialGenerator,
        mode: SimulationMode,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be at least 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {horizon}")));
        }
        if generator.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: generator.dim() });
        }
        match &drift {
            Drift::Constant(m) if m.len() != dim => {
                return Err(Error::DimensionMismatch { expected: dim, got: m.len() })
            }
            Drift::Affine { offset, linear }
                if offset.len() != dim || linear.shape() != (dim, dim) =>
            {
                return Err(Error::InvalidModel("affine drift has wrong shape".into()))
            }
            _ => {}
        }
        let sigma_inv_t = match &volatility {
            Volatility::Constant(s) => {
                if s.shape() != (dim, dim) {
                    return Err(Error::InvalidModel(format!(
                        "volatility must be {dim}x{dim}, got {}x{}",
                        s.nrows(),
                        s.ncols()
                    )));
                }
                inverse_transpose(s)
            }
            Volatility::Function { .. } => None,
        };
        let mut ou_rate = None;
        match mode {
            SimulationMode::Euler => {}
            SimulationMode::ExactConstant => {
                if !drift.is_constant() {
                    return Err(Error::InvalidModel("exact_constant mode requires a constant drift".into()));
                }
                if sigma_inv_t.is_none() {
                    return Err(Error::InvalidModel(
                        "exact_constant mode requires a constant invertible volatility".into(),
                    ));
                }
            }
            SimulationMode::ExactOu => {
                if sigma_inv_t.is_none() {
                    return Err(Error::InvalidModel(
                        "exact_ou mode requires a constant invertible volatility".into(),
                    ));
                }
                ou_rate = Some(match &drift {
                    Drift::Constant(_) => 0.0,
                    Drift::Affine { linear, .. } => {
                        let beta = -linear[(0, 0)];
                        let isotropic = (0..dim).all(|r| {
                            (0..dim).all(|c| {
                                let expected = if r == c { -beta } else { 0.0 };
                                (linear[(r, c)] - expected).abs() <= 1e-14 * beta.abs().max(1.0)
                            })
                        });
                        if !isotropic {
                            return Err(Error::InvalidModel(
                                "exact_ou mode supports linear drift parts of the form -β·I only".into(),
                            ));
                        }
                        beta
                    }
                    Drift::Function { .. } => {
                        return Err(Error::InvalidModel("exact_ou mode requires an affine drift".into()))
                    }
                });
            }
        }
        Ok(PdeModel {
            dim,
            horizon,
            drift,
            volatility,
            terminal,
            generator,
            mode,
            euler_step: None,
            sigma_inv_t,
            ou_rate,
        })
    }

    /// Overrides the Euler grid width (default `0.01·T`).
    pub fn with_euler_step(mut self, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::InvalidModel(format!("Euler step must be positive, got {step}")));
        }
        self.euler_step = Some(step);
        Ok(self)
    }

    /// Same model, different simulation mode (re-validated).
    pub fn with_mode(&self, mode: SimulationMode) -> Result<Self> {
        let m = PdeModel::new(
            self.dim,
            self.horizon,
            self.drift.clone(),
            self.volatility.clone(),
            self.terminal.clone(),
            self.generator.clone(),
            mode,
        )?;
        Ok(PdeModel { euler_step: self.euler_step, ..m })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn drift(&self) -> &Drift {
        &self.drift
    }
    pub fn volatility(&self) -> &Volatility {
        &self.volatility
    }
    pub fn terminal(&self) -> &TerminalCondition {
        &self.terminal
    }
    pub fn generator(&self) -> &PolynomialGenerator {
        &self.generator
    }
    pub fn mode(&self) -> SimulationMode {
        self.mode
    }
    pub fn euler_step(&self) -> f64 {
        self.euler_step.unwrap_or(0.01 * self.horizon)
    }
    /// `(σ₀ᵀ)⁻¹` for constant invertible volatility.
    pub fn sigma_inv_t(&self) -> Option<&DMatrix<f64>> {
        self.sigma_inv_t.as_ref()
    }
    /// Mean-reversion rate `β` in exact OU mode.
    pub fn ou_rate(&self) -> Option<f64> {
        self.ou_rate
    }
}

/// A model together with its evaluation point and, when known, the
/// closed-form solution.
#[derive(Clone)]
pub struct TestProblem {
    pub model: Arc<PdeModel>,
    pub x0: Vec<f64>,
    pub solution: Option<ScalarField>,
    pub gradient: Option<VectorField>,
}

impl TestProblem {
    pub fn exact_value(&self) -> Option<f64> {
        self.solution.as_ref().map(|u| u(0.0, &self.x0))
    }
}

impl fmt::Debug for TestProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestProblem")
            .field("model", &self.model)
            .field("x0", &self.x0)
            .field("closed_form", &self.solution.is_some())
            .finish()
    }
}

/// Cosine model: `σ₀ = (σ/√d)·I`, `μ = 0`, `g(x) = cos(Σxᵢ)`,
/// `f = k(t, x) + c·y·(b·z)` with `b = (1/d)(1 + 1/d, 1 + 2/d, …, 2)`.
/// Exact solution `u(t, x) = cos(Σxᵢ)·e^{α(T−t)}`; `T = 1`, `x₀ = ½·𝟙`.
pub fn make_cosine_test_model(d: usize, alpha: f64, c: f64, sigma: f64) -> Result<TestProblem> {
    if d == 0 {
        return Err(Error::InvalidModel("dimension must be at least 1".into()));
    }
    let horizon = 1.0;
    let df = d as f64;
    let b = DVector::from_fn(d, |i, _| (1.0 + (i + 1) as f64 / df) / df);
    let b_dot_one = (3.0 * df + 1.0) / (2.0 * df);
    let half_var = 0.5 * sigma * sigma;

    let source: ScalarField = Arc::new(move |t: f64, x: &[f64]| {
        let s: f64 = x.iter().sum();
        let growth = (alpha * (horizon - t)).exp();
        s.cos() * (alpha + half_var + c * s.sin() * b_dot_one * growth) * growth
    });
    let max_growth = (alpha.abs() * horizon).exp();
    let source_bound = ((alpha + half_var).abs() + c.abs() * b_dot_one * max_growth) * max_growth;

    let generator = PolynomialGenerator::new(
        d,
        vec![Direction::Constant(b)],
        vec![
            (MultiIndex::new(vec![0, 0])?, Coefficient::Function { eval: source, bound: source_bound }),
            (MultiIndex::new(vec![1, 1])?, Coefficient::Constant(c)),
        ],
    )?;
    let terminal = TerminalCondition::new(
        Arc::new(|x: &[f64]| x.iter().sum::<f64>().cos()),
        1.0,
        df.sqrt(),
    );
    let model = PdeModel::new(
        d,
        horizon,
        Drift::Constant(DVector::zeros(d)),
        Volatility::Constant(DMatrix::identity(d, d) * (sigma / df.sqrt())),
        terminal,
        generator,
        SimulationMode::ExactConstant,
    )?;
    let solution: ScalarField = Arc::new(move |t: f64, x: &[f64]| {
        x.iter().sum::<f64>().cos() * (alpha * (horizon - t)).exp()
    });
    let gradient: VectorField = Arc::new(move |t: f64, x: &[f64], out: &mut [f64]| {
        let v = -x.iter().sum::<f64>().sin() * (alpha * (horizon - t)).exp();
        out.iter_mut().for_each(|o| *o = v);
    });
    Ok(TestProblem {
        model: Arc::new(model),
        x0: vec![0.5; d],
        solution: Some(solution),
        gradient: Some(gradient),
    })
}

/// Call-on-the-mean payoff `scale·((1/d)Σxᵢ − 1)⁺`.
pub fn call_on_mean(d: usize, scale: f64) -> TerminalCondition {
    let df = d as f64;
    TerminalCondition::new(
        Arc::new(move |x: &[f64]| scale * (x.iter().sum::<f64>() / df - 1.0).max(0.0)),
        f64::INFINITY,
        scale.abs() / df.sqrt(),
    )
}

/// OU model: `μ(t, x) = 𝟙 − x`, `σ = 0.5·I`, `g(x) = ((1/d)Σxᵢ − 1)⁺`,
/// `T = 1`, `x₀ = 𝟙`, exact OU simulation.
pub fn make_ou_test_model(d: usize, nonlinearity: PolynomialGenerator) -> Result<TestProblem> {
    make_ou_test_model_scaled(d, nonlinearity, 1.0)
}

/// OU model with payoff `scale·((1/d)Σxᵢ − 1)⁺`.
pub fn make_ou_test_model_scaled(
    d: usize,
    nonlinearity: PolynomialGenerator,
    scale: f64,
) -> Result<TestProblem> {
    let model = PdeModel::new(
        d,
        1.0,
        Drift::Affine { offset: DVector::from_element(d, 1.0), linear: -DMatrix::identity(d, d) },
        Volatility::Constant(DMatrix::identity(d, d) * 0.5),
        call_on_mean(d, scale),
        nonlinearity,
        SimulationMode::ExactOu,
    )?;
    Ok(TestProblem { model: Arc::new(model), x0: vec![1.0; d], solution: None, gradient: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn burgers_1d() -> PolynomialGenerator {
        PolynomialGenerator::new(
            1,
            vec![Direction::Constant(DVector::from_element(1, 1.0))],
            vec![
                (MultiIndex::new(vec![2, 0]).unwrap(), Coefficient::Constant(0.5)),
                (MultiIndex::new(vec![1, 1]).unwrap(), Coefficient::Constant(0.5)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn burgers_generator_value() {
        let f = burgers_1d();
        let v = eval_generator(&f, 0.3, &[0.1], 2.0, &[3.0]).unwrap();
        assert_relative_eq!(v, 5.0, epsilon = 1e-15);
    }

    #[test]
    fn source_only_term() {
        let f = PolynomialGenerator::new(
            2,
            vec![Direction::Constant(DVector::from_element(2, 1.0))],
            vec![(MultiIndex::new(vec![0, 0]).unwrap(), Coefficient::Constant(7.0))],
        )
        .unwrap();
        for (y, z) in [(0.0, [0.0, 0.0]), (3.0, [1.0, -2.0]), (-1.5, [0.0, 9.0])] {
            assert_eq!(f.eval(0.0, &[0.0, 0.0], y, &z).unwrap(), 7.0);
        }
    }

    #[test]
    fn zero_arguments_keep_only_sources() {
        let f = PolynomialGenerator::new(
            1,
            vec![Direction::Constant(DVector::from_element(1, 2.0))],
            vec![
                (MultiIndex::new(vec![0, 0]).unwrap(), Coefficient::Constant(-1.25)),
                (MultiIndex::new(vec![1, 0]).unwrap(), Coefficient::Constant(3.0)),
                (MultiIndex::new(vec![0, 2]).unwrap(), Coefficient::Constant(4.0)),
            ],
        )
        .unwrap();
        assert_eq!(f.eval(0.0, &[1.0], 0.0, &[0.0]).unwrap(), -1.25);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let f = burgers_1d();
        assert!(matches!(
            f.eval(0.0, &[0.0], 1.0, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn terms_are_sorted_and_unique() {
        let f = burgers_1d();
        assert_eq!(f.terms()[0].index.entries(), &[1, 1]);
        assert_eq!(f.terms()[1].index.entries(), &[2, 0]);
        let dup = PolynomialGenerator::new(
            1,
            vec![],
            vec![
                (MultiIndex::new(vec![2]).unwrap(), Coefficient::Constant(1.0)),
                (MultiIndex::new(vec![2]).unwrap(), Coefficient::Constant(2.0)),
            ],
        );
        assert!(dup.is_err());
        let wrong_len = PolynomialGenerator::new(
            1,
            vec![],
            vec![(MultiIndex::new(vec![1, 1]).unwrap(), Coefficient::Constant(1.0))],
        );
        assert!(wrong_len.is_err());
    }

    #[test]
    fn cosine_table_values() {
        for (d, expected) in [(5, -0.97851), (10, 0.34646), (20, -1.0248)] {
            let p = make_cosine_test_model(d, 0.2, 0.15, 1.0).unwrap();
            let u = p.exact_value().unwrap();
            let independent = (0.5 * d as f64).cos() * 0.2f64.exp();
            assert_relative_eq!(u, independent, epsilon = 1e-14);
            let digits = if d == 20 { 1e-4 } else { 1e-5 };
            assert!((u - expected).abs() < digits, "d={d}: {u}");
        }
    }

    /// Residual of the PDE for the closed-form cosine solution, with
    /// analytic derivatives.
    #[test]
    fn cosine_solution_solves_pde() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in [1usize, 3, 5, 20] {
            let p = make_cosine_test_model(d, 0.2, 0.15, 1.0).unwrap();
            let model = &p.model;
            let alpha = 0.2;
            for _ in 0..50 {
                let t: f64 = rng.random_range(0.0..1.0);
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let s: f64 = x.iter().sum();
                let e = (alpha * (1.0 - t)).exp();
                let u = s.cos() * e;
                let du = vec![-s.sin() * e; d];
                let dt_u = -alpha * u;
                // D²u = -u·𝟙𝟙ᵀ; σσᵀ = (1/d)I ⇒ ½σσᵀ:D²u = -u/2
                let sigma = model.volatility().constant().unwrap();
                let a = sigma * sigma.transpose();
                let lap: f64 = (0..d).map(|i| (0..d).map(|j| a[(i, j)] * -u).sum::<f64>()).sum();
                let f = model.generator().eval(t, &x, u, &du).unwrap();
                let residual = dt_u + 0.5 * lap + f;
                assert!(residual.abs() < 1e-10, "d={d} residual {residual}");
            }
        }
    }

    #[test]
    fn ou_payoff_kink() {
        let gen = PolynomialGenerator::new(
            1,
            vec![Direction::Constant(DVector::from_element(1, 1.0))],
            vec![(MultiIndex::new(vec![1, 1]).unwrap(), Coefficient::Constant(0.15))],
        )
        .unwrap();
        let p = make_ou_test_model(1, gen).unwrap();
        assert_eq!(p.model.terminal().eval(&[1.0]), 0.0);
        assert_eq!(p.model.ou_rate(), Some(1.0));
        assert_eq!(p.model.mode(), SimulationMode::ExactOu);
    }

    #[test]
    fn exact_modes_validate_structure() {
        let gen = PolynomialGenerator::new(
            1,
            vec![],
            vec![(MultiIndex::new(vec![2]).unwrap(), Coefficient::Constant(0.1))],
        )
        .unwrap();
        let affine = Drift::Affine {
            offset: DVector::from_element(1, 1.0),
            linear: DMatrix::from_element(1, 1, -1.0),
        };
        let bad = PdeModel::new(
            1,
            1.0,
            affine.clone(),
            Volatility::Constant(DMatrix::from_element(1, 1, 1.0)),
            TerminalCondition::constant(1.0),
            gen.clone(),
            SimulationMode::ExactConstant,
        );
        assert!(bad.is_err());
        let singular = PdeModel::new(
            1,
            1.0,
            affine,
            Volatility::Constant(DMatrix::zeros(1, 1)),
            TerminalCondition::constant(1.0),
            gen,
            SimulationMode::ExactOu,
        );
        assert!(singular.is_err());
    }

    #[test]
    fn fd_jacobians_match_analytic() {
        let drift = Drift::Function {
            eval: Arc::new(|_t, x: &[f64], out: &mut [f64]| {
                out[0] = x[0].sin() * x[1];
                out[1] = x[0] * x[0];
            }),
            jacobian: None,
        };
        let mut j = DMatrix::zeros(2, 2);
        let x = [0.4, -1.3];
        drift.jacobian(0.0, &x, &mut j);
        assert_relative_eq!(j[(0, 0)], x[0].cos() * x[1], epsilon = 1e-8);
        assert_relative_eq!(j[(0, 1)], x[0].sin(), epsilon = 1e-8);
        assert_relative_eq!(j[(1, 0)], 2.0 * x[0], epsilon = 1e-8);
        assert_relative_eq!(j[(1, 1)], 0.0, epsilon = 1e-8);
    }

    proptest! {
        /// Doubling one coefficient shifts f by exactly that term's value.
        #[test]
        fn generator_is_linear_in_coefficients(
            c in proptest::collection::vec(-2.0f64..2.0, 3),
            y in -3.0f64..3.0,
            z in proptest::collection::vec(-3.0f64..3.0, 2),
            k in 0usize..3,
        ) {
            let idx = [vec![0, 0, 0], vec![1, 1, 0], vec![0, 1, 2]];
            let build = |scale: usize| {
                PolynomialGenerator::new(
                    2,
                    vec![
                        Direction::Constant(DVector::from_vec(vec![1.0, 0.5])),
                        Direction::Constant(DVector::from_vec(vec![-0.3, 2.0])),
                    ],
                    idx.iter().enumerate().map(|(j, e)| {
                        let v = if j == scale { 2.0 * c[j] } else { c[j] };
                        (MultiIndex::new(e.clone()).unwrap(), Coefficient::Constant(v))
                    }).collect(),
                ).unwrap()
            };
            let base = build(usize::MAX);
            let doubled = build(k);
            let x = [0.0, 0.0];
            let sorted_pos = base.terms().iter().position(|t| t.index.entries() == idx[k].as_slice()).unwrap();
            let term = base.eval_term(sorted_pos, 0.0, &x, y, &z).unwrap();
            let diff = doubled.eval(0.0, &x, y, &z).unwrap() - base.eval(0.0, &x, y, &z).unwrap();
            prop_assert!((diff - term).abs() <= 1e-9 * (1.0 + term.abs()));
        }

        #[test]
        fn ou_payoff_lipschitz(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            y in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let g = call_on_mean(3, 1.0);
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!((g.eval(&x) - g.eval(&y)).abs() <= dist / 3f64.sqrt() + 1e-12);
            prop_assert!(g.lipschitz >= 1.0 / 3f64.sqrt() - 1e-15);
        }
    }
}
