//! Representation random variables: `ψ` (plain branching diffusion), its
//! truncation `ψ_n`, the gradient variant `ψ̃·𝒲̄_root` and the
//! frozen-coefficient `ψ̂`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{simulate_frozen_segment, simulate_segment, weight_factor, SegmentResult};
use crate::error::{Error, Result};
use crate::generator::{PdeModel, ScalarField, VectorField};
use crate::rng::{StreamKey, Substream};
use crate::skeleton::{grow_skeleton, BranchType, BranchingLaw, Mark, ParticleRecord, ParticleTree, DEFAULT_TREE_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Segments simulated in the model's own mode (exact or Euler).
    A,
    /// Frozen-drift one-step segments with drift-correction branching.
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Value,
    /// Directional derivative `v·Du`.
    Gradient(Vec<f64>),
}

/// Real number stored as sign and log-magnitude, so long products neither
/// overflow nor underflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignedLog {
    pub sign: f64,
    pub log: f64,
}

impl SignedLog {
    pub const ONE: SignedLog = SignedLog { sign: 1.0, log: 0.0 };

    pub fn from_value(v: f64) -> Self {
        if v == 0.0 {
            SignedLog { sign: 0.0, log: f64::NEG_INFINITY }
        } else {
            SignedLog { sign: v.signum(), log: v.abs().ln() }
        }
    }

    #[inline]
    pub fn mul(self, other: SignedLog) -> Self {
        if self.sign == 0.0 || other.sign == 0.0 {
            SignedLog { sign: 0.0, log: f64::NEG_INFINITY }
        } else {
            SignedLog { sign: self.sign * other.sign, log: self.log + other.log }
        }
    }

    /// Divides by a positive quantity given by its logarithm.
    #[inline]
    pub fn div_log(self, log_denominator: f64) -> Self {
        if self.sign == 0.0 {
            self
        } else {
            SignedLog { sign: self.sign, log: self.log - log_denominator }
        }
    }

    pub fn value(self) -> f64 {
        if self.sign == 0.0 {
            0.0
        } else {
            self.sign * self.log.exp()
        }
    }

    pub fn abs(self) -> f64 {
        self.value().abs()
    }

    pub fn is_finite(self) -> bool {
        self.sign == 0.0 || (self.log.is_finite() && self.log < f64::MAX.ln())
    }
}

/// Where and what to estimate, with the sampling law and scheme.
#[derive(Clone, Debug)]
pub struct EstimatorQuery {
    pub model: Arc<PdeModel>,
    pub law: Arc<BranchingLaw>,
    pub t: f64,
    pub x: Vec<f64>,
    pub scheme: Scheme,
    pub target: Target,
    /// Euler grid override (scheme a in Euler mode).
    pub step: Option<f64>,
    /// Frozen drift of the root segment in scheme b (`μ₀`); defaults to
    /// `μ(t, x)`.
    pub root_drift: Option<Vec<f64>>,
    pub tree_cap: usize,
}

impl EstimatorQuery {
    pub fn new(model: Arc<PdeModel>, law: Arc<BranchingLaw>, t: f64, x: Vec<f64>, scheme: Scheme) -> Result<Self> {
        if x.len() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: x.len() });
        }
        if !(t < model.horizon()) {
            return Err(Error::InvalidModel(format!(
                "query time {t} must precede the horizon {}",
                model.horizon()
            )));
        }
        if law.indices() != model.generator().indices().as_slice() {
            return Err(Error::InvalidLaw("offspring law indices differ from the generator's terms".into()));
        }
        match scheme {
            Scheme::A if law.has_drift_mark() => {
                return Err(Error::InvalidLaw("the drift branch only exists in scheme b".into()))
            }
            Scheme::B => {
                if !law.has_drift_mark() {
                    return Err(Error::InvalidLaw("scheme b needs a law with a drift branch probability".into()));
                }
                if model.sigma_inv_t().is_none() {
                    return Err(Error::Unsupported(
                        "scheme b needs a constant invertible volatility".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(EstimatorQuery {
            model,
            law,
            t,
            x,
            scheme,
            target: Target::Value,
            step: None,
            root_drift: None,
            tree_cap: DEFAULT_TREE_CAP,
        })
    }

    pub fn with_target(mut self, target: Target) -> Result<Self> {
        if let Target::Gradient(v) = &target {
            if v.len() != self.model.dim() {
                return Err(Error::DimensionMismatch { expected: self.model.dim(), got: v.len() });
            }
        }
        self.target = target;
        Ok(self)
    }

    pub fn with_step(mut self, step: Option<f64>) -> Self {
        self.step = step;
        self
    }

    pub fn with_root_drift(mut self, drift: Vec<f64>) -> Result<Self> {
        if drift.len() != self.model.dim() {
            return Err(Error::DimensionMismatch { expected: self.model.dim(), got: drift.len() });
        }
        self.root_drift = Some(drift);
        Ok(self)
    }

    pub fn with_tree_cap(mut self, cap: usize) -> Self {
        self.tree_cap = cap;
        self
    }

    fn recenter_root(&self) -> bool {
        matches!(self.target, Target::Gradient(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSample {
    pub value: f64,
    pub particles: usize,
    pub generations: u32,
    pub scheme: Scheme,
}

/// Simulated segment of one particle.
#[derive(Clone, Debug)]
pub(crate) struct SimulatedParticle {
    pub end: Vec<f64>,
    /// Drift used on the segment (scheme b only, empty otherwise).
    pub frozen_drift: Vec<f64>,
    pub segment: SegmentResult,
    pub factor: SignedLog,
}

/// Simulates one particle's segment from `start` and returns its factor in
/// the product:
/// horizon particles contribute `(g(X_T) − g(X_birth)·1{recentred})/F̄(Δt)·𝒲`,
/// branchers `c_I(T_k, X_{T_k})/p_I · 𝒲/ρ(Δt)`.
pub(crate) fn simulate_particle(
    query: &EstimatorQuery,
    record: &ParticleRecord,
    start: &[f64],
    parent_drift: Option<&[f64]>,
) -> Result<SimulatedParticle> {
    let model = &*query.model;
    let duration = record.lifetime();
    let mut rng = record.key.rng(Substream::Diffusion);
    let is_root = record.generation == 1;

    let (segment, frozen_drift, drift_difference) = match query.scheme {
        Scheme::A => {
            if record.mark == Mark::Drift {
                return Err(Error::UnexpectedDriftMark);
            }
            (simulate_segment(model, record.birth, start, duration, &mut rng, query.step)?, vec![], None)
        }
        Scheme::B => {
            let local = model.drift().eval(record.birth, start);
            let frozen: Vec<f64> = match (&query.root_drift, is_root) {
                (Some(mu0), true) => mu0.clone(),
                _ => local.as_slice().to_vec(),
            };
            let diff = match (record.mark, parent_drift) {
                (Mark::Drift, Some(parent)) => {
                    Some(local.iter().zip(parent).map(|(a, b)| a - b).collect::<Vec<f64>>())
                }
                (Mark::Drift, None) => return Err(Error::UnexpectedDriftMark),
                _ => None,
            };
            (simulate_frozen_segment(model, start, &frozen, duration, &mut rng)?, frozen, diff)
        }
    };

    let w = weight_factor(record.mark, model, record.birth, start, &segment.weight, drift_difference.as_deref())?;
    let factor = match record.branch {
        None => {
            let g_end = model.terminal().eval(&segment.end);
            let recentre = !record.mark.is_value() || (is_root && query.recenter_root());
            let numerator = if recentre { g_end - model.terminal().eval(start) } else { g_end };
            SignedLog::from_value(numerator * w).div_log(query.law.survival(duration).ln())
        }
        Some(branch) => {
            let c = match branch {
                BranchType::Term(k) => model.generator().terms()[k].coefficient.eval(record.death, &segment.end),
                BranchType::Drift => 1.0,
            };
            let p = query.law.probability(branch);
            SignedLog::from_value(c / p * w).div_log(query.law.log_density(duration)?)
        }
    };
    Ok(SimulatedParticle { end: segment.end.clone(), frozen_drift, segment, factor })
}

/// Per-particle factors of one realization, in tree order.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub tree: ParticleTree,
    pub factors: Vec<SignedLog>,
    /// Weight vector `𝒲̄` of the root segment.
    pub root_weight: Vec<f64>,
}

impl Evaluation {
    pub fn product(&self) -> SignedLog {
        self.factors.iter().fold(SignedLog::ONE, |acc, f| acc.mul(*f))
    }
}

/// Grows the skeleton from `key` and simulates every particle, parents
/// first.
pub fn evaluate_psi_factors(query: &EstimatorQuery, key: StreamKey) -> Result<Evaluation> {
    let tree = grow_skeleton(&query.law, query.t, query.model.horizon(), key, query.tree_cap)?;
    let mut sims: Vec<SimulatedParticle> = Vec::with_capacity(tree.len());
    for (i, record) in tree.particles.iter().enumerate() {
        let (start, parent_drift) = match record.parent {
            None => (query.x.as_slice(), None),
            Some(p) => (sims[p].end.as_slice(), Some(sims[p].frozen_drift.as_slice())),
        };
        let sim = simulate_particle(query, record, start, parent_drift)?;
        debug_assert_eq!(sims.len(), i);
        sims.push(sim);
    }
    let root_weight = sims[0].segment.weight.clone();
    let factors = sims.into_iter().map(|s| s.factor).collect();
    Ok(Evaluation { tree, factors, root_weight })
}

fn finish(query: &EstimatorQuery, eval: &Evaluation, key: StreamKey) -> Result<EstimatorSample> {
    let mut value = eval.product().value();
    if let Target::Gradient(v) = &query.target {
        value *= v.iter().zip(&eval.root_weight).map(|(a, b)| a * b).sum::<f64>();
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteSample { value, key: key.0 });
    }
    Ok(EstimatorSample {
        value,
        particles: eval.tree.len(),
        generations: eval.tree.generations(),
        scheme: query.scheme,
    })
}

/// One draw of the estimator selected by `query` (value or gradient, scheme
/// a or b), with the root particle keyed by `key`.
pub fn evaluate(query: &EstimatorQuery, key: StreamKey) -> Result<EstimatorSample> {
    let eval = evaluate_psi_factors(query, key)?;
    finish(query, &eval, key)
}

/// One draw of `ψ` (scheme a, value target).
pub fn evaluate_psi(query: &EstimatorQuery, key: StreamKey) -> Result<EstimatorSample> {
    if query.scheme != Scheme::A {
        return Err(Error::Unsupported("evaluate_psi is the scheme-a estimator; use evaluate_psi_hat".into()));
    }
    if query.target != Target::Value {
        return Err(Error::Unsupported("evaluate_psi estimates values; use evaluate_gradient".into()));
    }
    evaluate(query, key)
}

/// One draw of `ψ̂` (scheme b, value target).
pub fn evaluate_psi_hat(query: &EstimatorQuery, key: StreamKey) -> Result<EstimatorSample> {
    if query.scheme != Scheme::B {
        return Err(Error::Unsupported("evaluate_psi_hat needs a scheme-b query".into()));
    }
    if query.target != Target::Value {
        return Err(Error::Unsupported("evaluate_psi_hat estimates values; use evaluate_gradient".into()));
    }
    evaluate(query, key)
}

/// One draw of `ψ̃ · (v·𝒲̄_root)`, estimating `v·Du(t, x)`.
pub fn evaluate_gradient(query: &EstimatorQuery, direction: &[f64], key: StreamKey) -> Result<EstimatorSample> {
    let q = query.clone().with_target(Target::Gradient(direction.to_vec()))?;
    evaluate(&q, key)
}

/// One draw of the truncation `ψ_n`: generations `1..=n` contribute their
/// usual factors, generation `n + 1` is closed with `u_ref` (value mark) or
/// `bᵢ·Du_ref` (gradient mark `i`) at its birth point. `n = 0` returns
/// `u_ref(t, x)`.
pub fn evaluate_psi_truncated(
    query: &EstimatorQuery,
    n: u32,
    u_ref: &ScalarField,
    du_ref: &VectorField,
    key: StreamKey,
) -> Result<EstimatorSample> {
    if query.scheme != Scheme::A || query.target != Target::Value {
        return Err(Error::Unsupported("truncated estimator is defined for scheme-a values".into()));
    }
    let model = &*query.model;
    let tree = grow_limited(query, key, n + 1)?;
    let mut ends: Vec<Vec<f64>> = Vec::with_capacity(tree.len());
    let mut product = SignedLog::ONE;
    let mut gradient = vec![0.0; model.dim()];
    for record in &tree.particles {
        let start = match record.parent {
            None => query.x.clone(),
            Some(p) => ends[p].clone(),
        };
        if record.generation <= n {
            let sim = simulate_particle(query, record, &start, None)?;
            product = product.mul(sim.factor);
            ends.push(sim.end);
        } else {
            let closing = match record.mark {
                Mark::Value => u_ref(record.birth, &start),
                Mark::Gradient(i) => {
                    du_ref(record.birth, &start, &mut gradient);
                    model.generator().direction(i).dot(record.birth, &start, &gradient)
                }
                Mark::Drift => return Err(Error::UnexpectedDriftMark),
            };
            product = product.mul(SignedLog::from_value(closing));
            ends.push(start);
        }
    }
    let value = product.value();
    if !value.is_finite() {
        return Err(Error::NonFiniteSample { value, key: key.0 });
    }
    Ok(EstimatorSample {
        value,
        particles: tree.len(),
        generations: tree.generations(),
        scheme: query.scheme,
    })
}

/// Skeleton containing generations `1..=max_generation` only.
fn grow_limited(query: &EstimatorQuery, key: StreamKey, max_generation: u32) -> Result<ParticleTree> {
    use crate::skeleton::{root_record, spawn_children};
    let horizon = query.model.horizon();
    let mut particles = vec![root_record(&query.law, query.t, horizon, key)];
    let mut pos = 0;
    while pos < particles.len() {
        if particles[pos].generation < max_generation {
            let children = spawn_children(&query.law, &particles[pos], pos, horizon);
            if particles.len() + children.len() > query.tree_cap {
                return Err(Error::PopulationExplosion { cap: query.tree_cap });
            }
            let first = particles.len();
            particles[pos].children = (first..first + children.len()).collect();
            particles.extend(children);
        }
        pos += 1;
    }
    Ok(ParticleTree { particles, start: query.t, horizon })
}
