//! Age-dependent marked branching process: arrival law, offspring law, mark
//! assignment and tree growth.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{MultiIndex, PolynomialGenerator};
use crate::rng::{StreamKey, Substream};
use crate::special::{gamma_p, gamma_q, ln_gamma};

/// Arrival durations shorter than this are redrawn.
pub const MIN_ARRIVAL: f64 = 1e-12;
/// Default hard cap on the number of particles in one tree.
pub const DEFAULT_TREE_CAP: usize = 1_000_000;
/// Term cap of the expected-population series.
pub const POPULATION_SERIES_CAP: usize = 10_000;

/// Gamma(κ, θ) arrival law with density
/// `ρ(t) = t^{κ−1} e^{−t/θ} / (Γ(κ) θ^κ)`.
#[derive(Clone, Debug)]
pub struct GammaLaw {
    shape: f64,
    scale: f64,
    ln_norm: f64,
    sampler: Gamma<f64>,
}

impl GammaLaw {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidLaw(format!(
                "gamma law needs positive finite shape and scale, got ({shape}, {scale})"
            )));
        }
        let sampler = Gamma::new(shape, scale).map_err(|e| Error::InvalidLaw(e.to_string()))?;
        Ok(GammaLaw { shape, scale, ln_norm: ln_gamma(shape) + shape * scale.ln(), sampler })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn log_density(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return if self.shape < 1.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        }
        (self.shape - 1.0) * t.ln() - t / self.scale - self.ln_norm
    }

    pub fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            1.0
        } else {
            gamma_q(self.shape, t / self.scale)
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            gamma_p(self.shape, t / self.scale)
        }
    }
}

/// Distribution of particle lifetimes.
#[derive(Clone, Debug)]
pub enum ArrivalDistribution {
    Gamma(GammaLaw),
    /// Deterministic lifetime; a test double without a density.
    Fixed { duration: f64 },
}

impl ArrivalDistribution {
    pub fn gamma(shape: f64, scale: f64) -> Result<Self> {
        Ok(ArrivalDistribution::Gamma(GammaLaw::new(shape, scale)?))
    }
}

/// Branching type of a particle that dies before the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchType {
    /// Index into the (sorted) terms of the generator.
    Term(usize),
    /// Drift-correction branching of the frozen-coefficient scheme.
    Drift,
}

/// Particle mark: value (0), gradient direction `i ∈ 1..=m`, or drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mark {
    Value,
    Gradient(usize),
    Drift,
}

impl Mark {
    pub fn is_value(self) -> bool {
        self == Mark::Value
    }
}

/// Arrival law plus offspring mass function over `L` (and optionally `∂`).
#[derive(Clone, Debug)]
pub struct BranchingLaw {
    arrival: ArrivalDistribution,
    indices: Vec<MultiIndex>,
    probabilities: Vec<f64>,
    drift_probability: Option<f64>,
    cumulative: Vec<f64>,
}

impl BranchingLaw {
    /// `indices` must be listed in the generator's (sorted) term order.
    pub fn new(arrival: ArrivalDistribution, indices: Vec<MultiIndex>, probabilities: Vec<f64>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidLaw("offspring law needs at least one index".into()));
        }
        if indices.len() != probabilities.len() {
            return Err(Error::InvalidLaw(format!(
                "{} indices but {} probabilities",
                indices.len(),
                probabilities.len()
            )));
        }
        if let Some(p) = probabilities.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidLaw(format!("offspring probabilities must be positive, got {p}")));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidLaw(format!("offspring probabilities sum to {total}, expected 1")));
        }
        let probabilities: Vec<f64> = probabilities.iter().map(|p| p / total).collect();
        if let ArrivalDistribution::Fixed { duration } = arrival {
            if !(duration > 0.0) {
                return Err(Error::InvalidLaw(format!("fixed lifetime must be positive, got {duration}")));
            }
        }
        let mut law = BranchingLaw { arrival, indices, probabilities, drift_probability: None, cumulative: vec![] };
        law.rebuild_cumulative();
        Ok(law)
    }

    /// Equal probabilities over `indices`.
    pub fn uniform(arrival: ArrivalDistribution, indices: Vec<MultiIndex>) -> Result<Self> {
        let n = indices.len().max(1);
        BranchingLaw::new(arrival, indices, vec![1.0 / n as f64; n])
    }

    /// Gamma(κ, θ) arrivals and equal probabilities over the generator's terms.
    pub fn for_generator(generator: &PolynomialGenerator, shape: f64, scale: f64) -> Result<Self> {
        BranchingLaw::uniform(ArrivalDistribution::gamma(shape, scale)?, generator.indices())
    }

    /// Extends the law with the drift branch: `p̂_∂ = drift_probability`,
    /// `p̂_ℓ = p_ℓ (1 − p̂_∂)`.
    pub fn with_drift_mark(mut self, drift_probability: f64) -> Result<Self> {
        if !(drift_probability > 0.0 && drift_probability < 1.0) {
            return Err(Error::InvalidLaw(format!(
                "drift branch probability must lie in (0, 1), got {drift_probability}"
            )));
        }
        self.drift_probability = Some(drift_probability);
        self.rebuild_cumulative();
        Ok(self)
    }

    /// Drift branch weighted like one more index: `p̂_∂ = 1/(|L|+1)`.
    pub fn with_default_drift_mark(self) -> Result<Self> {
        let p = 1.0 / (self.indices.len() + 1) as f64;
        self.with_drift_mark(p)
    }

    fn rebuild_cumulative(&mut self) {
        let keep = 1.0 - self.drift_probability.unwrap_or(0.0);
        let mut acc = 0.0;
        self.cumulative = self
            .probabilities
            .iter()
            .map(|p| {
                acc += p * keep;
                acc
            })
            .collect();
    }

    pub fn arrival(&self) -> &ArrivalDistribution {
        &self.arrival
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn drift_probability(&self) -> Option<f64> {
        self.drift_probability
    }

    pub fn has_drift_mark(&self) -> bool {
        self.drift_probability.is_some()
    }

    /// Base probability `p_ℓ` of the `k`-th index.
    pub fn base_probability(&self, k: usize) -> f64 {
        self.probabilities[k]
    }

    /// Probability with which `branch` is drawn (`p̂` when the drift branch is
    /// enabled, `p` otherwise).
    pub fn probability(&self, branch: BranchType) -> f64 {
        match (branch, self.drift_probability) {
            (BranchType::Term(k), None) => self.probabilities[k],
            (BranchType::Term(k), Some(d)) => self.probabilities[k] * (1.0 - d),
            (BranchType::Drift, d) => d.unwrap_or(0.0),
        }
    }

    /// Number of offspring produced by `branch`.
    pub fn offspring_count(&self, branch: BranchType) -> usize {
        match branch {
            BranchType::Term(k) => self.indices[k].order() as usize,
            BranchType::Drift => 1,
        }
    }

    /// `n₀ = Σ |ℓ| p_ℓ` under the law actually sampled.
    pub fn mean_offspring(&self) -> f64 {
        let mut n0: f64 = (0..self.indices.len())
            .map(|k| self.offspring_count(BranchType::Term(k)) as f64 * self.probability(BranchType::Term(k)))
            .sum();
        if let Some(d) = self.drift_probability {
            n0 += d;
        }
        n0
    }

    pub fn max_offspring(&self) -> usize {
        let m = self.indices.iter().map(|i| i.order() as usize).max().unwrap_or(0);
        if self.has_drift_mark() {
            m.max(1)
        } else {
            m
        }
    }

    /// One lifetime draw. Draws below [`MIN_ARRIVAL`] are redrawn.
    pub fn sample_arrival<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.arrival {
            ArrivalDistribution::Fixed { duration } => *duration,
            ArrivalDistribution::Gamma(g) => loop {
                let tau = g.sampler.sample(rng);
                if tau >= MIN_ARRIVAL {
                    break tau;
                }
            },
        }
    }

    /// `F̄(t) = P(τ > t)`.
    pub fn survival(&self, t: f64) -> f64 {
        match &self.arrival {
            ArrivalDistribution::Gamma(g) => g.survival(t),
            ArrivalDistribution::Fixed { duration } => {
                if t < *duration {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `ln ρ(t)`; the fixed law has no density.
    pub fn log_density(&self, t: f64) -> Result<f64> {
        match &self.arrival {
            ArrivalDistribution::Gamma(g) => Ok(g.log_density(t)),
            ArrivalDistribution::Fixed { .. } => {
                Err(Error::Unsupported("a fixed lifetime has no density; it cannot weight branchings".into()))
            }
        }
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        self.log_density(t).map(f64::exp)
    }

    pub fn sample_branch_type<R: Rng + ?Sized>(&self, rng: &mut R) -> BranchType {
        let u: f64 = rng.random();
        match self.cumulative.iter().position(|c| u < *c) {
            Some(k) => BranchType::Term(k),
            None if self.drift_probability.is_some() => BranchType::Drift,
            // u landed above the last cumulative sum through rounding
            None => BranchType::Term(self.indices.len() - 1),
        }
    }

    /// Marks of the offspring of `branch`, in birth order: the first `ℓ₀`
    /// children carry mark 0, the next `ℓ₁` mark 1, and so on.
    pub fn offspring_marks(&self, branch: BranchType) -> Vec<Mark> {
        match branch {
            BranchType::Drift => vec![Mark::Drift],
            BranchType::Term(k) => {
                let mut marks = Vec::with_capacity(self.indices[k].order() as usize);
                for (i, &count) in self.indices[k].entries().iter().enumerate() {
                    let mark = if i == 0 { Mark::Value } else { Mark::Gradient(i) };
                    marks.extend(std::iter::repeat_n(mark, count as usize));
                }
                marks
            }
        }
    }
}

/// Lifetime outcome of a particle born at `birth`: its death time (clipped
/// at the horizon) and its branch type if it dies before the horizon.
pub fn draw_fate(law: &BranchingLaw, birth: f64, horizon: f64, key: StreamKey) -> (f64, Option<BranchType>) {
    let mut rng = key.rng(Substream::Skeleton);
    let tau = law.sample_arrival(&mut rng);
    let death = birth + tau;
    if death < horizon {
        (death, Some(law.sample_branch_type(&mut rng)))
    } else {
        (horizon, None)
    }
}

/// One particle of a realized tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleRecord {
    /// Path from the root, e.g. `[1, 2, 1]`; the root is `[1]`.
    pub label: Vec<u32>,
    pub key: StreamKey,
    /// Root is generation 1.
    pub generation: u32,
    pub mark: Mark,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub birth: f64,
    pub death: f64,
    /// `None` when the particle reaches the horizon.
    pub branch: Option<BranchType>,
}

impl ParticleRecord {
    pub fn reached_horizon(&self) -> bool {
        self.branch.is_none()
    }

    pub fn lifetime(&self) -> f64 {
        self.death - self.birth
    }
}

/// Realized skeleton, particles stored generation by generation (parents
/// always precede their children).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleTree {
    pub particles: Vec<ParticleRecord>,
    pub start: f64,
    pub horizon: f64,
}

impl ParticleTree {
    pub fn root(&self) -> &ParticleRecord {
        &self.particles[0]
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Number of particles alive at the horizon.
    pub fn horizon_count(&self) -> usize {
        self.particles.iter().filter(|p| p.reached_horizon()).count()
    }

    pub fn generations(&self) -> u32 {
        self.particles.iter().map(|p| p.generation).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Children of `parent` (stored at position `parent_pos`), fates drawn.
pub(crate) fn spawn_children(
    law: &BranchingLaw,
    parent: &ParticleRecord,
    parent_pos: usize,
    horizon: f64,
) -> Vec<ParticleRecord> {
    let Some(branch) = parent.branch else { return vec![] };
    law.offspring_marks(branch)
        .into_iter()
        .enumerate()
        .map(|(i, mark)| {
            let key = parent.key.child(i as u64 + 1);
            let (death, branch) = draw_fate(law, parent.death, horizon, key);
            let mut label = parent.label.clone();
            label.push(i as u32 + 1);
            ParticleRecord {
                label,
                key,
                generation: parent.generation + 1,
                mark,
                parent: Some(parent_pos),
                children: vec![],
                birth: parent.death,
                death,
                branch,
            }
        })
        .collect()
}

pub(crate) fn root_record(law: &BranchingLaw, start: f64, horizon: f64, key: StreamKey) -> ParticleRecord {
    let (death, branch) = draw_fate(law, start, horizon, key);
    ParticleRecord {
        label: vec![1],
        key,
        generation: 1,
        mark: Mark::Value,
        parent: None,
        children: vec![],
        birth: start,
        death,
        branch,
    }
}

/// Grows a complete tree on `[start, horizon]` from the root key.
pub fn grow_skeleton(
    law: &BranchingLaw,
    start: f64,
    horizon: f64,
    key: StreamKey,
    cap: usize,
) -> Result<ParticleTree> {
    if !(start < horizon) {
        return Err(Error::InvalidModel(format!("start time {start} must precede the horizon {horizon}")));
    }
    let mut particles = vec![root_record(law, start, horizon, key)];
    let mut pos = 0;
    while pos < particles.len() {
        let children = spawn_children(law, &particles[pos], pos, horizon);
        if particles.len() + children.len() > cap {
            return Err(Error::PopulationExplosion { cap });
        }
        let first = particles.len();
        particles[pos].children = (first..first + children.len()).collect();
        particles.extend(children);
        pos += 1;
    }
    Ok(ParticleTree { particles, start, horizon })
}

/// Expected total number of particles up to time `t`,
/// `m(t) = Σ_{k≥0} n₀ᵏ P(kκ, t/θ)` with the `k = 0` term equal to 1.
pub fn expected_population(law: &BranchingLaw, n0: f64, t: f64, tol: f64) -> Result<f64> {
    let ArrivalDistribution::Gamma(g) = law.arrival() else {
        return Err(Error::Unsupported("expected population is available for the gamma law only".into()));
    };
    if t <= 0.0 || n0 == 0.0 {
        return Ok(1.0);
    }
    let x = t / g.scale();
    let mut sum = 1.0;
    let mut power = 1.0;
    for k in 1..=POPULATION_SERIES_CAP {
        power *= n0;
        let shape = k as f64 * g.shape();
        let term = power * gamma_p(shape, x);
        sum += term;
        if term.abs() < tol && shape > x + 1.0 {
            return Ok(sum);
        }
    }
    Err(Error::SeriesDivergence { cap: POPULATION_SERIES_CAP })
}
