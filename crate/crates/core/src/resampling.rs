//! Interacting-particle version of the estimator. The branching diffusion
//! is grown one generation at a time; `ψ = Π_n G_n` where `G_n` is the
//! product of the generation-`n` factors. An ensemble of `N` partial trees
//! is reweighted by `|G_n|` and resampled after every generation, and the
//! estimate is `Π_n M_n × (1/N) Σᵢ Π_n sgn G_n(ξⁱ)` with
//! `M_n = (1/N) Σᵢ |G_n(ξⁱ)|`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{simulate_particle, EstimatorQuery, EstimatorSample, SignedLog, Target};
use crate::rng::{StreamKey, Substream};
use crate::skeleton::{draw_fate, BranchingLaw, Mark, ParticleRecord};

/// A particle born but not yet simulated.
#[derive(Clone, Debug)]
struct Pending {
    key: StreamKey,
    label: Vec<u32>,
    generation: u32,
    mark: Mark,
    birth: f64,
    start: Vec<f64>,
    parent_drift: Option<Vec<f64>>,
}

/// Partially grown branching diffusion: generations `1..=completed` are
/// simulated and their births form the frontier.
#[derive(Clone, Debug)]
pub struct GenerationState {
    completed: u32,
    frontier: Vec<Pending>,
    particles: usize,
    last_weight: SignedLog,
}

impl GenerationState {
    /// State before the first generation: only the root birth at `(t, x)`.
    pub fn new(query: &EstimatorQuery, root_key: StreamKey) -> Self {
        GenerationState {
            completed: 0,
            frontier: vec![Pending {
                key: root_key,
                label: vec![1],
                generation: 1,
                mark: Mark::Value,
                birth: query.t,
                start: query.x.clone(),
                parent_drift: None,
            }],
            particles: 0,
            last_weight: SignedLog::ONE,
        }
    }

    pub fn is_absorbed(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn completed_generations(&self) -> u32 {
        self.completed
    }

    /// Particles simulated so far.
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn frontier_len(&self) -> usize {
        self.frontier.len()
    }

    /// `G_n` of the most recently completed generation (1 for an absorbed
    /// state advanced again).
    pub fn generation_weight(&self) -> f64 {
        self.last_weight.value()
    }

    /// Simulates the frontier generation and returns its weight `G_n`.
    /// Absorbed states are left unchanged and return 1.
    pub fn advance(&mut self, query: &EstimatorQuery) -> Result<SignedLog> {
        if self.is_absorbed() {
            self.last_weight = SignedLog::ONE;
            return Ok(SignedLog::ONE);
        }
        let law: &BranchingLaw = &query.law;
        let horizon = query.model.horizon();
        let mut weight = SignedLog::ONE;
        let mut next = Vec::new();
        for p in std::mem::take(&mut self.frontier) {
            let (death, branch) = draw_fate(law, p.birth, horizon, p.key);
            let record = ParticleRecord {
                label: p.label.clone(),
                key: p.key,
                generation: p.generation,
                mark: p.mark,
                parent: None,
                children: vec![],
                birth: p.birth,
                death,
                branch,
            };
            let sim = simulate_particle(query, &record, &p.start, p.parent_drift.as_deref())?;
            weight = weight.mul(sim.factor);
            if let Some(branch) = branch {
                for (i, mark) in law.offspring_marks(branch).into_iter().enumerate() {
                    let mut label = p.label.clone();
                    label.push(i as u32 + 1);
                    next.push(Pending {
                        key: p.key.child(i as u64 + 1),
                        label,
                        generation: p.generation + 1,
                        mark,
                        birth: death,
                        start: sim.end.clone(),
                        parent_drift: Some(sim.frozen_drift.clone()),
                    });
                }
            }
            self.particles += 1;
        }
        if self.particles + next.len() > query.tree_cap {
            return Err(Error::PopulationExplosion { cap: query.tree_cap });
        }
        self.frontier = next;
        self.completed += 1;
        self.last_weight = weight;
        Ok(weight)
    }

    /// Gives the unsimulated births fresh randomness, so that copies made
    /// by selection evolve independently.
    fn rekey(&mut self, tag: StreamKey) {
        for p in &mut self.frontier {
            p.key = p.key.child(tag.0);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// `N` independent draws proportional to `|G_n|`.
    #[default]
    Multinomial,
    /// One uniform, `N` evenly spaced points.
    Systematic,
    /// No resampling: the estimate is the plain average of `Π_n G_n`.
    Identity,
}

/// Ancestor indices for `weights.len()` offspring, drawn proportionally to
/// `weights` (non-negative).
pub fn select_indices<R: Rng + ?Sized>(
    weights: &[f64],
    mode: Selection,
    generation: u32,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = weights.len();
    if mode == Selection::Identity {
        return Ok((0..n).collect());
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateEnsemble { generation });
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cumulative.push(acc);
    }
    let last_positive = weights.iter().rposition(|w| *w > 0.0).expect("total is positive");
    let locate = |u: f64| cumulative.partition_point(|c| *c <= u).min(last_positive);
    let picks = match mode {
        Selection::Multinomial => (0..n).map(|_| locate(rng.random::<f64>())).collect(),
        Selection::Systematic => {
            let u0: f64 = rng.random::<f64>() / n as f64;
            (0..n).map(|k| locate(u0 + k as f64 / n as f64)).collect()
        }
        Selection::Identity => unreachable!(),
    };
    Ok(picks)
}

/// `N` partial trees with their sign accumulators.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub states: Vec<GenerationState>,
    /// `Π_n sgn G_n(ξⁱ)` along each state's ancestry.
    pub signs: Vec<f64>,
    /// Full signed products, kept only without resampling.
    products: Vec<SignedLog>,
    /// `ln M_n` per resampled generation.
    pub log_mean_weights: Vec<f64>,
    selection_key: StreamKey,
    generation: u32,
    simulated: usize,
}

impl ParticleEnsemble {
    pub fn new(query: &EstimatorQuery, root_keys: &[StreamKey], selection_key: StreamKey) -> Self {
        let n = root_keys.len();
        ParticleEnsemble {
            states: root_keys.iter().map(|k| GenerationState::new(query, *k)).collect(),
            signs: vec![1.0; n],
            products: vec![SignedLog::ONE; n],
            log_mean_weights: vec![],
            selection_key,
            generation: 0,
            simulated: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn all_absorbed(&self) -> bool {
        self.states.iter().all(GenerationState::is_absorbed)
    }

    /// Particles simulated so far, counting every copy.
    pub fn simulated_particles(&self) -> usize {
        self.simulated
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }
}

/// Advances every state by one generation, in parallel; returns `G_n` per
/// state.
pub fn evolve(ensemble: &mut ParticleEnsemble, query: &EstimatorQuery) -> Result<Vec<SignedLog>> {
    let before: usize = ensemble.states.iter().map(GenerationState::particles).sum();
    let weights = ensemble
        .states
        .par_iter_mut()
        .map(|s| s.advance(query))
        .collect::<Result<Vec<_>>>()?;
    let after: usize = ensemble.states.iter().map(GenerationState::particles).sum();
    ensemble.simulated += after - before;
    ensemble.generation += 1;
    for (i, g) in weights.iter().enumerate() {
        ensemble.signs[i] *= g.sign;
        ensemble.products[i] = ensemble.products[i].mul(*g);
    }
    Ok(weights)
}

/// Resamples the ensemble proportionally to `|G_n|` and records
/// `ln M_n`. Returns `false` (leaving the ensemble untouched) when every
/// weight is zero.
pub fn select(ensemble: &mut ParticleEnsemble, weights: &[SignedLog], mode: Selection) -> Result<bool> {
    if mode == Selection::Identity {
        return Ok(true);
    }
    let n = ensemble.len();
    let max_log = weights
        .iter()
        .filter(|w| w.sign != 0.0)
        .map(|w| w.log)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_log == f64::NEG_INFINITY {
        return Ok(false);
    }
    let scaled: Vec<f64> =
        weights.iter().map(|w| if w.sign == 0.0 { 0.0 } else { (w.log - max_log).exp() }).collect();
    let mean_scaled = scaled.iter().sum::<f64>() / n as f64;
    ensemble.log_mean_weights.push(max_log + mean_scaled.ln());

    let generation_key = ensemble.selection_key.child(ensemble.generation as u64);
    let mut rng = generation_key.rng(Substream::Selection);
    let picks = select_indices(&scaled, mode, ensemble.generation, &mut rng)?;
    let states = picks
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut s = ensemble.states[a].clone();
            s.rekey(generation_key.child(i as u64));
            s
        })
        .collect();
    ensemble.signs = picks.iter().map(|&a| ensemble.signs[a]).collect();
    ensemble.states = states;
    Ok(true)
}

/// Runs the interacting-particle estimator on an ensemble whose `i`-th
/// root particle is keyed by `root_keys[i]`.
pub fn run_interacting(
    query: &EstimatorQuery,
    root_keys: &[StreamKey],
    selection_key: StreamKey,
    mode: Selection,
) -> Result<EstimatorSample> {
    if query.target != Target::Value {
        return Err(Error::Unsupported("the resampled estimator targets values only".into()));
    }
    if root_keys.is_empty() {
        return Err(Error::InvalidModel("ensemble must contain at least one state".into()));
    }
    let mut ensemble = ParticleEnsemble::new(query, root_keys, selection_key);
    let mut degenerate = false;
    while !ensemble.all_absorbed() {
        let weights = evolve(&mut ensemble, query)?;
        if !select(&mut ensemble, &weights, mode)? {
            degenerate = true;
            break;
        }
    }
    let n = ensemble.len() as f64;
    let value = if degenerate {
        0.0
    } else if mode == Selection::Identity {
        ensemble.products.iter().map(|p| p.value()).sum::<f64>() / n
    } else {
        let log_scale: f64 = ensemble.log_mean_weights.iter().sum();
        log_scale.exp() * ensemble.signs.iter().sum::<f64>() / n
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteSample { value, key: selection_key.0 });
    }
    Ok(EstimatorSample {
        value,
        particles: ensemble.simulated_particles(),
        generations: ensemble.generation(),
        scheme: query.scheme,
    })
}
