//! Monte Carlo solver for semilinear parabolic PDEs with polynomial
//! nonlinearities in `(u, Du)`, based on marked branching diffusions with
//! automatic-differentiation weights.

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod estimator;
pub mod generator;
pub mod harness;
pub mod resampling;
pub mod rng;
pub mod skeleton;
pub mod special;

pub use error::{Error, Result};
pub use generator::{
    eval_generator, make_cosine_test_model, make_ou_test_model, Coefficient, Direction, Drift, MultiIndex,
    PdeModel, PolynomialGenerator, SimulationMode, TerminalCondition, TestProblem, Volatility,
};
pub use rng::{StreamKey, Substream};
pub use skeleton::{
    expected_population, grow_skeleton, ArrivalDistribution, BranchType, BranchingLaw, Mark, ParticleRecord,
    ParticleTree,
};
pub use analysis::{check_conditions, ConditionReport};
pub use estimator::{
    evaluate, evaluate_gradient, evaluate_psi, evaluate_psi_hat, evaluate_psi_truncated, EstimatorQuery,
    EstimatorSample, Scheme, SignedLog, Target,
};
pub use harness::{
    convergence_study, fd_oracle_1d, load_preset, run_estimation, EstimateReport, FdGrid, LawParams, ModelSource,
    RunConfig, SchemeChoice, StudyReport,
};
pub use resampling::{run_interacting, ParticleEnsemble, Selection};
