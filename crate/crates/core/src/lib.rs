//! Mean-field equilibria of discrete-time linear-quadratic mean-field games.
//!
//! * [`oracle`] — model-based ground truth: Riccati solution, the mean-field
//!   operator and its fixed point, exact costs and action values.
//! * [`learner`] and [`mfgloop`] — the model-free actor-critic outer loop.
//! * [`sim`] and [`evalne`] — rollouts and finite-population ε-Nash gaps.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalne;
pub mod learner;
pub mod linalg;
pub mod mfgloop;
pub mod model;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
pub use evalne::{
    deploy, estimate_deployed_cost, best_response_cost, estimate_gap, sweep, BestResponseKind, DeployedPolicy,
    EvalConfig, NeGapEstimate, PolicySource, SweepTable,
};
pub use learner::{actor_step, critic_gtd, critic_lstd, inner_loop, CriticEstimate, CriticKind, LearnerConfig};
pub use mfgloop::{aggregate, run_algorithm1, LoopConfig, LoopMode, LoopReport, TSchedule};
pub use model::{
    build_augmented, validate_spec, AugmentedSpec, FeedbackPolicy, GameSpec, GameSpecConfig, MeanFieldLaw,
    ValidationReport,
};
pub use oracle::{
    apply_t, compute_costate, exact_cost, fixed_point_mf, optimal_gain, solve_dare, solve_mfe, true_theta, MfeSolution,
    RiccatiData,
};
pub use sim::{features, rollout_generic, rollout_population, PopulationTrace, Trajectory};

pub use nalgebra::{DMatrix, DVector};
