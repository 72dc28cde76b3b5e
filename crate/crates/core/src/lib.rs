//! Residual admittance learning for contact-rich manipulation.
//!
//! Gains found offline in a nominal simulator are adapted online from short
//! windows of measured contact force.

pub mod adaptation;
pub mod admittance;
pub mod cost;
pub mod env;
pub mod error;
pub mod experiment;
pub mod force_window;
pub mod offline;
pub mod optimizer;

pub use admittance::{
    compliant_rollout, critical_damping, recover_gains, step_error_dynamics, to_param_vector,
    AdmittanceParams, ErrorState, KinematicSample, ParamVector, DEFAULT_DT,
};
pub use cost::{fitave, itae, trajectory_cost, CostWeights};
pub use error::{Error, Result};
pub use force_window::{
    fit_linear_force, linear_fit_generalization, predict_linear_force, ForceSample, ForceWindow,
    LinearFit, LinearForceModel, SharedForceWindow,
};
pub use optimizer::{
    optimize_residual, rollout_cost, rollout_cost_and_gradient, ForceProvider, OptProblem,
    OptResult, SearchBounds,
};
pub use adaptation::{
    run_episode, AdaptationConfig, EpisodeOutcome, EpisodeSpec, EpisodeTrace, ForceSource,
    TraceRow, UpdateMode, UpdateRecord,
};
pub use experiment::{
    compare_force_models, report, run_suite, weight_sweep, EpisodeSummary, ForceReport, Method, ResultRow,
    Stat, SuiteConfig, SuiteReport, SweepReport,
};
pub use offline::{
    cem_gain_search, load_baseline_gains, scripted_trajectory, GainFile, GainSearchConfig,
    GainSearchResult, InitialConditions, TrajectoryPlan,
};
