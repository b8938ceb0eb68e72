//! Mean-field backward doubly stochastic differential equations.
//!
//! Particle solvers for mean-field BDSDEs and their forward counterparts,
//! probabilistic evaluation of the associated nonlocal SPDE, and the
//! adjoint/maximum-principle machinery for mean-field backward control,
//! including a linear-quadratic specialization with a closed-form check.
//!
//! Coefficients are expressions in the [`dsl`]; every population average
//! goes through the fixed pairwise reduction in [`reduce`], so results do
//! not depend on the thread count.

pub mod bdsde;
pub mod coeff;
pub mod control;
pub mod dsl;
pub mod error;
pub mod field;
pub mod lq;
pub mod meanfield;
pub mod mf_solver;
pub mod mkv;
pub mod presets;
pub mod reduce;
pub mod scenario;

pub use bdsde::{solve_bdsde, terminal_condition, Estimator, PathBundle, SolverConfig};
pub use control::{
    cost, cost_derivative, cost_with_se, duality_check, gateaux_check, hamiltonian, hamiltonian_partial, mp_residual, solve_adjoint,
    solve_state, solve_variational, AdjointBundle, ControlPath, ControlProblem, DualityReport, GateauxReport, Hamiltonian,
    HamiltonianArgs, MpReport,
};
pub use coeff::{CoefficientSet, LipschitzMeta, Slot, XiMode};
pub use dsl::{diff, parse, Bindings, Expr, Var};
pub use error::{Error, Result};
pub use field::Field;
pub use lq::{lq_assemble, lq_solve, lq_verify, DominanceReport, LQCoefficients, LQSolution};
pub use meanfield::{check_h1, estar_hat, gamma_hat, ContractionReport, PopulationSnapshot};
pub use mf_solver::{solve_forward_dsde, solve_mf_bdsde, MfSolve, PicardTrace};
pub use mkv::{build_base, evaluate_u, simulate_mkv, BasePopulation, FieldSample};
pub use presets::{preset, Preset, PRESET_NAMES};
pub use scenario::{sample_ensemble, time_reverse, ScenarioEnsemble, TimeGrid};
