//! Data-driven inversion-based control: polynomial NARX identification,
//! model inversion, VRFT-tuned extended PID, closed-loop simulation and
//! sampled stability certification.

// `!(x >= 0.0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod config;
pub mod error;
pub mod invctrl;
mod linalg;
pub mod linctrl;
pub mod pipeline;
pub mod plant;
pub mod simloop;
pub mod simplex;
pub mod stability;
pub mod sysid;

pub use config::RunConfig;
pub use dataset::{compute_norm_constants, generate_excitation, DataSet, ExcitationKind, ExcitationSpec, NormConstants};
pub use error::{Error, Result};
pub use invctrl::{objective_j, predicted_error, solve_inversion, InversionConfig, InversionResult};
pub use linctrl::{pid_step, simulate_reference_model, virtual_reference, vrft_fit, PidGains, PidState, ReferenceModel, VrftFit};
pub use plant::{plant_step, PlantKind, PlantSpec};
pub use simloop::{collect_open_loop, run_closed_loop, saturate, ReferenceSpec, SimConfig, SimulationTrace};
pub use stability::{
    check_assumptions, check_error_recursion, compute_error_bound, estimate_delta_bar, estimate_gamma_xi,
    estimate_gamma_y, estimate_inversion_constants, verify_tracking_bound, StabilityCertificate, StabilityConstants,
};
pub use sysid::{enumerate_monomials, fit_model, predict, FittedModel, PolyBasis, PolyModel, RegressorWindow};
