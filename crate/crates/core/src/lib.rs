//! Finite-dimensional observer-based boundary control of 1-D
//! reaction-diffusion equations, with an optional sector nonlinearity on the
//! boundary input.
//!
//! Pipeline: [`sturm_liouville`] eigenbasis, [`spectral`] reduction and
//! stability model, [`synthesis`] of the gains, [`feasibility`] certificates,
//! and closed-loop [`simulator`] runs.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeff;
pub mod error;
pub mod feasibility;
pub mod linalg;
pub mod nonlinearity;
pub mod par;
pub mod sdp;
pub mod simulator;
pub mod spectral;
pub mod sturm_liouville;
pub mod synthesis;

pub use coeff::Coefficient;
pub use error::{Error, Result};
pub use feasibility::{
    constructive_certificate, max_sector_size, min_feasible_n, search_certificate, sector_sweep,
    verify, FeasibilityCertificate, SearchOptions, SectorSpec, TheoremId,
};
pub use nonlinearity::{
    linear_phi, make_default_phi, rescale_sector, validate_sector, SectorNonlinearity,
};
pub use par::Execution;
pub use simulator::{
    decay_rate_fit, lyapunov_trace, mesh_convergence, simulate_closed_loop, SimConfig, Trajectory,
};
pub use spectral::{build_stability_model, lifting_coefficients, ReducedPlant, StabilityModel};
pub use sturm_liouville::{solve_eigenproblem, OperatorSpec, SpectralBasis};
pub use synthesis::{synthesize, GainSet, SynthesisOptions};
