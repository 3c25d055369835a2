//! Deep declarative nodes with structure-exploiting backward passes.
//!
//! Two nodes are provided:
//!
//! * [`robust_pool`]: robust vector pooling, `y = argmin_u sum_i phi(|u - x_i|; alpha)`,
//!   whose backward pass solves a single `m x m` system per batch element instead of
//!   materialising the `m x m x n` Jacobian.
//! * [`sinkhorn_ot`]: entropy regularised optimal transport, whose backward pass
//!   applies the inverse of `A H^-1 A^T` through a Schur complement of its
//!   diagonal-bordered structure.
//!
//! Both are checked against the generic implicit-differentiation formula in
//! [`ddn_generic`] and against finite differences in [`gradcheck`]. Workspace bytes of
//! every library buffer are accounted by [`workspace`].

pub mod ddn_generic;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod penalties;
pub mod robust_pool;
pub mod scalar;
pub mod sinkhorn_ot;
pub mod workspace;

pub use ddn_generic::{
    assemble_derivatives, dy_dx_eq3, dy_dx_unconstrained, Eq3Workspace, FdSteps, NodeSpec,
};
pub use error::{Error, Result};
pub use gradcheck::{compare_vjp, fd_vjp, fd_vjp_parallel, FdStep, VjpReport};
pub use linalg::{CholeskyFactor, DenseMatrix};
pub use penalties::{KappaPair, PenaltyFamily, PenaltyKind};
pub use robust_pool::{
    lbfgs_minimize, pool_backward, pool_forward, pool_jacobian_naive, LbfgsOptions, LbfgsOutcome,
    PointSet, PoolBackwardOptions, PoolOptions, PoolResult,
};
pub use scalar::Real;
pub use sinkhorn_ot::{
    assemble_ahinv_at, ot_backward, ot_forward, simplex_reparam_vjp, BackwardMethod,
    OtBackwardOptions, OtGradients, SinkhornOptions, SinkhornTape, TransportPlan, TransportProblem,
};
pub use workspace::{track_workspace, Buf};
