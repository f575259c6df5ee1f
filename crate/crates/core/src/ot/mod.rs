//! Entropy-regularised optimal transport.
//!
//! [`sinkhorn_log`] is the workhorse: alternating dual updates carried out
//! entirely on log-scale potentials, so plans stay representable even for
//! tiny regularisation. [`sinkhorn_grad`] differentiates the exact sequence
//! of updates the forward pass ran. [`exact_ot`] solves the unregularised
//! problem and exists to check the solver on small instances.

mod exact;
mod sinkhorn;

pub use exact::{enumerate_vertices, exact_ot, ExactOt, EXACT_OT_MAX_CELLS};
pub use sinkhorn::{
    entropic_objective, ot_objective, sinkhorn_grad, sinkhorn_log, sinkhorn_normalize,
    sinkhorn_one_step, Marginals, SinkhornConfig, TransportPlan,
};

pub(crate) use sinkhorn::{run_unrolled, sinkhorn_vjp};
