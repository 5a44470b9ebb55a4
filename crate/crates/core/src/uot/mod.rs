//! Entropic unbalanced optimal transport and exact transport distances.

mod barycenter;
mod kantorovich;
mod kl;
mod sinkhorn;

pub use barycenter::{
    unbalanced_barycenter, unbalanced_barycenter_with, BarycenterResult, BarycenterWorkspace,
};
pub use kantorovich::exact_kantorovich;
pub use kl::kl_divergence;
pub use sinkhorn::{
    left_marginal, plan_summary, signed_wasserstein, sinkhorn_unbalanced,
    sinkhorn_unbalanced_warm, split_signed, write_trace_csv, PlanSummary, SinkhornParams,
    SinkhornResult, SinkhornState, TraceRow,
};
