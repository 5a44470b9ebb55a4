//! Sparse regression solvers: independent lasso, group lasso, dirty models
//! and the transport-coupled multi-subject estimator.

mod design;
mod group;
mod lasso;
mod mwe;

pub use group::{group_lasso_lambda_max, solve_dirty, solve_group_lasso, DirtyFit, GroupLassoFit};
pub use lasso::{lasso_lambda_max, solve_lasso, solve_lasso_with, CdOptions, CdReport, LassoFit};
pub use mwe::{
    solve_mtw, solve_mwe, solve_subproblem, subproblem_smooth, update_sigma,
    write_outer_trace_csv, MWEConfig, MWESolution, OuterTraceRow, SignedSource, SubproblemFit,
};
