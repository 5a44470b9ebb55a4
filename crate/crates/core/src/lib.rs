// `!(x > 0.0)` also rejects NaN; index loops read closer to the math
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod simulate;
pub mod solvers;
pub mod uot;

pub use dataset::MultiSubjectDataset;
pub use error::{Error, Result};
