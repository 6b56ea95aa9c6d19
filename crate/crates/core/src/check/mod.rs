//! Gradient checks, brute-force oracles and the self-check suite.

pub mod gradcheck;
pub mod oracle;
pub mod suite;

pub use gradcheck::{central_difference, check_indices, relative_error, GradCheckReport};
pub use suite::{run_all, CheckResult};
