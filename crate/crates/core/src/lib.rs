//! Neural adaptive psychometric estimation: a small MLP estimator of a
//! psychometric function, an acquisition function that picks the next
//! stimulus, a Fisher-energy stopping rule, synthetic ground-truth functions,
//! and a simulation harness.

pub mod acquisition;
pub mod bench;
pub mod error;
pub mod net;
pub mod psychfun;
pub mod session;
pub mod util;

pub use error::{NestError, Result};
