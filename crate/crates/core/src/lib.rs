//! Conservative, grid-free time-to-reach approximation.
//!
//! A recurrent network proposes control sequences that drive the backward
//! system from the target toward a state of interest. Every proposal is
//! simulated, so each stored state carries a dynamically feasible control and
//! an upper bound on its true time-to-reach. The surviving samples are traced
//! into a point-cloud "corridor" of values, and a controller follows the
//! corridor's finite-difference value gradient back to the target.

pub mod error;
pub mod sysdyn;
pub mod corridor;
pub mod filters;
pub mod io;
pub mod nnet;
pub mod oracle;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
