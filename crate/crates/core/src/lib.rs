pub mod diagnostics;
pub mod error;
pub mod models;
pub mod numeric;
pub mod oracle;
pub mod param;
pub mod rml;
pub mod rng;
pub mod schedule;
pub mod smc;
pub mod stochmat;

pub use error::{Error, Result};
