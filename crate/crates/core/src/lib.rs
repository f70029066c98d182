pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod taxonomy;

pub use error::{Error, Result};
