pub mod aad;
pub mod audit;
pub mod audited;
pub mod cache;
pub mod classifier;
pub mod data;
pub mod harness;
mod error;

pub use error::{MintError, Result};
