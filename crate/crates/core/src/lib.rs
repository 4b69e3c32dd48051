pub mod attention;
pub mod cli;
pub mod diffusion;
mod error;
pub mod numerics;
pub mod sandwich;
pub mod streaming;

pub use error::{BudgetConstraint, Error, Result};
