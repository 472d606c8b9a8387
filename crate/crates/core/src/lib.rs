pub mod apa;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod neural;
pub mod social_choice;
pub mod urn;

pub use error::{Error, Result};
