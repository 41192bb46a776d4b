//! Two-pass direct speech-to-unit translation at desk scale.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod search;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
