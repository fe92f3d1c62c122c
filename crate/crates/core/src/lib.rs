//! Contrastive masked auto-encoding (CMAE) for character-level open-set
//! writer identification on online handwriting trajectories.

pub mod cli;
pub mod error;
pub mod evalproto;
pub mod gradcore;
pub mod maskplan;
pub mod model;
pub mod objectives;
pub mod synthgen;
pub mod trainer;
pub mod trajio;

pub use error::{Error, Result};
