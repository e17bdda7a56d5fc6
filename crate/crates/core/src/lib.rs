//! Workflow-intention extraction from multimodal business artefacts.

pub mod algebra;
pub mod artefacts;
pub mod attention;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod intention;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod signals;
pub mod stack;
pub mod training;

pub use error::{Error, Result};
