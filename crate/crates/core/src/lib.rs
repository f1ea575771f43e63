//! Self-evolving skill-conditioned memory construction for LLM agents.

pub mod config;
pub mod controller;
pub mod designer;
pub mod embedding;
pub mod environment;
pub mod error;
pub mod executor;
pub mod memory_bank;
pub mod orchestrator;
pub mod skill_bank;
pub mod trainer;

pub use error::{Error, Result};
