//! Concept-aware observation embedding for vision-and-language navigation,
//! at desk scale: numeric kernels with hand-written adjoints, frozen embedding
//! providers, concept mapping, the refining adapter, the observation
//! co-embedding with its contrast loss, a toy navigation world and the agent
//! trainer.

pub mod adapter;
pub mod agent;
pub mod checks;
pub mod coembed;
pub mod concept;
pub mod embedding;
pub mod error;
pub mod numeric;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
