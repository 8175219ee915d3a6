//! Decentralized cooperative pursuit lab.
//!
//! A deterministic pursuit-evasion simulator, an artificial-potential-field
//! controller stack with an attention-weighted variant, a small attention
//! Q-network trained by a KL-regularized dueling double DQN, and the analysis
//! suite used to compare the algorithm variants.

pub mod analysis;
pub mod apf;
pub mod arena;
pub mod artifacts;
pub mod config;
pub mod diffgraph;
pub mod error;
pub mod evader;
pub mod geom;
pub mod qnet;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
