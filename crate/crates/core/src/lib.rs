//! Off-policy corrected reward modeling for RLHF on small synthetic tasks.

pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ocrm;
pub mod optim;
pub mod policy;
pub mod ppo;
pub mod preference;
pub mod reward_model;
pub mod run;
pub mod tasks;
pub mod weights;

pub use error::{Error, Result};
