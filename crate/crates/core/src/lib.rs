//! Latent-space analysis of cloud droplet size distributions.

mod binio;
pub mod compose;
pub mod config;
pub mod dsd;
pub mod error;
pub mod path;
pub mod pipeline;
pub mod snapshot;
pub mod synth;
pub mod vae;
pub mod viz;

pub use error::{Error, Result};
