//! Diffusion-control machinery for split-and-merge portrait synthesis:
//! frequency-map controls, composable guidance scores, DDPM/DDIM sampling and
//! an analytic Gaussian-mixture oracle that stands in for trained networks.

pub mod diffusion;
pub mod error;
pub mod freq;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
