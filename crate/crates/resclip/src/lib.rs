//! File formats, image IO, evaluation and the `resclip` command line
//! around [`resclip_core`].

pub mod cli;
pub mod container;
mod error;
pub mod eval;
pub mod imageio;
pub mod palette;
pub mod runner;
mod viridis;

pub use error::{Error, Result};
pub use viridis::VIRIDIS;
