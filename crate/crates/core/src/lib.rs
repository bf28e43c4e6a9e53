pub mod cli;
pub mod decorr;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod featenc;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod scenesim;
pub mod train;
pub mod trajspace;

pub use error::PlanError;
