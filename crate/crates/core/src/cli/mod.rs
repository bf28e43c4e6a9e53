//! Configuration, persistence and command implementations for the binary.

pub mod commands;
pub mod config;
pub mod render;

pub use commands::*;
pub use config::{Overrides, RunConfig};
pub use render::render_svg;
