//! HTTP service over the closet engine.

pub mod api;
pub mod config;
pub mod state;
pub mod tryon;

pub use api::router;
pub use config::{Cli, ServiceConfig};
pub use state::{AppState, StartupError};
