//! Harness for autoregressive global weather forecasting: channel schemas,
//! a binary state exchange format, channel normalization, pluggable forecast
//! steppers, trajectory rollout, cyclone-eye tracking, field verification
//! and map rendering.

pub mod cli;
pub mod cyclone;
pub mod error;
pub mod normalize;
pub mod render;
pub mod rollout;
pub mod schema;
pub mod stepper;
pub mod tensorio;
pub mod verify;

pub use error::{Error, Result};
