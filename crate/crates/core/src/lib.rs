//! Desk-scale benchmark for penalty-driven minimax anonymization: a tiny
//! image-to-image anonymizer is trained so an action classifier keeps working
//! on its output while a contrastive privacy adversary is defeated, with a
//! hinge limiter bounding how far action inputs may be distorted.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod ppm;
pub mod nets;
pub mod params;
pub mod sweep;
pub mod synthdata;
pub mod trainer;
pub mod rng;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
