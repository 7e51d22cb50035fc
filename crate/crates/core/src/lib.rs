//! Instruction-driven subtask switching for a simulated garment-folding arm.
//!
//! A convolutional autoencoder ([`cae`]) compresses rendered frames of the
//! folding world ([`taskworld`]) into a small feature vector. A
//! multiple-timescale recurrent network ([`mtrnn`]) learns motor, visual and
//! instruction sequences and is rolled out in closed loop ([`pipeline`]).
//! [`analysis`] inspects the learned internal dynamics.

pub mod analysis;
pub mod cae;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod numerics;
pub mod mtrnn;
pub mod pipeline;
pub mod taskworld;

pub use error::{Error, Result};
