//! Desk-scale laboratory for GAN training, Lipschitz regularization,
//! differential privacy and membership inference.

pub mod data;
pub mod engine;
pub mod gan;
pub mod lipschitz;
pub mod membership;
pub mod privacy;
