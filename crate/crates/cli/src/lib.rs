//! Config-driven experiment runner and privacy audit built on `privgan`.

pub mod audit;
pub mod config;
pub mod experiment;
pub mod suite;
