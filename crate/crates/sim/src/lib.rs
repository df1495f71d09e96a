//! Discrete-event simulator, fault injection and checkers for the DuoBFT
//! and Flexible MinBFT replicas.

pub mod adversary;
pub mod check;
pub mod explore;
pub mod matrix;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod suite;
pub mod trace;
