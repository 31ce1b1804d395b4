//! Paired-proxy traffic obfuscation by dynamic connection shuffling and
//! splitting, plus a desk-scale flow-correlation evaluation harness.

pub mod config;
pub mod experiment;
pub mod harness;
pub mod mapping;
pub mod proxy;
pub mod rate;
pub mod sim;
pub mod wire;
