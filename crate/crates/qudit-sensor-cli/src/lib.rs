//! Command layer of the sensor CLI, exposed as a library so integration
//! tests drive the exact code paths of the binary.

pub mod commands;
pub mod config;
