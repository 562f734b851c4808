//! HTTP service and command-line front end for source-side confidence
//! estimation.

pub mod cli;
pub mod config;
pub mod live;
pub mod plot;
pub mod server;
