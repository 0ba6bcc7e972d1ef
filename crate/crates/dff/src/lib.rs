//! Files and command-line front end for the `dff-core` depth-from-focus
//! engine.

pub mod cli;
pub mod config;
pub mod io;
