//! Std companion to `privtrade-core`: JSON file formats, the seeded
//! experiment harness and the `privtrade` command line.

pub mod cli;
pub mod experiments;
pub mod io;
