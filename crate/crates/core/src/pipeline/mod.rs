//! Configuration, checkpoints, the synthetic corpus and the stage runners
//! behind the command-line tool.

pub mod corpus;
pub mod config;
pub mod checkpoint;
pub mod stages;
