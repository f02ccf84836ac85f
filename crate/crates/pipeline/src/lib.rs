//! Batch pipeline around `fcppn-core`: configuration, image and checkpoint
//! I/O, the optimization tasks and the `fcppn` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod image_io;
pub mod tasks;

pub use config::{RunConfig, Settings, Task};
pub use error::{Result, RunError};
pub use tasks::{run, RunSummary};
