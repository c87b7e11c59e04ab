//! Command-line front end: checkpoints, reports and the `permbasin` binary.

mod app;
pub mod checkpoint;

pub use app::run;
