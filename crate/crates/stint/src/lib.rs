//! File formats, the thread pool and the `stint` command line on top of
//! `stint-core`.

pub mod cli;
pub mod io;
pub mod pool;
pub mod report;

pub use cli::run;
