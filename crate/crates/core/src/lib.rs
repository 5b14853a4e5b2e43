//! Detection of space-time interaction in planar point patterns.
//!
//! The crate is `no_std` (with `alloc`) and carries only the numerics:
//! observation windows and edge corrections, the classical Knox, Mantel and
//! space-time K-function statistics, the endemic-epidemic intensity model with
//! its maximum-likelihood fit, a Monte Carlo permutation engine and a
//! branching-process simulator. File formats, the thread pool and the CLI live
//! in the companion `stint` crate.
//!
//! Units are kilometres and days throughout.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod classical;
pub mod data;
pub mod exec;
pub mod geometry;
pub mod model;
pub mod pairs;
pub mod permute;
pub mod rng;
pub mod simulate;
mod sum;

pub use classical::{k_surface, knox_statistic, mantel_statistic, omnibus_statistic, DSurface, KnoxTable};
pub use data::{CovariateGrid, Event, PointPattern};
pub use exec::{Executor, Sequential};
pub use geometry::{Disc, Point, Polygon, Raster, Window};
pub use model::{FitResult, ModelSpec};
pub use permute::{PermutationPlan, StatisticKind, TestReport};
