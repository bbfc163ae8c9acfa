//! Reference solvers, parameter sampling and dataset persistence.

pub mod compressible;
pub mod dataset;
pub mod incompressible;
pub mod params;
pub mod generate;

pub use compressible::solve_compressible;
pub use dataset::{read_dataset, write_dataset, Dataset, NormStats, Split, Trajectory};
pub use incompressible::solve_incompressible;
pub use params::{latin_hypercube, sample_params, ParamRanges, SimParams, System};
pub use generate::{generate_splits, GenConfig};
