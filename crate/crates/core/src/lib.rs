//! h-adaptive finite element interpolated neural networks for 2D Poisson
//! problems on quadtree meshes.

#![allow(clippy::needless_range_loop)]

pub mod adapt;
pub mod assembly;
pub mod linalg;
pub mod mesh;
pub mod neural;
pub mod problems;
pub mod report;
pub mod space;
pub mod training;

pub use adapt::{AdaptConfig, AdaptHistory, FemConfig, IndicatorKind, StepRecord};
pub use assembly::{LinearSystem, NormKind};
pub use linalg::{SparseMat, SpdFactor};
pub use mesh::{CoarseMesh, ForestMesh};
pub use neural::Mlp;
pub use problems::{Problem, Schedule};
pub use space::{FEFunction, FESpace};
pub use training::{LossMode, OptimConfig, TrainReport};
