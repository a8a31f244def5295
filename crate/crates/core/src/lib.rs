//! Agent-based Lagrangian mechanics on a 2D lattice.
//!
//! Latent functional objects ("dark matter") exert attraction fields, obstacles
//! exert short-range repulsion, and agents follow least-action paths toward one
//! or more goals. The crate infers the constraint map, sources and agent intents
//! from observed trajectory prefixes by MCMC, then predicts future motion.

pub mod baselines;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod field;
pub mod mcmc;
pub mod model;
pub mod planner;
pub mod raster;
pub mod predict;
pub mod scalar;
pub mod scene;
pub mod synth;

pub use error::{AlmError, Result};
pub use scalar::Scalar;
pub use scene::{Agent, BBox, Behavior, Cell, ConstraintMap, GroundTruth, Lattice, Relations, Trajectory};

pub type Scene = scene::Scene<f64>;
pub type Source = scene::Source<f64>;
pub type VectorField = field::VectorField<f64>;
pub type FieldParams = field::FieldParams<f64>;
pub type PathCostParams = planner::PathCostParams<f64>;
pub type CostToGo = planner::CostToGo<f64>;

pub type SceneF32 = scene::Scene<f32>;
pub type VectorFieldF32 = field::VectorField<f32>;
