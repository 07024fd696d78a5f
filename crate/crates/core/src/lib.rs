//! Random microstructure generation, FFT-based homogenization, and
//! Monte-Carlo error analysis of apparent thermal conductivities.

pub mod error;
pub mod expansion;
pub mod fft;
pub mod geometry;
pub mod packing;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod stats;
pub mod study;

pub use error::{Error, Result};
pub use geometry::{Cell, Configuration, Particle, ParticleShape, Point, ShapeKind, Species, SpeciesMeta};
pub use packing::{DescentParams, PackingParams, PackingReport};
pub use raster::VoxelGrid;
pub use sampling::{Draw, Protocol, ProtocolSpec, ShapeSpec};
pub use solver::{ApparentResult, MaterialPair, SolverSettings};
pub use stats::{SampleSet, StudySummary};
