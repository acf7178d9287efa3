//! Ewald and P3M electrostatics, a small reverse-mode autodiff tape, and a
//! mesh-augmented message-passing potential built on top of them.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod ewald;
pub mod geometry;
pub mod gradcheck;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod p3m;
pub mod spectral;
pub mod train;
pub mod xyz;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use ewald::{EnergyBreakdown, EwaldParams};
pub use geometry::{AtomSystem, BipartiteGraph, Edge, Mat3, MeshEdge, RadiusGraph, Vec3};
pub use mesh::{CanonicalFrame, Mesh};
pub use model::{Model, ModelConfig, Prediction};
pub use p3m::{ChargeAssignment, GridField, P3mOptions, P3mSettings};
pub use spectral::{SpectralBackend, SpectralGrid};
