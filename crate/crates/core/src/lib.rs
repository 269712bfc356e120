//! Entropic optimal transport (Schrödinger bridges) on the Heisenberg-type
//! sub-Riemannian manifold.

pub mod bridge;
pub mod config;
pub mod distance;
pub mod error;
pub mod grid;
pub mod group;
pub mod kernel;
pub mod numeric;
pub mod operator;
pub mod ot;
pub mod pipeline;
pub mod quadrature;
pub mod report;
pub mod sde;
pub mod sinkhorn;
pub mod table;

pub use error::{Error, Result};
pub use grid::{FieldKind, Grid3D, ScalarField};
pub use group::GroupPoint;
pub use table::KernelTable;
