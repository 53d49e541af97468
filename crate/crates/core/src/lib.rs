//! Intraventricular vector flow mapping from color Doppler data.
//!
//! The crate reconstructs the two polar velocity components `(v_r, v_theta)`
//! inside a cardiac cavity from the single radial component measured by
//! color Doppler. Three solver families are provided:
//!
//! * [`ivfm`]: one-shot equality-constrained weighted least squares, solved
//!   through a sparse KKT system;
//! * [`pinn`] with ReLoBRaLo loss balancing (RB-PINN);
//! * [`pinn`] with an augmented Lagrangian objective (AL-PINN).
//!
//! [`phantom`] builds exactly divergence-free stream-function flows together
//! with synthetic Doppler frames and the degradation protocols (scanline
//! sparsity, sector truncation) used to stress the solvers, and [`metrics`]
//! scores reconstructions against ground truth.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod field;
pub mod grid;
pub mod io;
pub mod ivfm;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod phantom;
pub mod physics;
pub mod pinn;
pub mod plot;
pub mod sparse;

pub use error::{Result, VfmError};
pub use field::VelocityField;
pub use grid::{BoundaryConditionSet, BoundarySample, PolarGrid, Segmentation};
pub use phantom::{DegradeSpec, DopplerFrame, StreamFunctionSpec};
