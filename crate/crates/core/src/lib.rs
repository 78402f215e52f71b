//! Hamiltonian deep neural networks built from semi-implicit Euler steps of
//! a Hamiltonian neural ODE.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: small dense linear algebra, activations, quadrature.
//! - [`hamiltonian`]: the layer Hamiltonian, its gradient field, and the
//!   structured layer parametrizations.
//! - [`integrator`]: the symplectic Euler layer, the network flow and the
//!   restricted flow `xi -> q_N`.
//! - [`gradients`]: exact layer Jacobians, backward sensitivity products and
//!   reverse-mode parameter gradients with a finite-difference check.
//! - [`uap`]: the shallow-sum form of the restricted flow, full-rank repair
//!   of shallow sums and affine output heads.
//! - [`training`]: datasets, Adam training, spectral constants and the
//!   depth sweep.
//! - [`persist`]: model and shallow-sum files, run configuration, CSV.

pub mod error;
pub mod gradients;
pub mod hamiltonian;
pub mod integrator;
pub mod numerics;
pub mod persist;
pub mod training;
pub mod uap;

pub use error::{Error, Result};
pub use hamiltonian::{HdnnModel, Layer, LayerParams, StructureTag};
pub use integrator::{FixedPointConfig, State};
pub use numerics::{Activation, Matrix, Vector};
