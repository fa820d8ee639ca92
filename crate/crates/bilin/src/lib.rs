//! Data-driven setpoint control of bilinear systems.
//!
//! Data collected from an unknown plant ẋ = A x + B u + C (u ⊗ x) + d (or its
//! discrete-time counterpart) under bounded process noise define a matrix ellipsoid
//! of consistent dynamics. Controllers u = K (x − x̄) + ū are synthesized by
//! semidefinite programs that are robust over that ellipsoid, and checked a posteriori
//! by sampling and simulation.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod consistency;
pub mod error;
pub mod experiment;
pub mod matutil;
pub mod model;
pub mod pipeline;
pub mod sdp;
mod serde_mat;
pub mod synthesis;
pub mod verify;

pub use error::{Error, Result};
