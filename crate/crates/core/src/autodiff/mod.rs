//! Nested automatic differentiation.
//!
//! Forward-mode [`Jet`]s carry input-directional derivatives; a reverse-mode
//! [`Tape`] records arithmetic on [`Var`]s. Running jet arithmetic over tape
//! variables (`Jet<Var>`) traces the Jacobian computation itself, so a reverse
//! sweep from any Jacobian entry yields mixed second derivatives with respect
//! to the parameters.

mod jet;
mod scalar;
mod tape;

pub use jet::{Jet, MAX_DIM};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
