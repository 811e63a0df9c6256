//! Dense `f64` arrays, a reverse-mode tape, and the Adam optimizer.
//!
//! The primitive set is intentionally small: matrix product, bias add,
//! elementwise add/sub/mul, scaling, smooth activations, and a full
//! reduction. Every primitive has its own backward rule so each rule can be
//! checked against central differences in isolation.

mod adam;
mod array;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::{Activation, NumArray};
pub use tape::{check_gradient_fd, Gradients, LeafKind, Tape, Var};
