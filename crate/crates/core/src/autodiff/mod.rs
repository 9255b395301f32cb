//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Ops are recorded on a [`Tape`] as they execute; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every input created with
//! `requires_grad`. [`Var::detach`] cuts the record: nothing upstream of a
//! detached value receives gradient through it.

mod conv;
mod elementwise;
mod norm;
mod reduce;
mod sample;
mod tape;

pub use conv::Conv2dOpts;
pub use elementwise::OpKind;
pub use norm::{BatchNormState, BnMode};
pub use reduce::ReduceOp;
pub use sample::{normalize, unnormalize, Padding};
pub use tape::{Fault, GradSink, Gradients, Tape, Var};
