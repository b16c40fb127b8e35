//! Differentiable-parameter substrate.
//!
//! Losses are written once, generically over [`Real`], and evaluated either
//! on plain `f64` (forward passes, finite differences) or on tape variables
//! ([`Var`]) for exact reverse-mode gradients.

mod grad;
mod real;
mod tape;

pub use grad::{
    compare_gradients, fd_grad, fd_grad5, fd_grad_of, grad, grad_with_aux, Differentiable,
    DifferentiableWithAux, GradComparison, GradVector, ParamVector,
};
pub use real::{log_softmax, logsumexp, math, sum, Real};
pub use tape::{Tape, Var};
