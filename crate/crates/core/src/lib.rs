//! Iterative regularized Newton scheme for monotone ill-posed equations
//! `F(u) = f` with noisy data `f_delta`.
//!
//! The pieces, bottom-up:
//!
//! * [`linalg`]: vectors, dense maps and the shifted solve `(J + aI) z = w`.
//! * [`operators`]: monotone test operators, noisy problems, bound estimates.
//! * [`schedule`]: the sequence `a_n = d0/(d + n)^b` and its constants.
//! * [`regsolve`]: the regularized equation `F(V) + aV = f_delta`.
//! * [`dsm`]: the iteration, stopping rules and convergence studies.

pub mod dsm;
pub mod export;
pub mod linalg;
pub mod operators;
pub mod regsolve;
pub mod schedule;

pub use dsm::{run, RunReport, StopKind, StopReason, StoppingRule};
pub use linalg::{LinearMap, Vector};
pub use operators::{MonotoneOperator, MonotoneProblem};
pub use regsolve::{solve_regularized, v_sequence, VSequenceRecord};
pub use schedule::{select_constants, Schedule};
