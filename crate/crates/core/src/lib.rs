//! Hard-constrained differentiable co-exploration of neural architectures
//! and Eyeriss-style dataflow accelerators.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffengine`]: reverse-mode autodiff used by every learned component.
//! * [`hwmodel`]: analytic accelerator cost oracle and design-space sampling.
//! * [`supernet`]: relaxed architecture parameters over a synthetic task.
//! * [`surrogate`]: pretrained metric estimator and jointly trained generator.
//! * [`constrainer`]: hinge constraints and minimal-norm gradient correction.
//! * [`explorer`]: the co-exploration loop and baseline procedures.
//! * [`cli`]: command-line front end.

pub mod cli;
pub mod constrainer;
pub mod diffengine;
pub mod error;
pub mod explorer;
pub mod hwmodel;
pub mod rng;
pub mod supernet;
pub mod surrogate;

pub use error::{Error, Result};
