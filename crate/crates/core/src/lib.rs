//! Automatic differentiation for hybrid dynamical systems.
//!
//! The crate is organised bottom-up: [`jet`] and [`tape`] provide the
//! numeric differentiation engines, [`diagram`] holds the block-diagram IR
//! and its graphic differentiation transform, [`sim`] integrates flattened
//! models together with their sensitivities, [`solvers`] differentiates
//! algebraic equations and [`analysis`] cross-checks everything against
//! finite differences. [`optimize`] and [`tables`] sit on top and back the
//! `hyad` command.

pub mod analysis;
pub mod diagram;
pub mod dual;
pub mod elementary;
pub mod expr;
pub mod jet;
pub mod models;
pub mod optimize;
pub mod sim;
pub mod solvers;
pub mod tables;
pub mod tape;

pub use elementary::ElementaryFn;
pub use dual::{Dual, DualVec};
pub use expr::{ParamExpr, ParamValues};
pub use jet::{Jet, JetError};
pub use tape::{Tape, TapeBuilder, TapeError};
