//! A small define-by-run autograd engine for volumetric networks.
//!
//! Everything is `f64` and single-threaded so forward and backward passes are
//! bit-reproducible. Parameters live in a [`ParamStore`]; a [`Graph`] records
//! one forward computation and [`Graph::backward`] returns [`Gradients`] keyed by
//! [`ParamId`]. Frozen parameters enter the tape as constants and never receive
//! a gradient.

pub mod array;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod params;

pub use array::Array;
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
