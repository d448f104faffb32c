//! Disentangled self-supervised graph neural architecture search.

pub mod archsearch;
pub mod disentangle;
pub mod error;
pub mod graph;
pub mod io;
pub mod ops;
pub mod pretext;
pub mod supernet;
pub mod synthetic;

pub use error::{Error, Result};
