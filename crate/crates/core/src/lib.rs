//! Dangling-aware entity alignment between two knowledge graphs.
//!
//! [`kgdata`] loads and generates graph pairs, [`keesa`] embeds entities,
//! [`ipule`] separates matchable from dangling entities and estimates the
//! matchable share, [`aligneval`] aligns and scores, and [`oracles`] holds
//! reference computations used by the tests.

pub mod aligneval;
pub mod autodiff;
pub mod error;
pub mod ipule;
pub mod keesa;
pub mod kgdata;
pub mod losses;
pub mod optim;
pub mod oracles;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
