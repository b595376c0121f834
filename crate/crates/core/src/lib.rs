#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capsule;
pub mod checkpoint;
pub mod colourspace;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod gamut;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
