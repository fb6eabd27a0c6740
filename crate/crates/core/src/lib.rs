//! Multiple-instance verification: decide whether a bag of instances contains
//! one that shares the latent class of a query, and point at which ones do.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`numcore`]), the attention functions ([`attention`]), bag poolers
//! ([`pooling`]), full Siamese verification models ([`models`]), a synthetic
//! data generator ([`datagen`]), the training loop ([`train`]) and
//! classification/explanation metrics ([`eval`]).

pub mod attention;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod kvconfig;
pub mod models;
pub mod numcore;
pub mod pooling;
pub mod train;

pub use error::{Error, Result};
