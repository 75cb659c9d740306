//! Reconstruction of portrait images from low-dimensional attribute vectors.
//!
//! The crate implements the full attack pipeline against a black-box image
//! encoder: a deterministic synthetic-portrait dataset, a trainable reference
//! encoder that is then sealed behind a query-only interface, a small
//! style-based image generator, identity-embedding networks, the shallow
//! pre-generator that maps attribute vectors into per-block generator inputs,
//! style-mixing fusion of specialized pre-generators, and an evaluation
//! harness that quantifies how much private information (identity, pose,
//! hidden attributes) leaks through the attribute vector.
//!
//! Everything is seeded and deterministic: a fixed seed reproduces datasets,
//! training runs and evaluation reports byte for byte. Heavy inner loops are
//! data-parallel via rayon (feature `parallel`, on by default) with reduction
//! orders fixed so that parallel and sequential execution produce bitwise
//! identical results.

pub mod artifact;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod generator;
pub mod graph;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod pregenerator;
pub mod reference;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
