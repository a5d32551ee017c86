//! Adversarial variant generation for knowledge-graph grounded visual
//! question answering corpora.
//!
//! The pipeline extracts slot templates from grounded questions, fills them
//! with sibling triplets from the KG (FixA: new question, same answer; FixQ:
//! same question, new answer), assigns balanced images, runs a two-annotator
//! review over an append-only log, builds leakage-safe folds and scores
//! external predictions.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod inflect;
pub mod io;
pub mod kg;
pub mod pipeline;
pub mod review;
pub mod template;
pub mod text;
pub mod variant;

pub use error::{Error, Result};
