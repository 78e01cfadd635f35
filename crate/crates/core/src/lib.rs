//! Automatic diagnosis by jointly generating symptom inquiries and disease
//! predictions with a small transformer decoder.
//!
//! Layers, bottom up: [`corpus`] (records, vocabularies, synthetic data),
//! [`augmentation`] (the repeated-input training view), [`model`],
//! [`training`], [`dialogue`] (greedy inquiry against a patient) and
//! [`evaluation`].

pub mod augmentation;
pub mod corpus;
pub mod dialogue;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{CoadError, Result};
