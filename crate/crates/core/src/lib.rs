//! Detection of model-extraction attacks against a query-served classifier.
//!
//! The toolkit monitors each user's query stream: queries are embedded by a
//! specially trained variational autoencoder, and a subsampled Maximum Mean
//! Discrepancy statistic between the user's recent embeddings and a frozen
//! reference set of training-data embeddings drives threshold alarms and
//! optional blocking. Attacker and benign query simulators are included so
//! the detector can be evaluated end to end at desk scale.

pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod mmd;
pub mod models;
pub mod monitor;
pub mod numerics;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
