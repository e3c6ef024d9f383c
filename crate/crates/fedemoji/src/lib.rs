//! Simulator for federated on-device training of an emoji prediction model.
//!
//! A coupled input-forget gate LSTM is trained with federated averaging over
//! a population of synthetic clients. The crate covers the full loop: corpus
//! synthesis, vocabulary construction, client partitioning, language-model
//! pretraining with transfer, federated and centralized training, triggering,
//! frequency-diversified ranking, and evaluation (Accuracy@1, ROC AUC).

pub mod corpus;
pub mod error;
pub mod fedsim;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seeding;

pub mod cli;

pub use error::{Error, Result};
