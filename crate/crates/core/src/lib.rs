//! Federated neural collaborative filtering under item-promotion poisoning.
//!
//! The crate simulates a federated recommender (NCF scoring with per-device
//! private user embeddings), adversaries that promote a target item by
//! submitting crafted updates or fake profiles, robust server-side
//! aggregation rules, and the metrics used to judge both the attack and the
//! recommender.
//!
//! Module map:
//!
//! - [`nn`]: dense tensors and an MLP with hand-derived gradients.
//! - [`data`]: rating ingestion, implicit-feedback datasets, popularity labels,
//!   synthetic data generation.
//! - [`model`]: the NCF scorer, local loss and top-K recommendation.
//! - [`federation`]: client sampling, rounds and the training loop.
//! - [`attack`]: popularity estimator, crafted-gradient adversary, baselines.
//! - [`defense`]: trimmed mean, Krum scores and Bulyan.
//! - [`eval`]: exposure rate, hit ratio, macro F1 and the gradient KL diagnostic.
//! - [`experiment`]: configuration, checkpoints and the experiment runner.

pub mod attack;
pub mod data;
pub mod defense;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod nn;
pub mod seed;
