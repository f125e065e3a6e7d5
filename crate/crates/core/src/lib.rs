//! Audit harness for probing chat models with their own fabrications.
//!
//! The pipeline has three stages. First each audited model writes two true
//! and two false statements about every item in a corpus. Second, every
//! model (including the author) is shown the four statements with the labels
//! withheld and asked to verify each one. Third, each model is confronted
//! with its own lies inside a staged multi-turn conversation and a separate
//! judge model decides whether it endorsed them. A keyword-based ground
//! truth over reference texts and a set of agreement statistics (accuracy
//! conventions, Cohen/Fleiss kappa, precision/recall/F1, log-odds word
//! contrast) turn the raw transcripts into reports.
//!
//! Everything a model says is persisted verbatim in an append-only,
//! digest-checked record store, and every stage is resumable: rerunning a
//! finished stage issues zero new provider calls.

pub mod analytics;
pub mod context;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod generation;
pub mod judge;
pub mod keyword;
pub mod nudge;
pub mod provider;
pub mod report;
pub mod store;
pub mod template;
pub mod verification;

pub use error::{Error, Result};
