//! Detection of sleep-apnea events and Apnea-Hypopnea Index estimation from
//! a wearable respiratory-effort signal, optionally fused with SpO2.
//!
//! The crate covers the full pipeline: bundle ingestion and preprocessing
//! ([`recording`]), per-second window features ([`featurize`]), automatic
//! hypopnea scoring ([`autolabel`]), a from-scratch random forest
//! ([`forest`]), iterative feature selection ([`select`]), cross-validated
//! orchestration ([`pipeline`]), evaluation math ([`metrics`]), a synthetic
//! cohort generator ([`synth`]), and the command layer used by the CLI
//! ([`commands`]).

pub mod autolabel;
pub mod commands;
pub mod config;
pub mod error;
pub mod featurize;
pub mod forest;
pub mod metrics;
pub mod pipeline;
pub mod recording;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
