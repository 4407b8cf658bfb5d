//! Run configuration. A single JSON document drives a whole cross-validated
//! run; all defaults are materialized into the run's provenance record.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::WakeRule;
pub use crate::recording::io::LabelSource;

/// The four model flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    RespOnly,
    RespSpo2,
    RespSpo2Robust,
    Spo2Only,
}

impl Flavor {
    pub fn needs_spo2(self) -> bool {
        !matches!(self, Flavor::RespOnly)
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Flavor::RespOnly => "resp_only",
            Flavor::RespSpo2 => "resp_spo2",
            Flavor::RespSpo2Robust => "resp_spo2_robust",
            Flavor::Spo2Only => "spo2_only",
        }
    }
}

pub const ALL_FLAVORS: [Flavor; 4] = [
    Flavor::RespOnly,
    Flavor::RespSpo2,
    Flavor::RespSpo2Robust,
    Flavor::Spo2Only,
];

/// Hyperparameter search space. Stage 1 sweeps the first three lists; the
/// post-processing pair is refined in stage 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperGrid {
    pub min_samples_split: Vec<usize>,
    pub neg_subsample_ratio: Vec<f64>,
    pub class_weight_pos: Vec<f64>,
    pub decision_threshold: Vec<f64>,
    pub i_positive_predictions: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            min_samples_split: vec![2, 50, 200],
            neg_subsample_ratio: vec![1.0, 2.0, 4.0],
            class_weight_pos: vec![1.0, 2.0, 5.0],
            decision_threshold: vec![0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7],
            i_positive_predictions: vec![3, 4, 5, 6, 7, 8],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.min_samples_split.is_empty()
            || self.neg_subsample_ratio.is_empty()
            || self.class_weight_pos.is_empty()
            || self.decision_threshold.is_empty()
            || self.i_positive_predictions.is_empty()
        {
            return Err(Error::InvalidConfig("hyper grid has an empty list".into()));
        }
        if self
            .i_positive_predictions
            .iter()
            .any(|&i| !(1..=10).contains(&i))
        {
            return Err(Error::InvalidConfig(
                "i_positive_predictions must lie in [1, 10]".into(),
            ));
        }
        if self
            .decision_threshold
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::InvalidConfig(
                "decision_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Feature-selection settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Run the iterative selection loop inside `run` (costly).
    pub enabled: bool,
    /// Dendrogram cut on the rescaled cophenetic distance.
    pub cluster_tau: f64,
    /// Permutation repeats per feature.
    pub importance_repeats: usize,
    /// Drop raw-source entropy/fractal features when their smoothed twins
    /// survive selection more often.
    pub prune_raw_when_smoothed_wins: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            enabled: false,
            cluster_tau: 0.5,
            importance_repeats: 3,
            prune_raw_when_smoothed_wins: true,
        }
    }
}

fn default_n_trees() -> usize {
    300
}
fn default_k_folds() -> usize {
    10
}
fn default_feature_cap() -> usize {
    51
}
fn default_train_step_s() -> u32 {
    1
}
fn default_keep_top() -> usize {
    3
}
fn default_min_events() -> usize {
    5
}
fn default_spo2_only_threshold() -> f64 {
    3.0
}

/// Everything a `run` invocation needs; serialized verbatim into
/// `provenance.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub flavors: Vec<Flavor>,
    pub label_source: LabelSource,
    #[serde(default)]
    pub grid: HyperGrid,
    pub seed: u64,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_feature_cap")]
    pub feature_cap: usize,
    #[serde(default = "default_n_trees")]
    pub n_trees: usize,
    /// Row stride (seconds) for training matrices; prediction always runs
    /// at 1 s.
    #[serde(default = "default_train_step_s")]
    pub train_step_s: u32,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub wake_rule: WakeRule,
    #[serde(default = "default_keep_top")]
    pub keep_top_configs: usize,
    /// Recordings with fewer truth events are excluded from mean-patient
    /// aggregation (never from AHI scatter).
    #[serde(default = "default_min_events")]
    pub min_events_eval: usize,
    /// Desaturation threshold (percent) of the SpO2-only detector.
    #[serde(default = "default_spo2_only_threshold")]
    pub spo2_only_threshold_pct: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flavors.is_empty() {
            return Err(Error::InvalidConfig("no flavors requested".into()));
        }
        if self.k_folds < 3 {
            return Err(Error::InvalidConfig("k_folds must be >= 3".into()));
        }
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.train_step_s == 0 {
            return Err(Error::InvalidConfig("train_step_s must be >= 1".into()));
        }
        self.grid.validate()
    }
}
