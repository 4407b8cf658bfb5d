//! Cross-validation plumbing: subject-wise folds, prediction smoothing,
//! event formation with wake exclusion, hyperparameter search, and the
//! end-to-end run orchestration (in [`run`]).

pub mod run;

use serde::{Deserialize, Serialize};

use crate::config::HyperGrid;
use crate::error::{Error, Result};
use crate::featurize::FeatureMatrix;
use crate::forest::{predict_proba, train_forest, ForestHyperParams, ForestModel};
use crate::metrics::roc_auc;
use crate::recording::{EventAnnotation, EventKind, Hypnogram};

/// One fold's disjoint subject sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles subjects by seed and partitions them into `k` blocks; fold `i`
/// tests on block `i`, validates on block `(i+1) % k`, trains on the rest.
/// All recordings of a subject follow the subject.
pub fn make_folds(subjects: &[String], k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    let mut unique: Vec<String> = subjects.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() < k {
        return Err(Error::TooFewSubjects {
            have: unique.len(),
            need: k,
        });
    }
    if k < 3 {
        return Err(Error::InvalidConfig(
            "need k >= 3 folds for disjoint train/val/test".into(),
        ));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    // Block i covers [i*n/k, (i+1)*n/k).
    let n = unique.len();
    let block = |i: usize| &unique[i * n / k..(i + 1) * n / k];
    let mut folds = Vec::with_capacity(k);
    for fold_id in 0..k {
        let test: Vec<String> = block(fold_id).to_vec();
        let val: Vec<String> = block((fold_id + 1) % k).to_vec();
        let train: Vec<String> = (0..k)
            .filter(|&b| b != fold_id && b != (fold_id + 1) % k)
            .flat_map(|b| block(b).iter().cloned())
            .collect();
        folds.push(FoldPlan {
            fold_id,
            train,
            val,
            test,
        });
    }
    Ok(folds)
}

/// Groups per-second predictions into consecutive 10 s segments: a segment
/// with at least `i_positive_predictions` positives becomes all-positive,
/// otherwise all-negative. A trailing partial segment of length L uses the
/// proportional threshold `ceil(i * L / 10)`.
pub fn smooth_predictions(per_second: &[u8], i_positive_predictions: usize) -> Vec<u8> {
    assert!(
        (1..=10).contains(&i_positive_predictions),
        "i_positive_predictions must be in [1, 10]"
    );
    let mut out = vec![0u8; per_second.len()];
    for (seg_idx, chunk) in per_second.chunks(10).enumerate() {
        let positives = chunk.iter().filter(|&&v| v != 0).count();
        let needed = if chunk.len() == 10 {
            i_positive_predictions
        } else {
            (i_positive_predictions * chunk.len()).div_ceil(10)
        };
        if positives >= needed.max(1) {
            let base = seg_idx * 10;
            out[base..base + chunk.len()].fill(1);
        }
    }
    out
}

/// How predicted events interact with Wake staging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WakeRule {
    /// Discard events with more than 50% of their duration in Wake epochs.
    #[default]
    MajorityDuration,
    /// Discard events touching Wake at all.
    Strict,
}

/// Turns maximal runs of positive seconds (first second at `t0_s`) into
/// `Predicted` events, discarding events per the wake rule.
pub fn predictions_to_events(
    per_second: &[u8],
    t0_s: i64,
    hypnogram: &Hypnogram,
    wake_rule: WakeRule,
) -> Vec<EventAnnotation> {
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=per_second.len() {
        let positive = i < per_second.len() && per_second[i] != 0;
        match (positive, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                let start = (t0_s + s as i64) as f64;
                let duration = (i - s) as f64;
                let wake = hypnogram.wake_overlap_s(start, start + duration);
                let keep = match wake_rule {
                    WakeRule::MajorityDuration => wake <= 0.5 * duration,
                    WakeRule::Strict => wake == 0.0,
                };
                if keep {
                    events.push(
                        EventAnnotation::new(start, duration, EventKind::Predicted)
                            .expect("positive run duration"),
                    );
                }
                run_start = None;
            }
            _ => {}
        }
    }
    events
}

/// A training-stage hyperparameter combination (the model knobs), without
/// the post-processing pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub min_samples_split: usize,
    pub neg_subsample_ratio: f64,
    pub class_weight_pos: f64,
}

/// The full chosen configuration after both search stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChosenConfig {
    pub train: TrainConfig,
    pub decision_threshold: f64,
    pub i_positive_predictions: usize,
}

impl HyperGrid {
    /// Stage-1 combinations in canonical (declared list) order.
    pub fn train_configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &mss in &self.min_samples_split {
            for &nsr in &self.neg_subsample_ratio {
                for &cwp in &self.class_weight_pos {
                    out.push(TrainConfig {
                        min_samples_split: mss,
                        neg_subsample_ratio: nsr,
                        class_weight_pos: cwp,
                    });
                }
            }
        }
        out
    }

    /// Stage-2 combinations in canonical order.
    pub fn post_configs(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for &thr in &self.decision_threshold {
            for &ipos in &self.i_positive_predictions {
                out.push((thr, ipos));
            }
        }
        out
    }
}

/// One stage-1 evaluation row for the search log.
#[derive(Debug, Clone, Serialize)]
pub struct SearchLogRow {
    pub stage: u8,
    pub fold_id: usize,
    pub config: String,
    pub metric: f64,
}

/// Trains one forest per fold for a train config and reports the mean
/// window-level validation ROC AUC (folds yield (train, val) matrices).
pub fn evaluate_train_config(
    folds: &[(FeatureMatrix, FeatureMatrix)],
    config: TrainConfig,
    base_hp: &ForestHyperParams,
    log: &mut Vec<SearchLogRow>,
) -> Result<f64> {
    let mut aucs = Vec::with_capacity(folds.len());
    for (fold_id, (train, val)) in folds.iter().enumerate() {
        let hp = ForestHyperParams {
            min_samples_split: config.min_samples_split,
            neg_subsample_ratio: config.neg_subsample_ratio,
            class_weight_pos: config.class_weight_pos,
            ..base_hp.clone()
        };
        let model = train_forest(train, &hp)?;
        let proba = predict_proba(&model, val)?;
        let auc = roc_auc(&proba, &val.labels)?;
        log.push(SearchLogRow {
            stage: 1,
            fold_id,
            config: format!("{config:?}"),
            metric: auc,
        });
        aucs.push(auc);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Stage 1 of the hyperparameter search: evaluates every train config and
/// returns the `keep_top` best by mean validation AUC (ties broken by
/// canonical grid order).
pub fn search_stage1(
    folds: &[(FeatureMatrix, FeatureMatrix)],
    grid: &HyperGrid,
    base_hp: &ForestHyperParams,
    keep_top: usize,
    log: &mut Vec<SearchLogRow>,
) -> Result<Vec<TrainConfig>> {
    let configs = grid.train_configs();
    if configs.is_empty() {
        return Err(Error::InvalidConfig("empty stage-1 grid".into()));
    }
    if configs.len() == 1 {
        return Ok(configs);
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(configs.len());
    for (idx, &config) in configs.iter().enumerate() {
        let mean_auc = evaluate_train_config(folds, config, base_hp, log)?;
        scored.push((idx, mean_auc));
    }
    // Stable sort keeps canonical order among ties.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored
        .into_iter()
        .take(keep_top.max(1))
        .map(|(idx, _)| configs[idx])
        .collect())
}

/// Validation-recording material for stage 2: per-second probabilities plus
/// what AHI computation needs.
pub struct ValRecording {
    pub recording_id: String,
    pub t0_s: i64,
    pub proba: Vec<f64>,
    pub hypnogram: Hypnogram,
    pub ahi_true: f64,
}

/// Stage 2: sweeps (decision_threshold, i_positive_predictions) over the
/// kept configs' validation probability traces and picks the combination
/// minimizing mean |AHI_pred - AHI_true|. Ties break by canonical order.
pub fn search_stage2(
    candidates: &[(TrainConfig, Vec<ValRecording>)],
    grid: &HyperGrid,
    wake_rule: WakeRule,
    log: &mut Vec<SearchLogRow>,
) -> Result<ChosenConfig> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no stage-2 candidates".into()));
    }
    let post = grid.post_configs();
    if post.is_empty() {
        return Err(Error::InvalidConfig("empty stage-2 grid".into()));
    }
    let mut best: Option<(f64, ChosenConfig)> = None;
    for (train_cfg, recordings) in candidates {
        for &(threshold, ipos) in &post {
            let mut abs_errors = Vec::with_capacity(recordings.len());
            for rec in recordings {
                let hard: Vec<u8> = rec
                    .proba
                    .iter()
                    .map(|&p| (p >= threshold) as u8)
                    .collect();
                let smoothed = smooth_predictions(&hard, ipos);
                let events =
                    predictions_to_events(&smoothed, rec.t0_s, &rec.hypnogram, wake_rule);
                let ahi = crate::metrics::compute_ahi(&events, &rec.hypnogram, false)
                    .unwrap_or(0.0);
                abs_errors.push((ahi - rec.ahi_true).abs());
            }
            let mean_err = abs_errors.iter().sum::<f64>() / abs_errors.len().max(1) as f64;
            log.push(SearchLogRow {
                stage: 2,
                fold_id: usize::MAX,
                config: format!("{train_cfg:?} thr={threshold} ipos={ipos}"),
                metric: mean_err,
            });
            let chosen = ChosenConfig {
                train: *train_cfg,
                decision_threshold: threshold,
                i_positive_predictions: ipos,
            };
            if best.as_ref().map_or(true, |(b, _)| mean_err < *b) {
                best = Some((mean_err, chosen));
            }
        }
    }
    Ok(best.expect("non-empty grids").1)
}

/// Asserts that a trained model saw no validation/test subject rows: its
/// provenance group list must be disjoint from the held-out sets.
pub fn audit_no_leakage(
    model: &ForestModel,
    fold: &FoldPlan,
    rec_to_subject: &std::collections::BTreeMap<String, String>,
) -> Result<()> {
    for rec in &model.provenance_recordings {
        let subject = rec_to_subject.get(rec).ok_or_else(|| {
            Error::DimensionMismatch(format!("provenance recording '{rec}' unknown"))
        })?;
        if fold.val.contains(subject) || fold.test.contains(subject) {
            return Err(Error::DimensionMismatch(format!(
                "leakage: recording '{rec}' of held-out subject '{subject}' was in training"
            )));
        }
    }
    Ok(())
}
