//! End-to-end cross-validated runs.
//!
//! Layout under the run directory:
//!
//! ```text
//! provenance.json          config + registry hashes + fold plan
//! cache/<rec>.bin          per-recording per-second feature matrices
//! fold<k>/<flavor>/
//!   model.json             final model (forest flavors)
//!   spo2_model.json        SpO2-only threshold model
//!   predictions.csv        recording_id,t_s,proba,hard_label_presmooth,hard_label
//!   events.json            predicted events per recording
//!   fold_metrics.json      per-recording evaluation (resume + aggregation input)
//!   log.jsonl              per-recording log lines
//!   .done                  stage completion marker
//! <flavor>/                aggregated: summary piece, ahi_scatter.csv,
//!                          confusion.csv, roc_points.csv, event_metrics.csv,
//!                          search_log.jsonl, selection artifacts
//! summary.json             all flavors side by side
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Flavor, RunConfig};
use crate::error::{Error, Result};
use crate::featurize::extract::{read_cache, write_cache};
use crate::featurize::registry::{build_registry, registry_hash, registry_names, spo2_spec};
use crate::featurize::{extract_windows, FeatureMatrix};
use crate::forest::{
    load_model, predict_proba, save_model, spo2_only_predict, train_forest, ForestHyperParams,
    Spo2OnlyModel,
};
use crate::metrics::{
    ahi_category_roc, ahi_report, binary_metrics, compute_ahi, match_events, mean_ci, pearson,
    prc_auc, roc_auc, spo2_burden, AhiReport, BinaryMetrics, MatchCounts, MeanCi, ProbaTrace,
    AHI_SPLITS,
};
use crate::pipeline::{
    audit_no_leakage, make_folds, predictions_to_events, search_stage1, search_stage2,
    smooth_predictions, ChosenConfig, FoldPlan, SearchLogRow, TrainConfig, ValRecording,
};
use crate::recording::io::{list_bundle_dirs, load_bundle_with_labels, write_json_atomic};
use crate::recording::{EventAnnotation, RecordingBundle};
use crate::select::{fold_features_at, prune_raw_source, run_selection, SelectionOutcome};

/// One recording's evaluation on its test fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingEval {
    pub recording_id: String,
    pub subject_id: String,
    pub fold_id: usize,
    pub n_truth_events: usize,
    pub counts: MatchCounts,
    pub window_roc_auc: Option<f64>,
    pub window_prc_auc: Option<f64>,
    pub event_metrics: BinaryMetrics,
    pub ahi_true: f64,
    pub ahi_pred: f64,
    pub spo2_burden: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub flavor: Flavor,
    pub fold_id: usize,
    pub chosen: ChosenConfig,
    pub recordings: Vec<RecordingEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlavorSummary {
    pub flavor: Flavor,
    pub chosen_config: ChosenConfig,
    pub n_recordings: usize,
    pub n_excluded_min_events: usize,
    /// Mean-patient metrics over recordings with enough truth events.
    pub mean_metrics: BTreeMap<String, MeanCi>,
    pub pooled_counts: MatchCounts,
    pub pooled_metrics: BinaryMetrics,
    pub per_kind_sensitivity: BTreeMap<String, f64>,
    pub ahi: AhiReport,
    /// Binarized-AHI ROC AUC per split.
    pub category_roc_auc: BTreeMap<String, f64>,
    pub burden_correlation_truth: Option<f64>,
    pub burden_correlation_pred: Option<f64>,
    /// True when any bundle lacked staging (AHI denominators fall back to
    /// total recording hours).
    pub hypnogram_missing_any: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub label_source: crate::config::LabelSource,
    pub k_folds: usize,
    pub flavors: BTreeMap<String, FlavorSummary>,
}

/// Everything loaded once and shared across flavors.
pub struct RunContext {
    pub config: RunConfig,
    pub bundles: Vec<RecordingBundle>,
    pub folds: Vec<FoldPlan>,
    /// Per-recording full per-second matrices (union registry).
    pub matrices: Vec<FeatureMatrix>,
    pub truth_ahi: Vec<f64>,
    pub rec_to_subject: BTreeMap<String, String>,
}

fn flavor_feature_names(flavor: Flavor, base: &[String]) -> Vec<String> {
    let mut names = base.to_vec();
    match flavor {
        Flavor::RespOnly => {}
        Flavor::RespSpo2 => names.push(spo2_spec(false).name()),
        Flavor::RespSpo2Robust => names.push(spo2_spec(true).name()),
        Flavor::Spo2Only => names.clear(),
    }
    names
}

/// Loads bundles, plans folds, and fills the per-recording feature cache.
pub fn prepare_run(config: &RunConfig) -> Result<RunContext> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let cache_dir = config.output_dir.join("cache");
    fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;

    let dirs = list_bundle_dirs(&config.data_dir)?;
    let mut bundles = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        bundles.push(load_bundle_with_labels(dir, config.label_source)?);
    }
    let needs_spo2 = config.flavors.iter().any(|f| f.needs_spo2());
    if needs_spo2 {
        for b in &bundles {
            if b.spo2.is_none() {
                return Err(Error::MissingSignal(format!(
                    "{}: flavor requires spo2 but the bundle has none",
                    b.recording_id
                )));
            }
        }
    }

    let subjects: Vec<String> = bundles.iter().map(|b| b.subject_id.clone()).collect();
    let folds = make_folds(&subjects, config.k_folds, config.seed)?;

    let base_registry = build_registry(false, false);
    let mut matrices = Vec::with_capacity(bundles.len());
    for bundle in &bundles {
        let cache_path = cache_dir.join(format!("{}.bin", bundle.recording_id));
        let matrix = if cache_path.exists() {
            read_cache(&cache_path)?
        } else {
            let mut registry = base_registry.clone();
            if bundle.spo2.is_some() {
                registry.push(spo2_spec(false));
                registry.push(spo2_spec(true));
            }
            let m = extract_windows(bundle, &registry, 1, 90)?;
            write_cache(&cache_path, &m)?;
            m
        };
        matrices.push(matrix);
    }

    let mut truth_ahi = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let events: Vec<EventAnnotation> = b.apnea_events().copied().collect();
        truth_ahi.push(compute_ahi(&events, &b.hypnogram, false)?);
    }
    let rec_to_subject: BTreeMap<String, String> = bundles
        .iter()
        .map(|b| (b.recording_id.clone(), b.subject_id.clone()))
        .collect();

    Ok(RunContext {
        config: config.clone(),
        bundles,
        folds,
        matrices,
        truth_ahi,
        rec_to_subject,
    })
}

fn indices_for<'a>(
    ctx: &'a RunContext,
    subjects: &'a [String],
) -> impl Iterator<Item = usize> + 'a {
    ctx.bundles
        .iter()
        .enumerate()
        .filter(move |(_, b)| subjects.contains(&b.subject_id))
        .map(|(i, _)| i)
}

/// Stacked stride-sampled training matrix for a subject set.
fn stacked_matrix(
    ctx: &RunContext,
    subjects: &[String],
    names: &[String],
    stride: usize,
) -> Result<FeatureMatrix> {
    let parts: Vec<FeatureMatrix> = indices_for(ctx, subjects)
        .map(|i| {
            let selected = ctx.matrices[i].select_columns(names)?;
            Ok(if stride > 1 {
                selected.rows_at_stride(stride)
            } else {
                selected
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&FeatureMatrix> = parts.iter().collect();
    FeatureMatrix::stack(&refs)
}

fn base_hp(config: &RunConfig) -> ForestHyperParams {
    ForestHyperParams {
        n_trees: config.n_trees,
        min_samples_split: 2,
        max_features: None,
        class_weight_pos: 1.0,
        neg_subsample_ratio: 1.0,
        seed: config.seed,
    }
}

fn hp_for(config: &RunConfig, fold_id: usize, train_cfg: TrainConfig) -> ForestHyperParams {
    ForestHyperParams {
        min_samples_split: train_cfg.min_samples_split,
        neg_subsample_ratio: train_cfg.neg_subsample_ratio,
        class_weight_pos: train_cfg.class_weight_pos,
        seed: config.seed ^ ((fold_id as u64 + 1) << 40),
        ..base_hp(config)
    }
}

/// Feature selection ahead of the search: per-fold surviving sets capped at
/// `feature_cap`, with the optional raw-source prune.
fn select_features(
    ctx: &RunContext,
    flavor: Flavor,
    names: &[String],
    flavor_dir: &Path,
) -> Result<Vec<Vec<String>>> {
    let cfg = &ctx.config;
    if !cfg.selection.enabled {
        return Ok(vec![names.to_vec(); ctx.folds.len()]);
    }
    let mut fold_mats = Vec::with_capacity(ctx.folds.len());
    for fold in &ctx.folds {
        let train = stacked_matrix(ctx, &fold.train, names, cfg.train_step_s as usize)?;
        let val = stacked_matrix(ctx, &fold.val, names, cfg.train_step_s as usize)?;
        fold_mats.push((train, val));
    }
    let outcome: SelectionOutcome = run_selection(
        &fold_mats,
        &base_hp(cfg),
        cfg.selection.cluster_tau,
        cfg.selection.importance_repeats,
    )?;
    let target = outcome.chosen_count.min(cfg.feature_cap);
    let mut sets: Vec<Vec<String>> = outcome
        .traces
        .iter()
        .map(|t| fold_features_at(t, target))
        .collect();
    if cfg.selection.prune_raw_when_smoothed_wins {
        prune_raw_source(&mut sets);
    }
    for (k, trace) in outcome.traces.iter().enumerate() {
        write_json_atomic(
            &flavor_dir.join(format!("selection_trace_fold{k}.json")),
            trace,
        )?;
    }
    let mut curve = String::from("n_features,median_val_roc_auc,median_val_f1\n");
    for p in &outcome.curve {
        curve.push_str(&format!(
            "{},{},{}\n",
            p.n_features, p.median_val_roc_auc, p.median_val_f1
        ));
    }
    let curve_path = flavor_dir.join("selection_curve.csv");
    fs::write(&curve_path, curve).map_err(|e| Error::io(&curve_path, e))?;
    let _ = flavor; // flavor only names the directory
    Ok(sets)
}

/// Per-second probability traces of a subject set under a trained model.
fn proba_traces(
    ctx: &RunContext,
    subjects: &[String],
    names: &[String],
    model: &crate::forest::ForestModel,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for i in indices_for(ctx, subjects) {
        let full = ctx.matrices[i].select_columns(names)?;
        let proba = predict_proba(model, &full)?;
        out.push((i, proba));
    }
    Ok(out)
}

fn eval_recording(
    ctx: &RunContext,
    rec_idx: usize,
    fold_id: usize,
    proba: &[f64],
    t0: i64,
    chosen: &ChosenConfig,
) -> (RecordingEval, Vec<u8>, Vec<u8>, Vec<EventAnnotation>) {
    let bundle = &ctx.bundles[rec_idx];
    let labels: Vec<u8> = if proba.len() == ctx.matrices[rec_idx].n_rows() {
        ctx.matrices[rec_idx].labels.clone()
    } else {
        // SpO2-only traces span whole seconds, not window anchors; rasterize
        // the truth at those seconds instead.
        let events: Vec<(f64, f64)> = bundle
            .apnea_events()
            .map(|e| (e.start_s, e.end_s()))
            .collect();
        (0..proba.len())
            .map(|i| {
                let t = (t0 + i as i64) as f64;
                events.iter().any(|&(s, e)| t >= s && t < e) as u8
            })
            .collect()
    };
    let presmooth: Vec<u8> = proba
        .iter()
        .map(|&p| (p >= chosen.decision_threshold) as u8)
        .collect();
    let smoothed = smooth_predictions(&presmooth, chosen.i_positive_predictions);
    let events = predictions_to_events(&smoothed, t0, &bundle.hypnogram, ctx.config.wake_rule);
    let truth: Vec<EventAnnotation> = bundle.apnea_events().copied().collect();
    let counts = match_events(&truth, &events, bundle.respiration.end_s());
    let event_metrics = binary_metrics(&counts);
    let ahi_pred = compute_ahi(&events, &bundle.hypnogram, false).unwrap_or(0.0);
    let burden = bundle
        .spo2
        .as_ref()
        .and_then(|tr| spo2_burden(tr, &bundle.hypnogram).ok());
    let eval = RecordingEval {
        recording_id: bundle.recording_id.clone(),
        subject_id: bundle.subject_id.clone(),
        fold_id,
        n_truth_events: truth.len(),
        counts,
        window_roc_auc: roc_auc(proba, &labels).ok(),
        window_prc_auc: prc_auc(proba, &labels).ok(),
        event_metrics,
        ahi_true: ctx.truth_ahi[rec_idx],
        ahi_pred,
        spo2_burden: burden,
    };
    (eval, presmooth, smoothed, events)
}

fn write_fold_outputs(
    fold_dir: &Path,
    rows: &[(String, i64, Vec<f64>, Vec<u8>, Vec<u8>)],
    events: &BTreeMap<String, Vec<EventAnnotation>>,
    metrics: &FoldMetrics,
) -> Result<()> {
    fs::create_dir_all(fold_dir).map_err(|e| Error::io(fold_dir, e))?;
    let pred_path = fold_dir.join("predictions.csv");
    let tmp = fold_dir.join("predictions.csv.tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "recording_id,t_s,proba,hard_label_presmooth,hard_label")
            .map_err(|e| Error::io(&tmp, e))?;
        for (rec_id, t0, proba, pre, post) in rows {
            for (i, p) in proba.iter().enumerate() {
                writeln!(w, "{},{},{},{},{}", rec_id, t0 + i as i64, p, pre[i], post[i])
                    .map_err(|e| Error::io(&tmp, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, &pred_path).map_err(|e| Error::io(&pred_path, e))?;

    #[derive(Serialize)]
    struct EventOut<'a> {
        start_s: f64,
        duration_s: f64,
        kind: &'a str,
    }
    let by_rec: BTreeMap<&String, Vec<EventOut>> = events
        .iter()
        .map(|(rec, evs)| {
            (
                rec,
                evs.iter()
                    .map(|e| EventOut {
                        start_s: e.start_s,
                        duration_s: e.duration_s,
                        kind: crate::recording::io::kind_token(e.kind),
                    })
                    .collect(),
            )
        })
        .collect();
    write_json_atomic(&fold_dir.join("events.json"), &by_rec)?;
    write_json_atomic(&fold_dir.join("fold_metrics.json"), metrics)?;

    let log_path = fold_dir.join("log.jsonl");
    let mut log = String::new();
    for rec in &metrics.recordings {
        log.push_str(
            &serde_json::to_string(&serde_json::json!({
                "recording_id": rec.recording_id,
                "ahi_true": rec.ahi_true,
                "ahi_pred": rec.ahi_pred,
                "window_roc_auc": rec.window_roc_auc,
            }))
            .expect("serializable log row"),
        );
        log.push('\n');
    }
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(())
}

/// Runs one forest flavor across all folds (respecting `.done` markers) and
/// returns the per-fold metrics.
fn run_forest_flavor(ctx: &RunContext, flavor: Flavor) -> Result<Vec<FoldMetrics>> {
    let cfg = &ctx.config;
    let base_names = registry_names(&build_registry(false, false));
    let names = flavor_feature_names(flavor, &base_names);
    let flavor_dir = cfg.output_dir.join(flavor.dir_name());
    fs::create_dir_all(&flavor_dir).map_err(|e| Error::io(&flavor_dir, e))?;

    let fold_sets = select_features(ctx, flavor, &names, &flavor_dir)?;

    // Stage 1 over stride matrices.
    let mut search_log: Vec<SearchLogRow> = Vec::new();
    let stride = cfg.train_step_s as usize;
    let mut fold_mats = Vec::with_capacity(ctx.folds.len());
    for (fold, set) in ctx.folds.iter().zip(&fold_sets) {
        let train = stacked_matrix(ctx, &fold.train, set, stride)?;
        let val = stacked_matrix(ctx, &fold.val, set, stride)?;
        fold_mats.push((train, val));
    }
    let kept = search_stage1(
        &fold_mats,
        &cfg.grid,
        &base_hp(cfg),
        cfg.keep_top_configs,
        &mut search_log,
    )?;

    // Stage 2: retrain the kept configs per fold, keep val probability
    // traces, persist candidate models for later promotion.
    let mut candidates: Vec<(TrainConfig, Vec<ValRecording>)> = Vec::new();
    for (cand_idx, &train_cfg) in kept.iter().enumerate() {
        let mut val_recs = Vec::new();
        for (fold, set) in ctx.folds.iter().zip(&fold_sets) {
            let fold_dir = cfg
                .output_dir
                .join(format!("fold{}", fold.fold_id))
                .join(flavor.dir_name());
            fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
            let model_path = fold_dir.join(format!("candidate{cand_idx}.model.json"));
            let model = if model_path.exists() {
                load_model(&model_path)?
            } else {
                let train = &fold_mats[fold.fold_id].0;
                let model = train_forest(train, &hp_for(cfg, fold.fold_id, train_cfg))?;
                save_model(&model, &model_path)?;
                model
            };
            audit_no_leakage(&model, fold, &ctx.rec_to_subject)?;
            for (rec_idx, proba) in proba_traces(ctx, &fold.val, set, &model)? {
                let b = &ctx.bundles[rec_idx];
                val_recs.push(ValRecording {
                    recording_id: b.recording_id.clone(),
                    t0_s: ctx.matrices[rec_idx].window_start_s[0] + 60,
                    proba,
                    hypnogram: b.hypnogram.clone(),
                    ahi_true: ctx.truth_ahi[rec_idx],
                });
            }
        }
        candidates.push((train_cfg, val_recs));
    }
    let chosen = search_stage2(&candidates, &cfg.grid, cfg.wake_rule, &mut search_log)?;
    let chosen_idx = kept
        .iter()
        .position(|c| *c == chosen.train)
        .expect("chosen config came from kept list");

    let log_path = flavor_dir.join("search_log.jsonl");
    let mut text = String::new();
    for row in &search_log {
        text.push_str(&serde_json::to_string(row).expect("serializable"));
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;

    // Final per-fold: promote the chosen candidate model, predict test
    // recordings, evaluate, write artifacts.
    let mut all_fold_metrics = Vec::with_capacity(ctx.folds.len());
    for (fold, set) in ctx.folds.iter().zip(&fold_sets) {
        let fold_dir = cfg
            .output_dir
            .join(format!("fold{}", fold.fold_id))
            .join(flavor.dir_name());
        let done = fold_dir.join(".done");
        if done.exists() {
            let text = fs::read_to_string(fold_dir.join("fold_metrics.json"))
                .map_err(|e| Error::io(&fold_dir, e))?;
            let metrics: FoldMetrics = serde_json::from_str(&text).map_err(|e| Error::Parse {
                file: fold_dir.join("fold_metrics.json"),
                line: e.line(),
                detail: e.to_string(),
            })?;
            all_fold_metrics.push(metrics);
            continue;
        }
        let cand_path = fold_dir.join(format!("candidate{chosen_idx}.model.json"));
        let mut model = load_model(&cand_path)?;
        model.decision_threshold = chosen.decision_threshold;
        model.i_positive_predictions = chosen.i_positive_predictions;
        save_model(&model, &fold_dir.join("model.json"))?;
        for (idx, _) in kept.iter().enumerate() {
            let p = fold_dir.join(format!("candidate{idx}.model.json"));
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }

        let mut rows = Vec::new();
        let mut events_map = BTreeMap::new();
        let mut evals = Vec::new();
        for (rec_idx, proba) in proba_traces(ctx, &fold.test, set, &model)? {
            let t0 = ctx.matrices[rec_idx].window_start_s[0] + 60;
            let (eval, pre, post, events) =
                eval_recording(ctx, rec_idx, fold.fold_id, &proba, t0, &chosen);
            let rec_id = eval.recording_id.clone();
            rows.push((rec_id.clone(), t0, proba, pre, post));
            events_map.insert(rec_id, events);
            evals.push(eval);
        }
        let metrics = FoldMetrics {
            flavor,
            fold_id: fold.fold_id,
            chosen,
            recordings: evals,
        };
        write_fold_outputs(&fold_dir, &rows, &events_map, &metrics)?;
        fs::write(&done, b"ok").map_err(|e| Error::io(&done, e))?;
        all_fold_metrics.push(metrics);
    }
    Ok(all_fold_metrics)
}

/// The SpO2-only flavor: threshold detector, no training; only the
/// smoothing parameter is tuned on validation AHI error.
fn run_spo2_flavor(ctx: &RunContext, flavor: Flavor) -> Result<Vec<FoldMetrics>> {
    let cfg = &ctx.config;
    let model = Spo2OnlyModel {
        desat_threshold_pct: cfg.spo2_only_threshold_pct,
    };
    // Tune i_positive_predictions on pooled validation recordings.
    let mut val_recs = Vec::new();
    for fold in &ctx.folds {
        for rec_idx in indices_for(ctx, &fold.val) {
            let b = &ctx.bundles[rec_idx];
            let (t0, binary) = spo2_only_predict(&model, b)?;
            val_recs.push(ValRecording {
                recording_id: b.recording_id.clone(),
                t0_s: t0,
                proba: binary.iter().map(|&v| v as f64).collect(),
                hypnogram: b.hypnogram.clone(),
                ahi_true: ctx.truth_ahi[rec_idx],
            });
        }
    }
    let placeholder = TrainConfig {
        min_samples_split: 0,
        neg_subsample_ratio: 0.0,
        class_weight_pos: 0.0,
    };
    let mut log = Vec::new();
    let chosen = search_stage2(
        &[(placeholder, val_recs)],
        &cfg.grid,
        cfg.wake_rule,
        &mut log,
    )?;

    let mut all_fold_metrics = Vec::with_capacity(ctx.folds.len());
    for fold in &ctx.folds {
        let fold_dir = cfg
            .output_dir
            .join(format!("fold{}", fold.fold_id))
            .join(flavor.dir_name());
        let done = fold_dir.join(".done");
        if done.exists() {
            let text = fs::read_to_string(fold_dir.join("fold_metrics.json"))
                .map_err(|e| Error::io(&fold_dir, e))?;
            let metrics: FoldMetrics = serde_json::from_str(&text).map_err(|e| Error::Parse {
                file: fold_dir.join("fold_metrics.json"),
                line: e.line(),
                detail: e.to_string(),
            })?;
            all_fold_metrics.push(metrics);
            continue;
        }
        fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        write_json_atomic(
            &fold_dir.join("spo2_model.json"),
            &serde_json::json!({
                "desat_threshold_pct": model.desat_threshold_pct,
                "i_positive_predictions": chosen.i_positive_predictions,
            }),
        )?;
        let mut rows = Vec::new();
        let mut events_map = BTreeMap::new();
        let mut evals = Vec::new();
        for rec_idx in indices_for(ctx, &fold.test) {
            let b = &ctx.bundles[rec_idx];
            let (t0, binary) = spo2_only_predict(&model, b)?;
            let proba: Vec<f64> = binary.iter().map(|&v| v as f64).collect();
            let (eval, pre, post, events) =
                eval_recording(ctx, rec_idx, fold.fold_id, &proba, t0, &chosen);
            let rec_id = eval.recording_id.clone();
            rows.push((rec_id.clone(), t0, proba, pre, post));
            events_map.insert(rec_id, events);
            evals.push(eval);
        }
        let metrics = FoldMetrics {
            flavor,
            fold_id: fold.fold_id,
            chosen,
            recordings: evals,
        };
        write_fold_outputs(&fold_dir, &rows, &events_map, &metrics)?;
        fs::write(&done, b"ok").map_err(|e| Error::io(&done, e))?;
        all_fold_metrics.push(metrics);
    }
    Ok(all_fold_metrics)
}

/// Reads a fold's predictions.csv back into per-recording probability traces.
fn read_predictions_csv(path: &Path) -> Result<BTreeMap<String, ProbaTrace>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, ProbaTrace> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(rec), Some(t), Some(p)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: idx + 1,
                detail: "expected at least 3 fields".into(),
            });
        };
        let t: i64 = t.parse().map_err(|_| Error::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            detail: format!("bad t_s '{t}'"),
        })?;
        let p: f64 = p.parse().map_err(|_| Error::Parse {
            file: path.to_path_buf(),
            line: idx + 1,
            detail: format!("bad proba '{p}'"),
        })?;
        let entry = out.entry(rec.to_string()).or_insert(ProbaTrace {
            t0_s: t,
            proba: Vec::new(),
        });
        entry.proba.push(p);
    }
    Ok(out)
}

fn aggregate_flavor(
    ctx: &RunContext,
    flavor: Flavor,
    fold_metrics: &[FoldMetrics],
) -> Result<FlavorSummary> {
    let cfg = &ctx.config;
    let flavor_dir = cfg.output_dir.join(flavor.dir_name());
    fs::create_dir_all(&flavor_dir).map_err(|e| Error::io(&flavor_dir, e))?;
    let all: Vec<&RecordingEval> = fold_metrics.iter().flat_map(|f| &f.recordings).collect();
    if all.is_empty() {
        return Err(Error::DegenerateMatrix("no evaluated recordings".into()));
    }

    // event_metrics.csv over every recording.
    let mut csv = String::from(
        "recording_id,subject_id,fold,n_truth_events,tp,fp,fn,tn,window_roc_auc,window_prc_auc,accuracy,sensitivity,precision,f1,fpr,ahi_true,ahi_pred,spo2_burden\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &all {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.recording_id,
            r.subject_id,
            r.fold_id,
            r.n_truth_events,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            r.counts.tn,
            opt(r.window_roc_auc),
            opt(r.window_prc_auc),
            opt(r.event_metrics.accuracy),
            opt(r.event_metrics.sensitivity),
            opt(r.event_metrics.precision),
            opt(r.event_metrics.f1),
            opt(r.event_metrics.fpr),
            r.ahi_true,
            r.ahi_pred,
            opt(r.spo2_burden),
        ));
    }
    let p = flavor_dir.join("event_metrics.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;

    // Mean-patient metrics over recordings with enough truth events.
    let eligible: Vec<&&RecordingEval> = all
        .iter()
        .filter(|r| r.n_truth_events >= cfg.min_events_eval)
        .collect();
    let n_excluded = all.len() - eligible.len();
    let mut mean_metrics = BTreeMap::new();
    let collect =
        |f: &dyn Fn(&RecordingEval) -> Option<f64>| -> Vec<f64> {
            eligible.iter().filter_map(|r| f(r)).collect()
        };
    let entries: [(&str, Box<dyn Fn(&RecordingEval) -> Option<f64>>); 6] = [
        ("roc_auc", Box::new(|r| r.window_roc_auc)),
        ("prc_auc", Box::new(|r| r.window_prc_auc)),
        ("accuracy", Box::new(|r| r.event_metrics.accuracy)),
        ("sensitivity", Box::new(|r| r.event_metrics.sensitivity)),
        ("precision", Box::new(|r| r.event_metrics.precision)),
        ("f1", Box::new(|r| r.event_metrics.f1)),
    ];
    for (name, getter) in &entries {
        let values = collect(getter.as_ref());
        if values.len() >= 2 {
            mean_metrics.insert(name.to_string(), mean_ci(&values)?);
        }
    }

    // Pooled event counts (Table-style) and per-kind sensitivities.
    let mut pooled = MatchCounts::zero();
    for r in &all {
        pooled.add(&r.counts);
    }
    let per_kind_sensitivity: BTreeMap<String, f64> = pooled
        .per_kind
        .iter()
        .filter(|(_, (hit, miss))| hit + miss > 0)
        .map(|(k, (hit, miss))| (k.clone(), *hit as f64 / (hit + miss) as f64))
        .collect();

    // AHI agreement over every recording.
    let pairs: Vec<(f64, f64)> = all.iter().map(|r| (r.ahi_true, r.ahi_pred)).collect();
    let ahi = ahi_report(&pairs)?;
    let mut scatter = String::from("recording_id,ahi_true,ahi_pred\n");
    for r in &all {
        scatter.push_str(&format!("{},{},{}\n", r.recording_id, r.ahi_true, r.ahi_pred));
    }
    let p = flavor_dir.join("ahi_scatter.csv");
    fs::write(&p, scatter).map_err(|e| Error::io(&p, e))?;
    let mut conf = String::from("truth\\pred,normal,mild,moderate,severe\n");
    for (i, name) in ["normal", "mild", "moderate", "severe"].iter().enumerate() {
        conf.push_str(name);
        for j in 0..4 {
            conf.push_str(&format!(",{}", ahi.confusion[i][j]));
        }
        conf.push('\n');
    }
    let p = flavor_dir.join("confusion.csv");
    fs::write(&p, conf).map_err(|e| Error::io(&p, e))?;

    // Binarized-AHI ROC from saved per-second predictions.
    let chosen = fold_metrics[0].chosen;
    let mut roc_inputs: Vec<(ProbaTrace, &crate::recording::Hypnogram, f64)> = Vec::new();
    for fold in &ctx.folds {
        let pred_path = cfg
            .output_dir
            .join(format!("fold{}", fold.fold_id))
            .join(flavor.dir_name())
            .join("predictions.csv");
        for (rec_id, trace) in read_predictions_csv(&pred_path)? {
            let rec_idx = ctx
                .bundles
                .iter()
                .position(|b| b.recording_id == rec_id)
                .ok_or_else(|| Error::DimensionMismatch(format!("unknown recording {rec_id}")))?;
            roc_inputs.push((trace, &ctx.bundles[rec_idx].hypnogram, ctx.truth_ahi[rec_idx]));
        }
    }
    let mut category_roc_auc = BTreeMap::new();
    let mut roc_csv = String::from("split,threshold,sensitivity,specificity\n");
    for split in AHI_SPLITS {
        match ahi_category_roc(
            &roc_inputs,
            split,
            chosen.i_positive_predictions,
            cfg.wake_rule,
        ) {
            Ok(curve) => {
                for pt in &curve.points {
                    roc_csv.push_str(&format!(
                        "{:?},{},{},{}\n",
                        split, pt.threshold, pt.sensitivity, pt.specificity
                    ));
                }
                category_roc_auc.insert(format!("{split:?}"), curve.auc);
            }
            Err(Error::SingleClass(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let p = flavor_dir.join("roc_points.csv");
    fs::write(&p, roc_csv).map_err(|e| Error::io(&p, e))?;

    // Burden correlations.
    let burden_pairs: Vec<(f64, f64, f64)> = all
        .iter()
        .filter_map(|r| r.spo2_burden.map(|b| (b, r.ahi_true, r.ahi_pred)))
        .collect();
    let (burden_truth, burden_pred) = if burden_pairs.len() >= 2 {
        let b: Vec<f64> = burden_pairs.iter().map(|x| x.0).collect();
        let t: Vec<f64> = burden_pairs.iter().map(|x| x.1).collect();
        let pr: Vec<f64> = burden_pairs.iter().map(|x| x.2).collect();
        (pearson(&b, &t).ok(), pearson(&b, &pr).ok())
    } else {
        (None, None)
    };

    Ok(FlavorSummary {
        flavor,
        chosen_config: chosen,
        n_recordings: all.len(),
        n_excluded_min_events: n_excluded,
        mean_metrics,
        pooled_counts: pooled.clone(),
        pooled_metrics: binary_metrics(&pooled),
        per_kind_sensitivity,
        ahi,
        category_roc_auc,
        burden_correlation_truth: burden_truth,
        burden_correlation_pred: burden_pred,
        hypnogram_missing_any: ctx.bundles.iter().any(|b| b.hypnogram_missing),
    })
}

/// Executes the configured run end to end and writes all artifacts.
pub fn execute_run(config: &RunConfig) -> Result<RunSummary> {
    let ctx = prepare_run(config)?;
    let base_names = registry_names(&build_registry(false, false));
    let mut flavor_hashes = BTreeMap::new();
    for &flavor in &ctx.config.flavors {
        let names = flavor_feature_names(flavor, &base_names);
        flavor_hashes.insert(flavor.dir_name().to_string(), registry_hash(&names));
    }
    write_json_atomic(
        &config.output_dir.join("provenance.json"),
        &serde_json::json!({
            "config": config,
            "code_version": env!("CARGO_PKG_VERSION"),
            "registry_hash": flavor_hashes,
            "folds": ctx.folds,
            "recordings": ctx.bundles.iter().map(|b| b.recording_id.clone()).collect::<Vec<_>>(),
        }),
    )?;

    let mut flavors = BTreeMap::new();
    for &flavor in &config.flavors {
        let fold_metrics = match flavor {
            Flavor::Spo2Only => run_spo2_flavor(&ctx, flavor)?,
            _ => run_forest_flavor(&ctx, flavor)?,
        };
        let summary = aggregate_flavor(&ctx, flavor, &fold_metrics)?;
        flavors.insert(flavor.dir_name().to_string(), summary);
    }
    let summary = RunSummary {
        seed: config.seed,
        label_source: config.label_source,
        k_folds: config.k_folds,
        flavors,
    };
    write_json_atomic(&config.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Single-recording inference with a saved model: probabilities, smoothing,
/// events, AHI.
pub struct PredictOutput {
    pub t0_s: i64,
    pub proba: Vec<f64>,
    pub presmooth: Vec<u8>,
    pub smoothed: Vec<u8>,
    pub events: Vec<EventAnnotation>,
    pub ahi: f64,
    pub category: crate::metrics::AhiCategory,
}

pub fn predict_bundle(
    model: &crate::forest::ForestModel,
    bundle: &RecordingBundle,
    wake_rule: crate::pipeline::WakeRule,
) -> Result<PredictOutput> {
    let specs: Vec<crate::featurize::FeatureSpec> = model
        .registry
        .iter()
        .map(|n| crate::featurize::FeatureSpec::parse_name(n))
        .collect::<Result<_>>()?;
    let matrix = extract_windows(bundle, &specs, 1, 90)?;
    let proba = predict_proba(model, &matrix)?;
    let t0 = matrix.window_start_s[0] + 60;
    let presmooth: Vec<u8> = proba
        .iter()
        .map(|&p| (p >= model.decision_threshold) as u8)
        .collect();
    let smoothed = smooth_predictions(&presmooth, model.i_positive_predictions);
    let events = predictions_to_events(&smoothed, t0, &bundle.hypnogram, wake_rule);
    let ahi = compute_ahi(&events, &bundle.hypnogram, false).unwrap_or(0.0);
    Ok(PredictOutput {
        t0_s: t0,
        proba,
        presmooth,
        smoothed,
        events,
        ahi,
        category: crate::metrics::categorize_ahi(ahi),
    })
}

/// Rebuilds aggregation artifacts from fold outputs already on disk.
pub fn reaggregate(config: &RunConfig) -> Result<RunSummary> {
    let ctx = prepare_run(config)?;
    let mut flavors = BTreeMap::new();
    for &flavor in &config.flavors {
        let mut fold_metrics = Vec::new();
        for fold in &ctx.folds {
            let path = config
                .output_dir
                .join(format!("fold{}", fold.fold_id))
                .join(flavor.dir_name())
                .join("fold_metrics.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            fold_metrics.push(serde_json::from_str(&text).map_err(|e| Error::Parse {
                file: path.clone(),
                line: e.line(),
                detail: e.to_string(),
            })?);
        }
        flavors.insert(
            flavor.dir_name().to_string(),
            aggregate_flavor(&ctx, flavor, &fold_metrics)?,
        );
    }
    let summary = RunSummary {
        seed: config.seed,
        label_source: config.label_source,
        k_folds: config.k_folds,
        flavors,
    };
    write_json_atomic(&config.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Paths of a run directory, for callers poking at artifacts.
pub fn fold_flavor_dir(output_dir: &Path, fold_id: usize, flavor: Flavor) -> PathBuf {
    output_dir
        .join(format!("fold{fold_id}"))
        .join(flavor.dir_name())
}

/// Re-evaluates a completed run's fold models on test recordings whose SpO2
/// clock is delayed by `shift_s` (positive = desaturations appear later).
/// Only the desaturation columns are recomputed; everything else comes from
/// the feature cache. Returns per-recording window ROC AUCs.
pub fn shifted_spo2_eval(
    config: &RunConfig,
    flavor: Flavor,
    shift_s: f64,
) -> Result<Vec<(String, Option<f64>)>> {
    use crate::featurize::{
        spo2_drop, spo2_drop_robust, SPO2_HORIZON_S, SPO2_MAX_LAG_S,
    };
    let ctx = prepare_run(config)?;
    let base_names = registry_names(&build_registry(false, false));
    let names = flavor_feature_names(flavor, &base_names);
    let mut out = Vec::new();
    for fold in &ctx.folds {
        let model_path = fold_flavor_dir(&config.output_dir, fold.fold_id, flavor).join("model.json");
        let model = load_model(&model_path)?;
        for rec_idx in indices_for(&ctx, &fold.test) {
            let bundle = &ctx.bundles[rec_idx];
            let spo2 = bundle
                .spo2
                .as_ref()
                .ok_or_else(|| Error::MissingSignal(bundle.recording_id.clone()))?;
            let shifted = spo2.clone().with_start_offset(spo2.start_s() + shift_s);
            let mut matrix = ctx.matrices[rec_idx].select_columns(&names)?;
            let n_cols = matrix.n_cols();
            for (j, name) in names.iter().enumerate() {
                let robust = match name.as_str() {
                    n if n.starts_with("spo2drop_robust") => true,
                    n if n.starts_with("spo2drop") => false,
                    _ => continue,
                };
                for i in 0..matrix.n_rows() {
                    let anchor = (matrix.window_start_s[i] + 60) as f64;
                    let drop = if robust {
                        spo2_drop_robust(&shifted, anchor, SPO2_HORIZON_S, SPO2_MAX_LAG_S)
                    } else {
                        spo2_drop(&shifted, anchor, SPO2_HORIZON_S)
                    };
                    matrix.values[i * n_cols + j] = drop.unwrap_or(0.0) as f32;
                }
            }
            let proba = predict_proba(&model, &matrix)?;
            out.push((
                bundle.recording_id.clone(),
                roc_auc(&proba, &matrix.labels).ok(),
            ));
        }
    }
    Ok(out)
}
