//! Command implementations behind the CLI: each takes typed arguments,
//! works through the filesystem, and returns a serializable result. The CLI
//! binary only parses arguments and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autolabel::{hypopnea_index, relabel, AutolabelConfig, HypopneaRule};
use crate::config::{Flavor, RunConfig};
use crate::error::{Error, Result};
use crate::featurize::extract::write_feature_csvs;
use crate::featurize::registry::{build_registry, registry_hash, registry_names, spo2_spec};
use crate::featurize::extract_windows;
use crate::forest::load_model;
use crate::metrics::pearson;
use crate::pipeline::run::{execute_run, predict_bundle, reaggregate, RunSummary};
use crate::pipeline::WakeRule;
use crate::recording::io::{
    list_bundle_dirs, load_bundle, load_bundle_with_labels, save_annotations, write_json_atomic,
    LabelSource,
};
use crate::recording::EventKind;
use crate::select::{run_selection, SelectionOutcome};
use crate::synth::{generate_and_save, CohortManifest, SynthSpec};

/// `synth`: generate a cohort of bundle directories.
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path, seed: u64) -> Result<CohortManifest> {
    generate_and_save(spec, out_dir, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutolabelBundleOutcome {
    pub recording_id: String,
    pub hi_expert: f64,
    pub hi_auto3: f64,
    pub hi_auto4: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutolabelReport {
    pub bundles: Vec<AutolabelBundleOutcome>,
    pub skipped: Vec<String>,
    pub mean_hi_expert: f64,
    pub mean_hi_auto3: f64,
    pub mean_hi_auto4: f64,
    pub r_expert_auto4: Option<f64>,
    pub r_expert_auto3: Option<f64>,
    pub r_auto4_auto3: Option<f64>,
}

/// `autolabel`: write `annotations.auto3.json` / `annotations.auto4.json`
/// next to each bundle's expert annotations and report hypopnea-index
/// agreement across the cohort. With `skip_bad`, bundles missing a signal
/// are listed and skipped instead of failing the command.
pub fn cmd_autolabel(
    data_dir: &Path,
    config: &AutolabelConfig,
    skip_bad: bool,
) -> Result<AutolabelReport> {
    let dirs = list_bundle_dirs(data_dir)?;
    let mut outcomes = Vec::new();
    let mut skipped = Vec::new();
    for dir in &dirs {
        let bundle = load_bundle(dir)?;
        let relabeled3 = match relabel(&bundle, HypopneaRule::Rule3, config) {
            Ok(events) => events,
            Err(e @ Error::MissingSignal(_)) if skip_bad => {
                skipped.push(format!("{}: {e}", dir.display()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let relabeled4 = relabel(&bundle, HypopneaRule::Rule4, config)?;
        save_annotations(&dir.join(HypopneaRule::Rule3.file_name()), &relabeled3)?;
        save_annotations(&dir.join(HypopneaRule::Rule4.file_name()), &relabeled4)?;
        let expert_hypopneas: Vec<_> = bundle
            .annotations
            .iter()
            .filter(|e| e.kind == EventKind::Hypopnea)
            .copied()
            .collect();
        outcomes.push(AutolabelBundleOutcome {
            recording_id: bundle.recording_id.clone(),
            hi_expert: hypopnea_index(&expert_hypopneas, &bundle.hypnogram)?,
            hi_auto3: hypopnea_index(&relabeled3, &bundle.hypnogram)?,
            hi_auto4: hypopnea_index(&relabeled4, &bundle.hypnogram)?,
        });
    }
    if outcomes.is_empty() {
        return Err(Error::RecordingRejected(
            "no bundle could be auto-labeled".into(),
        ));
    }
    let mean = |f: &dyn Fn(&AutolabelBundleOutcome) -> f64| {
        outcomes.iter().map(|o| f(o)).sum::<f64>() / outcomes.len() as f64
    };
    let col = |f: &dyn Fn(&AutolabelBundleOutcome) -> f64| -> Vec<f64> {
        outcomes.iter().map(|o| f(o)).collect()
    };
    let (he, h3, h4) = (
        col(&|o| o.hi_expert),
        col(&|o| o.hi_auto3),
        col(&|o| o.hi_auto4),
    );
    let report = AutolabelReport {
        mean_hi_expert: mean(&|o| o.hi_expert),
        mean_hi_auto3: mean(&|o| o.hi_auto3),
        mean_hi_auto4: mean(&|o| o.hi_auto4),
        r_expert_auto4: pearson(&he, &h4).ok(),
        r_expert_auto3: pearson(&he, &h3).ok(),
        r_auto4_auto3: pearson(&h4, &h3).ok(),
        bundles: outcomes,
        skipped,
    };
    write_json_atomic(&data_dir.join("hi_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractManifest {
    pub flavor: Flavor,
    pub registry_hash: String,
    pub n_features: usize,
    pub rows_per_bundle: BTreeMap<String, usize>,
}

/// `extract`: per-bundle features.csv / labels.csv / groups.csv plus a
/// manifest carrying the registry hash.
pub fn cmd_extract(
    data_dir: &Path,
    flavor: Flavor,
    out_dir: &Path,
    label_source: LabelSource,
) -> Result<ExtractManifest> {
    let registry = match flavor {
        Flavor::RespOnly => build_registry(false, false),
        Flavor::RespSpo2 => build_registry(true, false),
        Flavor::RespSpo2Robust => build_registry(true, true),
        Flavor::Spo2Only => vec![spo2_spec(false)],
    };
    let names = registry_names(&registry);
    let dirs = list_bundle_dirs(data_dir)?;
    let mut rows = BTreeMap::new();
    for dir in &dirs {
        let bundle = load_bundle_with_labels(dir, label_source)?;
        let matrix = extract_windows(&bundle, &registry, 1, 90)?;
        let bundle_out = out_dir.join(&bundle.recording_id);
        write_feature_csvs(&bundle_out, &matrix)?;
        rows.insert(bundle.recording_id.clone(), matrix.n_rows());
    }
    let manifest = ExtractManifest {
        flavor,
        registry_hash: registry_hash(&names),
        n_features: names.len(),
        rows_per_bundle: rows,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json_atomic(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// `run`: the full cross-validated pipeline.
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary> {
    execute_run(config)
}

/// `report`: rebuild aggregation artifacts from fold outputs on disk.
pub fn cmd_report(config: &RunConfig) -> Result<RunSummary> {
    reaggregate(config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectReport {
    pub flavor: Flavor,
    pub chosen_count: usize,
    pub per_fold_sizes: Vec<usize>,
}

/// `select`: run the iterative feature selection standalone and write its
/// traces and curve under `<output_dir>/<flavor>/`.
pub fn cmd_select(config: &RunConfig) -> Result<SelectReport> {
    let mut cfg = config.clone();
    cfg.selection.enabled = true;
    let flavor = *cfg
        .flavors
        .first()
        .ok_or_else(|| Error::InvalidConfig("select needs one flavor".into()))?;
    let ctx = crate::pipeline::run::prepare_run(&cfg)?;
    let base = registry_names(&build_registry(false, false));
    let mut names = base;
    match flavor {
        Flavor::RespOnly => {}
        Flavor::RespSpo2 => names.push(spo2_spec(false).name()),
        Flavor::RespSpo2Robust => names.push(spo2_spec(true).name()),
        Flavor::Spo2Only => {
            return Err(Error::InvalidConfig(
                "spo2_only has no feature bank to select from".into(),
            ))
        }
    }
    let stride = cfg.train_step_s as usize;
    let mut fold_mats = Vec::new();
    for fold in &ctx.folds {
        let train = stacked(&ctx, &fold.train, &names, stride)?;
        let val = stacked(&ctx, &fold.val, &names, stride)?;
        fold_mats.push((train, val));
    }
    let hp = crate::forest::ForestHyperParams {
        n_trees: cfg.n_trees,
        seed: cfg.seed,
        ..Default::default()
    };
    let outcome: SelectionOutcome = run_selection(
        &fold_mats,
        &hp,
        cfg.selection.cluster_tau,
        cfg.selection.importance_repeats,
    )?;
    let flavor_dir = cfg.output_dir.join(flavor.dir_name());
    fs::create_dir_all(&flavor_dir).map_err(|e| Error::io(&flavor_dir, e))?;
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
    let target = outcome.chosen_count.min(cfg.feature_cap);
    Ok(SelectReport {
        flavor,
        chosen_count: target,
        per_fold_sizes: outcome
            .traces
            .iter()
            .map(|t| crate::select::fold_features_at(t, target).len())
            .collect(),
    })
}

fn stacked(
    ctx: &crate::pipeline::run::RunContext,
    subjects: &[String],
    names: &[String],
    stride: usize,
) -> Result<crate::featurize::FeatureMatrix> {
    let parts: Vec<crate::featurize::FeatureMatrix> = ctx
        .bundles
        .iter()
        .enumerate()
        .filter(|(_, b)| subjects.contains(&b.subject_id))
        .map(|(i, _)| {
            let m = ctx.matrices[i].select_columns(names)?;
            Ok(if stride > 1 { m.rows_at_stride(stride) } else { m })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&crate::featurize::FeatureMatrix> = parts.iter().collect();
    crate::featurize::FeatureMatrix::stack(&refs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictReport {
    pub recording_id: String,
    pub ahi: f64,
    pub category: crate::metrics::AhiCategory,
    pub n_events: usize,
    pub events_path: PathBuf,
    pub hypnogram_missing: bool,
}

/// `predict`: single-recording inference with a saved model; writes
/// `events.json` (and `predictions.csv`) into `out_dir`.
pub fn cmd_predict(
    model_path: &Path,
    bundle_dir: &Path,
    out_dir: &Path,
    wake_rule: WakeRule,
) -> Result<PredictReport> {
    let model = load_model(model_path)?;
    let bundle = load_bundle(bundle_dir)?;
    let output = predict_bundle(&model, &bundle, wake_rule)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    #[derive(Serialize)]
    struct EventOut<'a> {
        start_s: f64,
        duration_s: f64,
        kind: &'a str,
    }
    let events: Vec<EventOut> = output
        .events
        .iter()
        .map(|e| EventOut {
            start_s: e.start_s,
            duration_s: e.duration_s,
            kind: crate::recording::io::kind_token(e.kind),
        })
        .collect();
    let events_path = out_dir.join("events.json");
    write_json_atomic(&events_path, &events)?;
    let mut csv = String::from("t_s,proba,hard_label_presmooth,hard_label\n");
    for (i, p) in output.proba.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            output.t0_s + i as i64,
            p,
            output.presmooth[i],
            output.smoothed[i]
        ));
    }
    let csv_path = out_dir.join("predictions.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(PredictReport {
        recording_id: bundle.recording_id.clone(),
        ahi: output.ahi,
        category: output.category,
        n_events: output.events.len(),
        events_path,
        hypnogram_missing: bundle.hypnogram_missing,
    })
}
