//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! The end-to-end criteria share a 40-recording synthetic cohort and one
//! cross-validated run (built on first use under the cargo tmp dir and
//! reused across invocations via the run's resume markers; the fixture
//! directory name carries a content hash so config changes invalidate it).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use apnea_kit::autolabel::AutolabelConfig;
use apnea_kit::commands::{cmd_autolabel, cmd_predict, cmd_run, cmd_synth};
use apnea_kit::config::{Flavor, HyperGrid, LabelSource, RunConfig, SelectionConfig};
use apnea_kit::featurize::{katz_fd, sample_entropy, ventilation, window_std, FeatureMatrix};
use apnea_kit::forest::{load_model, predict_proba, save_model, ForestHyperParams};
use apnea_kit::metrics::{
    binary_metrics, compute_ahi, match_events, prc_auc, roc_auc, MatchCounts,
};
use apnea_kit::pipeline::run::{shifted_spo2_eval, RunSummary};
use apnea_kit::pipeline::WakeRule;
use apnea_kit::recording::io::load_annotations;
use apnea_kit::recording::{EventAnnotation, EventKind, Hypnogram, SleepStage};
use apnea_kit::select::run_selection;
use apnea_kit::synth::{AhiTarget, CohortManifest, DesatSpec, SynthSpec};

const FIXTURE_REV: &str = "v3";

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

struct BigRun {
    config: RunConfig,
    summary: RunSummary,
    #[allow(dead_code)]
    manifest: CohortManifest,
}

static BIG: OnceLock<BigRun> = OnceLock::new();

fn big_spec() -> SynthSpec {
    // 20 subjects x 2 nights x 8 h, injected AHI uniform in [2, 45],
    // desaturations 3-6% lagging events by 10-20 s.
    SynthSpec {
        n_subjects: 20,
        nights_per_subject: 2,
        hours: 8.0,
        ahi: AhiTarget::Uniform { lo: 2.0, hi: 45.0 },
        wake_fraction: 0.1,
        desat: DesatSpec {
            probability: 1.0,
            depth_lo_pct: 3.0,
            depth_hi_pct: 6.0,
            lag_lo_s: 10.0,
            lag_hi_s: 20.0,
        },
        ..SynthSpec::default()
    }
}

fn big_config(data_dir: PathBuf, output_dir: PathBuf) -> RunConfig {
    RunConfig {
        data_dir,
        output_dir,
        flavors: vec![Flavor::RespOnly, Flavor::RespSpo2, Flavor::RespSpo2Robust],
        label_source: LabelSource::Expert4,
        grid: HyperGrid {
            min_samples_split: vec![50],
            neg_subsample_ratio: vec![2.0],
            class_weight_pos: vec![2.0],
            decision_threshold: vec![0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7],
            i_positive_predictions: vec![3, 4, 5, 6, 7, 8],
        },
        seed: 20260401,
        k_folds: 10,
        feature_cap: 51,
        n_trees: 20,
        train_step_s: 10,
        selection: SelectionConfig::default(),
        wake_rule: WakeRule::MajorityDuration,
        keep_top_configs: 1,
        min_events_eval: 5,
        spo2_only_threshold_pct: 3.0,
    }
}

fn big_run() -> &'static BigRun {
    BIG.get_or_init(|| {
        let root = tmp_root().join(format!("big_{FIXTURE_REV}"));
        let data_dir = root.join("data");
        let run_dir = root.join("run");
        let spec = big_spec();
        let manifest = if data_dir.join("synth_manifest.json").exists() {
            serde_json::from_str(
                &std::fs::read_to_string(data_dir.join("synth_manifest.json")).unwrap(),
            )
            .unwrap()
        } else {
            let _ = std::fs::remove_dir_all(&root);
            cmd_synth(&spec, &data_dir, 99).expect("cohort generation")
        };
        let config = big_config(data_dir, run_dir);
        let summary = cmd_run(&config).expect("end-to-end run");
        BigRun {
            config,
            summary,
            manifest,
        }
    })
}

// --- 1 -----------------------------------------------------------------

#[test]
fn acceptance_01_event_metric_fixtures() {
    let counts = MatchCounts {
        tp: 18411,
        fp: 14458,
        fn_: 9181,
        tn: 517269.0,
        per_kind: BTreeMap::new(),
    };
    let m = binary_metrics(&counts);
    assert!((m.sensitivity.unwrap() - 0.667).abs() <= 0.001);
    assert!((m.precision.unwrap() - 0.560).abs() <= 0.001);
    assert!((m.fpr.unwrap() - 0.0272).abs() <= 0.0005);
    println!("ACCEPTANCE 1 (event metric fixtures): PASS");
}

// --- 2 -----------------------------------------------------------------

#[test]
fn acceptance_02_pooled_ahi_fixture() {
    let hyp = Hypnogram::new(3600.0, vec![SleepStage::N2; 2522]).unwrap();
    let events: Vec<EventAnnotation> = (0..27592)
        .map(|i| EventAnnotation::new(i as f64 * 300.0, 18.0, EventKind::Hypopnea).unwrap())
        .collect();
    let ahi = compute_ahi(&events, &hyp, false).unwrap();
    assert!((ahi - 10.94).abs() <= 0.01, "pooled AHI {ahi}");
    println!("ACCEPTANCE 2 (pooled AHI fixture): PASS");
}

// --- 3 -----------------------------------------------------------------

fn sampen_oracle(seq: &[f64], m: usize, r: f64) -> f64 {
    let nt = seq.len() - m;
    let mut a = 0u64;
    let mut b = 0u64;
    for i in 0..nt {
        for j in (i + 1)..nt {
            if (0..m).all(|k| (seq[i + k] - seq[j + k]).abs() <= r) {
                b += 1;
                if (seq[i + m] - seq[j + m]).abs() <= r {
                    a += 1;
                }
            }
        }
    }
    if a > 0 && b > 0 {
        -((a as f64 / b as f64).ln())
    } else if b > 0 {
        ((b + 1) as f64).ln()
    } else {
        let t = nt as f64;
        (t * (t - 1.0)).ln()
    }
}

fn katz_oracle(seq: &[f64]) -> f64 {
    let n = (seq.len() - 1) as f64;
    let mut path = 0.0;
    for w in seq.windows(2) {
        path += (1.0 + (w[1] - w[0]).powi(2)).sqrt();
    }
    let mut chord: f64 = 0.0;
    for (i, v) in seq.iter().enumerate() {
        chord = chord.max(((i as f64).powi(2) + (v - seq[0]).powi(2)).sqrt());
    }
    if chord == 0.0 || path == 0.0 || seq.len() == 2 {
        return 1.0;
    }
    n.log10() / (n.log10() + (chord / path).log10())
}

fn roc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn prc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| b.partial_cmp(a).unwrap());
    distinct.dedup();
    let n_pos: usize = labels.iter().map(|&l| l as usize).sum();
    let mut prev_recall = 0.0;
    let mut auc = 0.0;
    for &t in &distinct {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && **l == 1)
            .count();
        let sel = scores.iter().filter(|s| **s >= t).count();
        let recall = tp as f64 / n_pos as f64;
        auc += (recall - prev_recall) * (tp as f64 / sel as f64);
        prev_recall = recall;
    }
    auc
}

#[test]
fn acceptance_03_kernel_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for case in 0..200 {
        // Sample entropy on mixed-texture sequences.
        let n = rng.gen_range(20..160);
        let seq: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64;
                (t * 0.31).sin() * rng.gen_range(0.5..1.5) + rng.gen_range(-0.5..0.5)
            })
            .collect();
        let r = 0.2 * window_std(&seq);
        let got = sample_entropy(&seq, 2, r).unwrap();
        let expect = sampen_oracle(&seq, 2, r);
        assert!(rel(got, expect) < 1e-9, "case {case}: {got} vs {expect}");

        // Katz fractal dimension.
        let kseq: Vec<f64> = (0..rng.gen_range(10..200))
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        assert!(rel(katz_fd(&kseq), katz_oracle(&kseq)) < 1e-9);

        // Ventilation.
        let vseq: Vec<f64> = (0..rng.gen_range(2..300))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let oracle: f64 = vseq.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum();
        assert!(rel(ventilation(&vseq), oracle) < 1e-9);

        // Rank AUC and PRC AUC with deliberate ties.
        let n = rng.gen_range(10..60);
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0f64..1.0) * 6.0).floor() / 6.0)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = roc_auc(&scores, &labels).unwrap();
        assert!((got - roc_oracle(&scores, &labels)).abs() < 1e-12);
        let got = prc_auc(&scores, &labels).unwrap();
        assert!((got - prc_oracle(&scores, &labels)).abs() < 1e-12);
    }
    println!("ACCEPTANCE 3 (kernel oracles, 200 seeded inputs): PASS");
}

// --- 4 -----------------------------------------------------------------

#[test]
fn acceptance_04_event_matching_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    for case in 0..1000 {
        let span = rng.gen_range(120i64..600);
        let gen_events = |rng: &mut ChaCha8Rng, kinds: &[EventKind]| -> Vec<EventAnnotation> {
            let n = rng.gen_range(0..12);
            (0..n)
                .map(|_| {
                    let dur = rng.gen_range(1i64..40);
                    let start = rng.gen_range(0..(span - dur).max(1));
                    EventAnnotation::new(
                        start as f64,
                        dur as f64,
                        kinds[rng.gen_range(0..kinds.len())],
                    )
                    .unwrap()
                })
                .collect()
        };
        let truth = gen_events(
            &mut rng,
            &[
                EventKind::ObstructiveApnea,
                EventKind::CentralApnea,
                EventKind::MixedApnea,
                EventKind::Hypopnea,
            ],
        );
        let pred = gen_events(&mut rng, &[EventKind::Predicted]);
        let got = match_events(&truth, &pred, span as f64);

        // Rasterized oracle: everything on integer seconds.
        let mut truth_raster = vec![false; span as usize];
        let mut pred_raster = vec![false; span as usize];
        for e in &truth {
            for s in e.start_s as usize..(e.end_s() as usize).min(span as usize) {
                truth_raster[s] = true;
            }
        }
        for e in &pred {
            for s in e.start_s as usize..(e.end_s() as usize).min(span as usize) {
                pred_raster[s] = true;
            }
        }
        let mut tp = 0;
        let mut fn_ = 0;
        for e in &truth {
            let covered = (e.start_s as usize..e.end_s() as usize)
                .filter(|&s| s < pred_raster.len() && pred_raster[s])
                .count();
            if covered as f64 >= 0.5 * e.duration_s {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
        let mut fp = 0;
        for e in &pred {
            let covered = (e.start_s as usize..e.end_s() as usize)
                .filter(|&s| s < truth_raster.len() && truth_raster[s])
                .count();
            if (covered as f64) < 0.5 * e.duration_s {
                fp += 1;
            }
        }
        let free = (0..span as usize)
            .filter(|&s| !truth_raster[s] && !pred_raster[s])
            .count();
        let tn = free as f64 / 18.0;
        assert_eq!((got.tp, got.fp, got.fn_), (tp, fp, fn_), "case {case}");
        assert!((got.tn - tn).abs() < 1e-9, "case {case}: {} vs {tn}", got.tn);
    }
    println!("ACCEPTANCE 4 (event-matching oracle, 1000 configurations): PASS");
}

// --- 5 -----------------------------------------------------------------

#[test]
fn acceptance_05_end_to_end_synthetic_recovery() {
    let run = big_run();
    let get = |flavor: &str| run.summary.flavors.get(flavor).expect("flavor present");
    let resp_only = get("resp_only");
    let resp_spo2 = get("resp_spo2");

    let auc = |s: &apnea_kit::pipeline::run::FlavorSummary| s.mean_metrics["roc_auc"].mean;
    assert!(
        auc(resp_spo2) >= 0.90,
        "resp+spo2 mean window ROC AUC {:.4}",
        auc(resp_spo2)
    );
    assert!(
        auc(resp_only) >= 0.85,
        "resp-only mean window ROC AUC {:.4}",
        auc(resp_only)
    );
    assert!(
        auc(resp_spo2) >= auc(resp_only),
        "adding SpO2 must not lower the mean AUC: {:.4} vs {:.4}",
        auc(resp_spo2),
        auc(resp_only)
    );

    assert!(resp_spo2.ahi.r >= 0.90, "resp+spo2 AHI r {:.4}", resp_spo2.ahi.r);
    assert!(resp_only.ahi.r >= 0.80, "resp-only AHI r {:.4}", resp_only.ahi.r);

    assert!(
        resp_spo2.ahi.category_accuracy >= 0.70,
        "resp+spo2 AHI category accuracy {:.3}",
        resp_spo2.ahi.category_accuracy
    );
    println!(
        "ACCEPTANCE 5 (synthetic recovery): PASS (AUC {:.3}/{:.3}, r {:.3}/{:.3}, acc {:.2})",
        auc(resp_spo2),
        auc(resp_only),
        resp_spo2.ahi.r,
        resp_only.ahi.r,
        resp_spo2.ahi.category_accuracy
    );
}

// --- 6 -----------------------------------------------------------------

#[test]
fn acceptance_06_lag_robustness() {
    let run = big_run();
    let mean_auc = |rows: &[(String, Option<f64>)]| {
        let xs: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let plain_base = mean_auc(&shifted_spo2_eval(&run.config, Flavor::RespSpo2, 0.0).unwrap());
    let plain_shift = mean_auc(&shifted_spo2_eval(&run.config, Flavor::RespSpo2, 25.0).unwrap());
    let robust_base =
        mean_auc(&shifted_spo2_eval(&run.config, Flavor::RespSpo2Robust, 0.0).unwrap());
    let robust_shift =
        mean_auc(&shifted_spo2_eval(&run.config, Flavor::RespSpo2Robust, 25.0).unwrap());
    let plain_deg = plain_base - plain_shift;
    let robust_deg = robust_base - robust_shift;
    assert!(
        robust_deg < 0.02,
        "robust flavor degraded by {robust_deg:.4} under a +25 s SpO2 shift"
    );
    assert!(
        plain_deg > robust_deg,
        "plain flavor must degrade more: plain {plain_deg:.4} vs robust {robust_deg:.4}"
    );
    println!(
        "ACCEPTANCE 6 (lag robustness): PASS (plain -{plain_deg:.4}, robust -{robust_deg:.4})"
    );
}

// --- 7 -----------------------------------------------------------------

#[test]
fn acceptance_07_hypopnea_rule_monotonicity() {
    let root = tmp_root().join(format!("rules_{FIXTURE_REV}"));
    let data_dir = root.join("data");
    if !data_dir.join("synth_manifest.json").exists() {
        let _ = std::fs::remove_dir_all(&root);
        let spec = SynthSpec {
            n_subjects: 8,
            nights_per_subject: 1,
            hours: 1.5,
            ahi: AhiTarget::Fixed(30.0),
            desat: DesatSpec {
                probability: 0.85,
                depth_lo_pct: 2.5,
                depth_hi_pct: 5.5,
                lag_lo_s: 10.0,
                lag_hi_s: 20.0,
            },
            arousal_probability: 0.5,
            ..SynthSpec::default()
        };
        cmd_synth(&spec, &data_dir, 77).unwrap();
    }
    let report = cmd_autolabel(&data_dir, &AutolabelConfig::default(), false).unwrap();
    assert!(report.skipped.is_empty());

    let mut hi3 = Vec::new();
    let mut hi4 = Vec::new();
    for outcome in &report.bundles {
        let dir = data_dir.join(&outcome.recording_id);
        let auto3 = load_annotations(&dir.join("annotations.auto3.json")).unwrap();
        let auto4 = load_annotations(&dir.join("annotations.auto4.json")).unwrap();
        let hyp3: Vec<_> = auto3
            .iter()
            .filter(|e| e.kind == EventKind::Hypopnea)
            .collect();
        let hyp4: Vec<_> = auto4
            .iter()
            .filter(|e| e.kind == EventKind::Hypopnea)
            .collect();
        // Per-recording superset: every 4%-rule hypopnea appears verbatim
        // under the 3% rule.
        for e4 in &hyp4 {
            assert!(
                hyp3
                    .iter()
                    .any(|e3| e3.start_s == e4.start_s && e3.duration_s == e4.duration_s),
                "{}: 4%-rule hypopnea missing under the 3% rule",
                outcome.recording_id
            );
        }
        hi3.push(outcome.hi_auto3);
        hi4.push(outcome.hi_auto4);
    }
    let mean3: f64 = hi3.iter().sum::<f64>() / hi3.len() as f64;
    let mean4: f64 = hi4.iter().sum::<f64>() / hi4.len() as f64;
    assert!(
        mean3 > mean4,
        "3% rule must add hypopneas on average: {mean3:.2} vs {mean4:.2}"
    );
    println!("ACCEPTANCE 7 (rule monotonicity): PASS (mean HI {mean3:.2} vs {mean4:.2})");
}

// --- 8 -----------------------------------------------------------------

/// Five independent latent components drive the label; each informative
/// feature observes one component, so every one carries signal of its own.
fn planted_fold(seed: u64, n_rows: usize) -> (FeatureMatrix, FeatureMatrix) {
    let make = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = [1.0, 0.9, 0.8, 0.7, 0.6];
        let n_cols = 50;
        let mut values = vec![0f32; n_rows * n_cols];
        let mut labels = vec![0u8; n_rows];
        for i in 0..n_rows {
            let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let score: f64 = weights.iter().zip(&z).map(|(w, v)| w * v).sum();
            labels[i] = (score > 0.0) as u8;
            for j in 0..5 {
                values[i * n_cols + j] = (z[j] + rng.gen_range(-0.1..0.1)) as f32;
            }
            for j in 5..n_cols {
                values[i * n_cols + j] = rng.gen_range(-1.0f32..1.0);
            }
        }
        FeatureMatrix {
            feature_names: (0..n_cols)
                .map(|j| {
                    if j < 5 {
                        format!("informative{j}")
                    } else {
                        format!("noise{j:02}")
                    }
                })
                .collect(),
            values,
            labels,
            window_start_s: (0..n_rows as i64).collect(),
            groups: vec![0; n_rows],
            group_names: vec![format!("rec{seed}")],
            spo2_imputed: vec![false; n_rows],
        }
    };
    (make(seed), make(seed ^ 0xabcd))
}

#[test]
fn acceptance_08_selection_sanity() {
    let folds: Vec<(FeatureMatrix, FeatureMatrix)> =
        (0..10).map(|k| planted_fold(800 + k, 1200)).collect();
    let hp = ForestHyperParams {
        n_trees: 20,
        min_samples_split: 5,
        neg_subsample_ratio: 10.0,
        class_weight_pos: 1.0,
        max_features: None,
        seed: 88,
    };
    let outcome = run_selection(&folds, &hp, 0.5, 3).unwrap();
    assert!(
        outcome.chosen_count <= 15,
        "chosen count {} should be near the planted 5",
        outcome.chosen_count
    );
    let mut folds_with_allfive: usize = 0;
    for trace in &outcome.traces {
        let last = trace.iterations.last().unwrap();
        assert_eq!(
            last.surviving_features.len(),
            10,
            "elimination loop must end at exactly ten features"
        );
        let at_chosen = apnea_kit::select::fold_features_at(trace, outcome.chosen_count);
        let kept_informative = (0..5)
            .filter(|j| at_chosen.contains(&format!("informative{j}")))
            .count();
        if kept_informative == 5 {
            folds_with_allfive += 1;
        }
    }
    assert!(
        folds_with_allfive >= 8,
        "informative features survived in only {folds_with_allfive}/10 folds"
    );
    println!(
        "ACCEPTANCE 8 (selection sanity): PASS (chosen {}, informative kept in {}/10 folds)",
        outcome.chosen_count, folds_with_allfive
    );
}

// --- 9 -----------------------------------------------------------------

fn dir_digest(dir: &Path) -> BTreeMap<String, u64> {
    fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, u64>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                // FNV-1a
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, h);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn acceptance_09_determinism() {
    let root = tmp_root().join("determinism");
    let _ = std::fs::remove_dir_all(&root);
    let spec = SynthSpec {
        n_subjects: 10,
        nights_per_subject: 1,
        hours: 0.75,
        ahi: AhiTarget::Fixed(25.0),
        ..SynthSpec::default()
    };
    // Same seed, two directories: identical cohort bytes.
    cmd_synth(&spec, &root.join("a"), 41).unwrap();
    cmd_synth(&spec, &root.join("b"), 41).unwrap();
    assert_eq!(dir_digest(&root.join("a")), dir_digest(&root.join("b")));

    // Same run twice into the same path: identical bytes everywhere.
    let mut config = big_config(root.join("a"), root.join("run"));
    config.flavors = vec![Flavor::RespOnly, Flavor::Spo2Only];
    config.n_trees = 8;
    config.train_step_s = 2;
    config.grid.decision_threshold = vec![0.4, 0.5];
    config.grid.i_positive_predictions = vec![3, 5];
    cmd_run(&config).unwrap();
    let first = dir_digest(&root.join("run"));
    std::fs::remove_dir_all(&root.join("run")).unwrap();
    cmd_run(&config).unwrap();
    let second = dir_digest(&root.join("run"));
    assert_eq!(first, second, "rerun with the same seed must be byte-identical");

    // Model save/load round trip preserves predictions exactly.
    let model_path = root.join("run/fold0/resp_only/model.json");
    let model = load_model(&model_path).unwrap();
    let copy_path = root.join("model_copy.json");
    save_model(&model, &copy_path).unwrap();
    let reloaded = load_model(&copy_path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n_cols = model.registry.len();
    let x = FeatureMatrix {
        feature_names: model.registry.clone(),
        values: (0..50 * n_cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        labels: vec![0; 50],
        window_start_s: (0..50).collect(),
        groups: vec![0; 50],
        group_names: vec!["probe".into()],
        spo2_imputed: vec![false; 50],
    };
    assert_eq!(
        predict_proba(&model, &x).unwrap(),
        predict_proba(&reloaded, &x).unwrap()
    );
    println!("ACCEPTANCE 9 (determinism): PASS");
}

// --- 10 ----------------------------------------------------------------

#[test]
fn acceptance_10_real_data_smoke() {
    let Some(dir) = std::env::var_os("APNEA_KIT_REAL_PSG") else {
        println!("ACCEPTANCE 10 (real-data smoke): SKIPPED (APNEA_KIT_REAL_PSG not set)");
        return;
    };
    let data_dir = PathBuf::from(dir);
    if !data_dir.is_dir() {
        println!("ACCEPTANCE 10 (real-data smoke): SKIPPED (directory missing)");
        return;
    }
    let run = big_run();
    let model_path = run.config.output_dir.join("fold0/resp_only/model.json");
    let out_root = tmp_root().join("real_smoke");
    let dirs = apnea_kit::recording::io::list_bundle_dirs(&data_dir).unwrap();
    for bundle_dir in &dirs {
        let report = cmd_predict(
            &model_path,
            bundle_dir,
            &out_root.join(bundle_dir.file_name().unwrap()),
            WakeRule::MajorityDuration,
        )
        .unwrap();
        assert!(
            (0.0..=120.0).contains(&report.ahi),
            "{}: AHI {} out of range",
            report.recording_id,
            report.ahi
        );
    }
    println!("ACCEPTANCE 10 (real-data smoke): PASS ({} recordings)", dirs.len());
}

// --- shared-fixture sanity ----------------------------------------------

/// The training forest never sees validation/test subjects: re-checked here
/// against the fold plan recorded in provenance.
#[test]
fn acceptance_audit_no_leakage() {
    let run = big_run();
    let provenance: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.config.output_dir.join("provenance.json")).unwrap(),
    )
    .unwrap();
    let folds = provenance["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 10);
    for fold in folds {
        let fold_id = fold["fold_id"].as_u64().unwrap();
        let train: Vec<&str> = fold["train"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        let test: Vec<&str> = fold["test"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        let val: Vec<&str> = fold["val"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        for flavor in ["resp_only", "resp_spo2", "resp_spo2_robust"] {
            let model_path = run
                .config
                .output_dir
                .join(format!("fold{fold_id}/{flavor}/model.json"));
            let model = load_model(&model_path).unwrap();
            for rec in &model.provenance_recordings {
                let subject = &rec[..rec.find('_').unwrap()];
                assert!(train.contains(&subject), "{rec} not from a train subject");
                assert!(!test.contains(&subject) && !val.contains(&subject));
            }
        }
    }
    println!("ACCEPTANCE audit (no test-set leakage): PASS");
}
