//! Iterative feature selection: Ward clustering groups colinear features,
//! permutation importance ranks them, the bottom decile is eliminated with
//! cluster protection, and the loop repeats down to ten features. The kept
//! count is the iteration size with the best median validation AUC across
//! folds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::registry::{FeatureFamily, FeatureSpec, SignalSource};
use crate::featurize::FeatureMatrix;
use crate::forest::{predict_proba, train_forest, ForestHyperParams, ForestModel};
use crate::metrics::roc_auc;

/// Squared Ward distances derived from 1 - |Pearson rho| between feature
/// columns (sign-aligned Euclidean on standardized columns, up to a constant
/// factor that cancels in the rescaled dendrogram cut).
fn correlation_distances(x: &FeatureMatrix, kept: &[usize]) -> Vec<f64> {
    let n_rows = x.n_rows();
    let m = kept.len();
    // Standardize kept columns.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &j in kept {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / n_rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_rows as f64;
        let sd = var.sqrt();
        cols.push(col.iter().map(|v| (v - mean) / sd).collect());
    }
    let mut d2 = vec![0.0; m * m];
    for a in 0..m {
        for b in (a + 1)..m {
            let dot: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
            let rho = (dot / n_rows as f64).clamp(-1.0, 1.0);
            let dist = 2.0 * (1.0 - rho.abs());
            d2[a * m + b] = dist;
            d2[b * m + a] = dist;
        }
    }
    d2
}

/// Agglomerative Ward clustering (Lance-Williams updates) cut at `tau` of
/// the rescaled merge-height range. Zero-variance columns are pre-dropped
/// into singleton clusters. Returns feature name -> cluster id, ids ordered
/// by each cluster's first member in column order.
pub fn cluster_features(x: &FeatureMatrix, tau: f64) -> Result<BTreeMap<String, usize>> {
    let m_all = x.n_cols();
    if m_all < 2 {
        return Err(Error::DegenerateMatrix(
            "clustering needs at least 2 features".into(),
        ));
    }
    if x.n_rows() < 2 {
        return Err(Error::DegenerateMatrix("clustering needs rows".into()));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..m_all {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        if var > 0.0 {
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    if kept.len() < 2 {
        return Err(Error::DegenerateMatrix(
            "fewer than 2 features with variance".into(),
        ));
    }

    let m = kept.len();
    let mut d2 = correlation_distances(x, &kept);
    // Active cluster bookkeeping over the distance matrix.
    let mut active: Vec<bool> = vec![true; m];
    let mut size: Vec<f64> = vec![1.0; m];
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(m - 1); // (height, into, from)
    let mut heights: Vec<f64> = Vec::with_capacity(m - 1);
    for _ in 0..m - 1 {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..m {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..m {
                if !active[j] {
                    continue;
                }
                let d = d2[i * m + j];
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let height = dij.max(0.0).sqrt();
        heights.push(height);
        merges.push((height, i, j));
        // Lance-Williams Ward update into slot i.
        for k in 0..m {
            if !active[k] || k == i || k == j {
                continue;
            }
            let (ni, nj, nk) = (size[i], size[j], size[k]);
            let updated = ((ni + nk) * d2[i * m + k] + (nj + nk) * d2[j * m + k]
                - nk * dij)
                / (ni + nj + nk);
            d2[i * m + k] = updated;
            d2[k * m + i] = updated;
        }
        size[i] += size[j];
        active[j] = false;
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
    }
    let h_max = heights.last().copied().unwrap_or(0.0);
    // Replay merges up to the cut with union-find over column slots.
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for &(h, i, j) in &merges {
        if h <= tau * h_max {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[rj.max(ri)] = rj.min(ri);
            }
        }
    }
    // Canonical ids: clusters numbered by first member in column order,
    // then singleton ids for zero-variance columns.
    let mut root_to_id: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for (slot, &col) in kept.iter().enumerate() {
        let root = find(&mut parent, slot);
        let next = root_to_id.len();
        let id = *root_to_id.entry(root).or_insert(next);
        out.insert(x.feature_names[col].clone(), id);
    }
    let mut next_id = root_to_id.len();
    for &col in &dropped {
        out.insert(x.feature_names[col].clone(), next_id);
        next_id += 1;
    }
    Ok(out)
}

/// Mean drop in validation ROC AUC over `repeats` seeded permutations of
/// each feature column.
pub fn permutation_importance(
    model: &ForestModel,
    x_val: &FeatureMatrix,
    repeats: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let baseline = roc_auc(&predict_proba(model, x_val)?, &x_val.labels)?;
    let n_rows = x_val.n_rows();
    let n_cols = x_val.n_cols();
    let mut scratch = x_val.clone();
    let mut out = BTreeMap::new();
    for j in 0..n_cols {
        let original: Vec<f32> = (0..n_rows)
            .map(|i| x_val.values[i * n_cols + j])
            .collect();
        let mut drop_sum = 0.0;
        for rep in 0..repeats {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ ((j as u64) << 20) ^ rep as u64);
            let mut permuted = original.clone();
            permuted.shuffle(&mut rng);
            for (i, v) in permuted.iter().enumerate() {
                scratch.values[i * n_cols + j] = *v;
            }
            let auc = roc_auc(&predict_proba(model, &scratch)?, &scratch.labels)?;
            drop_sum += baseline - auc;
        }
        for (i, v) in original.iter().enumerate() {
            scratch.values[i * n_cols + j] = *v;
        }
        out.insert(x_val.feature_names[j].clone(), drop_sum / repeats as f64);
    }
    Ok(out)
}

/// Removes the bottom-decile features by importance (at least one, never
/// below 10 survivors). A cluster about to lose all of its remaining two or
/// more members keeps its best one; a final singleton is removable. Ties
/// break by canonical column order.
pub fn eliminate(
    surviving: &[String],
    importances: &BTreeMap<String, f64>,
    clusters: &BTreeMap<String, usize>,
    canonical_order: &BTreeMap<String, usize>,
) -> Vec<String> {
    let n = surviving.len();
    debug_assert!(n >= 11, "eliminate requires > 10 surviving features");
    let k = ((n as f64 * 0.10).floor() as usize).max(1).min(n - 10);
    let canon = |name: &String| canonical_order.get(name).copied().unwrap_or(usize::MAX);
    let mut ranked: Vec<&String> = surviving.iter().collect();
    ranked.sort_by(|a, b| {
        let ia = importances.get(*a).copied().unwrap_or(0.0);
        let ib = importances.get(*b).copied().unwrap_or(0.0);
        ia.total_cmp(&ib).then(canon(a).cmp(&canon(b)))
    });
    let mut removal: Vec<&String> = ranked.into_iter().take(k).collect();

    // Cluster protection: keep the best member of any cluster that would be
    // emptied from >= 2 members at once.
    let mut by_cluster: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for name in surviving {
        if let Some(&c) = clusters.get(name) {
            by_cluster.entry(c).or_default().push(name);
        }
    }
    for (_, members) in by_cluster {
        if members.len() < 2 {
            continue;
        }
        let all_removed = members.iter().all(|m| removal.contains(m));
        if all_removed {
            let keep = members
                .iter()
                .max_by(|a, b| {
                    let ia = importances.get(**a).copied().unwrap_or(0.0);
                    let ib = importances.get(**b).copied().unwrap_or(0.0);
                    ia.total_cmp(&ib).then(canon(b).cmp(&canon(a)))
                })
                .copied()
                .expect("non-empty cluster");
            removal.retain(|r| *r != keep);
        }
    }
    surviving
        .iter()
        .filter(|name| !removal.contains(name))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub surviving_features: Vec<String>,
    pub val_roc_auc: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub iterations: Vec<IterationRecord>,
    pub clusters: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionCurvePoint {
    pub n_features: usize,
    pub median_val_roc_auc: f64,
    pub median_val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub traces: Vec<SelectionTrace>,
    pub chosen_count: usize,
    pub curve: Vec<SelectionCurvePoint>,
}

fn f1_at_half(proba: &[f64], labels: &[u8]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (p, &l) in proba.iter().zip(labels) {
        let pred = *p >= 0.5;
        match (pred, l != 0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let sens = tp / (tp + fn_);
    let prec = tp / (tp + fp);
    2.0 * sens * prec / (sens + prec)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    crate::recording::quantile_sorted(values, 0.5)
}

/// Runs the elimination loop on each fold and picks the feature count with
/// the best median validation AUC (ties to the smaller count).
pub fn run_selection(
    folds: &[(FeatureMatrix, FeatureMatrix)],
    hp: &ForestHyperParams,
    tau: f64,
    importance_repeats: usize,
) -> Result<SelectionOutcome> {
    if folds.is_empty() {
        return Err(Error::InvalidConfig("selection needs >= 1 fold".into()));
    }
    let canonical_order: BTreeMap<String, usize> = folds[0]
        .0
        .feature_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let mut traces = Vec::with_capacity(folds.len());
    for (fold_idx, (train, val)) in folds.iter().enumerate() {
        let clusters = cluster_features(train, tau)?;
        let mut surviving: Vec<String> = train.feature_names.clone();
        let mut iterations = Vec::new();
        loop {
            let train_sel = train.select_columns(&surviving)?;
            let val_sel = val.select_columns(&surviving)?;
            let fold_hp = ForestHyperParams {
                seed: hp.seed ^ ((fold_idx as u64) << 32) ^ surviving.len() as u64,
                ..hp.clone()
            };
            let model = train_forest(&train_sel, &fold_hp)?;
            let proba = predict_proba(&model, &val_sel)?;
            let auc = roc_auc(&proba, &val_sel.labels)?;
            let f1 = f1_at_half(&proba, &val_sel.labels);
            iterations.push(IterationRecord {
                surviving_features: surviving.clone(),
                val_roc_auc: auc,
                val_f1: f1,
            });
            if surviving.len() <= 10 {
                break;
            }
            let importances =
                permutation_importance(&model, &val_sel, importance_repeats, fold_hp.seed)?;
            let next = eliminate(&surviving, &importances, &clusters, &canonical_order);
            debug_assert!(next.len() < surviving.len());
            surviving = next;
        }
        traces.push(SelectionTrace {
            iterations,
            clusters: cluster_features(train, tau)?,
        });
    }

    // Median AUC per iteration index across folds.
    let max_iters = traces.iter().map(|t| t.iterations.len()).max().unwrap();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize)> = None; // (median auc, count)
    for it in 0..max_iters {
        let mut aucs = Vec::new();
        let mut f1s = Vec::new();
        let mut sizes = Vec::new();
        for trace in &traces {
            if let Some(rec) = trace.iterations.get(it) {
                aucs.push(rec.val_roc_auc);
                f1s.push(rec.val_f1);
                sizes.push(rec.surviving_features.len() as f64);
            }
        }
        if aucs.is_empty() {
            continue;
        }
        let med_auc = median(&mut aucs);
        let med_f1 = median(&mut f1s);
        let size = median(&mut sizes).round() as usize;
        curve.push(SelectionCurvePoint {
            n_features: size,
            median_val_roc_auc: med_auc,
            median_val_f1: med_f1,
        });
        let better = match best {
            None => true,
            // Strictly better AUC, or equal AUC at a smaller count.
            Some((b_auc, b_count)) => {
                med_auc > b_auc || (med_auc == b_auc && size < b_count)
            }
        };
        if better {
            best = Some((med_auc, size));
        }
    }
    Ok(SelectionOutcome {
        traces,
        chosen_count: best.expect("at least one iteration").1,
        curve,
    })
}

/// The fold's surviving set at the largest iteration size that does not
/// exceed `target`.
pub fn fold_features_at(trace: &SelectionTrace, target: usize) -> Vec<String> {
    let mut best: Option<&IterationRecord> = None;
    for rec in &trace.iterations {
        let n = rec.surviving_features.len();
        if n <= target {
            let better = best.map_or(true, |b| n > b.surviving_features.len());
            if better {
                best = Some(rec);
            }
        }
    }
    best.unwrap_or_else(|| trace.iterations.last().expect("non-empty trace"))
        .surviving_features
        .clone()
}

fn is_raw_entropy_or_fd(name: &str) -> bool {
    FeatureSpec::parse_name(name).is_ok_and(|spec| {
        matches!(
            spec.family,
            FeatureFamily::SampleEntropy | FeatureFamily::KatzFd
        ) && spec.source == Some(SignalSource::Raw)
    })
}

fn is_smoothed_entropy_or_fd(name: &str) -> bool {
    FeatureSpec::parse_name(name).is_ok_and(|spec| {
        matches!(
            spec.family,
            FeatureFamily::SampleEntropy | FeatureFamily::KatzFd
        ) && spec.source == Some(SignalSource::Smoothed)
    })
}

/// Post-selection source pruning: when smoothed entropy/fractal features
/// survive more often than raw ones across folds, drop the raw variants
/// from every fold's set.
pub fn prune_raw_source(fold_sets: &mut [Vec<String>]) -> bool {
    let raw: usize = fold_sets
        .iter()
        .flat_map(|s| s.iter())
        .filter(|n| is_raw_entropy_or_fd(n))
        .count();
    let smoothed: usize = fold_sets
        .iter()
        .flat_map(|s| s.iter())
        .filter(|n| is_smoothed_entropy_or_fd(n))
        .count();
    if smoothed > raw {
        for set in fold_sets.iter_mut() {
            set.retain(|n| !is_raw_entropy_or_fd(n));
        }
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn matrix(cols: Vec<(&str, Vec<f64>)>, labels: Vec<u8>) -> FeatureMatrix {
        let n_rows = labels.len();
        let n_cols = cols.len();
        let mut values = vec![0f32; n_rows * n_cols];
        for (j, (_, col)) in cols.iter().enumerate() {
            for i in 0..n_rows {
                values[i * n_cols + j] = col[i] as f32;
            }
        }
        FeatureMatrix {
            feature_names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            values,
            labels,
            window_start_s: (0..n_rows as i64).collect(),
            groups: vec![0; n_rows],
            group_names: vec!["g".into()],
            spo2_imputed: vec![false; n_rows],
        }
    }

    #[test]
    fn colinear_groups_form_two_clusters() {
        let n = 120;
        let base1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let base2: Vec<f64> = (0..n).map(|i| (i as f64 * 0.8 + 2.0).cos()).collect();
        let x = matrix(
            vec![
                ("a1", base1.clone()),
                ("a2", base1.iter().map(|v| -2.0 * v).collect()), // |rho| = 1
                ("b1", base2.clone()),
                ("b2", base2.iter().map(|v| 3.0 * v + 1.0).collect()),
            ],
            vec![0; n],
        );
        let clusters = cluster_features(&x, 0.5).unwrap();
        assert_eq!(clusters["a1"], clusters["a2"]);
        assert_eq!(clusters["b1"], clusters["b2"]);
        assert_ne!(clusters["a1"], clusters["b1"]);
        let distinct: std::collections::BTreeSet<usize> = clusters.values().copied().collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn independent_features_stay_singletons_under_small_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let cols: Vec<(String, Vec<f64>)> = (0..12)
            .map(|j| {
                (
                    format!("f{j}"),
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let named: Vec<(&str, Vec<f64>)> =
            cols.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        let x = matrix(named, vec![0; n]);
        let clusters = cluster_features(&x, 0.05).unwrap();
        let distinct: std::collections::BTreeSet<usize> = clusters.values().copied().collect();
        assert_eq!(distinct.len(), 12);
    }

    #[test]
    fn duplicated_column_shares_cluster() {
        let n = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = matrix(
            vec![
                ("orig", base.clone()),
                ("twin", base.clone()),
                ("noise", other),
            ],
            vec![0; n],
        );
        let clusters = cluster_features(&x, 0.3).unwrap();
        assert_eq!(clusters["orig"], clusters["twin"]);
        assert_ne!(clusters["orig"], clusters["noise"]);
    }

    /// Labeled data where one feature IS the label plus noise, others pure noise.
    fn informative_matrix(
        seed: u64,
        n: usize,
        n_noise: usize,
        duplicate_informative: bool,
    ) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < 0.4) as u8).collect();
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        let informative: Vec<f64> = labels
            .iter()
            .map(|&l| l as f64 + rng.gen_range(-0.2..0.2))
            .collect();
        cols.push(("label_leak".to_string(), informative.clone()));
        if duplicate_informative {
            let twin: Vec<f64> = informative
                .iter()
                .map(|v| v + rng.gen_range(-0.02..0.02))
                .collect();
            cols.push(("label_leak_twin".to_string(), twin));
        }
        for j in 0..n_noise {
            cols.push((
                format!("noise{j}"),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
        }
        let named: Vec<(&str, Vec<f64>)> =
            cols.iter().map(|(nm, v)| (nm.as_str(), v.clone())).collect();
        matrix(named, labels)
    }

    fn quick_hp(seed: u64) -> ForestHyperParams {
        ForestHyperParams {
            n_trees: 20,
            min_samples_split: 5,
            max_features: None,
            class_weight_pos: 1.0,
            neg_subsample_ratio: 10.0,
            seed,
        }
    }

    #[test]
    fn importance_separates_signal_from_noise() {
        let train = informative_matrix(1, 400, 6, false);
        let val = informative_matrix(2, 400, 6, false);
        let model = train_forest(&train, &quick_hp(3)).unwrap();
        let imp = permutation_importance(&model, &val, 3, 7).unwrap();
        assert!(imp["label_leak"] > 0.3, "{}", imp["label_leak"]);
        for j in 0..6 {
            let v = imp[&format!("noise{j}")];
            assert!(v.abs() < 0.02, "noise{j} importance {v}");
        }
    }

    #[test]
    fn duplicated_informative_columns_mask_each_other() {
        let train_solo = informative_matrix(1, 400, 6, false);
        let val_solo = informative_matrix(2, 400, 6, false);
        let model_solo = train_forest(&train_solo, &quick_hp(3)).unwrap();
        let solo = permutation_importance(&model_solo, &val_solo, 3, 7).unwrap()["label_leak"];

        let train_dup = informative_matrix(1, 400, 6, true);
        let val_dup = informative_matrix(2, 400, 6, true);
        let model_dup = train_forest(&train_dup, &quick_hp(3)).unwrap();
        let imp = permutation_importance(&model_dup, &val_dup, 3, 7).unwrap();
        assert!(imp["label_leak"] < solo);
        assert!(imp["label_leak_twin"] < solo);
    }

    fn canon(names: &[String]) -> BTreeMap<String, usize> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect()
    }

    #[test]
    fn eliminate_drops_bottom_decile() {
        let names: Vec<String> = (0..100).map(|i| format!("f{i:03}")).collect();
        let importances: BTreeMap<String, f64> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as f64))
            .collect();
        // Every feature its own cluster: protection never triggers.
        let clusters: BTreeMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let out = eliminate(&names, &importances, &clusters, &canon(&names));
        assert_eq!(out.len(), 90);
        for i in 0..10 {
            assert!(!out.contains(&format!("f{i:03}")));
        }
    }

    #[test]
    fn eliminate_protects_fully_covered_cluster() {
        // 30 features; one 3-feature cluster sits entirely in the bottom decile.
        let names: Vec<String> = (0..30).map(|i| format!("f{i:02}")).collect();
        let mut importances: BTreeMap<String, f64> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), 10.0 + i as f64))
            .collect();
        importances.insert("f00".into(), 0.1);
        importances.insert("f01".into(), 0.2);
        importances.insert("f02".into(), 0.3);
        let mut clusters: BTreeMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), 100 + i))
            .collect();
        clusters.insert("f00".into(), 1);
        clusters.insert("f01".into(), 1);
        clusters.insert("f02".into(), 1);
        let out = eliminate(&names, &importances, &clusters, &canon(&names));
        // floor(3.0) = 3 removals requested, but the best of the cluster stays.
        let cluster_left: Vec<&String> =
            out.iter().filter(|n| clusters[*n] == 1).collect();
        assert_eq!(cluster_left.len(), 1);
        assert_eq!(cluster_left[0], "f02");
        assert_eq!(out.len(), 28);
    }

    #[test]
    fn eleven_features_remove_exactly_one() {
        let names: Vec<String> = (0..11).map(|i| format!("f{i:02}")).collect();
        let importances: BTreeMap<String, f64> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as f64))
            .collect();
        let clusters: BTreeMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let out = eliminate(&names, &importances, &clusters, &canon(&names));
        assert_eq!(out.len(), 10);
        assert!(!out.contains(&"f00".to_string()));
    }

    #[test]
    fn selection_loop_descends_to_ten() {
        let train = informative_matrix(31, 300, 20, false);
        let val = informative_matrix(32, 300, 20, false);
        let folds = vec![(train, val)];
        let outcome = run_selection(&folds, &quick_hp(5), 0.5, 2).unwrap();
        let trace = &outcome.traces[0];
        let sizes: Vec<usize> = trace
            .iterations
            .iter()
            .map(|r| r.surviving_features.len())
            .collect();
        assert_eq!(*sizes.last().unwrap(), 10);
        for w in sizes.windows(2) {
            assert!(w[1] < w[0], "sizes must strictly decrease: {sizes:?}");
        }
        assert_eq!(outcome.curve.len(), sizes.len());
        // The planted feature survives to the end.
        assert!(trace.iterations.last().unwrap().surviving_features.contains(&"label_leak".to_string()));
    }

    #[test]
    fn source_prune_switch() {
        let mut sets = vec![
            vec![
                "sampen_pos60_w30_smoothed".to_string(),
                "katzfd_pos60_w10_smoothed".to_string(),
                "sampen_pos30_w10_raw".to_string(),
                "vent_pos60_w10".to_string(),
            ],
            vec![
                "sampen_pos60_w30_smoothed".to_string(),
                "vent_pos55_w10".to_string(),
            ],
        ];
        assert!(prune_raw_source(&mut sets));
        assert!(!sets[0].contains(&"sampen_pos30_w10_raw".to_string()));
        assert!(sets[0].contains(&"vent_pos60_w10".to_string()));
    }
}
