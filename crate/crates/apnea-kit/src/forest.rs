//! From-scratch random-forest classifier: weighted-Gini trees over bootstrap
//! resamples with negative downsampling, leaf-frequency probabilities, a
//! versioned JSON model file, and the threshold-only SpO2 detector.

use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::featurize::{spo2_drop, FeatureMatrix, SPO2_HORIZON_S};
use crate::recording::RecordingBundle;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Internal {
        feature_index: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        positive_weight: f64,
        total_weight: f64,
    },
}

impl TreeNode {
    pub fn predict(&self, row: &[f32]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Internal {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    node = if (row[*feature_index] as f64) <= *threshold {
                        left
                    } else {
                        right
                    };
                }
                TreeNode::Leaf {
                    positive_weight,
                    total_weight,
                } => return positive_weight / total_weight,
            }
        }
    }

    /// Nested-array encoding: leaf = [pos_weight, total_weight],
    /// internal = [feature_index, threshold, left, right].
    fn to_value(&self) -> Value {
        match self {
            TreeNode::Leaf {
                positive_weight,
                total_weight,
            } => serde_json::json!([positive_weight, total_weight]),
            TreeNode::Internal {
                feature_index,
                threshold,
                left,
                right,
            } => serde_json::json!([feature_index, threshold, left.to_value(), right.to_value()]),
        }
    }

    fn from_value(v: &Value) -> Option<TreeNode> {
        let arr = v.as_array()?;
        match arr.len() {
            2 => Some(TreeNode::Leaf {
                positive_weight: arr[0].as_f64()?,
                total_weight: arr[1].as_f64()?,
            }),
            4 => Some(TreeNode::Internal {
                feature_index: arr[0].as_u64()? as usize,
                threshold: arr[1].as_f64()?,
                left: Box::new(TreeNode::from_value(&arr[2])?),
                right: Box::new(TreeNode::from_value(&arr[3])?),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestHyperParams {
    pub n_trees: usize,
    pub min_samples_split: usize,
    /// Candidate features per split; `None` means `round(sqrt(dim))`.
    pub max_features: Option<usize>,
    pub class_weight_pos: f64,
    /// Negatives kept per positive before bootstrapping.
    pub neg_subsample_ratio: f64,
    pub seed: u64,
}

impl Default for ForestHyperParams {
    fn default() -> Self {
        ForestHyperParams {
            n_trees: 300,
            min_samples_split: 2,
            max_features: None,
            class_weight_pos: 1.0,
            neg_subsample_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<TreeNode>,
    pub registry: Vec<String>,
    pub hyperparams: ForestHyperParams,
    pub decision_threshold: f64,
    pub i_positive_predictions: usize,
    /// Recording ids whose rows were available to training (leakage audit).
    pub provenance_recordings: Vec<String>,
}

/// Threshold candidates for one feature at one node: midpoints of sorted
/// distinct values, capped at 64 quantile-spaced picks for large nodes.
const MAX_SPLIT_CANDIDATES: usize = 64;

/// Grows trees over canonical row ranks: `order[rank]` maps a rank to a
/// matrix row, so index vectors stay meaningful under any incoming row
/// permutation.
struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    /// Canonical order; rank -> matrix row.
    order: &'a [u32],
    /// Indexed by rank.
    weights: &'a [f64],
    /// Indexed by rank.
    labels: &'a [u8],
    min_samples_split: usize,
    max_features: usize,
}

impl TreeBuilder<'_> {
    fn row(&self, rank: u32) -> &[f32] {
        self.x.row(self.order[rank as usize] as usize)
    }

    fn grow(&self, indices: &mut [u32], rng: &mut ChaCha8Rng) -> TreeNode {
        let (w_pos, w_tot) = self.node_weights(indices);
        let n = indices.len();
        if n < self.min_samples_split || w_pos == 0.0 || w_pos == w_tot {
            return TreeNode::Leaf {
                positive_weight: w_pos,
                total_weight: w_tot,
            };
        }
        let dim = self.x.n_cols();
        let mut chosen: Vec<usize> = index_sample(rng, dim, self.max_features.min(dim)).into_vec();
        // Candidate order must not matter: ties resolve by feature index.
        chosen.sort_unstable();

        let parent_impurity = gini(w_pos, w_tot);
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        let mut scratch: Vec<(f32, f64, f64)> = Vec::with_capacity(n); // value, w_pos, w
        for &feature in &chosen {
            scratch.clear();
            for &i in indices.iter() {
                let v = self.row(i)[feature];
                let w = self.weights[i as usize];
                let wp = if self.labels[i as usize] != 0 { w } else { 0.0 };
                scratch.push((v, wp, w));
            }
            scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            // Boundaries between distinct consecutive values.
            let mut boundaries: Vec<usize> = Vec::new();
            for i in 1..n {
                if scratch[i].0 != scratch[i - 1].0 {
                    boundaries.push(i);
                }
            }
            if boundaries.is_empty() {
                continue;
            }
            let picked: Vec<usize> = if boundaries.len() > MAX_SPLIT_CANDIDATES {
                (0..MAX_SPLIT_CANDIDATES)
                    .map(|k| boundaries[(k + 1) * boundaries.len() / (MAX_SPLIT_CANDIDATES + 1)])
                    .collect()
            } else {
                boundaries
            };
            let mut cum_pos = 0.0;
            let mut cum_w = 0.0;
            let mut at = 0usize;
            for &b in &picked {
                while at < b {
                    cum_pos += scratch[at].1;
                    cum_w += scratch[at].2;
                    at += 1;
                }
                let threshold = (scratch[b - 1].0 as f64 + scratch[b].0 as f64) / 2.0;
                let (wl_pos, wl) = (cum_pos, cum_w);
                let (wr_pos, wr) = (w_pos - cum_pos, w_tot - cum_w);
                if wl <= 0.0 || wr <= 0.0 {
                    continue;
                }
                let gain = parent_impurity
                    - (wl / w_tot) * gini(wl_pos, wl)
                    - (wr / w_tot) * gini(wr_pos, wr);
                let better = match best {
                    None => gain > 1e-15,
                    Some((bg, bf, bt)) => {
                        gain > bg + 1e-15
                            || ((gain - bg).abs() <= 1e-15
                                && (feature < bf || (feature == bf && threshold < bt)))
                    }
                };
                if better {
                    best = Some((gain, feature, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf {
                positive_weight: w_pos,
                total_weight: w_tot,
            };
        };
        // Partition in place: left = value <= threshold.
        let mut split = 0usize;
        for i in 0..indices.len() {
            if (self.row(indices[i])[feature] as f64) <= threshold {
                indices.swap(i, split);
                split += 1;
            }
        }
        // The swap above scrambles order; restore determinism for downstream
        // value gathering by sorting each side by row index.
        let (left_idx, right_idx) = indices.split_at_mut(split);
        left_idx.sort_unstable();
        right_idx.sort_unstable();
        let left = self.grow(left_idx, rng);
        let right = self.grow(right_idx, rng);
        TreeNode::Internal {
            feature_index: feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    fn node_weights(&self, indices: &[u32]) -> (f64, f64) {
        let mut pos = 0.0;
        let mut tot = 0.0;
        for &i in indices {
            let w = self.weights[i as usize];
            tot += w;
            if self.labels[i as usize] != 0 {
                pos += w;
            }
        }
        (pos, tot)
    }
}

fn gini(w_pos: f64, w_tot: f64) -> f64 {
    let p = w_pos / w_tot;
    let q = 1.0 - p;
    1.0 - p * p - q * q
}

fn tree_seed(base: u64, tree_index: usize) -> u64 {
    // SplitMix64 step over (base, index) for independent per-tree streams.
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(tree_index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Canonical row order before any seeded resampling: by recording id, then
/// window start, then label. Training is therefore invariant to the row
/// order of the incoming matrix.
fn canonical_row_order(x: &FeatureMatrix) -> Vec<u32> {
    let mut order: Vec<u32> = (0..x.n_rows() as u32).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (a as usize, b as usize);
        x.group_name(a)
            .cmp(x.group_name(b))
            .then(x.window_start_s[a].cmp(&x.window_start_s[b]))
            .then(x.labels[a].cmp(&x.labels[b]))
    });
    order
}

/// Trains the ensemble: canonical row sort, seeded negative downsampling to
/// `neg_subsample_ratio x positives`, then one bootstrap + weighted-Gini
/// tree per seed stream. Deterministic for a fixed seed regardless of
/// scheduling.
pub fn train_forest(x: &FeatureMatrix, hp: &ForestHyperParams) -> Result<ForestModel> {
    if x.n_rows() == 0 {
        return Err(Error::DimensionMismatch("empty training matrix".into()));
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DimensionMismatch(
            "training matrix contains non-finite values".into(),
        ));
    }
    let n_pos = x.labels.iter().filter(|&&l| l != 0).count();
    let n_neg = x.n_rows() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "training labels are constant ({n_pos} positive / {n_neg} negative)"
        )));
    }

    let order = canonical_row_order(x);
    let labels_ranked: Vec<u8> = order.iter().map(|&i| x.labels[i as usize]).collect();
    // Ranks (positions in canonical order), not matrix rows.
    let positives: Vec<u32> = (0..order.len() as u32)
        .filter(|&r| labels_ranked[r as usize] != 0)
        .collect();
    let negatives: Vec<u32> = (0..order.len() as u32)
        .filter(|&r| labels_ranked[r as usize] == 0)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let keep_neg = ((hp.neg_subsample_ratio * n_pos as f64).round() as usize).clamp(1, n_neg);
    let mut pool: Vec<u32> = positives.clone();
    if keep_neg >= n_neg {
        pool.extend_from_slice(&negatives);
    } else {
        let mut picks: Vec<usize> = index_sample(&mut rng, n_neg, keep_neg).into_vec();
        picks.sort_unstable();
        pool.extend(picks.into_iter().map(|p| negatives[p]));
    }
    pool.sort_unstable();

    let weights_ranked: Vec<f64> = labels_ranked
        .iter()
        .map(|&l| if l != 0 { hp.class_weight_pos } else { 1.0 })
        .collect();
    let dim = x.n_cols();
    let max_features = hp
        .max_features
        .unwrap_or(((dim as f64).sqrt().round() as usize).max(1));
    let builder = TreeBuilder {
        x,
        order: &order,
        weights: &weights_ranked,
        labels: &labels_ranked,
        min_samples_split: hp.min_samples_split.max(2),
        max_features,
    };

    let trees: Vec<TreeNode> = (0..hp.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(hp.seed, t));
            let mut boot: Vec<u32> = (0..pool.len())
                .map(|_| pool[rng.gen_range(0..pool.len())])
                .collect();
            builder.grow(&mut boot, &mut rng)
        })
        .collect();

    Ok(ForestModel {
        trees,
        registry: x.feature_names.clone(),
        hyperparams: hp.clone(),
        decision_threshold: 0.5,
        i_positive_predictions: 1,
        provenance_recordings: x.group_names.clone(),
    })
}

/// Mean over trees of the leaf positive-weight fraction, one value per row.
pub fn predict_proba(model: &ForestModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if model.registry != x.feature_names {
        let first_bad = model
            .registry
            .iter()
            .zip(x.feature_names.iter())
            .position(|(a, b)| a != b)
            .map(|i| format!("column {} is '{}', model expects '{}'", i, x.feature_names[i], model.registry[i]))
            .unwrap_or_else(|| {
                format!(
                    "matrix has {} columns, model expects {}",
                    x.feature_names.len(),
                    model.registry.len()
                )
            });
        return Err(Error::DimensionMismatch(first_bad));
    }
    let n_trees = model.trees.len() as f64;
    Ok((0..x.n_rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            model.trees.iter().map(|t| t.predict(row)).sum::<f64>() / n_trees
        })
        .collect())
}

/// The SpO2-only detector: a second is positive iff the desaturation drop
/// around it reaches the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spo2OnlyModel {
    pub desat_threshold_pct: f64,
}

/// Per-second binary output over the respiration timeline; seconds without
/// SpO2 coverage are negative.
pub fn spo2_only_predict(model: &Spo2OnlyModel, bundle: &RecordingBundle) -> Result<(i64, Vec<u8>)> {
    let spo2 = bundle
        .spo2
        .as_ref()
        .ok_or_else(|| Error::MissingSignal(format!("{}: no spo2 trace", bundle.recording_id)))?;
    let t0 = (bundle.respiration.start_s() - 1e-9).ceil() as i64;
    let t1 = (bundle.respiration.end_s() + 1e-9).floor() as i64;
    let out: Vec<u8> = (t0..t1)
        .map(|t| match spo2_drop(spo2, t as f64, SPO2_HORIZON_S) {
            Ok(d) => (d >= model.desat_threshold_pct) as u8,
            Err(_) => 0,
        })
        .collect();
    Ok((t0, out))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    registry: Vec<String>,
    hyperparams: ForestHyperParams,
    decision_threshold: f64,
    i_positive_predictions: usize,
    provenance_recordings: Vec<String>,
    trees: Vec<Value>,
}

pub fn save_model(model: &ForestModel, path: &Path) -> Result<()> {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        registry: model.registry.clone(),
        hyperparams: model.hyperparams.clone(),
        decision_threshold: model.decision_threshold,
        i_positive_predictions: model.i_positive_predictions,
        provenance_recordings: model.provenance_recordings.clone(),
        trees: model.trees.iter().map(|t| t.to_value()).collect(),
    };
    crate::recording::io::write_json_atomic(path, &file)
}

pub fn load_model(path: &Path) -> Result<ForestModel> {
    let corrupt = |detail: String| Error::CorruptModel {
        path: path.to_path_buf(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("parse failure: {e}")))?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(corrupt(format!(
            "schema version {} unsupported (expected {MODEL_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let trees: Vec<TreeNode> = file
        .trees
        .iter()
        .map(TreeNode::from_value)
        .collect::<Option<_>>()
        .ok_or_else(|| corrupt("malformed tree encoding".into()))?;
    if trees.is_empty() {
        return Err(corrupt("model has no trees".into()));
    }
    Ok(ForestModel {
        trees,
        registry: file.registry,
        hyperparams: file.hyperparams,
        decision_threshold: file.decision_threshold,
        i_positive_predictions: file.i_positive_predictions,
        provenance_recordings: file.provenance_recordings,
    })
}
