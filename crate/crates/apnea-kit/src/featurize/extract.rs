//! Sliding-window feature extraction.
//!
//! A row is produced for every window start second; each feature reads a
//! lookback slice anchored inside that window. Distinct specs that share
//! (family, width, source) read the same rolling series at different
//! offsets, so each series is computed once per recording and indexed per
//! row. All in-window values go through the public kernels.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurize::registry::{FeatureFamily, FeatureSpec, SignalSource, LABEL_ANCHOR_S};
use crate::featurize::{
    katz_fd, sample_entropy, spo2_drop, spo2_drop_robust, ventilation, window_std, SAMPEN_M,
    SAMPEN_R_FRACTION, SPO2_HORIZON_S, SPO2_MAX_LAG_S,
};
use crate::recording::{moving_average, normalize_respiration, RecordingBundle, SignalTrace};

/// Windows x features, with labels and per-row provenance. Values are stored
/// as f32: kernels compute in f64 and the rounding is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub feature_names: Vec<String>,
    pub values: Vec<f32>, // row-major, n_rows * n_cols
    pub labels: Vec<u8>,
    /// Absolute second of each row's window start.
    pub window_start_s: Vec<i64>,
    /// Per-row recording id, as an index into `group_names`.
    pub groups: Vec<u32>,
    pub group_names: Vec<String>,
    /// Rows whose SpO2 feature was imputed to 0 because the trace had no
    /// coverage at the anchor.
    pub spo2_imputed: Vec<bool>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.n_cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.values[i * self.n_cols() + j] as f64)
            .collect()
    }

    pub fn group_name(&self, row: usize) -> &str {
        &self.group_names[self.groups[row] as usize]
    }

    /// New matrix keeping the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.col_index(n)
                    .ok_or_else(|| Error::DimensionMismatch(format!("no column '{n}'")))
            })
            .collect::<Result<_>>()?;
        let c = self.n_cols();
        let mut values = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            let row = &self.values[i * c..(i + 1) * c];
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(FeatureMatrix {
            feature_names: names.to_vec(),
            values,
            labels: self.labels.clone(),
            window_start_s: self.window_start_s.clone(),
            groups: self.groups.clone(),
            group_names: self.group_names.clone(),
            spo2_imputed: self.spo2_imputed.clone(),
        })
    }

    /// Rows `0, stride, 2*stride, ...` as a new matrix.
    pub fn rows_at_stride(&self, stride: usize) -> FeatureMatrix {
        let stride = stride.max(1);
        let keep: Vec<usize> = (0..self.n_rows()).step_by(stride).collect();
        self.take_rows(&keep)
    }

    pub fn take_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let c = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            values.extend_from_slice(&self.values[i * c..(i + 1) * c]);
        }
        FeatureMatrix {
            feature_names: self.feature_names.clone(),
            values,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            window_start_s: rows.iter().map(|&i| self.window_start_s[i]).collect(),
            groups: rows.iter().map(|&i| self.groups[i]).collect(),
            group_names: self.group_names.clone(),
            spo2_imputed: rows.iter().map(|&i| self.spo2_imputed[i]).collect(),
        }
    }

    /// Vertical concatenation; all parts must share the column list.
    pub fn stack(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::DimensionMismatch("stack of zero matrices".into()))?;
        let names = first.feature_names.clone();
        let mut out = FeatureMatrix {
            feature_names: names.clone(),
            values: Vec::new(),
            labels: Vec::new(),
            window_start_s: Vec::new(),
            groups: Vec::new(),
            group_names: Vec::new(),
            spo2_imputed: Vec::new(),
        };
        for part in parts {
            if part.feature_names != names {
                return Err(Error::DimensionMismatch(
                    "stacked matrices disagree on columns".into(),
                ));
            }
            let base = out.group_names.len() as u32;
            out.group_names.extend(part.group_names.iter().cloned());
            out.values.extend_from_slice(&part.values);
            out.labels.extend_from_slice(&part.labels);
            out.window_start_s.extend_from_slice(&part.window_start_s);
            out.groups.extend(part.groups.iter().map(|g| g + base));
            out.spo2_imputed.extend_from_slice(&part.spo2_imputed);
        }
        Ok(out)
    }
}

/// Rolling series shared by all specs with the same (family, width, source).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct SeriesKey {
    family: FeatureFamily,
    width_s: u32,
    source: Option<SignalSource>,
}

struct Series {
    anchor0: i64,
    values: Vec<f64>,
}

impl Series {
    fn at(&self, anchor: i64) -> f64 {
        self.values[(anchor - self.anchor0) as usize]
    }
}

fn resp_slice<'a>(trace: &'a SignalTrace, t0: f64, t1: f64) -> &'a [f64] {
    let i0 = trace.index_at_or_after(t0);
    let i1 = trace.index_at_or_after(t1);
    &trace.samples()[i0..i1]
}

fn compute_series(
    key: SeriesKey,
    raw: &SignalTrace,
    smoothed: &SignalTrace,
    anchor0: i64,
    anchor1: i64,
) -> Series {
    let trace = match key.source {
        Some(SignalSource::Smoothed) => smoothed,
        _ => raw,
    };
    let width = key.width_s as f64;
    let values: Vec<f64> = (anchor0..=anchor1)
        .into_par_iter()
        .map(|a| {
            let t1 = a as f64;
            let seq = resp_slice(trace, t1 - width, t1);
            match key.family {
                FeatureFamily::Std => window_std(seq),
                FeatureFamily::Ventilation => ventilation(seq),
                FeatureFamily::KatzFd => katz_fd(seq),
                FeatureFamily::SampleEntropy => {
                    let std = window_std(seq);
                    if std < 1e-12 {
                        0.0 // perfectly regular
                    } else {
                        sample_entropy(seq, SAMPEN_M, SAMPEN_R_FRACTION * std)
                            .expect("slice length fixed by registry geometry")
                    }
                }
                _ => unreachable!("not an in-window family"),
            }
        })
        .collect();
    Series { anchor0, values }
}

/// Cumulative sums over a trace for O(1) long-reference window moments.
struct PrefixMoments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    pos_diff: Vec<f64>,
}

impl PrefixMoments {
    fn new(trace: &SignalTrace) -> Self {
        let x = trace.samples();
        let n = x.len();
        let mut sum = Vec::with_capacity(n + 1);
        let mut sum_sq = Vec::with_capacity(n + 1);
        let mut pos_diff = Vec::with_capacity(n + 1);
        sum.push(0.0);
        sum_sq.push(0.0);
        pos_diff.push(0.0);
        let (mut s, mut sq, mut pd) = (0.0, 0.0, 0.0);
        for i in 0..n {
            s += x[i];
            sq += x[i] * x[i];
            if i > 0 {
                pd += (x[i] - x[i - 1]).max(0.0);
            }
            sum.push(s);
            sum_sq.push(sq);
            pos_diff.push(pd);
        }
        Self {
            sum,
            sum_sq,
            pos_diff,
        }
    }

    fn std(&self, i0: usize, i1: usize) -> f64 {
        let n = (i1 - i0) as f64;
        let mean = (self.sum[i1] - self.sum[i0]) / n;
        let var = (self.sum_sq[i1] - self.sum_sq[i0]) / n - mean * mean;
        var.max(0.0).sqrt()
    }

    fn vent(&self, i0: usize, i1: usize) -> f64 {
        // Positive first differences interior to [i0, i1).
        if i1 > i0 + 1 {
            self.pos_diff[i1] - self.pos_diff[i0 + 1]
        } else {
            0.0
        }
    }
}

/// Extracts the feature matrix for one recording.
///
/// One row per window start (`step_s` apart); the row label is 1 iff the
/// window's anchor second (`start + 60`) lies inside any apnea/hypopnea
/// annotation. SpO2 features are imputed to 0 (and the row flagged) where
/// the trace has a coverage hole; a registry that asks for SpO2 on a bundle
/// without the signal is an error.
pub fn extract_windows(
    bundle: &RecordingBundle,
    registry: &[FeatureSpec],
    step_s: u32,
    window_s: u32,
) -> Result<FeatureMatrix> {
    if step_s == 0 {
        return Err(Error::InvalidConfig("step_s must be >= 1".into()));
    }
    let resp = &bundle.respiration;
    if resp.duration_s() + 1e-9 < window_s as f64 {
        return Err(Error::DegenerateInput(format!(
            "recording shorter ({:.1} s) than the {window_s} s window",
            resp.duration_s()
        )));
    }
    let needs_spo2 = registry.iter().any(|s| {
        matches!(
            s.family,
            FeatureFamily::Spo2Drop | FeatureFamily::Spo2DropRobust
        )
    });
    if needs_spo2 && bundle.spo2.is_none() {
        return Err(Error::MissingSignal(format!(
            "{}: registry includes an SpO2 feature but the bundle has no spo2 trace",
            bundle.recording_id
        )));
    }

    let raw = normalize_respiration(resp)?;
    let smoothed = moving_average(&raw, 1.2);

    let s0 = (resp.start_s() - 1e-9).ceil() as i64;
    let last = (resp.end_s() + 1e-9 - window_s as f64).floor() as i64;
    let starts: Vec<i64> = (s0..=last).step_by(step_s as usize).collect();
    let n_rows = starts.len();

    // Rolling series for the in-window families present in the registry.
    let mut series: HashMap<SeriesKey, Series> = HashMap::new();
    let mut keys: Vec<(SeriesKey, i64, i64)> = Vec::new();
    for spec in registry {
        if let (Some(pos), family) = (spec.position_s, spec.family) {
            let key = SeriesKey {
                family,
                width_s: spec.width_s,
                source: spec.source,
            };
            let a0 = starts[0] + pos as i64;
            let a1 = starts[n_rows - 1] + pos as i64;
            match keys.iter_mut().find(|(k, _, _)| *k == key) {
                Some((_, lo, hi)) => {
                    *lo = (*lo).min(a0);
                    *hi = (*hi).max(a1);
                }
                None => keys.push((key, a0, a1)),
            }
        }
    }
    for (key, a0, a1) in keys {
        series.insert(key, compute_series(key, &raw, &smoothed, a0, a1));
    }

    let prefix = PrefixMoments::new(&raw);
    let full_std = prefix.std(0, raw.len());
    let full_vent = prefix.vent(0, raw.len());

    let spo2_cols: Vec<(usize, bool)> = registry
        .iter()
        .enumerate()
        .filter_map(|(j, s)| match s.family {
            FeatureFamily::Spo2Drop => Some((j, false)),
            FeatureFamily::Spo2DropRobust => Some((j, true)),
            _ => None,
        })
        .collect();

    let n_cols = registry.len();
    let mut values = vec![0f32; n_rows * n_cols];
    let mut spo2_imputed = vec![false; n_rows];
    let mut labels = vec![0u8; n_rows];

    let apnea_events: Vec<(f64, f64)> = bundle
        .apnea_events()
        .map(|e| (e.start_s, e.end_s()))
        .collect();

    for (i, &start) in starts.iter().enumerate() {
        let row = &mut values[i * n_cols..(i + 1) * n_cols];
        let window_end = start + window_s as i64;
        for (j, spec) in registry.iter().enumerate() {
            row[j] = match spec.family {
                FeatureFamily::Std
                | FeatureFamily::Ventilation
                | FeatureFamily::SampleEntropy
                | FeatureFamily::KatzFd => {
                    let key = SeriesKey {
                        family: spec.family,
                        width_s: spec.width_s,
                        source: spec.source,
                    };
                    let anchor = start + spec.position_s.expect("in-window spec") as i64;
                    series[&key].at(anchor) as f32
                }
                FeatureFamily::LongRefStd | FeatureFamily::LongRefVent => {
                    let t1 = window_end as f64;
                    let t0 = t1 - spec.width_s as f64;
                    let i1 = raw.index_at_or_after(t1);
                    let i0 = raw.index_at_or_after(t0);
                    let history_s = (i1 - i0) as f64 / raw.rate_hz();
                    if history_s + 1e-9 >= 90.0 {
                        match spec.family {
                            FeatureFamily::LongRefStd => prefix.std(i0, i1) as f32,
                            _ => prefix.vent(i0, i1) as f32,
                        }
                    } else {
                        // Not enough history yet: recording-level value.
                        match spec.family {
                            FeatureFamily::LongRefStd => full_std as f32,
                            _ => full_vent as f32,
                        }
                    }
                }
                FeatureFamily::Spo2Drop | FeatureFamily::Spo2DropRobust => 0.0, // below
            };
        }
        if !spo2_cols.is_empty() {
            let spo2 = bundle.spo2.as_ref().expect("checked above");
            let anchor = (start + LABEL_ANCHOR_S as i64) as f64;
            for &(j, robust) in &spo2_cols {
                let value = if robust {
                    spo2_drop_robust(spo2, anchor, SPO2_HORIZON_S, SPO2_MAX_LAG_S)
                } else {
                    spo2_drop(spo2, anchor, SPO2_HORIZON_S)
                };
                row[j] = match value {
                    Ok(v) => v as f32,
                    Err(Error::MissingSignal(_)) => {
                        spo2_imputed[i] = true;
                        0.0
                    }
                    Err(e) => return Err(e),
                };
            }
        }
        let anchor_t = (start + LABEL_ANCHOR_S as i64) as f64;
        labels[i] = apnea_events
            .iter()
            .any(|&(s, e)| anchor_t >= s && anchor_t < e) as u8;
    }

    Ok(FeatureMatrix {
        feature_names: registry.iter().map(|s| s.name()).collect(),
        values,
        labels,
        window_start_s: starts,
        groups: vec![0; n_rows],
        group_names: vec![bundle.recording_id.clone()],
        spo2_imputed,
    })
}

// ---------------------------------------------------------------------------
// Persistence: CSV triplet (features/labels/groups) and a compact binary
// cache used by run orchestration.
// ---------------------------------------------------------------------------

pub fn write_feature_csvs(dir: &Path, matrix: &FeatureMatrix) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feats = dir.join("features.csv");
    let mut out = String::new();
    out.push_str("t_s");
    for name in &matrix.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..matrix.n_rows() {
        out.push_str(&matrix.window_start_s[i].to_string());
        for v in matrix.row(i) {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    std::fs::write(&feats, out).map_err(|e| Error::io(&feats, e))?;

    let labels = dir.join("labels.csv");
    let mut out = String::from("t_s,label\n");
    for i in 0..matrix.n_rows() {
        out.push_str(&format!(
            "{},{}\n",
            matrix.window_start_s[i], matrix.labels[i]
        ));
    }
    std::fs::write(&labels, out).map_err(|e| Error::io(&labels, e))?;

    let groups = dir.join("groups.csv");
    let mut out = String::from("t_s,group\n");
    for i in 0..matrix.n_rows() {
        out.push_str(&format!(
            "{},{}\n",
            matrix.window_start_s[i],
            matrix.group_name(i)
        ));
    }
    std::fs::write(&groups, out).map_err(|e| Error::io(&groups, e))?;
    Ok(())
}

const CACHE_MAGIC: &[u8; 8] = b"AKFCACH1";

/// Binary per-recording cache: magic, JSON header line, then raw row-major
/// f32 little-endian values.
pub fn write_cache(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Header<'a> {
        n_rows: usize,
        n_cols: usize,
        feature_names: &'a [String],
        window_start_s: &'a [i64],
        labels: &'a [u8],
        groups: &'a [u32],
        group_names: &'a [String],
        spo2_imputed: &'a [bool],
    }
    let header = serde_json::to_string(&Header {
        n_rows: matrix.n_rows(),
        n_cols: matrix.n_cols(),
        feature_names: &matrix.feature_names,
        window_start_s: &matrix.window_start_s,
        labels: &matrix.labels,
        groups: &matrix.groups,
        group_names: &matrix.group_names,
        spo2_imputed: &matrix.spo2_imputed,
    })
    .expect("serializable header");
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CACHE_MAGIC).map_err(|e| Error::io(&tmp, e))?;
        w.write_all(header.as_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        for v in &matrix.values {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<FeatureMatrix> {
    #[derive(serde::Deserialize)]
    struct Header {
        n_rows: usize,
        n_cols: usize,
        feature_names: Vec<String>,
        window_start_s: Vec<i64>,
        labels: Vec<u8>,
        groups: Vec<u32>,
        group_names: Vec<String>,
        spo2_imputed: Vec<bool>,
    }
    let bad = |detail: &str| Error::CorruptModel {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("bad cache magic"));
    }
    let nl = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + nl]).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[8 + nl + 1..];
    let expect = header.n_rows * header.n_cols * 4;
    if data.len() != expect {
        return Err(bad(&format!(
            "value block is {} bytes, expected {expect}",
            data.len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FeatureMatrix {
        feature_names: header.feature_names,
        values,
        labels: header.labels,
        window_start_s: header.window_start_s,
        groups: header.groups,
        group_names: header.group_names,
        spo2_imputed: header.spo2_imputed,
    })
}
