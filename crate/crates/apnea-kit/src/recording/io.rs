//! Bundle directory layout:
//!
//! ```text
//! <bundle>/
//!   respiration.csv   t_s,value   (required)
//!   spo2.csv          t_s,value   (optional, percent in [0,100])
//!   airflow.csv       t_s,value   (optional)
//!   hypnogram.csv     epoch_index,stage   stage in {W,N1,N2,N3,R,?}
//!   annotations.json  [{start_s, duration_s, kind}]
//!   meta.json         {subject_id, recording_id, notes}
//! ```
//!
//! Readers are strict: malformed rows and unknown kinds fail with the file
//! and 1-based line number. Signals are resampled to canonical rates at load
//! (respiration and airflow 10 Hz, SpO2 1 Hz) on a grid snapped to integer
//! multiples of the sample period, so feature geometry is deterministic.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recording::{
    EventAnnotation, EventList, Hypnogram, RecordingBundle, SignalTrace, SleepStage,
    AIRFLOW_RATE_HZ, MAX_GAP_S, RESPIRATION_RATE_HZ, SPO2_RATE_HZ,
};

#[derive(Debug, Serialize, Deserialize)]
pub struct BundleMeta {
    pub subject_id: String,
    pub recording_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

/// Reads a `t_s,value` CSV into (time, value) pairs. Times must be strictly
/// increasing; values may be NaN (treated as gaps downstream).
fn read_signal_rows(path: &Path) -> Result<Vec<(f64, f64)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut prev_t = f64::NEG_INFINITY;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        let lineno = idx + 1;
        if idx == 0 {
            if line != "t_s,value" {
                return Err(parse_err(path, lineno, "expected header 't_s,value'"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (t_str, v_str) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse_err(path, lineno, "expected exactly 2 fields")),
        };
        let t: f64 = t_str
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad t_s value '{t_str}'")))?;
        if !t.is_finite() {
            return Err(parse_err(path, lineno, "t_s must be finite"));
        }
        if t <= prev_t {
            return Err(parse_err(path, lineno, "t_s must be strictly increasing"));
        }
        prev_t = t;
        let v: f64 = v_str
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad value '{v_str}'")))?;
        rows.push((t, v));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(rows)
}

/// Resamples (time, value) rows onto a uniform grid at `rate_hz` by linear
/// interpolation. Grid points are integer multiples of the sample period.
/// Non-finite values are dropped first; any resulting hole wider than
/// [`MAX_GAP_S`] rejects the recording, shorter holes are bridged by the
/// interpolation. Leading/trailing non-finite values shrink the span.
pub fn resample_rows(rows: &[(f64, f64)], rate_hz: f64, name: &str) -> Result<SignalTrace> {
    let finite: Vec<(f64, f64)> = rows
        .iter()
        .copied()
        .filter(|(_, v)| v.is_finite())
        .collect();
    if finite.len() < 2 {
        return Err(Error::RecordingRejected(format!(
            "{name}: fewer than 2 finite samples"
        )));
    }
    // Typical spacing of the source stream, used to tell a dropped-sample gap
    // from nominal spacing.
    let mut deltas: Vec<f64> = finite.windows(2).map(|w| w[1].0 - w[0].0).collect();
    deltas.sort_by(f64::total_cmp);
    let nominal_dt = deltas[deltas.len() / 2];
    for w in finite.windows(2) {
        let hole = w[1].0 - w[0].0 - nominal_dt;
        if hole > MAX_GAP_S + 1e-6 {
            return Err(Error::RecordingRejected(format!(
                "{name}: {:.2} s gap at t={:.2} exceeds the {MAX_GAP_S} s fill limit",
                hole, w[0].0
            )));
        }
    }
    let t_first = finite[0].0;
    let t_last = finite[finite.len() - 1].0;
    let k0 = (t_first * rate_hz - 1e-6).ceil() as i64;
    let k1 = (t_last * rate_hz + 1e-6).floor() as i64;
    if k1 < k0 {
        return Err(Error::RecordingRejected(format!(
            "{name}: span too short to resample at {rate_hz} Hz"
        )));
    }
    let mut samples = Vec::with_capacity((k1 - k0 + 1) as usize);
    let mut j = 0usize;
    for k in k0..=k1 {
        let t = k as f64 / rate_hz;
        while j + 1 < finite.len() && finite[j + 1].0 <= t {
            j += 1;
        }
        let v = if j + 1 == finite.len() {
            finite[j].1
        } else {
            let (t0, v0) = finite[j];
            let (t1, v1) = finite[j + 1];
            if t <= t0 {
                v0
            } else {
                let frac = (t - t0) / (t1 - t0);
                v0 + (v1 - v0) * frac
            }
        };
        samples.push(v);
    }
    SignalTrace::new(samples, rate_hz, (k0 as f64 / rate_hz).max(0.0))
}

fn load_signal(dir: &Path, file: &str, rate_hz: f64) -> Result<Option<SignalTrace>> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(None);
    }
    let rows = read_signal_rows(&path)?;
    let trace = resample_rows(&rows, rate_hz, file)?;
    Ok(Some(trace))
}

fn stage_from_token(tok: &str) -> Option<SleepStage> {
    Some(match tok {
        "W" => SleepStage::Wake,
        "N1" => SleepStage::N1,
        "N2" => SleepStage::N2,
        "N3" => SleepStage::N3,
        "R" => SleepStage::Rem,
        "?" => SleepStage::Unknown,
        _ => return None,
    })
}

pub fn stage_token(stage: SleepStage) -> &'static str {
    match stage {
        SleepStage::Wake => "W",
        SleepStage::N1 => "N1",
        SleepStage::N2 => "N2",
        SleepStage::N3 => "N3",
        SleepStage::Rem => "R",
        SleepStage::Unknown => "?",
    }
}

fn load_hypnogram(dir: &Path) -> Result<Option<Hypnogram>> {
    let path = dir.join("hypnogram.csv");
    if !path.exists() {
        return Ok(None);
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let reader = BufReader::new(file);
    let mut stages = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let line = line.trim_end_matches('\r');
        let lineno = idx + 1;
        if idx == 0 {
            if line != "epoch_index,stage" {
                return Err(parse_err(&path, lineno, "expected header 'epoch_index,stage'"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (i_str, s_str) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse_err(&path, lineno, "expected exactly 2 fields")),
        };
        let epoch: usize = i_str
            .trim()
            .parse()
            .map_err(|_| parse_err(&path, lineno, format!("bad epoch_index '{i_str}'")))?;
        if epoch != stages.len() {
            return Err(parse_err(
                &path,
                lineno,
                format!("epoch_index {epoch} out of order, expected {}", stages.len()),
            ));
        }
        let stage = stage_from_token(s_str.trim())
            .ok_or_else(|| parse_err(&path, lineno, format!("unknown stage '{s_str}'")))?;
        stages.push(stage);
    }
    if stages.is_empty() {
        return Err(parse_err(&path, 1, "no epochs"));
    }
    Ok(Some(Hypnogram::new(30.0, stages)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    start_s: f64,
    duration_s: f64,
    kind: String,
}

fn kind_from_token(tok: &str) -> Option<crate::recording::EventKind> {
    use crate::recording::EventKind::*;
    Some(match tok {
        "obstructive_apnea" => ObstructiveApnea,
        "central_apnea" => CentralApnea,
        "mixed_apnea" => MixedApnea,
        "hypopnea" => Hypopnea,
        "arousal" => Arousal,
        _ => return None,
    })
}

pub fn kind_token(kind: crate::recording::EventKind) -> &'static str {
    use crate::recording::EventKind::*;
    match kind {
        ObstructiveApnea => "obstructive_apnea",
        CentralApnea => "central_apnea",
        MixedApnea => "mixed_apnea",
        Hypopnea => "hypopnea",
        Arousal => "arousal",
        Predicted => "predicted",
    }
}

/// Loads an annotation file (strict kinds, no "predicted").
pub fn load_annotations(path: &Path) -> Result<EventList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<AnnotationRow> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    let mut events = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let kind = kind_from_token(&row.kind)
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown kind '{}'", row.kind)))?;
        let ev = EventAnnotation::new(row.start_s, row.duration_s, kind)
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        events.push(ev);
    }
    Ok(events)
}

pub fn save_annotations(path: &Path, events: &EventList) -> Result<()> {
    let rows: Vec<AnnotationRow> = events
        .iter()
        .map(|e| AnnotationRow {
            start_s: e.start_s,
            duration_s: e.duration_s,
            kind: kind_token(e.kind).to_string(),
        })
        .collect();
    write_json_atomic(path, &rows)
}

/// Which annotation file backs the ground-truth labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// `annotations.json` (expert-scored, 4% rule).
    Expert4,
    /// `annotations.auto4.json` produced by the automatic scorer.
    Auto4,
    /// `annotations.auto3.json` produced by the automatic scorer.
    Auto3,
}

impl LabelSource {
    pub fn file_name(self) -> &'static str {
        match self {
            LabelSource::Expert4 => "annotations.json",
            LabelSource::Auto4 => "annotations.auto4.json",
            LabelSource::Auto3 => "annotations.auto3.json",
        }
    }
}

/// Loads one bundle directory. `label_source` picks the annotation file used
/// as ground truth; `annotations.json` absent means an unlabeled bundle
/// (prediction-only use) and yields an empty event list.
pub fn load_bundle_with_labels(dir: &Path, label_source: LabelSource) -> Result<RecordingBundle> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        file: meta_path.clone(),
        line: e.line(),
        detail: e.to_string(),
    })?;

    let respiration = load_signal(dir, "respiration.csv", RESPIRATION_RATE_HZ)?
        .ok_or_else(|| Error::MissingSignal(format!("{}: respiration.csv", dir.display())))?;
    let spo2 = load_signal(dir, "spo2.csv", SPO2_RATE_HZ)?;
    if let Some(tr) = &spo2 {
        if let Some(bad) = tr.samples().iter().find(|v| **v < 0.0 || **v > 100.0) {
            return Err(Error::RecordingRejected(format!(
                "{}: spo2 value {bad} outside [0, 100]",
                dir.display()
            )));
        }
    }
    let airflow = load_signal(dir, "airflow.csv", AIRFLOW_RATE_HZ)?;
    let hypnogram = load_hypnogram(dir)?;

    let ann_path = dir.join(label_source.file_name());
    let annotations = if ann_path.exists() {
        load_annotations(&ann_path)?
    } else if label_source == LabelSource::Expert4 {
        Vec::new()
    } else {
        return Err(Error::MissingSignal(format!(
            "{}: {} not found; run the auto-labeler first",
            dir.display(),
            label_source.file_name()
        )));
    };

    RecordingBundle::new(
        meta.subject_id,
        meta.recording_id,
        respiration,
        spo2,
        airflow,
        hypnogram,
        annotations,
    )
}

pub fn load_bundle(dir: &Path) -> Result<RecordingBundle> {
    load_bundle_with_labels(dir, LabelSource::Expert4)
}

/// Lists bundle subdirectories (those containing meta.json) in sorted order.
pub fn list_bundle_dirs(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(data_dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("meta.json").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::RecordingRejected(format!(
            "no bundle directories under {}",
            data_dir.display()
        )));
    }
    Ok(dirs)
}

pub fn write_signal_csv(path: &Path, trace: &SignalTrace) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "t_s,value").map_err(|e| Error::io(&tmp, e))?;
        for i in 0..trace.len() {
            writeln!(w, "{},{}", trace.time_of(i), trace.samples()[i])
                .map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_hypnogram_csv(path: &Path, hyp: &Hypnogram) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "epoch_index,stage").map_err(|e| Error::io(&tmp, e))?;
        for (i, s) in hyp.stages.iter().enumerate() {
            writeln!(w, "{},{}", i, stage_token(*s)).map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Serializes `value` as pretty JSON via a temp file + rename, so partially
/// written files never appear under the final name.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = tmp_path(path);
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serialize {}: {e}", path.display())))?;
    fs::write(&tmp, text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a full bundle directory (used by the synthetic generator).
pub fn save_bundle(dir: &Path, bundle: &RecordingBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_signal_csv(&dir.join("respiration.csv"), &bundle.respiration)?;
    if let Some(tr) = &bundle.spo2 {
        write_signal_csv(&dir.join("spo2.csv"), tr)?;
    }
    if let Some(tr) = &bundle.airflow {
        write_signal_csv(&dir.join("airflow.csv"), tr)?;
    }
    if !bundle.hypnogram_missing {
        write_hypnogram_csv(&dir.join("hypnogram.csv"), &bundle.hypnogram)?;
    }
    save_annotations(&dir.join("annotations.json"), &bundle.annotations)?;
    write_json_atomic(
        &dir.join("meta.json"),
        &BundleMeta {
            subject_id: bundle.subject_id.clone(),
            recording_id: bundle.recording_id.clone(),
            notes: None,
        },
    )
}
