//! Recording data model: signal traces, annotations, hypnograms, bundles,
//! and the signal-level preprocessing they need (normalization, smoothing,
//! slicing, stage lookup).

pub mod io;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Canonical ingestion rates, samples per second.
pub const RESPIRATION_RATE_HZ: f64 = 10.0;
pub const AIRFLOW_RATE_HZ: f64 = 10.0;
pub const SPO2_RATE_HZ: f64 = 1.0;

/// Longest run of missing/non-finite data that is gap-filled instead of
/// rejecting the recording.
pub const MAX_GAP_S: f64 = 2.0;

/// Minimum common span all traces of a bundle must share.
pub const MIN_BUNDLE_SPAN_S: f64 = 90.0;

/// A uniformly sampled real-valued time series. Sample `i` sits at time
/// `start_offset_s + i / rate_hz` relative to the bundle epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    samples: Vec<f64>,
    rate_hz: f64,
    start_offset_s: f64,
}

impl SignalTrace {
    pub fn new(samples: Vec<f64>, rate_hz: f64, start_offset_s: f64) -> Result<Self> {
        if !(rate_hz > 0.0) || !rate_hz.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "rate_hz must be positive and finite, got {rate_hz}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::DegenerateInput("trace needs at least 1 sample".into()));
        }
        if !(start_offset_s >= 0.0) || !start_offset_s.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "start_offset_s must be >= 0 and finite, got {start_offset_s}"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "non-finite sample at index {i}; gap-fill before constructing the trace"
            )));
        }
        Ok(Self {
            samples,
            rate_hz,
            start_offset_s,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least 1 sample
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn start_s(&self) -> f64 {
        self.start_offset_s
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }

    /// End of the covered span (exclusive).
    pub fn end_s(&self) -> f64 {
        self.start_offset_s + self.duration_s()
    }

    /// Time of sample `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        self.start_offset_s + i as f64 / self.rate_hz
    }

    /// Smallest sample index at or after time `t` (may equal `len` when `t`
    /// is past the end).
    pub fn index_at_or_after(&self, t: f64) -> usize {
        let x = (t - self.start_offset_s) * self.rate_hz;
        // Guard against float fuzz putting an exact-boundary time one sample off.
        let i = (x - 1e-9).ceil();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.samples.len())
        }
    }

    /// Replace the start offset (used by ingestion alignment and tests).
    pub fn with_start_offset(mut self, start_offset_s: f64) -> Self {
        self.start_offset_s = start_offset_s;
        self
    }
}

/// Event classes carried by annotations. `Predicted` is only ever produced
/// by the model pipeline, never ingested from expert files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ObstructiveApnea,
    CentralApnea,
    MixedApnea,
    Hypopnea,
    Arousal,
    Predicted,
}

impl EventKind {
    /// True for the classes pooled into the binary "apnea event" target.
    pub fn is_apnea_event(self) -> bool {
        matches!(
            self,
            EventKind::ObstructiveApnea
                | EventKind::CentralApnea
                | EventKind::MixedApnea
                | EventKind::Hypopnea
        )
    }
}

/// A labeled half-open interval `[start_s, start_s + duration_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub start_s: f64,
    pub duration_s: f64,
    pub kind: EventKind,
}

impl EventAnnotation {
    pub fn new(start_s: f64, duration_s: f64, kind: EventKind) -> Result<Self> {
        if !(start_s >= 0.0 && start_s.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "event start_s must be >= 0, got {start_s}"
            )));
        }
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "event duration_s must be > 0, got {duration_s}"
            )));
        }
        Ok(Self {
            start_s,
            duration_s,
            kind,
        })
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    /// Length of the overlap with `[t0, t1)` in seconds.
    pub fn overlap_with(&self, t0: f64, t1: f64) -> f64 {
        (self.end_s().min(t1) - self.start_s.max(t0)).max(0.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s()
    }
}

pub type EventList = Vec<EventAnnotation>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SleepStage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
    Unknown,
}

impl SleepStage {
    pub fn is_sleep(self) -> bool {
        !matches!(self, SleepStage::Wake | SleepStage::Unknown)
    }
}

/// Per-epoch sleep staging; epochs are half-open `[k*epoch_s, (k+1)*epoch_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypnogram {
    pub epoch_s: f64,
    pub stages: Vec<SleepStage>,
}

pub const DEFAULT_EPOCH_S: f64 = 30.0;

impl Hypnogram {
    pub fn new(epoch_s: f64, stages: Vec<SleepStage>) -> Result<Self> {
        if !(epoch_s > 0.0) || !epoch_s.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "epoch_s must be positive, got {epoch_s}"
            )));
        }
        Ok(Self { epoch_s, stages })
    }

    /// All-sleep fallback covering `duration_s`, used when no staging exists.
    pub fn all_sleep(duration_s: f64) -> Self {
        let n = (duration_s / DEFAULT_EPOCH_S).ceil().max(0.0) as usize;
        Self {
            epoch_s: DEFAULT_EPOCH_S,
            stages: vec![SleepStage::N2; n],
        }
    }

    pub fn sleep_hours(&self) -> f64 {
        let n = self.stages.iter().filter(|s| s.is_sleep()).count();
        self.epoch_s * n as f64 / 3600.0
    }

    /// Stage of the epoch containing `t_s`; `Unknown` beyond the last epoch.
    pub fn stage_at(&self, t_s: f64) -> SleepStage {
        if t_s < 0.0 {
            return SleepStage::Unknown;
        }
        let idx = (t_s / self.epoch_s).floor() as usize;
        self.stages.get(idx).copied().unwrap_or(SleepStage::Unknown)
    }

    /// Seconds of `[t0, t1)` that fall in Wake epochs.
    pub fn wake_overlap_s(&self, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        let mut total = 0.0;
        let first = (t0 / self.epoch_s).floor().max(0.0) as usize;
        let last = (t1 / self.epoch_s).ceil().max(0.0) as usize;
        for k in first..last {
            let stage = self.stages.get(k).copied().unwrap_or(SleepStage::Unknown);
            if stage == SleepStage::Wake {
                let e0 = k as f64 * self.epoch_s;
                let e1 = e0 + self.epoch_s;
                total += (t1.min(e1) - t0.max(e0)).max(0.0);
            }
        }
        total
    }
}

/// One night of data: signals, staging, annotations, identity.
#[derive(Debug, Clone)]
pub struct RecordingBundle {
    pub subject_id: String,
    pub recording_id: String,
    pub respiration: SignalTrace,
    pub spo2: Option<SignalTrace>,
    pub airflow: Option<SignalTrace>,
    pub hypnogram: Hypnogram,
    /// True when no hypnogram file existed and the all-sleep fallback is in use.
    pub hypnogram_missing: bool,
    pub annotations: EventList,
    /// Ingestion notes (trimmed annotations, gap fills, ...).
    pub warnings: Vec<String>,
}

impl RecordingBundle {
    /// Validates span overlap and identity fields; trims dangling annotations
    /// to the respiration span (the bundle timeline), logging each trim.
    pub fn new(
        subject_id: String,
        recording_id: String,
        respiration: SignalTrace,
        spo2: Option<SignalTrace>,
        airflow: Option<SignalTrace>,
        hypnogram: Option<Hypnogram>,
        annotations: EventList,
    ) -> Result<Self> {
        if subject_id.is_empty() {
            return Err(Error::RecordingRejected(
                "subject_id must be non-empty".into(),
            ));
        }
        if recording_id.is_empty() {
            return Err(Error::RecordingRejected(
                "recording_id must be non-empty".into(),
            ));
        }
        let mut span0 = respiration.start_s();
        let mut span1 = respiration.end_s();
        for trace in [spo2.as_ref(), airflow.as_ref()].into_iter().flatten() {
            span0 = span0.max(trace.start_s());
            span1 = span1.min(trace.end_s());
        }
        if span1 - span0 < MIN_BUNDLE_SPAN_S {
            return Err(Error::RecordingRejected(format!(
                "common trace span is {:.1} s, need >= {MIN_BUNDLE_SPAN_S} s",
                span1 - span0
            )));
        }
        let mut warnings = Vec::new();
        let hypnogram_missing = hypnogram.is_none();
        let hypnogram = hypnogram.unwrap_or_else(|| {
            warnings.push("hypnogram absent: treating entire recording as sleep".into());
            Hypnogram::all_sleep(respiration.end_s())
        });

        let (t0, t1) = (respiration.start_s(), respiration.end_s());
        let mut trimmed = Vec::with_capacity(annotations.len());
        for ev in annotations {
            if ev.end_s() <= t0 || ev.start_s >= t1 {
                warnings.push(format!(
                    "dropped annotation {:?} [{:.1}, {:.1}) outside recording span",
                    ev.kind,
                    ev.start_s,
                    ev.end_s()
                ));
                continue;
            }
            let s = ev.start_s.max(t0);
            let e = ev.end_s().min(t1);
            if s != ev.start_s || e != ev.end_s() {
                warnings.push(format!(
                    "trimmed annotation {:?} [{:.1}, {:.1}) to recording span",
                    ev.kind,
                    ev.start_s,
                    ev.end_s()
                ));
            }
            trimmed.push(EventAnnotation {
                start_s: s,
                duration_s: e - s,
                kind: ev.kind,
            });
        }
        trimmed.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

        Ok(Self {
            subject_id,
            recording_id,
            respiration,
            spo2,
            airflow,
            hypnogram,
            hypnogram_missing,
            annotations: trimmed,
            warnings,
        })
    }

    /// Hours used as the AHI denominator: staged sleep, or the whole
    /// recording when staging is absent.
    pub fn sleep_hours(&self) -> f64 {
        self.hypnogram.sleep_hours()
    }

    /// Expert/auto events pooled into the binary target.
    pub fn apnea_events(&self) -> impl Iterator<Item = &EventAnnotation> {
        self.annotations.iter().filter(|e| e.kind.is_apnea_event())
    }
}

/// Linear-interpolation empirical quantile on an already sorted vector.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let q = q.clamp(0.0, 1.0);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

fn population_moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for v in values {
        let d = v - mean;
        ss += d * d;
    }
    (mean, (ss / n as f64).sqrt(), n)
}

/// Z-score the trace using moments of the quantile-clipped signal: values
/// below the 0.01 quantile / above the 0.99 quantile are winsorized before
/// computing mean and standard deviation; the untouched samples are then
/// transformed.
pub fn normalize_respiration(trace: &SignalTrace) -> Result<SignalTrace> {
    if trace.len() < 100 {
        return Err(Error::DegenerateInput(format!(
            "normalization needs >= 100 samples, got {}",
            trace.len()
        )));
    }
    let mut sorted = trace.samples().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.01);
    let hi = quantile_sorted(&sorted, 0.99);
    let (mean, std, _) = population_moments(
        trace
            .samples()
            .iter()
            .map(move |&v| v.clamp(lo, hi)),
    );
    if std < 1e-9 {
        return Err(Error::DegenerateSignal(format!(
            "clipped respiration std {std:.3e} below 1e-9"
        )));
    }
    let samples = trace
        .samples()
        .iter()
        .map(|&v| (v - mean) / std)
        .collect();
    SignalTrace::new(samples, trace.rate_hz(), trace.start_s())
}

/// Centered moving average with window `round(width_s * rate)` samples
/// (minimum 1); edge windows are truncated. Output length equals input length.
pub fn moving_average(trace: &SignalTrace, width_s: f64) -> SignalTrace {
    let w = ((width_s * trace.rate_hz()).round() as usize).max(1);
    if w == 1 {
        return trace.clone();
    }
    let n = trace.len();
    let x = trace.samples();
    let left = (w - 1) / 2;
    let right = w / 2;
    let mut out = Vec::with_capacity(n);
    // Prefix sums; normalized signals keep magnitudes small enough for this.
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in x {
        acc += v;
        prefix.push(acc);
    }
    for i in 0..n {
        let a = i.saturating_sub(left);
        let b = (i + right + 1).min(n);
        out.push((prefix[b] - prefix[a]) / (b - a) as f64);
    }
    SignalTrace::new(out, trace.rate_hz(), trace.start_s()).expect("same shape as input")
}

/// Sub-trace covering `[t0, t1)`, with bounds clamped to the trace span.
pub fn slice(trace: &SignalTrace, t0_s: f64, t1_s: f64) -> Result<SignalTrace> {
    let t0 = t0_s.max(trace.start_s());
    let t1 = t1_s.min(trace.end_s());
    let i0 = trace.index_at_or_after(t0);
    let i1 = trace.index_at_or_after(t1);
    if i1 <= i0 {
        return Err(Error::EmptySlice {
            t0: t0_s,
            t1: t1_s,
            span0: trace.start_s(),
            span1: trace.end_s(),
        });
    }
    SignalTrace::new(
        trace.samples()[i0..i1].to_vec(),
        trace.rate_hz(),
        trace.time_of(i0),
    )
}
