//! Automatic hypopnea scoring from PSG airflow + SpO2: detect airflow
//! decreases against a rolling breath-amplitude baseline, then qualify each
//! candidate under the 3% rule (desaturation or arousal) or the 4% rule
//! (desaturation only). Apnea annotations pass through untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{spo2_drop, SPO2_HORIZON_S};
use crate::recording::{EventAnnotation, EventKind, EventList, Hypnogram, RecordingBundle, SignalTrace};

/// Hypopnea qualification rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypopneaRule {
    /// >= 3% desaturation, or an associated arousal.
    Rule3,
    /// >= 4% desaturation; arousals do not qualify.
    Rule4,
}

impl HypopneaRule {
    pub fn desat_threshold_pct(self) -> f64 {
        match self {
            HypopneaRule::Rule3 => 3.0,
            HypopneaRule::Rule4 => 4.0,
        }
    }

    pub fn arousal_allowed(self) -> bool {
        matches!(self, HypopneaRule::Rule3)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            HypopneaRule::Rule3 => "annotations.auto3.json",
            HypopneaRule::Rule4 => "annotations.auto4.json",
        }
    }
}

/// An airflow-decrease interval awaiting qualification.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEvent {
    pub start_s: f64,
    pub duration_s: f64,
    /// Envelope drop relative to baseline, in [0, 1].
    pub airflow_drop_fraction: f64,
}

impl CandidateEvent {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

/// Knobs of the airflow-decrease detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutolabelConfig {
    /// Required envelope drop (0.5 = airflow below 50% of baseline).
    pub drop_fraction: f64,
    /// Minimum event duration, seconds.
    pub min_duration_s: f64,
    /// Arousal counts when it starts within this window after event end.
    pub arousal_grace_s: f64,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        AutolabelConfig {
            drop_fraction: 0.5,
            min_duration_s: 10.0,
            arousal_grace_s: 5.0,
        }
    }
}

/// Envelope block length, seconds. Breath amplitude is summarized as the
/// peak-to-trough range per block, median-filtered over 3 blocks.
const ENVELOPE_BLOCK_S: f64 = 2.0;
/// Baseline lookback, seconds.
const BASELINE_LOOKBACK_S: f64 = 100.0;

fn median3(a: f64, b: f64, c: f64) -> f64 {
    a.max(b).min(a.max(c)).min(b.max(c))
}

/// Per-block peak-to-trough amplitude of the airflow signal, median-filtered.
fn breath_envelope(airflow: &SignalTrace) -> Vec<f64> {
    let block = (ENVELOPE_BLOCK_S * airflow.rate_hz()) as usize;
    let x = airflow.samples();
    let n_blocks = x.len() / block;
    let mut env = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let chunk = &x[b * block..(b + 1) * block];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in chunk {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        env.push(hi - lo);
    }
    let mut filtered = env.clone();
    for i in 1..n_blocks.saturating_sub(1) {
        filtered[i] = median3(env[i - 1], env[i], env[i + 1]);
    }
    filtered
}

fn median_of(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    crate::recording::quantile_sorted(&v, 0.5)
}

/// Finds intervals where the breath envelope stays below
/// `(1 - drop_fraction) x baseline` for at least `min_duration_s`, where the
/// baseline is the median envelope over the preceding 100 s.
pub fn detect_airflow_decreases(
    airflow: &SignalTrace,
    drop_fraction: f64,
    min_duration_s: f64,
) -> Result<Vec<CandidateEvent>> {
    if airflow.duration_s() < 300.0 {
        return Err(Error::DegenerateInput(format!(
            "airflow too short for baseline tracking ({:.0} s < 300 s)",
            airflow.duration_s()
        )));
    }
    let env = breath_envelope(airflow);
    let lookback = (BASELINE_LOOKBACK_S / ENVELOPE_BLOCK_S) as usize;
    let min_blocks = (min_duration_s / ENVELOPE_BLOCK_S).ceil() as usize;
    let mut candidates = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut run_baseline = 0.0;
    for b in 0..=env.len() {
        let below = if b < env.len() {
            let baseline = if b == 0 {
                env[0]
            } else {
                median_of(&env[b.saturating_sub(lookback)..b])
            };
            if run_start.is_none() {
                run_baseline = baseline;
            }
            baseline > 0.0 && env[b] < (1.0 - drop_fraction) * baseline
        } else {
            false
        };
        match (below, run_start) {
            (true, None) => run_start = Some(b),
            (false, Some(s)) => {
                if b - s >= min_blocks {
                    let start_s = airflow.start_s() + s as f64 * ENVELOPE_BLOCK_S;
                    let duration_s = (b - s) as f64 * ENVELOPE_BLOCK_S;
                    let mean_env: f64 =
                        env[s..b].iter().sum::<f64>() / (b - s) as f64;
                    let drop = if run_baseline > 0.0 {
                        (1.0 - mean_env / run_baseline).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    candidates.push(CandidateEvent {
                        start_s,
                        duration_s,
                        airflow_drop_fraction: drop,
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    // Merge candidates that touch (can only arise from future detector
    // variants; runs are disjoint by construction).
    let mut merged: Vec<CandidateEvent> = Vec::with_capacity(candidates.len());
    for c in candidates {
        match merged.last_mut() {
            Some(last) if c.start_s <= last.end_s() => {
                let end = last.end_s().max(c.end_s());
                last.duration_s = end - last.start_s;
                last.airflow_drop_fraction = last.airflow_drop_fraction.max(c.airflow_drop_fraction);
            }
            _ => merged.push(c),
        }
    }
    Ok(merged)
}

/// True iff the desaturation drop anchored at the candidate end reaches the
/// threshold.
pub fn desaturation_satisfied(
    spo2: &SignalTrace,
    event: &CandidateEvent,
    threshold_pct: f64,
) -> Result<bool> {
    match spo2_drop(spo2, event.end_s(), SPO2_HORIZON_S) {
        Ok(drop) => Ok(drop >= threshold_pct),
        Err(Error::MissingSignal(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// True iff an arousal annotation starts within
/// `[event.start, event.end + grace_s]`.
pub fn arousal_associated(
    annotations: &[EventAnnotation],
    event: &CandidateEvent,
    grace_s: f64,
) -> bool {
    annotations.iter().any(|a| {
        a.kind == EventKind::Arousal
            && a.start_s >= event.start_s
            && a.start_s <= event.end_s() + grace_s
    })
}

/// Re-scores a bundle under the given rule: apneas pass through unchanged;
/// hypopneas become the qualified airflow-decrease candidates. Candidates
/// overlapping an apnea by 50% or more of their duration are dropped as
/// duplicates of the apnea.
pub fn relabel(
    bundle: &RecordingBundle,
    rule: HypopneaRule,
    config: &AutolabelConfig,
) -> Result<EventList> {
    let airflow = bundle
        .airflow
        .as_ref()
        .ok_or_else(|| Error::MissingSignal(format!("{}: no airflow trace", bundle.recording_id)))?;
    let spo2 = bundle
        .spo2
        .as_ref()
        .ok_or_else(|| Error::MissingSignal(format!("{}: no spo2 trace", bundle.recording_id)))?;

    let apneas: Vec<EventAnnotation> = bundle
        .annotations
        .iter()
        .filter(|e| {
            matches!(
                e.kind,
                EventKind::ObstructiveApnea | EventKind::CentralApnea | EventKind::MixedApnea
            )
        })
        .copied()
        .collect();

    let candidates = detect_airflow_decreases(airflow, config.drop_fraction, config.min_duration_s)?;
    let mut out = apneas.clone();
    for cand in &candidates {
        let apnea_overlap: f64 = apneas
            .iter()
            .map(|a| a.overlap_with(cand.start_s, cand.end_s()))
            .sum();
        if apnea_overlap >= 0.5 * cand.duration_s {
            continue;
        }
        let desat = desaturation_satisfied(spo2, cand, rule.desat_threshold_pct())?;
        let arousal = rule.arousal_allowed()
            && arousal_associated(&bundle.annotations, cand, config.arousal_grace_s);
        if desat || arousal {
            out.push(EventAnnotation {
                start_s: cand.start_s,
                duration_s: cand.duration_s,
                kind: EventKind::Hypopnea,
            });
        }
    }
    out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.duration_s.total_cmp(&b.duration_s)));
    Ok(out)
}

/// Hypopneas per hour of sleep.
pub fn hypopnea_index(events: &[EventAnnotation], hypnogram: &Hypnogram) -> Result<f64> {
    let hours = hypnogram.sleep_hours();
    if hours <= 0.0 {
        return Err(Error::ZeroSleep("hypopnea index denominator is zero".into()));
    }
    let count = events.iter().filter(|e| e.kind == EventKind::Hypopnea).count();
    Ok(count as f64 / hours)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::SleepStage;

    /// Breathing-like airflow with amplitude suppressions.
    fn airflow_with(suppressions: &[(usize, usize, f64)], duration_s: usize) -> SignalTrace {
        let rate = 10.0;
        let n = duration_s * 10;
        let mut x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                (2.0 * std::f64::consts::PI * 0.3 * t).sin()
            })
            .collect();
        for &(a, b, f) in suppressions {
            for v in x.iter_mut().take(b * 10).skip(a * 10) {
                *v *= f;
            }
        }
        SignalTrace::new(x, rate, 0.0).unwrap()
    }

    #[test]
    fn detects_suppressed_segment_within_tolerance() {
        let airflow = airflow_with(&[(200, 215, 0.3)], 400);
        let cands = detect_airflow_decreases(&airflow, 0.5, 10.0).unwrap();
        assert_eq!(cands.len(), 1);
        assert!((cands[0].start_s - 200.0).abs() <= 2.0, "{:?}", cands[0]);
        assert!((cands[0].end_s() - 215.0).abs() <= 2.0, "{:?}", cands[0]);
        assert!(cands[0].airflow_drop_fraction > 0.5);
    }

    #[test]
    fn constant_amplitude_yields_nothing() {
        let airflow = airflow_with(&[], 400);
        assert!(detect_airflow_decreases(&airflow, 0.5, 10.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn close_suppressions_stay_separate() {
        // Two suppressions separated by 5 s of normal breathing.
        let airflow = airflow_with(&[(200, 212, 0.2), (217, 230, 0.2)], 400);
        let cands = detect_airflow_decreases(&airflow, 0.5, 10.0).unwrap();
        assert_eq!(cands.len(), 2, "{cands:?}");
    }

    fn spo2_with_dip(dip: Option<(usize, usize, f64)>, duration_s: usize) -> SignalTrace {
        let mut v = vec![97.0; duration_s];
        if let Some((a, b, depth)) = dip {
            for x in v.iter_mut().take(b).skip(a) {
                *x = 97.0 - depth;
            }
        }
        SignalTrace::new(v, 1.0, 0.0).unwrap()
    }

    fn cand(start: f64, dur: f64) -> CandidateEvent {
        CandidateEvent {
            start_s: start,
            duration_s: dur,
            airflow_drop_fraction: 0.7,
        }
    }

    #[test]
    fn desaturation_thresholds() {
        let spo2 = spo2_with_dip(Some((220, 250, 3.5)), 500);
        let c = cand(200.0, 15.0);
        assert!(desaturation_satisfied(&spo2, &c, 3.0).unwrap());
        assert!(!desaturation_satisfied(&spo2, &c, 4.0).unwrap());
        let deep = spo2_with_dip(Some((220, 250, 4.2)), 500);
        assert!(desaturation_satisfied(&deep, &c, 3.0).unwrap());
        assert!(desaturation_satisfied(&deep, &c, 4.0).unwrap());
        let flat = spo2_with_dip(None, 500);
        assert!(!desaturation_satisfied(&flat, &c, 3.0).unwrap());
        assert!(!desaturation_satisfied(&flat, &c, 4.0).unwrap());
    }

    #[test]
    fn arousal_grace_window() {
        let c = cand(100.0, 15.0);
        let arousal_at = |t: f64| {
            vec![EventAnnotation::new(t, 3.0, EventKind::Arousal).unwrap()]
        };
        assert!(arousal_associated(&arousal_at(117.0), &c, 5.0));
        assert!(!arousal_associated(&arousal_at(145.0), &c, 5.0));
        assert!(!arousal_associated(&[], &c, 5.0));
    }

    fn bundle_for_relabel(
        desat_depth: Option<f64>,
        arousal: bool,
    ) -> RecordingBundle {
        let airflow = airflow_with(&[(200, 215, 0.2)], 600);
        let resp = airflow_with(&[(200, 215, 0.2)], 600);
        let spo2 = spo2_with_dip(desat_depth.map(|d| (220, 250, d)), 600);
        let mut anns = Vec::new();
        if arousal {
            anns.push(EventAnnotation::new(216.0, 3.0, EventKind::Arousal).unwrap());
        }
        RecordingBundle::new(
            "s".into(),
            "r".into(),
            resp,
            Some(spo2),
            Some(airflow),
            Some(Hypnogram::new(30.0, vec![SleepStage::N2; 20]).unwrap()),
            anns,
        )
        .unwrap()
    }

    #[test]
    fn rule3_accepts_between_thresholds_rule4_does_not() {
        let bundle = bundle_for_relabel(Some(3.5), false);
        let cfg = AutolabelConfig::default();
        let r3 = relabel(&bundle, HypopneaRule::Rule3, &cfg).unwrap();
        let r4 = relabel(&bundle, HypopneaRule::Rule4, &cfg).unwrap();
        assert_eq!(r3.iter().filter(|e| e.kind == EventKind::Hypopnea).count(), 1);
        assert_eq!(r4.iter().filter(|e| e.kind == EventKind::Hypopnea).count(), 0);
    }

    #[test]
    fn arousal_qualifies_only_under_rule3() {
        let bundle = bundle_for_relabel(None, true);
        let cfg = AutolabelConfig::default();
        let r3 = relabel(&bundle, HypopneaRule::Rule3, &cfg).unwrap();
        let r4 = relabel(&bundle, HypopneaRule::Rule4, &cfg).unwrap();
        assert_eq!(r3.iter().filter(|e| e.kind == EventKind::Hypopnea).count(), 1);
        assert_eq!(r4.iter().filter(|e| e.kind == EventKind::Hypopnea).count(), 0);
    }

    #[test]
    fn apneas_pass_through_and_shadow_candidates() {
        let airflow = airflow_with(&[(200, 215, 0.2)], 600);
        let resp = airflow.clone();
        let spo2 = spo2_with_dip(Some((220, 250, 5.0)), 600);
        let apnea = EventAnnotation::new(201.0, 14.0, EventKind::ObstructiveApnea).unwrap();
        let bundle = RecordingBundle::new(
            "s".into(),
            "r".into(),
            resp,
            Some(spo2),
            Some(airflow),
            None,
            vec![apnea],
        )
        .unwrap();
        let cfg = AutolabelConfig::default();
        for rule in [HypopneaRule::Rule3, HypopneaRule::Rule4] {
            let out = relabel(&bundle, rule, &cfg).unwrap();
            // The candidate overlaps the apnea >= 50%: only the apnea remains.
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].kind, EventKind::ObstructiveApnea);
        }
    }

    #[test]
    fn flat_spo2_passes_only_apneas() {
        let airflow = airflow_with(&[], 600);
        let apnea = EventAnnotation::new(100.0, 12.0, EventKind::CentralApnea).unwrap();
        let bundle = RecordingBundle::new(
            "s".into(),
            "r".into(),
            airflow.clone(),
            Some(spo2_with_dip(None, 600)),
            Some(airflow),
            None,
            vec![apnea],
        )
        .unwrap();
        let cfg = AutolabelConfig::default();
        for rule in [HypopneaRule::Rule3, HypopneaRule::Rule4] {
            let out = relabel(&bundle, rule, &cfg).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].kind, EventKind::CentralApnea);
        }
    }

    #[test]
    fn missing_airflow_is_an_error() {
        let resp = airflow_with(&[], 600);
        let bundle = RecordingBundle::new(
            "s".into(),
            "r".into(),
            resp,
            Some(spo2_with_dip(None, 600)),
            None,
            None,
            vec![],
        )
        .unwrap();
        assert!(matches!(
            relabel(&bundle, HypopneaRule::Rule3, &AutolabelConfig::default()),
            Err(Error::MissingSignal(_))
        ));
    }

    #[test]
    fn hypopnea_index_arithmetic() {
        let hyp = Hypnogram::new(30.0, vec![SleepStage::N2; 720]).unwrap(); // 6 h
        let events: Vec<EventAnnotation> = (0..12)
            .map(|i| EventAnnotation::new(i as f64 * 100.0, 12.0, EventKind::Hypopnea).unwrap())
            .collect();
        assert!((hypopnea_index(&events, &hyp).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(hypopnea_index(&[], &hyp).unwrap(), 0.0);
        let empty = Hypnogram::new(30.0, vec![SleepStage::Wake; 10]).unwrap();
        assert!(matches!(
            hypopnea_index(&events, &empty),
            Err(Error::ZeroSleep(_))
        ));
    }
}
