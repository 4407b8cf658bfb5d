//! Synthetic cohort generator. Produces bundle directories with a breathing
//! sinusoid (amplitude/frequency jittered), injected apnea/hypopnea
//! suppressions, airflow with the same suppressions, SpO2 with lagged
//! desaturations, a hypnogram with a configurable wake fraction, and the
//! injected truth as annotations. The generator's own manifest is the
//! ground-truth count log.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::recording::io::save_bundle;
use crate::recording::{
    EventAnnotation, EventKind, Hypnogram, RecordingBundle, SignalTrace, SleepStage,
    DEFAULT_EPOCH_S, RESPIRATION_RATE_HZ, SPO2_RATE_HZ,
};

/// Events per hour to inject, fixed or drawn per recording.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AhiTarget {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesatSpec {
    /// Fraction of injected events that receive a desaturation.
    pub probability: f64,
    pub depth_lo_pct: f64,
    pub depth_hi_pct: f64,
    /// Delay from event start to desaturation onset, seconds.
    pub lag_lo_s: f64,
    pub lag_hi_s: f64,
}

/// Relative frequency of the injected event kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventMix {
    pub obstructive: f64,
    pub central: f64,
    pub mixed: f64,
    pub hypopnea: f64,
}

impl Default for EventMix {
    fn default() -> Self {
        EventMix {
            obstructive: 0.35,
            central: 0.15,
            mixed: 0.10,
            hypopnea: 0.40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub nights_per_subject: usize,
    pub hours: f64,
    pub ahi: AhiTarget,
    /// Fraction of epochs marked Wake.
    pub wake_fraction: f64,
    pub desat: DesatSpec,
    /// Fraction of injected hypopneas that also get an arousal annotation.
    pub arousal_probability: f64,
    pub include_spo2: bool,
    pub include_airflow: bool,
    #[serde(default)]
    pub event_mix: EventMix,
    /// Unlabeled shallow amplitude dips per hour (breathing irregularity
    /// that is not an event); keeps the respiration-only task honest.
    #[serde(default = "default_confounders")]
    pub confounders_per_hour: f64,
}

fn default_confounders() -> f64 {
    20.0
}

impl Default for SynthSpec {
    fn default() -> Self {
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
            arousal_probability: 0.3,
            include_spo2: true,
            include_airflow: true,
            event_mix: EventMix::default(),
            confounders_per_hour: default_confounders(),
        }
    }
}

/// Per-recording entry of the generation log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub recording_id: String,
    pub subject_id: String,
    pub target_ahi: f64,
    pub n_events: usize,
    pub sleep_hours: f64,
    pub injected_ahi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub recordings: Vec<RecordingManifest>,
}

fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Knuth multiplication method; fine for the rates used here.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

struct InjectedEvent {
    start_s: f64,
    duration_s: f64,
    kind: EventKind,
    desat: Option<(f64, f64)>, // (onset lag s, depth pct)
    arousal: bool,
}

fn pick_kind(rng: &mut ChaCha8Rng, mix: &EventMix) -> EventKind {
    let total = mix.obstructive + mix.central + mix.mixed + mix.hypopnea;
    let x = rng.gen::<f64>() * total;
    if x < mix.obstructive {
        EventKind::ObstructiveApnea
    } else if x < mix.obstructive + mix.central {
        EventKind::CentralApnea
    } else if x < mix.obstructive + mix.central + mix.mixed {
        EventKind::MixedApnea
    } else {
        EventKind::Hypopnea
    }
}

/// Raised-cosine edge so suppressions fade in/out over ~2 s.
fn suppression_gain(t: f64, start: f64, end: f64, floor: f64) -> f64 {
    const RAMP_S: f64 = 2.0;
    if t < start || t >= end {
        return 1.0;
    }
    let into = (t - start).min(end - t);
    if into >= RAMP_S {
        floor
    } else {
        let w = 0.5 - 0.5 * (std::f64::consts::PI * into / RAMP_S).cos();
        1.0 + (floor - 1.0) * w
    }
}

fn generate_recording(
    spec: &SynthSpec,
    subject_id: &str,
    recording_id: &str,
    seed: u64,
) -> Result<(RecordingBundle, RecordingManifest)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration_s = spec.hours * 3600.0;
    let n_epochs = (duration_s / DEFAULT_EPOCH_S).round() as usize;

    // Hypnogram: Bernoulli wake epochs.
    let stages: Vec<SleepStage> = (0..n_epochs)
        .map(|_| {
            if rng.gen::<f64>() < spec.wake_fraction {
                SleepStage::Wake
            } else {
                match rng.gen_range(0..4) {
                    0 => SleepStage::N1,
                    1 => SleepStage::N2,
                    2 => SleepStage::N3,
                    _ => SleepStage::Rem,
                }
            }
        })
        .collect();
    let hypnogram = Hypnogram::new(DEFAULT_EPOCH_S, stages)?;
    let sleep_hours = hypnogram.sleep_hours();

    let target_ahi = match spec.ahi {
        AhiTarget::Fixed(v) => v,
        AhiTarget::Uniform { lo, hi } => rng.gen_range(lo..hi),
    };
    let n_wanted = poisson(&mut rng, target_ahi * sleep_hours);

    // Place events in sleep, keeping a 15 s gap between neighbors.
    let mut events: Vec<InjectedEvent> = Vec::with_capacity(n_wanted);
    let mut attempts = 0usize;
    while events.len() < n_wanted && attempts < n_wanted * 200 + 1000 {
        attempts += 1;
        let dur = rng.gen_range(10.0..30.0);
        let start = rng.gen_range(60.0..duration_s - dur - 90.0);
        let fully_asleep = hypnogram.stage_at(start).is_sleep()
            && hypnogram.stage_at(start + dur).is_sleep()
            && hypnogram.wake_overlap_s(start, start + dur) == 0.0;
        if !fully_asleep {
            continue;
        }
        if events
            .iter()
            .any(|e| start < e.start_s + e.duration_s + 15.0 && e.start_s < start + dur + 15.0)
        {
            continue;
        }
        let kind = pick_kind(&mut rng, &spec.event_mix);
        let desat = if spec.include_spo2 && rng.gen::<f64>() < spec.desat.probability {
            Some((
                rng.gen_range(spec.desat.lag_lo_s..spec.desat.lag_hi_s),
                rng.gen_range(spec.desat.depth_lo_pct..spec.desat.depth_hi_pct),
            ))
        } else {
            None
        };
        let arousal =
            kind == EventKind::Hypopnea && rng.gen::<f64>() < spec.arousal_probability;
        events.push(InjectedEvent {
            start_s: start,
            duration_s: dur,
            kind,
            desat,
            arousal,
        });
    }
    events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));

    // Unlabeled confounder dips: amplitude drops in the hypopnea range but
    // with no desaturation, so respiration alone cannot separate them.
    let n_conf = poisson(&mut rng, spec.confounders_per_hour * spec.hours);
    let mut confounders: Vec<(f64, f64, f64)> = Vec::with_capacity(n_conf); // start, end, floor
    for _ in 0..n_conf {
        let dur = rng.gen_range(10.0..35.0);
        let start = rng.gen_range(60.0..duration_s - dur - 60.0);
        if events
            .iter()
            .any(|e| start < e.start_s + e.duration_s + 10.0 && e.start_s < start + dur + 10.0)
        {
            continue;
        }
        // Floors tight around the hypopnea suppression factor: respiration
        // alone cannot tell these from real hypopneas.
        confounders.push((start, start + dur, rng.gen_range(0.37..0.44)));
    }
    confounders.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Respiration and airflow: jittered sinusoids with per-event gains.
    let n_resp = (duration_s * RESPIRATION_RATE_HZ) as usize;
    let dt = 1.0 / RESPIRATION_RATE_HZ;
    let mut resp = Vec::with_capacity(n_resp);
    let mut airflow = Vec::with_capacity(n_resp);
    let mut phase_r = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phase_a = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut freq: f64 = rng.gen_range(0.22..0.30);
    let mut amp = 1.0f64;
    let mut drift = 0.0f64;
    let event_gain = |kind: EventKind| match kind {
        EventKind::Hypopnea => 0.4,
        _ => 0.05,
    };
    let mut ev_cursor = 0usize;
    let mut conf_cursor = 0usize;
    for i in 0..n_resp {
        let t = i as f64 * dt;
        if i % 10 == 0 {
            // Slow per-second random walks.
            freq = (freq + rng.gen_range(-0.004..0.004)).clamp(0.20, 0.32);
            amp = (amp + rng.gen_range(-0.02..0.02)).clamp(0.6, 1.4);
            drift = (drift + rng.gen_range(-0.01..0.01)).clamp(-0.3, 0.3);
        }
        while ev_cursor < events.len()
            && t >= events[ev_cursor].start_s + events[ev_cursor].duration_s
        {
            ev_cursor += 1;
        }
        while conf_cursor < confounders.len() && t >= confounders[conf_cursor].1 {
            conf_cursor += 1;
        }
        let mut gain = 1.0;
        if let Some(e) = events.get(ev_cursor) {
            if t >= e.start_s {
                gain = suppression_gain(
                    t,
                    e.start_s,
                    e.start_s + e.duration_s,
                    event_gain(e.kind),
                );
            }
        }
        // Airflow keeps its own (stronger) hypopnea suppression so the
        // envelope detector sees a sub-50% decrease.
        let mut gain_air = 1.0;
        if let Some(e) = events.get(ev_cursor) {
            if t >= e.start_s {
                let floor = match e.kind {
                    EventKind::Hypopnea => 0.3,
                    _ => 0.05,
                };
                gain_air = suppression_gain(t, e.start_s, e.start_s + e.duration_s, floor);
            }
        }
        let mut conf_gain = 1.0;
        if let Some(&(cs, ce, floor)) = confounders.get(conf_cursor) {
            if t >= cs && t < ce {
                conf_gain = suppression_gain(t, cs, ce, floor);
            }
        }
        phase_r += std::f64::consts::TAU * freq * dt;
        phase_a += std::f64::consts::TAU * freq * dt;
        let noise_r = rng.gen_range(-0.04..0.04);
        let noise_a = rng.gen_range(-0.04..0.04);
        resp.push(amp * gain * conf_gain * phase_r.sin() + drift + noise_r);
        airflow.push(amp * gain_air * conf_gain * phase_a.sin() + noise_a);
    }

    // SpO2: 97% baseline with lagging desaturation wells.
    let spo2 = if spec.include_spo2 {
        let n_spo2 = (duration_s * SPO2_RATE_HZ) as usize;
        let mut values = vec![97.0f64; n_spo2];
        for (i, v) in values.iter_mut().enumerate() {
            *v += 0.3 * ((i as f64) * 0.013).sin() + rng.gen_range(-0.1..0.1);
        }
        for e in &events {
            let Some((lag, depth)) = e.desat else { continue };
            let onset = e.start_s + lag;
            let fall = 10.0;
            let hold = 8.0;
            let recover = 20.0;
            let t0 = onset as usize;
            let t1 = ((onset + fall + hold + recover) as usize).min(n_spo2);
            for (ti, v) in values.iter_mut().enumerate().take(t1).skip(t0) {
                let dt_on = ti as f64 - onset;
                let frac = if dt_on < fall {
                    dt_on / fall
                } else if dt_on < fall + hold {
                    1.0
                } else {
                    1.0 - (dt_on - fall - hold) / recover
                };
                let dip = 97.0 - depth * frac.clamp(0.0, 1.0);
                *v = v.min(dip);
            }
        }
        for v in values.iter_mut() {
            *v = v.clamp(70.0, 100.0);
        }
        Some(SignalTrace::new(values, SPO2_RATE_HZ, 0.0)?)
    } else {
        None
    };

    let mut annotations: Vec<EventAnnotation> = Vec::new();
    for e in &events {
        annotations.push(EventAnnotation::new(e.start_s, e.duration_s, e.kind)?);
        if e.arousal {
            annotations.push(EventAnnotation::new(
                e.start_s + e.duration_s + 1.0,
                4.0,
                EventKind::Arousal,
            )?);
        }
    }

    let airflow_trace = if spec.include_airflow {
        Some(SignalTrace::new(airflow, RESPIRATION_RATE_HZ, 0.0)?)
    } else {
        None
    };
    let bundle = RecordingBundle::new(
        subject_id.to_string(),
        recording_id.to_string(),
        SignalTrace::new(resp, RESPIRATION_RATE_HZ, 0.0)?,
        spo2,
        airflow_trace,
        Some(hypnogram),
        annotations,
    )?;
    let n_events = events.len();
    let manifest = RecordingManifest {
        recording_id: recording_id.to_string(),
        subject_id: subject_id.to_string(),
        target_ahi,
        n_events,
        sleep_hours,
        injected_ahi: n_events as f64 / sleep_hours,
    };
    Ok((bundle, manifest))
}

/// Generates the whole cohort in memory.
pub fn generate_cohort(
    spec: &SynthSpec,
    seed: u64,
) -> Result<Vec<(RecordingBundle, RecordingManifest)>> {
    let mut out = Vec::with_capacity(spec.n_subjects * spec.nights_per_subject);
    for s in 0..spec.n_subjects {
        for night in 0..spec.nights_per_subject {
            let subject_id = format!("subj{s:03}");
            let recording_id = format!("subj{s:03}_n{night}");
            let rec_seed = derive_seed(seed, (s * spec.nights_per_subject + night) as u64);
            out.push(generate_recording(spec, &subject_id, &recording_id, rec_seed)?);
        }
    }
    Ok(out)
}

/// Generates and writes bundle directories plus `synth_manifest.json`.
pub fn generate_and_save(spec: &SynthSpec, out_dir: &Path, seed: u64) -> Result<CohortManifest> {
    let cohort = generate_cohort(spec, seed)?;
    let mut recordings = Vec::with_capacity(cohort.len());
    for (bundle, manifest) in &cohort {
        save_bundle(&out_dir.join(&manifest.recording_id), bundle)?;
        recordings.push(manifest.clone());
    }
    let manifest = CohortManifest {
        seed,
        recordings,
    };
    crate::recording::io::write_json_atomic(&out_dir.join("synth_manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_subjects: 2,
            nights_per_subject: 1,
            hours: 1.0,
            ahi: AhiTarget::Fixed(10.0),
            ..SynthSpec::default()
        }
    }

    #[test]
    fn injected_count_tracks_rate() {
        let spec = SynthSpec {
            n_subjects: 6,
            nights_per_subject: 1,
            hours: 8.0,
            ahi: AhiTarget::Fixed(10.0),
            wake_fraction: 0.1,
            ..SynthSpec::default()
        };
        let cohort = generate_cohort(&spec, 11).unwrap();
        let mean_events: f64 = cohort
            .iter()
            .map(|(_, m)| m.n_events as f64)
            .sum::<f64>()
            / cohort.len() as f64;
        // ~= 10/h x ~7.2 h of sleep; Poisson noise over 6 recordings.
        assert!(
            (mean_events - 72.0).abs() < 15.0,
            "mean injected events {mean_events}"
        );
        for (bundle, m) in &cohort {
            assert_eq!(bundle.apnea_events().count(), m.n_events);
            assert!((m.sleep_hours - 7.2).abs() < 0.8);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_cohort(&spec, 42).unwrap();
        let b = generate_cohort(&spec, 42).unwrap();
        for ((ba, ma), (bb, mb)) in a.iter().zip(&b) {
            assert_eq!(ba.respiration.samples(), bb.respiration.samples());
            assert_eq!(
                ba.spo2.as_ref().unwrap().samples(),
                bb.spo2.as_ref().unwrap().samples()
            );
            assert_eq!(ba.annotations, bb.annotations);
            assert_eq!(ma.n_events, mb.n_events);
        }
    }

    #[test]
    fn saved_cohort_roundtrips() {
        let dir = std::env::temp_dir().join(format!("synth-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = small_spec();
        let manifest = generate_and_save(&spec, &dir, 3).unwrap();
        assert_eq!(manifest.recordings.len(), 2);
        let loaded = crate::recording::io::load_bundle(&dir.join(&manifest.recordings[0].recording_id)).unwrap();
        assert_eq!(loaded.subject_id, "subj000");
        assert!(loaded.spo2.is_some());
        assert!(loaded.airflow.is_some());
        assert!(!loaded.hypnogram_missing);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn events_only_during_sleep() {
        let cohort = generate_cohort(&small_spec(), 9).unwrap();
        for (bundle, _) in &cohort {
            for e in bundle.apnea_events() {
                assert_eq!(bundle.hypnogram.wake_overlap_s(e.start_s, e.end_s()), 0.0);
            }
        }
    }
}
