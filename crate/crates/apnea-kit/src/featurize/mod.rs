//! Per-second window feature bank: the four respiration kernels (standard
//! deviation, ventilation proxy, sample entropy, Katz fractal dimension),
//! the SpO2 desaturation features, the deterministic feature registry, and
//! the window extractor.

pub mod extract;
pub mod registry;

pub use extract::{extract_windows, FeatureMatrix};
pub use registry::{build_registry, FeatureFamily, FeatureSpec, SignalSource};

use crate::error::{Error, Result};
use crate::recording::SignalTrace;

/// Default sample-entropy template length.
pub const SAMPEN_M: usize = 2;
/// Default sample-entropy tolerance as a fraction of the slice std.
pub const SAMPEN_R_FRACTION: f64 = 0.2;
/// Desaturation search horizon around the anchor, seconds.
pub const SPO2_HORIZON_S: f64 = 45.0;
/// Lag bound for the alignment-robust desaturation feature, seconds.
pub const SPO2_MAX_LAG_S: f64 = 30.0;
/// Lag grid step for the robust feature, seconds.
pub const SPO2_LAG_STEP_S: f64 = 5.0;

/// Population standard deviation.
pub fn window_std(seq: &[f64]) -> f64 {
    debug_assert!(seq.len() >= 2, "window_std needs >= 2 samples");
    let n = seq.len() as f64;
    let mean = seq.iter().sum::<f64>() / n;
    let ss = seq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / n).sqrt()
}

/// Sum of positive first differences; a breath-inflow proxy.
pub fn ventilation(seq: &[f64]) -> f64 {
    seq.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum()
}

/// Sample entropy -ln(A/B): B counts template pairs of length `m` within
/// Chebyshev distance `r`, A the same for length `m+1`. Both counts run over
/// the first `n-m` start indices with self-matches excluded, so A's pairs are
/// a subset of B's.
///
/// When no (m+1)-template pair matches, a finite stand-in is returned:
/// `ln(B+1)` if any m-pairs matched, else `ln((n-m-1)(n-m))`, keeping the
/// feature matrix finite while staying monotone in irregularity.
pub fn sample_entropy(seq: &[f64], m: usize, r: f64) -> Result<f64> {
    let n = seq.len();
    if n < m + 2 {
        return Err(Error::DegenerateInput(format!(
            "sample entropy needs >= {} samples, got {n}",
            m + 2
        )));
    }
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::DegenerateInput(format!("tolerance r={r} invalid")));
    }
    let (a, b) = sampen_pair_counts(seq, m, r);
    Ok(sampen_from_counts(a, b, n, m))
}

pub(crate) fn sampen_from_counts(a: u64, b: u64, n: usize, m: usize) -> f64 {
    if a > 0 && b > 0 {
        -((a as f64 / b as f64).ln())
    } else if b > 0 {
        ((b + 1) as f64).ln()
    } else {
        let t = (n - m) as f64;
        (t * (t - 1.0)).ln()
    }
}

/// Counts matching template pairs (unordered, i < j) for lengths m and m+1
/// in one pass. Candidate pairs are pruned by sorting on the first template
/// coordinate, which only reorders integer increments, so the counts are
/// exact and order-independent.
pub(crate) fn sampen_pair_counts(seq: &[f64], m: usize, r: f64) -> (u64, u64) {
    if m == 2 {
        return sampen_pair_counts_m2(seq, r);
    }
    let n = seq.len();
    let n_templates = n - m; // start indices 0..n_templates
    let mut order: Vec<u32> = (0..n_templates as u32).collect();
    order.sort_by(|&i, &j| seq[i as usize].total_cmp(&seq[j as usize]));
    let mut a = 0u64;
    let mut b = 0u64;
    for p in 0..n_templates {
        let i = order[p] as usize;
        let xi = seq[i];
        for &jq in &order[p + 1..] {
            let j = jq as usize;
            if seq[j] - xi > r {
                break;
            }
            // Remaining m-1 coordinates of the m-template.
            let mut matched = true;
            for k in 1..m {
                if (seq[i + k] - seq[j + k]).abs() > r {
                    matched = false;
                    break;
                }
            }
            if matched {
                b += 1;
                if (seq[i + m] - seq[j + m]).abs() <= r {
                    a += 1;
                }
            }
        }
    }
    (a, b)
}

/// m = 2 fast path: templates become (x, y, z) triples laid out in x-sorted
/// order; each candidate window is found by binary search and counted with a
/// branchless inner loop.
fn sampen_pair_counts_m2(seq: &[f64], r: f64) -> (u64, u64) {
    let nt = seq.len() - 2;
    let mut order: Vec<u32> = (0..nt as u32).collect();
    order.sort_by(|&i, &j| seq[i as usize].total_cmp(&seq[j as usize]));
    let mut xs = Vec::with_capacity(nt);
    let mut ys = Vec::with_capacity(nt);
    let mut zs = Vec::with_capacity(nt);
    for &i in &order {
        let i = i as usize;
        xs.push(seq[i]);
        ys.push(seq[i + 1]);
        zs.push(seq[i + 2]);
    }
    let mut a = 0u64;
    let mut b = 0u64;
    let mut hi = 0usize;
    for p in 0..nt {
        let bound = xs[p] + r;
        if hi <= p {
            hi = p + 1;
        }
        // Window end is monotone in p; extend by scan (amortized O(n) total).
        while hi < nt && xs[hi] <= bound {
            hi += 1;
        }
        let (y, z) = (ys[p], zs[p]);
        let mut bc = 0u64;
        let mut ac = 0u64;
        for q in p + 1..hi {
            let dy = (ys[q] - y).abs();
            let dz = (zs[q] - z).abs();
            let ym = (dy <= r) as u64;
            bc += ym;
            ac += ym & ((dz <= r) as u64);
        }
        b += bc;
        a += ac;
    }
    (a, b)
}

/// Katz fractal dimension of the waveform (index, value) polyline:
/// `log10(n) / (log10(n) + log10(d / L))` with n = len-1, L the path length
/// and d the farthest Euclidean distance from the first point. Degenerate
/// waveforms (d = 0, L = 0, a single segment, or a non-finite ratio) map
/// to 1.0.
pub fn katz_fd(seq: &[f64]) -> f64 {
    debug_assert!(seq.len() >= 2, "katz_fd needs >= 2 samples");
    let n = (seq.len() - 1) as f64;
    let first = seq[0];
    let mut path = 0.0;
    let mut chord2 = 0.0f64;
    for (k, w) in seq.windows(2).enumerate() {
        let dv = w[1] - w[0];
        path += (1.0 + dv * dv).sqrt();
        let di = (k + 1) as f64;
        let dy = w[1] - first;
        chord2 = chord2.max(di * di + dy * dy);
    }
    let chord = chord2.sqrt();
    if chord == 0.0 || path == 0.0 || seq.len() == 2 {
        return 1.0;
    }
    let log_n = n.log10();
    let denom = log_n + (chord / path).log10();
    let d = log_n / denom;
    if d.is_finite() {
        d
    } else {
        1.0
    }
}

/// Desaturation drop around `t_event_s`: the maximum SpO2 in the
/// `horizon_s` seconds before the anchor minus the minimum in the
/// `horizon_s` seconds after, floored at 0. Windows are clamped to the
/// trace span; an anchor whose two windows both miss the trace entirely is
/// a missing-signal error.
pub fn spo2_drop(spo2: &SignalTrace, t_event_s: f64, horizon_s: f64) -> Result<f64> {
    if t_event_s - horizon_s >= spo2.end_s() || t_event_s + horizon_s <= spo2.start_s() {
        return Err(Error::MissingSignal(format!(
            "spo2 does not cover [{:.1}, {:.1}]",
            t_event_s - horizon_s,
            t_event_s + horizon_s
        )));
    }
    let x = spo2.samples();
    let n = x.len() as i64;
    let rate = spo2.rate_hz();
    let start = spo2.start_s();
    let floor_idx = |t: f64| (((t - start) * rate + 1e-9).floor() as i64).clamp(0, n - 1);
    let ceil_idx = |t: f64| (((t - start) * rate - 1e-9).ceil() as i64).clamp(0, n - 1);
    // Pre-window [t-h, t] and post-window [t, t+h], inclusive, clamped to the
    // span; a window that falls wholly outside collapses to its nearest sample.
    let ip1 = floor_idx(t_event_s);
    let ip0 = ceil_idx(t_event_s - horizon_s).min(ip1);
    let iq0 = ceil_idx(t_event_s);
    let iq1 = floor_idx(t_event_s + horizon_s).max(iq0);
    let max_pre = x[ip0 as usize..=ip1 as usize]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min_post = x[iq0 as usize..=iq1 as usize]
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    Ok((max_pre - min_post).max(0.0))
}

/// Worst-case desaturation drop over anchor lags in
/// `{-max_lag, -max_lag+step, ..., +max_lag}`; tolerant of misaligned
/// SpO2 clocks. Lags whose windows miss the trace are skipped.
pub fn spo2_drop_robust(
    spo2: &SignalTrace,
    t_event_s: f64,
    horizon_s: f64,
    max_lag_s: f64,
) -> Result<f64> {
    let mut best: Option<f64> = None;
    let steps = (max_lag_s / SPO2_LAG_STEP_S).round() as i64;
    for k in -steps..=steps {
        let lag = k as f64 * SPO2_LAG_STEP_S;
        if let Ok(d) = spo2_drop(spo2, t_event_s + lag, horizon_s) {
            best = Some(best.map_or(d, |b: f64| b.max(d)));
        }
    }
    best.ok_or_else(|| {
        Error::MissingSignal(format!(
            "spo2 does not cover any lag window around t={t_event_s:.1}"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) reference counter, the definition spelled out directly.
    fn sampen_oracle(seq: &[f64], m: usize, r: f64) -> (u64, u64) {
        let nt = seq.len() - m;
        let mut a = 0;
        let mut b = 0;
        for i in 0..nt {
            for j in (i + 1)..nt {
                let bm = (0..m).all(|k| (seq[i + k] - seq[j + k]).abs() <= r);
                if bm {
                    b += 1;
                    if (0..=m).all(|k| (seq[i + k] - seq[j + k]).abs() <= r) {
                        a += 1;
                    }
                }
            }
        }
        (a, b)
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(1);
        move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn sample_entropy_constant_is_zero() {
        let seq = vec![2.5; 40];
        assert_eq!(sample_entropy(&seq, 2, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn sample_entropy_matches_bruteforce_on_alternating() {
        let seq = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let (a, b) = sampen_oracle(&seq, 2, 0.5);
        let expect = sampen_from_counts(a, b, seq.len(), 2);
        let got = sample_entropy(&seq, 2, 0.5).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn sample_entropy_matches_bruteforce_on_noise() {
        let mut rng = lcg(7);
        let seq: Vec<f64> = (0..600).map(|_| rng()).collect();
        let r = 0.2 * window_std(&seq);
        let (a, b) = sampen_oracle(&seq, 2, r);
        let expect = sampen_from_counts(a, b, seq.len(), 2);
        let got = sample_entropy(&seq, 2, r).unwrap();
        assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn sample_entropy_scale_consistency() {
        let mut rng = lcg(11);
        let seq: Vec<f64> = (0..200).map(|_| rng()).collect();
        let scaled: Vec<f64> = seq.iter().map(|v| v * 7.3).collect();
        let r = 0.25;
        let e1 = sample_entropy(&seq, 2, r).unwrap();
        let e2 = sample_entropy(&scaled, 2, 7.3 * r).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn sample_entropy_cap_when_no_m1_matches() {
        // Strictly spaced ramp: with r below the step, nothing matches.
        let seq: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let got = sample_entropy(&seq, 2, 0.5).unwrap();
        let t = (seq.len() - 2) as f64;
        assert!((got - (t * (t - 1.0)).ln()).abs() < 1e-12);
        // B > 0 but A = 0: two m-matches whose continuation diverges.
        let seq2 = [0.0, 1.0, 100.0, 0.0, 1.0, -100.0, 50.0, -50.0, 20.0];
        let (a, b) = sampen_oracle(&seq2, 2, 0.5);
        assert_eq!(a, 0);
        assert!(b > 0);
        let got2 = sample_entropy(&seq2, 2, 0.5).unwrap();
        assert!((got2 - ((b + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_entropy_too_short() {
        assert!(matches!(
            sample_entropy(&[1.0, 2.0, 3.0], 2, 0.1),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn katz_line_is_one() {
        let seq: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!((katz_fd(&seq) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn katz_constant_is_one() {
        assert_eq!(katz_fd(&[3.0; 20]), 1.0);
    }

    #[test]
    fn katz_sine_matches_formula_oracle() {
        let n = 100;
        let seq: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
            .collect();
        // Direct formula evaluation.
        let mut path = 0.0;
        for w in seq.windows(2) {
            path += (1.0 + (w[1] - w[0]).powi(2)).sqrt();
        }
        let mut chord: f64 = 0.0;
        for (i, v) in seq.iter().enumerate() {
            chord = chord.max(((i as f64).powi(2) + (v - seq[0]).powi(2)).sqrt());
        }
        let nn = (n - 1) as f64;
        let expect = nn.log10() / (nn.log10() + (chord / path).log10());
        assert!((katz_fd(&seq) - expect).abs() < 1e-12);
        assert!(katz_fd(&seq) >= 1.0);
    }

    #[test]
    fn ventilation_examples() {
        let ramp: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert_eq!(ventilation(&ramp), 10.0);
        assert_eq!(ventilation(&[5.0; 8]), 0.0);
        let falling: Vec<f64> = (0..=10).rev().map(|i| i as f64).collect();
        assert_eq!(ventilation(&falling), 0.0);
        // One sine period of amplitude A integrates to ~2A of positive rise.
        let a = 3.0;
        let n = 400;
        let sine: Vec<f64> = (0..=n)
            .map(|i| a * (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
            .collect();
        let oracle: f64 = sine.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum();
        assert!((ventilation(&sine) - oracle).abs() < 1e-12);
        assert!((ventilation(&sine) - 2.0 * a).abs() / (2.0 * a) < 0.01);
    }

    #[test]
    fn ventilation_telescopes() {
        let mut rng = lcg(23);
        let seq: Vec<f64> = (0..100).map(|_| rng()).collect();
        let rev: Vec<f64> = seq.iter().rev().copied().collect();
        let lhs = ventilation(&seq) - ventilation(&rev);
        let rhs = seq[seq.len() - 1] - seq[0];
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn window_std_examples() {
        assert_eq!(window_std(&[7.0; 5]), 0.0);
        assert_eq!(window_std(&[0.0, 2.0]), 1.0);
        let mut rng = lcg(3);
        let seq: Vec<f64> = (0..500).map(|_| rng() * 4.0).collect();
        let mean = seq.iter().sum::<f64>() / seq.len() as f64;
        let oracle =
            (seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / seq.len() as f64).sqrt();
        assert!((window_std(&seq) - oracle).abs() < 1e-12);
    }

    fn spo2_trace(values: Vec<f64>) -> SignalTrace {
        SignalTrace::new(values, 1.0, 0.0).unwrap()
    }

    #[test]
    fn spo2_drop_constant_is_zero() {
        let tr = spo2_trace(vec![98.0; 200]);
        assert_eq!(spo2_drop(&tr, 100.0, 45.0).unwrap(), 0.0);
    }

    #[test]
    fn spo2_drop_step() {
        let mut v = vec![98.0; 200];
        for x in v.iter_mut().take(140).skip(105) {
            *x = 94.0;
        }
        assert!((spo2_drop(&tr_of(v), 100.0, 45.0).unwrap() - 4.0).abs() < 1e-12);
    }

    fn tr_of(v: Vec<f64>) -> SignalTrace {
        SignalTrace::new(v, 1.0, 0.0).unwrap()
    }

    #[test]
    fn spo2_drop_matches_scan_oracle() {
        let mut rng = lcg(99);
        let v: Vec<f64> = (0..300).map(|_| 96.0 + rng() * 2.0).collect();
        let tr = tr_of(v.clone());
        for &t in &[50.0f64, 100.0, 151.0, 250.0] {
            let lo = ((t - 45.0).max(0.0)).ceil() as usize;
            let hi = ((t + 45.0).min(299.0)).floor() as usize;
            let anchor = t as usize;
            let max_pre = v[lo..=anchor].iter().cloned().fold(f64::MIN, f64::max);
            let min_post = v[anchor..=hi].iter().cloned().fold(f64::MAX, f64::min);
            let expect = (max_pre - min_post).max(0.0);
            assert!((spo2_drop(&tr, t, 45.0).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spo2_robust_contains_plain_and_matches_lag_scan() {
        let mut rng = lcg(41);
        let v: Vec<f64> = (0..400).map(|_| 95.0 + rng() * 3.0).collect();
        let tr = tr_of(v);
        for &t in &[60.0, 120.0, 200.0] {
            let plain = spo2_drop(&tr, t, 45.0).unwrap();
            let robust = spo2_drop_robust(&tr, t, 45.0, 30.0).unwrap();
            assert!(robust >= plain);
            let mut oracle = f64::MIN;
            let mut lag = -30.0f64;
            while lag <= 30.0 {
                if let Ok(d) = spo2_drop(&tr, t + lag, 45.0) {
                    oracle = oracle.max(d);
                }
                lag += 5.0;
            }
            assert!((robust - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn spo2_robust_recovers_shifted_alignment() {
        // Desaturation placed 20 s late relative to the anchor.
        let mut v = vec![97.0; 400];
        for x in v.iter_mut().take(260).skip(225) {
            *x = 92.5;
        }
        let tr = tr_of(v.clone());
        let aligned = spo2_drop(&tr, 220.0, 45.0).unwrap();
        let robust_at_misaligned = spo2_drop_robust(&tr, 200.0, 45.0, 30.0).unwrap();
        assert!((robust_at_misaligned - aligned).abs() < 1e-12);
    }

    #[test]
    fn spo2_drop_missing_coverage() {
        let tr = tr_of(vec![97.0; 100]);
        assert!(matches!(
            spo2_drop(&tr, 500.0, 45.0),
            Err(Error::MissingSignal(_))
        ));
    }
}
