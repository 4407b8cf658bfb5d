//! Evaluation math: event matching with the dual 50%-overlap rule and the
//! /18 fractional true-negative convention, classification metrics, rank
//! ROC AUC and step-integrated PRC AUC, AHI computation/categorization and
//! reports, binarized-AHI ROC sweeps, SpO2 burden, and confidence intervals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{predictions_to_events, smooth_predictions, WakeRule};
use crate::recording::{quantile_sorted, EventAnnotation, Hypnogram, SignalTrace};

/// Seconds of event-free data that count as one true-negative event.
pub const TRUE_NEGATIVE_UNIT_S: f64 = 18.0;

/// Counts from event-level matching of a prediction list against truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Fractional: event-free seconds divided by 18.
    pub tn: f64,
    /// Per truth kind: (matched, missed).
    pub per_kind: BTreeMap<String, (usize, usize)>,
}

impl MatchCounts {
    pub fn zero() -> Self {
        MatchCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0.0,
            per_kind: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        for (kind, (hit, miss)) in &other.per_kind {
            let entry = self.per_kind.entry(kind.clone()).or_insert((0, 0));
            entry.0 += hit;
            entry.1 += miss;
        }
    }
}

fn merge_intervals(events: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let mut iv: Vec<(f64, f64)> = events.collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

fn overlap_with_union(s: f64, e: f64, union: &[(f64, f64)]) -> f64 {
    // union is sorted and disjoint
    let mut total = 0.0;
    let start = union.partition_point(|&(_, ue)| ue <= s);
    for &(us, ue) in &union[start..] {
        if us >= e {
            break;
        }
        total += (e.min(ue) - s.max(us)).max(0.0);
    }
    total
}

fn union_length(union: &[(f64, f64)], span_s: f64) -> f64 {
    union
        .iter()
        .map(|&(s, e)| (e.min(span_s) - s.max(0.0)).max(0.0))
        .sum()
}

/// Matches predicted events against truth events over `[0, span_s]`.
///
/// A truth event is a true positive when at least 50% of its duration is
/// covered by the union of predictions; a predicted event is a false
/// positive when less than 50% of its duration overlaps the union of truth
/// events. True negatives are the seconds covered by neither side, divided
/// by 18 (the median event length).
pub fn match_events(
    truth: &[EventAnnotation],
    pred: &[EventAnnotation],
    span_s: f64,
) -> MatchCounts {
    let truth_union = merge_intervals(truth.iter().map(|e| (e.start_s, e.end_s())));
    let pred_union = merge_intervals(pred.iter().map(|e| (e.start_s, e.end_s())));

    let mut tp = 0;
    let mut fn_ = 0;
    let mut per_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ev in truth {
        let covered = overlap_with_union(ev.start_s, ev.end_s(), &pred_union);
        let hit = covered >= 0.5 * ev.duration_s;
        let entry = per_kind
            .entry(crate::recording::io::kind_token(ev.kind).to_string())
            .or_insert((0, 0));
        if hit {
            tp += 1;
            entry.0 += 1;
        } else {
            fn_ += 1;
            entry.1 += 1;
        }
    }
    let mut fp = 0;
    for ev in pred {
        let covered = overlap_with_union(ev.start_s, ev.end_s(), &truth_union);
        if covered < 0.5 * ev.duration_s {
            fp += 1;
        }
    }
    let either = merge_intervals(
        truth
            .iter()
            .chain(pred.iter())
            .map(|e| (e.start_s, e.end_s())),
    );
    let covered_s = union_length(&either, span_s);
    let tn = (span_s - covered_s).max(0.0) / TRUE_NEGATIVE_UNIT_S;
    MatchCounts {
        tp,
        fp,
        fn_,
        tn,
        per_kind,
    }
}

/// Standard binary metrics; a metric whose denominator is zero is reported
/// as absent, never NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BinaryMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn binary_metrics(c: &MatchCounts) -> BinaryMetrics {
    let tp = c.tp as f64;
    let fp = c.fp as f64;
    let fn_ = c.fn_ as f64;
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    let sensitivity = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f1 = match (sensitivity, precision) {
        (Some(s), Some(p)) if s + p > 0.0 => Some(2.0 * s * p / (s + p)),
        _ => None,
    };
    BinaryMetrics {
        accuracy: ratio(tp + c.tn, tp + fp + fn_ + c.tn),
        sensitivity,
        precision,
        f1,
        fpr: ratio(fp, fp + c.tn),
    }
}

/// Rank-statistic ROC AUC: P(score+ > score-) + 0.5 P(score+ = score-),
/// computed with average ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "roc_auc needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank over the tie group [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Area under the precision-recall step curve: descending-score sweep,
/// rectangles `delta_recall * precision`, ties handled as one group.
pub fn prc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i])); // descending
    let mut auc = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                tp += 1;
            }
        }
        seen += j - i;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(auc)
}

/// AHI = events per hour of sleep. With `exclude_wake`, events spending more
/// than half their duration in Wake epochs are not counted.
pub fn compute_ahi(
    events: &[EventAnnotation],
    hypnogram: &Hypnogram,
    exclude_wake: bool,
) -> Result<f64> {
    let hours = hypnogram.sleep_hours();
    if hours <= 0.0 {
        return Err(Error::ZeroSleep("AHI denominator is zero".into()));
    }
    let count = events
        .iter()
        .filter(|e| {
            !exclude_wake || hypnogram.wake_overlap_s(e.start_s, e.end_s()) <= 0.5 * e.duration_s
        })
        .count();
    Ok(count as f64 / hours)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum AhiCategory {
    Normal,
    Mild,
    Moderate,
    Severe,
}

pub const AHI_CATEGORIES: [AhiCategory; 4] = [
    AhiCategory::Normal,
    AhiCategory::Mild,
    AhiCategory::Moderate,
    AhiCategory::Severe,
];

/// Severity bands, left-inclusive: [0,5) normal, [5,15) mild, [15,30)
/// moderate, [30, inf) severe.
pub fn categorize_ahi(ahi: f64) -> AhiCategory {
    debug_assert!(ahi >= 0.0);
    if ahi < 5.0 {
        AhiCategory::Normal
    } else if ahi < 15.0 {
        AhiCategory::Mild
    } else if ahi < 30.0 {
        AhiCategory::Moderate
    } else {
        AhiCategory::Severe
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Err(Error::TooFew {
            have: xs.len(),
            need: 2,
        });
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance(
            "pearson undefined for a constant sequence".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Cohort-level AHI agreement report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AhiReport {
    pub n_recordings: usize,
    pub r: f64,
    pub r2: f64,
    /// rows = truth category, cols = predicted category.
    pub confusion: [[usize; 4]; 4],
    pub category_accuracy: f64,
    /// Histogram of predicted - true, bin width 2 centered on 0.
    pub diff_histogram: Vec<DiffBin>,
}

/// Builds the agreement report from per-recording `(ahi_true, ahi_pred)`.
pub fn ahi_report(pairs: &[(f64, f64)]) -> Result<AhiReport> {
    if pairs.len() < 2 {
        return Err(Error::TooFew {
            have: pairs.len(),
            need: 2,
        });
    }
    let truths: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let preds: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let r = pearson(&truths, &preds)?;
    let mut confusion = [[0usize; 4]; 4];
    let mut agree = 0usize;
    for &(t, p) in pairs {
        let ti = categorize_ahi(t) as usize;
        let pi = categorize_ahi(p) as usize;
        confusion[ti][pi] += 1;
        if ti == pi {
            agree += 1;
        }
    }
    // Bin k covers [2k-1, 2k+1).
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &(t, p) in pairs {
        let diff = p - t;
        let k = ((diff + 1.0) / 2.0).floor() as i64;
        *bins.entry(k).or_default() += 1;
    }
    let diff_histogram = bins
        .into_iter()
        .map(|(k, count)| DiffBin {
            lo: 2.0 * k as f64 - 1.0,
            hi: 2.0 * k as f64 + 1.0,
            count,
        })
        .collect();
    Ok(AhiReport {
        n_recordings: pairs.len(),
        r,
        r2: r * r,
        confusion,
        category_accuracy: agree as f64 / pairs.len() as f64,
        diff_histogram,
    })
}

/// Binary split of the four severity bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AhiSplit {
    /// normal vs mild+moderate+severe (cut at 5).
    NormalVsRest,
    /// normal+mild vs moderate+severe (cut at 15).
    UpToMildVsRest,
    /// normal+mild+moderate vs severe (cut at 30).
    SevereVsRest,
}

impl AhiSplit {
    pub fn cut(self) -> f64 {
        match self {
            AhiSplit::NormalVsRest => 5.0,
            AhiSplit::UpToMildVsRest => 15.0,
            AhiSplit::SevereVsRest => 30.0,
        }
    }
}

pub const AHI_SPLITS: [AhiSplit; 3] = [
    AhiSplit::NormalVsRest,
    AhiSplit::UpToMildVsRest,
    AhiSplit::SevereVsRest,
];

/// Per-recording per-second probabilities, anchored at `t0_s`.
#[derive(Debug, Clone)]
pub struct ProbaTrace {
    pub t0_s: i64,
    pub proba: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub split: AhiSplit,
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over a binarized AHI categorization task. For each of 101 thresholds
/// in [0, 1], every recording's predicted AHI is rebuilt (threshold, smooth,
/// events, wake exclusion, AHI) and binarized at the split's cut; truth AHIs
/// are binarized the same way. AUC is the trapezoid over sorted FPR.
pub fn ahi_category_roc(
    recordings: &[(ProbaTrace, &Hypnogram, f64)],
    split: AhiSplit,
    i_positive_predictions: usize,
    wake_rule: WakeRule,
) -> Result<RocCurve> {
    let cut = split.cut();
    let truth: Vec<bool> = recordings.iter().map(|r| r.2 >= cut).collect();
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "split {split:?} has one side empty ({n_pos} vs {n_neg})"
        )));
    }
    let mut points = Vec::with_capacity(101);
    for step in 0..=100u32 {
        let threshold = step as f64 / 100.0;
        let mut tp = 0;
        let mut fp = 0;
        for ((trace, hyp, _), &is_pos) in recordings.iter().zip(&truth) {
            let hard: Vec<u8> = trace
                .proba
                .iter()
                .map(|&p| (p >= threshold) as u8)
                .collect();
            let smoothed = smooth_predictions(&hard, i_positive_predictions);
            let events = predictions_to_events(&smoothed, trace.t0_s, hyp, wake_rule);
            let ahi = compute_ahi(&events, hyp, false).unwrap_or(0.0);
            if ahi >= cut {
                if is_pos {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        points.push(RocPoint {
            threshold,
            sensitivity: tp as f64 / n_pos as f64,
            specificity: 1.0 - fp as f64 / n_neg as f64,
        });
    }
    // Trapezoid over sorted FPR with the (0,0) and (1,1) endpoints pinned.
    let mut xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (1.0 - p.specificity, p.sensitivity))
        .collect();
    xy.push((0.0, 0.0));
    xy.push((1.0, 1.0));
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut auc = 0.0;
    for w in xy.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
    }
    Ok(RocCurve { split, points, auc })
}

/// Time-averaged SpO2 deficit below the sleep-time median: mean over sleep
/// samples of `max(0, median - value)`.
pub fn spo2_burden(spo2: &SignalTrace, hypnogram: &Hypnogram) -> Result<f64> {
    let mut sleep_values = Vec::new();
    for i in 0..spo2.len() {
        if hypnogram.stage_at(spo2.time_of(i)).is_sleep() {
            sleep_values.push(spo2.samples()[i]);
        }
    }
    if sleep_values.is_empty() {
        return Err(Error::ZeroSleep("no sleep samples for SpO2 burden".into()));
    }
    let mut sorted = sleep_values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let deficit: f64 = sleep_values.iter().map(|&v| (median - v).max(0.0)).sum();
    Ok(deficit / sleep_values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub n: usize,
}

/// Sample mean with the 1.96 * sd / sqrt(n) normal-approximation interval.
pub fn mean_ci(values: &[f64]) -> Result<MeanCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFew { have: n, need: 2 });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = 1.96 * (var.sqrt() / (n as f64).sqrt());
    Ok(MeanCi {
        mean,
        lo95: mean - half,
        hi95: mean + half,
        n,
    })
}

/// Drops items with fewer than `min_events` truth events; returns the kept
/// items and how many were excluded.
pub fn filter_min_events<T>(
    items: Vec<T>,
    truth_events: impl Fn(&T) -> usize,
    min_events: usize,
) -> (Vec<T>, usize) {
    let before = items.len();
    let kept: Vec<T> = items
        .into_iter()
        .filter(|it| truth_events(it) >= min_events)
        .collect();
    let excluded = before - kept.len();
    (kept, excluded)
}
