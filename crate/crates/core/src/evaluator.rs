//! Event-level scoring with tolerance-based bipartite matching.

use std::collections::VecDeque;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{peak_pick, EventDetectionFunction, EventList};
use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 0.5;
pub const DEFAULT_SEGMENT: f64 = 1800.0;
pub const DEFAULT_BAND_SPLIT: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// (detected index, reference index)
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// For each left node, the contiguous range of right nodes within `tol`.
fn neighbour_ranges(left: &[f64], right: &[f64], tol: f64) -> Vec<Range<usize>> {
    let mut lo = 0;
    let mut hi = 0;
    left.iter()
        .map(|&t| {
            while lo < right.len() && right[lo] < t - tol {
                lo += 1;
            }
            hi = hi.max(lo);
            while hi < right.len() && right[hi] <= t + tol {
                hi += 1;
            }
            // Guard against rounding in the subtraction above.
            let mut a = lo;
            while a < hi && (right[a] - t).abs() > tol {
                a += 1;
            }
            let mut b = hi;
            while b > a && (right[b - 1] - t).abs() > tol {
                b -= 1;
            }
            a..b
        })
        .collect()
}

/// Maximum-cardinality matching; returns the partner of each left node.
fn hopcroft_karp(adj: &[Range<usize>], n_right: usize) -> Vec<Option<usize>> {
    const INF: usize = usize::MAX;
    let n = adj.len();
    let mut match_l: Vec<Option<usize>> = vec![None; n];
    let mut match_r: Vec<Option<usize>> = vec![None; n_right];
    let mut dist = vec![INF; n];
    let mut next = vec![0usize; n];
    let mut queue = VecDeque::new();
    let mut stack = Vec::new();
    loop {
        queue.clear();
        for u in 0..n {
            if match_l[u].is_none() {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = INF;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for v in adj[u].clone() {
                match match_r[v] {
                    None => found = true,
                    Some(w) if dist[w] == INF => {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                    Some(_) => {}
                }
            }
        }
        if !found {
            break;
        }
        for u in 0..n {
            next[u] = adj[u].start;
        }
        for root in 0..n {
            if match_l[root].is_some() || dist[root] != 0 {
                continue;
            }
            stack.clear();
            stack.push(root);
            while let Some(&x) = stack.last() {
                if next[x] >= adj[x].end {
                    dist[x] = INF;
                    stack.pop();
                    continue;
                }
                let v = next[x];
                next[x] += 1;
                match match_r[v] {
                    None => {
                        for &node in &stack {
                            let vv = next[node] - 1;
                            match_l[node] = Some(vv);
                            match_r[vv] = Some(node);
                        }
                        break;
                    }
                    Some(w) if dist[w] == dist[x].wrapping_add(1) => stack.push(w),
                    Some(_) => {}
                }
            }
        }
    }
    match_l
}

/// Maximum matching of detections to references within `tolerance` seconds.
pub fn match_events(detected: &EventList, reference: &EventList, tolerance: f64) -> MatchResult {
    match_times(&detected.times(), &reference.times(), tolerance)
}

/// As [`match_events`] on sorted time slices.
pub fn match_times(detected: &[f64], reference: &[f64], tolerance: f64) -> MatchResult {
    let adj = neighbour_ranges(detected, reference, tolerance);
    let partner = hopcroft_karp(&adj, reference.len());
    let pairs: Vec<(usize, usize)> = partner
        .iter()
        .enumerate()
        .filter_map(|(d, r)| r.map(|r| (d, r)))
        .collect();
    let tp = pairs.len();
    MatchResult { tp, fp: detected.len() - tp, fn_: reference.len() - tp, pairs }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Precision, recall and F-score; empty denominators give 0.
pub fn prf(m: &MatchResult) -> (f64, f64, f64) {
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_detected: usize,
}

impl PrPoint {
    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision, self.recall);
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// Sorted by increasing threshold.
    pub points: Vec<PrPoint>,
    pub auprc: f64,
}

impl PrCurve {
    /// Point of maximal F-score (lowest threshold among ties).
    pub fn best_f(&self) -> Option<&PrPoint> {
        self.points
            .iter()
            .fold(None, |best: Option<&PrPoint>, p| match best {
                Some(b) if b.f_score() >= p.f_score() => Some(b),
                _ => Some(p),
            })
    }
}

/// `n` evenly spaced thresholds strictly inside (0, 1).
pub fn default_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// Trapezoidal area under precision over recall. Points without any
/// detection carry no precision and are left out; the curve is anchored at
/// recall 0 with the precision of the highest remaining threshold.
pub fn auprc(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<&PrPoint> = points.iter().filter(|p| p.n_detected > 0).collect();
    let Some(top) = pts.iter().max_by(|a, b| a.threshold.total_cmp(&b.threshold)) else {
        return 0.0;
    };
    let anchor = top.precision;
    pts.sort_by(|a, b| a.recall.total_cmp(&b.recall).then(b.threshold.total_cmp(&a.threshold)));
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, anchor);
    for p in pts {
        area += (p.recall - r0) * (p.precision + p0) / 2.0;
        r0 = p.recall;
        p0 = p.precision;
    }
    area.clamp(0.0, 1.0)
}

/// Precision/recall over a threshold sweep of the detection function.
pub fn pr_curve(
    edf: &EventDetectionFunction,
    reference: &EventList,
    min_lag: f64,
    thresholds: &[f64],
    tolerance: f64,
) -> Result<PrCurve> {
    if reference.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("thresholds must be strictly increasing".into()));
    }
    let ref_times = reference.times();
    let points = thresholds
        .par_iter()
        .map(|&tau| {
            let det = peak_pick(edf, tau, min_lag)?;
            let m = match_times(&det.times(), &ref_times, tolerance);
            let (precision, recall, _) = prf(&m);
            Ok(PrPoint { threshold: tau, precision, recall, n_detected: det.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let auprc = auprc(&points);
    Ok(PrCurve { points, auprc })
}

/// Precision/recall of a scored event list, keeping events with
/// confidence above each threshold.
pub fn pr_curve_events(
    detected: &EventList,
    reference: &EventList,
    thresholds: &[f64],
    tolerance: f64,
) -> Result<PrCurve> {
    if reference.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("thresholds must be strictly increasing".into()));
    }
    let ref_times = reference.times();
    let points: Vec<PrPoint> = thresholds
        .iter()
        .map(|&tau| {
            let det: Vec<f64> = detected.events.iter().filter(|e| e.confidence > tau).map(|e| e.time).collect();
            let m = match_times(&det, &ref_times, tolerance);
            let (precision, recall, _) = prf(&m);
            PrPoint { threshold: tau, precision, recall, n_detected: det.len() }
        })
        .collect();
    let auprc = auprc(&points);
    Ok(PrCurve { points, auprc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    High,
    All,
}

impl Band {
    pub fn of(freq_hz: Option<f64>, split: f64) -> Self {
        match freq_hz {
            Some(f) if f < split => Band::Low,
            Some(_) => Band::High,
            None => Band::All,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::High => "high",
            Band::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineCell {
    pub segment: usize,
    pub start: f64,
    pub end: f64,
    pub band: Band,
    pub n_reference: usize,
    pub tp: usize,
    pub recall: f64,
}

/// Recall per (segment, band); cells without reference events are omitted.
pub fn recall_timeline(
    detections: &EventList,
    reference: &EventList,
    segment: f64,
    band_split: f64,
    tolerance: f64,
) -> Result<Vec<TimelineCell>> {
    if !(segment > 0.0) {
        return Err(Error::InvalidArgument(format!("segment length {segment}")));
    }
    let seg_of = |t: f64| (t / segment).floor().max(0.0) as usize;
    let n_seg = reference
        .events
        .iter()
        .map(|e| seg_of(e.time) + 1)
        .max()
        .unwrap_or(0);
    let mut cells = Vec::new();
    for s in 0..n_seg {
        let det: Vec<f64> = detections.events.iter().filter(|e| seg_of(e.time) == s).map(|e| e.time).collect();
        for band in [Band::Low, Band::High, Band::All] {
            let refs: Vec<f64> = reference
                .events
                .iter()
                .filter(|e| seg_of(e.time) == s && Band::of(e.freq_hz, band_split) == band)
                .map(|e| e.time)
                .collect();
            if refs.is_empty() {
                continue;
            }
            let m = match_times(&det, &refs, tolerance);
            cells.push(TimelineCell {
                segment: s,
                start: s as f64 * segment,
                end: (s + 1) as f64 * segment,
                band,
                n_reference: refs.len(),
                tp: m.tp,
                recall: m.tp as f64 / refs.len() as f64,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: String,
}

/// Leave-one-sensor-out folds: fold i tests sensor i, validates on the next
/// two sensors (cyclically) and trains on the rest.
pub fn make_folds<S: AsRef<str>>(ids: &[S]) -> Result<Vec<FoldSpec>> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 sensors, got {n}")));
    }
    let id = |i: usize| ids[i % n].as_ref().to_string();
    // Two validation sensors, except with three sensors where one must be
    // left to train on.
    let n_val = 2.min(n - 2);
    Ok((0..n)
        .map(|i| FoldSpec {
            test: id(i),
            validation: (1..=n_val).map(|k| id(i + k)).collect(),
            train: (n_val + 1..n).map(|k| id(i + k)).collect(),
        })
        .collect())
}
