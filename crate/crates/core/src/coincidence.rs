//! Streaming analysis of sorted time-tag streams: cross-correlation
//! histograms, windowed coincidence counting and delay search.
//!
//! Every entry point accepts any `IntoIterator<Item = u64>` and consumes it in
//! one forward pass while holding only the tags inside the current window, so
//! streams read lazily from disk are never materialised.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::PS_PER_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoincidenceError {
    #[error("stream {stream} not sorted at index {index}: {previous} > {current}")]
    Unsorted { stream: Side, index: u64, previous: u64, current: u64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("no signal: histogram is empty")]
    NoSignal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::A => "a",
            Side::B => "b",
        })
    }
}

/// Sortedness-checking wrapper that also tracks count, first and last tag.
struct Checked<I> {
    inner: I,
    side: Side,
    count: u64,
    first: Option<u64>,
    last: Option<u64>,
}

impl<I: Iterator<Item = u64>> Checked<I> {
    fn new(inner: I, side: Side) -> Self {
        Checked { inner, side, count: 0, first: None, last: None }
    }

    fn pull(&mut self) -> Result<Option<u64>, CoincidenceError> {
        let Some(t) = self.inner.next() else { return Ok(None) };
        if let Some(prev) = self.last {
            if t < prev {
                return Err(CoincidenceError::Unsorted { stream: self.side, index: self.count, previous: prev, current: t });
            }
        }
        if self.first.is_none() {
            self.first = Some(t);
        }
        self.last = Some(t);
        self.count += 1;
        Ok(Some(t))
    }

    fn drain(&mut self) -> Result<(), CoincidenceError> {
        while self.pull()?.is_some() {}
        Ok(())
    }
}

fn span_ps(a: (Option<u64>, Option<u64>), b: (Option<u64>, Option<u64>)) -> u64 {
    let first = [a.0, b.0].into_iter().flatten().min();
    let last = [a.1, b.1].into_iter().flatten().max();
    match (first, last) {
        (Some(f), Some(l)) => l - f,
        _ => 0,
    }
}

/// Histogram of delays `t_b − t_a` over `[offset − range, offset + range)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width_ps: u64,
    pub range_ps: u64,
    pub offset_ps: i64,
    pub bins: Vec<u64>,
    pub total_tags: (u64, u64),
    pub integration_time_s: f64,
}

impl CorrelationHistogram {
    fn empty(bin_width_ps: u64, range_ps: u64, offset_ps: i64) -> Result<Self, CoincidenceError> {
        if bin_width_ps == 0 || range_ps == 0 {
            return Err(CoincidenceError::Parameter("bin width and range must be positive".into()));
        }
        if (2 * range_ps) % bin_width_ps != 0 {
            return Err(CoincidenceError::Parameter(format!(
                "range 2×{range_ps} ps is not a multiple of bin width {bin_width_ps} ps"
            )));
        }
        Ok(CorrelationHistogram {
            bin_width_ps,
            range_ps,
            offset_ps,
            bins: vec![0; (2 * range_ps / bin_width_ps) as usize],
            total_tags: (0, 0),
            integration_time_s: 0.0,
        })
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    /// Lower edge of bin `k`, ps.
    pub fn bin_start(&self, k: usize) -> i64 {
        self.offset_ps - self.range_ps as i64 + (k as i64) * self.bin_width_ps as i64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.bin_start(k) as f64 + 0.5 * self.bin_width_ps as f64
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// `delay_ps,counts` rows keyed by bin centre.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delay_ps,counts\n");
        for (k, c) in self.bins.iter().enumerate() {
            s.push_str(&format!("{},{}\n", self.bin_center(k), c));
        }
        s
    }

    fn add(&mut self, other: &CorrelationHistogram) {
        for (x, y) in self.bins.iter_mut().zip(&other.bins) {
            *x += y;
        }
    }
}

/// Cross-correlation histogram centred on zero delay.
pub fn cross_correlate<A, B>(a: A, b: B, bin_width_ps: u64, range_ps: u64) -> Result<CorrelationHistogram, CoincidenceError>
where
    A: IntoIterator<Item = u64>,
    B: IntoIterator<Item = u64>,
{
    cross_correlate_offset(a, b, bin_width_ps, range_ps, 0)
}

/// Cross-correlation histogram centred on `offset_ps`.
pub fn cross_correlate_offset<A, B>(
    a: A,
    b: B,
    bin_width_ps: u64,
    range_ps: u64,
    offset_ps: i64,
) -> Result<CorrelationHistogram, CoincidenceError>
where
    A: IntoIterator<Item = u64>,
    B: IntoIterator<Item = u64>,
{
    let mut hist = CorrelationHistogram::empty(bin_width_ps, range_ps, offset_ps)?;
    let mut sa = Checked::new(a.into_iter(), Side::A);
    let mut sb = Checked::new(b.into_iter(), Side::B);
    let lo_off = offset_ps as i128 - range_ps as i128;
    let hi_off = offset_ps as i128 + range_ps as i128;
    let bw = bin_width_ps as i128;
    let mut window: VecDeque<i128> = VecDeque::new();
    let mut pending: Option<i128> = sb.pull()?.map(i128::from);
    while let Some(ta) = sa.pull()? {
        let ta = ta as i128;
        let lo = ta + lo_off;
        let hi = ta + hi_off;
        while window.front().is_some_and(|&tb| tb < lo) {
            window.pop_front();
        }
        while let Some(tb) = pending {
            if tb >= hi {
                break;
            }
            if tb >= lo {
                window.push_back(tb);
            }
            pending = sb.pull()?.map(i128::from);
        }
        for &tb in &window {
            hist.bins[((tb - lo) / bw) as usize] += 1;
        }
    }
    sb.drain()?;
    hist.total_tags = (sa.count, sb.count);
    hist.integration_time_s = span_ps((sa.first, sa.last), (sb.first, sb.last)) as f64 / PS_PER_S;
    Ok(hist)
}

/// Same histogram as [`cross_correlate_offset`], computed on `threads`
/// time partitions of `a`, each paired with the slice of `b` inside its halo.
pub fn cross_correlate_parallel(
    a: &[u64],
    b: &[u64],
    bin_width_ps: u64,
    range_ps: u64,
    offset_ps: i64,
    partitions: usize,
) -> Result<CorrelationHistogram, CoincidenceError> {
    crate::detection::check_sorted(a).map_err(|e| unsorted(e, Side::A))?;
    crate::detection::check_sorted(b).map_err(|e| unsorted(e, Side::B))?;
    let mut hist = CorrelationHistogram::empty(bin_width_ps, range_ps, offset_ps)?;
    let parts = partitions.max(1);
    let chunk = a.len().div_ceil(parts).max(1);
    let partials: Vec<Result<CorrelationHistogram, CoincidenceError>> = a
        .par_chunks(chunk)
        .map(|ca| {
            let lo = ca[0] as i128 + offset_ps as i128 - range_ps as i128;
            let hi = ca[ca.len() - 1] as i128 + offset_ps as i128 + range_ps as i128;
            let start = b.partition_point(|&t| (t as i128) < lo);
            let end = b.partition_point(|&t| (t as i128) < hi);
            cross_correlate_offset(ca.iter().copied(), b[start..end].iter().copied(), bin_width_ps, range_ps, offset_ps)
        })
        .collect();
    for p in partials {
        hist.add(&p?);
    }
    hist.total_tags = (a.len() as u64, b.len() as u64);
    let first = [a.first(), b.first()].into_iter().flatten().min().copied();
    let last = [a.last(), b.last()].into_iter().flatten().max().copied();
    hist.integration_time_s = span_ps((first, last), (None, None)) as f64 / PS_PER_S;
    Ok(hist)
}

fn unsorted(e: crate::detection::DetectionError, side: Side) -> CoincidenceError {
    match e {
        crate::detection::DetectionError::Unsorted { index, previous, current } => {
            CoincidenceError::Unsorted { stream: side, index: index as u64, previous, current }
        }
        other => CoincidenceError::Parameter(other.to_string()),
    }
}

/// How tags are paired inside the coincidence window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Each tag joins at most one coincidence, earliest partner first.
    #[default]
    Greedy,
    /// Every pair inside the window counts.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoincidenceOptions {
    pub mode: PairingMode,
    /// Acquisition time used for the accidental estimate; the stream span when `None`.
    pub duration_ps: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceResult {
    pub coincidences: u64,
    pub window_ps: u64,
    pub delay_ps: i64,
    pub singles: (u64, u64),
    pub accidental_estimate: f64,
    pub integration_time_s: f64,
}

/// Greedy coincidence count of pairs with `|t_b − t_a − delay| ≤ window/2`.
pub fn count_coincidences<A, B>(a: A, b: B, window_ps: u64, delay_ps: i64) -> Result<CoincidenceResult, CoincidenceError>
where
    A: IntoIterator<Item = u64>,
    B: IntoIterator<Item = u64>,
{
    count_coincidences_with(a, b, window_ps, delay_ps, &CoincidenceOptions::default())
}

pub fn count_coincidences_with<A, B>(
    a: A,
    b: B,
    window_ps: u64,
    delay_ps: i64,
    options: &CoincidenceOptions,
) -> Result<CoincidenceResult, CoincidenceError>
where
    A: IntoIterator<Item = u64>,
    B: IntoIterator<Item = u64>,
{
    if window_ps == 0 {
        return Err(CoincidenceError::Parameter("coincidence window must be positive".into()));
    }
    let mut sa = Checked::new(a.into_iter(), Side::A);
    let mut sb = Checked::new(b.into_iter(), Side::B);
    let w = window_ps as i128;
    let delay = delay_ps as i128;
    let mut coincidences = 0u64;
    match options.mode {
        PairingMode::Greedy => {
            let mut ca = sa.pull()?;
            let mut cb = sb.pull()?;
            while let (Some(ta), Some(tb)) = (ca, cb) {
                // 2d compared with the window keeps the half-window exact.
                let d2 = 2 * (tb as i128 - ta as i128 - delay);
                if d2 < -w {
                    cb = sb.pull()?;
                } else if d2 > w {
                    ca = sa.pull()?;
                } else {
                    coincidences += 1;
                    ca = sa.pull()?;
                    cb = sb.pull()?;
                }
            }
        }
        PairingMode::AllPairs => {
            let mut window: VecDeque<i128> = VecDeque::new();
            let mut pending: Option<i128> = sb.pull()?.map(i128::from);
            while let Some(ta) = sa.pull()? {
                let centre2 = 2 * (ta as i128 + delay);
                while window.front().is_some_and(|&tb| 2 * tb < centre2 - w) {
                    window.pop_front();
                }
                while let Some(tb) = pending {
                    if 2 * tb > centre2 + w {
                        break;
                    }
                    if 2 * tb >= centre2 - w {
                        window.push_back(tb);
                    }
                    pending = sb.pull()?.map(i128::from);
                }
                coincidences += window.len() as u64;
            }
        }
    }
    sa.drain()?;
    sb.drain()?;
    let span = options.duration_ps.unwrap_or_else(|| span_ps((sa.first, sa.last), (sb.first, sb.last)));
    let accidental_estimate = if span > 0 { sa.count as f64 * sb.count as f64 * window_ps as f64 / span as f64 } else { 0.0 };
    Ok(CoincidenceResult {
        coincidences,
        window_ps,
        delay_ps,
        singles: (sa.count, sb.count),
        accidental_estimate,
        integration_time_s: span as f64 / PS_PER_S,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakDelay {
    pub delay_ps: f64,
    /// Excess of the peak bin over the median bin, in units of √median.
    pub significance: f64,
    pub peak_counts: u64,
}

fn median(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

pub fn find_peak_delay(hist: &CorrelationHistogram) -> Result<PeakDelay, CoincidenceError> {
    if hist.bins.is_empty() {
        return Err(CoincidenceError::Parameter("histogram has no bins".into()));
    }
    let (k, &max) = hist.bins.iter().enumerate().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(&x.0))).expect("non-empty");
    if max == 0 {
        return Err(CoincidenceError::NoSignal);
    }
    let med = median(&hist.bins);
    Ok(PeakDelay { delay_ps: hist.bin_center(k), significance: (max as f64 - med) / med.max(1.0).sqrt(), peak_counts: max })
}

/// Coarse-then-fine search for the delay maximising the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelaySearch {
    pub coarse_bin_ps: u64,
    pub coarse_range_ps: u64,
    pub fine_bin_ps: u64,
    pub fine_range_ps: u64,
}

impl Default for DelaySearch {
    fn default() -> Self {
        DelaySearch { coarse_bin_ps: 1_000, coarse_range_ps: 100_000, fine_bin_ps: 10, fine_range_ps: 2_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub delay_ps: i64,
    pub coarse: PeakDelay,
    pub fine: PeakDelay,
}

pub fn search_delay(a: &[u64], b: &[u64], search: &DelaySearch) -> Result<DelayEstimate, CoincidenceError> {
    let coarse = find_peak_delay(&cross_correlate(a.iter().copied(), b.iter().copied(), search.coarse_bin_ps, search.coarse_range_ps)?)?;
    let centre = coarse.delay_ps.round() as i64;
    let fine_hist = cross_correlate_offset(a.iter().copied(), b.iter().copied(), search.fine_bin_ps, search.fine_range_ps, centre)?;
    let fine = find_peak_delay(&fine_hist)?;
    // Centre of mass over the fine peak ±3 bins suppresses bin-edge bias.
    let k = ((fine.delay_ps - fine_hist.bin_start(0) as f64) / search.fine_bin_ps as f64).floor() as usize;
    let lo = k.saturating_sub(3);
    let hi = (k + 4).min(fine_hist.bin_count());
    let (mut m0, mut m1) = (0.0, 0.0);
    for j in lo..hi {
        let c = fine_hist.bins[j] as f64;
        m0 += c;
        m1 += c * fine_hist.bin_center(j);
    }
    let delay_ps = if m0 > 0.0 { (m1 / m0).round() as i64 } else { fine.delay_ps.round() as i64 };
    Ok(DelayEstimate { delay_ps, coarse, fine })
}
