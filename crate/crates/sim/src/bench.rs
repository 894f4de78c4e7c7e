//! Correlator throughput on lazily generated synthetic streams.

use std::time::Instant;

use sdm_core::coincidence::{count_coincidences, cross_correlate};
use serde::{Deserialize, Serialize};

use crate::SimError;

pub const DEFAULT_BENCH_TAGS: u64 = 100_000_000;
pub const TARGET_TAGS_PER_S: f64 = 1e7;

/// Sorted timestamps with pseudo-random gaps of mean `mean_gap_ps`.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    state: u64,
    t: u64,
    remaining: u64,
    mean_gap_ps: u64,
}

impl SyntheticStream {
    pub fn new(seed: u64, len: u64, mean_gap_ps: u64) -> Self {
        assert!(mean_gap_ps >= 2);
        SyntheticStream { state: seed | 1, t: 0, remaining: len, mean_gap_ps }
    }
}

impl Iterator for SyntheticStream {
    type Item = u64;

    #[inline]
    fn next(&mut self) -> Option<u64> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        // xorshift64*; uniform gaps in [1, 2·mean).
        self.state ^= self.state >> 12;
        self.state ^= self.state << 25;
        self.state ^= self.state >> 27;
        let r = self.state.wrapping_mul(0x2545_f491_4f6c_dd1d);
        self.t += 1 + r % (2 * self.mean_gap_ps - 1);
        Some(self.t)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining as usize, Some(self.remaining as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub seconds: f64,
    pub tags_per_s: f64,
    /// Throughput after subtracting the time spent generating the tags.
    pub net_tags_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total_tags: u64,
    pub threads: usize,
    pub generation_seconds: f64,
    pub coincidences: u64,
    pub coincidence_count: Throughput,
    pub histogram_total: u64,
    pub cross_correlation: Throughput,
    pub target_tags_per_s: f64,
    pub meets_target: bool,
}

fn throughput(total: u64, seconds: f64, generation: f64) -> Throughput {
    let net = (seconds - generation).max(1e-9);
    Throughput { seconds, tags_per_s: total as f64 / seconds.max(1e-9), net_tags_per_s: total as f64 / net }
}

/// Single-threaded run over two streams of `total_tags / 2` tags each.
pub fn run_bench(total_tags: u64) -> Result<BenchReport, SimError> {
    let n = total_tags / 2;
    // 5 µs mean gap: 200 kcps per stream.
    let gap = 5_000_000;
    let (sa, sb) = (0x9e37_79b9_7f4a_7c15, 0xd1b5_4a32_d192_ed03);

    let start = Instant::now();
    let mut last = 0u64;
    for t in SyntheticStream::new(sa, n, gap).chain(SyntheticStream::new(sb, n, gap)) {
        last ^= t;
    }
    std::hint::black_box(last);
    let generation = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let r = count_coincidences(SyntheticStream::new(sa, n, gap), SyntheticStream::new(sb, n, gap), 1_000, 0).map_err(SimError::runtime)?;
    let cc = throughput(2 * n, start.elapsed().as_secs_f64(), generation);

    let start = Instant::now();
    let h = cross_correlate(SyntheticStream::new(sa, n, gap), SyntheticStream::new(sb, n, gap), 100, 10_000).map_err(SimError::runtime)?;
    let xc = throughput(2 * n, start.elapsed().as_secs_f64(), generation);

    Ok(BenchReport {
        total_tags: 2 * n,
        threads: 1,
        generation_seconds: generation,
        coincidences: r.coincidences,
        coincidence_count: cc,
        histogram_total: h.total(),
        cross_correlation: xc,
        target_tags_per_s: TARGET_TAGS_PER_S,
        meets_target: cc.tags_per_s >= TARGET_TAGS_PER_S,
    })
}
