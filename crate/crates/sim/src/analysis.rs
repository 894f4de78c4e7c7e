//! Delay discovery and coincidence counting over the channels of one
//! acquisition.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use sdm_core::coincidence::{count_coincidences_with, search_delay, CoincidenceOptions, CoincidenceResult, DelaySearch};
use sdm_core::detection::{check_sorted, TtagReader};
use serde::{Deserialize, Serialize};

use crate::{ConfigError, SimError};

/// A correlation peak counts as found above this significance and height.
pub const MIN_SIGNIFICANCE: f64 = 6.0;
pub const MIN_PEAK_COUNTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMethod {
    /// Peak of the pair's own cross-correlation.
    Direct,
    /// Sum of direct delays along a path of significant pairs.
    Graph,
    /// No correlation reachable; zero assumed.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelay {
    pub channel_a: u16,
    pub channel_b: u16,
    pub delay_ps: i64,
    pub significance: f64,
    pub method: DelayMethod,
}

/// Delays for every requested channel pair.
///
/// Pairs without a significant peak of their own inherit the delay implied by
/// the per-channel offsets solved over the significant ones.
pub fn find_delays<'a, F>(stream: F, pairs: &[(u16, u16)], search: &DelaySearch) -> Result<Vec<PairDelay>, SimError>
where
    F: Fn(u16) -> &'a [u64],
{
    let mut out = Vec::with_capacity(pairs.len());
    let mut edges: BTreeMap<u16, Vec<(u16, i64)>> = BTreeMap::new();
    for &(a, b) in pairs {
        let est = match search_delay(stream(a), stream(b), search) {
            Ok(e) => Some(e),
            Err(sdm_core::coincidence::CoincidenceError::NoSignal) => None,
            Err(e) => return Err(SimError::runtime(e)),
        };
        let (delay, sig, ok) = match est {
            Some(e) => (e.delay_ps, e.coarse.significance, e.coarse.significance >= MIN_SIGNIFICANCE && e.coarse.peak_counts >= MIN_PEAK_COUNTS),
            None => (0, 0.0, false),
        };
        if ok {
            edges.entry(a).or_default().push((b, delay));
            edges.entry(b).or_default().push((a, -delay));
        }
        out.push(PairDelay {
            channel_a: a,
            channel_b: b,
            delay_ps: delay,
            significance: sig,
            method: if ok { DelayMethod::Direct } else { DelayMethod::Unresolved },
        });
    }
    let offsets = solve_offsets(&edges);
    for d in out.iter_mut().filter(|d| d.method == DelayMethod::Unresolved) {
        match (offsets.get(&d.channel_a), offsets.get(&d.channel_b)) {
            (Some((ra, oa)), Some((rb, ob))) if ra == rb => {
                d.delay_ps = ob - oa;
                d.method = DelayMethod::Graph;
            }
            _ => d.delay_ps = 0,
        }
    }
    Ok(out)
}

/// Offsets of each channel relative to the lowest channel of its connected
/// component: `channel → (root, offset)`.
pub fn solve_offsets(edges: &BTreeMap<u16, Vec<(u16, i64)>>) -> BTreeMap<u16, (u16, i64)> {
    let mut out: BTreeMap<u16, (u16, i64)> = BTreeMap::new();
    for &root in edges.keys() {
        if out.contains_key(&root) {
            continue;
        }
        out.insert(root, (root, 0));
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            let base = out[&n].1;
            for &(m, d) in &edges[&n] {
                if let std::collections::btree_map::Entry::Vacant(v) = out.entry(m) {
                    v.insert((root, base + d));
                    queue.push_back(m);
                }
            }
        }
    }
    out
}

/// Per-channel offsets implied by a set of pair delays (direct ones only).
pub fn channel_offsets(delays: &[PairDelay]) -> BTreeMap<u16, (u16, i64)> {
    let mut edges: BTreeMap<u16, Vec<(u16, i64)>> = BTreeMap::new();
    for d in delays.iter().filter(|d| d.method == DelayMethod::Direct) {
        edges.entry(d.channel_a).or_default().push((d.channel_b, d.delay_ps));
        edges.entry(d.channel_b).or_default().push((d.channel_a, -d.delay_ps));
    }
    solve_offsets(&edges)
}

pub fn coincidences(a: &[u64], b: &[u64], window_ps: u64, delay_ps: i64, duration_ps: u64) -> Result<CoincidenceResult, SimError> {
    count_coincidences_with(
        a.iter().copied(),
        b.iter().copied(),
        window_ps,
        delay_ps,
        &CoincidenceOptions { duration_ps: Some(duration_ps), ..Default::default() },
    )
    .map_err(SimError::runtime)
}

/// All streams of a directory of TTAG files, keyed by the channel recorded
/// in each tag.
pub fn load_tag_dir(dir: &Path) -> Result<BTreeMap<u16, Vec<u64>>, SimError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| SimError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ttag"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SimError::runtime(format!("no .ttag files in {}", dir.display())));
    }
    let mut streams: BTreeMap<u16, Vec<u64>> = BTreeMap::new();
    for f in &files {
        let reader = TtagReader::open(f).map_err(|e| SimError::runtime(format!("{}: {e}", f.display())))?;
        for tag in reader {
            let tag = tag.map_err(|e| SimError::runtime(format!("{}: {e}", f.display())))?;
            streams.entry(tag.channel).or_default().push(tag.timestamp_ps);
        }
    }
    for s in streams.values_mut() {
        if check_sorted(s).is_err() {
            // One channel may span several files; restore time order.
            s.sort_unstable();
        }
    }
    Ok(streams)
}

/// Parse `a-b,c-d` channel pairs.
pub fn parse_pairs(spec: &str) -> Result<Vec<(u16, u16)>, ConfigError> {
    let bad = |m: String| ConfigError::Invalid { key: "--pairs".into(), message: m };
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = part.split_once('-').ok_or_else(|| bad(format!("`{part}` is not of the form a-b")))?;
        let a: u16 = a.trim().parse().map_err(|_| bad(format!("`{a}` is not a channel id")))?;
        let b: u16 = b.trim().parse().map_err(|_| bad(format!("`{b}` is not a channel id")))?;
        out.push((a, b));
    }
    if out.is_empty() {
        return Err(bad("no pairs given".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedPair {
    pub channel_a: u16,
    pub channel_b: u16,
    pub delay_ps: i64,
    pub delay_method: Option<DelayMethod>,
    pub coincidences: u64,
    pub singles: (u64, u64),
    pub accidental_estimate: f64,
}

/// Coincidences of stored streams; delays are searched unless given.
pub fn analyze_streams(
    streams: &BTreeMap<u16, Vec<u64>>,
    pairs: &[(u16, u16)],
    window_ps: u64,
    delay_ps: Option<i64>,
) -> Result<Vec<AnalyzedPair>, SimError> {
    for &(a, b) in pairs {
        for c in [a, b] {
            if !streams.contains_key(&c) {
                return Err(SimError::runtime(format!("channel {c} not present in the tag files")));
            }
        }
    }
    let get = |c: u16| streams[&c].as_slice();
    let delays: Vec<(i64, Option<DelayMethod>)> = match delay_ps {
        Some(d) => vec![(d, None); pairs.len()],
        None => find_delays(get, pairs, &DelaySearch::default())?.into_iter().map(|d| (d.delay_ps, Some(d.method))).collect(),
    };
    pairs
        .iter()
        .zip(delays)
        .map(|(&(a, b), (d, method))| {
            let r = count_coincidences_with(get(a).iter().copied(), get(b).iter().copied(), window_ps, d, &CoincidenceOptions::default())
                .map_err(SimError::runtime)?;
            Ok(AnalyzedPair {
                channel_a: a,
                channel_b: b,
                delay_ps: d,
                delay_method: method,
                coincidences: r.coincidences,
                singles: r.singles,
                accidental_estimate: r.accidental_estimate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_follow_paths() {
        let mut e: BTreeMap<u16, Vec<(u16, i64)>> = BTreeMap::new();
        for (a, b, d) in [(1u16, 4u16, 100i64), (4, 2, -30), (7, 8, 5)] {
            e.entry(a).or_default().push((b, d));
            e.entry(b).or_default().push((a, -d));
        }
        let o = solve_offsets(&e);
        assert_eq!(o[&1], (1, 0));
        assert_eq!(o[&4], (1, 100));
        assert_eq!(o[&2], (1, 70));
        assert_eq!(o[&8], (7, 5));
    }

    #[test]
    fn weak_pair_inherits_graph_delay() {
        // 1 and 3 share no pairs; both correlate with 2.
        let a: Vec<u64> = (0..2000u64).map(|i| 10_000_000 + i * 5_000_000).collect();
        let b: Vec<u64> = a.iter().map(|t| t + 2_345_678).collect();
        let mut s2: Vec<u64> = a.iter().chain(&b).map(|t| t + 1000).collect();
        s2.sort_unstable();
        let s3: Vec<u64> = b.iter().map(|t| t + 600).collect();
        let streams: BTreeMap<u16, Vec<u64>> = [(1, a), (2, s2), (3, s3)].into_iter().collect();
        let get = |c: u16| streams[&c].as_slice();
        let d = find_delays(get, &[(1, 2), (2, 3), (1, 3)], &DelaySearch::default()).unwrap();
        assert_eq!(d[0].method, DelayMethod::Direct);
        assert!((d[0].delay_ps - 1000).abs() <= 5);
        assert!((d[1].delay_ps + 400).abs() <= 5);
        assert_eq!(d[2].method, DelayMethod::Graph);
        assert!((d[2].delay_ps - 600).abs() <= 10);
        assert!((channel_offsets(&d)[&3].1 - 600).abs() <= 10);
    }

    #[test]
    fn pair_spec_parsing() {
        assert_eq!(parse_pairs("1-4, 34-42").unwrap(), vec![(1, 4), (34, 42)]);
        for bad in ["", "1", "1-x", "1-4,,2_3"] {
            assert!(parse_pairs(bad).is_err(), "{bad}");
        }
    }
}
