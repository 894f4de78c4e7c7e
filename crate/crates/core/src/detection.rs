//! Polarization analyzer modules, SNSPD detector response and the TTAG
//! time-tag file format.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polarization::{port_distribution, Analyzer, PolarizationState, Port};
use crate::PS_PER_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("arrival stream not sorted at index {index}: {previous} > {current}")]
    Unsorted { index: usize, previous: u64, current: u64 },
    #[error("invalid detector model: {0}")]
    InvalidModel(String),
}

/// Superconducting nanowire detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorModel {
    pub efficiency: f64,
    pub dark_rate_hz: f64,
    pub jitter_sigma_ps: f64,
    pub dead_time_ns: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel { efficiency: 0.80, dark_rate_hz: 100.0, jitter_sigma_ps: 50.0, dead_time_ns: 50.0 }
    }
}

impl DetectorModel {
    /// Perfect detector: every photon registered at its exact arrival time.
    pub fn ideal() -> Self {
        DetectorModel { efficiency: 1.0, dark_rate_hz: 0.0, jitter_sigma_ps: 0.0, dead_time_ns: 0.0 }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(DetectionError::InvalidModel(format!("efficiency {} outside [0, 1]", self.efficiency)));
        }
        for (name, v) in [
            ("dark_rate_hz", self.dark_rate_hz),
            ("jitter_sigma_ps", self.jitter_sigma_ps),
            ("dead_time_ns", self.dead_time_ns),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DetectionError::InvalidModel(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn dead_time_ps(&self) -> u64 {
        (self.dead_time_ns * 1e3).round() as u64
    }
}

/// One detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeTag {
    pub timestamp_ps: u64,
    pub channel: u16,
}

impl TimeTag {
    pub fn new(timestamp_ps: u64, channel: u16) -> Self {
        TimeTag { timestamp_ps, channel }
    }
}

/// Sample the joint output ports of the two analyzer modules.
pub fn analyze_polarization<R: Rng + ?Sized>(state: &PolarizationState, a: Analyzer, b: Analyzer, rng: &mut R) -> (Port, Port) {
    let p = port_distribution(state, a, b);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for pa in Port::BOTH {
        for pb in Port::BOTH {
            acc += p[pa.index()][pb.index()];
            if u < acc {
                return (pa, pb);
            }
        }
    }
    (Port::Reflected, Port::Reflected)
}

pub fn check_sorted(stream: &[u64]) -> Result<(), DetectionError> {
    match stream.windows(2).position(|w| w[0] > w[1]) {
        None => Ok(()),
        Some(i) => Err(DetectionError::Unsorted { index: i + 1, previous: stream[i], current: stream[i + 1] }),
    }
}

/// Detector response to a sorted photon arrival stream over `[0, duration_ps)`.
///
/// Efficiency thinning, Gaussian jitter, uniform dark counts and a
/// non-paralyzable dead time, in that order.
pub fn detect<R: Rng + ?Sized>(
    arrivals: &[u64],
    model: &DetectorModel,
    duration_ps: u64,
    rng: &mut R,
) -> Result<Vec<u64>, DetectionError> {
    model.validate()?;
    check_sorted(arrivals)?;
    let mut out: Vec<u64> = Vec::with_capacity((arrivals.len() as f64 * model.efficiency) as usize + 16);
    if model.efficiency >= 1.0 {
        out.extend_from_slice(arrivals);
    } else {
        out.extend(arrivals.iter().copied().filter(|_| rng.random::<f64>() < model.efficiency));
    }
    if model.jitter_sigma_ps > 0.0 {
        for t in out.iter_mut() {
            let dt: f64 = rng.sample::<f64, _>(StandardNormal) * model.jitter_sigma_ps;
            *t = (*t as f64 + dt).round().max(0.0) as u64;
        }
        out.sort_unstable();
    }
    let mean_dark = model.dark_rate_hz * duration_ps as f64 / PS_PER_S;
    if mean_dark > 0.0 {
        let n = Poisson::new(mean_dark).expect("positive finite mean").sample(rng) as usize;
        let mut dark: Vec<u64> = (0..n).map(|_| rng.random_range(0..duration_ps.max(1))).collect();
        dark.sort_unstable();
        out = merge_sorted(&out, &dark);
    }
    let dead = model.dead_time_ps();
    if dead > 0 && out.len() > 1 {
        let mut last: Option<u64> = None;
        out.retain(|&t| match last {
            Some(l) if t - l < dead => false,
            _ => {
                last = Some(t);
                true
            }
        });
    }
    Ok(out)
}

pub fn merge_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Merge per-channel streams into one chronological tag list (ties by channel).
pub fn merge_channels(streams: &[(u16, Vec<u64>)]) -> Vec<TimeTag> {
    let mut tags: Vec<TimeTag> = streams
        .iter()
        .flat_map(|(ch, ts)| ts.iter().map(move |&t| TimeTag::new(t, *ch)))
        .collect();
    tags.sort_unstable();
    tags
}

/// Timestamps of one channel from a mixed tag list.
pub fn channel_timestamps(tags: &[TimeTag], channel: u16) -> Vec<u64> {
    tags.iter().filter(|t| t.channel == channel).map(|t| t.timestamp_ps).collect()
}

pub const TTAG_MAGIC: [u8; 4] = *b"TTAG";
pub const TTAG_VERSION: u16 = 1;
pub const TTAG_HEADER_LEN: usize = 14;
pub const TTAG_RECORD_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum TtagError {
    #[error("not a TTAG file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported TTAG version {0}")]
    Version(u16),
    #[error("TTAG file truncated: header announces {expected} records, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("TTAG file has trailing bytes after {0} records")]
    TrailingBytes(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Write a complete TTAG stream.
pub fn write_ttag<W: Write>(writer: W, tags: &[TimeTag]) -> Result<(), TtagError> {
    let mut w = BufWriter::new(writer);
    w.write_all(&TTAG_MAGIC)?;
    w.write_all(&TTAG_VERSION.to_le_bytes())?;
    w.write_all(&(tags.len() as u64).to_le_bytes())?;
    for t in tags {
        w.write_all(&t.timestamp_ps.to_le_bytes())?;
        w.write_all(&t.channel.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ttag_file(path: impl AsRef<Path>, tags: &[TimeTag]) -> Result<(), TtagError> {
    write_ttag(File::create(path)?, tags)
}

/// Streaming reader: yields records one at a time without loading the file.
pub struct TtagReader<R: Read> {
    inner: R,
    count: u64,
    read: u64,
    finished: bool,
}

impl TtagReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TtagError> {
        TtagReader::new(BufReader::with_capacity(1 << 16, File::open(path)?))
    }
}

impl<R: Read> TtagReader<R> {
    pub fn new(mut inner: R) -> Result<Self, TtagError> {
        let mut header = [0u8; TTAG_HEADER_LEN];
        read_full(&mut inner, &mut header).map_err(|e| match e {
            ReadFull::Short => TtagError::Truncated { expected: 0, found: 0 },
            ReadFull::Io(e) => TtagError::Io(e),
        })?;
        let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
        if magic != TTAG_MAGIC {
            return Err(TtagError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(header[4..6].try_into().expect("2 bytes"));
        if version != TTAG_VERSION {
            return Err(TtagError::Version(version));
        }
        let count = u64::from_le_bytes(header[6..14].try_into().expect("8 bytes"));
        Ok(TtagReader { inner, count, read: 0, finished: false })
    }

    /// Record count announced in the header.
    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

enum ReadFull {
    Short,
    Io(io::Error),
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ReadFull> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(ReadFull::Short),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadFull::Io(e)),
        }
    }
    Ok(())
}

impl<R: Read> Iterator for TtagReader<R> {
    type Item = Result<TimeTag, TtagError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.read == self.count {
            self.finished = true;
            let mut probe = [0u8; 1];
            return match read_full(&mut self.inner, &mut probe) {
                Err(ReadFull::Short) => None,
                Err(ReadFull::Io(e)) => Some(Err(e.into())),
                Ok(()) => Some(Err(TtagError::TrailingBytes(self.count))),
            };
        }
        let mut rec = [0u8; TTAG_RECORD_LEN];
        match read_full(&mut self.inner, &mut rec) {
            Ok(()) => {
                self.read += 1;
                Some(Ok(TimeTag {
                    timestamp_ps: u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes")),
                    channel: u16::from_le_bytes(rec[8..10].try_into().expect("2 bytes")),
                }))
            }
            Err(ReadFull::Short) => {
                self.finished = true;
                Some(Err(TtagError::Truncated { expected: self.count, found: self.read }))
            }
            Err(ReadFull::Io(e)) => {
                self.finished = true;
                Some(Err(e.into()))
            }
        }
    }
}

pub fn read_ttag<R: Read>(reader: R) -> Result<Vec<TimeTag>, TtagError> {
    let r = TtagReader::new(reader)?;
    let mut out = Vec::with_capacity(r.len().min(1 << 24) as usize);
    for tag in r {
        out.push(tag?);
    }
    Ok(out)
}

pub fn read_ttag_file(path: impl AsRef<Path>) -> Result<Vec<TimeTag>, TtagError> {
    read_ttag(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;

    fn binomial_ok(hits: usize, n: usize, p: f64, k: f64) -> bool {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        (hits as f64 / n as f64 - p).abs() <= k * sigma
    }

    #[test]
    fn phi_plus_same_setting_perfectly_correlated() {
        let s = PolarizationState::phi_plus();
        let mut rng = SeedTree::new(1).rng();
        let n = 20_000;
        let mut tt = 0;
        for _ in 0..n {
            let (a, b) = analyze_polarization(&s, Analyzer::new(0.0), Analyzer::new(0.0), &mut rng);
            assert_eq!(a, b);
            tt += (a == Port::Transmitted) as usize;
        }
        assert!(binomial_ok(tt, n, 0.5, 4.0));
    }

    #[test]
    fn phi_plus_at_22_5_degrees() {
        let s = PolarizationState::phi_plus();
        let mut rng = SeedTree::new(2).rng();
        let n = 100_000;
        let tt = (0..n)
            .filter(|_| {
                analyze_polarization(&s, Analyzer::new(0.0), Analyzer::new(22.5), &mut rng)
                    == (Port::Transmitted, Port::Transmitted)
            })
            .count();
        assert!(binomial_ok(tt, n, 0.25, 3.0), "{tt}");
    }

    #[test]
    fn mixed_state_uniform_outcomes() {
        let s = PolarizationState::maximally_mixed();
        let mut rng = SeedTree::new(3).rng();
        let n = 100_000;
        let mut counts = [[0usize; 2]; 2];
        for _ in 0..n {
            let (a, b) = analyze_polarization(&s, Analyzer::new(10.0), Analyzer::new(33.0), &mut rng);
            counts[a.index()][b.index()] += 1;
        }
        for row in counts {
            for c in row {
                assert!(binomial_ok(c, n, 0.25, 3.0), "{c}");
            }
        }
    }

    #[test]
    fn ideal_detector_is_identity() {
        let arrivals: Vec<u64> = (0..1000).map(|i| i * 777 + (i % 3)).collect();
        let out = detect(&arrivals, &DetectorModel::ideal(), 1_000_000_000, &mut SeedTree::new(4).rng()).unwrap();
        assert_eq!(out, arrivals);
    }

    #[test]
    fn dark_counts_are_poisson() {
        let model = DetectorModel { dark_rate_hz: 100.0, ..DetectorModel::ideal() };
        let out = detect(&[], &model, 10 * 1_000_000_000_000, &mut SeedTree::new(5).rng()).unwrap();
        assert!((out.len() as f64 - 1000.0).abs() < 5.0 * 1000f64.sqrt(), "{}", out.len());
        check_sorted(&out).unwrap();
        assert!(out.iter().all(|&t| t < 10_000_000_000_000));
    }

    #[test]
    fn dead_time_veto() {
        let model = DetectorModel { dead_time_ns: 50.0, ..DetectorModel::ideal() };
        let out = detect(&[1_000_000, 1_001_000], &model, 1_000_000_000, &mut SeedTree::new(6).rng()).unwrap();
        assert_eq!(out, vec![1_000_000]);
        let out = detect(&[0, 1_000, 60_000, 100_000], &model, 1_000_000_000, &mut SeedTree::new(6).rng()).unwrap();
        assert_eq!(out, vec![0, 60_000]);
    }

    #[test]
    fn unsorted_input_rejected() {
        let err = detect(&[5, 3], &DetectorModel::ideal(), 10, &mut SeedTree::new(7).rng()).unwrap_err();
        assert_eq!(err, DetectionError::Unsorted { index: 1, previous: 5, current: 3 });
        let bad = DetectorModel { efficiency: 1.5, ..Default::default() };
        assert!(detect(&[], &bad, 10, &mut SeedTree::new(7).rng()).is_err());
    }

    #[test]
    fn jittered_pair_delay_spread() {
        let sigma = 50.0;
        let model = DetectorModel { jitter_sigma_ps: sigma, ..DetectorModel::ideal() };
        let n = 100_000u64;
        // Pairs spaced far apart so jitter never reorders them.
        let arrivals: Vec<u64> = (0..n).map(|i| 1_000_000 + i * 100_000).collect();
        let mut rng = SeedTree::new(8).rng();
        let a = detect(&arrivals, &model, u64::MAX / 2, &mut rng).unwrap();
        let b = detect(&arrivals, &model, u64::MAX / 2, &mut rng).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| y as f64 - x as f64).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 2f64.sqrt() * sigma;
        // Rounding to the ps grid adds 1/6 ps² per side.
        assert!((var.sqrt() - want).abs() / want < 0.05, "{}", var.sqrt());
    }

    #[test]
    fn ttag_round_trip_and_errors() {
        let tags = vec![TimeTag::new(0, 1), TimeTag::new(12_345, 7), TimeTag::new(u64::MAX, u16::MAX)];
        let mut buf = Vec::new();
        write_ttag(&mut buf, &tags).unwrap();
        assert_eq!(buf.len(), TTAG_HEADER_LEN + 3 * TTAG_RECORD_LEN);
        assert_eq!(&buf[0..4], b"TTAG");
        assert_eq!(read_ttag(&buf[..]).unwrap(), tags);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_ttag(&bad[..]), Err(TtagError::BadMagic(_))));
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(read_ttag(&v2[..]), Err(TtagError::Version(2))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_ttag(short), Err(TtagError::Truncated { expected: 3, found: 2 })));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_ttag(&long[..]), Err(TtagError::TrailingBytes(3))));
        assert!(matches!(read_ttag(&buf[..5]), Err(TtagError::Truncated { .. })));
    }

    #[test]
    fn merge_and_split_channels() {
        let tags = merge_channels(&[(2, vec![5, 10]), (1, vec![5, 7])]);
        assert_eq!(tags, vec![TimeTag::new(5, 1), TimeTag::new(5, 2), TimeTag::new(7, 1), TimeTag::new(10, 2)]);
        assert_eq!(channel_timestamps(&tags, 2), vec![5, 10]);
    }

    proptest! {
        #[test]
        fn output_bounded_and_sorted(mut arrivals in proptest::collection::vec(0u64..1_000_000_000, 0..500), seed in 0u64..1000, eff in 0.0..=1.0f64, jitter in 0.0..200.0f64, dead in 0.0..100.0f64) {
            arrivals.sort_unstable();
            let model = DetectorModel { efficiency: eff, dark_rate_hz: 1000.0, jitter_sigma_ps: jitter, dead_time_ns: dead };
            let out_a = detect(&arrivals, &model, 1_000_000_000, &mut SeedTree::new(seed).rng()).unwrap();
            let out_b = detect(&arrivals, &model, 1_000_000_000, &mut SeedTree::new(seed).rng()).unwrap();
            prop_assert_eq!(&out_a, &out_b);
            prop_assert!(check_sorted(&out_a).is_ok());
            let no_dark = DetectorModel { dark_rate_hz: 0.0, ..model };
            let out = detect(&arrivals, &no_dark, 1_000_000_000, &mut SeedTree::new(seed).rng()).unwrap();
            prop_assert!(out.len() <= arrivals.len());
        }

        #[test]
        fn zero_jitter_output_is_subset(mut arrivals in proptest::collection::vec(0u64..1_000_000, 0..300), seed in 0u64..1000, eff in 0.0..=1.0f64) {
            arrivals.sort_unstable();
            let model = DetectorModel { efficiency: eff, dark_rate_hz: 0.0, jitter_sigma_ps: 0.0, dead_time_ns: 0.0 };
            let out = detect(&arrivals, &model, 1_000_000, &mut SeedTree::new(seed).rng()).unwrap();
            let mut it = arrivals.iter();
            for t in &out {
                prop_assert!(it.any(|a| a == t));
            }
        }

        #[test]
        fn ttag_round_trip(records in proptest::collection::vec((any::<u64>(), any::<u16>()), 0..200)) {
            let tags: Vec<TimeTag> = records.into_iter().map(|(t, c)| TimeTag::new(t, c)).collect();
            let mut buf = Vec::new();
            write_ttag(&mut buf, &tags).unwrap();
            let back = read_ttag(&buf[..]).unwrap();
            prop_assert_eq!(back, tags);
        }
    }
}
