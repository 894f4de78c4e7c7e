//! Scenario drivers. Each one turns a validated config into acquisitions,
//! analyses them and writes its result files through the shared context.

mod chsh;
mod fringe;
mod ring;
mod stability;
mod temperature;

use std::collections::BTreeMap;
use std::path::Path;

use sdm_core::channel::{ChannelProperties, CoreId};
use sdm_core::coincidence::DelaySearch;
use sdm_core::rng::SeedTree;

use crate::analysis::{channel_offsets, find_delays, PairDelay};
use crate::apparatus::{channel_label, Apparatus, Detections, Monitor};
use crate::config::{ExperimentConfig, ScenarioKind};
use crate::manifest::{AcquisitionDelays, RunManifest, RunStatus};
use crate::output::OutputTree;
use crate::{sha256_hex, SimError};

pub use chsh::{ChshPairResult, ChshResult};
pub use fringe::{BasisFit, FringeResult};
pub use ring::{PairCount, RingResult};
pub use stability::{StabilityPoint, StabilityResult, StabilitySummary};
pub use temperature::{peak_temperature, CorePeak, RingScan, TemperatureResult};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Promote configuration warnings to errors.
    pub strict: bool,
    /// Record wall-clock timestamps in the manifest (breaks bit-identical reruns).
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioOutcome {
    Ring(RingResult),
    Fringe(FringeResult),
    Chsh(ChshResult),
    Stability(StabilityResult),
    Temperature(TemperatureResult),
}

/// Shared state of one run. Everything but the output tree and the manifest
/// is read-only while acquisitions execute.
pub(crate) struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub app: Apparatus,
    pub seed: SeedTree,
    pub config_hash: String,
    pub out: OutputTree,
    pub manifest: RunManifest,
    pub strict: bool,
    pub search: DelaySearch,
}

/// One acquisition's detections, produced without touching shared state so
/// acquisitions can run in parallel.
pub(crate) struct Acquired {
    pub label: String,
    pub detections: Detections,
}

impl Context<'_> {
    pub fn window(&self) -> u64 {
        self.cfg.scenario.coincidence_window_ps
    }

    pub fn integration(&self) -> f64 {
        self.cfg.scenario.integration_time()
    }

    pub fn acquire(
        &self,
        label: &str,
        channel: &ChannelProperties,
        temperature_c: f64,
        duration_s: f64,
        monitors: &BTreeMap<CoreId, Monitor>,
    ) -> Result<Acquired, SimError> {
        let seed = self.seed.child("acquisition").child(label);
        let detections = self.app.acquire(channel, temperature_c, duration_s, monitors, seed)?;
        Ok(Acquired { label: label.to_string(), detections })
    }

    /// Book-keeping after an acquisition: channel map, simulated time and
    /// optional raw tags.
    pub fn record(&mut self, acq: &Acquired) -> Result<(), SimError> {
        let d = &acq.detections;
        for &ch in d.streams.keys() {
            self.manifest.channels.entry(ch).or_insert_with(|| channel_label(ch));
        }
        self.manifest.timestamps.simulated_acquisition_s += d.duration_ps as f64 / sdm_core::PS_PER_S;
        if self.cfg.scenario.write_tags {
            for (&ch, s) in &d.streams {
                self.out.write_ttag(&format!("tags/{}/ch{ch:03}.ttag", acq.label), ch, s)?;
            }
        }
        Ok(())
    }

    /// Delays between core-level streams (all ports merged), keyed by core id.
    pub fn core_delays(&self, det: &Detections, pairs: &[(CoreId, CoreId)]) -> Result<Vec<PairDelay>, SimError> {
        let mut streams: BTreeMap<u16, Vec<u64>> = BTreeMap::new();
        for &(a, b) in pairs {
            for c in [a, b] {
                streams.entry(c.0 as u16).or_insert_with(|| det.core_stream(c));
            }
        }
        let ids: Vec<(u16, u16)> = pairs.iter().map(|&(a, b)| (a.0 as u16, b.0 as u16)).collect();
        find_delays(|c| streams[&c].as_slice(), &ids, &self.search)
    }

    pub fn push_delays(&mut self, acquisition: &str, delays: Vec<PairDelay>) {
        let channel_offsets_ps = channel_offsets(&delays).into_iter().map(|(c, (_, o))| (c, o)).collect();
        self.manifest.delays.push(AcquisitionDelays { acquisition: acquisition.to_string(), delays, channel_offsets_ps });
    }

    pub fn warn(&mut self, key: &str, message: String) -> Result<(), SimError> {
        if self.strict {
            return Err(SimError::Config(crate::ConfigError::Invalid { key: key.to_string(), message }));
        }
        self.manifest.warnings.push(message);
        Ok(())
    }
}

/// Run the configured scenario, writing the manifest, `config.json` and all
/// result files under `out_dir`.
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>, opts: RunOptions) -> Result<ScenarioOutcome, SimError> {
    cfg.validate()?;
    let out = OutputTree::create(out_dir)?;
    let manifest = RunManifest::new(cfg, opts.wall_clock);
    manifest.start(cfg, &out)?;
    let seed = SeedTree::new(cfg.scenario.seed);
    let mut ctx = Context {
        cfg,
        app: Apparatus::build(cfg, seed.child("apparatus"))?,
        seed,
        config_hash: sha256_hex(cfg.canonical_json().as_bytes()),
        out,
        manifest,
        strict: opts.strict || cfg.scenario.strict,
        search: DelaySearch::default(),
    };
    let result = match cfg.scenario.kind {
        ScenarioKind::RingCorrelation => ring::run(&mut ctx).map(ScenarioOutcome::Ring),
        ScenarioKind::FringeScan => fringe::run(&mut ctx).map(ScenarioOutcome::Fringe),
        ScenarioKind::Chsh => chsh::run(&mut ctx).map(ScenarioOutcome::Chsh),
        ScenarioKind::Stability24h => stability::run(&mut ctx).map(ScenarioOutcome::Stability),
        ScenarioKind::TemperatureScan => temperature::run(&mut ctx).map(ScenarioOutcome::Temperature),
    };
    let t = &mut ctx.manifest.timestamps;
    if t.simulated_end_s < t.simulated_acquisition_s {
        t.simulated_end_s = t.simulated_acquisition_s;
    }
    match result {
        Ok(r) => {
            ctx.manifest.finish(&ctx.out, RunStatus::Complete)?;
            Ok(r)
        }
        Err(e) => {
            ctx.manifest.error = Some(e.to_string());
            ctx.manifest.finish(&ctx.out, RunStatus::Failed)?;
            Err(e)
        }
    }
}

/// `start, start + step, …` up to and including `stop` (to rounding).
pub(crate) fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub(crate) fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Pearson correlation; zero when either series is constant.
pub(crate) fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
