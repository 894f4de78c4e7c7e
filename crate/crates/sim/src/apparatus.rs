//! The simulated setup: source, imaging, fiber, analyzers and detectors,
//! turned into per-channel time-tag streams.

use std::collections::BTreeMap;

use rand::Rng;
use sdm_core::channel::{
    build_layout, ChannelProperties, Coupler, ChannelSpec, CoreId, CoreLayout, CouplingModel, RotationSpec, TransmissionSpec,
    CORE_COUNT, FIBER_LENGTH_M,
};
use sdm_core::detection::{detect, merge_sorted, DetectorModel};
use sdm_core::polarization::{apply_polarization_rotation, Analyzer, Arm, PolarizationRotation, PolarizationState, Port};
use sdm_core::detection::analyze_polarization;
use sdm_core::rng::SeedTree;
use sdm_core::source::{cone_radius, run_duration_ps, ConeCalibration, EmissionCone, PairSource};

use crate::config::{ExperimentConfig, SourceConfig, TransmissionConfig};
use crate::SimError;

/// Group index of the fiber cores.
pub const GROUP_INDEX: f64 = 1.468;
const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Common propagation delay of the fiber, ps.
pub fn propagation_delay_ps() -> u64 {
    (FIBER_LENGTH_M * GROUP_INDEX / SPEED_OF_LIGHT * 1e12).round() as u64
}

/// Channel id of a core with no analyzer.
pub fn path_channel(core: CoreId) -> u16 {
    core.0 as u16
}

/// Channel id of one output port of the analyzer on `core`.
pub fn analyzer_channel(core: CoreId, port: Port) -> u16 {
    32 + 2 * core.0 as u16 + port.index() as u16
}

pub fn channel_label(channel: u16) -> String {
    if channel < 32 {
        format!("core {channel}")
    } else {
        let c = (channel - 32) / 2;
        let p = if (channel - 32) % 2 == 0 { "T" } else { "R" };
        format!("core {c} port {p}")
    }
}

/// What is attached to a core's fan-out output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Monitor {
    /// A bare detector.
    Path,
    /// HWP + PBS with a detector on each port.
    Analyzer(Analyzer),
}

impl Monitor {
    pub fn channels(&self, core: CoreId) -> Vec<u16> {
        match self {
            Monitor::Path => vec![path_channel(core)],
            Monitor::Analyzer(_) => Port::BOTH.iter().map(|&p| analyzer_channel(core, p)).collect(),
        }
    }
}

/// Detected streams of one acquisition, keyed by channel id.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub duration_ps: u64,
    pub streams: BTreeMap<u16, Vec<u64>>,
    /// Pairs emitted by the source during the acquisition.
    pub emitted_pairs: u64,
}

impl Detections {
    pub fn stream(&self, channel: u16) -> &[u64] {
        self.streams.get(&channel).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All detections of a core, regardless of analyzer port.
    pub fn core_stream(&self, core: CoreId) -> Vec<u64> {
        let path = self.stream(path_channel(core));
        let t = self.stream(analyzer_channel(core, Port::Transmitted));
        let r = self.stream(analyzer_channel(core, Port::Reflected));
        merge_sorted(&merge_sorted(path, t), r)
    }

    pub fn total_tags(&self) -> usize {
        self.streams.values().map(Vec::len).sum()
    }
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct Apparatus {
    pub layout: CoreLayout,
    pub coupling: CouplingModel,
    pub channel: ChannelProperties,
    pub detectors: DetectorModel,
    pub state: PolarizationState,
    pub source: SourceConfig,
    pub calibration: ConeCalibration,
}

impl Apparatus {
    pub fn build(cfg: &ExperimentConfig, seed: SeedTree) -> Result<Self, SimError> {
        let layout = build_layout();
        let f = &cfg.fiber;
        let spec = ChannelSpec {
            transmission: match &f.transmission_db {
                TransmissionConfig::Range([lo, hi]) => TransmissionSpec::RangeDb { min_db: *lo, max_db: *hi },
                TransmissionConfig::PerCore(v) => TransmissionSpec::PerCoreDb(v.clone()),
            },
            neighbor_crosstalk: f.neighbor_crosstalk,
            rotations: RotationSpec::RandomResidual { max_deg: f.residual_rotation_deg },
            delay_spread_ps: f.delay_spread_ps,
        };
        let mut channel = ChannelProperties::draw(&layout, &spec, &mut seed.child("channel").rng()).map_err(SimError::runtime)?;
        for (core, [rot, axis, ret]) in f.rotation_overrides()? {
            channel = channel.with_rotation(core, PolarizationRotation::element(rot, axis, ret));
        }
        let s = &cfg.source;
        let state = PolarizationState::new(s.visibility_hv, s.visibility_da, s.basis_phase_deg.to_radians()).map_err(SimError::runtime)?;
        Ok(Apparatus {
            layout,
            coupling: cfg.coupling_model(),
            channel,
            detectors: cfg.detectors,
            state,
            source: s.clone(),
            calibration: s.calibration.calibration(),
        })
    }

    pub fn cone_radius_um(&self, temperature_c: f64) -> Result<f64, SimError> {
        cone_radius(temperature_c, &self.calibration).map_err(SimError::runtime)
    }

    pub fn cone_at(&self, temperature_c: f64) -> Result<EmissionCone, SimError> {
        let r = self.cone_radius_um(temperature_c)?;
        let s = &self.source;
        Ok(EmissionCone {
            ring_radius_um: r,
            radial_width_um: s.radial_width_um,
            azimuthal_correlation_width: if r > 0.0 { s.correlation_arc_um / r } else { 0.0 },
            radial_correlation_width_um: s.radial_correlation_um,
            pair_rate: s.pair_rate_hz,
        })
    }

    /// One acquisition of `duration_s` with the given cores monitored.
    pub fn acquire(
        &self,
        channel: &ChannelProperties,
        temperature_c: f64,
        duration_s: f64,
        monitors: &BTreeMap<CoreId, Monitor>,
        seed: SeedTree,
    ) -> Result<Detections, SimError> {
        let duration_ps = run_duration_ps(duration_s).map_err(SimError::runtime)?;
        let source = PairSource::new(self.cone_at(temperature_c)?, self.state.clone(), seed.child("pairs")).map_err(SimError::runtime)?;
        let mut mon: [Option<Monitor>; CORE_COUNT] = [None; CORE_COUNT];
        for (c, m) in monitors {
            mon[c.index()] = Some(*m);
        }
        let mut arrivals: Vec<Vec<u64>> = vec![Vec::new(); 32 + 2 * CORE_COUNT];
        let base = propagation_delay_ps();
        let transport = seed.child("transport");
        let coupler = Coupler::new(&self.layout, &self.coupling);
        let mut emitted = 0u64;
        for k in 0..source.slice_count(duration_ps) {
            let events = source.slice(k, duration_ps);
            emitted += events.len() as u64;
            let mut rng = transport.index(k).rng();
            for ev in &events {
                let cs = coupler.couple(ev.signal_position, &mut rng);
                let ci = coupler.couple(ev.idler_position, &mut rng);
                if cs.is_none() && ci.is_none() {
                    continue;
                }
                let deliver = |launch: Option<CoreId>, rng: &mut sdm_core::rng::SimRng| {
                    launch.and_then(|c| channel.route(c, rng).map(|o| (c, o))).filter(|(_, o)| mon[o.index()].is_some())
                };
                let ds = deliver(cs, &mut rng);
                let di = deliver(ci, &mut rng);
                if ds.is_none() && di.is_none() {
                    continue;
                }
                let t = ev.emission_time_ps + base;
                let mut ports: [Option<Port>; 2] = [None, None];
                if let (Some((ls, s)), Some((li, i))) = (ds, di) {
                    if let (Some(Monitor::Analyzer(a)), Some(Monitor::Analyzer(b))) = (mon[s.index()], mon[i.index()]) {
                        let st = apply_polarization_rotation(ev.polarization, Arm::A, channel.rotation(ls));
                        let st = apply_polarization_rotation(&st, Arm::B, channel.rotation(li));
                        let (pa, pb) = analyze_polarization(&st, a, b, &mut rng);
                        ports = [Some(pa), Some(pb)];
                    }
                }
                for (slot, d) in [ds, di].into_iter().enumerate() {
                    let Some((_, out)) = d else { continue };
                    let ch = match mon[out.index()].expect("filtered to monitored cores") {
                        Monitor::Path => path_channel(out),
                        Monitor::Analyzer(_) => {
                            // The reduced state of either photon is unpolarized.
                            let port = ports[slot].unwrap_or_else(|| if rng.random::<bool>() { Port::Transmitted } else { Port::Reflected });
                            analyzer_channel(out, port)
                        }
                    };
                    arrivals[ch as usize].push(t + channel.delay_ps(out));
                }
            }
        }
        let detect_seed = seed.child("detect");
        let mut streams = BTreeMap::new();
        for (core, m) in monitors {
            for ch in m.channels(*core) {
                let mut a = std::mem::take(&mut arrivals[ch as usize]);
                a.sort_unstable();
                let tags = detect(&a, &self.detectors, duration_ps + base, &mut detect_seed.index(ch as u64).rng()).map_err(SimError::runtime)?;
                streams.insert(ch, tags);
            }
        }
        Ok(Detections { duration_ps, streams, emitted_pairs: emitted })
    }
}

pub fn path_monitors(cores: impl IntoIterator<Item = CoreId>) -> BTreeMap<CoreId, Monitor> {
    cores.into_iter().map(|c| (c, Monitor::Path)).collect()
}
