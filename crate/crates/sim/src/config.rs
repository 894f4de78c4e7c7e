//! Experiment configuration: TOML sections `[scenario]`, `[source]`,
//! `[fiber]` and `[detectors]`, validated into concrete values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sdm_core::channel::{build_layout, CoreId, Ring, CORE_COUNT};
use sdm_core::detection::DetectorModel;
use sdm_core::polarization::{ChshAngles, PolarizationState};
use sdm_core::source::{cone_radius, ConeCalibration, CrystalConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    RingCorrelation,
    FringeScan,
    Chsh,
    #[serde(rename = "stability-24h")]
    Stability24h,
    TemperatureScan,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::RingCorrelation => "ring-correlation",
            ScenarioKind::FringeScan => "fringe-scan",
            ScenarioKind::Chsh => "chsh",
            ScenarioKind::Stability24h => "stability-24h",
            ScenarioKind::TemperatureScan => "temperature-scan",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    /// All cores of interest recorded in one acquisition per setting.
    #[default]
    Simultaneous,
    /// One acquisition per core pair.
    Pairwise,
}

/// Polarization analysis angles (not wave-plate angles) for the CHSH slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChshAnglesConfig {
    pub a1_deg: f64,
    pub a2_deg: f64,
    pub b1_deg: f64,
    pub b2_deg: f64,
}

impl Default for ChshAnglesConfig {
    fn default() -> Self {
        let d = ChshAngles::default();
        ChshAnglesConfig { a1_deg: d.a1, a2_deg: d.a2, b1_deg: d.b1, b2_deg: d.b2 }
    }
}

impl ChshAnglesConfig {
    pub fn angles(&self) -> ChshAngles {
        ChshAngles::new(self.a1_deg, self.a2_deg, self.b1_deg, self.b2_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Per acquisition; defaults to 30 s for ring correlation, 1 s for the
    /// temperature scan and 60 s otherwise.
    #[serde(default)]
    pub integration_time_s: Option<f64>,
    #[serde(default = "default_window")]
    pub coincidence_window_ps: u64,
    #[serde(default)]
    pub acquisition: AcquisitionMode,
    #[serde(default)]
    pub write_tags: bool,
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring: Option<Ring>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_c: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<[u8; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<[u8; 2]>>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_a_hwp_deg: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_start_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_stop_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_step_deg: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chsh_angles: Option<ChshAnglesConfig>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_step_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_bound_deg: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_stop_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_step_c: Option<f64>,
}

impl ScenarioConfig {
    pub fn integration_time(&self) -> f64 {
        self.integration_time_s.expect("resolved")
    }
}

fn default_window() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_pair_rate")]
    pub pair_rate_hz: f64,
    /// 1/e² half-width of the cone's radial profile at the fiber face.
    #[serde(default = "default_radial_width")]
    pub radial_width_um: f64,
    /// Standard deviation, along the ring, of the idler spot around the point
    /// opposite the signal.
    #[serde(default = "default_arc")]
    pub correlation_arc_um: f64,
    #[serde(default = "default_radial_corr")]
    pub radial_correlation_um: f64,
    #[serde(default = "default_vhv")]
    pub visibility_hv: f64,
    #[serde(default = "default_vda")]
    pub visibility_da: f64,
    #[serde(default)]
    pub basis_phase_deg: f64,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub crystal: CrystalConfig,
}

fn default_pair_rate() -> f64 {
    5e4
}
fn default_radial_width() -> f64 {
    10.0
}
fn default_arc() -> f64 {
    13.0
}
fn default_radial_corr() -> f64 {
    1.0
}
fn default_vhv() -> f64 {
    0.94
}
fn default_vda() -> f64 {
    0.95
}

impl Default for SourceConfig {
    fn default() -> Self {
        toml::from_str("").expect("all source keys have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub t_inner_c: f64,
    pub r_inner_um: f64,
    pub t_outer_c: f64,
    pub r_outer_um: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let c = ConeCalibration::default();
        CalibrationConfig { t_inner_c: c.t_inner_c, r_inner_um: c.r_inner_um, t_outer_c: c.t_outer_c, r_outer_um: c.r_outer_um }
    }
}

impl CalibrationConfig {
    pub fn calibration(&self) -> ConeCalibration {
        ConeCalibration { t_inner_c: self.t_inner_c, r_inner_um: self.r_inner_um, t_outer_c: self.t_outer_c, r_outer_um: self.r_outer_um }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransmissionConfig {
    Range([f64; 2]),
    PerCore(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    #[serde(default = "default_mfr")]
    pub mode_field_radius_um: f64,
    #[serde(default = "default_focal")]
    pub focal_lengths_mm: [f64; 3],
    #[serde(default)]
    pub offset_um: [f64; 2],
    #[serde(default = "default_transmission")]
    pub transmission_db: TransmissionConfig,
    #[serde(default = "default_crosstalk")]
    pub neighbor_crosstalk: f64,
    /// Upper bound of random residual birefringence per core (Bloch-sphere angle).
    #[serde(default)]
    pub residual_rotation_deg: f64,
    #[serde(default = "default_delay_spread")]
    pub delay_spread_ps: u64,
    /// Per-core `[rotator, fast_axis, retardance]` in degrees, keyed by core id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rotations: BTreeMap<String, [f64; 3]>,
}

fn default_mfr() -> f64 {
    5.2
}
fn default_focal() -> [f64; 3] {
    [200.0, 150.0, 4.51]
}
fn default_transmission() -> TransmissionConfig {
    TransmissionConfig::Range([-3.0, -2.0])
}
fn default_crosstalk() -> f64 {
    1e-3
}
fn default_delay_spread() -> u64 {
    20_000
}

impl Default for FiberConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fiber keys have defaults")
    }
}

impl FiberConfig {
    pub fn rotation_overrides(&self) -> Result<BTreeMap<CoreId, [f64; 3]>, ConfigError> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.rotations {
            let id: u8 = k.parse().map_err(|_| invalid(&format!("fiber.rotations.{k}"), "key must be a core id 0..=18"))?;
            let core = CoreId::new(id).map_err(|e| invalid(&format!("fiber.rotations.{k}"), e.to_string()))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid(&format!("fiber.rotations.{k}"), "angles must be finite"));
            }
            out.insert(core, *v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub fiber: FiberConfig,
    #[serde(default)]
    pub detectors: DetectorModel,
}

pub const FRINGE_BASES: [(&str, f64); 4] = [("H", 0.0), ("V", 45.0), ("D", 22.5), ("A", 67.5)];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialisation; its SHA-256 is the config hash.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Fill scenario-dependent defaults.
    fn resolve(&mut self) -> Result<(), ConfigError> {
        let s = &mut self.scenario;
        s.integration_time_s.get_or_insert(match s.kind {
            ScenarioKind::RingCorrelation => 30.0,
            ScenarioKind::TemperatureScan => 1.0,
            _ => 60.0,
        });
        match s.kind {
            ScenarioKind::RingCorrelation => {
                let ring = *s.ring.get_or_insert(Ring::Inner);
                if s.temperature_c.is_none() {
                    s.temperature_c = Some(default_temperature(ring, &self.source.calibration));
                }
            }
            ScenarioKind::FringeScan => {
                s.module_a_hwp_deg.get_or_insert_with(|| FRINGE_BASES.iter().map(|b| b.1).collect());
                s.scan_start_deg.get_or_insert(0.0);
                s.scan_stop_deg.get_or_insert(360.0);
                s.scan_step_deg.get_or_insert(20.0);
                s.temperature_c.get_or_insert(self.source.calibration.t_inner_c);
            }
            ScenarioKind::Chsh => {
                s.chsh_angles.get_or_insert_with(ChshAnglesConfig::default);
                s.temperature_c.get_or_insert(self.source.calibration.t_inner_c);
            }
            ScenarioKind::Stability24h => {
                s.points.get_or_insert(48);
                s.interval_s.get_or_insert(1800.0);
                s.drift_step_deg.get_or_insert(0.0);
                s.drift_bound_deg.get_or_insert(0.0);
                s.temperature_c.get_or_insert(self.source.calibration.t_inner_c);
            }
            ScenarioKind::TemperatureScan => {
                s.t_start_c.get_or_insert(81.7);
                s.t_stop_c.get_or_insert(82.65);
                s.t_step_c.get_or_insert(0.01);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        finite_in("scenario.integration_time_s", s.integration_time(), 1e-3, 1e5)?;
        if !(1..=1_000_000).contains(&s.coincidence_window_ps) {
            return Err(invalid("scenario.coincidence_window_ps", "must lie in 1..=1000000 ps"));
        }
        let src = &self.source;
        finite_in("source.pair_rate_hz", src.pair_rate_hz, 1.0, 1e7)?;
        finite_in("source.radial_width_um", src.radial_width_um, 0.1, 50.0)?;
        finite_in("source.correlation_arc_um", src.correlation_arc_um, 0.0, 100.0)?;
        finite_in("source.radial_correlation_um", src.radial_correlation_um, 0.0, 50.0)?;
        finite_in("source.basis_phase_deg", src.basis_phase_deg, -360.0, 360.0)?;
        PolarizationState::new(src.visibility_hv, src.visibility_da, src.basis_phase_deg.to_radians())
            .map_err(|e| invalid("source.visibility_hv/visibility_da", e.to_string()))?;
        src.calibration.calibration().slope().map_err(|e| invalid("source.calibration", e.to_string()))?;
        src.crystal.validate().map_err(|e| invalid("source.crystal", e.to_string()))?;

        let f = &self.fiber;
        let layout = build_layout();
        let coupling = self.coupling_model();
        coupling.validate(&layout).map_err(|e| invalid("fiber", e.to_string()))?;
        match &f.transmission_db {
            TransmissionConfig::Range([lo, hi]) => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi && *hi <= 0.0 && *lo >= -30.0) {
                    return Err(invalid("fiber.transmission_db", "range must satisfy -30 ≤ min ≤ max ≤ 0 dB"));
                }
            }
            TransmissionConfig::PerCore(v) => {
                if v.len() != CORE_COUNT || v.iter().any(|x| !(x.is_finite() && *x <= 0.0 && *x >= -30.0)) {
                    return Err(invalid("fiber.transmission_db", format!("need {CORE_COUNT} values in [-30, 0] dB")));
                }
            }
        }
        finite_in("fiber.neighbor_crosstalk", f.neighbor_crosstalk, 0.0, 0.08)?;
        finite_in("fiber.residual_rotation_deg", f.residual_rotation_deg, 0.0, 180.0)?;
        if f.delay_spread_ps > 1_000_000 {
            return Err(invalid("fiber.delay_spread_ps", "must be ≤ 1000000 ps"));
        }
        f.rotation_overrides()?;
        self.detectors.validate().map_err(|e| invalid("detectors", e.to_string()))?;
        if self.detectors.jitter_sigma_ps > 1e4 || self.detectors.dead_time_ns > 1e4 || self.detectors.dark_rate_hz > 1e7 {
            return Err(invalid("detectors", "jitter ≤ 10 ns, dead time ≤ 10 µs, dark rate ≤ 10 MHz"));
        }

        let cal = src.calibration.calibration();
        if let Some(t) = s.temperature_c {
            cone_radius(t, &cal).map_err(|e| invalid("scenario.temperature_c", e.to_string()))?;
        }
        match s.kind {
            ScenarioKind::RingCorrelation => {
                if s.ring == Some(Ring::Center) {
                    return Err(invalid("scenario.ring", "must be `inner` or `outer`"));
                }
            }
            ScenarioKind::FringeScan => {
                self.opposite_pair("scenario.pair", s.pair)?;
                let a = s.module_a_hwp_deg.as_ref().expect("resolved");
                if a.is_empty() || a.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("scenario.module_a_hwp_deg", "need at least one finite angle"));
                }
                let (start, stop, step) = (s.scan_start_deg.unwrap(), s.scan_stop_deg.unwrap(), s.scan_step_deg.unwrap());
                if !(start.is_finite() && stop.is_finite() && step.is_finite() && step > 0.0 && stop > start) {
                    return Err(invalid("scenario.scan_step_deg", "need start < stop and step > 0"));
                }
                if ((stop - start) / step).round() as usize + 1 < 5 || stop - start < 180.0 {
                    return Err(invalid("scenario.scan_stop_deg", "scan needs ≥ 5 angles spanning ≥ 180°"));
                }
            }
            ScenarioKind::Chsh => {
                let pairs = s.pairs.as_ref().ok_or_else(|| invalid("scenario.pairs", "required for chsh"))?;
                if pairs.is_empty() {
                    return Err(invalid("scenario.pairs", "need at least one pair"));
                }
                for p in pairs {
                    self.opposite_pair("scenario.pairs", Some(*p))?;
                }
                let a = s.chsh_angles.unwrap();
                for v in [a.a1_deg, a.a2_deg, a.b1_deg, a.b2_deg] {
                    if !v.is_finite() {
                        return Err(invalid("scenario.chsh_angles", "angles must be finite"));
                    }
                }
            }
            ScenarioKind::Stability24h => {
                let (m, _) = self.opposite_pair("scenario.pair", s.pair)?;
                if layout.ring(m) != Ring::Inner {
                    return Err(invalid("scenario.pair", "stability pair must be in the inner ring"));
                }
                if !(1..=10_000).contains(&s.points.unwrap()) {
                    return Err(invalid("scenario.points", "must lie in 1..=10000"));
                }
                finite_in("scenario.interval_s", s.interval_s.unwrap(), s.integration_time(), 1e7)?;
                finite_in("scenario.drift_step_deg", s.drift_step_deg.unwrap(), 0.0, 90.0)?;
                finite_in("scenario.drift_bound_deg", s.drift_bound_deg.unwrap(), 0.0, 180.0)?;
            }
            ScenarioKind::TemperatureScan => {
                let (a, b, st) = (s.t_start_c.unwrap(), s.t_stop_c.unwrap(), s.t_step_c.unwrap());
                if !(a.is_finite() && b.is_finite() && st.is_finite() && st > 0.0 && b > a) {
                    return Err(invalid("scenario.t_step_c", "need t_start_c < t_stop_c and t_step_c > 0"));
                }
                if (b - a) / st > 10_000.0 {
                    return Err(invalid("scenario.t_step_c", "at most 10000 scan points"));
                }
                for (k, t) in [("scenario.t_start_c", a), ("scenario.t_stop_c", b)] {
                    cone_radius(t, &cal).map_err(|e| invalid(k, e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    fn opposite_pair(&self, key: &str, pair: Option<[u8; 2]>) -> Result<(CoreId, CoreId), ConfigError> {
        let [a, b] = pair.ok_or_else(|| invalid(key, format!("required for {}", self.scenario.kind)))?;
        let layout = build_layout();
        let m = CoreId::new(a).map_err(|e| invalid(key, e.to_string()))?;
        let l = CoreId::new(b).map_err(|e| invalid(key, e.to_string()))?;
        match layout.opposite_core(m) {
            Ok(o) if o == l => Ok((m, l)),
            _ => Err(invalid(key, format!("cores {a} and {b} are not opposite"))),
        }
    }

    pub fn coupling_model(&self) -> sdm_core::channel::CouplingModel {
        let f = &self.fiber;
        sdm_core::channel::CouplingModel {
            f1_mm: f.focal_lengths_mm[0],
            f2_mm: f.focal_lengths_mm[1],
            f3_mm: f.focal_lengths_mm[2],
            mode_field_radius_um: f.mode_field_radius_um,
            fiber_offset_um: sdm_core::Point::new(f.offset_um[0], f.offset_um[1]),
        }
    }
}

fn finite_in(key: &str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} outside [{lo}, {hi}]")))
    }
}

pub fn default_temperature(ring: Ring, cal: &CalibrationConfig) -> f64 {
    match ring {
        Ring::Outer => cal.t_outer_c,
        _ => cal.t_inner_c,
    }
}
