//! Type-0 SPDC pair source imaged onto the fiber end-face.
//!
//! The far-field emission cone is modelled directly at the fiber face: a ring
//! of mean radius set by the crystal temperature, a Gaussian radial profile and
//! azimuthally uniform emission. The idler is placed diametrically opposite the
//! signal up to a Gaussian azimuthal and radial jitter, which stands in for the
//! finite transverse-momentum correlation of the pair.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::polarization::PolarizationState;
use crate::rng::SeedTree;
use crate::PS_PER_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("temperature {temperature_c} °C is beyond the collinear point ({collinear_c:.4} °C): the emission cone has closed")]
    CollinearRegime { temperature_c: f64, collinear_c: f64 },
    #[error("invalid cone calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid source parameter {name} = {value}: {reason}")]
    InvalidParameter { name: &'static str, value: f64, reason: &'static str },
}

fn positive(name: &'static str, value: f64) -> Result<(), SourceError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(SourceError::InvalidParameter { name, value, reason: "must be positive and finite" })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<(), SourceError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(SourceError::InvalidParameter { name, value, reason: "must be non-negative and finite" })
    }
}

/// Nonlinear crystal and wavelength selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalConfig {
    pub length_mm: f64,
    pub poling_period_um: f64,
    pub pump_wavelength_nm: f64,
    pub signal_wavelength_nm: f64,
    /// Half-width of the interference filter around the signal wavelength.
    pub filter_half_width_nm: f64,
}

impl Default for CrystalConfig {
    fn default() -> Self {
        CrystalConfig {
            length_mm: 40.0,
            poling_period_um: 19.2,
            pump_wavelength_nm: 775.07,
            signal_wavelength_nm: 1550.0,
            filter_half_width_nm: 3.0,
        }
    }
}

impl CrystalConfig {
    pub fn validate(&self) -> Result<(), SourceError> {
        positive("length_mm", self.length_mm)?;
        positive("poling_period_um", self.poling_period_um)?;
        positive("pump_wavelength_nm", self.pump_wavelength_nm)?;
        positive("signal_wavelength_nm", self.signal_wavelength_nm)?;
        non_negative("filter_half_width_nm", self.filter_half_width_nm)?;
        let degenerate = 2.0 * self.pump_wavelength_nm;
        if (self.signal_wavelength_nm - degenerate).abs() > self.filter_half_width_nm {
            return Err(SourceError::InvalidParameter {
                name: "signal_wavelength_nm",
                value: self.signal_wavelength_nm,
                reason: "degenerate wavelength 2·λ_pump lies outside the filter passband",
            });
        }
        Ok(())
    }
}

/// Two temperature/radius anchors for the cone-opening model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeCalibration {
    pub t_inner_c: f64,
    pub r_inner_um: f64,
    pub t_outer_c: f64,
    pub r_outer_um: f64,
}

impl Default for ConeCalibration {
    fn default() -> Self {
        ConeCalibration { t_inner_c: 82.5, r_inner_um: 32.25, t_outer_c: 82.0, r_outer_um: 59.5 }
    }
}

impl ConeCalibration {
    pub fn slope(&self) -> Result<Option<f64>, SourceError> {
        positive("r_inner_um", self.r_inner_um)?;
        positive("r_outer_um", self.r_outer_um)?;
        let dt = self.t_outer_c - self.t_inner_c;
        if dt == 0.0 {
            if self.r_inner_um == self.r_outer_um {
                return Ok(None);
            }
            return Err(SourceError::InvalidCalibration(
                "equal anchor temperatures with different radii".into(),
            ));
        }
        Ok(Some((self.r_outer_um.powi(2) - self.r_inner_um.powi(2)) / dt))
    }

    /// Temperature at which the cone collapses to the axis, if any.
    pub fn collinear_temperature(&self) -> Result<Option<f64>, SourceError> {
        Ok(self.slope()?.filter(|k| *k != 0.0).map(|k| self.t_inner_c - self.r_inner_um.powi(2) / k))
    }

    /// Inverse of [`cone_radius`].
    pub fn temperature_for_radius(&self, radius_um: f64) -> Result<f64, SourceError> {
        match self.slope()? {
            Some(k) if k != 0.0 => Ok(self.t_inner_c + (radius_um.powi(2) - self.r_inner_um.powi(2)) / k),
            _ => Err(SourceError::InvalidCalibration("constant calibration has no inverse".into())),
        }
    }
}

/// Ring radius at the fiber face for a crystal temperature. `r²` is affine in
/// `T` through the two calibration anchors.
pub fn cone_radius(temperature_c: f64, calibration: &ConeCalibration) -> Result<f64, SourceError> {
    if !temperature_c.is_finite() {
        return Err(SourceError::InvalidParameter { name: "temperature_c", value: temperature_c, reason: "must be finite" });
    }
    let Some(k) = calibration.slope()? else {
        return Ok(calibration.r_inner_um);
    };
    let r2 = calibration.r_inner_um.powi(2) + k * (temperature_c - calibration.t_inner_c);
    if r2 < 0.0 {
        return Err(SourceError::CollinearRegime {
            temperature_c,
            collinear_c: calibration.collinear_temperature()?.unwrap_or(f64::NAN),
        });
    }
    Ok(r2.sqrt())
}

/// Emission cone as seen on the fiber face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionCone {
    pub ring_radius_um: f64,
    /// 1/e² half-width of the radial intensity profile.
    pub radial_width_um: f64,
    /// Standard deviation of idler azimuth around signal azimuth + π.
    pub azimuthal_correlation_width: f64,
    /// Standard deviation of idler radius around the signal radius.
    pub radial_correlation_width_um: f64,
    pub pair_rate: f64,
}

impl EmissionCone {
    pub fn validate(&self) -> Result<(), SourceError> {
        non_negative("ring_radius_um", self.ring_radius_um)?;
        positive("radial_width_um", self.radial_width_um)?;
        non_negative("azimuthal_correlation_width", self.azimuthal_correlation_width)?;
        non_negative("radial_correlation_width_um", self.radial_correlation_width_um)?;
        positive("pair_rate", self.pair_rate)?;
        Ok(())
    }

    /// Standard deviation of the radial Gaussian.
    pub fn radial_sigma_um(&self) -> f64 {
        self.radial_width_um / 2.0
    }
}

/// One SPDC pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEvent<'a> {
    pub emission_time_ps: u64,
    pub signal_position: Point,
    pub idler_position: Point,
    pub polarization: &'a PolarizationState,
}

/// Length of one independently seeded generation slice.
pub const DEFAULT_SLICE_PS: u64 = 100_000_000_000;

/// Seeded pair generator. Time is cut into fixed slices, each drawn from its
/// own RNG substream, so slices can be generated in any order or in parallel
/// and concatenate to the same time-ordered stream.
#[derive(Debug, Clone)]
pub struct PairSource {
    cone: EmissionCone,
    polarization: PolarizationState,
    seed: SeedTree,
    slice_ps: u64,
}

impl PairSource {
    pub fn new(cone: EmissionCone, polarization: PolarizationState, seed: SeedTree) -> Result<Self, SourceError> {
        cone.validate()?;
        Ok(PairSource { cone, polarization, seed, slice_ps: DEFAULT_SLICE_PS })
    }

    pub fn with_slice_ps(mut self, slice_ps: u64) -> Self {
        assert!(slice_ps > 0);
        self.slice_ps = slice_ps;
        self
    }

    pub fn cone(&self) -> &EmissionCone {
        &self.cone
    }

    pub fn polarization(&self) -> &PolarizationState {
        &self.polarization
    }

    pub fn slice_ps(&self) -> u64 {
        self.slice_ps
    }

    pub fn slice_count(&self, duration_ps: u64) -> u64 {
        duration_ps.div_ceil(self.slice_ps)
    }

    /// Pairs emitted in slice `index` of a run lasting `duration_ps`.
    pub fn slice(&self, index: u64, duration_ps: u64) -> Vec<PairEvent<'_>> {
        let start = index * self.slice_ps;
        let end = (start + self.slice_ps).min(duration_ps);
        let mut out = Vec::new();
        if start >= end {
            return out;
        }
        let mut rng = self.seed.index(index).rng();
        let gap = Exp::new(self.cone.pair_rate / PS_PER_S).expect("positive rate");
        let span = (end - start) as f64;
        let mut t = 0.0f64;
        out.reserve((span * self.cone.pair_rate / PS_PER_S * 1.01) as usize + 16);
        loop {
            t += gap.sample(&mut rng);
            if t >= span {
                break;
            }
            let emission_time_ps = start + t as u64;
            let (signal_position, idler_position) = self.sample_positions(&mut rng);
            out.push(PairEvent { emission_time_ps, signal_position, idler_position, polarization: &self.polarization });
        }
        out
    }

    fn sample_positions<R: Rng>(&self, rng: &mut R) -> (Point, Point) {
        let c = &self.cone;
        let z: f64 = rng.sample(StandardNormal);
        let r_s = (c.ring_radius_um + c.radial_sigma_um() * z).abs();
        let phi_s = rng.random::<f64>() * 2.0 * PI;
        let delta = if c.azimuthal_correlation_width > 0.0 {
            c.azimuthal_correlation_width * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let r_i = if c.radial_correlation_width_um > 0.0 {
            (r_s + c.radial_correlation_width_um * rng.sample::<f64, _>(StandardNormal)).abs()
        } else {
            r_s
        };
        (Point::from_polar(r_s, phi_s), Point::from_polar(r_i, phi_s + PI + delta))
    }

    /// Sequential iterator over the whole run.
    pub fn stream(&self, duration_ps: u64) -> PairStream<'_> {
        PairStream { source: self, duration_ps, next_slice: 0, buffer: Vec::new().into_iter() }
    }
}

/// Lazily generated, time-ordered pair stream.
pub struct PairStream<'a> {
    source: &'a PairSource,
    duration_ps: u64,
    next_slice: u64,
    buffer: std::vec::IntoIter<PairEvent<'a>>,
}

impl<'a> Iterator for PairStream<'a> {
    type Item = PairEvent<'a>;

    fn next(&mut self) -> Option<PairEvent<'a>> {
        loop {
            if let Some(e) = self.buffer.next() {
                return Some(e);
            }
            if self.next_slice >= self.source.slice_count(self.duration_ps) {
                return None;
            }
            self.buffer = self.source.slice(self.next_slice, self.duration_ps).into_iter();
            self.next_slice += 1;
        }
    }
}

/// Validate a run and return its duration in picoseconds.
pub fn run_duration_ps(duration_s: f64) -> Result<u64, SourceError> {
    positive("duration_s", duration_s)?;
    Ok((duration_s * PS_PER_S).round() as u64)
}

/// Generate the pair stream for `duration_s` seconds.
pub fn sample_pairs<'a>(
    source: &'a PairSource,
    crystal: &CrystalConfig,
    duration_s: f64,
) -> Result<PairStream<'a>, SourceError> {
    crystal.validate()?;
    Ok(source.stream(run_duration_ps(duration_s)?))
}
