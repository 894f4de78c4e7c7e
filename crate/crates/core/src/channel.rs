//! The 19-core fiber: geometry of the end-face, coupling of far-field photons
//! into cores, and per-core transmission, cross-talk, polarization rotation
//! and fan-out delay.
//!
//! Core numbering: `0` is the centre core, `1..=6` the inner ring at azimuths
//! 0°, 60°, …, and `7..=18` the outer ring at azimuths 0°, 30°, … . Outer
//! cores on the hexagon corners sit at 64.5 µm, those on the edges at 54.5 µm.

use std::fmt;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::polarization::{apply_polarization_rotation, Arm, PolarizationRotation, PolarizationState};

pub const CORE_COUNT: usize = 19;
pub const PITCH_UM: f64 = 32.25;
pub const OUTER_CORNER_RADIUS_UM: f64 = 64.5;
pub const OUTER_EDGE_RADIUS_UM: f64 = 54.5;
pub const FIBER_LENGTH_M: f64 = 411.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("core {0} has no opposite core")]
    NoOpposite(CoreId),
    #[error("unknown core id {0}")]
    UnknownCore(u8),
    #[error("invalid channel parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoreId(pub u8);

impl CoreId {
    pub const CENTER: CoreId = CoreId(0);

    pub fn new(id: u8) -> Result<Self, ChannelError> {
        if (id as usize) < CORE_COUNT {
            Ok(CoreId(id))
        } else {
            Err(ChannelError::UnknownCore(id))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = CoreId> {
        (0..CORE_COUNT as u8).map(CoreId)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ring {
    Center,
    Inner,
    Outer,
}

impl Ring {
    /// Nominal radius illuminated for this ring; the outer value is the mean
    /// of the corner and edge radii.
    pub fn nominal_radius_um(self) -> f64 {
        match self {
            Ring::Center => 0.0,
            Ring::Inner => PITCH_UM,
            Ring::Outer => 0.5 * (OUTER_CORNER_RADIUS_UM + OUTER_EDGE_RADIUS_UM),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ring::Center => "center",
            Ring::Inner => "inner",
            Ring::Outer => "outer",
        }
    }
}

impl fmt::Display for Ring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// End-face geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreLayout {
    positions: [Point; CORE_COUNT],
    rings: [Ring; CORE_COUNT],
    opposite: [Option<CoreId>; CORE_COUNT],
    pitch: f64,
}

impl Default for CoreLayout {
    fn default() -> Self {
        build_layout()
    }
}

/// The 19-core hexagonal layout.
pub fn build_layout() -> CoreLayout {
    let mut positions = [Point::ORIGIN; CORE_COUNT];
    let mut rings = [Ring::Center; CORE_COUNT];
    for k in 0..6 {
        positions[1 + k] = Point::from_polar(PITCH_UM, (60.0 * k as f64).to_radians());
        rings[1 + k] = Ring::Inner;
    }
    for j in 0..12 {
        let r = if j % 2 == 0 { OUTER_CORNER_RADIUS_UM } else { OUTER_EDGE_RADIUS_UM };
        positions[7 + j] = Point::from_polar(r, (30.0 * j as f64).to_radians());
        rings[7 + j] = Ring::Outer;
    }
    let mut opposite = [None; CORE_COUNT];
    for m in 1..CORE_COUNT {
        let target = -positions[m];
        opposite[m] = (1..CORE_COUNT)
            .find(|&l| positions[l].distance_sq(target) < 1e-12)
            .map(|l| CoreId(l as u8));
    }
    CoreLayout { positions, rings, opposite, pitch: PITCH_UM }
}

impl CoreLayout {
    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn position(&self, core: CoreId) -> Point {
        self.positions[core.index()]
    }

    pub fn positions(&self) -> &[Point; CORE_COUNT] {
        &self.positions
    }

    pub fn ring(&self, core: CoreId) -> Ring {
        self.rings[core.index()]
    }

    pub fn cores_in(&self, ring: Ring) -> Vec<CoreId> {
        CoreId::all().filter(|&c| self.ring(c) == ring).collect()
    }

    /// The core related to `m` by point reflection through the fiber axis.
    pub fn opposite_core(&self, m: CoreId) -> Result<CoreId, ChannelError> {
        self.opposite[m.index()].ok_or(ChannelError::NoOpposite(m))
    }

    /// Unordered opposite pairs of a ring, lower id first.
    pub fn opposite_pairs(&self, ring: Ring) -> Vec<(CoreId, CoreId)> {
        self.cores_in(ring)
            .into_iter()
            .filter_map(|m| self.opposite_core(m).ok().filter(|&o| o > m).map(|o| (m, o)))
            .collect()
    }

    /// Cores whose centres lie within `1.2 × pitch` of `core`.
    pub fn neighbors(&self, core: CoreId) -> Vec<CoreId> {
        let p = self.position(core);
        let reach = (1.2 * self.pitch).powi(2);
        CoreId::all().filter(|&c| c != core && self.position(c).distance_sq(p) <= reach).collect()
    }

    /// Labels in the `1, 2, 3, 1', 2', 3'` / `4 … 9, 4' … 9'` convention.
    pub fn label(&self, core: CoreId) -> String {
        match core.0 {
            0 => "C".to_string(),
            k @ 1..=3 => k.to_string(),
            k @ 4..=6 => format!("{}'", k - 3),
            k @ 7..=12 => (k - 3).to_string(),
            k => format!("{}'", k - 9),
        }
    }

    /// CSV export: `core,x_um,y_um,ring`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("core,x_um,y_um,ring\n");
        for c in CoreId::all() {
            let p = self.position(c);
            s.push_str(&format!("{},{:.6},{:.6},{}\n", c, p.x, p.y, self.ring(c)));
        }
        s
    }
}

/// Lens train imaging the far field onto the fiber face, plus the mode size of
/// the cores and any lateral misalignment of the fiber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingModel {
    pub f1_mm: f64,
    pub f2_mm: f64,
    pub f3_mm: f64,
    pub mode_field_radius_um: f64,
    /// Position of the fiber axis relative to the cone axis.
    pub fiber_offset_um: Point,
}

impl Default for CouplingModel {
    fn default() -> Self {
        CouplingModel { f1_mm: 200.0, f2_mm: 150.0, f3_mm: 4.51, mode_field_radius_um: 5.2, fiber_offset_um: Point::ORIGIN }
    }
}

/// Coupling acceptance cut-off, in mode-field radii.
pub const COUPLING_REACH: f64 = 3.0;

impl CouplingModel {
    pub fn demagnification(&self) -> f64 {
        self.f3_mm / self.f2_mm
    }

    /// Far-field (focal plane of the first lens) radius imaged to `fiber_radius_um`.
    pub fn far_field_radius_um(&self, fiber_radius_um: f64) -> f64 {
        fiber_radius_um / self.demagnification()
    }

    /// Emission half-angle outside the crystal that lands at `fiber_radius_um`.
    pub fn emission_angle_deg(&self, fiber_radius_um: f64) -> f64 {
        (self.far_field_radius_um(fiber_radius_um) * 1e-3 / self.f1_mm).atan().to_degrees()
    }

    pub fn validate(&self, layout: &CoreLayout) -> Result<(), ChannelError> {
        for (name, v) in [("f1_mm", self.f1_mm), ("f2_mm", self.f2_mm), ("f3_mm", self.f3_mm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ChannelError::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        let w = self.mode_field_radius_um;
        if !(w.is_finite() && w > 0.0 && w < layout.pitch() / 2.0) {
            return Err(ChannelError::InvalidParameter(format!(
                "mode_field_radius_um = {w} must lie in (0, {})",
                layout.pitch() / 2.0
            )));
        }
        if !self.fiber_offset_um.is_finite() {
            return Err(ChannelError::InvalidParameter("fiber offset must be finite".into()));
        }
        Ok(())
    }

    /// Coupling probabilities `exp(−d²/w²)` to every core within `3w`,
    /// normalised if their sum exceeds one.
    pub fn coupling_probabilities(&self, position: Point, layout: &CoreLayout) -> Vec<(CoreId, f64)> {
        let w2 = self.mode_field_radius_um.powi(2);
        let reach2 = COUPLING_REACH * COUPLING_REACH * w2;
        let p = position - self.fiber_offset_um;
        let mut out: Vec<(CoreId, f64)> = CoreId::all()
            .filter_map(|c| {
                let d2 = layout.position(c).distance_sq(p);
                (d2 <= reach2).then(|| (c, (-d2 / w2).exp()))
            })
            .collect();
        let total: f64 = out.iter().map(|(_, q)| q).sum();
        if total > 1.0 {
            out.iter_mut().for_each(|(_, q)| *q /= total);
        }
        out
    }
}

/// Couple a photon at `position` (fiber-face coordinates of the cone frame)
/// into a core, or `None` if it is lost.
pub fn couple<R: Rng + ?Sized>(position: Point, layout: &CoreLayout, coupling: &CouplingModel, rng: &mut R) -> Option<CoreId> {
    let w2 = coupling.mode_field_radius_um.powi(2);
    let reach2 = COUPLING_REACH * COUPLING_REACH * w2;
    let p = position - coupling.fiber_offset_um;
    // Fast path: at most one core is within reach whenever 6w < pitch.
    if 2.0 * COUPLING_REACH * coupling.mode_field_radius_um < layout.pitch() {
        let (core, d2) = layout
            .positions()
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.distance_sq(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        if d2 > reach2 {
            return None;
        }
        return (rng.random::<f64>() < (-d2 / w2).exp()).then_some(CoreId(core as u8));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (core, q) in coupling.coupling_probabilities(position, layout) {
        acc += q;
        if u < acc {
            return Some(core);
        }
    }
    None
}

const NO_CORE: u8 = u8::MAX;

/// [`couple`] with a precomputed grid of candidate cores, for repeated use
/// with one layout and model. Makes the same draws and returns the same cores.
#[derive(Debug, Clone)]
pub struct Coupler {
    layout: CoreLayout,
    model: CouplingModel,
    w2: f64,
    reach2: f64,
    lo: f64,
    cell: f64,
    side: usize,
    /// Up to three candidates per cell; `None` when the fast path does not apply.
    cells: Option<Vec<[u8; 3]>>,
}

impl Coupler {
    pub fn new(layout: &CoreLayout, model: &CouplingModel) -> Self {
        let w = model.mode_field_radius_um;
        let reach = COUPLING_REACH * w;
        let extent = layout.positions().iter().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max) + reach + w;
        let cell = w.max(1e-3);
        let side = ((2.0 * extent / cell).ceil() as usize).max(1);
        let lo = -extent;
        let cells = (2.0 * reach < layout.pitch()).then(|| {
            let mut cells = vec![[NO_CORE; 3]; side * side];
            for (i, c) in layout.positions().iter().enumerate() {
                let span = |v: f64| {
                    let a = (((v - reach - lo) / cell).floor().max(0.0)) as usize;
                    let b = ((((v + reach - lo) / cell).floor()) as usize).min(side - 1);
                    a..=b
                };
                for gy in span(c.y) {
                    for gx in span(c.x) {
                        // Distance from the core to the nearest point of the cell.
                        let (x0, y0) = (lo + gx as f64 * cell, lo + gy as f64 * cell);
                        let dx = (x0 - c.x).max(0.0).max(c.x - x0 - cell);
                        let dy = (y0 - c.y).max(0.0).max(c.y - y0 - cell);
                        if dx * dx + dy * dy <= reach * reach {
                            let slot = cells[gy * side + gx].iter_mut().find(|s| **s == NO_CORE).expect("≤ 3 cores near a cell");
                            *slot = i as u8;
                        }
                    }
                }
            }
            cells
        });
        Coupler { layout: layout.clone(), model: *model, w2: w * w, reach2: reach * reach, lo, cell, side, cells }
    }

    #[inline]
    pub fn couple<R: Rng + ?Sized>(&self, position: Point, rng: &mut R) -> Option<CoreId> {
        let Some(cells) = &self.cells else {
            return couple(position, &self.layout, &self.model, rng);
        };
        let p = position - self.model.fiber_offset_um;
        let gx = ((p.x - self.lo) / self.cell).floor();
        let gy = ((p.y - self.lo) / self.cell).floor();
        if !(gx >= 0.0 && gy >= 0.0 && (gx as usize) < self.side && (gy as usize) < self.side) {
            return None;
        }
        let pos = self.layout.positions();
        for &c in &cells[gy as usize * self.side + gx as usize] {
            if c == NO_CORE {
                break;
            }
            let d2 = pos[c as usize].distance_sq(p);
            if d2 <= self.reach2 {
                return (rng.random::<f64>() < (-d2 / self.w2).exp()).then_some(CoreId(c));
            }
        }
        None
    }
}

/// How per-core transmissions are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransmissionSpec {
    /// Each core drawn uniformly in `[min_db, max_db]` (values ≤ 0).
    RangeDb { min_db: f64, max_db: f64 },
    /// Explicit per-core values in dB, indexed by core id.
    PerCoreDb(Vec<f64>),
}

/// How static per-core polarization rotations are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RotationSpec {
    /// Random axis, rotation angle uniform in `[0, max_deg]` on the Bloch sphere.
    RandomResidual { max_deg: f64 },
    /// Explicit `(rotator, fast_axis, retardance)` in degrees, per core id.
    PerCore(Vec<[f64; 3]>),
}

/// Parameters from which a [`ChannelProperties`] realisation is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub transmission: TransmissionSpec,
    /// Leakage probability from a core into each of its physical neighbours.
    pub neighbor_crosstalk: f64,
    pub rotations: RotationSpec,
    /// Per-core output delays drawn uniformly in `[0, delay_spread_ps]`.
    pub delay_spread_ps: u64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            transmission: TransmissionSpec::RangeDb { min_db: -3.0, max_db: -2.0 },
            neighbor_crosstalk: 1e-3,
            rotations: RotationSpec::RandomResidual { max_deg: 0.0 },
            delay_spread_ps: 20_000,
        }
    }
}

/// Per-core propagation properties of fiber plus fan-out, fixed for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProperties {
    transmission: [f64; CORE_COUNT],
    rotations: [PolarizationRotation; CORE_COUNT],
    crosstalk: [[f64; CORE_COUNT]; CORE_COUNT],
    delay_ps: [u64; CORE_COUNT],
}

/// Outcome of sending one photon through the channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Transmission {
    Delivered { core: CoreId, polarization: PolarizationState },
    Lost,
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ChannelProperties {
    /// Lossless, cross-talk free, no rotation, no delays.
    pub fn ideal() -> Self {
        let mut crosstalk = [[0.0; CORE_COUNT]; CORE_COUNT];
        for (i, row) in crosstalk.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        ChannelProperties {
            transmission: [1.0; CORE_COUNT],
            rotations: [PolarizationRotation::identity(); CORE_COUNT],
            crosstalk,
            delay_ps: [0; CORE_COUNT],
        }
    }

    pub fn new(
        transmission: [f64; CORE_COUNT],
        rotations: [PolarizationRotation; CORE_COUNT],
        crosstalk: [[f64; CORE_COUNT]; CORE_COUNT],
        delay_ps: [u64; CORE_COUNT],
    ) -> Result<Self, ChannelError> {
        let ch = ChannelProperties { transmission, rotations, crosstalk, delay_ps };
        ch.validate()?;
        Ok(ch)
    }

    /// Draw one realisation of the channel from `spec`.
    pub fn draw<R: Rng + ?Sized>(layout: &CoreLayout, spec: &ChannelSpec, rng: &mut R) -> Result<Self, ChannelError> {
        let mut ch = ChannelProperties::ideal();
        match &spec.transmission {
            TransmissionSpec::RangeDb { min_db, max_db } => {
                if !(min_db.is_finite() && max_db.is_finite() && min_db <= max_db && *max_db <= 0.0) {
                    return Err(ChannelError::InvalidParameter(format!(
                        "transmission range [{min_db}, {max_db}] dB must satisfy min ≤ max ≤ 0"
                    )));
                }
                for t in ch.transmission.iter_mut() {
                    *t = db_to_linear(min_db + (max_db - min_db) * rng.random::<f64>());
                }
            }
            TransmissionSpec::PerCoreDb(values) => {
                if values.len() != CORE_COUNT {
                    return Err(ChannelError::InvalidParameter(format!(
                        "expected {CORE_COUNT} per-core transmissions, got {}",
                        values.len()
                    )));
                }
                for (t, db) in ch.transmission.iter_mut().zip(values) {
                    *t = db_to_linear(*db);
                }
            }
        }
        let eps = spec.neighbor_crosstalk;
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(ChannelError::InvalidParameter(format!("neighbor_crosstalk = {eps} must be ≥ 0")));
        }
        for c in CoreId::all() {
            let nb = layout.neighbors(c);
            let row = &mut ch.crosstalk[c.index()];
            for n in &nb {
                row[n.index()] = eps;
            }
            row[c.index()] = 1.0 - eps * nb.len() as f64;
        }
        match &spec.rotations {
            RotationSpec::RandomResidual { max_deg } => {
                if !(max_deg.is_finite() && *max_deg >= 0.0) {
                    return Err(ChannelError::InvalidParameter(format!("residual rotation {max_deg} must be ≥ 0")));
                }
                for r in ch.rotations.iter_mut() {
                    let angle = max_deg.to_radians() * rng.random::<f64>();
                    *r = random_rotation(rng, angle);
                }
            }
            RotationSpec::PerCore(values) => {
                if values.len() != CORE_COUNT {
                    return Err(ChannelError::InvalidParameter(format!(
                        "expected {CORE_COUNT} per-core rotations, got {}",
                        values.len()
                    )));
                }
                for (r, [rot, axis, ret]) in ch.rotations.iter_mut().zip(values) {
                    *r = PolarizationRotation::element(*rot, *axis, *ret);
                }
            }
        }
        for d in ch.delay_ps.iter_mut() {
            *d = rng.random_range(0..=spec.delay_spread_ps);
        }
        ch.validate()?;
        Ok(ch)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for (i, &t) in self.transmission.iter().enumerate() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(ChannelError::InvalidParameter(format!("transmission of core {i} = {t} outside (0, 1]")));
            }
        }
        for (i, row) in self.crosstalk.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(ChannelError::InvalidParameter(format!("crosstalk row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if sum > 1.0 + 1e-12 {
                return Err(ChannelError::InvalidParameter(format!("crosstalk row {i} sums to {sum} > 1")));
            }
            let off: f64 = sum - row[i];
            if row[i] <= off {
                return Err(ChannelError::InvalidParameter(format!("crosstalk row {i} is not diagonally dominant")));
            }
        }
        if self.rotations.iter().any(|r| !r.is_finite()) {
            return Err(ChannelError::InvalidParameter("non-finite rotation".into()));
        }
        Ok(())
    }

    pub fn transmission(&self, core: CoreId) -> f64 {
        self.transmission[core.index()]
    }

    pub fn rotation(&self, core: CoreId) -> &PolarizationRotation {
        &self.rotations[core.index()]
    }

    pub fn delay_ps(&self, core: CoreId) -> u64 {
        self.delay_ps[core.index()]
    }

    pub fn crosstalk_row(&self, core: CoreId) -> &[f64; CORE_COUNT] {
        &self.crosstalk[core.index()]
    }

    pub fn with_rotation(mut self, core: CoreId, rotation: PolarizationRotation) -> Self {
        self.rotations[core.index()] = rotation;
        self
    }

    pub fn with_transmission(mut self, core: CoreId, t: f64) -> Result<Self, ChannelError> {
        self.transmission[core.index()] = t;
        self.validate()?;
        Ok(self)
    }

    pub fn with_crosstalk_row(mut self, core: CoreId, row: [f64; CORE_COUNT]) -> Result<Self, ChannelError> {
        self.crosstalk[core.index()] = row;
        self.validate()?;
        Ok(self)
    }

    pub fn with_delay(mut self, core: CoreId, delay_ps: u64) -> Self {
        self.delay_ps[core.index()] = delay_ps;
        self
    }

    /// Exit core for a photon launched into `core`, or `None` if lost.
    pub fn route<R: Rng + ?Sized>(&self, core: CoreId, rng: &mut R) -> Option<CoreId> {
        let t = self.transmission[core.index()];
        let row = &self.crosstalk[core.index()];
        // One uniform draw decides survival and destination.
        let u = rng.random::<f64>();
        if u >= t {
            return None;
        }
        let v = u / t;
        let diag = row[core.index()];
        if v < diag {
            return Some(core);
        }
        let mut acc = diag;
        for (i, &p) in row.iter().enumerate() {
            if i == core.index() || p == 0.0 {
                continue;
            }
            acc += p;
            if v < acc {
                return Some(CoreId(i as u8));
            }
        }
        None
    }

    /// Exact outcome distribution of [`ChannelProperties::route`]; the last
    /// entry is the loss probability.
    pub fn delivery_probabilities(&self, core: CoreId) -> Vec<(Option<CoreId>, f64)> {
        let t = self.transmission[core.index()];
        let row = &self.crosstalk[core.index()];
        let mut out: Vec<(Option<CoreId>, f64)> =
            row.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (Some(CoreId(i as u8)), t * p)).collect();
        let delivered: f64 = out.iter().map(|(_, p)| p).sum();
        out.push((None, 1.0 - delivered));
        out
    }
}

/// Send one photon (arm `arm` of `state`) into `core`.
pub fn transmit<R: Rng + ?Sized>(
    core: CoreId,
    state: &PolarizationState,
    arm: Arm,
    channel: &ChannelProperties,
    rng: &mut R,
) -> Transmission {
    match channel.route(core, rng) {
        None => Transmission::Lost,
        // Birefringence accumulates in the launch core; leakage happens at the fan-out.
        Some(out) => Transmission::Delivered {
            core: out,
            polarization: apply_polarization_rotation(state, arm, channel.rotation(core)),
        },
    }
}

fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R, angle_rad: f64) -> PolarizationRotation {
    PolarizationRotation::from_rotation_vector(random_axis(rng) * angle_rad)
}

/// Slow environmental drift of the per-core birefringence: an independent
/// random walk of each core's rotation vector, reflected at a bound.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationDrift {
    step_rad: f64,
    bound_rad: f64,
    state: [Vector3<f64>; CORE_COUNT],
}

impl RotationDrift {
    pub fn new(step_deg: f64, bound_deg: f64) -> Result<Self, ChannelError> {
        if !(step_deg.is_finite() && step_deg >= 0.0 && bound_deg.is_finite() && bound_deg >= 0.0) {
            return Err(ChannelError::InvalidParameter(format!(
                "drift step {step_deg} and bound {bound_deg} must be ≥ 0"
            )));
        }
        Ok(RotationDrift { step_rad: step_deg.to_radians(), bound_rad: bound_deg.to_radians(), state: [Vector3::zeros(); CORE_COUNT] })
    }

    /// Advance every core by one step.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for v in self.state.iter_mut() {
            let d = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let mut next = *v + d * (self.step_rad / 3f64.sqrt());
            let n = next.norm();
            if n > self.bound_rad && n > 0.0 {
                // Reflect back inside the ball.
                let target = (2.0 * self.bound_rad - n).max(0.0);
                next *= target / n;
            }
            *v = next;
        }
    }

    /// Current drift rotation angle of `core`, degrees.
    pub fn magnitude_deg(&self, core: CoreId) -> f64 {
        self.state[core.index()].norm().to_degrees()
    }

    pub fn rotation(&self, core: CoreId) -> PolarizationRotation {
        PolarizationRotation::from_rotation_vector(self.state[core.index()])
    }

    /// `channel` with the drift applied after each core's static rotation.
    pub fn apply(&self, channel: &ChannelProperties) -> ChannelProperties {
        let mut out = channel.clone();
        for c in CoreId::all() {
            out.rotations[c.index()] = channel.rotation(c).then(&self.rotation(c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn layout_geometry() {
        let l = build_layout();
        assert_eq!(l.position(CoreId::CENTER), Point::ORIGIN);
        assert!((l.position(CoreId(1)).norm() - 32.25).abs() < 1e-12);
        assert_eq!(l.cores_in(Ring::Inner).len(), 6);
        assert_eq!(l.cores_in(Ring::Outer).len(), 12);
        for c in l.cores_in(Ring::Inner) {
            assert!((l.position(c).norm() - PITCH_UM).abs() < 1e-9);
        }
        let outer: Vec<f64> = l.cores_in(Ring::Outer).iter().map(|&c| l.position(c).norm()).collect();
        for (j, r) in outer.iter().enumerate() {
            let want = if j % 2 == 0 { 64.5 } else { 54.5 };
            assert!((r - want).abs() < 1e-9);
        }
    }

    #[test]
    fn layout_has_sixfold_symmetry() {
        let l = build_layout();
        let rot = 60f64.to_radians();
        for c in CoreId::all() {
            let p = l.position(c).rotated(rot);
            let hit = CoreId::all().find(|&d| l.position(d).distance_sq(p) < 1e-9);
            let d = hit.expect("rotated core lands on a core");
            assert_eq!(l.ring(c), l.ring(d));
        }
    }

    #[test]
    fn opposite_core_examples() {
        let l = build_layout();
        let m = l.opposite_core(CoreId(1)).unwrap();
        let p = l.position(m);
        assert!((p.x + 32.25).abs() < 1e-9 && p.y.abs() < 1e-9);
        let edge = CoreId(8);
        assert!((l.position(edge).norm() - 54.5).abs() < 1e-9);
        let o = l.opposite_core(edge).unwrap();
        assert!((l.position(o).norm() - 54.5).abs() < 1e-9);
        let dphi = (l.position(o).azimuth() - l.position(edge).azimuth()).rem_euclid(2.0 * std::f64::consts::PI);
        assert!((dphi - std::f64::consts::PI).abs() < 1e-9);
        assert_eq!(l.opposite_core(CoreId::CENTER), Err(ChannelError::NoOpposite(CoreId::CENTER)));
    }

    #[test]
    fn opposite_is_fixed_point_free_involution() {
        let l = build_layout();
        for c in CoreId::all().skip(1) {
            let o = l.opposite_core(c).unwrap();
            assert_ne!(o, c);
            assert_eq!(l.ring(o), l.ring(c));
            assert_eq!(l.opposite_core(o).unwrap(), c);
        }
        assert_eq!(l.opposite_pairs(Ring::Inner).len(), 3);
        assert_eq!(l.opposite_pairs(Ring::Outer).len(), 6);
    }

    #[test]
    fn labels_follow_primed_convention() {
        let l = build_layout();
        assert_eq!(l.label(CoreId(2)), "2");
        assert_eq!(l.label(CoreId(5)), "2'");
        assert_eq!(l.label(l.opposite_core(CoreId(2)).unwrap()), "2'");
        assert_eq!(l.label(CoreId(9)), "6");
        assert_eq!(l.label(l.opposite_core(CoreId(9)).unwrap()), "6'");
        assert!(l.to_csv().lines().count() == 20);
    }

    #[test]
    fn coupling_at_core_centre_and_midpoint() {
        let l = build_layout();
        let tight = CouplingModel { mode_field_radius_um: 1e-3, ..Default::default() };
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..1000 {
            assert_eq!(couple(l.position(CoreId(3)), &l, &tight, &mut rng), Some(CoreId(3)));
        }
        let wide = CouplingModel { mode_field_radius_um: 10.0, ..Default::default() };
        let mid = (l.position(CoreId(1)) + l.position(CoreId(2))) * 0.5;
        let probs = wide.coupling_probabilities(mid, &l);
        let p1 = probs.iter().find(|(c, _)| *c == CoreId(1)).unwrap().1;
        let p2 = probs.iter().find(|(c, _)| *c == CoreId(2)).unwrap().1;
        assert!((p1 - p2).abs() < 1e-12 && p1 > 0.0);
        // Far from every core.
        assert_eq!(couple(Point::new(16.1, 9.3) * 0.0 + Point::new(0.0, 100.0), &l, &CouplingModel::default(), &mut rng), None);
    }

    #[test]
    fn fast_coupling_path_matches_probabilities() {
        let l = build_layout();
        let m = CouplingModel::default();
        let pos = l.position(CoreId(4)) + Point::new(3.0, -2.0);
        let expected = m.coupling_probabilities(pos, &l);
        assert_eq!(expected.len(), 1);
        let mut rng = SeedTree::new(2).rng();
        let n = 200_000;
        let hits = (0..n).filter(|_| couple(pos, &l, &m, &mut rng) == Some(CoreId(4))).count() as f64;
        let p = expected[0].1;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() < 4.0 * sigma);
    }

    #[test]
    fn coupling_model_validation() {
        let l = build_layout();
        CouplingModel::default().validate(&l).unwrap();
        assert!((CouplingModel::default().demagnification() - 0.030_066_666_666_666_667).abs() < 1e-15);
        assert!(CouplingModel { mode_field_radius_um: 17.0, ..Default::default() }.validate(&l).is_err());
        assert!(CouplingModel { f2_mm: 0.0, ..Default::default() }.validate(&l).is_err());
    }

    #[test]
    fn ideal_transmit_is_identity() {
        let ch = ChannelProperties::ideal();
        let s = PolarizationState::isotropic(0.9).unwrap();
        let mut rng = SeedTree::new(3).rng();
        for c in CoreId::all() {
            match transmit(c, &s, Arm::A, &ch, &mut rng) {
                Transmission::Delivered { core, polarization } => {
                    assert_eq!(core, c);
                    assert_eq!(polarization.correlation_tensor(), s.correlation_tensor());
                }
                Transmission::Lost => panic!("ideal channel lost a photon"),
            }
        }
    }

    #[test]
    fn half_transmission_per_arm_quarter_pairs() {
        let mut ch = ChannelProperties::ideal();
        for c in CoreId::all() {
            ch = ch.with_transmission(c, 0.5).unwrap();
        }
        let mut rng = SeedTree::new(4).rng();
        let n = 100_000;
        let both = (0..n)
            .filter(|_| ch.route(CoreId(1), &mut rng).is_some() && ch.route(CoreId(4), &mut rng).is_some())
            .count() as f64;
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((both / n as f64 - 0.25).abs() < 3.0 * sigma, "{}", both / n as f64);
    }

    #[test]
    fn neighbour_leakage_fraction() {
        let mut row = [0.0; CORE_COUNT];
        row[1] = 0.98;
        row[2] = 0.01;
        row[6] = 0.01;
        let ch = ChannelProperties::ideal().with_crosstalk_row(CoreId(1), row).unwrap();
        let mut rng = SeedTree::new(5).rng();
        let n = 100_000;
        let leaked = (0..n).filter(|_| ch.route(CoreId(1), &mut rng) != Some(CoreId(1))).count() as f64;
        let sigma = (0.02f64 * 0.98 / n as f64).sqrt();
        assert!((leaked / n as f64 - 0.02).abs() < 3.0 * sigma);
    }

    #[test]
    fn drawn_channel_is_valid_and_reproducible() {
        let l = build_layout();
        let spec = ChannelSpec { rotations: RotationSpec::RandomResidual { max_deg: 10.0 }, ..Default::default() };
        let a = ChannelProperties::draw(&l, &spec, &mut SeedTree::new(6).rng()).unwrap();
        let b = ChannelProperties::draw(&l, &spec, &mut SeedTree::new(6).rng()).unwrap();
        assert_eq!(a, b);
        for c in CoreId::all() {
            let t = a.transmission(c);
            assert!((db_to_linear(-3.0)..=db_to_linear(-2.0)).contains(&t));
            assert!(a.rotation(c).angle() <= 10f64.to_radians() + 1e-12);
            assert!(a.delay_ps(c) <= 20_000);
        }
        let bad = ChannelSpec { transmission: TransmissionSpec::PerCoreDb(vec![-1.0; 3]), ..Default::default() };
        assert!(ChannelProperties::draw(&l, &bad, &mut SeedTree::new(6).rng()).is_err());
        let gain = ChannelSpec { transmission: TransmissionSpec::RangeDb { min_db: -1.0, max_db: 1.0 }, ..Default::default() };
        assert!(ChannelProperties::draw(&l, &gain, &mut SeedTree::new(6).rng()).is_err());
    }

    #[test]
    fn drift_stays_bounded() {
        let mut d = RotationDrift::new(5.0, 12.0).unwrap();
        let mut rng = SeedTree::new(7).rng();
        for _ in 0..500 {
            d.step(&mut rng);
            for c in CoreId::all() {
                assert!(d.magnitude_deg(c) <= 12.0 + 1e-9);
            }
        }
        let zero = RotationDrift::new(0.0, 12.0).unwrap();
        let ch = ChannelProperties::ideal();
        assert_eq!(zero.apply(&ch), ch);
    }

    proptest! {
        #[test]
        fn delivery_probabilities_conserve(seed in 0u64..500, eps in 0.0..0.02f64, lo in -6.0..-0.5f64) {
            let l = build_layout();
            let spec = ChannelSpec { transmission: TransmissionSpec::RangeDb { min_db: lo, max_db: 0.0 }, neighbor_crosstalk: eps, ..Default::default() };
            let ch = ChannelProperties::draw(&l, &spec, &mut SeedTree::new(seed).rng()).unwrap();
            for c in CoreId::all() {
                let total: f64 = ch.delivery_probabilities(c).iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn coupling_is_translation_covariant(x in -80.0..80.0f64, y in -80.0..80.0f64, dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let l = build_layout();
            let base = CouplingModel::default();
            let shifted = CouplingModel { fiber_offset_um: Point::new(dx, dy), ..base };
            let a = base.coupling_probabilities(Point::new(x, y), &l);
            let b = shifted.coupling_probabilities(Point::new(x + dx, y + dy), &l);
            prop_assert_eq!(a.len(), b.len());
            for ((ca, pa), (cb, pb)) in a.iter().zip(&b) {
                prop_assert_eq!(ca, cb);
                prop_assert!((pa - pb).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn coupler_matches_reference(x in -90.0f64..90.0, y in -90.0f64..90.0, ox in -4.0f64..4.0, seed in 0u64..1000) {
            let l = build_layout();
            let m = CouplingModel { fiber_offset_um: Point::new(ox, -0.5 * ox), ..CouplingModel::default() };
            let c = Coupler::new(&l, &m);
            let (mut r1, mut r2) = (SeedTree::new(seed).rng(), SeedTree::new(seed).rng());
            for k in 0..8 {
                let p = Point::new(x, y) * (k as f64 / 8.0);
                prop_assert_eq!(c.couple(p, &mut r1), couple(p, &l, &m, &mut r2));
            }
            for core in CoreId::all() {
                let p = l.position(core) + Point::new(x, y) * 0.2;
                prop_assert_eq!(c.couple(p, &mut r1), couple(p, &l, &m, &mut r2));
            }
            prop_assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
    }
}
