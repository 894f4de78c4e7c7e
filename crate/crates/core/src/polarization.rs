//! Two-qubit polarization states restricted to the Bell-diagonal family,
//! projective analysis with a half-wave plate and polarizing beam splitter,
//! correlation functions and the CHSH combination.
//!
//! States are carried as a 3×3 correlation tensor `T_ij = Tr[ρ σ_i ⊗ σ_j]` in
//! Bloch coordinates `(x, y, z) = (D/A, R/L, H/V)`. Bell-diagonal states have no
//! local Bloch vector, so every joint analyzer probability follows from `T`:
//!
//! ```text
//! P(s_a, s_b) = ¼ (1 + s_a s_b n(α)ᵀ T n(β)),   n(α) = (sin 2α, 0, cos 2α)
//! ```
//!
//! with `s = ±1` for the transmitted / reflected PBS port and `α = 2 θ_HWP`.
//!
//! Local birefringence (fiber cores, wave plates) acts on one photon as an
//! SO(3) rotation of its Bloch sphere; the state keeps its Bell-diagonal
//! parameters and accumulates the per-arm rotations as a frame.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PARAM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolarizationError {
    #[error("visibility {name} = {value} outside [0, 1]")]
    VisibilityOutOfRange { name: &'static str, value: f64 },
    #[error("state is not positive: V_DA = {visibility_da} exceeds (1 + V_HV)/2 with V_HV = {visibility_hv}")]
    NotPositive { visibility_hv: f64, visibility_da: f64 },
    #[error("non-finite parameter {0}")]
    NonFinite(&'static str),
}

/// PBS output port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    Transmitted,
    Reflected,
}

impl Port {
    pub const BOTH: [Port; 2] = [Port::Transmitted, Port::Reflected];

    pub fn sign(self) -> f64 {
        match self {
            Port::Transmitted => 1.0,
            Port::Reflected => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Port::Transmitted => 0,
            Port::Reflected => 1,
        }
    }
}

/// Which photon of the pair an operation acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    A,
    B,
}

/// HWP in front of a PBS that transmits H. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Analyzer {
    hwp_angle: f64,
}

impl Analyzer {
    pub fn new(hwp_angle_deg: f64) -> Self {
        Analyzer { hwp_angle: hwp_angle_deg.rem_euclid(360.0) }
    }

    /// Analyzer whose transmitted port selects linear polarization at `deg`.
    pub fn for_polarization(deg: f64) -> Self {
        Analyzer::new(deg / 2.0)
    }

    pub fn hwp_angle(&self) -> f64 {
        self.hwp_angle
    }

    /// Linear polarization transmitted by the PBS, in `[0, 180)` degrees.
    pub fn analysis_angle(&self) -> f64 {
        (2.0 * self.hwp_angle).rem_euclid(180.0)
    }

    pub fn port(self, port: Port) -> AnalyzerSetting {
        AnalyzerSetting { hwp_angle: self.hwp_angle, port }
    }
}

/// An analyzer together with the PBS port that is observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub hwp_angle: f64,
    pub port: Port,
}

impl AnalyzerSetting {
    pub fn new(hwp_angle_deg: f64, port: Port) -> Self {
        AnalyzerSetting { hwp_angle: hwp_angle_deg.rem_euclid(360.0), port }
    }

    pub fn analyzer(&self) -> Analyzer {
        Analyzer::new(self.hwp_angle)
    }

    pub fn analysis_angle(&self) -> f64 {
        self.analyzer().analysis_angle()
    }
}

fn bloch_linear(angle_deg: f64) -> Vector3<f64> {
    let (s, c) = (2.0 * angle_deg.to_radians()).sin_cos();
    Vector3::new(s, 0.0, c)
}

/// A birefringent element acting on one photon, as an SO(3) rotation of its
/// polarization Bloch sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationRotation(Rotation3<f64>);

impl Default for PolarizationRotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl PolarizationRotation {
    pub fn identity() -> Self {
        PolarizationRotation(Rotation3::identity())
    }

    /// Optical rotator: linear polarization at `ψ` leaves at `ψ + angle`.
    pub fn rotator(angle_deg: f64) -> Self {
        PolarizationRotation(Rotation3::from_axis_angle(&Vector3::y_axis(), 2.0 * angle_deg.to_radians()))
    }

    /// Linear retarder with fast axis at `fast_axis_deg` and retardance
    /// `retardance_deg` (180° is a half-wave plate).
    pub fn retarder(fast_axis_deg: f64, retardance_deg: f64) -> Self {
        let axis = Unit::new_normalize(bloch_linear(fast_axis_deg));
        PolarizationRotation(Rotation3::from_axis_angle(&axis, retardance_deg.to_radians()))
    }

    /// General element: a rotator followed by a linear retarder.
    pub fn element(rotator_deg: f64, fast_axis_deg: f64, retardance_deg: f64) -> Self {
        Self::rotator(rotator_deg).then(&Self::retarder(fast_axis_deg, retardance_deg))
    }

    /// Rotation about the Bloch vector `v` by `|v|` radians.
    pub fn from_rotation_vector(v: Vector3<f64>) -> Self {
        PolarizationRotation(Rotation3::new(v))
    }

    /// `self` first, then `next`.
    pub fn then(&self, next: &PolarizationRotation) -> Self {
        PolarizationRotation(next.0 * self.0)
    }

    pub fn inverse(&self) -> Self {
        PolarizationRotation(self.0.inverse())
    }

    /// Rotation angle on the Bloch sphere, radians in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    pub fn is_finite(&self) -> bool {
        self.0.matrix().iter().all(|v| v.is_finite())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        self.0.matrix()
    }
}

/// Bell-diagonal two-photon polarization state with optional local frames.
///
/// `|Φ+⟩` is `visibility_hv = visibility_da = 1`, `basis_phase = 0`. The
/// phase describes `(|HH⟩ + e^{iφ}|VV⟩)/√2`-type coherence.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizationState {
    visibility_hv: f64,
    visibility_da: f64,
    basis_phase: f64,
    frame_a: PolarizationRotation,
    frame_b: PolarizationRotation,
    tensor: Matrix3<f64>,
}

impl PolarizationState {
    /// `basis_phase` in radians.
    pub fn new(visibility_hv: f64, visibility_da: f64, basis_phase: f64) -> Result<Self, PolarizationError> {
        for (name, value) in [("visibility_hv", visibility_hv), ("visibility_da", visibility_da), ("basis_phase", basis_phase)] {
            if !value.is_finite() {
                return Err(PolarizationError::NonFinite(name));
            }
        }
        for (name, value) in [("V_HV", visibility_hv), ("V_DA", visibility_da)] {
            if !(-PARAM_TOL..=1.0 + PARAM_TOL).contains(&value) {
                return Err(PolarizationError::VisibilityOutOfRange { name, value });
            }
        }
        if 2.0 * visibility_da > 1.0 + visibility_hv + PARAM_TOL {
            return Err(PolarizationError::NotPositive { visibility_hv, visibility_da });
        }
        let mut s = PolarizationState {
            visibility_hv: visibility_hv.clamp(0.0, 1.0),
            visibility_da: visibility_da.clamp(0.0, 1.0),
            basis_phase,
            frame_a: PolarizationRotation::identity(),
            frame_b: PolarizationRotation::identity(),
            tensor: Matrix3::zeros(),
        };
        s.tensor = s.frame_tensor();
        Ok(s)
    }

    pub fn phi_plus() -> Self {
        Self::new(1.0, 1.0, 0.0).expect("Φ+ is valid")
    }

    /// Werner-like state with equal visibility in both bases.
    pub fn isotropic(visibility: f64) -> Result<Self, PolarizationError> {
        Self::new(visibility, visibility, 0.0)
    }

    /// Classical H/V correlations with no coherence; same joint statistics
    /// as `|HH⟩` for every correlation function.
    pub fn classical_hv() -> Self {
        Self::new(1.0, 0.0, 0.0).expect("valid")
    }

    pub fn maximally_mixed() -> Self {
        Self::new(0.0, 0.0, 0.0).expect("valid")
    }

    pub fn visibility_hv(&self) -> f64 {
        self.visibility_hv
    }

    pub fn visibility_da(&self) -> f64 {
        self.visibility_da
    }

    pub fn basis_phase(&self) -> f64 {
        self.basis_phase
    }

    pub fn frames(&self) -> (&PolarizationRotation, &PolarizationRotation) {
        (&self.frame_a, &self.frame_b)
    }

    pub fn correlation_tensor(&self) -> &Matrix3<f64> {
        &self.tensor
    }

    fn base_tensor(&self) -> Matrix3<f64> {
        let (s, c) = self.basis_phase.sin_cos();
        let d = self.visibility_da;
        Matrix3::new(d * c, d * s, 0.0, d * s, -d * c, 0.0, 0.0, 0.0, self.visibility_hv)
    }

    fn frame_tensor(&self) -> Matrix3<f64> {
        self.frame_a.matrix() * self.base_tensor() * self.frame_b.matrix().transpose()
    }

    /// Eigenvalues of the density operator (weights of Φ+, Φ−, Ψ+, Ψ− in the
    /// unrotated frame). Non-negative and summing to one for every valid state.
    pub fn bell_weights(&self) -> [f64; 4] {
        let (hv, da) = (self.visibility_hv, self.visibility_da);
        [
            0.25 * (1.0 + 2.0 * da + hv),
            0.25 * (1.0 - 2.0 * da + hv),
            0.25 * (1.0 - hv),
            0.25 * (1.0 - hv),
        ]
    }

    /// The same state with the roles of the two photons exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.frame_a, &mut s.frame_b);
        s.tensor = s.frame_tensor();
        // Base tensor is symmetric, so swapping frames is the full exchange.
        s
    }

    /// Correlation of the ±1 port outcomes for linear analysis angles
    /// `a`, `b` (polarization angles, degrees).
    pub fn correlation(&self, a_deg: f64, b_deg: f64) -> f64 {
        bloch_linear(a_deg).dot(&(self.tensor * bloch_linear(b_deg)))
    }
}

/// Probability that photon A exits `a.port` and photon B exits `b.port`.
pub fn coincidence_probability(state: &PolarizationState, a: &AnalyzerSetting, b: &AnalyzerSetting) -> f64 {
    let e = state.correlation(a.analysis_angle(), b.analysis_angle());
    (0.25 * (1.0 + a.port.sign() * b.port.sign() * e)).clamp(0.0, 1.0)
}

/// Joint port distribution `[[TT, TR], [RT, RR]]` for two analyzers.
pub fn port_distribution(state: &PolarizationState, a: Analyzer, b: Analyzer) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for pa in Port::BOTH {
        for pb in Port::BOTH {
            out[pa.index()][pb.index()] = coincidence_probability(state, &a.port(pa), &b.port(pb));
        }
    }
    out
}

/// `E(a, b)` for polarization angles in degrees.
pub fn correlation_e(state: &PolarizationState, a_deg: f64, b_deg: f64) -> f64 {
    state.correlation(a_deg, b_deg)
}

/// Assignment of analysis angles (polarization angles, degrees) to the four
/// CHSH slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshAngles {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for ChshAngles {
    /// The assignment of {22.5°, 67.5°} and {0°, 45°} that maximizes `S`
    /// for `|Φ+⟩` under `S = E11 + E21 + E12 − E22`.
    fn default() -> Self {
        ChshAngles { a1: 22.5, a2: 67.5, b1: 45.0, b2: 0.0 }
    }
}

impl ChshAngles {
    pub fn new(a1: f64, a2: f64, b1: f64, b2: f64) -> Self {
        ChshAngles { a1, a2, b1, b2 }
    }

    pub fn a(&self, i: usize) -> f64 {
        [self.a1, self.a2][i]
    }

    pub fn b(&self, j: usize) -> f64 {
        [self.b1, self.b2][j]
    }
}

/// Sign of `E(a_i, b_j)` in `S`.
pub fn chsh_sign(i: usize, j: usize) -> f64 {
    if i == 1 && j == 1 {
        -1.0
    } else {
        1.0
    }
}

/// `S = E(a1,b1) + E(a2,b1) + E(a1,b2) − E(a2,b2)`.
pub fn chsh_s(state: &PolarizationState, angles: &ChshAngles) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            s += chsh_sign(i, j) * state.correlation(angles.a(i), angles.b(j));
        }
    }
    s
}

/// Apply a local rotation to one photon of the pair.
pub fn apply_polarization_rotation(state: &PolarizationState, arm: Arm, rotation: &PolarizationRotation) -> PolarizationState {
    let mut s = state.clone();
    match arm {
        Arm::A => s.frame_a = s.frame_a.then(rotation),
        Arm::B => s.frame_b = s.frame_b.then(rotation),
    }
    s.tensor = s.frame_tensor();
    s
}

/// Tsirelson's bound.
pub const TSIRELSON: f64 = 2.0 * std::f64::consts::SQRT_2;
