//! Estimators on coincidence counts: path and polarization visibility, CHSH,
//! fringe fitting and Poisson error propagation.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{CoreId, CoreLayout, Ring};
use crate::polarization::chsh_sign;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("visibility undefined: {0}")]
    UndefinedVisibility(String),
    #[error("insufficient counts: {0}")]
    InsufficientCounts(String),
    #[error("core {core} is not in the {ring} ring")]
    CoreNotInRing { core: CoreId, ring: Ring },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("fringe fit failed after {iterations} iterations: {reason}")]
    FitFailure { iterations: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Coincidence counts for every unordered pair of cores in one ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceMatrix {
    ring: Ring,
    cores: Vec<CoreId>,
    opposite: BTreeMap<CoreId, CoreId>,
    counts: BTreeMap<(CoreId, CoreId), u64>,
    pub integration_time_s: f64,
}

fn key(m: CoreId, l: CoreId) -> (CoreId, CoreId) {
    if m < l {
        (m, l)
    } else {
        (l, m)
    }
}

impl CoincidenceMatrix {
    pub fn new(ring: Ring, layout: &CoreLayout, integration_time_s: f64) -> Result<Self, MetricsError> {
        if ring == Ring::Center {
            return Err(MetricsError::InvalidInput("the centre core does not form a ring".into()));
        }
        let cores = layout.cores_in(ring);
        let opposite = cores.iter().map(|&c| (c, layout.opposite_core(c).expect("ring core"))).collect();
        let mut counts = BTreeMap::new();
        for (i, &m) in cores.iter().enumerate() {
            for &l in &cores[i + 1..] {
                counts.insert((m, l), 0);
            }
        }
        Ok(CoincidenceMatrix { ring, cores, opposite, counts, integration_time_s })
    }

    pub fn ring(&self) -> Ring {
        self.ring
    }

    pub fn cores(&self) -> &[CoreId] {
        &self.cores
    }

    pub fn pair_count(&self) -> usize {
        self.counts.len()
    }

    pub fn opposite(&self, m: CoreId) -> Result<CoreId, MetricsError> {
        self.opposite.get(&m).copied().ok_or(MetricsError::CoreNotInRing { core: m, ring: self.ring })
    }

    pub fn set(&mut self, m: CoreId, l: CoreId, count: u64) -> Result<(), MetricsError> {
        match self.counts.get_mut(&key(m, l)) {
            Some(c) => {
                *c = count;
                Ok(())
            }
            None => Err(MetricsError::InvalidInput(format!("pair ({m}, {l}) not in the {} ring", self.ring))),
        }
    }

    pub fn get(&self, m: CoreId, l: CoreId) -> Option<u64> {
        self.counts.get(&key(m, l)).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = ((CoreId, CoreId), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Non-opposite partners of `m` within the ring.
    pub fn cross_partners(&self, m: CoreId) -> Result<Vec<CoreId>, MetricsError> {
        let o = self.opposite(m)?;
        Ok(self.cores.iter().copied().filter(|&l| l != m && l != o).collect())
    }

    /// `m,l,count` rows.
    pub fn to_csv(&self, layout: &CoreLayout) -> String {
        let mut s = String::from("core_m,core_l,label_m,label_l,coincidences\n");
        for ((m, l), c) in self.pairs() {
            s.push_str(&format!("{m},{l},{},{},{c}\n", layout.label(m), layout.label(l)));
        }
        s
    }
}

/// `V = (C_mm' − S̄)/(C_mm' + S̄)` with `S̄` the mean coincidence count of `m`
/// with its non-opposite partners.
pub fn path_visibility(matrix: &CoincidenceMatrix, m: CoreId) -> Result<VisibilityEstimate, MetricsError> {
    let o = matrix.opposite(m)?;
    let c = matrix.get(m, o).expect("opposite pair present") as f64;
    let partners = matrix.cross_partners(m)?;
    let n = partners.len() as f64;
    let sigma: f64 = partners.iter().map(|&l| matrix.get(m, l).expect("pair present") as f64).sum();
    path_visibility_from(c, sigma, n)
}

/// Path visibility from the opposite count, the summed cross counts and the
/// number of cross pairs.
pub fn path_visibility_from(c: f64, sigma: f64, n: f64) -> Result<VisibilityEstimate, MetricsError> {
    let denom = n * c + sigma;
    if !(denom > 0.0) {
        return Err(MetricsError::UndefinedVisibility("opposite and cross coincidences are all zero".into()));
    }
    Ok(VisibilityEstimate {
        value: (n * c - sigma) / denom,
        std_error: 2.0 * n * (c * sigma * (c + sigma)).sqrt() / (denom * denom),
    })
}

/// Two-outcome contrast `(P − N)/(P + N)` with its Poisson error.
pub fn contrast(positive: f64, negative: f64) -> Result<VisibilityEstimate, MetricsError> {
    let total = positive + negative;
    if !(total > 0.0) {
        return Err(MetricsError::UndefinedVisibility("total count is zero".into()));
    }
    Ok(VisibilityEstimate {
        value: (positive - negative) / total,
        std_error: 2.0 * (positive * negative * total).sqrt() / (total * total),
    })
}

pub fn polarization_visibility(c_hh: u64, c_vv: u64, c_hv: u64, c_vh: u64) -> Result<VisibilityEstimate, MetricsError> {
    contrast((c_hh + c_vv) as f64, (c_hv + c_vh) as f64)
}

/// Four port-resolved coincidence counts for one analyzer setting pair.
/// `tr` is Alice transmitted with Bob reflected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SettingCounts {
    pub tt: u64,
    pub rr: u64,
    pub tr: u64,
    pub rt: u64,
}

impl SettingCounts {
    pub fn total(&self) -> u64 {
        self.tt + self.rr + self.tr + self.rt
    }

    pub fn correlation(&self) -> Result<VisibilityEstimate, MetricsError> {
        contrast((self.tt + self.rr) as f64, (self.tr + self.rt) as f64)
            .map_err(|_| MetricsError::InsufficientCounts("a correlation has a zero denominator".into()))
    }
}

/// Counts indexed `[i][j]` for settings `(a_i, b_j)`, `i, j ∈ {0, 1}`.
pub type ChshCounts = [[SettingCounts; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshEstimate {
    pub s: f64,
    pub std_error: f64,
    pub correlations: [[VisibilityEstimate; 2]; 2],
}

pub fn chsh_from_counts(counts: &ChshCounts) -> Result<ChshEstimate, MetricsError> {
    let mut rates = [[[0.0; 4]; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let c = counts[i][j];
            rates[i][j] = [c.tt as f64, c.rr as f64, c.tr as f64, c.rt as f64];
        }
    }
    chsh_from_rates(&rates)
}

/// CHSH from real-valued counts `[tt, rr, tr, rt]` per setting, e.g. exact
/// expectation values.
pub fn chsh_from_rates(rates: &[[[f64; 4]; 2]; 2]) -> Result<ChshEstimate, MetricsError> {
    let mut e = [[VisibilityEstimate { value: 0.0, std_error: 0.0 }; 2]; 2];
    let (mut s, mut var) = (0.0, 0.0);
    for i in 0..2 {
        for j in 0..2 {
            let [tt, rr, tr, rt] = rates[i][j];
            e[i][j] = contrast(tt + rr, tr + rt)
                .map_err(|_| MetricsError::InsufficientCounts(format!("setting ({i}, {j}) has a zero denominator")))?;
            s += chsh_sign(i, j) * e[i][j].value;
            var += e[i][j].std_error.powi(2);
        }
    }
    Ok(ChshEstimate { s, std_error: var.sqrt(), correlations: e })
}

/// Fitted `C(θ) = A·cos²(2(θ − θ0)) + B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub amplitude: f64,
    pub phase_deg: f64,
    pub offset: f64,
    pub visibility: f64,
    pub visibility_error: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl FringeFit {
    pub fn model(&self, theta_deg: f64) -> f64 {
        self.amplitude * (2.0 * (theta_deg - self.phase_deg)).to_radians().cos().powi(2) + self.offset
    }
}

pub const FRINGE_MAX_ITERATIONS: usize = 50;

fn fringe_basis(theta_deg: f64) -> Vector3<f64> {
    let x = (4.0 * theta_deg).to_radians();
    Vector3::new(1.0, x.cos(), x.sin())
}

/// Poisson-weighted least-squares fringe fit.
///
/// The model is linear in `(c0, c1, c2)` of `c0 + c1·cos4θ + c2·sin4θ`; the
/// weights `1/max(model, 1)` are iterated to a fixed point starting from the
/// curve through the data maximum, minimum and argmax.
pub fn fit_fringe(hwp_angles_deg: &[f64], counts: &[f64]) -> Result<FringeFit, MetricsError> {
    if hwp_angles_deg.len() != counts.len() {
        return Err(MetricsError::InvalidInput(format!(
            "{} angles but {} counts",
            hwp_angles_deg.len(),
            counts.len()
        )));
    }
    if hwp_angles_deg.iter().chain(counts).any(|v| !v.is_finite()) || counts.iter().any(|&c| c < 0.0) {
        return Err(MetricsError::InvalidInput("angles and counts must be finite, counts ≥ 0".into()));
    }
    let mut distinct: Vec<f64> = hwp_angles_deg.iter().map(|a| a.rem_euclid(360.0)).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() < 5 {
        return Err(MetricsError::InvalidInput(format!("need ≥ 5 distinct angles, got {}", distinct.len())));
    }
    let lo = hwp_angles_deg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hwp_angles_deg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 180.0 - 1e-9 {
        return Err(MetricsError::InvalidInput(format!("angles span {} deg, need ≥ 180", hi - lo)));
    }

    let basis: Vec<Vector3<f64>> = hwp_angles_deg.iter().map(|&t| fringe_basis(t)).collect();
    let (kmax, &cmax) = counts.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    let cmin = counts.iter().copied().fold(f64::INFINITY, f64::min);
    let rho0 = 0.5 * (cmax - cmin);
    let phi0 = (4.0 * hwp_angles_deg[kmax]).to_radians();
    let mut coef = Vector3::new(0.5 * (cmax + cmin), rho0 * phi0.cos(), rho0 * phi0.sin());

    let mut iterations = 0;
    let cov;
    loop {
        iterations += 1;
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for (x, &y) in basis.iter().zip(counts) {
            let w = 1.0 / x.dot(&coef).max(1.0);
            ata += w * x * x.transpose();
            atb += w * y * x;
        }
        let Some(inv) = ata.try_inverse() else {
            return Err(MetricsError::FitFailure { iterations, reason: "singular normal equations".into() });
        };
        let next = inv * atb;
        let change = (next - coef).norm();
        coef = next;
        if change <= 1e-12 * coef.norm().max(1.0) {
            cov = inv;
            break;
        }
        if iterations >= FRINGE_MAX_ITERATIONS {
            return Err(MetricsError::FitFailure {
                iterations,
                reason: format!("parameter change {change:.3e} above tolerance; current {coef:?}"),
            });
        }
    }

    let (c0, c1, c2) = (coef[0], coef[1], coef[2]);
    let rho = c1.hypot(c2);
    if !(c0 > 0.0) {
        return Err(MetricsError::FitFailure { iterations, reason: format!("non-positive mean level {c0}") });
    }
    let phase_deg = (c2.atan2(c1).to_degrees() / 4.0).rem_euclid(90.0);
    let visibility = rho / c0;
    let grad = if rho > 0.0 { Vector3::new(-rho / (c0 * c0), c1 / (rho * c0), c2 / (rho * c0)) } else { Vector3::new(0.0, 1.0 / c0, 0.0) };
    let visibility_error = (grad.transpose() * cov * grad)[(0, 0)].max(0.0).sqrt();
    let residuals = basis.iter().zip(counts).map(|(x, &y)| y - x.dot(&coef)).collect();
    Ok(FringeFit {
        amplitude: 2.0 * rho,
        phase_deg: if (phase_deg - 90.0).abs() < 1e-12 { 0.0 } else { phase_deg },
        offset: c0 - rho,
        visibility,
        visibility_error,
        residuals,
        iterations,
    })
}

/// First-order Poisson propagation: `Var f = Σ (∂f/∂C_i)² C_i`, derivatives by
/// central differences.
pub fn poisson_error<F>(value_function: F, counts: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = counts.to_vec();
    let mut var = 0.0;
    for i in 0..x.len() {
        if counts[i] <= 0.0 {
            continue;
        }
        let h = 1e-5 * counts[i].max(1.0);
        x[i] = counts[i] + h;
        let up = value_function(&x);
        x[i] = counts[i] - h;
        let down = value_function(&x);
        x[i] = counts[i];
        let d = (up - down) / (2.0 * h);
        var += d * d * counts[i];
    }
    var.sqrt()
}

/// Parametric bootstrap: standard deviation of `value_function` over Poisson
/// resamples of `counts`; resamples giving a non-finite value are skipped.
pub fn bootstrap_error<F, R>(value_function: F, counts: &[f64], samples: usize, rng: &mut R) -> f64
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let dists: Vec<Option<Poisson<f64>>> = counts.iter().map(|&c| if c > 0.0 { Poisson::new(c).ok() } else { None }).collect();
    let mut x = vec![0.0; counts.len()];
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for _ in 0..samples {
        for (xi, d) in x.iter_mut().zip(&dists) {
            *xi = d.as_ref().map_or(0.0, |d| d.sample(rng));
        }
        let v = value_function(&x);
        if !v.is_finite() {
            continue;
        }
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    if n < 2 {
        0.0
    } else {
        (m2 / (n - 1) as f64).sqrt()
    }
}

/// One analysed quantity, as emitted to results files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub metric: String,
    pub value: f64,
    pub std_error: f64,
    pub inputs_hash: String,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::build_layout;
    use crate::rng::SeedTree;
    use proptest::prelude::*;

    fn inner_matrix(opposite: u64, cross: u64) -> (CoincidenceMatrix, CoreId) {
        let l = build_layout();
        let mut m = CoincidenceMatrix::new(Ring::Inner, &l, 30.0).unwrap();
        let core = CoreId(1);
        let o = l.opposite_core(core).unwrap();
        m.set(core, o, opposite).unwrap();
        for p in m.cross_partners(core).unwrap() {
            m.set(core, p, cross).unwrap();
        }
        (m, core)
    }

    #[test]
    fn matrix_pair_counts() {
        let l = build_layout();
        assert_eq!(CoincidenceMatrix::new(Ring::Inner, &l, 1.0).unwrap().pair_count(), 15);
        assert_eq!(CoincidenceMatrix::new(Ring::Outer, &l, 1.0).unwrap().pair_count(), 66);
        assert!(CoincidenceMatrix::new(Ring::Center, &l, 1.0).is_err());
        let m = CoincidenceMatrix::new(Ring::Outer, &l, 1.0).unwrap();
        assert_eq!(m.cross_partners(CoreId(7)).unwrap().len(), 10);
        assert!(matches!(path_visibility(&m, CoreId(1)), Err(MetricsError::CoreNotInRing { .. })));
    }

    #[test]
    fn path_visibility_examples() {
        let (m, c) = inner_matrix(100, 0);
        let v = path_visibility(&m, c).unwrap();
        assert_eq!(v.value, 1.0);
        assert_eq!(v.std_error, 0.0);
        let (m, c) = inner_matrix(100, 5);
        let v = path_visibility(&m, c).unwrap();
        assert!((v.value - 95.0 / 105.0).abs() < 1e-12);
        let (m, c) = inner_matrix(0, 0);
        assert!(matches!(path_visibility(&m, c), Err(MetricsError::UndefinedVisibility(_))));
    }

    #[test]
    fn path_visibility_error_matches_numeric_propagation() {
        let numeric = poisson_error(|x| (4.0 * x[0] - x[1]) / (4.0 * x[0] + x[1]), &[900.0, 160.0]);
        let v = path_visibility_from(900.0, 160.0, 4.0).unwrap();
        assert!((v.std_error - numeric).abs() / numeric < 1e-6);
    }

    #[test]
    fn polarization_visibility_examples() {
        assert_eq!(polarization_visibility(50, 50, 0, 0).unwrap().value, 1.0);
        assert_eq!(polarization_visibility(50, 50, 50, 50).unwrap().value, 0.0);
        assert!(polarization_visibility(0, 0, 0, 0).is_err());
        let v = polarization_visibility(100, 0, 0, 0).unwrap();
        assert_eq!(v.std_error, 0.0);
    }

    #[test]
    fn chsh_zero_denominator() {
        let mut c: ChshCounts = [[SettingCounts { tt: 10, rr: 10, tr: 1, rt: 1 }; 2]; 2];
        c[1][0] = SettingCounts::default();
        assert!(matches!(chsh_from_counts(&c), Err(MetricsError::InsufficientCounts(_))));
    }

    fn fringe(a: f64, theta0: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let angles: Vec<f64> = (0..=18).map(|k| 20.0 * k as f64).collect();
        let counts = angles.iter().map(|&t| a * (2.0 * (t - theta0)).to_radians().cos().powi(2) + b).collect();
        (angles, counts)
    }

    #[test]
    fn fringe_exact_recovery() {
        let (x, y) = fringe(100.0, 0.0, 0.0);
        let f = fit_fringe(&x, &y).unwrap();
        assert!((f.amplitude - 100.0).abs() < 1e-9);
        assert!(f.offset.abs() < 1e-9);
        assert!((f.visibility - 1.0).abs() < 1e-9);
        assert!(f.phase_deg.abs() < 1e-9 || (f.phase_deg - 90.0).abs() < 1e-9);

        let (x, y) = fringe(80.0, 15.0, 10.0);
        let f = fit_fringe(&x, &y).unwrap();
        assert!((f.phase_deg - 15.0).abs() < 1e-9, "{}", f.phase_deg);
        assert!((f.visibility - 0.8).abs() < 1e-9);
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-9));
        let (hi, lo) = (f.model(f.phase_deg), f.model(f.phase_deg + 45.0));
        assert!((f.visibility - (hi - lo) / (hi + lo)).abs() < 1e-9);
    }

    #[test]
    fn fringe_preconditions() {
        let x = [0.0, 10.0, 20.0, 30.0, 40.0];
        assert!(matches!(fit_fringe(&x, &[1.0; 5]), Err(MetricsError::InvalidInput(_))));
        assert!(matches!(fit_fringe(&[0.0, 90.0, 180.0, 270.0], &[1.0; 4]), Err(MetricsError::InvalidInput(_))));
        assert!(matches!(fit_fringe(&[0.0, 90.0], &[1.0]), Err(MetricsError::InvalidInput(_))));
        // Every angle congruent modulo the fringe period: cos4θ and sin4θ are constant.
        let x = [0.0, 90.0, 180.0, 270.0, 360.0, 450.0];
        assert!(fit_fringe(&x, &[5.0; 6]).is_err());
    }

    #[test]
    fn fringe_coverage_under_poisson_noise() {
        let (x, mean) = fringe(9_000.0, 7.0, 1_000.0);
        let truth = 9_000.0 / 11_000.0;
        let mut rng = SeedTree::new(11).rng();
        let mut covered = 0;
        for _ in 0..100 {
            let y: Vec<f64> = mean.iter().map(|&m| Poisson::new(m).unwrap().sample(&mut rng)).collect();
            let f = fit_fringe(&x, &y).unwrap();
            if (f.visibility - truth).abs() <= 3.0 * f.visibility_error {
                covered += 1;
            }
        }
        assert!(covered >= 95, "{covered}");
    }

    #[test]
    fn ratio_error_against_bootstrap() {
        let counts = [10_000.0, 10_000.0];
        let f = |x: &[f64]| x[0] / x[1];
        let analytic = poisson_error(f, &counts);
        assert!((analytic - 2f64.sqrt() * 0.01).abs() < 1e-6);
        let boot = bootstrap_error(f, &counts, 10_000, &mut SeedTree::new(12).rng());
        assert!((boot - analytic).abs() / analytic < 0.10);
        assert_eq!(poisson_error(|x| (x[0] - x[1]) / (x[0] + x[1]), &[100.0, 0.0]), 0.0);
    }

    #[test]
    fn error_scales_with_inverse_root_time() {
        let v1 = contrast(9_500.0, 500.0).unwrap();
        let v4 = contrast(38_000.0, 2_000.0).unwrap();
        assert!((v1.std_error / v4.std_error - 2.0).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn path_visibility_decreasing_in_cross_count(c in 1u64..10_000, base in 0u64..1_000, extra in 1u64..1_000, which in 0usize..4) {
            let (mut m, core) = inner_matrix(c, base);
            let v0 = path_visibility(&m, core).unwrap().value;
            let partner = m.cross_partners(core).unwrap()[which];
            m.set(core, partner, base + extra).unwrap();
            let v1 = path_visibility(&m, core).unwrap().value;
            prop_assert!(v1 < v0);
            prop_assert!((-1.0..=1.0).contains(&v1));
        }

        #[test]
        fn polarization_visibility_scale_invariant(hh in 0u64..1000, vv in 0u64..1000, hv in 0u64..1000, vh in 1u64..1000, k in 1u64..50) {
            let a = polarization_visibility(hh, vv, hv, vh).unwrap();
            let b = polarization_visibility(k * hh, k * vv, k * hv, k * vh).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
            prop_assert!(a.std_error >= 0.0);
        }

        #[test]
        fn fringe_visibility_matches_extrema(a in 1.0..1e4f64, b in 0.0..1e3f64, t0 in 0.0..90.0f64) {
            let (x, y) = fringe(a, t0, b);
            let f = fit_fringe(&x, &y).unwrap();
            let (hi, lo) = (f.model(f.phase_deg), f.model(f.phase_deg + 45.0));
            prop_assert!((f.visibility - (hi - lo) / (hi + lo)).abs() < 1e-9);
            prop_assert!((f.visibility - a / (a + 2.0 * b)).abs() < 1e-9);
        }
    }
}
