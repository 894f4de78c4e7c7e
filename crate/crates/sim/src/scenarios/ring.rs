//! Path correlations over all core pairs of one ring.

use rayon::prelude::*;
use sdm_core::channel::{CoreId, Ring};
use sdm_core::metrics::{path_visibility, CoincidenceMatrix, VisibilityEstimate};
use serde::{Deserialize, Serialize};

use super::{Acquired, Context};
use crate::analysis::{coincidences, PairDelay};
use crate::apparatus::path_monitors;
use crate::config::AcquisitionMode;
use crate::output::{Csv, Record};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub core_m: CoreId,
    pub core_l: CoreId,
    pub opposite: bool,
    pub coincidences: u64,
    pub delay_ps: i64,
    pub singles: (u64, u64),
    pub accidental_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingResult {
    pub ring: Ring,
    pub temperature_c: f64,
    pub cone_radius_um: f64,
    pub integration_time_s: f64,
    pub pairs: Vec<PairCount>,
    pub visibilities: Vec<Record>,
    pub matrix: CoincidenceMatrix,
}

impl RingResult {
    pub fn visibility(&self, core: CoreId) -> Option<VisibilityEstimate> {
        self.visibilities
            .iter()
            .find(|r| r.context.get("core").and_then(|v| v.as_u64()) == Some(core.0 as u64))
            .map(|r| VisibilityEstimate { value: r.value, std_error: r.std_error })
    }

    pub fn min_visibility(&self) -> f64 {
        self.visibilities.iter().map(|r| r.value).fold(f64::INFINITY, f64::min)
    }

    pub fn max_visibility(&self) -> f64 {
        self.visibilities.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(super) fn run(ctx: &mut Context<'_>) -> Result<RingResult, SimError> {
    let s = &ctx.cfg.scenario;
    let ring = s.ring.expect("resolved");
    let temperature_c = s.temperature_c.expect("resolved");
    let mode = s.acquisition;
    let radius = ctx.app.cone_radius_um(temperature_c)?;
    let nominal = ring.nominal_radius_um();
    let width = ctx.app.source.radial_width_um;
    if (radius - nominal).abs() > 3.0 * width {
        ctx.warn(
            "scenario.temperature_c",
            format!(
                "cone radius {radius:.2} um at {temperature_c} C is more than 3 radial widths from the {} ring ({nominal} um)",
                ring.as_str()
            ),
        )?;
    }
    let layout = ctx.app.layout.clone();
    let cores = layout.cores_in(ring);
    let mut pairs = Vec::new();
    for (i, &m) in cores.iter().enumerate() {
        for &l in &cores[i + 1..] {
            pairs.push((m, l));
        }
    }
    let t = ctx.integration();
    let window = ctx.window();
    let channel = ctx.app.channel.clone();

    let mut counts = Vec::with_capacity(pairs.len());
    match mode {
        AcquisitionMode::Simultaneous => {
            let acq = ctx.acquire("ring", &channel, temperature_c, t, &path_monitors(cores.iter().copied()))?;
            ctx.record(&acq)?;
            let delays = ctx.core_delays(&acq.detections, &pairs)?;
            for (&(m, l), d) in pairs.iter().zip(&delays) {
                counts.push(count_pair(&acq, m, l, layout.opposite_core(m).ok() == Some(l), d, window)?);
            }
            ctx.push_delays(&acq.label, delays);
        }
        AcquisitionMode::Pairwise => {
            let shared: &Context<'_> = ctx;
            let acquired: Vec<(Acquired, Vec<PairDelay>)> = pairs
                .par_iter()
                .map(|&(m, l)| {
                    let acq = shared.acquire(&format!("pair-{}-{}", m.0, l.0), &channel, temperature_c, t, &path_monitors([m, l]))?;
                    let d = shared.core_delays(&acq.detections, &[(m, l)])?;
                    Ok((acq, d))
                })
                .collect::<Result<_, SimError>>()?;
            for ((acq, d), &(m, l)) in acquired.into_iter().zip(&pairs) {
                ctx.record(&acq)?;
                counts.push(count_pair(&acq, m, l, layout.opposite_core(m).ok() == Some(l), &d[0], window)?);
                ctx.push_delays(&acq.label, d);
            }
        }
    }

    let mut matrix = CoincidenceMatrix::new(ring, &layout, t).map_err(SimError::runtime)?;
    for p in &counts {
        matrix.set(p.core_m, p.core_l, p.coincidences).map_err(SimError::runtime)?;
    }
    let mut visibilities = Vec::new();
    for &m in &cores {
        let o = layout.opposite_core(m).map_err(SimError::runtime)?;
        let partners = matrix.cross_partners(m).map_err(SimError::runtime)?;
        let inputs: Vec<u64> = std::iter::once(o).chain(partners).map(|l| matrix.get(m, l).expect("in ring")).collect();
        let est = path_visibility(&matrix, m).map_err(SimError::runtime)?;
        visibilities.push(
            Record::new("path_visibility", est, &inputs, &ctx.config_hash)
                .with("core", m)
                .with("label", layout.label(m))
                .with("opposite_core", o)
                .with("ring", ring),
        );
    }

    let mut csv = Csv::new(&["core_m", "core_l", "label_m", "label_l", "opposite", "coincidences", "delay_ps", "singles_m", "singles_l", "accidental_estimate"]);
    for p in &counts {
        csv.row(&[
            p.core_m.to_string(),
            p.core_l.to_string(),
            layout.label(p.core_m),
            layout.label(p.core_l),
            p.opposite.to_string(),
            p.coincidences.to_string(),
            p.delay_ps.to_string(),
            p.singles.0.to_string(),
            p.singles.1.to_string(),
            format!("{:.6}", p.accidental_estimate),
        ]);
    }
    let result = RingResult {
        ring,
        temperature_c,
        cone_radius_um: radius,
        integration_time_s: t,
        pairs: counts,
        visibilities,
        matrix,
    };
    ctx.out.write("results/coincidence_matrix.csv", result.matrix.to_csv(&layout).as_bytes())?;
    ctx.out.write("results/pair_counts.csv", csv.into_string().as_bytes())?;
    ctx.out.write("results/layout.csv", layout.to_csv().as_bytes())?;
    ctx.out.write_json(
        "results/path_visibility.json",
        &serde_json::json!({
            "ring": ring,
            "temperature_c": temperature_c,
            "cone_radius_um": radius,
            "integration_time_s": t,
            "min": result.min_visibility(),
            "max": result.max_visibility(),
            "cores": result.visibilities,
        }),
    )?;
    Ok(result)
}

fn count_pair(acq: &Acquired, m: CoreId, l: CoreId, opposite: bool, d: &PairDelay, window: u64) -> Result<PairCount, SimError> {
    let det = &acq.detections;
    let (a, b) = (det.core_stream(m), det.core_stream(l));
    let r = coincidences(&a, &b, window, d.delay_ps, det.duration_ps)?;
    Ok(PairCount {
        core_m: m,
        core_l: l,
        opposite,
        coincidences: r.coincidences,
        delay_ps: d.delay_ps,
        singles: r.singles,
        accidental_estimate: r.accidental_estimate,
    })
}
