//! Polarization fringes: module A fixed per basis, module B's wave plate scanned.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sdm_core::channel::CoreId;
use sdm_core::metrics::{fit_fringe, FringeFit, VisibilityEstimate};
use sdm_core::polarization::{Analyzer, Port};
use serde::{Deserialize, Serialize};

use super::{grid, Context};
use crate::analysis::coincidences;
use crate::apparatus::{analyzer_channel, Monitor};
use crate::config::FRINGE_BASES;
use crate::output::{Csv, Record};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFit {
    pub basis: String,
    pub hwp_a_deg: f64,
    pub hwp_b_deg: Vec<f64>,
    pub counts: Vec<u64>,
    pub fit: Option<FringeFit>,
    /// Fit failure, reported instead of aborting the scan.
    pub error: Option<String>,
    pub record: Option<Record>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeResult {
    pub pair: (CoreId, CoreId),
    pub bases: Vec<BasisFit>,
    /// Mean of the H and V fringe visibilities.
    pub visibility_hv: Option<Record>,
    /// Mean of the D and A fringe visibilities.
    pub visibility_da: Option<Record>,
    /// Phase of the V fringe minus that of the H fringe, wave-plate degrees in [0, 90).
    pub hv_phase_difference_deg: Option<f64>,
    pub hv_phase_difference_error_deg: Option<f64>,
}

impl FringeResult {
    pub fn basis(&self, name: &str) -> Option<&BasisFit> {
        self.bases.iter().find(|b| b.basis == name)
    }
}

fn basis_name(hwp: f64) -> String {
    FRINGE_BASES
        .iter()
        .find(|(_, a)| (a - hwp).abs() < 1e-9)
        .map(|(n, _)| n.to_string())
        .unwrap_or_else(|| format!("hwp{hwp}"))
}

pub(super) fn run(ctx: &mut Context<'_>) -> Result<FringeResult, SimError> {
    let s = &ctx.cfg.scenario;
    let [a, b] = s.pair.expect("validated");
    let (m, l) = (CoreId(a), CoreId(b));
    let angles_a = s.module_a_hwp_deg.clone().expect("resolved");
    let angles_b = grid(s.scan_start_deg.unwrap(), s.scan_stop_deg.unwrap(), s.scan_step_deg.unwrap());
    let temperature_c = s.temperature_c.expect("resolved");
    let t = ctx.integration();
    let window = ctx.window();
    let channel = ctx.app.channel.clone();

    let settings: Vec<(usize, usize)> = (0..angles_a.len()).flat_map(|i| (0..angles_b.len()).map(move |j| (i, j))).collect();
    let shared: &Context<'_> = ctx;
    let acquired = settings
        .par_iter()
        .map(|&(i, j)| {
            let mut mon = BTreeMap::new();
            mon.insert(m, Monitor::Analyzer(Analyzer::new(angles_a[i])));
            mon.insert(l, Monitor::Analyzer(Analyzer::new(angles_b[j])));
            let acq = shared.acquire(&format!("fringe-a{i:02}-b{j:02}"), &channel, temperature_c, t, &mon)?;
            let delays = shared.core_delays(&acq.detections, &[(m, l)])?;
            let det = &acq.detections;
            let r = coincidences(
                det.stream(analyzer_channel(m, Port::Transmitted)),
                det.stream(analyzer_channel(l, Port::Transmitted)),
                window,
                delays[0].delay_ps,
                det.duration_ps,
            )?;
            let tags = shared.cfg.scenario.write_tags.then_some(acq);
            Ok((r.coincidences, delays, tags))
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    let mut counts = vec![vec![0u64; angles_b.len()]; angles_a.len()];
    let mut csv = Csv::new(&["basis", "hwp_a_deg", "hwp_b_deg", "coincidences", "delay_ps"]);
    for (&(i, j), (c, delays, tags)) in settings.iter().zip(acquired) {
        counts[i][j] = c;
        csv.row(&[basis_name(angles_a[i]), angles_a[i].to_string(), angles_b[j].to_string(), c.to_string(), delays[0].delay_ps.to_string()]);
        if let Some(acq) = tags {
            ctx.record(&acq)?;
        } else {
            ctx.manifest.timestamps.simulated_acquisition_s += t;
        }
        ctx.push_delays(&format!("fringe-a{i:02}-b{j:02}"), delays);
    }
    for ch in [analyzer_channel(m, Port::Transmitted), analyzer_channel(m, Port::Reflected), analyzer_channel(l, Port::Transmitted), analyzer_channel(l, Port::Reflected)] {
        ctx.manifest.channels.entry(ch).or_insert_with(|| crate::apparatus::channel_label(ch));
    }

    let mut bases = Vec::new();
    let header: Vec<String> = std::iter::once("hwp_b_deg".to_string()).chain(angles_a.iter().map(|&x| basis_name(x))).collect();
    let mut curves = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, &ha) in angles_a.iter().enumerate() {
        let y: Vec<f64> = counts[i].iter().map(|&c| c as f64).collect();
        let name = basis_name(ha);
        let (fit, error, record) = match fit_fringe(&angles_b, &y) {
            Ok(f) => {
                let est = VisibilityEstimate { value: f.visibility, std_error: f.visibility_error };
                let rec = Record::polarization("fringe_visibility", est, &counts[i], &ctx.config_hash)
                    .with("basis", &name)
                    .with("hwp_a_deg", ha)
                    .with("phase_deg", f.phase_deg);
                (Some(f), None, Some(rec))
            }
            Err(e) => (None, Some(e.to_string()), None),
        };
        bases.push(BasisFit { basis: name, hwp_a_deg: ha, hwp_b_deg: angles_b.clone(), counts: counts[i].clone(), fit, error, record });
    }
    let lo = angles_b[0];
    let hi = *angles_b.last().expect("non-empty");
    let mut theta = lo;
    while theta <= hi + 1e-9 {
        let mut row = vec![format!("{theta}")];
        for b in &bases {
            row.push(b.fit.as_ref().map(|f| format!("{:.4}", f.model(theta))).unwrap_or_default());
        }
        curves.row(&row);
        theta += 1.0;
    }

    let combined = |x: &str, y: &str, metric: &str| -> Option<Record> {
        let fx = bases.iter().find(|b| b.basis == x)?.fit.as_ref()?;
        let fy = bases.iter().find(|b| b.basis == y)?.fit.as_ref()?;
        let est = VisibilityEstimate {
            value: 0.5 * (fx.visibility + fy.visibility),
            std_error: 0.5 * fx.visibility_error.hypot(fy.visibility_error),
        };
        let inputs: Vec<&Vec<u64>> = bases.iter().filter(|b| b.basis == x || b.basis == y).map(|b| &b.counts).collect();
        Some(Record::polarization(metric, est, &inputs, &ctx.config_hash).with("bases", [x, y]))
    };
    let visibility_hv = combined("H", "V", "visibility_hv");
    let visibility_da = combined("D", "A", "visibility_da");
    let (hv_phase_difference_deg, hv_phase_difference_error_deg) = match (bases.iter().find(|b| b.basis == "H"), bases.iter().find(|b| b.basis == "V")) {
        (Some(h), Some(v)) => match (&h.fit, &v.fit) {
            (Some(fh), Some(fv)) => (Some((fv.phase_deg - fh.phase_deg).rem_euclid(90.0)), Some(phase_error(fh).hypot(phase_error(fv)))),
            _ => (None, None),
        },
        _ => (None, None),
    };
    let result = FringeResult { pair: (m, l), bases, visibility_hv, visibility_da, hv_phase_difference_deg, hv_phase_difference_error_deg };
    ctx.out.write("results/fringe_counts.csv", csv.into_string().as_bytes())?;
    ctx.out.write("results/fringe_curves.csv", curves.into_string().as_bytes())?;
    ctx.out.write_json("results/fringe_fits.json", &result)?;
    ctx.manifest.timestamps.simulated_end_s = ctx.manifest.timestamps.simulated_acquisition_s;
    Ok(result)
}

/// Phase uncertainty of a fit, wave-plate degrees: the fringe position error
/// is the amplitude error over the slope, `σ_V/V` radians of the 4θ argument.
fn phase_error(f: &FringeFit) -> f64 {
    if f.visibility > 0.0 {
        (f.visibility_error / f.visibility).to_degrees() / 4.0
    } else {
        f64::INFINITY
    }
}
