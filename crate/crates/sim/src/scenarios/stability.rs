//! Long-term monitoring of one inner-ring pair under slow birefringence drift.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sdm_core::channel::{CoreId, Ring, RotationDrift};
use sdm_core::metrics::{path_visibility_from, polarization_visibility, VisibilityEstimate};
use sdm_core::polarization::{Analyzer, Port};
use serde::{Deserialize, Serialize};

use super::{mean, pearson, rms, std_dev, Acquired, Context};
use crate::analysis::{coincidences, PairDelay};
use crate::apparatus::{analyzer_channel, Monitor};
use crate::output::{Csv, Record};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub index: usize,
    pub time_s: f64,
    /// "HV" or "DA".
    pub basis: String,
    pub opposite: u64,
    pub cross_sum: u64,
    pub path: Record,
    /// `[tt, rr, tr, rt]` of the analyzer ports.
    pub polarization_counts: [u64; 4],
    pub polarization: Record,
    pub drift_deg: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    /// RMS of the per-point propagated errors.
    pub rms_error: f64,
    /// `std_dev / rms_error`; close to 1 for pure counting scatter.
    pub scatter_ratio: f64,
}

impl SeriesSummary {
    fn of(values: &[f64], errors: &[f64]) -> Self {
        let sd = std_dev(values);
        let re = rms(errors);
        SeriesSummary {
            mean: mean(values),
            std_dev: sd,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            rms_error: re,
            scatter_ratio: if re > 0.0 { sd / re } else { f64::NAN },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub path: SeriesSummary,
    pub polarization: SeriesSummary,
    pub polarization_hv: SeriesSummary,
    pub polarization_da: SeriesSummary,
    /// Polarization scatter pooled over the two bases (each about its own mean)
    /// over the RMS propagated error.
    pub polarization_pooled_scatter_ratio: f64,
    /// Pearson correlation of the path visibility with the summed drift angle.
    pub path_drift_correlation: f64,
    pub polarization_drift_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub pair: (CoreId, CoreId),
    pub points: Vec<StabilityPoint>,
    pub summary: StabilitySummary,
}

pub(super) fn run(ctx: &mut Context<'_>) -> Result<StabilityResult, SimError> {
    let s = &ctx.cfg.scenario;
    let [a, b] = s.pair.expect("validated");
    let (m, l) = (CoreId(a), CoreId(b));
    let n_points = s.points.expect("resolved");
    let interval = s.interval_s.expect("resolved");
    let temperature_c = s.temperature_c.expect("resolved");
    let t = ctx.integration();
    let window = ctx.window();
    let layout = ctx.app.layout.clone();
    let ring = layout.cores_in(Ring::Inner);
    let partners: Vec<CoreId> = ring.iter().copied().filter(|&c| c != m && c != l).collect();

    // The drift is sequential; precompute the channel of every point.
    let mut drift = RotationDrift::new(s.drift_step_deg.unwrap(), s.drift_bound_deg.unwrap()).map_err(SimError::runtime)?;
    let mut rng = ctx.seed.child("drift").rng();
    let mut channels = Vec::with_capacity(n_points);
    for k in 0..n_points {
        if k > 0 {
            drift.step(&mut rng);
        }
        channels.push((drift.apply(&ctx.app.channel), (drift.magnitude_deg(m), drift.magnitude_deg(l))));
    }

    let pairs: Vec<(CoreId, CoreId)> = std::iter::once((m, l)).chain(partners.iter().map(|&p| (m, p))).collect();
    let shared: &Context<'_> = ctx;
    let acquired = (0..n_points)
        .into_par_iter()
        .map(|k| {
            // Bases alternate H/V and D/A.
            let hwp = if k % 2 == 0 { 0.0 } else { 22.5 };
            let mut mon: BTreeMap<CoreId, Monitor> = ring.iter().map(|&c| (c, Monitor::Path)).collect();
            mon.insert(m, Monitor::Analyzer(Analyzer::new(hwp)));
            mon.insert(l, Monitor::Analyzer(Analyzer::new(hwp)));
            let acq = shared.acquire(&format!("point-{k:03}"), &channels[k].0, temperature_c, t, &mon)?;
            let delays = shared.core_delays(&acq.detections, &pairs)?;
            let det = &acq.detections;
            let core_m = det.core_stream(m);
            let mut path_counts = Vec::with_capacity(pairs.len());
            for (&(_, p), d) in pairs.iter().zip(&delays) {
                path_counts.push(coincidences(&core_m, &det.core_stream(p), window, d.delay_ps, det.duration_ps)?.coincidences);
            }
            let pc = |pa: Port, pb: Port| -> Result<u64, SimError> {
                Ok(coincidences(det.stream(analyzer_channel(m, pa)), det.stream(analyzer_channel(l, pb)), window, delays[0].delay_ps, det.duration_ps)?
                    .coincidences)
            };
            use Port::{Reflected as R, Transmitted as T};
            let pol = [pc(T, T)?, pc(R, R)?, pc(T, R)?, pc(R, T)?];
            let tags = shared.cfg.scenario.write_tags.then_some(acq);
            Ok((path_counts, pol, delays, tags))
        })
        .collect::<Result<Vec<(Vec<u64>, [u64; 4], Vec<PairDelay>, Option<Acquired>)>, SimError>>()?;

    let mut points = Vec::with_capacity(n_points);
    let mut csv = Csv::new(&[
        "index", "time_s", "basis", "opposite", "cross_sum", "path_visibility", "path_error", "tt", "rr", "tr", "rt", "polarization_visibility",
        "polarization_error", "qkd_above_threshold", "drift_m_deg", "drift_l_deg",
    ]);
    for (k, (path_counts, pol, delays, tags)) in acquired.into_iter().enumerate() {
        let label = format!("point-{k:03}");
        match tags {
            Some(acq) => ctx.record(&acq)?,
            None => ctx.manifest.timestamps.simulated_acquisition_s += t,
        }
        ctx.push_delays(&label, delays);
        let c = path_counts[0];
        let sigma: u64 = path_counts[1..].iter().sum();
        let path_est = path_visibility_from(c as f64, sigma as f64, partners.len() as f64).map_err(SimError::runtime)?;
        let basis = if k % 2 == 0 { "HV" } else { "DA" };
        let pol_est = polarization_visibility(pol[0], pol[1], pol[2], pol[3]).map_err(SimError::runtime)?;
        let time_s = k as f64 * interval;
        let drift_deg = channels[k].1;
        let path = Record::new("path_visibility", path_est, &path_counts, &ctx.config_hash).with("point", k).with("core", m);
        let polarization = Record::polarization("polarization_visibility", pol_est, &pol, &ctx.config_hash).with("point", k).with("basis", basis);
        csv.row(&[
            k.to_string(),
            time_s.to_string(),
            basis.to_string(),
            c.to_string(),
            sigma.to_string(),
            format!("{:.6}", path_est.value),
            format!("{:.6}", path_est.std_error),
            pol[0].to_string(),
            pol[1].to_string(),
            pol[2].to_string(),
            pol[3].to_string(),
            format!("{:.6}", pol_est.value),
            format!("{:.6}", pol_est.std_error),
            polarization.qkd.map(|q| q.above_threshold).unwrap_or(false).to_string(),
            format!("{:.4}", drift_deg.0),
            format!("{:.4}", drift_deg.1),
        ]);
        points.push(StabilityPoint { index: k, time_s, basis: basis.to_string(), opposite: c, cross_sum: sigma, path, polarization_counts: pol, polarization, drift_deg });
    }
    for &c in &ring {
        let mon = if c == m || c == l { Monitor::Analyzer(Analyzer::new(0.0)) } else { Monitor::Path };
        for ch in mon.channels(c) {
            ctx.manifest.channels.entry(ch).or_insert_with(|| crate::apparatus::channel_label(ch));
        }
    }
    let last = ctx.manifest.timestamps.simulated_acquisition_s.max((n_points.saturating_sub(1)) as f64 * interval + t);
    ctx.manifest.timestamps.simulated_end_s = last;

    let summary = summarize(&points);
    let result = StabilityResult { pair: (m, l), points, summary };
    ctx.out.write("results/stability_timeseries.csv", csv.into_string().as_bytes())?;
    ctx.out.write_json("results/stability.json", &result)?;
    Ok(result)
}

fn est(r: &Record) -> VisibilityEstimate {
    VisibilityEstimate { value: r.value, std_error: r.std_error }
}

pub(crate) fn summarize(points: &[StabilityPoint]) -> StabilitySummary {
    let pv: Vec<f64> = points.iter().map(|p| est(&p.path).value).collect();
    let pe: Vec<f64> = points.iter().map(|p| est(&p.path).std_error).collect();
    let qv: Vec<f64> = points.iter().map(|p| p.polarization.value).collect();
    let qe: Vec<f64> = points.iter().map(|p| p.polarization.std_error).collect();
    let basis = |b: &str| -> (Vec<f64>, Vec<f64>) {
        points.iter().filter(|p| p.basis == b).map(|p| (p.polarization.value, p.polarization.std_error)).unzip()
    };
    let (hv, hve) = basis("HV");
    let (da, dae) = basis("DA");
    let dev2: f64 = hv.iter().map(|x| (x - mean(&hv)).powi(2)).chain(da.iter().map(|x| (x - mean(&da)).powi(2))).sum();
    let dof = (hv.len() + da.len()).saturating_sub(usize::from(!hv.is_empty()) + usize::from(!da.is_empty()));
    let pooled = if dof > 0 { (dev2 / dof as f64).sqrt() } else { 0.0 };
    let drift: Vec<f64> = points.iter().map(|p| p.drift_deg.0 + p.drift_deg.1).collect();
    let summary_of = |v: &[f64], e: &[f64]| if v.is_empty() { SeriesSummary::of(&[0.0], &[0.0]) } else { SeriesSummary::of(v, e) };
    StabilitySummary {
        path: summary_of(&pv, &pe),
        polarization: summary_of(&qv, &qe),
        polarization_hv: summary_of(&hv, &hve),
        polarization_da: summary_of(&da, &dae),
        polarization_pooled_scatter_ratio: if rms(&qe) > 0.0 { pooled / rms(&qe) } else { f64::NAN },
        path_drift_correlation: pearson(&pv, &drift),
        polarization_drift_correlation: pearson(&qv, &drift),
    }
}
