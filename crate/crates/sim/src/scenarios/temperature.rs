//! Crystal temperature scan: per-core singles and opposite-core coincidences.

use rayon::prelude::*;
use sdm_core::channel::{CoreId, Ring, CORE_COUNT};
use serde::{Deserialize, Serialize};

use super::{grid, Context};
use crate::analysis::coincidences;
use crate::apparatus::path_monitors;
use crate::output::Csv;
use crate::SimError;

/// Calibration acquisitions used for delay discovery last at least this long.
const MIN_CALIBRATION_S: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorePeak {
    pub core: CoreId,
    pub label: String,
    pub ring: Ring,
    pub radius_um: f64,
    pub peak_temperature_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingScan {
    pub ring: Ring,
    /// Spread (max − min) of the single-core peak temperatures among cores
    /// at the same radius, worst group.
    pub peak_spread_c: f64,
    /// Symmetric illumination: spread within one scan step.
    pub symmetric: bool,
    /// Temperature maximising the summed opposite-core coincidences.
    pub optimum_temperature_c: f64,
    pub delays_ps: Vec<((CoreId, CoreId), i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureResult {
    pub temperatures_c: Vec<f64>,
    pub step_c: f64,
    /// `singles[k][core]`.
    pub singles: Vec<[u64; CORE_COUNT]>,
    /// Summed opposite-pair coincidences per temperature, inner then outer.
    pub opposite_coincidences: Vec<[u64; 2]>,
    pub core_peaks: Vec<CorePeak>,
    pub inner: RingScan,
    pub outer: RingScan,
}

/// Peak position of a sampled curve: vertex of a parabola fitted to
/// `ln(counts)` over the contiguous region around the maximum where the
/// counts stay above 60 % of it (at least three points), clamped to that
/// region. Falls back to the argmax when the fit is not concave.
pub fn peak_temperature(x: &[f64], counts: &[u64]) -> f64 {
    let Some((k, &max)) = counts.iter().enumerate().max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i))) else {
        return f64::NAN;
    };
    if max == 0 {
        return x[k];
    }
    let floor = 0.6 * max as f64;
    let (mut lo, mut hi) = (k, k);
    while lo > 0 && counts[lo - 1] as f64 >= floor {
        lo -= 1;
    }
    while hi + 1 < counts.len() && counts[hi + 1] as f64 >= floor {
        hi += 1;
    }
    while hi - lo < 2 && (lo > 0 || hi + 1 < counts.len()) {
        if lo > 0 {
            lo -= 1;
        }
        if hi - lo < 2 && hi + 1 < counts.len() {
            hi += 1;
        }
    }
    let pts: Vec<(f64, f64)> = (lo..=hi).filter(|&i| counts[i] > 0).map(|i| (x[i] - x[k], (counts[i] as f64).ln())).collect();
    if pts.len() < 3 {
        return x[k];
    }
    // Weighted least squares of y = a + b·u + c·u², weights = counts.
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for (i, &(u, y)) in (lo..=hi).filter(|&i| counts[i] > 0).zip(&pts) {
        let w = counts[i] as f64;
        let v = nalgebra::Vector3::new(1.0, u, u * u);
        ata += w * v * v.transpose();
        aty += w * y * v;
    }
    match ata.try_inverse() {
        Some(inv) => {
            let c = inv * aty;
            if c[2] < 0.0 {
                (x[k] - c[1] / (2.0 * c[2])).clamp(x[lo], x[hi])
            } else {
                x[k]
            }
        }
        None => x[k],
    }
}

pub(super) fn run(ctx: &mut Context<'_>) -> Result<TemperatureResult, SimError> {
    let s = &ctx.cfg.scenario;
    let step = s.t_step_c.unwrap();
    let temps = grid(s.t_start_c.unwrap(), s.t_stop_c.unwrap(), step);
    let t = ctx.integration();
    let window = ctx.window();
    let layout = ctx.app.layout.clone();
    let channel = ctx.app.channel.clone();
    let monitors = path_monitors(CoreId::all());
    let cal = ctx.app.source.calibration;

    // Delays from one acquisition at each ring's nominal temperature.
    let mut ring_delays = Vec::new();
    for (ring, tc, label) in [(Ring::Inner, cal.t_inner_c, "calibration-inner"), (Ring::Outer, cal.t_outer_c, "calibration-outer")] {
        let acq = ctx.acquire(label, &channel, tc, t.max(MIN_CALIBRATION_S), &monitors)?;
        ctx.record(&acq)?;
        let pairs = layout.opposite_pairs(ring);
        let d = ctx.core_delays(&acq.detections, &pairs)?;
        let delays: Vec<((CoreId, CoreId), i64)> = pairs.iter().copied().zip(d.iter().map(|x| x.delay_ps)).collect();
        ctx.push_delays(label, d);
        ring_delays.push(delays);
    }

    let shared: &Context<'_> = ctx;
    let rd = &ring_delays;
    let points = temps
        .par_iter()
        .enumerate()
        .map(|(k, &tc)| {
            let acq = shared.acquire(&format!("scan-{k:04}"), &channel, tc, t, &monitors)?;
            let det = &acq.detections;
            let mut singles = [0u64; CORE_COUNT];
            for c in CoreId::all() {
                singles[c.index()] = det.stream(c.0 as u16).len() as u64;
            }
            let mut opp = [0u64; 2];
            for (r, delays) in rd.iter().enumerate() {
                for &((m, l), d) in delays {
                    opp[r] += coincidences(det.stream(m.0 as u16), det.stream(l.0 as u16), window, d, det.duration_ps)?.coincidences;
                }
            }
            let tags = shared.cfg.scenario.write_tags.then_some(acq);
            Ok((singles, opp, tags))
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    let mut singles = Vec::with_capacity(temps.len());
    let mut opposite = Vec::with_capacity(temps.len());
    for (s, o, tags) in points {
        match tags {
            Some(acq) => ctx.record(&acq)?,
            None => ctx.manifest.timestamps.simulated_acquisition_s += t,
        }
        singles.push(s);
        opposite.push(o);
    }
    for c in CoreId::all() {
        ctx.manifest.channels.entry(c.0 as u16).or_insert_with(|| crate::apparatus::channel_label(c.0 as u16));
    }

    let core_peaks: Vec<CorePeak> = CoreId::all()
        .filter(|&c| layout.ring(c) != Ring::Center)
        .map(|c| {
            let series: Vec<u64> = singles.iter().map(|s| s[c.index()]).collect();
            CorePeak {
                core: c,
                label: layout.label(c),
                ring: layout.ring(c),
                radius_um: layout.position(c).norm(),
                peak_temperature_c: peak_temperature(&temps, &series),
            }
        })
        .collect();
    let ring_scan = |ring: Ring, r: usize, delays: &Vec<((CoreId, CoreId), i64)>| {
        // Cores at different radii peak at different temperatures by design.
        let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
        for p in core_peaks.iter().filter(|p| p.ring == ring) {
            match groups.iter_mut().find(|(r, _)| (r - p.radius_um).abs() < 1e-6) {
                Some(g) => g.1.push(p.peak_temperature_c),
                None => groups.push((p.radius_um, vec![p.peak_temperature_c])),
            }
        }
        let spread = groups
            .iter()
            .map(|(_, v)| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        let series: Vec<u64> = opposite.iter().map(|o| o[r]).collect();
        RingScan {
            ring,
            peak_spread_c: spread,
            symmetric: spread <= step + 1e-9,
            optimum_temperature_c: peak_temperature(&temps, &series),
            delays_ps: delays.clone(),
        }
    };
    let inner = ring_scan(Ring::Inner, 0, &ring_delays[0]);
    let outer = ring_scan(Ring::Outer, 1, &ring_delays[1]);
    if !inner.symmetric {
        ctx.manifest.warnings.push(format!(
            "inner-ring cores peak over a {:.3} C spread (step {step} C): cone not centred on the fiber",
            inner.peak_spread_c
        ));
    }

    let header: Vec<String> = std::iter::once("temperature_c".to_string()).chain(CoreId::all().map(|c| format!("core_{}", c.0))).collect();
    let mut scsv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    let mut ccsv = Csv::new(&["temperature_c", "inner_opposite", "outer_opposite"]);
    for (k, &tc) in temps.iter().enumerate() {
        scsv.row(&std::iter::once(format!("{tc:.4}")).chain(singles[k].iter().map(u64::to_string)).collect::<Vec<_>>());
        ccsv.row(&[format!("{tc:.4}"), opposite[k][0].to_string(), opposite[k][1].to_string()]);
    }
    let result = TemperatureResult { temperatures_c: temps, step_c: step, singles, opposite_coincidences: opposite, core_peaks, inner, outer };
    ctx.out.write("results/temperature_singles.csv", scsv.into_string().as_bytes())?;
    ctx.out.write("results/temperature_coincidences.csv", ccsv.into_string().as_bytes())?;
    ctx.out.write_json(
        "results/temperature_scan.json",
        &serde_json::json!({
            "step_c": result.step_c,
            "core_peaks": result.core_peaks,
            "inner": result.inner,
            "outer": result.outer,
        }),
    )?;
    Ok(result)
}
