//! CHSH test on each configured opposite pair.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sdm_core::channel::CoreId;
use sdm_core::metrics::{chsh_from_counts, ChshCounts, ChshEstimate, SettingCounts, VisibilityEstimate};
use sdm_core::polarization::{Analyzer, ChshAngles, Port};
use serde::{Deserialize, Serialize};

use super::{Acquired, Context};
use crate::analysis::{coincidences, PairDelay};
use crate::apparatus::{analyzer_channel, Monitor};
use crate::config::AcquisitionMode;
use crate::output::{Csv, Record};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshPairResult {
    pub pair: (CoreId, CoreId),
    pub labels: (String, String),
    pub counts: ChshCounts,
    pub estimate: Option<ChshEstimate>,
    pub record: Option<Record>,
    /// Set when the counts cannot support an estimate.
    pub insufficient_counts: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    pub angles: ChshAngles,
    pub pairs: Vec<ChshPairResult>,
}

impl ChshResult {
    pub fn s_values(&self) -> Vec<f64> {
        self.pairs.iter().filter_map(|p| p.estimate.map(|e| e.s)).collect()
    }
}

fn setting_counts(acq: &Acquired, m: CoreId, l: CoreId, delay: i64, window: u64) -> Result<SettingCounts, SimError> {
    let d = &acq.detections;
    let c = |pa: Port, pb: Port| -> Result<u64, SimError> {
        Ok(coincidences(d.stream(analyzer_channel(m, pa)), d.stream(analyzer_channel(l, pb)), window, delay, d.duration_ps)?.coincidences)
    };
    use Port::{Reflected as R, Transmitted as T};
    Ok(SettingCounts { tt: c(T, T)?, rr: c(R, R)?, tr: c(T, R)?, rt: c(R, T)? })
}

pub(super) fn run(ctx: &mut Context<'_>) -> Result<ChshResult, SimError> {
    let s = &ctx.cfg.scenario;
    let angles = s.chsh_angles.expect("resolved").angles();
    let pairs: Vec<(CoreId, CoreId)> = s.pairs.as_ref().expect("validated").iter().map(|&[a, b]| (CoreId(a), CoreId(b))).collect();
    let temperature_c = s.temperature_c.expect("resolved");
    let t = ctx.integration();
    let window = ctx.window();
    let channel = ctx.app.channel.clone();
    let layout = ctx.app.layout.clone();

    // Each job is one acquisition covering a set of pairs at setting (i, j).
    let groups: Vec<Vec<usize>> = match s.acquisition {
        AcquisitionMode::Simultaneous => vec![(0..pairs.len()).collect()],
        AcquisitionMode::Pairwise => (0..pairs.len()).map(|k| vec![k]).collect(),
    };
    let jobs: Vec<(usize, usize, usize)> =
        (0..groups.len()).flat_map(|g| (0..2).flat_map(move |i| (0..2).map(move |j| (g, i, j)))).collect();
    let shared: &Context<'_> = ctx;
    let results = jobs
        .par_iter()
        .map(|&(g, i, j)| {
            let mut mon = BTreeMap::new();
            for &k in &groups[g] {
                let (m, l) = pairs[k];
                mon.insert(m, Monitor::Analyzer(Analyzer::for_polarization(angles.a(i))));
                mon.insert(l, Monitor::Analyzer(Analyzer::for_polarization(angles.b(j))));
            }
            let label = match s.acquisition {
                AcquisitionMode::Simultaneous => format!("chsh-a{}-b{}", i + 1, j + 1),
                AcquisitionMode::Pairwise => format!("chsh-{}-{}-a{}-b{}", pairs[g].0 .0, pairs[g].1 .0, i + 1, j + 1),
            };
            let acq = shared.acquire(&label, &channel, temperature_c, t, &mon)?;
            let sel: Vec<(CoreId, CoreId)> = groups[g].iter().map(|&k| pairs[k]).collect();
            let delays = shared.core_delays(&acq.detections, &sel)?;
            let counts = sel
                .iter()
                .zip(&delays)
                .map(|(&(m, l), d)| setting_counts(&acq, m, l, d.delay_ps, window))
                .collect::<Result<Vec<_>, SimError>>()?;
            Ok((acq, delays, counts))
        })
        .collect::<Result<Vec<(Acquired, Vec<PairDelay>, Vec<SettingCounts>)>, SimError>>()?;

    let mut counts = vec![ChshCounts::default(); pairs.len()];
    for (&(g, i, j), (acq, delays, c)) in jobs.iter().zip(results) {
        ctx.record(&acq)?;
        ctx.push_delays(&acq.label, delays);
        for (&k, sc) in groups[g].iter().zip(c) {
            counts[k][i][j] = sc;
        }
    }

    let mut csv = Csv::new(&["core_m", "core_l", "a_deg", "b_deg", "tt", "rr", "tr", "rt"]);
    let mut out = Vec::new();
    for (k, &(m, l)) in pairs.iter().enumerate() {
        let c = counts[k];
        for i in 0..2 {
            for j in 0..2 {
                let x = c[i][j];
                csv.row(&[m.to_string(), l.to_string(), angles.a(i).to_string(), angles.b(j).to_string(), x.tt.to_string(), x.rr.to_string(), x.tr.to_string(), x.rt.to_string()]);
            }
        }
        let (estimate, record, insufficient) = match chsh_from_counts(&c) {
            Ok(e) => {
                let rec = Record::new("chsh_s", VisibilityEstimate { value: e.s, std_error: e.std_error }, &c, &ctx.config_hash)
                    .with("core_m", m)
                    .with("core_l", l)
                    .with("violation_sigma", if e.std_error > 0.0 { (e.s.abs() - 2.0) / e.std_error } else { 0.0 });
                (Some(e), Some(rec), None)
            }
            Err(e) => (None, None, Some(e.to_string())),
        };
        out.push(ChshPairResult { pair: (m, l), labels: (layout.label(m), layout.label(l)), counts: c, estimate, record, insufficient_counts: insufficient });
    }
    let result = ChshResult { angles, pairs: out };
    ctx.out.write("results/chsh_counts.csv", csv.into_string().as_bytes())?;
    ctx.out.write_json("results/chsh.json", &result)?;
    Ok(result)
}
