use std::path::Path;
use std::process::Command;

use sdm_core::CoreId;
use sdm_sim::analysis::{analyze_streams, load_tag_dir};
use sdm_sim::manifest::{verify_run_dir, RunManifest, RunStatus};
use sdm_sim::{run_scenario, ExperimentConfig, RunOptions, ScenarioOutcome, SimError};

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).unwrap()
}

fn run(text: &str, dir: &Path) -> ScenarioOutcome {
    run_scenario(&config(text), dir, RunOptions::default()).unwrap()
}

const IDEAL: &str = r#"
[source]
correlation_arc_um = 0.0
radial_correlation_um = 0.0

[fiber]
neighbor_crosstalk = 0.0

[detectors]
efficiency = 1.0
dark_rate_hz = 0.0
jitter_sigma_ps = 0.0
dead_time_ns = 0.0
"#;

fn ring(seed: u64, seconds: f64, extra: &str) -> String {
    format!(
        "[scenario]\nkind = \"ring-correlation\"\nseed = {seed}\nring = \"inner\"\ntemperature_c = 82.5\nintegration_time_s = {seconds}\n{extra}"
    )
}

#[test]
fn ideal_channel_gives_unit_path_visibility() {
    let dir = tempfile::tempdir().unwrap();
    let ScenarioOutcome::Ring(r) = run(&format!("{}{IDEAL}", ring(1, 2.0, "")), dir.path()) else { panic!() };
    assert_eq!(r.visibilities.len(), 6);
    // Exact anti-correlation leaves only mode-overlap spill into the neighbours.
    assert!(r.min_visibility() > 0.99, "{}", r.min_visibility());
}

#[test]
fn counts_scale_linearly_with_integration_time() {
    let dir = tempfile::tempdir().unwrap();
    let opposite = |seconds: f64, sub: &str| -> f64 {
        let ScenarioOutcome::Ring(r) = run(&ring(2, seconds, ""), &dir.path().join(sub)) else { panic!() };
        r.pairs.iter().filter(|p| p.opposite).map(|p| p.coincidences as f64).sum()
    };
    let (short, long) = (opposite(2.0, "short"), opposite(6.0, "long"));
    let ratio = long / short;
    let sigma = 3.0 * (1.0 / long + 1.0 / short).sqrt();
    assert!((ratio - 3.0).abs() < 4.0 * sigma, "{long} / {short} = {ratio}");
}

#[test]
fn stored_tags_reanalyse_to_the_same_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ScenarioOutcome::Ring(r) = run(&ring(3, 2.0, "write_tags = true\n"), dir.path()) else { panic!() };
    let streams = load_tag_dir(&dir.path().join("tags/ring")).unwrap();
    let pairs: Vec<(u16, u16)> = r.pairs.iter().map(|p| (p.core_m.0 as u16, p.core_l.0 as u16)).collect();
    let window = config(&ring(3, 2.0, "")).scenario.coincidence_window_ps;
    let analyzed = analyze_streams(&streams, &pairs, window, None).unwrap();
    for (p, a) in r.pairs.iter().zip(&analyzed) {
        assert_eq!((a.channel_a, a.channel_b), (p.core_m.0 as u16, p.core_l.0 as u16));
        assert_eq!(a.coincidences, p.coincidences, "pair {}-{}", p.core_m.0, p.core_l.0);
    }
    // Fixed delay: the opposite pair found by the search is reproduced.
    let p = r.pairs.iter().find(|p| p.opposite).unwrap();
    let fixed = analyze_streams(&streams, &[(p.core_m.0 as u16, p.core_l.0 as u16)], window, Some(p.delay_ps)).unwrap();
    assert_eq!(fixed[0].coincidences, p.coincidences);
}

fn temperature_scan(offset: f64, dir: &Path) -> (sdm_sim::scenarios::TemperatureResult, RunManifest) {
    let text = format!(
        "[scenario]\nkind = \"temperature-scan\"\nseed = 4\nintegration_time_s = 1.0\nt_start_c = 82.2\nt_stop_c = 82.65\nt_step_c = 0.01\n\n[fiber]\noffset_um = [{offset}, 0.0]\n"
    );
    let ScenarioOutcome::Temperature(t) = run(&text, dir) else { panic!() };
    let m: RunManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    (t, m)
}

#[test]
fn fiber_offset_shows_up_as_asymmetric_illumination() {
    let dir = tempfile::tempdir().unwrap();
    let (aligned, m) = temperature_scan(0.0, &dir.path().join("aligned"));
    assert!(aligned.inner.symmetric, "{}", aligned.inner.peak_spread_c);
    assert!((aligned.inner.optimum_temperature_c - 82.5).abs() < 0.05);
    assert!(m.warnings.is_empty(), "{:?}", m.warnings);

    let (shifted, m) = temperature_scan(3.0, &dir.path().join("shifted"));
    assert!(!shifted.inner.symmetric);
    assert!(shifted.inner.peak_spread_c > 5.0 * aligned.inner.peak_spread_c.max(0.01));
    assert!(m.warnings.iter().any(|w| w.contains("not centred")), "{:?}", m.warnings);
}

#[test]
fn hv_fringes_are_a_quarter_period_apart() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[scenario]\nkind = \"fringe-scan\"\nseed = 5\npair = [1, 4]\ntemperature_c = 82.5\nintegration_time_s = 10.0\nmodule_a_hwp_deg = [0.0, 45.0]\n";
    let ScenarioOutcome::Fringe(f) = run(text, dir.path()) else { panic!() };
    let d = f.hv_phase_difference_deg.unwrap();
    let e = f.hv_phase_difference_error_deg.unwrap();
    assert!((d - 45.0).abs() < 4.0 * e.max(0.05), "{d} ± {e}");
    assert!(f.visibility_hv.unwrap().qkd.unwrap().above_threshold);
}

#[test]
fn manifest_records_hashes_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    run(&ring(6, 1.0, ""), dir.path());
    let m = verify_run_dir(dir.path()).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.seed, 6);
    assert_eq!(m.coincidence_window_ps, 500);
    assert!(m.results.contains_key("results/path_visibility.json"));
    assert!(!m.delays.is_empty());

    let target = dir.path().join("results/pair_counts.csv");
    let mut text = std::fs::read_to_string(&target).unwrap();
    text.push('\n');
    std::fs::write(&target, text).unwrap();
    assert!(verify_run_dir(dir.path()).is_err());
}

#[test]
fn strict_mode_rejects_a_mismatched_cone() {
    let dir = tempfile::tempdir().unwrap();
    // 81.0 C puts the cone far from the inner-ring cores.
    let text = "[scenario]\nkind = \"ring-correlation\"\nseed = 7\nring = \"inner\"\ntemperature_c = 81.0\nintegration_time_s = 0.5\n";
    let err = run_scenario(&config(text), dir.path(), RunOptions { strict: true, wall_clock: false }).unwrap_err();
    assert!(matches!(err, SimError::Config(_) | SimError::Runtime(_)), "{err}");
    let m: RunManifest = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.error.is_some());

    let lenient = tempfile::tempdir().unwrap();
    // Without strict mode the mismatch is only a warning; nothing couples, so
    // the run then stops on the undefined visibility.
    let err = run_scenario(&config(text), lenient.path(), RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let m: RunManifest = serde_json::from_slice(&std::fs::read(lenient.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.warnings.iter().any(|w| w.contains("cone")), "{:?}", m.warnings);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdm-sim"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[scenario]\nkind = \"chsh\"\nseed = 1\nbogus = 3\n").unwrap();
    let out = cli().args(["validate-config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let good = dir.path().join("good.toml");
    std::fs::write(&good, ring(8, 0.5, "write_tags = true\n")).unwrap();
    let out = cli().args(["validate-config"]).arg(&good).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let canonical: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(canonical["scenario"]["seed"], 8);

    let run_dir = dir.path().join("run");
    let out = cli().args(["run", "--threads", "1", "--config"]).arg(&good).arg("--out").arg(&run_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    verify_run_dir(&run_dir).unwrap();

    let out = cli().args(["analyze", "--pairs", "1-4,2-5", "--window", "500", "--tags"]).arg(run_dir.join("tags/ring")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert!(v[0]["coincidences"].as_u64().unwrap() > 0);

    let out = cli().args(["analyze", "--pairs", "1-x", "--window", "500", "--tags"]).arg(run_dir.join("tags/ring")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = cli().args(["analyze", "--pairs", "1-4", "--window", "500", "--tags"]).arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_uses_configured_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ring.toml");
    std::fs::write(&cfg, ring(9, 0.2, "")).unwrap();
    let out = cli().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&cfg, ring(9, 0.2, "output_dir = \"runs/ring\"\n")).unwrap();
    let out = cli().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    verify_run_dir(&dir.path().join("runs/ring")).unwrap();
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap().flatten() {
        if entry.path().extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::from_file(entry.path()).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", entry.path().display()));
            n += 1;
        }
    }
    assert!(n >= 10);
    assert_eq!(CoreId::new(19).is_err(), true);
}
