//! Command-level integration tests: file round trips, exit-code contract,
//! determinism of artifacts and a smoke run of the installed binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use qudit_sensor::real::ghz_to_rad;
use qudit_sensor_cli::commands::{self, CmdError};
use qudit_sensor_cli::config::{
    FieldBlock, GridBlock, RamseyBlock, RunConfig, SourceAmplitude, TransferFunction,
    TransitionTargets, TransmonBlock,
};

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qudit-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn config() -> RunConfig {
    RunConfig {
        format_version: 1,
        transmon: TransmonBlock {
            params: None,
            targets: Some(TransitionTargets {
                omega1_ghz: 4.685,
                omega2_ghz: 4.405,
                n_g: 0.0,
                charge_cutoff: 30,
                d_keep: 7,
            }),
        },
        ramsey: RamseyBlock {
            delta_t_max_ns: 1600.0,
            n_steps: 160,
            n_avg: 3000,
            t_rep_us: 240.0,
            gate_amp_ghz: 0.030,
            field_rwa: true,
        },
        grid: Some(GridBlock {
            amp_min_ghz: 0.06,
            amp_max_ghz: 0.15,
            n_amp: 4,
            freq_min_ghz: 5.2,
            freq_max_ghz: 5.4,
            n_freq: 3,
        }),
        field: Some(FieldBlock {
            freq_ghz: 5.285,
            source: SourceAmplitude {
                amp_ghz: Some(0.097),
                power_dbm: None,
                amp_at_0dbm_ghz: None,
            },
            transfer: TransferFunction::Identity,
        }),
        sweep: None,
        phase_scan: None,
        seed: 99,
    }
}

fn gen_table(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let table = dir.join("table.csv");
    if !table.exists() {
        commands::cmd_gen_table(cfg, table.clone(), false).unwrap();
    }
    table
}

#[test]
fn calibrate_writes_params_and_rejects_equal_targets() {
    let dir = tmpdir("cal");
    let cfg = config();
    let out = dir.join("params.json");
    commands::cmd_calibrate(&cfg, out.clone()).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!((v["achieved"]["omega1_ghz"].as_f64().unwrap() - 4.685).abs() < 1e-6);
    assert!((v["achieved"]["omega2_ghz"].as_f64().unwrap() - 4.405).abs() < 1e-6);

    let mut bad = config();
    bad.transmon.targets.as_mut().unwrap().omega2_ghz = 4.685;
    let err = commands::cmd_calibrate(&bad, dir.join("bad.json")).unwrap_err();
    assert_eq!(err.exit_code(), 2, "equal targets must exit 2: {}", err.message());
}

#[test]
fn gen_table_sense_round_trip_and_hash_guard() {
    let dir = tmpdir("sense");
    let cfg = config();
    let table = gen_table(&dir, &cfg);

    let out = dir.join("sense.json");
    commands::cmd_sense(&cfg, &table, None, None, out.clone()).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let amp = v["extracted"]["amp_ghz"].as_f64().unwrap();
    let freq = v["extracted"]["freq_ghz"].as_f64().unwrap();
    // within a coarse cell of the injected truth
    assert!((amp - 0.097).abs() < 0.03, "amp {amp}");
    assert!((freq - 5.285).abs() < 0.1, "freq {freq}");
    assert!(v["extracted"]["power_dbm"].as_f64().unwrap() < -100.0);

    // a pipeline change must be refused before any numerics
    let mut other = config();
    other.ramsey.gate_amp_ghz = 0.040;
    let err = commands::cmd_sense(&other, &table, None, None, dir.join("x.json")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.message().contains("hash"), "{}", err.message());
}

#[test]
fn gen_table_rejects_grid_below_first_transition() {
    let dir = tmpdir("grid");
    let mut cfg = config();
    cfg.grid.as_mut().unwrap().freq_min_ghz = 4.5;
    let err = commands::cmd_gen_table(&cfg, dir.join("t.csv"), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.message().contains("first transition"));
}

#[test]
fn gen_table_resumes_from_partial_rows() {
    let dir = tmpdir("resume");
    let cfg = config();
    let params = cfg.resolve_transmon().unwrap();
    let protocol = cfg.protocol(&params);

    // full run to produce the journal-free reference
    let full = dir.join("full.csv");
    commands::cmd_gen_table(&cfg, full.clone(), false).unwrap();

    // fake an interrupted run: journal with the first two rows precomputed
    let resumed = dir.join("resumed.csv");
    let reference: qudit_sensor::LookupGrid64 = qudit_sensor::io::read_table(&full).unwrap();
    let mut journal = String::new();
    journal.push_str(&format!(
        "{}\n",
        serde_json::json!({
            "format_version": 1,
            "content_hash": protocol.content_hash(),
            "n_amp": 4,
            "n_freq": 3,
        })
    ));
    for row in 0..2 {
        let d1: Vec<f64> = (0..3).map(|j| reference.delta1[[row, j]]).collect();
        let d2: Vec<f64> = (0..3).map(|j| reference.delta2[[row, j]]).collect();
        journal.push_str(&format!(
            "{}\n",
            serde_json::json!({"row": row, "delta1": d1, "delta2": d2})
        ));
    }
    std::fs::write(dir.join("resumed.csv.partial"), journal).unwrap();
    commands::cmd_gen_table(&cfg, resumed.clone(), true).unwrap();
    let back: qudit_sensor::LookupGrid64 = qudit_sensor::io::read_table(&resumed).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((back.delta1[[i, j]] - reference.delta1[[i, j]]).abs() < 1e-12);
        }
    }
    // journal cleaned up after completion
    assert!(!dir.join("resumed.csv.partial").exists());
}

#[test]
fn synth_trace_files_feed_sense() {
    let dir = tmpdir("traces");
    let cfg = config();
    let table = gen_table(&dir, &cfg);
    let t1 = dir.join("t1.csv");
    let t2 = dir.join("t2.csv");
    commands::cmd_synth_trace(&cfg, 1, Some(3), t1.clone()).unwrap();
    commands::cmd_synth_trace(&cfg, 2, Some(4), t2.clone()).unwrap();
    assert!(dir.join("t1.csv.meta.json").exists());

    let out = dir.join("sense_from_traces.json");
    commands::cmd_sense(&cfg, &table, Some((t1, t2)), None, out.clone()).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let freq = v["extracted"]["freq_ghz"].as_f64().unwrap();
    assert!((freq - 5.285).abs() < 0.1, "freq {freq}");
}

#[test]
fn sense_rejects_shift_below_lower_limit_with_exit_4() {
    let dir = tmpdir("limits");
    let mut cfg = config();
    // the experimental window: limits (10, 1.25) MHz
    cfg.ramsey.delta_t_max_ns = 800.0;
    cfg.ramsey.n_steps = 80;
    let table = dir.join("table800.csv");
    commands::cmd_gen_table(&cfg, table.clone(), false).unwrap();

    // externally recorded traces spanning a longer window can fit shifts
    // below the protocol's lower limit; sensing must refuse them
    let model = |w: f64, t: f64| 0.5 - 0.45 * (w * t).cos();
    let write_trace = |path: &Path, f_mhz: f64| {
        let w = ghz_to_rad(f_mhz * 1e-3);
        let delays: Vec<f64> = (0..120).map(|k| 2500.0 * k as f64 / 119.0).collect();
        let trace = qudit_sensor::RamseyTrace64 {
            populations: delays.iter().map(|&t| model(w, t)).collect(),
            delays,
            n_avg: None,
        };
        qudit_sensor::io::write_trace_csv(path, &trace, &serde_json::json!({})).unwrap();
    };
    let t1 = dir.join("ext1.csv");
    let t2 = dir.join("ext2.csv");
    write_trace(&t1, 3.0); // Δ1 = 3 MHz: inside (below 10)
    write_trace(&t2, 0.9); // Δ2 = 0.9 MHz: below the 1.25 MHz limit
    let err =
        commands::cmd_sense(&cfg, &table, Some((t1, t2)), None, dir.join("o.json")).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{}", err.message());
    assert!(err.message().contains("1.25"), "{}", err.message());
}

#[test]
fn artifacts_are_deterministic_per_seed() {
    let dir = tmpdir("det");
    let cfg = config();
    let a = dir.join("tr_a.csv");
    let b = dir.join("tr_b.csv");
    commands::cmd_synth_trace(&cfg, 1, Some(5), a.clone()).unwrap();
    commands::cmd_synth_trace(&cfg, 1, Some(5), b.clone()).unwrap();
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed must reproduce byte-identical traces"
    );
    let c = dir.join("tr_c.csv");
    commands::cmd_synth_trace(&cfg, 1, Some(6), c.clone()).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn phase_scan_csv_shape() {
    let dir = tmpdir("phase");
    let mut cfg = config();
    cfg.phase_scan = Some(qudit_sensor_cli::config::PhaseScanBlock {
        rabi_mhz: 30.0,
        span_mhz: 25.0,
        n_points: 11,
        phase_slope_rad_per_mhz: 0.05,
    });
    let out = dir.join("scan.csv");
    commands::cmd_phase_scan(&cfg, out.clone()).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "detuning_mhz,phi_rad,p1");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 11);
    for row in rows {
        let p1: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p1));
    }
}

#[test]
fn limits_errors_without_inputs() {
    let err = commands::cmd_limits(None, None, None, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = commands::cmd_limits(None, Some(1), Some(800.0), None).unwrap_err();
    assert!(matches!(err, CmdError::Validation(_)));
}

#[test]
fn binary_smoke_limits_and_bad_config() {
    let bin = env!("CARGO_BIN_EXE_qudit-sensor");
    let out = Command::new(bin)
        .args(["limits", "--n-r", "80", "--delta-t-max-ns", "800"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("10.0000"), "{stdout}");
    assert!(stdout.contains("1.2500"), "{stdout}");

    // schema violation surfaces as exit code 2
    let dir = tmpdir("bin");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"format_version": 1, "transmon": {}, "typo": 1}"#).unwrap();
    let out = Command::new(bin)
        .args(["calibrate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
