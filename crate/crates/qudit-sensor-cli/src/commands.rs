//! Command implementations: calibration, table generation (resumable),
//! sensing, frequency sweeps, limits, phase scans and trace synthesis.
//! Every command is deterministic given (config, seed) and writes its
//! artifacts atomically.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use qudit_sensor::analysis;
use qudit_sensor::dynamics::{
    derive_stream_seed, ramsey_trace, DriveTone, DynamicsError, RamseyConfig, TransitionIndex,
};
use qudit_sensor::fitting::{extract_shift, fit_damped_sine, FitError, ShiftMeasurement};
use qudit_sensor::io as qio;
use qudit_sensor::lookup::{
    self, invert, propagate_uncertainty, tls_offset_study, Device, LookupError, NoiseSpec,
};
use qudit_sensor::real::{ghz_to_rad, rad_to_ghz, rad_to_mhz};
use qudit_sensor::transmon::{self, TransmonError};
use qudit_sensor::{DriveTone64, LookupGrid64, SenseResult64, SensingProtocol64};

use crate::config::RunConfig;

/// Exit-code classes of the command layer: 2 validation, 3 numeric
/// failure, 4 out-of-range sensing.
#[derive(Debug)]
pub enum CmdError {
    Validation(anyhow::Error),
    Numeric(anyhow::Error),
    OutOfRange(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => 2,
            CmdError::Numeric(_) => 3,
            CmdError::OutOfRange(_) => 4,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Validation(e) | CmdError::Numeric(e) | CmdError::OutOfRange(e) => {
                format!("{e:#}")
            }
        }
    }
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> Self {
        CmdError::Validation(e)
    }
}

impl From<TransmonError> for CmdError {
    fn from(e: TransmonError) -> Self {
        match e {
            TransmonError::InvalidParams(_) | TransmonError::BadTargets(_) => {
                CmdError::Validation(anyhow::Error::new(e))
            }
            _ => CmdError::Numeric(anyhow::Error::new(e)),
        }
    }
}

impl From<DynamicsError> for CmdError {
    fn from(e: DynamicsError) -> Self {
        CmdError::Numeric(anyhow::Error::new(e))
    }
}

impl From<FitError> for CmdError {
    fn from(e: FitError) -> Self {
        CmdError::Numeric(anyhow::Error::new(e))
    }
}

impl From<LookupError> for CmdError {
    fn from(e: LookupError) -> Self {
        match e {
            LookupError::OutsideLimits(_) | LookupError::OutsideHull(_, _) => {
                CmdError::OutOfRange(anyhow::Error::new(e))
            }
            LookupError::InvalidGrid(_) | LookupError::HashMismatch { .. } => {
                CmdError::Validation(anyhow::Error::new(e))
            }
            _ => CmdError::Numeric(anyhow::Error::new(e)),
        }
    }
}

impl From<qio::IoError> for CmdError {
    fn from(e: qio::IoError) -> Self {
        CmdError::Validation(anyhow::Error::new(e))
    }
}

pub type CmdResult<T = ()> = Result<T, CmdError>;

/// Output path resolution: explicit --out wins, then the default file name
/// under QUDIT_SENSOR_OUT_DIR (or the working directory).
pub fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    match out {
        Some(p) => p,
        None => match std::env::var_os("QUDIT_SENSOR_OUT_DIR") {
            Some(dir) => PathBuf::from(dir).join(default_name),
            None => PathBuf::from(default_name),
        },
    }
}

fn load_table(path: &Path, protocol: &SensingProtocol64) -> CmdResult<LookupGrid64> {
    let table: LookupGrid64 = qio::read_table(path)?;
    table.check_pipeline(protocol)?;
    Ok(table)
}

/// Fit the circuit parameters from the configured transition targets and
/// write them as a params file.
pub fn cmd_calibrate(config: &RunConfig, out: PathBuf) -> CmdResult {
    let params = config.resolve_transmon()?;
    let (spectrum, _) = transmon::diagonalize(&params)?;
    let report = json!({
        "format_version": 1,
        "transmon": params,
        "achieved": {
            "omega1_ghz": spectrum.transition(1),
            "omega2_ghz": spectrum.transition(2),
            "anharmonicity_ghz": spectrum.anharmonicity,
        },
    });
    qio::write_json(&out, &report)?;
    println!(
        "calibrated e_j = {:.6} GHz, e_c = {:.6} GHz (omega1 {:.6} GHz, omega2 {:.6} GHz) -> {}",
        params.e_j,
        params.e_c,
        spectrum.transition(1),
        spectrum.transition(2),
        out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PartialHeader {
    format_version: u32,
    content_hash: String,
    n_amp: usize,
    n_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct PartialRow {
    row: usize,
    delta1: Vec<f64>,
    delta2: Vec<f64>,
}

fn partial_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    out.with_file_name(name)
}

fn load_partial(
    path: &Path,
    protocol: &SensingProtocol64,
    n_amp: usize,
    n_freq: usize,
) -> BTreeMap<usize, Vec<(f64, f64)>> {
    let mut rows = BTreeMap::new();
    let Ok(text) = std::fs::read_to_string(path) else {
        return rows;
    };
    let mut lines = text.lines();
    let Some(first) = lines.next() else {
        return rows;
    };
    let Ok(header) = serde_json::from_str::<PartialHeader>(first) else {
        return rows;
    };
    if header.content_hash != protocol.content_hash()
        || header.n_amp != n_amp
        || header.n_freq != n_freq
    {
        return rows;
    }
    for line in lines {
        if let Ok(row) = serde_json::from_str::<PartialRow>(line) {
            if row.row < n_amp && row.delta1.len() == n_freq && row.delta2.len() == n_freq {
                rows.insert(
                    row.row,
                    row.delta1
                        .into_iter()
                        .zip(row.delta2)
                        .collect::<Vec<(f64, f64)>>(),
                );
            }
        }
    }
    rows
}

/// Generate the lookup table over the configured grid, with per-row
/// progress on stderr. Completed rows are journaled next to the output so
/// an interrupted run resumes where it stopped.
pub fn cmd_gen_table(config: &RunConfig, out: PathBuf, resume: bool) -> CmdResult {
    let params = config.resolve_transmon()?;
    let protocol = config.protocol(&params);
    let grid = config.grid_spec();
    let device = Device::new(&protocol.transmon)?;
    lookup::validate_grid_for_device(&grid, &device)?;

    let amp_axis = grid.amp_axis();
    let freq_axis = grid.freq_axis();
    let journal = partial_path(&out);
    let done: BTreeMap<usize, Vec<(f64, f64)>> = if resume {
        load_partial(&journal, &protocol, amp_axis.len(), freq_axis.len())
    } else {
        BTreeMap::new()
    };
    if !done.is_empty() {
        eprintln!("resuming: {}/{} rows already computed", done.len(), amp_axis.len());
    }

    let header = PartialHeader {
        format_version: 1,
        content_hash: protocol.content_hash(),
        n_amp: amp_axis.len(),
        n_freq: freq_axis.len(),
    };
    let mut journal_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&journal)
        .map_err(|e| CmdError::Validation(anyhow::Error::new(e)))?;
    if done.is_empty() {
        journal_file
            .set_len(0)
            .and_then(|_| {
                writeln!(journal_file, "{}", serde_json::to_string(&header).unwrap())
            })
            .map_err(|e| CmdError::Validation(anyhow::Error::new(e)))?;
    }
    let journal_file = Mutex::new(journal_file);

    let pending: Vec<usize> = (0..amp_axis.len()).filter(|i| !done.contains_key(i)).collect();
    let total = amp_axis.len();
    let computed: Vec<(usize, Vec<(f64, f64)>)> = pending
        .par_iter()
        .map(|&i| {
            let row = lookup::generate_row(amp_axis[i], &freq_axis, &protocol, &device);
            let record = PartialRow {
                row: i,
                delta1: row.iter().map(|p| p.0).collect(),
                delta2: row.iter().map(|p| p.1).collect(),
            };
            {
                let mut f = journal_file.lock().unwrap();
                let _ = writeln!(f, "{}", serde_json::to_string(&record).unwrap());
            }
            eprintln!("row {:>3}/{} done (amp {:.4} GHz)", i + 1, total, rad_to_ghz(amp_axis[i]));
            (i, row)
        })
        .collect();

    let mut rows: Vec<Vec<(f64, f64)>> = vec![Vec::new(); total];
    for (i, row) in done {
        rows[i] = row;
    }
    for (i, row) in computed {
        rows[i] = row;
    }
    let table = lookup::assemble_table(&grid, &protocol, rows)?;
    qio::write_table(&out, &table)?;
    let _ = std::fs::remove_file(&journal);
    println!(
        "lookup table {}x{} written to {} (holes: {}, hash {})",
        table.amp_axis.len(),
        table.freq_axis.len(),
        out.display(),
        table.holes(),
        &table.content_hash[..12]
    );
    Ok(())
}

fn fit_report(fit: &qudit_sensor::DampedSineFit64) -> serde_json::Value {
    json!({
        "omega_r_mhz": rad_to_mhz(fit.omega_r),
        "sigma_r_khz": rad_to_mhz(fit.sigma_r) * 1e3,
        "amplitude": fit.amplitude,
        "decay_tau_ns": fit.decay_tau,
        "phase0_rad": fit.phase0,
        "offset_amp": fit.offset_amp,
        "offset_tau_ns": fit.offset_tau,
        "offset_const": fit.offset_const,
        "rms_residual": fit.rms_residual,
    })
}

struct SenseInput {
    shift1: ShiftMeasurement<f64>,
    shift2: ShiftMeasurement<f64>,
    fit1: serde_json::Value,
    fit2: serde_json::Value,
    applied: Option<(f64, f64)>,
}

fn sense_from_traces(
    trace1: &Path,
    trace2: &Path,
    device: &Device<f64>,
) -> CmdResult<SenseInput> {
    let t1: qudit_sensor::RamseyTrace64 = qio::read_trace_csv(trace1)?;
    let t2: qudit_sensor::RamseyTrace64 = qio::read_trace_csv(trace2)?;
    let bare1 = device.ops.transition(1);
    let bare2 = device.ops.transition(2);
    let fit1 = fit_damped_sine(&t1, None)?;
    let fit2 = fit_damped_sine(&t2, None)?;
    Ok(SenseInput {
        shift1: extract_shift(&fit1, bare1, bare1, 1),
        shift2: extract_shift(&fit2, bare2, bare2, 2),
        fit1: fit_report(&fit1),
        fit2: fit_report(&fit2),
        applied: None,
    })
}

fn sense_synthetic(
    config: &RunConfig,
    protocol: &SensingProtocol64,
    device: &Device<f64>,
    seed: u64,
) -> CmdResult<SenseInput> {
    let field_cfg = config.field.as_ref().ok_or_else(|| {
        CmdError::Validation(anyhow::anyhow!(
            "synthetic sensing needs a field block (or pass --trace1/--trace2)"
        ))
    })?;
    let source_amp = field_cfg.source.resolve()?;
    let on_chip = source_amp * field_cfg.transfer.gain(field_cfg.freq_ghz);
    let field = DriveTone::new(ghz_to_rad(on_chip), ghz_to_rad(field_cfg.freq_ghz));
    let noise = NoiseSpec {
        n_avg: config.ramsey.n_avg,
        seed,
    };
    let (shift1, shift2) =
        lookup::measure_shifts(field, protocol, device, None, Some(noise))?;
    Ok(SenseInput {
        shift1,
        shift2,
        fit1: json!({"sigma_r_khz": rad_to_mhz(shift1.sigma) * 1e3}),
        fit2: json!({"sigma_r_khz": rad_to_mhz(shift2.sigma) * 1e3}),
        applied: Some((on_chip, field_cfg.freq_ghz)),
    })
}

/// Run the sensing chain: fit → shift extraction → table inversion →
/// uncertainty propagation → power conversion. Inputs are either a pair of
/// recorded traces or a synthetic field from the config.
pub fn cmd_sense(
    config: &RunConfig,
    table_path: &Path,
    traces: Option<(PathBuf, PathBuf)>,
    seed: Option<u64>,
    out: PathBuf,
) -> CmdResult {
    let params = config.resolve_transmon()?;
    let protocol = config.protocol(&params);
    // hash consistency comes first, before any numerics
    let table = load_table(table_path, &protocol)?;
    let device = Device::new(&params)?;
    let seed = seed.unwrap_or(config.seed);
    let input = match &traces {
        Some((t1, t2)) => sense_from_traces(t1, t2, &device)?,
        None => sense_synthetic(config, &protocol, &device, seed)?,
    };
    let result = invert(&input.shift1, &input.shift2, &table)?;
    let (amp_err, freq_err) = propagate_uncertainty(&input.shift1, &input.shift2, &table)?;
    let result = SenseResult64 {
        amp_err,
        freq_err,
        ..result
    };
    let lims = protocol.limits();
    let report = json!({
        "format_version": 1,
        "fit1": input.fit1,
        "fit2": input.fit2,
        "shifts": {
            "delta1_mhz": rad_to_mhz(input.shift1.delta),
            "sigma1_khz": rad_to_mhz(input.shift1.sigma) * 1e3,
            "delta2_mhz": rad_to_mhz(input.shift2.delta),
            "sigma2_khz": rad_to_mhz(input.shift2.sigma) * 1e3,
        },
        "limits": {
            "delta1_max_mhz": rad_to_mhz(lims.delta1_max),
            "delta2_min_mhz": rad_to_mhz(lims.delta2_min),
        },
        "applied": input.applied.map(|(a, f)| json!({"amp_ghz": a, "freq_ghz": f})),
        "extracted": {
            "amp_ghz": rad_to_ghz(result.amp),
            "freq_ghz": rad_to_ghz(result.freq),
            "amp_err_ghz": rad_to_ghz(result.amp_err),
            "freq_err_ghz": rad_to_ghz(result.freq_err),
            "distance_mhz": rad_to_mhz(result.distance),
            "ambiguous": result.ambiguous,
            "power_dbm": result.power_dbm,
        },
    });
    qio::write_json(&out, &report)?;
    println!(
        "sensed field: A = {:.5} ± {:.5} GHz, f = {:.5} ± {:.5} GHz, P = {:.2} dBm{} -> {}",
        rad_to_ghz(result.amp),
        rad_to_ghz(result.amp_err),
        rad_to_ghz(result.freq),
        rad_to_ghz(result.freq_err),
        result.power_dbm,
        if result.ambiguous { " (ambiguous)" } else { "" },
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub applied_freq_ghz: f64,
    pub applied_amp_ghz: f64,
    pub extracted_freq_ghz: f64,
    pub extracted_amp_ghz: f64,
    pub freq_err_ghz: f64,
    pub amp_err_ghz: f64,
    pub delta1_mhz: f64,
    pub sigma1_khz: f64,
    pub delta2_mhz: f64,
    pub sigma2_khz: f64,
    pub discrepancy_mhz: f64,
    pub status: String,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub summary: serde_json::Value,
}

/// Sweep the synthetic field over the configured frequency range through
/// the full sensing pipeline. Per-point failures are recorded and the
/// sweep continues.
pub fn run_sweep(
    config: &RunConfig,
    table: &LookupGrid64,
    seed: u64,
) -> CmdResult<SweepOutput> {
    let sweep = config.sweep.as_ref().ok_or_else(|| {
        CmdError::Validation(anyhow::anyhow!("config has no sweep block"))
    })?;
    let params = config.resolve_transmon()?;
    let protocol = config.protocol(&params);
    table.check_pipeline(&protocol)?;
    let device = Device::new(&params)?;
    let source_amp = sweep.source.resolve()?;
    let n = sweep.n_points;
    let freqs: Vec<f64> = (0..n)
        .map(|k| {
            sweep.freq_start_ghz
                + (sweep.freq_stop_ghz - sweep.freq_start_ghz) * k as f64 / (n - 1) as f64
        })
        .collect();
    let rows: Vec<SweepRow> = freqs
        .par_iter()
        .enumerate()
        .map(|(k, &freq_ghz)| {
            let on_chip = source_amp * sweep.transfer.gain(freq_ghz);
            let field = DriveTone::new(ghz_to_rad(on_chip), ghz_to_rad(freq_ghz));
            let noise = NoiseSpec {
                n_avg: config.ramsey.n_avg,
                seed: derive_stream_seed(seed, 2 * k as u64),
            };
            let mut row = SweepRow {
                applied_freq_ghz: freq_ghz,
                applied_amp_ghz: on_chip,
                extracted_freq_ghz: f64::NAN,
                extracted_amp_ghz: f64::NAN,
                freq_err_ghz: f64::NAN,
                amp_err_ghz: f64::NAN,
                delta1_mhz: f64::NAN,
                sigma1_khz: f64::NAN,
                delta2_mhz: f64::NAN,
                sigma2_khz: f64::NAN,
                discrepancy_mhz: f64::NAN,
                status: "ok".into(),
            };
            let outcome = lookup::measure_shifts(field, &protocol, &device, None, Some(noise))
                .map_err(CmdError::from)
                .and_then(|(s1, s2)| {
                    row.delta1_mhz = rad_to_mhz(s1.delta);
                    row.sigma1_khz = rad_to_mhz(s1.sigma) * 1e3;
                    row.delta2_mhz = rad_to_mhz(s2.delta);
                    row.sigma2_khz = rad_to_mhz(s2.sigma) * 1e3;
                    let hit = invert(&s1, &s2, table)?;
                    let (amp_err, freq_err) = propagate_uncertainty(&s1, &s2, table)?;
                    row.extracted_freq_ghz = rad_to_ghz(hit.freq);
                    row.extracted_amp_ghz = rad_to_ghz(hit.amp);
                    row.freq_err_ghz = rad_to_ghz(freq_err);
                    row.amp_err_ghz = rad_to_ghz(amp_err);
                    row.discrepancy_mhz = (rad_to_ghz(hit.freq) - freq_ghz).abs() * 1e3;
                    Ok(())
                });
            if let Err(e) = outcome {
                row.status = e.message();
            }
            row
        })
        .collect();

    // emulated experiment wall time: N_R · N_avg · T_rep per transition
    let per_transition_s =
        config.ramsey.n_steps as f64 * config.ramsey.n_avg as f64 * config.ramsey.t_rep_us * 1e-6;
    let ok_rows: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "ok").collect();
    let mean = |f: &dyn Fn(&SweepRow) -> f64| -> f64 {
        if ok_rows.is_empty() {
            f64::NAN
        } else {
            ok_rows.iter().map(|r| f(r)).sum::<f64>() / ok_rows.len() as f64
        }
    };
    let summary = json!({
        "format_version": 1,
        "points": rows.len(),
        "points_ok": ok_rows.len(),
        "mean_rel_amp_err": mean(&|r| r.amp_err_ghz / r.extracted_amp_ghz),
        "mean_rel_freq_err": mean(&|r| r.freq_err_ghz / r.extracted_freq_ghz),
        "mean_discrepancy_mhz": mean(&|r| r.discrepancy_mhz),
        "emulated_time_per_transition_s": per_transition_s,
        "emulated_time_per_point_s": 2.0 * per_transition_s,
        "emulated_time_total_min": 2.0 * per_transition_s * rows.len() as f64 / 60.0,
    });
    Ok(SweepOutput { rows, summary })
}

pub fn cmd_sweep(
    config: &RunConfig,
    table_path: &Path,
    seed: Option<u64>,
    out: PathBuf,
) -> CmdResult {
    let params = config.resolve_transmon()?;
    let protocol = config.protocol(&params);
    let table = load_table(table_path, &protocol)?;
    let seed = seed.unwrap_or(config.seed);
    let output = run_sweep(config, &table, seed)?;
    let mut text = String::from(
        "applied_freq_ghz,applied_amp_ghz,extracted_freq_ghz,extracted_amp_ghz,\
         freq_err_ghz,amp_err_ghz,delta1_mhz,sigma1_khz,delta2_mhz,sigma2_khz,\
         discrepancy_mhz,status\n",
    );
    for r in &output.rows {
        text.push_str(&format!(
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
            r.applied_freq_ghz,
            r.applied_amp_ghz,
            r.extracted_freq_ghz,
            r.extracted_amp_ghz,
            r.freq_err_ghz,
            r.amp_err_ghz,
            r.delta1_mhz,
            r.sigma1_khz,
            r.delta2_mhz,
            r.sigma2_khz,
            r.discrepancy_mhz,
            r.status.replace(',', ";"),
        ));
    }
    qio::atomic_write(&out, text.as_bytes())?;
    let summary_path = out.with_extension("summary.json");
    qio::write_json(&summary_path, &output.summary)?;
    println!(
        "sweep of {} points written to {} (summary: {})",
        output.rows.len(),
        out.display(),
        summary_path.display()
    );
    Ok(())
}

/// Print the detectable-shift limits of the configured Ramsey protocol.
pub fn cmd_limits(
    config: Option<&RunConfig>,
    n_r: Option<usize>,
    delta_t_max_ns: Option<f64>,
    out: Option<PathBuf>,
) -> CmdResult {
    let (n_r, dt) = match (n_r, delta_t_max_ns, config) {
        (Some(n), Some(dt), _) => (n, dt),
        (None, None, Some(cfg)) => (cfg.ramsey.n_steps, cfg.ramsey.delta_t_max_ns),
        _ => {
            return Err(CmdError::Validation(anyhow::anyhow!(
                "give both --n-r and --delta-t-max-ns, or a --config"
            )))
        }
    };
    if n_r < 2 || !(dt > 0.0) {
        return Err(CmdError::Validation(anyhow::anyhow!(
            "need n_r >= 2 and delta_t_max > 0"
        )));
    }
    let lims = lookup::limits::<f64>(n_r, dt);
    let report = json!({
        "format_version": 1,
        "n_r": n_r,
        "delta_t_max_ns": dt,
        "delta1_max_mhz": rad_to_mhz(lims.delta1_max),
        "delta2_min_mhz": rad_to_mhz(lims.delta2_min),
    });
    println!(
        "limits for N_R = {n_r}, dt_max = {dt} ns: |D1|/2pi < {:.4} MHz, |D2|/2pi > {:.4} MHz",
        rad_to_mhz(lims.delta1_max),
        rad_to_mhz(lims.delta2_min)
    );
    if let Some(out) = out {
        qio::write_json(&out, &report)?;
    }
    Ok(())
}

/// Evaluate the two-pulse phase readout over a detuning scan and write it
/// as CSV (detuning_mhz, phi_rad, p1).
pub fn cmd_phase_scan(config: &RunConfig, out: PathBuf) -> CmdResult {
    let block = config.phase_scan.clone().unwrap_or(crate::config::PhaseScanBlock {
        rabi_mhz: 30.0,
        span_mhz: 25.0,
        n_points: 21,
        phase_slope_rad_per_mhz: 0.0,
    });
    let omega_a = ghz_to_rad(block.rabi_mhz * 1e-3);
    let detunings: Vec<f64> = (0..block.n_points)
        .map(|k| {
            let x = -1.0 + 2.0 * k as f64 / (block.n_points - 1) as f64;
            ghz_to_rad(block.span_mhz * 1e-3) * x
        })
        .collect();
    let slope = block.phase_slope_rad_per_mhz;
    let scan = analysis::phase_scan(omega_a, &detunings, |db| rad_to_mhz(db) * slope)
        .map_err(|e| CmdError::Numeric(anyhow::Error::new(e)))?;
    let mut text = String::from("detuning_mhz,phi_rad,p1\n");
    for p in &scan {
        text.push_str(&format!(
            "{:.9e},{:.9e},{:.9e}\n",
            rad_to_mhz(p.detuning),
            p.phi,
            p.p1
        ));
    }
    qio::atomic_write(&out, text.as_bytes())?;
    println!("phase scan of {} points written to {}", scan.len(), out.display());
    Ok(())
}

/// Simulate one Ramsey trace for the configured field and write it as CSV
/// with a metadata sidecar.
pub fn cmd_synth_trace(
    config: &RunConfig,
    transition: u8,
    seed: Option<u64>,
    out: PathBuf,
) -> CmdResult {
    let field_cfg = config.field.as_ref().ok_or_else(|| {
        CmdError::Validation(anyhow::anyhow!("synth-trace needs a field block"))
    })?;
    let params = config.resolve_transmon()?;
    let protocol = config.protocol(&params);
    let device = Device::new(&params)?;
    let source_amp = field_cfg.source.resolve()?;
    let on_chip = source_amp * field_cfg.transfer.gain(field_cfg.freq_ghz);
    let field: DriveTone64 = DriveTone::new(ghz_to_rad(on_chip), ghz_to_rad(field_cfg.freq_ghz));
    let seed = seed.unwrap_or(config.seed);

    let opts = qudit_sensor::dynamics::EvolveOptions {
        field_rwa: protocol.field_rwa,
        ..Default::default()
    };
    let bare1 = device.ops.transition(1);
    let bare2 = device.ops.transition(2);
    let (index, hint) = match transition {
        1 => (TransitionIndex::First, None),
        2 => {
            // the preparing pi pulses need the measured first-transition shift
            let cfg1 = RamseyConfig {
                delta_t_max: protocol.delta_t_max,
                n_steps: protocol.n_steps,
                gate_freq: bare1,
                gate_amp: protocol.gate_amp,
            };
            let tr1 = ramsey_trace(
                TransitionIndex::First,
                Some(field),
                &cfg1,
                None,
                &device.ops,
                None,
                &opts,
            )?;
            let fit1 = fit_damped_sine(&tr1, None)?;
            (TransitionIndex::Second, Some(fit1.omega_r))
        }
        _ => {
            return Err(CmdError::Validation(anyhow::anyhow!(
                "transition must be 1 or 2"
            )))
        }
    };
    let cfg = RamseyConfig {
        delta_t_max: protocol.delta_t_max,
        n_steps: protocol.n_steps,
        gate_freq: if transition == 1 { bare1 } else { bare2 },
        gate_amp: protocol.gate_amp,
    };
    let clean = ramsey_trace(index, Some(field), &cfg, hint, &device.ops, None, &opts)?;
    let noisy = qudit_sensor::dynamics::add_measurement_noise(&clean, config.ramsey.n_avg, seed)?;
    let meta = json!({
        "format_version": qio::TRACE_FORMAT_VERSION,
        "transition": transition,
        "field": {"amp_ghz": on_chip, "freq_ghz": field_cfg.freq_ghz},
        "gate": {"freq_ghz": rad_to_ghz(cfg.gate_freq), "amp_ghz": rad_to_ghz(cfg.gate_amp)},
        "delta_t_max_ns": cfg.delta_t_max,
        "n_steps": cfg.n_steps,
        "n_avg": config.ramsey.n_avg,
        "seed": seed,
        "shift_hint_mhz": hint.map(rad_to_mhz),
        "pipeline_hash": protocol.content_hash(),
    });
    qio::write_trace_csv(&out, &noisy, &meta)?;
    println!(
        "transition-{transition} trace ({} points) written to {}",
        noisy.delays.len(),
        out.display()
    );
    Ok(())
}

/// Shift a dataset's first-transition values by ±offset and report the
/// mean recovered-frequency change (used by the TLS stability study).
pub fn run_tls_study(
    dataset: &[(ShiftMeasurement<f64>, ShiftMeasurement<f64>)],
    offset_khz: f64,
    table: &LookupGrid64,
) -> CmdResult<f64> {
    let offset = ghz_to_rad(offset_khz * 1e-6);
    Ok(tls_offset_study(offset, dataset, table)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_path_resolution() {
        let explicit = resolve_out(Some(PathBuf::from("/tmp/x.json")), "d.json");
        assert_eq!(explicit, PathBuf::from("/tmp/x.json"));
        std::env::remove_var("QUDIT_SENSOR_OUT_DIR");
        assert_eq!(resolve_out(None, "d.json"), PathBuf::from("d.json"));
        std::env::set_var("QUDIT_SENSOR_OUT_DIR", "/tmp/outdir");
        assert_eq!(
            resolve_out(None, "d.json"),
            PathBuf::from("/tmp/outdir/d.json")
        );
        std::env::remove_var("QUDIT_SENSOR_OUT_DIR");
    }

    #[test]
    fn exit_codes_by_class() {
        let v = CmdError::Validation(anyhow::anyhow!("x"));
        let n = CmdError::Numeric(anyhow::anyhow!("x"));
        let o = CmdError::OutOfRange(anyhow::anyhow!("x"));
        assert_eq!(v.exit_code(), 2);
        assert_eq!(n.exit_code(), 3);
        assert_eq!(o.exit_code(), 4);
    }

    #[test]
    fn lookup_errors_map_to_exit_classes() {
        let e: CmdError = LookupError::OutsideLimits("x".into()).into();
        assert_eq!(e.exit_code(), 4);
        let e: CmdError = LookupError::HashMismatch {
            table: "a".into(),
            pipeline: "b".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 2);
    }
}
