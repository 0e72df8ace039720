//! Shift lookup tables over the (field amplitude, field frequency) plane:
//! generation through the full simulated Ramsey pipeline, inversion of
//! measured shift pairs back to field parameters, uncertainty propagation,
//! the detectability limits of the Ramsey protocol, and the power
//! conversion of recovered fields.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis;
use crate::dynamics::{
    add_measurement_noise, ramsey_trace, DriveTone, DynamicsError, EvolveOptions, QuditOperators,
    RamseyConfig, TransitionIndex,
};
use crate::fitting::{extract_shift, fit_damped_sine, FitError, ShiftMeasurement};
use crate::real::{rad_to_mhz, Real};
use crate::transmon::{self, CouplingOperator, Spectrum, TransmonError, TransmonParams};

#[derive(Debug, Error)]
pub enum LookupError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid generation aborted: {holes} of {total} entries failed to fit (> 5%)")]
    TooManyHoles { holes: usize, total: usize },
    #[error("shift pair outside sensing limits: {0}")]
    OutsideLimits(String),
    #[error("shift pair ({0} MHz, {1} MHz) outside the table hull")]
    OutsideHull(f64, f64),
    #[error("no fitted entries around the matched grid node")]
    AllHoles,
    #[error("table/pipeline hash mismatch: table {table}, pipeline {pipeline}")]
    HashMismatch { table: String, pipeline: String },
    #[error(transparent)]
    Transmon(#[from] TransmonError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("fit failed: {0}")]
    Fit(#[from] FitError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
}

/// Everything that pins the sensing pipeline: device, Ramsey protocol and
/// fit model. Tables carry a hash of this block and inversion refuses
/// tables generated under a different pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingProtocol<T> {
    pub transmon: TransmonParams<T>,
    /// Sensing Ramsey window (ns) and number of delay points.
    pub delta_t_max: T,
    pub n_steps: usize,
    /// Gate amplitude A_G (rad/ns).
    pub gate_amp: T,
    /// Co-rotating drive model (matches the dressed-state reference).
    pub field_rwa: bool,
    /// Table generation stretches the window to hold this many fringe
    /// periods, up to the cap below.
    pub target_periods: T,
    pub max_window: T,
    /// Delay points per trace during table generation (the window adapts,
    /// so the sensing point count need not apply).
    pub gen_n_steps: usize,
    pub fit_model: String,
    pub version: String,
}

impl<T: Real> SensingProtocol<T> {
    pub fn new(transmon: TransmonParams<T>) -> Self {
        Self {
            transmon,
            delta_t_max: T::of(800.0),
            n_steps: 80,
            gate_amp: T::TAU() * T::of(0.030),
            field_rwa: true,
            target_periods: T::of(4.0),
            max_window: T::of(4e6),
            gen_n_steps: 128,
            fit_model: "damped-sine-7p".into(),
            version: "1".into(),
        }
    }

    /// Hash of the canonical serialized protocol; pins table/pipeline
    /// consistency.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("protocol serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn limits(&self) -> SensorLimits<T> {
        limits(self.n_steps, self.delta_t_max)
    }

    fn evolve_options(&self) -> EvolveOptions<T> {
        EvolveOptions {
            field_rwa: self.field_rwa,
            ..EvolveOptions::default()
        }
    }
}

/// Detectability window of the Ramsey protocol: the sampling rate bounds
/// the largest resolvable shift and the window length the smallest.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorLimits<T> {
    /// Upper limit on Δ₁ (rad/ns): 2π·N_R/(10·Δt_max).
    pub delta1_max: T,
    /// Lower limit on Δ₂ (rad/ns): 2π/Δt_max.
    pub delta2_min: T,
    pub n_r: usize,
    pub delta_t_max: T,
}

/// Detectable-shift limits for a Ramsey measurement with `n_r` points over
/// a window of `delta_t_max` ns: the sampling rate must stay five times
/// above Nyquist for the fastest fringe, and at least one full period must
/// fit in the window.
pub fn limits<T: Real>(n_r: usize, delta_t_max: T) -> SensorLimits<T> {
    let delta1_max = T::TAU() * T::from_usize(n_r).unwrap() / (T::of(10.0) * delta_t_max);
    let delta2_min = T::TAU() / delta_t_max;
    SensorLimits {
        delta1_max,
        delta2_min,
        n_r,
        delta_t_max,
    }
}

/// Axes of the lookup grid, in rad/ns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec<T> {
    pub amp_min: T,
    pub amp_max: T,
    pub n_amp: usize,
    pub freq_min: T,
    pub freq_max: T,
    pub n_freq: usize,
}

impl<T: Real> GridSpec<T> {
    /// Default table extent: A/2π ∈ [0, 0.15] GHz × ω/2π ∈ [5.0, 5.6] GHz.
    pub fn default_grid() -> Self {
        Self {
            amp_min: T::zero(),
            amp_max: T::TAU() * T::of(0.15),
            n_amp: 31,
            freq_min: T::TAU() * T::of(5.0),
            freq_max: T::TAU() * T::of(5.6),
            n_freq: 61,
        }
    }

    /// Coarser extent; same span, quarter the points.
    pub fn reduced_grid() -> Self {
        Self {
            n_amp: 16,
            n_freq: 31,
            ..Self::default_grid()
        }
    }

    pub fn amp_axis(&self) -> Vec<T> {
        linspace(self.amp_min, self.amp_max, self.n_amp)
    }

    pub fn freq_axis(&self) -> Vec<T> {
        linspace(self.freq_min, self.freq_max, self.n_freq)
    }

    pub fn validate(&self) -> Result<(), LookupError> {
        if self.n_amp < 1 || self.n_freq < 1 {
            return Err(LookupError::InvalidGrid("empty axis".into()));
        }
        if !(self.amp_min >= T::zero()) || (self.n_amp > 1 && !(self.amp_max > self.amp_min)) {
            return Err(LookupError::InvalidGrid(
                "amplitude axis must be non-negative and increasing".into(),
            ));
        }
        if self.n_freq > 1 && !(self.freq_max > self.freq_min) {
            return Err(LookupError::InvalidGrid(
                "frequency axis must be increasing".into(),
            ));
        }
        Ok(())
    }
}

fn linspace<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| lo + (hi - lo) * T::from_usize(k).unwrap() / T::from_usize(n - 1).unwrap())
        .collect()
}

/// Precomputed (Δ₁, Δ₂) surfaces over the (A_F, ω_F) grid. Failed fits are
/// stored as NaN holes and skipped by the inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LookupGrid<T> {
    /// rad/ns, strictly increasing.
    pub amp_axis: Vec<T>,
    /// rad/ns, strictly increasing.
    pub freq_axis: Vec<T>,
    /// Shift surfaces indexed [amp][freq], rad/ns.
    pub delta1: Array2<T>,
    pub delta2: Array2<T>,
    pub protocol: SensingProtocol<T>,
    pub content_hash: String,
}

impl<T: Real> LookupGrid<T> {
    pub fn holes(&self) -> usize {
        self.delta1
            .iter()
            .chain(self.delta2.iter())
            .filter(|v| !v.is_finite())
            .count()
    }

    /// Fail unless the given pipeline matches the one the table was
    /// generated with.
    pub fn check_pipeline(&self, protocol: &SensingProtocol<T>) -> Result<(), LookupError> {
        let pipeline = protocol.content_hash();
        if pipeline != self.content_hash {
            return Err(LookupError::HashMismatch {
                table: self.content_hash.clone(),
                pipeline,
            });
        }
        Ok(())
    }
}

/// Diagonalized device bundle used by the pipeline.
pub struct Device<T> {
    pub spectrum: Spectrum<T>,
    pub coupling: CouplingOperator<T>,
    pub ops: QuditOperators<T>,
}

impl<T: Real> Device<T> {
    pub fn new(params: &TransmonParams<T>) -> Result<Self, TransmonError> {
        let (spectrum, coupling) = transmon::diagonalize(params)?;
        let ops = QuditOperators::new(&spectrum, &coupling);
        Ok(Self {
            spectrum,
            coupling,
            ops,
        })
    }
}

/// Measurement-noise request for a pipeline run.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub n_avg: u64,
    pub seed: u64,
}

/// Run the two-transition Ramsey pipeline for one field and return the
/// fitted shift pair (Δ₁, Δ₂).
///
/// Gates are applied at the unperturbed transitions, so each fitted fringe
/// frequency is directly the shift. The second-transition sequence receives
/// the measured Δ₁ for its preparing π pulses. `windows` optionally
/// overrides the sensing window per transition (used by table generation).
pub fn measure_shifts<T: Real>(
    field: DriveTone<T>,
    protocol: &SensingProtocol<T>,
    device: &Device<T>,
    windows: Option<(T, T)>,
    noise: Option<NoiseSpec>,
) -> Result<(ShiftMeasurement<T>, ShiftMeasurement<T>), LookupError> {
    let n_steps = if windows.is_some() {
        protocol.gen_n_steps
    } else {
        protocol.n_steps
    };
    measure_shifts_with(field, protocol, device, windows, n_steps, noise)
}

fn measure_shifts_with<T: Real>(
    field: DriveTone<T>,
    protocol: &SensingProtocol<T>,
    device: &Device<T>,
    windows: Option<(T, T)>,
    n_steps: usize,
    noise: Option<NoiseSpec>,
) -> Result<(ShiftMeasurement<T>, ShiftMeasurement<T>), LookupError> {
    let opts = protocol.evolve_options();
    let (w1_window, w2_window) = windows.unwrap_or((protocol.delta_t_max, protocol.delta_t_max));
    let bare1 = device.ops.transition(1);
    let bare2 = device.ops.transition(2);

    let cfg1 = RamseyConfig {
        delta_t_max: w1_window,
        n_steps,
        gate_freq: bare1,
        gate_amp: protocol.gate_amp,
    };
    let mut trace1 = ramsey_trace(
        TransitionIndex::First,
        Some(field),
        &cfg1,
        None,
        &device.ops,
        None,
        &opts,
    )?;
    if let Some(noise) = noise {
        trace1 = add_measurement_noise(&trace1, noise.n_avg, noise.seed)?;
    }
    let fit1 = fit_damped_sine(&trace1, None)?;
    let shift1 = extract_shift(&fit1, cfg1.gate_freq, bare1, 1);

    let cfg2 = RamseyConfig {
        delta_t_max: w2_window,
        n_steps,
        gate_freq: bare2,
        gate_amp: protocol.gate_amp,
    };
    let mut trace2 = ramsey_trace(
        TransitionIndex::Second,
        Some(field),
        &cfg2,
        Some(shift1.delta),
        &device.ops,
        None,
        &opts,
    )?;
    if let Some(noise) = noise {
        trace2 = add_measurement_noise(&trace2, noise.n_avg, noise.seed.wrapping_add(1))?;
    }
    let fit2 = fit_damped_sine(&trace2, None)?;
    let shift2 = extract_shift(&fit2, cfg2.gate_freq, bare2, 2);
    Ok((shift1, shift2))
}

/// Window stretched so the expected fringe holds the target period count,
/// estimated from the dressed-state shifts.
fn adapted_windows<T: Real>(
    field: &DriveTone<T>,
    protocol: &SensingProtocol<T>,
    device: &Device<T>,
) -> (T, T) {
    let base = protocol.delta_t_max;
    let est = analysis::dressed_shift(field, &device.spectrum, &device.coupling).ok();
    let window_for = |shift: T| -> T {
        if !(shift.abs() > T::zero()) {
            return base;
        }
        let period = T::TAU() / shift.abs();
        (protocol.target_periods * period).min(protocol.max_window)
    };
    match est {
        Some((d1, d2)) => (window_for(d1), window_for(d2)),
        None => (base, base),
    }
}

fn median3<T: Real>(mut v: Vec<T>) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Some(match v.len() {
        1 => v[0],
        2 => (v[0] + v[1]) * T::of(0.5),
        _ => v[v.len() / 2],
    })
}

/// Pipeline measurement for table entries: the fit is repeated on three
/// incommensurate window lengths and the per-transition median is kept.
///
/// The traces carry weak extra tones from the field-dressed preparation
/// (the sampled fringe is not a pure damped sine); whether those bias a
/// particular fit depends on where they alias for the given window, so the
/// median over windows rejects the occasional bad draw.
pub fn measure_shifts_tabulated<T: Real>(
    field: DriveTone<T>,
    protocol: &SensingProtocol<T>,
    device: &Device<T>,
) -> Result<(T, T), LookupError> {
    let (w1, w2) = adapted_windows(&field, protocol, device);
    let mut d1s = Vec::with_capacity(3);
    let mut d2s = Vec::with_capacity(3);
    let mut last_err = None;
    for scale in [T::of(1.0), T::of(1.275), T::of(1.6)] {
        let windows = (
            (w1 * scale).min(protocol.max_window),
            (w2 * scale).min(protocol.max_window),
        );
        match measure_shifts_with(
            field,
            protocol,
            device,
            Some(windows),
            protocol.gen_n_steps,
            None,
        ) {
            Ok((s1, s2)) => {
                d1s.push(s1.delta);
                d2s.push(s2.delta);
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (median3(d1s), median3(d2s)) {
        (Some(d1), Some(d2)) => Ok((d1, d2)),
        _ => Err(last_err.expect("at least one attempt failed")),
    }
}

/// Validate a grid against the device: the frequency axis must stay above
/// the first transition and the amplitude axis inside the validated drive
/// range.
pub fn validate_grid_for_device<T: Real>(
    grid: &GridSpec<T>,
    device: &Device<T>,
) -> Result<(), LookupError> {
    grid.validate()?;
    let w1 = device.ops.transition(1);
    if !(grid.freq_min > w1) {
        return Err(LookupError::InvalidGrid(format!(
            "frequency axis must stay above the first transition ({} rad/ns): \
             lower-frequency fields pump the qudit ladder",
            w1
        )));
    }
    let amp_cap = T::TAU() * T::of(0.15) * T::of(1.0 + 1e-9);
    if grid.amp_max > amp_cap {
        return Err(LookupError::InvalidGrid(
            "amplitude axis exceeds the validated drive range (A/2π ≤ 0.15 GHz)".into(),
        ));
    }
    Ok(())
}

/// One amplitude row of the table: fitted (Δ₁, Δ₂) per frequency node,
/// NaN for failed fits. Zero amplitude short-circuits to zero shift (no
/// drive leaves no frequency information in the flat traces).
pub fn generate_row<T: Real>(
    amp: T,
    freq_axis: &[T],
    protocol: &SensingProtocol<T>,
    device: &Device<T>,
) -> Vec<(T, T)> {
    freq_axis
        .iter()
        .map(|&freq| {
            if amp == T::zero() {
                return (T::zero(), T::zero());
            }
            let field = DriveTone::new(amp, freq);
            match measure_shifts_tabulated(field, protocol, device) {
                Ok(pair) => pair,
                Err(_) => (T::nan(), T::nan()),
            }
        })
        .collect()
}

/// Assemble a table from per-row results produced by [`generate_row`];
/// aborts when more than 5% of the entries are holes.
pub fn assemble_table<T: Real>(
    grid: &GridSpec<T>,
    protocol: &SensingProtocol<T>,
    rows: Vec<Vec<(T, T)>>,
) -> Result<LookupGrid<T>, LookupError> {
    let amp_axis = grid.amp_axis();
    let freq_axis = grid.freq_axis();
    if rows.len() != amp_axis.len() || rows.iter().any(|r| r.len() != freq_axis.len()) {
        return Err(LookupError::InvalidGrid(
            "row results do not match the grid".into(),
        ));
    }
    let mut delta1 = Array2::<T>::zeros((amp_axis.len(), freq_axis.len()));
    let mut delta2 = Array2::<T>::zeros((amp_axis.len(), freq_axis.len()));
    for (i, row) in rows.iter().enumerate() {
        for (j, &(d1, d2)) in row.iter().enumerate() {
            delta1[[i, j]] = d1;
            delta2[[i, j]] = d2;
        }
    }
    let table = LookupGrid {
        amp_axis,
        freq_axis,
        delta1,
        delta2,
        protocol: protocol.clone(),
        content_hash: protocol.content_hash(),
    };
    let holes = table.holes();
    let total = 2 * table.amp_axis.len() * table.freq_axis.len();
    if holes * 20 > total {
        return Err(LookupError::TooManyHoles { holes, total });
    }
    Ok(table)
}

/// Fill the (Δ₁, Δ₂) lookup surfaces by running the noiseless simulated
/// pipeline at every grid point. Per-point fit failures become NaN holes;
/// more than 5% holes aborts. Grid points are independent and evaluated in
/// parallel.
pub fn generate<T: Real>(
    grid: &GridSpec<T>,
    protocol: &SensingProtocol<T>,
) -> Result<LookupGrid<T>, LookupError> {
    generate_with_progress(grid, protocol, |_, _| {})
}

/// [`generate`] with a per-row progress callback (completed rows, total).
pub fn generate_with_progress<T: Real>(
    grid: &GridSpec<T>,
    protocol: &SensingProtocol<T>,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<LookupGrid<T>, LookupError> {
    let device = Device::new(&protocol.transmon)?;
    validate_grid_for_device(grid, &device)?;
    let amp_axis = grid.amp_axis();
    let freq_axis = grid.freq_axis();
    let n_rows = amp_axis.len();
    let rows: Vec<Vec<(T, T)>> = amp_axis
        .par_iter()
        .enumerate()
        .map(|(row_idx, &amp)| {
            let row = generate_row(amp, &freq_axis, protocol, &device);
            progress(row_idx + 1, n_rows);
            row
        })
        .collect();
    assemble_table(grid, protocol, rows)
}

/// Result of inverting a measured shift pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SenseResult<T> {
    /// Recovered on-chip amplitude (rad/ns).
    pub amp: T,
    /// Recovered field frequency (rad/ns).
    pub freq: T,
    pub amp_err: T,
    pub freq_err: T,
    /// Residual distance in shift space (rad/ns).
    pub distance: T,
    /// A second, non-adjacent distance minimum lies within the measurement
    /// error of the best one.
    pub ambiguous: bool,
    /// Radiated power of the recovered field.
    pub power_dbm: T,
}

fn node_distance<T: Real>(grid: &LookupGrid<T>, i: usize, j: usize, t1: T, t2: T) -> T {
    let d1 = grid.delta1[[i, j]];
    let d2 = grid.delta2[[i, j]];
    if !d1.is_finite() || !d2.is_finite() {
        return T::infinity();
    }
    ((d1 - t1) * (d1 - t1) + (d2 - t2) * (d2 - t2)).sqrt()
}

/// Bilinear value of a surface inside cell (i, j) at fractional (u, v).
fn bilinear<T: Real>(s: &Array2<T>, i: usize, j: usize, u: T, v: T) -> T {
    let one = T::one();
    s[[i, j]] * (one - u) * (one - v)
        + s[[i + 1, j]] * u * (one - v)
        + s[[i, j + 1]] * (one - u) * v
        + s[[i + 1, j + 1]] * u * v
}

fn cell_finite<T: Real>(grid: &LookupGrid<T>, i: usize, j: usize) -> bool {
    [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]
        .iter()
        .all(|&(a, b)| grid.delta1[[a, b]].is_finite() && grid.delta2[[a, b]].is_finite())
}

/// Best point of one cell's bilinear (Δ₁, Δ₂) patch: 2-D Newton for an
/// in-cell root of the interpolated map, with a clamped distance scan as
/// the fallback when the root lies outside. Returns (u, v, distance).
fn refine_in_cell<T: Real>(
    grid: &LookupGrid<T>,
    i: usize,
    j: usize,
    t1: T,
    t2: T,
) -> Option<(T, T, T)> {
    if !cell_finite(grid, i, j) {
        return None;
    }
    let dist_at = |u: T, v: T| -> T {
        let r1 = bilinear(&grid.delta1, i, j, u, v) - t1;
        let r2 = bilinear(&grid.delta2, i, j, u, v) - t2;
        (r1 * r1 + r2 * r2).sqrt()
    };
    let mut u = T::of(0.5);
    let mut v = T::of(0.5);
    let h = T::of(1e-7);
    for _ in 0..40 {
        let f1 = bilinear(&grid.delta1, i, j, u, v) - t1;
        let f2 = bilinear(&grid.delta2, i, j, u, v) - t2;
        let j11 = (bilinear(&grid.delta1, i, j, u + h, v) - f1 - t1) / h;
        let j12 = (bilinear(&grid.delta1, i, j, u, v + h) - f1 - t1) / h;
        let j21 = (bilinear(&grid.delta2, i, j, u + h, v) - f2 - t2) / h;
        let j22 = (bilinear(&grid.delta2, i, j, u, v + h) - f2 - t2) / h;
        let det = j11 * j22 - j12 * j21;
        if det.abs() < T::of(1e-30) {
            break;
        }
        let du = (f1 * j22 - f2 * j12) / det;
        let dv = (f2 * j11 - f1 * j21) / det;
        u = u - du;
        v = v - dv;
        // keep Newton from wandering far outside the cell
        u = u.max(T::of(-0.5)).min(T::of(1.5));
        v = v.max(T::of(-0.5)).min(T::of(1.5));
        if du.abs() < T::of(1e-12) && dv.abs() < T::of(1e-12) {
            break;
        }
    }
    let slack = T::of(0.05);
    if u >= -slack && u <= T::one() + slack && v >= -slack && v <= T::one() + slack {
        let u = u.max(T::zero()).min(T::one());
        let v = v.max(T::zero()).min(T::one());
        return Some((u, v, dist_at(u, v)));
    }
    // no in-cell root: clamped scan for the closest boundary point
    let mut best = (T::zero(), T::zero(), T::infinity());
    let steps = 10;
    for a in 0..=steps {
        for b in 0..=steps {
            let uu = T::from_usize(a).unwrap() / T::from_usize(steps).unwrap();
            let vv = T::from_usize(b).unwrap() / T::from_usize(steps).unwrap();
            let d = dist_at(uu, vv);
            if d < best.2 {
                best = (uu, vv, d);
            }
        }
    }
    Some(best)
}

struct InversionCore<T> {
    amp: T,
    freq: T,
    distance: T,
    ambiguous: bool,
}

fn invert_core<T: Real>(
    t1: T,
    t2: T,
    grid: &LookupGrid<T>,
    sigma_scale: T,
) -> Result<InversionCore<T>, LookupError> {
    let (na, nf) = (grid.amp_axis.len(), grid.freq_axis.len());
    // hull check on the finite entries
    let mut lo1 = T::infinity();
    let mut hi1 = T::neg_infinity();
    let mut lo2 = T::infinity();
    let mut hi2 = T::neg_infinity();
    for i in 0..na {
        for j in 0..nf {
            let d1 = grid.delta1[[i, j]];
            let d2 = grid.delta2[[i, j]];
            if d1.is_finite() && d2.is_finite() {
                lo1 = lo1.min(d1);
                hi1 = hi1.max(d1);
                lo2 = lo2.min(d2);
                hi2 = hi2.max(d2);
            }
        }
    }
    let margin = sigma_scale + T::of(1e-12);
    if t1 < lo1 - margin || t1 > hi1 + margin || t2 < lo2 - margin || t2 > hi2 + margin {
        return Err(LookupError::OutsideHull(
            rad_to_mhz(t1).to64(),
            rad_to_mhz(t2).to64(),
        ));
    }

    let mut best_node = (0usize, 0usize);
    let mut best_node_d = T::infinity();
    for i in 0..na {
        for j in 0..nf {
            let d = node_distance(grid, i, j, t1, t2);
            if d < best_node_d {
                best_node_d = d;
                best_node = (i, j);
            }
        }
    }
    if !best_node_d.is_finite() {
        return Err(LookupError::AllHoles);
    }

    // search every cell's interpolated patch for the closest point
    let mut best: Option<(T, T, T)> = None; // (amp, freq, distance)
    if na >= 2 && nf >= 2 {
        for ci in 0..na - 1 {
            for cj in 0..nf - 1 {
                if let Some((u, v, dist)) = refine_in_cell(grid, ci, cj, t1, t2) {
                    if best.as_ref().map(|b| dist < b.2).unwrap_or(true) {
                        let amp =
                            grid.amp_axis[ci] + (grid.amp_axis[ci + 1] - grid.amp_axis[ci]) * u;
                        let freq =
                            grid.freq_axis[cj] + (grid.freq_axis[cj + 1] - grid.freq_axis[cj]) * v;
                        best = Some((amp, freq, dist));
                    }
                }
            }
        }
    }
    let (amp, freq, distance) = match best {
        Some((a, f, d)) if d <= best_node_d => (a, f, d),
        _ => (
            grid.amp_axis[best_node.0],
            grid.freq_axis[best_node.1],
            best_node_d,
        ),
    };

    // a second, separated local minimum of the node-distance field within
    // the measurement error makes the inversion ambiguous
    let mut ambiguous = false;
    for i in 0..na {
        for j in 0..nf {
            if i.abs_diff(best_node.0) <= 1 && j.abs_diff(best_node.1) <= 1 {
                continue;
            }
            let d = node_distance(grid, i, j, t1, t2);
            if !d.is_finite() {
                continue;
            }
            let mut is_local_min = true;
            for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let ni = i as isize + di;
                let nj = j as isize + dj;
                if ni < 0 || nj < 0 || ni >= na as isize || nj >= nf as isize {
                    continue;
                }
                let dn = node_distance(grid, ni as usize, nj as usize, t1, t2);
                if dn < d {
                    is_local_min = false;
                    break;
                }
            }
            if is_local_min && d - best_node_d <= sigma_scale {
                ambiguous = true;
            }
        }
    }
    Ok(InversionCore {
        amp,
        freq,
        distance,
        ambiguous,
    })
}

/// Invert a measured shift pair to the field amplitude and frequency:
/// nearest grid entry in Euclidean shift distance, refined by 2-D Newton on
/// the bilinear interpolation of the winning cell.
pub fn invert<T: Real>(
    delta1: &ShiftMeasurement<T>,
    delta2: &ShiftMeasurement<T>,
    grid: &LookupGrid<T>,
) -> Result<SenseResult<T>, LookupError> {
    let lims = grid.protocol.limits();
    if delta1.delta.abs() > lims.delta1_max {
        return Err(LookupError::OutsideLimits(format!(
            "|Δ1|/2π = {:.4} MHz exceeds the sampling-rate limit N_R/(10·Δt_max) = {:.4} MHz",
            rad_to_mhz(delta1.delta).to64().abs(),
            rad_to_mhz(lims.delta1_max).to64(),
        )));
    }
    if delta2.delta.abs() < lims.delta2_min {
        return Err(LookupError::OutsideLimits(format!(
            "|Δ2|/2π = {:.4} MHz below the one-period-per-window limit 1/Δt_max = {:.4} MHz",
            rad_to_mhz(delta2.delta).to64().abs(),
            rad_to_mhz(lims.delta2_min).to64(),
        )));
    }
    let sigma_scale = delta1.sigma.max(delta2.sigma);
    let core = invert_core(delta1.delta, delta2.delta, grid, sigma_scale)?;
    Ok(SenseResult {
        amp: core.amp,
        freq: core.freq,
        amp_err: T::zero(),
        freq_err: T::zero(),
        distance: core.distance,
        ambiguous: core.ambiguous,
        power_dbm: power_dbm(core.amp.max(T::of(1e-30)), core.freq),
    })
}

/// Uncertainty of the recovered field from the fit errors: re-invert the
/// four corner perturbations (Δ₁ ± σ₁, Δ₂ ± σ₂) and take half the spread.
/// Corners leaving the table hull are clamped onto it.
pub fn propagate_uncertainty<T: Real>(
    delta1: &ShiftMeasurement<T>,
    delta2: &ShiftMeasurement<T>,
    grid: &LookupGrid<T>,
) -> Result<(T, T), LookupError> {
    let sigma_scale = delta1.sigma.max(delta2.sigma);
    let central = invert_core(delta1.delta, delta2.delta, grid, sigma_scale)?;
    let mut amp_lo = central.amp;
    let mut amp_hi = central.amp;
    let mut freq_lo = central.freq;
    let mut freq_hi = central.freq;
    for (s1, s2) in [
        (delta1.sigma, delta2.sigma),
        (delta1.sigma, -delta2.sigma),
        (-delta1.sigma, delta2.sigma),
        (-delta1.sigma, -delta2.sigma),
    ] {
        let corner = invert_core(delta1.delta + s1, delta2.delta + s2, grid, sigma_scale)?;
        amp_lo = amp_lo.min(corner.amp);
        amp_hi = amp_hi.max(corner.amp);
        freq_lo = freq_lo.min(corner.freq);
        freq_hi = freq_hi.max(corner.freq);
    }
    let half = T::of(0.5);
    Ok(((amp_hi - amp_lo) * half, (freq_hi - freq_lo) * half))
}

/// Mean absolute change of the recovered field frequency when Δ₁ is offset
/// by ±`offset` (a slow qudit-frequency fluctuation between calibration and
/// measurement shifts every Δ₁ data point equally).
pub fn tls_offset_study<T: Real>(
    offset: T,
    dataset: &[(ShiftMeasurement<T>, ShiftMeasurement<T>)],
    grid: &LookupGrid<T>,
) -> Result<T, LookupError> {
    if dataset.is_empty() {
        return Err(LookupError::InvalidGrid("empty dataset".into()));
    }
    let mut acc = T::zero();
    let mut count = 0usize;
    for (d1, d2) in dataset {
        let sigma_scale = d1.sigma.max(d2.sigma).max(offset.abs());
        let central = invert_core(d1.delta, d2.delta, grid, sigma_scale)?;
        for sign in [T::one(), -T::one()] {
            let shifted = invert_core(d1.delta + sign * offset, d2.delta, grid, sigma_scale)?;
            acc = acc + (shifted.freq - central.freq).abs();
            count += 1;
        }
    }
    Ok(acc / T::from_usize(count).unwrap())
}

/// Radiated power of a field arriving at rate `amp` with photon energy
/// ħ·`freq`: P = ħ·A·ω, reported in dBm. Inputs in rad/ns.
pub fn power_dbm<T: Real>(amp: T, freq: T) -> T {
    // rad/ns → rad/s brings in 1e9 per factor
    let p_watt = T::of(1.054_571_817e-34 * 1e18) * amp * freq;
    T::of(10.0) * (p_watt * T::of(1e3)).log10()
}
