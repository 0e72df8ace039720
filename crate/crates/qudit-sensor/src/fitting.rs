//! Nonlinear least squares on the damped-sine Ramsey model
//!
//!   p(t) = a·e^{−t/τ}·sin(ωt + φ₀) + b·e^{−t/τ_b} + c
//!
//! plus the conversion of fitted oscillation frequencies to ac-Stark shifts
//! and the σ(N_avg) = a/√N + c scaling fit of the error model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::real::Real;

const MAX_LM_ITERS: usize = 200;
/// Fits are rejected when the trace holds fewer oscillation periods than
/// this, mirroring the sensor's lower detectability limit.
const MIN_PERIODS: f64 = 1.25;
/// Peak-to-peak population swing below which a trace counts as flat and is
/// fitted as a zero-frequency constant.
const FLAT_TRACE_PTP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("trace holds {periods:.2} oscillation periods, below the {MIN_PERIODS} needed for a reliable fit")]
    NoOscillation { periods: f64 },
    #[error("fit did not converge after {0} iterations (including the perturbed restarts)")]
    NoConvergence(usize),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Population-vs-delay data of one Ramsey experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamseyTrace<T> {
    /// Delays in ns, strictly increasing.
    pub delays: Vec<T>,
    /// Populations in [0, 1].
    pub populations: Vec<T>,
    /// Averages used when measurement noise was applied.
    pub n_avg: Option<u64>,
}

impl<T: Real> RamseyTrace<T> {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.delays.len() != self.populations.len() {
            return Err(FitError::InvalidTrace("length mismatch".into()));
        }
        if self.delays.len() < 8 {
            return Err(FitError::InvalidTrace(format!(
                "need at least 8 points, got {}",
                self.delays.len()
            )));
        }
        for w in self.delays.windows(2) {
            if !(w[1] > w[0]) {
                return Err(FitError::InvalidTrace(
                    "delays not strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> T {
        *self.delays.last().unwrap() - self.delays[0]
    }
}

/// Result of the seven-parameter damped-sine fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DampedSineFit<T> {
    /// Oscillation frequency ω_R (rad/ns), non-negative by convention.
    pub omega_r: T,
    /// Standard error of ω_R (rad/ns).
    pub sigma_r: T,
    pub amplitude: T,
    pub decay_tau: T,
    pub phase0: T,
    pub offset_amp: T,
    pub offset_tau: T,
    pub offset_const: T,
    /// 7×7 parameter covariance in the order (ω, a, τ, φ₀, b, τ_b, c).
    pub covariance: Array2<T>,
    pub rms_residual: T,
    pub iterations: usize,
}

impl<T: Real> DampedSineFit<T> {
    pub fn params(&self) -> [T; 7] {
        [
            self.omega_r,
            self.amplitude,
            self.decay_tau,
            self.phase0,
            self.offset_amp,
            self.offset_tau,
            self.offset_const,
        ]
    }

    pub fn model(&self, t: T) -> T {
        model(&self.params(), t)
    }
}

/// The shift Δ_i of one qudit transition obtained from a Ramsey fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftMeasurement<T> {
    pub transition_index: u8,
    /// Shift Δ (rad/ns), sign convention ω̃ = ω − Δ.
    pub delta: T,
    /// Standard error (rad/ns).
    pub sigma: T,
    pub gate_freq: T,
    pub bare_freq: T,
}

fn model<T: Real>(p: &[T; 7], t: T) -> T {
    let [w, a, tau, phi, b, tau_b, c] = *p;
    a * (-t / tau).exp() * (w * t + phi).sin() + b * (-t / tau_b).exp() + c
}

fn jacobian_row<T: Real>(p: &[T; 7], t: T, row: &mut [T; 7]) {
    let [w, a, tau, phi, b, tau_b, _c] = *p;
    let e1 = (-t / tau).exp();
    let e2 = (-t / tau_b).exp();
    let s = (w * t + phi).sin();
    let co = (w * t + phi).cos();
    row[0] = a * e1 * t * co;
    row[1] = e1 * s;
    row[2] = a * e1 * s * t / (tau * tau);
    row[3] = a * e1 * co;
    row[4] = e2;
    row[5] = b * e2 * t / (tau_b * tau_b);
    row[6] = T::one();
}

fn sum_sq_residuals<T: Real>(trace: &RamseyTrace<T>, p: &[T; 7]) -> T {
    trace
        .delays
        .iter()
        .zip(trace.populations.iter())
        .map(|(&t, &y)| {
            let r = y - model(p, t);
            r * r
        })
        .sum()
}

/// Discrete-Fourier frequency estimate of the mean-subtracted trace, with
/// parabolic refinement of the peak bin. Returns (ω in rad/ns, bin spacing
/// in rad/ns, phase seed for the sine at the peak).
fn dft_peak<T: Real>(trace: &RamseyTrace<T>) -> (T, T, T) {
    let n = trace.populations.len();
    let mean = trace.populations.iter().copied().sum::<T>() / T::from_usize(n).unwrap();
    let mut coeffs = vec![(T::zero(), T::zero()); n / 2 + 1];
    for (k, c) in coeffs.iter_mut().enumerate().skip(1) {
        let mut re = T::zero();
        let mut im = T::zero();
        for (j, &y) in trace.populations.iter().enumerate() {
            let arg = -T::TAU() * T::from_usize(k * j).unwrap() / T::from_usize(n).unwrap();
            let v = y - mean;
            re = re + v * arg.cos();
            im = im + v * arg.sin();
        }
        *c = (re, im);
    }
    let mag = |c: &(T, T)| (c.0 * c.0 + c.1 * c.1).sqrt();
    let mut k_peak = 1;
    for k in 2..coeffs.len() {
        if mag(&coeffs[k]) > mag(&coeffs[k_peak]) {
            k_peak = k;
        }
    }
    // y ≈ a·sin(ωt + φ) makes the peak coefficient ≈ (aN/2)·e^{i(φ−π/2)}
    let phase0 = coeffs[k_peak].1.atan2(coeffs[k_peak].0) + T::FRAC_PI_2();
    // parabolic interpolation on the magnitude around the peak
    let mut k_ref = T::from_usize(k_peak).unwrap();
    if k_peak > 1 && k_peak + 1 < coeffs.len() {
        let (ym, y0, yp) = (
            mag(&coeffs[k_peak - 1]),
            mag(&coeffs[k_peak]),
            mag(&coeffs[k_peak + 1]),
        );
        let denom = ym - T::of(2.0) * y0 + yp;
        if denom.abs() > T::epsilon() {
            let delta = T::of(0.5) * (ym - yp) / denom;
            if delta.abs() <= T::one() {
                k_ref = k_ref + delta;
            }
        }
    }
    // sample spacing from the delay grid; bin k ↔ k/(N·Δ) cycles per ns
    let spacing = trace.window() / T::from_usize(n - 1).unwrap();
    let bin = T::TAU() / (T::from_usize(n).unwrap() * spacing);
    (k_ref * bin, bin, phase0)
}

fn initial_guess<T: Real>(trace: &RamseyTrace<T>, omega0: T, phase0: T) -> [T; 7] {
    let n = trace.populations.len();
    let mean = trace.populations.iter().copied().sum::<T>() / T::from_usize(n).unwrap();
    let max = trace
        .populations
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let min = trace.populations.iter().copied().fold(T::infinity(), T::min);
    let a0 = (max - min) * T::of(0.5);
    let window = trace.window();
    let b0 = trace.populations[0] - mean - a0 * phase0.sin();
    [omega0, a0, window, phase0, b0, window, mean]
}

fn lm_minimize<T: Real>(
    trace: &RamseyTrace<T>,
    start: [T; 7],
) -> Result<([T; 7], usize), [T; 7]> {
    let n = trace.delays.len();
    // beyond ~1000 windows a decay constant is indistinguishable from no
    // decay; capping it removes a degenerate (b, τ_b) drift direction
    let tau_cap = trace.window() * T::of(1e3);
    let mut p = start;
    let mut ssr = sum_sq_residuals(trace, &p);
    let mut lambda = T::of(1e-3);
    let mut row = [T::zero(); 7];
    for iter in 0..MAX_LM_ITERS {
        let mut jtj = Array2::<T>::zeros((7, 7));
        let mut jtr = [T::zero(); 7];
        for i in 0..n {
            let t = trace.delays[i];
            jacobian_row(&p, t, &mut row);
            let r = trace.populations[i] - model(&p, t);
            for a in 0..7 {
                jtr[a] = jtr[a] + row[a] * r;
                for b in a..7 {
                    jtj[[a, b]] = jtj[[a, b]] + row[a] * row[b];
                }
            }
        }
        for a in 0..7 {
            for b in 0..a {
                jtj[[a, b]] = jtj[[b, a]];
            }
        }
        let mut improved = false;
        for _trial in 0..24 {
            let mut damped = jtj.clone();
            for a in 0..7 {
                let d = jtj[[a, a]];
                let floor = T::of(1e-12);
                damped[[a, a]] = d + lambda * d.max(floor);
            }
            let step = match linalg::solve(&damped, &jtr) {
                Ok(s) => s,
                Err(_) => {
                    lambda = lambda * T::of(5.0);
                    continue;
                }
            };
            let mut trial_p = p;
            for a in 0..7 {
                trial_p[a] = trial_p[a] + step[a];
            }
            // decay times must stay positive and bounded
            if !(trial_p[2] > T::zero()) || !(trial_p[5] > T::zero()) {
                lambda = lambda * T::of(5.0);
                continue;
            }
            trial_p[2] = trial_p[2].min(tau_cap);
            trial_p[5] = trial_p[5].min(tau_cap);
            let trial_ssr = sum_sq_residuals(trace, &trial_p);
            if trial_ssr.is_finite() && trial_ssr < ssr {
                let rel_drop = (ssr - trial_ssr) / ssr.max(T::of(1e-300));
                p = trial_p;
                ssr = trial_ssr;
                lambda = (lambda / T::of(3.0)).max(T::of(1e-14));
                improved = true;
                if rel_drop < T::of(1e-11) || ssr < T::of(1e-28) {
                    return Ok((p, iter + 1));
                }
                // statistical stop: once steps fall far below the
                // parameter standard errors, residual structure the model
                // cannot represent is all that is left to chase
                if rel_drop < T::of(1e-4) && lambda <= T::one() {
                    if let Ok(inv) = linalg::inverse(&jtj) {
                        let s2 = ssr / T::from_usize(n.saturating_sub(7).max(1)).unwrap();
                        let settled = (0..7).all(|a| {
                            let sigma = (inv[[a, a]].max(T::zero()) * s2).sqrt();
                            step[a].abs()
                                <= T::of(1e-3) * sigma + T::of(1e-12) * p[a].abs()
                        });
                        if settled {
                            return Ok((p, iter + 1));
                        }
                    }
                }
                break;
            }
            lambda = (lambda * T::of(5.0)).min(T::of(1e14));
        }
        if !improved {
            // no descent direction improves the residual at any damping:
            // the fit has reached a minimum at working precision
            return Ok((p, iter + 1));
        }
    }
    Err(p)
}

fn canonicalize<T: Real>(p: &mut [T; 7]) {
    // a real oscillation fixes only |ω|: fold negative frequencies and
    // amplitudes back into the phase
    if p[0] < T::zero() {
        p[0] = -p[0];
        p[3] = T::PI() - p[3];
    }
    if p[1] < T::zero() {
        p[1] = -p[1];
        p[3] = p[3] + T::PI();
    }
    while p[3] > T::PI() {
        p[3] = p[3] - T::TAU();
    }
    while p[3] <= -T::PI() {
        p[3] = p[3] + T::TAU();
    }
}

/// On a uniform delay grid the sampled model is degenerate under aliasing,
/// so the optimizer may land on ω_s − ω instead of ω. Fold the frequency
/// back into [0, ω_s/2]; on-grid residuals are unchanged.
fn fold_into_nyquist_zone<T: Real>(trace: &RamseyTrace<T>, p: &mut [T; 7]) {
    let n = trace.delays.len();
    let spacing = trace.window() / T::from_usize(n - 1).unwrap();
    let uniform = trace.delays.windows(2).all(|w| {
        ((w[1] - w[0]) - spacing).abs() < spacing * T::of(1e-9)
    });
    if !uniform {
        return;
    }
    let w_s = T::TAU() / spacing;
    while p[0] > w_s {
        p[0] = p[0] - w_s;
    }
    if p[0] > w_s * T::of(0.5) {
        p[0] = w_s - p[0];
        p[3] = T::PI() - p[3];
    }
    canonicalize(p);
}

fn flat_trace_fit<T: Real>(trace: &RamseyTrace<T>) -> DampedSineFit<T> {
    let n = trace.populations.len();
    let mean = trace.populations.iter().copied().sum::<T>() / T::from_usize(n).unwrap();
    let ssr: T = trace
        .populations
        .iter()
        .map(|&y| (y - mean) * (y - mean))
        .sum();
    let rms = (ssr / T::from_usize(n).unwrap()).sqrt();
    let window = trace.window();
    DampedSineFit {
        omega_r: T::zero(),
        sigma_r: T::of(1e-30),
        amplitude: T::zero(),
        decay_tau: window,
        phase0: T::FRAC_PI_2(),
        offset_amp: T::zero(),
        offset_tau: window,
        offset_const: mean,
        covariance: Array2::zeros((7, 7)),
        rms_residual: rms,
        iterations: 0,
    }
}

/// Least-squares fit of the exponentially damped sine model.
///
/// The frequency is seeded from the dominant discrete-Fourier peak of the
/// mean-subtracted trace and refined by damped Gauss–Newton. Traces with
/// fewer than 1.25 oscillation periods in the window are rejected; flat
/// traces (no detectable swing) fit as ω_R = 0. If the first descent stalls,
/// one restart with the seed frequency shifted by ±1 Fourier bin is tried
/// before reporting non-convergence.
pub fn fit_damped_sine<T: Real>(
    trace: &RamseyTrace<T>,
    init_guess: Option<[T; 7]>,
) -> Result<DampedSineFit<T>, FitError> {
    trace.validate()?;
    let max = trace
        .populations
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let min = trace.populations.iter().copied().fold(T::infinity(), T::min);
    if (max - min).to64() < FLAT_TRACE_PTP && init_guess.is_none() {
        return Ok(flat_trace_fit(trace));
    }
    let (omega0, bin, phase0) = dft_peak(trace);
    let window = trace.window();
    let periods = (omega0 * window / T::TAU()).to64();
    if init_guess.is_none() && periods < MIN_PERIODS {
        return Err(FitError::NoOscillation { periods });
    }
    let start = init_guess.unwrap_or_else(|| initial_guess(trace, omega0, phase0));
    // run the seed and its ±1-bin perturbations, keep the best minimum;
    // descents can settle in poor local minima when the phase seed is off
    let attempts: &[T] = if init_guess.is_some() {
        &[T::zero()]
    } else {
        &[T::zero(), bin, -bin]
    };
    let mut best: Option<([T; 7], T)> = None;
    let mut iters_used = 0;
    for &offset in attempts {
        let mut s = start;
        s[0] = s[0] + offset;
        match lm_minimize(trace, s) {
            Ok((p, it)) => {
                iters_used += it;
                let ssr = sum_sq_residuals(trace, &p);
                if best.as_ref().map(|(_, b)| ssr < *b).unwrap_or(true) {
                    best = Some((p, ssr));
                }
            }
            Err(_) => {
                iters_used += MAX_LM_ITERS;
            }
        }
    }
    let Some((mut p, _)) = best else {
        return Err(FitError::NoConvergence(iters_used));
    };
    canonicalize(&mut p);
    fold_into_nyquist_zone(trace, &mut p);

    // covariance of the linearized problem, scaled by the residual variance
    let n = trace.delays.len();
    let mut jtj = Array2::<T>::zeros((7, 7));
    let mut row = [T::zero(); 7];
    let mut ssr = T::zero();
    for i in 0..n {
        let t = trace.delays[i];
        jacobian_row(&p, t, &mut row);
        let r = trace.populations[i] - model(&p, t);
        ssr = ssr + r * r;
        for a in 0..7 {
            for b in a..7 {
                jtj[[a, b]] = jtj[[a, b]] + row[a] * row[b];
            }
        }
    }
    for a in 0..7 {
        for b in 0..a {
            jtj[[a, b]] = jtj[[b, a]];
        }
    }
    let dof = T::from_usize(n - 7).unwrap();
    let s2 = ssr / dof;
    let covariance = match linalg::inverse(&jtj) {
        Ok(inv) => inv.mapv(|v| v * s2),
        Err(_) => Array2::from_elem((7, 7), T::nan()),
    };
    let sigma_r = covariance[[0, 0]].max(T::zero()).sqrt().max(T::of(1e-30));
    let rms = (ssr / T::from_usize(n).unwrap()).sqrt();
    Ok(DampedSineFit {
        omega_r: p[0],
        sigma_r,
        amplitude: p[1],
        decay_tau: p[2],
        phase0: p[3],
        offset_amp: p[4],
        offset_tau: p[5],
        offset_const: p[6],
        covariance,
        rms_residual: rms,
        iterations: iters_used,
    })
}

/// Convert a fitted Ramsey frequency to the transition shift:
/// Δ = ω_R − (ω_G − ω_bare). With a resonant gate this reduces to Δ = ω_R.
pub fn extract_shift<T: Real>(
    fit: &DampedSineFit<T>,
    gate_freq: T,
    bare_freq: T,
    transition_index: u8,
) -> ShiftMeasurement<T> {
    ShiftMeasurement {
        transition_index,
        delta: fit.omega_r - (gate_freq - bare_freq),
        sigma: fit.sigma_r,
        gate_freq,
        bare_freq,
    }
}

/// Coefficients of σ(N_avg) = a/√N_avg + c with their standard errors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SigmaScaling<T> {
    pub a: T,
    pub c: T,
    pub a_err: T,
    pub c_err: T,
}

/// Linear least-squares fit of the averaging law σ(N) = a/√N + c.
pub fn fit_sigma_scaling<T: Real>(points: &[(T, T)]) -> Result<SigmaScaling<T>, FitError> {
    if points.len() < 4 {
        return Err(FitError::InvalidTrace(format!(
            "need at least 4 (n_avg, sigma) points, got {}",
            points.len()
        )));
    }
    let n_min = points
        .iter()
        .map(|&(n, _)| n)
        .fold(T::infinity(), T::min);
    let n_max = points
        .iter()
        .map(|&(n, _)| n)
        .fold(T::neg_infinity(), T::max);
    if !(n_min > T::zero()) {
        return Err(FitError::InvalidTrace("n_avg must be positive".into()));
    }
    if n_max / n_min < T::of(10.0) {
        return Err(FitError::InvalidTrace(
            "n_avg values must span at least one decade".into(),
        ));
    }
    // design matrix columns: x = 1/√N and 1
    let mut sxx = T::zero();
    let mut sx = T::zero();
    let mut s1 = T::zero();
    let mut sxy = T::zero();
    let mut sy = T::zero();
    for &(n, sig) in points {
        let x = T::one() / n.sqrt();
        sxx = sxx + x * x;
        sx = sx + x;
        s1 = s1 + T::one();
        sxy = sxy + x * sig;
        sy = sy + sig;
    }
    let det = sxx * s1 - sx * sx;
    if det.abs() < T::of(1e-300) {
        return Err(FitError::SingularDesign(
            "all n_avg values identical".into(),
        ));
    }
    let a = (sxy * s1 - sy * sx) / det;
    let c = (sxx * sy - sx * sxy) / det;
    let mut ssr = T::zero();
    for &(n, sig) in points {
        let x = T::one() / n.sqrt();
        let r = sig - (a * x + c);
        ssr = ssr + r * r;
    }
    let dof = T::from_usize(points.len() - 2).unwrap();
    let s2 = ssr / dof.max(T::one());
    let a_err = (s2 * s1 / det).sqrt();
    let c_err = (s2 * sxx / det).sqrt();
    Ok(SigmaScaling { a, c, a_err, c_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::ghz_to_rad;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn synth_trace(p: &[f64; 7], n: usize, t_max: f64) -> RamseyTrace<f64> {
        let delays: Vec<f64> = (0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect();
        let populations = delays.iter().map(|&t| model(p, t)).collect();
        RamseyTrace {
            delays,
            populations,
            n_avg: None,
        }
    }

    #[test]
    fn clean_five_mhz_trace_recovered() {
        let w = ghz_to_rad(0.005);
        let p = [w, 0.45, 1000.0, 1.2, 0.05, 600.0, 0.5];
        let trace = synth_trace(&p, 80, 800.0);
        let fit = fit_damped_sine(&trace, None).unwrap();
        assert_relative_eq!(fit.omega_r, w, max_relative = 1e-4);
        assert!(fit.sigma_r < 1e-8 * w, "sigma_r = {}", fit.sigma_r);
    }

    #[test]
    fn below_one_period_errors() {
        let w = ghz_to_rad(0.0005); // 0.5 MHz, 0.4 periods over 800 ns
        let p = [w, 0.45, 1e4, 1.2, 0.0, 800.0, 0.5];
        let trace = synth_trace(&p, 80, 800.0);
        match fit_damped_sine(&trace, None) {
            Err(FitError::NoOscillation { periods }) => assert!(periods < 1.25),
            other => panic!("expected NoOscillation, got {other:?}"),
        }
    }

    #[test]
    fn flat_trace_fits_as_zero_frequency() {
        let trace = RamseyTrace {
            delays: (0..80).map(|k| 10.0 * k as f64).collect(),
            populations: vec![1.0; 80],
            n_avg: None,
        };
        let fit = fit_damped_sine(&trace, None).unwrap();
        assert_eq!(fit.omega_r, 0.0);
        assert!(fit.sigma_r > 0.0);
        assert_relative_eq!(fit.offset_const, 1.0);
    }

    #[test]
    fn self_consistency_round_trip() {
        let p = [ghz_to_rad(0.003), 0.4, 900.0, 0.7, 0.08, 500.0, 0.48];
        let trace = synth_trace(&p, 100, 1000.0);
        let fit = fit_damped_sine(&trace, None).unwrap();
        let refit = fit_damped_sine(&trace, Some(fit.params())).unwrap();
        for (a, b) in fit.params().iter().zip(refit.params().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-12);
        }
    }

    #[test]
    fn offset_invariance() {
        let p = [ghz_to_rad(0.004), 0.35, 1200.0, 0.9, 0.06, 700.0, 0.45];
        let base = synth_trace(&p, 80, 800.0);
        let shifted = RamseyTrace {
            delays: base.delays.clone(),
            populations: base.populations.iter().map(|&y| y + 0.1).collect(),
            n_avg: None,
        };
        let fa = fit_damped_sine(&base, None).unwrap();
        let fb = fit_damped_sine(&shifted, None).unwrap();
        assert!((fa.omega_r - fb.omega_r).abs() < fa.sigma_r.max(1e-12) / 10.0 + 1e-12);
        assert_relative_eq!(fb.offset_const, fa.offset_const + 0.1, epsilon = 1e-6);
    }

    #[test]
    fn noisy_trace_sigma_order_of_magnitude() {
        // binomial noise at n_avg = 3000 puts σ_R/2π near 10 kHz (±3×);
        // trace shaped like the device's decaying fringes; average a few
        // seeds to keep the check stable
        let w = ghz_to_rad(0.005);
        let p = [w, 0.35, 700.0, std::f64::consts::FRAC_PI_2, 0.15, 600.0, 0.4];
        let trace = synth_trace(&p, 80, 800.0);
        let mut sigmas = Vec::new();
        for seed in 11..16 {
            let noisy = crate::dynamics::add_measurement_noise(&trace, 3000, seed).unwrap();
            let fit = fit_damped_sine(&noisy, None).unwrap();
            sigmas.push(fit.sigma_r / std::f64::consts::TAU * 1e6);
            let err_khz = (fit.omega_r - w).abs() / std::f64::consts::TAU * 1e6;
            assert!(err_khz < 5.0 * sigmas.last().unwrap(), "bias {err_khz} kHz");
        }
        let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        assert!((3.0..=30.0).contains(&mean), "mean sigma = {mean} kHz");
    }

    #[test]
    fn extract_shift_arithmetic() {
        let mut fit = flat_trace_fit(&synth_trace(
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5],
            10,
            100.0,
        ));
        fit.omega_r = ghz_to_rad(0.003);
        // resonant gate: Δ = ω_R
        let s = extract_shift(&fit, ghz_to_rad(4.685), ghz_to_rad(4.685), 1);
        assert_relative_eq!(s.delta, ghz_to_rad(0.003), epsilon = 1e-15);
        // gate 1 MHz above bare: Δ = 3 MHz − 1 MHz
        let s = extract_shift(&fit, ghz_to_rad(4.686), ghz_to_rad(4.685), 1);
        assert_relative_eq!(s.delta, ghz_to_rad(0.002), epsilon = 1e-12);
        assert_eq!(s.transition_index, 1);
    }

    #[test]
    fn sigma_scaling_recovers_reference_coefficients() {
        // round-trip the reported (a, c) pairs through synthetic data
        for (a, c) in [(355.0, 0.12), (537.0, 2.20)] {
            let points: Vec<(f64, f64)> = [300.0, 1000.0, 3000.0, 10000.0, 30000.0]
                .iter()
                .map(|&n: &f64| (n, a / n.sqrt() + c))
                .collect();
            let fit = fit_sigma_scaling(&points).unwrap();
            assert_relative_eq!(fit.a, a, max_relative = 0.05);
            assert!((fit.c - c).abs() < 0.05 * a / 300.0_f64.sqrt());
        }
    }

    #[test]
    fn sigma_scaling_pure_shot_noise_gives_zero_floor() {
        let points: Vec<(f64, f64)> = [300.0, 1000.0, 3000.0, 10000.0, 30000.0]
            .iter()
            .map(|&n: &f64| (n, 250.0 / n.sqrt()))
            .collect();
        let fit = fit_sigma_scaling(&points).unwrap();
        assert!(fit.c.abs() <= 2.0 * fit.c_err.max(1e-12));
    }

    #[test]
    fn sigma_scaling_rejects_narrow_span() {
        let points = vec![(1000.0_f64, 1.0), (1200.0, 0.9), (1500.0, 0.8), (2000.0, 0.7)];
        assert!(fit_sigma_scaling(&points).is_err());
    }

    #[test]
    fn short_trace_rejected() {
        let trace = RamseyTrace {
            delays: vec![0.0_f64, 1.0, 2.0],
            populations: vec![0.5, 0.6, 0.7],
            n_avg: None,
        };
        assert!(matches!(
            fit_damped_sine(&trace, None),
            Err(FitError::InvalidTrace(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_self_fit_recovers_frequency(
            f_mhz in 2.0..12.0f64,
            amp in 0.2..0.5f64,
            phase in -1.2..1.2f64,
            tau in 500.0..3000.0f64,
        ) {
            let w = ghz_to_rad(f_mhz * 1e-3);
            let p = [w, amp, tau, phase, 0.05, 900.0, 0.5];
            let trace = synth_trace(&p, 96, 800.0);
            let fit = fit_damped_sine(&trace, None).unwrap();
            prop_assert!((fit.omega_r - w).abs() / w < 1e-5);
        }
    }
}
