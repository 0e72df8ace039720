//! Transmon qudit definition: exact spectrum from charge-basis
//! diagonalization, normalized coupling (ladder) operator, and circuit
//! parameter calibration from measured transition frequencies.
//!
//! Energy bookkeeping: `h = 1`, so Josephson/charging energies and all
//! eigenenergies are plain frequencies in GHz (ω/2π). Angular frequencies
//! appear only downstream in the dynamics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::real::Real;

/// Relative eigenenergy drift allowed when the charge cutoff is bumped by 5.
const CUTOFF_CONVERGENCE_TOL: f64 = 1e-8;
/// Calibration target: both transitions reproduced to 1 kHz.
const FIT_TOL_GHZ: f64 = 1e-6;
const FIT_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum TransmonError {
    #[error("invalid transmon parameters: {0}")]
    InvalidParams(String),
    #[error("charge cutoff {cutoff} too small: relative eigenenergy change {change:e} when increased by 5")]
    CutoffTooSmall { cutoff: usize, change: f64 },
    #[error("eigensolver failed: {0}")]
    Eigensolver(#[from] LinalgError),
    #[error("calibration targets not a transmon: {0}")]
    BadTargets(String),
    #[error("calibration did not converge after {0} iterations")]
    FitNoConvergence(usize),
}

/// Circuit parameters of the transmon qudit.
///
/// `e_j`/`e_c` are the Josephson and charging energies in GHz (h = 1),
/// `n_g` the offset charge, `charge_cutoff` the half-width of the charge
/// basis and `d_keep` the number of eigenlevels retained downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmonParams<T> {
    #[serde(rename = "e_j_ghz")]
    pub e_j: T,
    #[serde(rename = "e_c_ghz")]
    pub e_c: T,
    pub n_g: T,
    pub charge_cutoff: usize,
    pub d_keep: usize,
}

impl<T: Real> TransmonParams<T> {
    pub fn new(e_j: T, e_c: T) -> Self {
        Self {
            e_j,
            e_c,
            n_g: T::zero(),
            charge_cutoff: 30,
            d_keep: 7,
        }
    }

    pub fn with_levels(mut self, d_keep: usize, charge_cutoff: usize) -> Self {
        self.d_keep = d_keep;
        self.charge_cutoff = charge_cutoff;
        self
    }

    pub fn validate(&self) -> Result<(), TransmonError> {
        if !(self.e_j > T::zero()) || !(self.e_c > T::zero()) {
            return Err(TransmonError::InvalidParams(
                "e_j and e_c must be positive".into(),
            ));
        }
        if self.e_j / self.e_c <= T::one() {
            return Err(TransmonError::InvalidParams(format!(
                "e_j/e_c = {} is not in the transmon regime",
                self.e_j / self.e_c
            )));
        }
        if self.d_keep < 3 {
            return Err(TransmonError::InvalidParams(
                "d_keep must be at least 3".into(),
            ));
        }
        if self.charge_cutoff < 3 * self.d_keep {
            return Err(TransmonError::InvalidParams(format!(
                "charge_cutoff {} below 3*d_keep = {}",
                self.charge_cutoff,
                3 * self.d_keep
            )));
        }
        Ok(())
    }
}

/// Eigenenergies and transition frequencies, in GHz, with `E_0 = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spectrum<T> {
    pub energies: Vec<T>,
    pub transitions: Vec<T>,
    pub anharmonicity: T,
}

impl<T: Real> Spectrum<T> {
    /// Transition frequency ω_i = E_i − E_{i−1} in GHz; `i` is 1-based.
    pub fn transition(&self, i: usize) -> T {
        self.transitions[i - 1]
    }
}

/// Charge operator in the transmon eigenbasis, rescaled so the (0,1)
/// element is exactly 1. Plays the role of a single Hermitian b̂ + b̂†.
#[derive(Debug, Clone)]
pub struct CouplingOperator<T> {
    pub matrix: Array2<T>,
}

impl<T: Real> CouplingOperator<T> {
    /// Matrix element between levels `i` and `j`.
    pub fn element(&self, i: usize, j: usize) -> T {
        self.matrix[[i, j]]
    }
}

fn charge_hamiltonian<T: Real>(e_j: T, e_c: T, n_g: T, cutoff: usize) -> Array2<T> {
    let dim = 2 * cutoff + 1;
    let mut h = Array2::<T>::zeros((dim, dim));
    let four = T::of(4.0);
    let half = T::of(0.5);
    for k in 0..dim {
        let n = T::from_isize(k as isize - cutoff as isize).unwrap();
        h[[k, k]] = four * e_c * (n - n_g) * (n - n_g);
        if k + 1 < dim {
            h[[k + 1, k]] = -half * e_j;
            h[[k, k + 1]] = -half * e_j;
        }
    }
    h
}

fn lowest_levels<T: Real>(
    params: &TransmonParams<T>,
    cutoff: usize,
) -> Result<(Vec<T>, Array2<T>), TransmonError> {
    let h = charge_hamiltonian(params.e_j, params.e_c, params.n_g, cutoff);
    let (vals, vecs) = linalg::eigh(&h)?;
    let d = params.d_keep;
    let dim = 2 * cutoff + 1;
    let e0 = vals[0];
    let energies: Vec<T> = (0..d).map(|i| vals[i] - e0).collect();
    // charge matrix elements g_ij = Σ_n ψ_i(n) n ψ_j(n), with eigenvector
    // signs fixed so every g_{i,i+1} is positive
    let mut vecs = vecs;
    for i in 1..d {
        let mut g = T::zero();
        for k in 0..dim {
            let n = T::from_isize(k as isize - cutoff as isize).unwrap();
            g = g + vecs[[k, i - 1]] * n * vecs[[k, i]];
        }
        if g < T::zero() {
            for k in 0..dim {
                vecs[[k, i]] = -vecs[[k, i]];
            }
        }
    }
    let mut coupling = Array2::<T>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut g = T::zero();
            for k in 0..dim {
                let n = T::from_isize(k as isize - cutoff as isize).unwrap();
                g = g + vecs[[k, i]] * n * vecs[[k, j]];
            }
            coupling[[i, j]] = g;
            coupling[[j, i]] = g;
        }
    }
    Ok((energies, coupling))
}

fn spectrum_from_levels<T: Real>(energies: Vec<T>) -> Result<Spectrum<T>, TransmonError> {
    for w in energies.windows(2) {
        if !(w[1] > w[0]) {
            return Err(TransmonError::InvalidParams(
                "eigenenergies not strictly increasing".into(),
            ));
        }
    }
    let transitions: Vec<T> = energies.windows(2).map(|w| w[1] - w[0]).collect();
    for w in transitions.windows(2) {
        if !(w[1] < w[0]) {
            return Err(TransmonError::InvalidParams(
                "transition frequencies not strictly decreasing; \
                 d_keep likely reaches past the Josephson well"
                    .into(),
            ));
        }
    }
    let anharmonicity = transitions[0] - transitions[1];
    Ok(Spectrum {
        energies,
        transitions,
        anharmonicity,
    })
}

/// Exact diagonalization of H = 4 E_C (n̂ − n_g)² − E_J cos φ̂ in the charge
/// basis of size 2·charge_cutoff + 1.
///
/// Returns the lowest `d_keep` levels (E_0 normalized to zero) and the
/// normalized coupling operator. Errors if the retained levels are not
/// converged with respect to the charge cutoff.
pub fn diagonalize<T: Real>(
    params: &TransmonParams<T>,
) -> Result<(Spectrum<T>, CouplingOperator<T>), TransmonError> {
    params.validate()?;
    let (energies, coupling) = lowest_levels(params, params.charge_cutoff)?;
    let (check, _) = lowest_levels(params, params.charge_cutoff + 5)?;
    let mut worst = T::zero();
    for (a, b) in energies.iter().zip(check.iter()) {
        let rel = (*a - *b).abs() / T::one().max(b.abs());
        worst = worst.max(rel);
    }
    if worst > T::of(CUTOFF_CONVERGENCE_TOL) {
        return Err(TransmonError::CutoffTooSmall {
            cutoff: params.charge_cutoff,
            change: worst.to64(),
        });
    }
    finish_diagonalize(params, energies, coupling)
}

/// Same as [`diagonalize`] but without the cutoff-convergence double solve;
/// used inside the calibration loop where the final result is re-validated.
pub(crate) fn diagonalize_unchecked<T: Real>(
    params: &TransmonParams<T>,
) -> Result<(Spectrum<T>, CouplingOperator<T>), TransmonError> {
    params.validate()?;
    let (energies, coupling) = lowest_levels(params, params.charge_cutoff)?;
    finish_diagonalize(params, energies, coupling)
}

fn finish_diagonalize<T: Real>(
    params: &TransmonParams<T>,
    energies: Vec<T>,
    mut coupling: Array2<T>,
) -> Result<(Spectrum<T>, CouplingOperator<T>), TransmonError> {
    let spectrum = spectrum_from_levels(energies)?;
    let g01 = coupling[[0, 1]];
    coupling.mapv_inplace(|g| g / g01);
    if params.n_g == T::zero() {
        for i in 0..params.d_keep {
            if coupling[[i, i]].abs() >= T::of(1e-9) {
                return Err(TransmonError::InvalidParams(format!(
                    "coupling diagonal element {i} nonzero at n_g = 0"
                )));
            }
        }
    }
    if !(coupling[[1, 2]].abs() > coupling[[0, 1]].abs()) {
        return Err(TransmonError::InvalidParams(
            "coupling ladder not enhanced on the 1-2 transition".into(),
        ));
    }
    Ok((spectrum, CouplingOperator { matrix: coupling }))
}

/// Initial (E_J, E_C) guess from the asymptotic transmon expansion
/// ω_1 ≈ √(8 E_J E_C) − E_C, ω_1 − ω_2 ≈ E_C.
fn asymptotic_guess<T: Real>(omega1: T, omega2: T) -> (T, T) {
    let e_c = omega1 - omega2;
    let s = omega1 + e_c; // ≈ √(8 E_J E_C)
    let e_j = s * s / (T::of(8.0) * e_c);
    (e_j, e_c)
}

/// Calibrate (E_J, E_C) so that exact diagonalization reproduces the two
/// target transition frequencies to better than 1 kHz.
///
/// Two-dimensional Newton iteration with a numerical Jacobian, started from
/// the asymptotic-expansion guess; fully deterministic.
pub fn fit_ej_ec<T: Real>(
    omega1_target: T,
    omega2_target: T,
    n_g: T,
    charge_cutoff: usize,
    d_keep: usize,
) -> Result<TransmonParams<T>, TransmonError> {
    if !(omega1_target > omega2_target) || !(omega2_target > T::zero()) {
        return Err(TransmonError::BadTargets(format!(
            "need omega1 > omega2 > 0, got ({omega1_target}, {omega2_target})"
        )));
    }
    let (mut e_j, mut e_c) = asymptotic_guess(omega1_target, omega2_target);
    // the iteration only needs the first two transitions; solving with
    // d_keep = 3 keeps intermediate iterates clear of the well-edge checks
    let residual = |e_j: T, e_c: T| -> Result<(T, T), TransmonError> {
        let p = TransmonParams {
            e_j,
            e_c,
            n_g,
            charge_cutoff,
            d_keep: 3,
        };
        let (spec, _) = diagonalize_unchecked(&p)?;
        Ok((
            spec.transition(1) - omega1_target,
            spec.transition(2) - omega2_target,
        ))
    };
    let tol = T::of(FIT_TOL_GHZ);
    for _ in 0..FIT_MAX_ITERS {
        let (f1, f2) = residual(e_j, e_c)?;
        if f1.abs() < tol && f2.abs() < tol {
            let params = TransmonParams {
                e_j,
                e_c,
                n_g,
                charge_cutoff,
                d_keep,
            };
            diagonalize(&params)?;
            return Ok(params);
        }
        let dj = e_j * T::of(1e-6);
        let dc = e_c * T::of(1e-6);
        let (f1j, f2j) = residual(e_j + dj, e_c)?;
        let (f1c, f2c) = residual(e_j, e_c + dc)?;
        let j11 = (f1j - f1) / dj;
        let j21 = (f2j - f2) / dj;
        let j12 = (f1c - f1) / dc;
        let j22 = (f2c - f2) / dc;
        let det = j11 * j22 - j12 * j21;
        if det.abs() < T::of(1e-300) {
            return Err(TransmonError::FitNoConvergence(FIT_MAX_ITERS));
        }
        let step_j = (f1 * j22 - f2 * j12) / det;
        let step_c = (f2 * j11 - f1 * j21) / det;
        e_j = e_j - step_j;
        e_c = e_c - step_c;
        if !(e_j > T::zero()) || !(e_c > T::zero()) {
            return Err(TransmonError::BadTargets(
                "iteration left the physical parameter region".into(),
            ));
        }
    }
    Err(TransmonError::FitNoConvergence(FIT_MAX_ITERS))
}

/// Device of the reference experiment: ω_1/2π = 4.685 GHz, ω_2/2π = 4.405 GHz.
pub fn reference_device<T: Real>() -> Result<TransmonParams<T>, TransmonError> {
    fit_ej_ec(T::of(4.685), T::of(4.405), T::zero(), 30, 7)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // independent oracle: asymptotic transmon expansion
    // E_i ≈ −E_J + √(8 E_J E_C) (i + 1/2) − (E_C/12)(6i² + 6i + 3)
    fn asymptotic_energy(e_j: f64, e_c: f64, i: usize) -> f64 {
        let i = i as f64;
        -e_j + (8.0 * e_j * e_c).sqrt() * (i + 0.5) - e_c / 12.0 * (6.0 * i * i + 6.0 * i + 3.0)
    }

    #[test]
    fn device_frequencies_reproduced() {
        let params = reference_device::<f64>().unwrap();
        let (spec, _) = diagonalize(&params).unwrap();
        assert!((spec.transition(1) - 4.685).abs() < 1e-6);
        assert!((spec.transition(2) - 4.405).abs() < 1e-6);
        assert_relative_eq!(spec.anharmonicity, 0.280, epsilon = 1e-6);
    }

    #[test]
    fn harmonic_limit_trend() {
        // e_j/e_c → ∞: anharmonicity → e_c, ladder approaches harmonic
        let e_c = 0.25_f64;
        let mut prev_gap = f64::INFINITY;
        for ratio in [20.0, 50.0, 100.0] {
            // shallow wells at low e_j/e_c hold few ladder levels
            let params = TransmonParams::new(ratio * e_c, e_c).with_levels(3, 30);
            let (spec, _) = diagonalize(&params).unwrap();
            let gap = (spec.anharmonicity - e_c).abs() / e_c;
            assert!(gap < prev_gap, "anharmonicity not approaching e_c");
            prev_gap = gap;
        }
    }

    #[test]
    fn asymptotic_agreement_improves_with_ratio() {
        let e_c = 0.25;
        let mut prev = f64::INFINITY;
        for ratio in [20.0, 50.0, 100.0] {
            let e_j = ratio * e_c;
            let params = TransmonParams::new(e_j, e_c).with_levels(4, 30);
            let (spec, _) = diagonalize(&params).unwrap();
            let mut worst: f64 = 0.0;
            for i in 1..4 {
                let exact = spec.energies[i];
                let approx = asymptotic_energy(e_j, e_c, i) - asymptotic_energy(e_j, e_c, 0);
                worst = worst.max(((exact - approx) / exact).abs());
            }
            assert!(worst < prev, "asymptotic deviation should shrink with e_j/e_c");
            prev = worst;
        }
    }

    #[test]
    fn fit_round_trip() {
        let truth = TransmonParams::new(12.0_f64, 0.26);
        let (spec, _) = diagonalize(&truth).unwrap();
        let fitted = fit_ej_ec(spec.transition(1), spec.transition(2), 0.0, 30, 7).unwrap();
        assert_relative_eq!(fitted.e_j, truth.e_j, max_relative = 1e-6);
        assert_relative_eq!(fitted.e_c, truth.e_c, max_relative = 1e-6);
    }

    #[test]
    fn fit_rejects_equal_targets() {
        assert!(matches!(
            fit_ej_ec(4.5_f64, 4.5, 0.0, 30, 7),
            Err(TransmonError::BadTargets(_))
        ));
    }

    #[test]
    fn coupling_normalization_and_symmetry() {
        let params = reference_device::<f64>().unwrap();
        let (_, coupling) = diagonalize(&params).unwrap();
        assert_eq!(coupling.element(0, 1), 1.0);
        let m = &coupling.matrix;
        for i in 0..7 {
            for j in 0..7 {
                assert!((m[[i, j]] - m[[j, i]]).abs() < 1e-12);
            }
            assert!(m[[i, i]].abs() < 1e-9);
        }
        assert!(coupling.element(1, 2) > 1.0);
        // parity selection at n_g = 0: even |i−j| elements vanish
        assert!(m[[0, 2]].abs() < 1e-9);
        assert!(m[[0, 3]].abs() > 1e-3);
    }

    #[test]
    fn cutoff_invariance() {
        let base = reference_device::<f64>().unwrap();
        let (spec_a, _) = diagonalize(&base).unwrap();
        let wider = TransmonParams {
            charge_cutoff: 45,
            ..base
        };
        let (spec_b, _) = diagonalize(&wider).unwrap();
        for (a, b) in spec_a.energies.iter().zip(spec_b.energies.iter()) {
            assert!((a - b).abs() < 1e-9, "energies moved with cutoff");
        }
    }

    #[test]
    fn rejects_non_transmon_regime() {
        let params = TransmonParams::new(0.5_f64, 1.0);
        assert!(matches!(
            diagonalize(&params),
            Err(TransmonError::InvalidParams(_))
        ));
    }

    #[test]
    fn rejects_small_cutoff_invariant() {
        let params = TransmonParams::new(12.0_f64, 0.25).with_levels(7, 15);
        assert!(diagonalize(&params).is_err());
    }

    #[test]
    fn serde_round_trip_with_renamed_keys() {
        let params = TransmonParams::new(12.0_f64, 0.25);
        let text = serde_json::to_string(&params).unwrap();
        assert!(text.contains("e_j_ghz"));
        let back: TransmonParams<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, params);
        // unknown keys rejected
        let bad = r#"{"e_j_ghz":12.0,"e_c_ghz":0.25,"n_g":0.0,"charge_cutoff":30,"d_keep":7,"typo":1}"#;
        assert!(serde_json::from_str::<TransmonParams<f64>>(bad).is_err());
    }
}
