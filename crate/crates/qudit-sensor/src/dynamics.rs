//! Time-domain evolution of the qudit under gate pulses and the continuous
//! field tone, Ramsey sequence synthesis and binomial measurement noise.
//!
//! States are represented in the interaction picture of the bare qudit
//! (level-k amplitudes with the free phases e^{−iE_k t} removed), which
//! leaves level populations untouched and keeps the integrator free of the
//! fast diagonal. A drive tone contributes, per coupling element (i, j), a
//! pair of phasor terms at ±ω − ω_ji. With `field_rwa` (the default) only
//! the co-rotating ladder terms survive, matching the dressed-state model;
//! delay segments then become time-independent in the frame rotating at the
//! tone frequency and are propagated exactly. Everything else is integrated
//! with fixed-step RK4.

use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::RamseyTrace;
use crate::linalg::{self, LinalgError};
use crate::real::Real;
use crate::transmon::{CouplingOperator, Spectrum};

/// RK4 sampling density: steps per period of the fastest phasor kept.
const POINTS_PER_PERIOD: f64 = 64.0;
/// Norm (or trace) drift per evolution beyond which the step size is
/// declared divergent.
const NORM_DRIFT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid drive tone: {0}")]
    InvalidTone(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid dissipation spec: {0}")]
    InvalidDissipation(String),
    #[error("norm drift {0:e} exceeds tolerance; step size diverged")]
    StepSizeDivergence(f64),
    #[error("invalid frame request: {0}")]
    InvalidFrame(String),
    #[error("second-transition Ramsey requires the measured first-transition shift")]
    MissingShiftHint,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A microwave tone: amplitude and frequency as angular rates (rad/ns).
///
/// The amplitude multiplies the normalized coupling operator in the lab
/// Hamiltonian `A·(b̂+b̂†)·cos(ωt+φ)`, so it equals the resonant 0–1 Rabi
/// rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveTone<T> {
    pub amplitude: T,
    pub frequency: T,
    pub phase: T,
}

impl<T: Real> DriveTone<T> {
    pub fn new(amplitude: T, frequency: T) -> Self {
        Self {
            amplitude,
            frequency,
            phase: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.amplitude >= T::zero()) {
            return Err(DynamicsError::InvalidTone(
                "amplitude must be non-negative".into(),
            ));
        }
        if !(self.frequency > T::zero()) {
            return Err(DynamicsError::InvalidTone(
                "frequency must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One timed stretch of the pulse program: a duration with an optional gate
/// tone. The sequence's field tone stays on during every segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment<T> {
    pub duration: T,
    pub gate: Option<DriveTone<T>>,
}

/// A timed pulse program plus the always-on field tone under test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sequence<T> {
    pub segments: Vec<Segment<T>>,
    pub field: Option<DriveTone<T>>,
    pub measure_level: usize,
}

impl<T: Real> Sequence<T> {
    pub fn validate(&self, d_keep: usize) -> Result<(), DynamicsError> {
        if self.measure_level >= d_keep {
            return Err(DynamicsError::InvalidSequence(format!(
                "measurement level {} outside the {}-level qudit",
                self.measure_level, d_keep
            )));
        }
        for (k, seg) in self.segments.iter().enumerate() {
            if !(seg.duration > T::zero()) {
                return Err(DynamicsError::InvalidSequence(format!(
                    "segment {k} has non-positive duration"
                )));
            }
            if let Some(g) = &seg.gate {
                g.validate()?;
            }
        }
        if let Some(f) = &self.field {
            f.validate()?;
        }
        Ok(())
    }

    pub fn total_duration(&self) -> T {
        self.segments
            .iter()
            .fold(T::zero(), |acc, s| acc + s.duration)
    }
}

/// Optional per-level dissipation channels for Lindblad evolution.
///
/// `t1[k]` is the relaxation time of the k+1 → k transition; `t_phi[k]` the
/// pure-dephasing time of level k+1.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DissipationSpec<T> {
    pub t1: Option<Vec<T>>,
    pub t_phi: Option<Vec<T>>,
}

impl<T: Real> DissipationSpec<T> {
    pub fn validate(&self, d_keep: usize) -> Result<(), DynamicsError> {
        for (name, v) in [("t1", &self.t1), ("t_phi", &self.t_phi)] {
            if let Some(v) = v {
                if v.len() != d_keep - 1 {
                    return Err(DynamicsError::InvalidDissipation(format!(
                        "{name} must list {} channels",
                        d_keep - 1
                    )));
                }
                if v.iter().any(|t| !(*t > T::zero())) {
                    return Err(DynamicsError::InvalidDissipation(format!(
                        "{name} times must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.t1.is_none() && self.t_phi.is_none()
    }
}

/// Qudit state: a pure amplitude vector or a density matrix, in the
/// interaction picture of the bare qudit (populations are picture-free).
#[derive(Debug, Clone)]
pub enum QuditState<T> {
    Pure(Array1<Complex<T>>),
    Density(Array2<Complex<T>>),
}

impl<T: Real> QuditState<T> {
    pub fn ground(dim: usize) -> Self {
        Self::basis(dim, 0)
    }

    pub fn basis(dim: usize, level: usize) -> Self {
        let mut v = Array1::from_elem(dim, Complex::new(T::zero(), T::zero()));
        v[level] = Complex::new(T::one(), T::zero());
        QuditState::Pure(v)
    }

    pub fn dim(&self) -> usize {
        match self {
            QuditState::Pure(v) => v.len(),
            QuditState::Density(m) => m.nrows(),
        }
    }

    /// Level populations.
    pub fn populations(&self) -> Vec<T> {
        match self {
            QuditState::Pure(v) => v.iter().map(|a| a.norm_sqr()).collect(),
            QuditState::Density(m) => (0..m.nrows()).map(|i| m[[i, i]].re).collect(),
        }
    }

    /// Norm for pure states, trace for density matrices.
    pub fn norm(&self) -> T {
        match self {
            QuditState::Pure(v) => v.iter().map(|a| a.norm_sqr()).sum::<T>().sqrt(),
            QuditState::Density(m) => (0..m.nrows()).map(|i| m[[i, i]].re).sum(),
        }
    }

    pub fn to_density(&self) -> Array2<Complex<T>> {
        match self {
            QuditState::Pure(v) => {
                let d = v.len();
                let mut m = Array2::from_elem((d, d), Complex::new(T::zero(), T::zero()));
                for i in 0..d {
                    for j in 0..d {
                        m[[i, j]] = v[i] * v[j].conj();
                    }
                }
                m
            }
            QuditState::Density(m) => m.clone(),
        }
    }

    /// Check the state invariants: unit norm for pure states; unit trace,
    /// hermiticity and positive semidefiniteness for density matrices.
    pub fn validate(&self, tol: T) -> Result<(), DynamicsError> {
        match self {
            QuditState::Pure(_) => {
                let n = self.norm();
                if (n - T::one()).abs() > tol {
                    return Err(DynamicsError::InvalidState(format!(
                        "norm {n} deviates from 1"
                    )));
                }
            }
            QuditState::Density(m) => {
                let tr = self.norm();
                if (tr - T::one()).abs() > tol {
                    return Err(DynamicsError::InvalidState(format!(
                        "trace {tr} deviates from 1"
                    )));
                }
                let d = m.nrows();
                for i in 0..d {
                    for j in 0..d {
                        let diff = m[[i, j]] - m[[j, i]].conj();
                        if diff.norm() > tol {
                            return Err(DynamicsError::InvalidState(
                                "density matrix not Hermitian".into(),
                            ));
                        }
                    }
                }
                let eigs = hermitian_eigenvalues(m)?;
                if eigs.iter().any(|&l| l < -tol) {
                    return Err(DynamicsError::InvalidState(
                        "density matrix not positive semidefinite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn phase_rotate(&mut self, phases: &[T]) {
        match self {
            QuditState::Pure(v) => {
                for (a, &ph) in v.iter_mut().zip(phases) {
                    *a = *a * Complex::new(ph.cos(), ph.sin());
                }
            }
            QuditState::Density(m) => {
                let d = m.nrows();
                for i in 0..d {
                    for j in 0..d {
                        let ph = phases[i] - phases[j];
                        m[[i, j]] = m[[i, j]] * Complex::new(ph.cos(), ph.sin());
                    }
                }
            }
        }
    }
}

/// Eigenvalues of a complex Hermitian matrix via the real symmetric
/// embedding [[Re, −Im], [Im, Re]] (each eigenvalue appears twice).
fn hermitian_eigenvalues<T: Real>(m: &Array2<Complex<T>>) -> Result<Vec<T>, LinalgError> {
    let d = m.nrows();
    let mut e = Array2::<T>::zeros((2 * d, 2 * d));
    for i in 0..d {
        for j in 0..d {
            e[[i, j]] = m[[i, j]].re;
            e[[i + d, j + d]] = m[[i, j]].re;
            e[[i, j + d]] = -m[[i, j]].im;
            e[[i + d, j]] = m[[i, j]].im;
        }
    }
    let (vals, _) = linalg::eigh(&e)?;
    Ok(vals.iter().copied().step_by(2).collect())
}

/// Diagonalized transmon packaged for the dynamics: eigenenergies as
/// angular rates (rad/ns, E_0 = 0) plus the normalized coupling matrix.
#[derive(Debug, Clone)]
pub struct QuditOperators<T> {
    pub energies: Vec<T>,
    pub coupling: Array2<T>,
}

impl<T: Real> QuditOperators<T> {
    pub fn new(spectrum: &Spectrum<T>, coupling: &CouplingOperator<T>) -> Self {
        Self {
            energies: spectrum.energies.iter().map(|&e| T::TAU() * e).collect(),
            coupling: coupling.matrix.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Bare transition ω_i = E_i − E_{i−1} in rad/ns; `i` is 1-based.
    pub fn transition(&self, i: usize) -> T {
        self.energies[i] - self.energies[i - 1]
    }
}

/// Evolution frame. `Auto` is the accurate default; the alternatives exist
/// to cross-check frame invariance and force brute-force integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frame<T> {
    /// Interaction picture with exact propagation of static stretches.
    Auto,
    /// Brute-force lab-frame integration; requires `field_rwa = false`.
    Lab,
    /// Brute-force integration in the frame rotating at k·ω_ref per level.
    Rotating(T),
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions<T> {
    /// Keep only co-rotating ladder terms (drops counter-rotating parts and
    /// far-off-diagonal coupling elements). Matches the dressed-state model.
    pub field_rwa: bool,
    pub frame: Frame<T>,
    /// Override the automatic RK4 step (ns).
    pub dt_override: Option<T>,
}

impl<T: Real> Default for EvolveOptions<T> {
    fn default() -> Self {
        Self {
            field_rwa: true,
            frame: Frame::Auto,
            dt_override: None,
        }
    }
}

impl<T: Real> EvolveOptions<T> {
    /// Full cos-drive on every coupling element, no rotating-wave dropping.
    pub fn exact() -> Self {
        Self {
            field_rwa: false,
            ..Self::default()
        }
    }

    pub fn lab_exact() -> Self {
        Self {
            field_rwa: false,
            frame: Frame::Lab,
            dt_override: None,
        }
    }
}

/// One off-diagonal phasor term: H[i,j] += amp·e^{i(freq·t + phase)} with
/// H[j,i] the conjugate, i < j.
#[derive(Debug, Clone, Copy)]
struct PhasorTerm<T> {
    i: usize,
    j: usize,
    amp: T,
    freq: T,
    phase: T,
}

/// Per-segment Hamiltonian: a static diagonal plus off-diagonal phasors,
/// valid in whichever picture built it.
struct SegmentHamiltonian<T> {
    dim: usize,
    diag: Vec<T>,
    terms: Vec<PhasorTerm<T>>,
}

impl<T: Real> SegmentHamiltonian<T> {
    /// Interaction picture: no diagonal; per tone and coupling element
    /// (i, j) the phasors at ±ω − ω_ji. With `rwa`, only the co-rotating
    /// ladder terms are kept.
    fn interaction(ops: &QuditOperators<T>, tones: &[DriveTone<T>], rwa: bool) -> Self {
        let dim = ops.dim();
        let half = T::of(0.5);
        let mut terms = Vec::new();
        for tone in tones {
            if tone.amplitude == T::zero() {
                continue;
            }
            if rwa {
                for i in 0..dim - 1 {
                    let g = ops.coupling[[i, i + 1]];
                    if g == T::zero() {
                        continue;
                    }
                    terms.push(PhasorTerm {
                        i,
                        j: i + 1,
                        amp: half * tone.amplitude * g,
                        freq: tone.frequency - ops.transition(i + 1),
                        phase: tone.phase,
                    });
                }
            } else {
                for i in 0..dim {
                    for j in (i + 1)..dim {
                        let g = ops.coupling[[i, j]];
                        if g == T::zero() {
                            continue;
                        }
                        let w_ji = ops.energies[j] - ops.energies[i];
                        let amp = half * tone.amplitude * g;
                        terms.push(PhasorTerm {
                            i,
                            j,
                            amp,
                            freq: tone.frequency - w_ji,
                            phase: tone.phase,
                        });
                        terms.push(PhasorTerm {
                            i,
                            j,
                            amp,
                            freq: -tone.frequency - w_ji,
                            phase: -tone.phase,
                        });
                    }
                }
            }
        }
        Self {
            dim,
            diag: vec![T::zero(); dim],
            terms,
        }
    }

    /// Frame rotating at k·w per level: diagonal E_k − k·w plus drive
    /// phasors shifted by the frame.
    fn rotating(ops: &QuditOperators<T>, w: T, tones: &[DriveTone<T>], rwa: bool) -> Self {
        let dim = ops.dim();
        let half = T::of(0.5);
        let diag: Vec<T> = ops
            .energies
            .iter()
            .enumerate()
            .map(|(k, &e)| e - T::from_usize(k).unwrap() * w)
            .collect();
        let mut terms = Vec::new();
        for tone in tones {
            if tone.amplitude == T::zero() {
                continue;
            }
            if rwa {
                for i in 0..dim - 1 {
                    let g = ops.coupling[[i, i + 1]];
                    if g == T::zero() {
                        continue;
                    }
                    terms.push(PhasorTerm {
                        i,
                        j: i + 1,
                        amp: half * tone.amplitude * g,
                        freq: tone.frequency - w,
                        phase: tone.phase,
                    });
                }
            } else {
                for i in 0..dim {
                    for j in (i + 1)..dim {
                        let g = ops.coupling[[i, j]];
                        if g == T::zero() {
                            continue;
                        }
                        let frame = -T::from_usize(j - i).unwrap() * w;
                        let amp = half * tone.amplitude * g;
                        terms.push(PhasorTerm {
                            i,
                            j,
                            amp,
                            freq: tone.frequency + frame,
                            phase: tone.phase,
                        });
                        terms.push(PhasorTerm {
                            i,
                            j,
                            amp,
                            freq: -tone.frequency + frame,
                            phase: -tone.phase,
                        });
                    }
                }
            }
        }
        Self { dim, diag, terms }
    }

    /// Lab frame: bare diagonal, full cos drive.
    fn lab(ops: &QuditOperators<T>, tones: &[DriveTone<T>]) -> Self {
        Self::rotating(ops, T::zero(), tones, false)
    }

    fn is_static(&self) -> bool {
        self.terms.iter().all(|t| t.freq == T::zero())
    }

    /// Real symmetric form of a static Hamiltonian, when all phases vanish.
    fn static_real_matrix(&self) -> Option<Array2<T>> {
        if !self.is_static() || self.terms.iter().any(|t| t.phase != T::zero()) {
            return None;
        }
        let mut h = Array2::<T>::zeros((self.dim, self.dim));
        for (k, &d) in self.diag.iter().enumerate() {
            h[[k, k]] = d;
        }
        for t in &self.terms {
            h[[t.i, t.j]] = h[[t.i, t.j]] + t.amp;
            h[[t.j, t.i]] = h[[t.j, t.i]] + t.amp;
        }
        Some(h)
    }

    /// Angular rate that the RK4 step must resolve.
    fn max_angular_rate(&self) -> T {
        let mut w = T::of(1e-6);
        for d in &self.diag {
            w = w.max(d.abs());
        }
        for t in &self.terms {
            w = w.max(t.freq.abs()).max(t.amp);
        }
        w
    }

    fn fill(&self, t: T, h: &mut Array2<Complex<T>>) {
        h.fill(Complex::new(T::zero(), T::zero()));
        for (k, &d) in self.diag.iter().enumerate() {
            h[[k, k]] = Complex::new(d, T::zero());
        }
        for term in &self.terms {
            let arg = term.freq * t + term.phase;
            let v = Complex::new(arg.cos(), arg.sin()) * term.amp;
            h[[term.i, term.j]] = h[[term.i, term.j]] + v;
            h[[term.j, term.i]] = h[[term.j, term.i]] + v.conj();
        }
    }
}

fn pick_dt<T: Real>(seg: &SegmentHamiltonian<T>, duration: T, opts: &EvolveOptions<T>) -> T {
    if let Some(dt) = opts.dt_override {
        return dt.min(duration);
    }
    let w_max = seg.max_angular_rate();
    let dt = T::TAU() / (T::of(POINTS_PER_PERIOD) * w_max);
    dt.min(duration / T::of(8.0))
}

struct Rk4Buffers<T> {
    k1: Array1<Complex<T>>,
    k2: Array1<Complex<T>>,
    k3: Array1<Complex<T>>,
    k4: Array1<Complex<T>>,
    tmp: Array1<Complex<T>>,
    h_a: Array2<Complex<T>>,
    h_mid: Array2<Complex<T>>,
    h_b: Array2<Complex<T>>,
}

impl<T: Real> Rk4Buffers<T> {
    fn new(dim: usize) -> Self {
        let z = Complex::new(T::zero(), T::zero());
        Self {
            k1: Array1::from_elem(dim, z),
            k2: Array1::from_elem(dim, z),
            k3: Array1::from_elem(dim, z),
            k4: Array1::from_elem(dim, z),
            tmp: Array1::from_elem(dim, z),
            h_a: Array2::from_elem((dim, dim), z),
            h_mid: Array2::from_elem((dim, dim), z),
            h_b: Array2::from_elem((dim, dim), z),
        }
    }
}

/// out ← −i H ψ
fn schrodinger_rhs<T: Real>(
    h: &Array2<Complex<T>>,
    psi: &Array1<Complex<T>>,
    out: &mut Array1<Complex<T>>,
) {
    let d = psi.len();
    for i in 0..d {
        let mut acc = Complex::new(T::zero(), T::zero());
        for j in 0..d {
            acc = acc + h[[i, j]] * psi[j];
        }
        out[i] = Complex::new(acc.im, -acc.re);
    }
}

fn rk4_pure_segment<T: Real>(
    psi: &mut Array1<Complex<T>>,
    seg: &SegmentHamiltonian<T>,
    t_start: T,
    duration: T,
    dt: T,
    buf: &mut Rk4Buffers<T>,
    mut observer: Option<&mut dyn FnMut(T, &Array1<Complex<T>>)>,
) {
    let d = psi.len();
    let n_steps = (duration / dt).ceil().to64().max(1.0) as usize;
    let dt = duration / T::from_usize(n_steps).unwrap();
    let half = T::of(0.5);
    let sixth = T::of(1.0 / 6.0);
    let two = T::of(2.0);
    seg.fill(t_start, &mut buf.h_a);
    let mut t = t_start;
    for _ in 0..n_steps {
        seg.fill(t + half * dt, &mut buf.h_mid);
        seg.fill(t + dt, &mut buf.h_b);
        schrodinger_rhs(&buf.h_a, psi, &mut buf.k1);
        for i in 0..d {
            buf.tmp[i] = psi[i] + buf.k1[i] * (half * dt);
        }
        schrodinger_rhs(&buf.h_mid, &buf.tmp, &mut buf.k2);
        for i in 0..d {
            buf.tmp[i] = psi[i] + buf.k2[i] * (half * dt);
        }
        schrodinger_rhs(&buf.h_mid, &buf.tmp, &mut buf.k3);
        for i in 0..d {
            buf.tmp[i] = psi[i] + buf.k3[i] * dt;
        }
        schrodinger_rhs(&buf.h_b, &buf.tmp, &mut buf.k4);
        for i in 0..d {
            psi[i] =
                psi[i] + (buf.k1[i] + (buf.k2[i] + buf.k3[i]) * two + buf.k4[i]) * (dt * sixth);
        }
        std::mem::swap(&mut buf.h_a, &mut buf.h_b);
        t = t + dt;
        if let Some(obs) = observer.as_deref_mut() {
            obs(t, psi);
        }
    }
}

/// Exact propagation under a static real-symmetric Hamiltonian:
/// ψ ← V e^{−iΛτ} Vᵀ ψ.
fn propagate_static_pure<T: Real>(
    psi: &mut Array1<Complex<T>>,
    evals: &Array1<T>,
    evecs: &Array2<T>,
    tau: T,
) {
    let d = psi.len();
    let mut coeff = vec![Complex::new(T::zero(), T::zero()); d];
    for k in 0..d {
        let mut acc = Complex::new(T::zero(), T::zero());
        for i in 0..d {
            acc = acc + psi[i] * evecs[[i, k]];
        }
        let arg = -evals[k] * tau;
        coeff[k] = acc * Complex::new(arg.cos(), arg.sin());
    }
    for i in 0..d {
        let mut acc = Complex::new(T::zero(), T::zero());
        for k in 0..d {
            acc = acc + coeff[k] * evecs[[i, k]];
        }
        psi[i] = acc;
    }
}

struct LindbladChannels<T> {
    /// relaxation rates 1/T1 for k+1 → k
    relax: Vec<T>,
    /// pure-dephasing rates 2/Tφ for level k+1
    dephase: Vec<T>,
}

impl<T: Real> LindbladChannels<T> {
    fn new(spec: &DissipationSpec<T>, dim: usize) -> Self {
        let relax = match &spec.t1 {
            Some(v) => v.iter().map(|&t| T::one() / t).collect(),
            None => vec![T::zero(); dim - 1],
        };
        let dephase = match &spec.t_phi {
            Some(v) => v.iter().map(|&t| T::of(2.0) / t).collect(),
            None => vec![T::zero(); dim - 1],
        };
        Self { relax, dephase }
    }

    /// out += Σ_k γ_k (L ρ L† − ½{L†L, ρ}); the ladder and projector
    /// collapse operators are invariant under interaction-picture phases.
    fn apply(&self, rho: &Array2<Complex<T>>, out: &mut Array2<Complex<T>>) {
        let d = rho.nrows();
        let half = T::of(0.5);
        for k in 1..d {
            let g = self.relax[k - 1];
            if g > T::zero() {
                out[[k - 1, k - 1]] = out[[k - 1, k - 1]] + rho[[k, k]] * g;
                for j in 0..d {
                    out[[k, j]] = out[[k, j]] - rho[[k, j]] * (g * half);
                    out[[j, k]] = out[[j, k]] - rho[[j, k]] * (g * half);
                }
                // the anticommutator halves double-counted the (k,k) term
                out[[k, k]] = out[[k, k]] + rho[[k, k]] * (g * half) - rho[[k, k]] * (g * half);
            }
            let gp = self.dephase[k - 1];
            if gp > T::zero() {
                for j in 0..d {
                    if j != k {
                        out[[k, j]] = out[[k, j]] - rho[[k, j]] * (gp * half);
                        out[[j, k]] = out[[j, k]] - rho[[j, k]] * (gp * half);
                    }
                }
            }
        }
    }
}

fn lindblad_rhs<T: Real>(
    h: &Array2<Complex<T>>,
    rho: &Array2<Complex<T>>,
    channels: Option<&LindbladChannels<T>>,
    out: &mut Array2<Complex<T>>,
) {
    let d = rho.nrows();
    // −i[H, ρ]
    for i in 0..d {
        for j in 0..d {
            let mut acc = Complex::new(T::zero(), T::zero());
            for k in 0..d {
                acc = acc + h[[i, k]] * rho[[k, j]] - rho[[i, k]] * h[[k, j]];
            }
            out[[i, j]] = Complex::new(acc.im, -acc.re);
        }
    }
    if let Some(ch) = channels {
        ch.apply(rho, out);
    }
}

fn rk4_density_segment<T: Real>(
    rho: &mut Array2<Complex<T>>,
    seg: &SegmentHamiltonian<T>,
    channels: Option<&LindbladChannels<T>>,
    t_start: T,
    duration: T,
    dt: T,
) {
    let d = rho.nrows();
    let z = Complex::new(T::zero(), T::zero());
    let n_steps = (duration / dt).ceil().to64().max(1.0) as usize;
    let dt = duration / T::from_usize(n_steps).unwrap();
    let half = T::of(0.5);
    let sixth = T::of(1.0 / 6.0);
    let two = T::of(2.0);
    let mut k1 = Array2::from_elem((d, d), z);
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    let mut h_a = k1.clone();
    let mut h_mid = k1.clone();
    let mut h_b = k1.clone();
    seg.fill(t_start, &mut h_a);
    let mut t = t_start;
    for _ in 0..n_steps {
        seg.fill(t + half * dt, &mut h_mid);
        seg.fill(t + dt, &mut h_b);
        lindblad_rhs(&h_a, rho, channels, &mut k1);
        for i in 0..d {
            for j in 0..d {
                tmp[[i, j]] = rho[[i, j]] + k1[[i, j]] * (half * dt);
            }
        }
        lindblad_rhs(&h_mid, &tmp, channels, &mut k2);
        for i in 0..d {
            for j in 0..d {
                tmp[[i, j]] = rho[[i, j]] + k2[[i, j]] * (half * dt);
            }
        }
        lindblad_rhs(&h_mid, &tmp, channels, &mut k3);
        for i in 0..d {
            for j in 0..d {
                tmp[[i, j]] = rho[[i, j]] + k3[[i, j]] * dt;
            }
        }
        lindblad_rhs(&h_b, &tmp, channels, &mut k4);
        for i in 0..d {
            for j in 0..d {
                rho[[i, j]] = rho[[i, j]]
                    + (k1[[i, j]] + (k2[[i, j]] + k3[[i, j]]) * two + k4[[i, j]]) * (dt * sixth);
            }
        }
        std::mem::swap(&mut h_a, &mut h_b);
        t = t + dt;
    }
}

fn active_tones<T: Real>(seq: &Sequence<T>, segment: &Segment<T>) -> Vec<DriveTone<T>> {
    seq.field
        .iter()
        .chain(segment.gate.iter())
        .copied()
        .collect()
}

/// Phases converting an interaction-picture state into the frame rotating
/// at k·w per level: ψ_rot = diag(e^{i(k·w − E_k)t}) ψ_int.
fn int_to_rot_phases<T: Real>(ops: &QuditOperators<T>, w: T, t: T) -> Vec<T> {
    ops.energies
        .iter()
        .enumerate()
        .map(|(k, &e)| (T::from_usize(k).unwrap() * w - e) * t)
        .collect()
}

/// Integrate the Schrödinger equation (or the Lindblad master equation when
/// a dissipation spec is given) over a pulse sequence, starting at absolute
/// time `t_start`.
///
/// In the default frame, stretches whose active tones share a single
/// frequency (RWA mode) are propagated exactly in the frame rotating at
/// that frequency; everything else is integrated with fixed-step RK4 in the
/// interaction picture. Deterministic for fixed inputs.
pub fn evolve_from<T: Real>(
    state: &QuditState<T>,
    seq: &Sequence<T>,
    ops: &QuditOperators<T>,
    dissipation: Option<&DissipationSpec<T>>,
    opts: &EvolveOptions<T>,
    t_start: T,
    mut observer: Option<&mut dyn FnMut(T, &QuditState<T>)>,
) -> Result<QuditState<T>, DynamicsError> {
    seq.validate(ops.dim())?;
    if let Some(d) = dissipation {
        d.validate(ops.dim())?;
    }
    if matches!(opts.frame, Frame::Lab) && opts.field_rwa {
        return Err(DynamicsError::InvalidFrame(
            "lab-frame evolution requires field_rwa = false".into(),
        ));
    }
    let dim = ops.dim();
    if state.dim() != dim {
        return Err(DynamicsError::InvalidState(format!(
            "state dimension {} does not match the {dim}-level qudit",
            state.dim()
        )));
    }
    let use_density = dissipation.map(|d| !d.is_empty()).unwrap_or(false)
        || matches!(state, QuditState::Density(_));
    let channels = dissipation.map(|d| LindbladChannels::new(d, dim));
    let norm0 = state.norm();
    let mut t = t_start;
    let mut current = state.clone();
    let mut buf = Rk4Buffers::new(dim);

    for segment in &seq.segments {
        let tones = active_tones(seq, segment);
        // exact propagation for single-frequency stretches in RWA mode
        let single_freq = tones
            .windows(2)
            .all(|w| w[0].frequency == w[1].frequency);
        let static_candidate = opts.field_rwa
            && matches!(opts.frame, Frame::Auto)
            && single_freq
            && !use_density;
        if static_candidate {
            let w_rot = tones
                .first()
                .map(|tone| tone.frequency)
                .unwrap_or(T::zero());
            let seg_h = SegmentHamiltonian::rotating(ops, w_rot, &tones, true);
            if let Some(h_static) = seg_h.static_real_matrix() {
                let (evals, evecs) = linalg::eigh(&h_static)?;
                let phases_in = int_to_rot_phases(ops, w_rot, t);
                current.phase_rotate(&phases_in);
                if let QuditState::Pure(psi) = &mut current {
                    propagate_static_pure(psi, &evals, &evecs, segment.duration);
                }
                t = t + segment.duration;
                let phases_out: Vec<T> = int_to_rot_phases(ops, w_rot, t)
                    .into_iter()
                    .map(|p| -p)
                    .collect();
                current.phase_rotate(&phases_out);
                if let Some(obs) = observer.as_deref_mut() {
                    obs(t, &current);
                }
                continue;
            }
        }
        // general RK4 path in the requested picture
        let seg_h = match opts.frame {
            Frame::Auto => SegmentHamiltonian::interaction(ops, &tones, opts.field_rwa),
            Frame::Lab => SegmentHamiltonian::lab(ops, &tones),
            Frame::Rotating(w) => SegmentHamiltonian::rotating(ops, w, &tones, opts.field_rwa),
        };
        // boundary conversion between the interaction picture and the
        // integration picture
        let boundary_phases = |ops: &QuditOperators<T>, tt: T| -> Option<Vec<T>> {
            match opts.frame {
                Frame::Auto => None,
                Frame::Lab => Some(int_to_rot_phases(ops, T::zero(), tt)),
                Frame::Rotating(w) => Some(int_to_rot_phases(ops, w, tt)),
            }
        };
        if let Some(ph) = boundary_phases(ops, t) {
            current.phase_rotate(&ph);
        }
        let dt = pick_dt(&seg_h, segment.duration, opts);
        match &mut current {
            QuditState::Pure(psi) if !use_density => {
                let mut wrapped = observer.as_deref_mut().map(|obs| {
                    move |tt: T, p: &Array1<Complex<T>>| obs(tt, &QuditState::Pure(p.clone()))
                });
                let obs_dyn: Option<&mut dyn FnMut(T, &Array1<Complex<T>>)> = match &mut wrapped {
                    Some(f) => Some(f),
                    None => None,
                };
                rk4_pure_segment(psi, &seg_h, t, segment.duration, dt, &mut buf, obs_dyn);
            }
            _ => {
                let mut rho = current.to_density();
                rk4_density_segment(
                    &mut rho,
                    &seg_h,
                    channels.as_ref(),
                    t,
                    segment.duration,
                    dt,
                );
                current = QuditState::Density(rho);
            }
        }
        t = t + segment.duration;
        if let Some(ph) = boundary_phases(ops, t) {
            let neg: Vec<T> = ph.into_iter().map(|p| -p).collect();
            current.phase_rotate(&neg);
        }
    }

    let drift = (current.norm() - norm0).abs().to64();
    let dissipative = dissipation.map(|d| !d.is_empty()).unwrap_or(false);
    if !dissipative && drift > NORM_DRIFT_TOL {
        return Err(DynamicsError::StepSizeDivergence(drift));
    }
    Ok(current)
}

/// [`evolve_from`] starting at t = 0 without an observer.
pub fn evolve<T: Real>(
    state: &QuditState<T>,
    seq: &Sequence<T>,
    ops: &QuditOperators<T>,
    dissipation: Option<&DissipationSpec<T>>,
    opts: &EvolveOptions<T>,
) -> Result<QuditState<T>, DynamicsError> {
    evolve_from(state, seq, ops, dissipation, opts, T::zero(), None)
}

/// Which qudit transition a Ramsey experiment addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionIndex {
    First,
    Second,
}

impl TransitionIndex {
    pub fn as_u8(self) -> u8 {
        match self {
            TransitionIndex::First => 1,
            TransitionIndex::Second => 2,
        }
    }
}

/// Ramsey experiment parameters: delay grid and the gate tone driving the
/// addressed transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyConfig<T> {
    /// Largest delay between the π/2 pulses (ns).
    pub delta_t_max: T,
    /// Number of equally spaced delays in [0, delta_t_max].
    pub n_steps: usize,
    /// Gate frequency for the addressed transition (rad/ns).
    pub gate_freq: T,
    /// Gate amplitude A_G (rad/ns).
    pub gate_amp: T,
}

impl<T: Real> RamseyConfig<T> {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.delta_t_max > T::zero()) || self.n_steps < 8 {
            return Err(DynamicsError::InvalidSequence(
                "Ramsey grid needs delta_t_max > 0 and at least 8 steps".into(),
            ));
        }
        if !(self.gate_amp > T::zero()) || !(self.gate_freq > T::zero()) {
            return Err(DynamicsError::InvalidSequence(
                "Ramsey gate tone must have positive amplitude and frequency".into(),
            ));
        }
        Ok(())
    }
}

/// Duration of a π/2 pulse driving ladder pair (i, i+1) with amplitude
/// `gate_amp`: the rotation angle A·|g|·t reaches π/2.
pub fn half_pi_duration<T: Real>(gate_amp: T, g: T) -> T {
    T::PI() / (T::of(2.0) * gate_amp * g.abs())
}

fn gate_segment<T: Real>(duration: T, freq: T, amp: T) -> Segment<T> {
    Segment {
        duration,
        gate: Some(DriveTone::new(amp, freq)),
    }
}

/// Simulate Ramsey fringes of the first or second qudit transition in the
/// presence of an optional field tone.
///
/// Transition 1 runs π/2 – delay – π/2 on the 0–1 gate and records the |1⟩
/// population. Transition 2 runs π(0–1, shifted) – π/2(1–2) – delay –
/// π/2(1–2) – π(0–1, shifted) and records |2⟩; the preparing and restoring
/// π pulses are applied at ω̃₁ = ω₁ − Δ₁, so the measured first-transition
/// shift must be passed as `shift_hint`.
pub fn ramsey_trace<T: Real>(
    transition: TransitionIndex,
    field: Option<DriveTone<T>>,
    cfg: &RamseyConfig<T>,
    shift_hint: Option<T>,
    ops: &QuditOperators<T>,
    dissipation: Option<&DissipationSpec<T>>,
    opts: &EvolveOptions<T>,
) -> Result<RamseyTrace<T>, DynamicsError> {
    cfg.validate()?;
    if let Some(f) = &field {
        f.validate()?;
    }
    let dim = ops.dim();
    let (prep, close, measure_level) = match transition {
        TransitionIndex::First => {
            let t_half = half_pi_duration(cfg.gate_amp, ops.coupling[[0, 1]]);
            let p = vec![gate_segment(t_half, cfg.gate_freq, cfg.gate_amp)];
            let c = vec![gate_segment(t_half, cfg.gate_freq, cfg.gate_amp)];
            (p, c, 1)
        }
        TransitionIndex::Second => {
            let delta1 = shift_hint.ok_or(DynamicsError::MissingShiftHint)?;
            let shifted = ops.transition(1) - delta1;
            if !(shifted > T::zero()) {
                return Err(DynamicsError::InvalidSequence(
                    "shifted 0-1 frequency not positive".into(),
                ));
            }
            let t_pi = T::of(2.0) * half_pi_duration(cfg.gate_amp, ops.coupling[[0, 1]]);
            let t_half12 = half_pi_duration(cfg.gate_amp, ops.coupling[[1, 2]]);
            let p = vec![
                gate_segment(t_pi, shifted, cfg.gate_amp),
                gate_segment(t_half12, cfg.gate_freq, cfg.gate_amp),
            ];
            let c = vec![
                gate_segment(t_half12, cfg.gate_freq, cfg.gate_amp),
                gate_segment(t_pi, shifted, cfg.gate_amp),
            ];
            (p, c, 2)
        }
    };
    let prep_duration: T = prep.iter().fold(T::zero(), |a, s| a + s.duration);

    let delays: Vec<T> = (0..cfg.n_steps)
        .map(|k| {
            cfg.delta_t_max * T::from_usize(k).unwrap() / T::from_usize(cfg.n_steps - 1).unwrap()
        })
        .collect();

    let dissipative = dissipation.map(|d| !d.is_empty()).unwrap_or(false);
    let mut populations = Vec::with_capacity(cfg.n_steps);

    if dissipative {
        // density path: one full evolution per delay point
        for &tau in &delays {
            let mut segments = prep.clone();
            if tau > T::zero() {
                segments.push(Segment {
                    duration: tau,
                    gate: None,
                });
            }
            segments.extend(close.iter().cloned());
            let seq = Sequence {
                segments,
                field,
                measure_level,
            };
            let fin = evolve(&QuditState::ground(dim), &seq, ops, dissipation, opts)?;
            populations.push(fin.populations()[measure_level]);
        }
    } else {
        // prepare once, then per delay: free stretch plus closing pulses
        let prep_seq = Sequence {
            segments: prep.clone(),
            field,
            measure_level,
        };
        let prepared = evolve(&QuditState::ground(dim), &prep_seq, ops, None, opts)?;
        for &tau in &delays {
            let mut segments = Vec::with_capacity(close.len() + 1);
            if tau > T::zero() {
                segments.push(Segment {
                    duration: tau,
                    gate: None,
                });
            }
            segments.extend(close.iter().cloned());
            let seq = Sequence {
                segments,
                field,
                measure_level,
            };
            let fin = evolve_from(&prepared, &seq, ops, None, opts, prep_duration, None)?;
            populations.push(fin.populations()[measure_level]);
        }
    }

    Ok(RamseyTrace {
        delays,
        populations,
        n_avg: None,
    })
}

/// Replace every population by the mean of `n_avg` Bernoulli draws, the
/// binomial shot-noise model of single-shot readout averaging.
///
/// The generator is counter-based: each point is drawn from a stream seeded
/// by (seed, point index), so traces are reproducible regardless of
/// evaluation order.
pub fn add_measurement_noise<T: Real>(
    trace: &RamseyTrace<T>,
    n_avg: u64,
    seed: u64,
) -> Result<RamseyTrace<T>, DynamicsError> {
    if n_avg == 0 {
        return Err(DynamicsError::InvalidSequence(
            "n_avg must be at least 1".into(),
        ));
    }
    let mut populations = Vec::with_capacity(trace.populations.len());
    for (idx, &p) in trace.populations.iter().enumerate() {
        let p64 = p.to64();
        if !(-1e-9..=1.0 + 1e-9).contains(&p64) {
            return Err(DynamicsError::InvalidState(format!(
                "population {p64} at point {idx} outside [0, 1]"
            )));
        }
        let p64 = p64.clamp(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, idx as u64));
        let k = Binomial::new(n_avg, p64)
            .expect("binomial parameters validated")
            .sample(&mut rng);
        populations.push(T::of(k as f64 / n_avg as f64));
    }
    Ok(RamseyTrace {
        delays: trace.delays.clone(),
        populations,
        n_avg: Some(n_avg),
    })
}

/// Derive an independent deterministic seed for a numbered noise stream
/// (per sweep point, per trace), so parallel evaluation order cannot
/// change any draw.
pub fn derive_stream_seed(seed: u64, stream: u64) -> u64 {
    mix_seed(seed, stream)
}

/// splitmix64-style mixing of (seed, counter) into one RNG seed.
fn mix_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
