//! Run configuration schema. All keys are validated before any numerics
//! run; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qudit_sensor::lookup::{GridSpec, SensingProtocol};
use qudit_sensor::real::ghz_to_rad;
use qudit_sensor::transmon::{self, TransmonParams};
use qudit_sensor::{GridSpec64, SensingProtocol64, TransmonParams64};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub transmon: TransmonBlock,
    #[serde(default)]
    pub ramsey: RamseyBlock,
    #[serde(default)]
    pub grid: Option<GridBlock>,
    #[serde(default)]
    pub field: Option<FieldBlock>,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub phase_scan: Option<PhaseScanBlock>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

/// Either explicit circuit parameters or the two transition frequencies to
/// calibrate them from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmonBlock {
    #[serde(default)]
    pub params: Option<TransmonParams64>,
    #[serde(default)]
    pub targets: Option<TransitionTargets>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionTargets {
    pub omega1_ghz: f64,
    pub omega2_ghz: f64,
    #[serde(default)]
    pub n_g: f64,
    #[serde(default = "default_cutoff")]
    pub charge_cutoff: usize,
    #[serde(default = "default_d_keep")]
    pub d_keep: usize,
}

fn default_cutoff() -> usize {
    30
}

fn default_d_keep() -> usize {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamseyBlock {
    pub delta_t_max_ns: f64,
    pub n_steps: usize,
    pub n_avg: u64,
    pub t_rep_us: f64,
    pub gate_amp_ghz: f64,
    /// Keep only co-rotating drive terms (the dressed-state model).
    #[serde(default = "default_true")]
    pub field_rwa: bool,
}

fn default_true() -> bool {
    true
}

impl Default for RamseyBlock {
    fn default() -> Self {
        Self {
            delta_t_max_ns: 800.0,
            n_steps: 80,
            n_avg: 3000,
            t_rep_us: 240.0,
            gate_amp_ghz: 0.030,
            field_rwa: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub amp_min_ghz: f64,
    pub amp_max_ghz: f64,
    pub n_amp: usize,
    pub freq_min_ghz: f64,
    pub freq_max_ghz: f64,
    pub n_freq: usize,
}

impl GridBlock {
    pub fn to_spec(&self) -> GridSpec64 {
        GridSpec {
            amp_min: ghz_to_rad(self.amp_min_ghz),
            amp_max: ghz_to_rad(self.amp_max_ghz),
            n_amp: self.n_amp,
            freq_min: ghz_to_rad(self.freq_min_ghz),
            freq_max: ghz_to_rad(self.freq_max_ghz),
            n_freq: self.n_freq,
        }
    }
}

/// Source amplitude: either the on-chip rate directly or a source power in
/// dBm with the calibration amplitude at 0 dBm (A ∝ √(10^{P/10})).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceAmplitude {
    #[serde(default)]
    pub amp_ghz: Option<f64>,
    #[serde(default)]
    pub power_dbm: Option<f64>,
    #[serde(default)]
    pub amp_at_0dbm_ghz: Option<f64>,
}

impl SourceAmplitude {
    pub fn resolve(&self) -> Result<f64> {
        match (self.amp_ghz, self.power_dbm, self.amp_at_0dbm_ghz) {
            (Some(a), None, None) => Ok(a),
            (None, Some(p), Some(a0)) => Ok(a0 * 10f64.powf(p / 10.0).sqrt()),
            _ => bail!(
                "field.source: give either amp_ghz, or power_dbm together with amp_at_0dbm_ghz"
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBlock {
    pub freq_ghz: f64,
    #[serde(flatten)]
    pub source: SourceAmplitude,
    /// Amplitude response between source and chip.
    #[serde(default)]
    pub transfer: TransferFunction,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum TransferFunction {
    #[default]
    Identity,
    Lorentzian {
        center_ghz: f64,
        fwhm_ghz: f64,
        /// Response far from the resonance, relative to the peak.
        floor: f64,
    },
}

impl TransferFunction {
    /// Amplitude multiplier at a given frequency.
    pub fn gain(&self, freq_ghz: f64) -> f64 {
        match self {
            TransferFunction::Identity => 1.0,
            TransferFunction::Lorentzian {
                center_ghz,
                fwhm_ghz,
                floor,
            } => {
                let hw = fwhm_ghz / 2.0;
                let lorentz = hw * hw / ((freq_ghz - center_ghz).powi(2) + hw * hw);
                floor + (1.0 - floor) * lorentz
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub freq_start_ghz: f64,
    pub freq_stop_ghz: f64,
    pub n_points: usize,
    #[serde(flatten)]
    pub source: SourceAmplitude,
    #[serde(default)]
    pub transfer: TransferFunction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseScanBlock {
    #[serde(default = "default_rabi_mhz")]
    pub rabi_mhz: f64,
    #[serde(default = "default_span_mhz")]
    pub span_mhz: f64,
    #[serde(default = "default_scan_points")]
    pub n_points: usize,
    /// Linear phase profile slope (rad per MHz of detuning).
    #[serde(default)]
    pub phase_slope_rad_per_mhz: f64,
}

fn default_rabi_mhz() -> f64 {
    30.0
}

fn default_span_mhz() -> f64 {
    25.0
}

fn default_scan_points() -> usize {
    21
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            bail!(
                "config format_version {} unsupported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            );
        }
        match (&self.transmon.params, &self.transmon.targets) {
            (Some(_), Some(_)) => bail!("transmon: give either params or targets, not both"),
            (None, None) => bail!("transmon: missing params or targets"),
            _ => {}
        }
        if let Some(t) = &self.transmon.targets {
            if !(t.omega1_ghz > 0.0) || !(t.omega2_ghz > 0.0) {
                bail!("transmon.targets: transition frequencies must be positive");
            }
        }
        let r = &self.ramsey;
        if !(r.delta_t_max_ns > 0.0) || !(r.t_rep_us > 0.0) || !(r.gate_amp_ghz > 0.0) {
            bail!("ramsey: delta_t_max_ns, t_rep_us and gate_amp_ghz must be positive");
        }
        if r.n_steps < 8 {
            bail!("ramsey.n_steps must be at least 8");
        }
        if r.n_avg == 0 {
            bail!("ramsey.n_avg must be at least 1");
        }
        if let Some(g) = &self.grid {
            if g.amp_min_ghz < 0.0 || g.n_amp == 0 || g.n_freq == 0 {
                bail!("grid: axes must be non-negative and non-empty");
            }
        }
        if let Some(f) = &self.field {
            if !(f.freq_ghz > 0.0) {
                bail!("field.freq_ghz must be positive");
            }
            f.source.resolve()?;
        }
        if let Some(s) = &self.sweep {
            if !(s.freq_stop_ghz > s.freq_start_ghz) || s.n_points < 2 {
                bail!("sweep: need freq_stop_ghz > freq_start_ghz and at least 2 points");
            }
            s.source.resolve()?;
        }
        if let Some(p) = &self.phase_scan {
            if !(p.rabi_mhz > 0.0) || !(p.span_mhz > 0.0) || p.n_points < 2 {
                bail!("phase_scan: rabi_mhz, span_mhz must be positive, n_points >= 2");
            }
            if p.span_mhz >= p.rabi_mhz {
                bail!(
                    "phase_scan.span_mhz must stay below rabi_mhz: \
                     detuned pulses need Ω_b² = Ω_a² − Δ_b² > 0"
                );
            }
        }
        Ok(())
    }

    /// Resolve the transmon parameters, calibrating from targets if needed.
    pub fn resolve_transmon(&self) -> Result<TransmonParams64> {
        if let Some(p) = &self.transmon.params {
            p.validate()?;
            return Ok(p.clone());
        }
        let t = self.transmon.targets.as_ref().expect("validated");
        let params = transmon::fit_ej_ec(
            t.omega1_ghz,
            t.omega2_ghz,
            t.n_g,
            t.charge_cutoff,
            t.d_keep,
        )?;
        Ok(params)
    }

    /// The sensing pipeline pinned by this config.
    pub fn protocol(&self, params: &TransmonParams<f64>) -> SensingProtocol64 {
        let mut protocol = SensingProtocol::new(params.clone());
        protocol.delta_t_max = self.ramsey.delta_t_max_ns;
        protocol.n_steps = self.ramsey.n_steps;
        protocol.gate_amp = ghz_to_rad(self.ramsey.gate_amp_ghz);
        protocol.field_rwa = self.ramsey.field_rwa;
        protocol
    }

    pub fn grid_spec(&self) -> GridSpec64 {
        self.grid
            .as_ref()
            .map(|g| g.to_spec())
            .unwrap_or_else(GridSpec::default_grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "format_version": 1,
            "transmon": {"targets": {"omega1_ghz": 4.685, "omega2_ghz": 4.405}},
        })
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_value(minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ramsey.n_steps, 80);
        assert_eq!(cfg.seed, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal_json();
        v["ramseyy"] = serde_json::json!({});
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
        // nested too
        let mut v = minimal_json();
        v["transmon"]["targets"]["omega3_ghz"] = serde_json::json!(4.0);
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("omega3_ghz"));
    }

    #[test]
    fn missing_target_reports_field() {
        let v = serde_json::json!({
            "format_version": 1,
            "transmon": {"targets": {"omega1_ghz": 4.685}},
        });
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("omega2_ghz"), "{err}");
    }

    #[test]
    fn source_amplitude_power_conversion() {
        let s = SourceAmplitude {
            amp_ghz: None,
            power_dbm: Some(6.0),
            amp_at_0dbm_ghz: Some(0.05),
        };
        let a = s.resolve().unwrap();
        // +6 dB in power is ~2x in power, √2 ≈ 1.9953^(1/2) in amplitude
        assert!((a - 0.05 * 10f64.powf(0.6).sqrt()).abs() < 1e-12);
        let bad = SourceAmplitude {
            amp_ghz: Some(0.1),
            power_dbm: Some(0.0),
            amp_at_0dbm_ghz: None,
        };
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn transfer_function_gains() {
        let t = TransferFunction::Identity;
        assert_eq!(t.gain(5.3), 1.0);
        let l = TransferFunction::Lorentzian {
            center_ghz: 5.25,
            fwhm_ghz: 0.2,
            floor: 0.2,
        };
        assert!((l.gain(5.25) - 1.0).abs() < 1e-12);
        assert!(l.gain(5.25) > l.gain(5.35));
        assert!(l.gain(8.0) > 0.19 && l.gain(8.0) < 0.21);
    }
}
