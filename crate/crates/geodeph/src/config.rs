//! Run configuration: JSON schema, presets, validation, unit conversion.
//!
//! Field names carry explicit units (`delta_mhz`, `t_ns`, `dt_ps`) so a config
//! file reads unambiguously; accessors convert to SI the rest of the crate
//! uses. Defaults reproduce the reference setup: Δ/2π = −35 MHz, T ∈ {100,
//! 160} ns, twelve solid angles π/16…3π/4, σ/Ω₀ = 0.1, Γ = 10⁷ s⁻¹, 400
//! realizations per point.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adiabatic::AdiabaticRampPolicy;
use crate::engine::EngineConfig;
use crate::model::Protocol;
use crate::noise::CorrelationMode;
use crate::{Error, Result};

/// File format for tabular outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    /// Lowercase name as used on the command line.
    pub fn label(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }

    /// Parses a command-line format name.
    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format {other:?}"))),
        }
    }
}

/// Constant-rate ramp shaping limits, with the duration cap in nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampConfig {
    /// Adiabaticity the ramps are shaped to.
    pub s_target: f64,
    /// Hard adiabaticity bound schedules must respect.
    pub s_max: f64,
    /// Longest allowed ramp in ns.
    pub max_ramp_ns: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        let policy = AdiabaticRampPolicy::default();
        RampConfig {
            s_target: policy.s_target,
            s_max: policy.s_max,
            max_ramp_ns: policy.max_ramp_duration * 1e9,
        }
    }
}

impl RampConfig {
    /// The equivalent SI-unit policy.
    pub fn policy(&self) -> AdiabaticRampPolicy {
        AdiabaticRampPolicy {
            s_target: self.s_target,
            s_max: self.s_max,
            max_ramp_duration: self.max_ramp_ns * 1e-9,
        }
    }
}

/// Complete description of a batch run.
///
/// Every field has a default, so a config file only needs the fields it
/// changes; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Detuning Δ/2π in MHz, signed.
    pub delta_mhz: f64,
    /// Plateau durations T in ns, one sweep per entry.
    pub t_ns: Vec<f64>,
    /// Solid angles in units of π.
    pub angles_pi: Vec<f64>,
    /// Loops per window for the positive-orientation curves.
    pub n_loops: i32,
    /// Noise amplitude as σ/Ω₀.
    pub relative_amplitude: f64,
    /// Inverse noise correlation time Γ in 1/s.
    pub gamma_per_s: f64,
    /// Window correlation modes to run.
    pub modes: Vec<CorrelationMode>,
    /// Protocols to run.
    pub protocols: Vec<Protocol>,
    /// Noise realizations per ensemble.
    pub realizations: usize,
    /// Base seed all streams derive from.
    pub base_seed: u64,
    /// Integration step in ps.
    pub dt_ps: f64,
    /// Noise sample hold time in ps.
    pub noise_dt_ps: f64,
    /// Whether amplitude noise also acts during the ramps.
    pub ramp_noise: bool,
    /// Share noise streams across cells of equal geometry.
    pub pair_seeds: bool,
    pub ramp: RampConfig,
    /// Directory result files are written into.
    pub out_dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            delta_mhz: -35.0,
            t_ns: vec![100.0, 160.0],
            angles_pi: (1..=12).map(|k| f64::from(k) / 16.0).collect(),
            n_loops: 1,
            relative_amplitude: 0.1,
            gamma_per_s: 1.0e7,
            modes: CorrelationMode::ALL.to_vec(),
            protocols: vec![Protocol::P, Protocol::R],
            realizations: 400,
            base_seed: 1,
            dt_ps: 50.0,
            noise_dt_ps: 50.0,
            ramp_noise: true,
            pair_seeds: false,
            ramp: RampConfig::default(),
            out_dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config file; missing fields take their defaults.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pretty-printed JSON with every field explicit.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        if !self.delta_mhz.is_finite() || self.delta_mhz == 0.0 {
            return Err(Error::Config("delta_mhz must be finite and nonzero".into()));
        }
        if self.t_ns.is_empty() || self.t_ns.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("t_ns must list positive durations".into()));
        }
        if self.n_loops < 1 {
            return Err(Error::Config(
                "n_loops must be at least 1; negative orientations are run automatically".into(),
            ));
        }
        let max_angle = 2.0 * f64::from(self.n_loops);
        if self.angles_pi.is_empty()
            || self
                .angles_pi
                .iter()
                .any(|a| !(a.is_finite() && *a > 0.0 && *a < max_angle))
        {
            return Err(Error::Config(format!(
                "angles_pi must lie strictly between 0 and {max_angle} (units of pi)"
            )));
        }
        if !(self.relative_amplitude.is_finite() && self.relative_amplitude >= 0.0) {
            return Err(Error::Config(
                "relative_amplitude must be nonnegative".into(),
            ));
        }
        if !(self.gamma_per_s.is_finite() && self.gamma_per_s > 0.0) {
            return Err(Error::Config("gamma_per_s must be positive".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("modes must not be empty".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::Config("protocols must not be empty".into()));
        }
        if self.realizations < 2 {
            return Err(Error::Config(
                "realizations must be at least 2 for an ensemble estimate".into(),
            ));
        }
        if !(self.dt_ps.is_finite() && self.dt_ps > 0.0) {
            return Err(Error::Config("dt_ps must be positive".into()));
        }
        if !(self.noise_dt_ps.is_finite() && self.noise_dt_ps > 0.0) {
            return Err(Error::Config("noise_dt_ps must be positive".into()));
        }
        self.ramp
            .policy()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Detuning Δ in rad/s.
    pub fn delta(&self) -> f64 {
        2.0 * PI * self.delta_mhz * 1.0e6
    }

    /// Plateau durations in seconds.
    pub fn windows(&self) -> Vec<f64> {
        self.t_ns.iter().map(|t| t * 1e-9).collect()
    }

    /// Solid angles in steradians.
    pub fn angles(&self) -> Vec<f64> {
        self.angles_pi.iter().map(|a| a * PI).collect()
    }

    /// The engine-side slice of this configuration.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            dt: self.dt_ps * 1e-12,
            noise_dt: self.noise_dt_ps * 1e-12,
            relative_amplitude: self.relative_amplitude,
            gamma: self.gamma_per_s,
            ramp_noise: self.ramp_noise,
            pair_seeds: self.pair_seeds,
            policy: self.ramp.policy(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_DELTA;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_reproduce_the_reference_setup() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_relative_eq!(config.delta(), DEFAULT_DELTA, max_relative = 1e-15);
        assert_eq!(config.t_ns, vec![100.0, 160.0]);
        assert_eq!(config.angles_pi.len(), 12);
        assert_relative_eq!(config.angles()[7], PI / 2.0, max_relative = 1e-15);
        assert_relative_eq!(config.angles()[11], 0.75 * PI, max_relative = 1e-15);
        assert_eq!(config.realizations, 400);
        assert_eq!(config.modes.len(), 4);
        assert!(config.ramp_noise);
        let engine = config.engine_config();
        assert_relative_eq!(engine.dt, 5e-11, max_relative = 1e-15);
        let policy = AdiabaticRampPolicy::default();
        assert_eq!(engine.policy.s_target, policy.s_target);
        assert_eq!(engine.policy.s_max, policy.s_max);
        assert_relative_eq!(
            engine.policy.max_ramp_duration,
            policy.max_ramp_duration,
            max_relative = 1e-12
        );
    }

    #[test]
    fn json_round_trip_preserves_every_field() {
        let mut config = RunConfig::default();
        config.base_seed = 99;
        config.pair_seeds = true;
        config.format = OutputFormat::Json;
        config.out_dir = PathBuf::from("elsewhere");
        let text = config.to_json().unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn partial_files_fill_in_defaults_and_typos_are_rejected() {
        let partial: RunConfig = serde_json::from_str(r#"{"realizations": 16}"#).unwrap();
        assert_eq!(partial.realizations, 16);
        assert_eq!(partial.t_ns, RunConfig::default().t_ns);
        assert!(serde_json::from_str::<RunConfig>(r#"{"realisations": 16}"#).is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_blocks() {
        let ok = RunConfig::default();
        let cases: Vec<RunConfig> = vec![
            RunConfig {
                delta_mhz: 0.0,
                ..ok.clone()
            },
            RunConfig {
                t_ns: vec![],
                ..ok.clone()
            },
            RunConfig {
                angles_pi: vec![2.5],
                ..ok.clone()
            },
            RunConfig {
                n_loops: 0,
                ..ok.clone()
            },
            RunConfig {
                realizations: 0,
                ..ok.clone()
            },
            RunConfig {
                gamma_per_s: -1.0,
                ..ok.clone()
            },
            RunConfig {
                ramp: RampConfig {
                    s_target: 0.5,
                    s_max: 0.28,
                    max_ramp_ns: 2000.0,
                },
                ..ok.clone()
            },
        ];
        for bad in cases {
            assert!(bad.validate().is_err(), "accepted {bad:?}");
        }
        let wider = RunConfig {
            n_loops: 2,
            angles_pi: vec![2.5],
            ..ok
        };
        wider.validate().unwrap();
    }
}
