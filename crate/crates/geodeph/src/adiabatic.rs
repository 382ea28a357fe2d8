//! Adiabaticity bookkeeping: ramp shaping, the adiabaticity parameter, reports.
//!
//! The adiabaticity parameter s(t) compares how fast the field direction moves
//! with how fast the state precesses about it: s = ‖dn̂/dt‖ / G, normalized by
//! the plateau gap G = √(Δ² + Ω₀²). Ramps are shaped to hold s at a design
//! value, and the loop itself contributes s = ω_B sin θ / G on the plateau.

use serde::{Deserialize, Serialize};

use crate::model::{PulseSchedule, SegmentKind};
use crate::noise::NoiseTrace;
use crate::{Error, Result};

/// Ramp design targets and the hard bound any schedule must respect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdiabaticRampPolicy {
    /// Adiabaticity held constant along each amplitude ramp.
    pub s_target: f64,
    /// Hard upper bound on s anywhere in the schedule.
    pub s_max: f64,
    /// Longest ramp the policy will accept, in seconds.
    pub max_ramp_duration: f64,
}

impl Default for AdiabaticRampPolicy {
    /// The default ramp target is well below the hard bound: echo refocusing
    /// errors carry a transient of relative size ~s from each ramp corner, so
    /// ramps must be gentler than the dephasing signals they bracket.
    fn default() -> Self {
        AdiabaticRampPolicy {
            s_target: 0.05,
            s_max: 0.28,
            max_ramp_duration: 2e-6,
        }
    }
}

impl AdiabaticRampPolicy {
    /// Checks that the targets are ordered and positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.s_target > 0.0 && self.s_target.is_finite()) {
            return Err(Error::Domain("ramp target must be positive".into()));
        }
        if !(self.s_max >= self.s_target && self.s_max < 1.0) {
            return Err(Error::Domain(format!(
                "hard bound {} must lie in [s_target, 1)",
                self.s_max
            )));
        }
        if !(self.max_ramp_duration > 0.0) {
            return Err(Error::Domain("ramp duration cap must be positive".into()));
        }
        Ok(())
    }
}

/// A constant-rate amplitude ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    /// Ramp duration in seconds.
    pub duration: f64,
    /// Constant cone-angle rate dθ/dt in rad/s.
    pub theta_rate: f64,
}

/// Shapes the constant-rate ramp reaching `theta_target` at adiabaticity
/// `policy.s_target` against the plateau gap.
pub fn shape_ramp(theta_target: f64, gap: f64, policy: &AdiabaticRampPolicy) -> Result<Ramp> {
    policy.validate()?;
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&theta_target) {
        return Err(Error::Domain(format!(
            "ramp target angle {theta_target} outside [0, pi/2)"
        )));
    }
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(Error::Domain("gap must be positive".into()));
    }
    if theta_target == 0.0 {
        return Ok(Ramp {
            duration: 0.0,
            theta_rate: 0.0,
        });
    }
    let theta_rate = policy.s_target * gap;
    let duration = theta_target / theta_rate;
    if duration > policy.max_ramp_duration {
        return Err(Error::Schedule(format!(
            "ramp of {duration:.3e} s exceeds the policy cap {:.3e} s",
            policy.max_ramp_duration
        )));
    }
    Ok(Ramp {
        duration,
        theta_rate,
    })
}

fn direction(omega: f64, phi: f64, delta: f64) -> [f64; 3] {
    let b = [omega * phi.cos(), omega * phi.sin(), delta];
    let norm = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    [b[0] / norm, b[1] / norm, b[2] / norm]
}

/// Adiabaticity s(t) by symmetric differencing of the field direction.
///
/// The noise value is frozen at its value at `t` across the stencil, so the
/// result reflects the scheduled envelope rates seen through the noise-dressed
/// field. Errors at echo pulses and within one step of a segment boundary,
/// where the direction is not differentiable.
pub fn adiabaticity(schedule: &PulseSchedule, noise: &NoiseTrace, t: f64) -> Result<f64> {
    if !t.is_finite() || t < 0.0 || t > schedule.total_duration {
        return Err(Error::Domain(format!(
            "time {t:.3e} s outside schedule of duration {:.3e} s",
            schedule.total_duration
        )));
    }
    let delta = schedule.spec.geometry.delta;
    let gap = schedule.spec.geometry.gap();
    let mut start = 0.0;
    for seg in &schedule.segments {
        if seg.duration > 0.0 && t < start + seg.duration {
            let t_local = t - start;
            let h = seg.dt;
            if t_local < h * (1.0 - 1e-9) || t_local > seg.duration - h * (1.0 - 1e-9) {
                return Err(Error::Domain(
                    "adiabaticity is undefined within one step of a segment boundary".into(),
                ));
            }
            let noise_val = match (seg.admits_noise(), seg.window) {
                (true, Some(w)) => noise.sample(w, seg.window_offset + t_local),
                _ => 0.0,
            };
            let (om_m, phi_m) = seg.envelope(delta.abs(), t_local - h);
            let (om_p, phi_p) = seg.envelope(delta.abs(), t_local + h);
            let n_m = direction(om_m + noise_val, phi_m, delta);
            let n_p = direction(om_p + noise_val, phi_p, delta);
            let diff = [n_p[0] - n_m[0], n_p[1] - n_m[1], n_p[2] - n_m[2]];
            let rate =
                (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt() / (2.0 * h);
            return Ok(rate / gap);
        }
        start += seg.duration;
    }
    Err(Error::Domain(
        "adiabaticity is undefined at echo pulses and sequence endpoints".into(),
    ))
}

/// One sampled point of an adiabaticity report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSample {
    /// Sequence time in seconds.
    pub t: f64,
    /// Noiseless adiabaticity.
    pub s: f64,
    /// Adiabaticity seen through the noise-dressed cone angle.
    pub s_noisy: f64,
}

/// Per-segment adiabaticity statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAdiabaticity {
    pub index: usize,
    pub kind: String,
    pub window: Option<u8>,
    pub duration: f64,
    pub max_s: f64,
    pub mean_s: f64,
    pub noisy_max_s: f64,
    pub noisy_mean_s: f64,
}

/// Adiabaticity of a whole schedule, per segment and globally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdiabaticityReport {
    pub segments: Vec<SegmentAdiabaticity>,
    /// Loop contribution ω_B sin θ / G on the plateau, noiseless.
    pub plateau_s: f64,
    pub max_s: f64,
    pub noisy_max_s: f64,
    /// Hard bound the report checks against.
    pub bound: f64,
    /// Whether both noiseless and noisy maxima stay below the bound.
    pub within_bound: bool,
    pub samples: Vec<ReportSample>,
}

fn segment_label(kind: &SegmentKind) -> &'static str {
    match kind {
        SegmentKind::RampUp { .. } => "ramp-up",
        SegmentKind::Precession { .. } => "plateau",
        SegmentKind::RampDown { .. } => "ramp-down",
        SegmentKind::EchoPulse { .. } => "pulse",
        SegmentKind::Idle => "idle",
    }
}

/// Samples s(t) over the schedule and aggregates per-segment statistics.
///
/// Both columns use the scheduled envelope rates; the noisy column rescales
/// the loop term by the cone angle of the noise-dressed field, so ramps are
/// reported at their design adiabaticity in either column. Pulses are skipped.
pub fn adiabaticity_report(
    schedule: &PulseSchedule,
    noise: &NoiseTrace,
    bound: f64,
    sample_dt: f64,
) -> Result<AdiabaticityReport> {
    if !(sample_dt > 0.0 && sample_dt.is_finite()) {
        return Err(Error::Domain("report grid step must be positive".into()));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::Domain("bound must be positive".into()));
    }
    let geom = &schedule.spec.geometry;
    let gap = geom.gap();
    let delta_abs = geom.delta.abs();
    let mut segments = Vec::new();
    let mut samples = Vec::new();
    let mut start = 0.0;
    let mut max_s = 0.0f64;
    let mut noisy_max_s = 0.0f64;
    for (index, seg) in schedule.segments.iter().enumerate() {
        if seg.duration == 0.0 {
            continue;
        }
        let n_pts = ((seg.duration / sample_dt).ceil() as usize).max(1);
        let step = seg.duration / n_pts as f64;
        let mut seg_max = 0.0f64;
        let mut seg_noisy_max = 0.0f64;
        let mut seg_sum = 0.0;
        let mut seg_noisy_sum = 0.0;
        for k in 0..n_pts {
            let t_local = (k as f64 + 0.5) * step;
            let (theta_rate, phi_rate) = match seg.kind {
                SegmentKind::RampUp { theta_rate, .. } => (theta_rate, 0.0),
                SegmentKind::RampDown { theta_rate, .. } => (theta_rate, 0.0),
                SegmentKind::Precession { phi_rate, .. } => (0.0, phi_rate),
                SegmentKind::EchoPulse { .. } | SegmentKind::Idle => (0.0, 0.0),
            };
            let (omega_det, _) = seg.envelope(delta_abs, t_local);
            let sin_sched = omega_det / omega_det.hypot(geom.delta);
            let s = (theta_rate.powi(2) + (phi_rate * sin_sched).powi(2)).sqrt() / gap;
            let noise_val = match (seg.admits_noise(), seg.window) {
                (true, Some(w)) => noise.sample(w, seg.window_offset + t_local),
                _ => 0.0,
            };
            let omega_noisy = omega_det + noise_val;
            let sin_noisy = omega_noisy.abs() / omega_noisy.hypot(geom.delta);
            let s_noisy = (theta_rate.powi(2) + (phi_rate * sin_noisy).powi(2)).sqrt() / gap;
            seg_max = seg_max.max(s);
            seg_noisy_max = seg_noisy_max.max(s_noisy);
            seg_sum += s;
            seg_noisy_sum += s_noisy;
            samples.push(ReportSample {
                t: start + t_local,
                s,
                s_noisy,
            });
        }
        max_s = max_s.max(seg_max);
        noisy_max_s = noisy_max_s.max(seg_noisy_max);
        segments.push(SegmentAdiabaticity {
            index,
            kind: segment_label(&seg.kind).to_string(),
            window: seg.window,
            duration: seg.duration,
            max_s: seg_max,
            mean_s: seg_sum / n_pts as f64,
            noisy_max_s: seg_noisy_max,
            noisy_mean_s: seg_noisy_sum / n_pts as f64,
        });
        start += seg.duration;
    }
    let plateau_s = geom.omega_b * geom.theta.sin() / gap;
    Ok(AdiabaticityReport {
        segments,
        plateau_s,
        max_s,
        noisy_max_s,
        bound,
        within_bound: max_s < bound && noisy_max_s < bound,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_schedule, Geometry, Protocol, ProtocolSpec, DEFAULT_DELTA};
    use crate::noise::{CorrelationMode, NoiseTrace};
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn test_policy() -> AdiabaticRampPolicy {
        AdiabaticRampPolicy {
            s_target: 0.2,
            ..AdiabaticRampPolicy::default()
        }
    }

    fn schedule() -> PulseSchedule {
        let geom = Geometry::from_solid_angle(FRAC_PI_2, 1, DEFAULT_DELTA, 100e-9).unwrap();
        let spec = ProtocolSpec::new(Protocol::P, CorrelationMode::Correlated, geom).unwrap();
        build_schedule(&spec, &test_policy(), 5e-11).unwrap()
    }

    #[test]
    fn ramp_holds_design_rate() {
        let policy = test_policy();
        let ramp = shape_ramp(0.7, 3e8, &policy).unwrap();
        assert_relative_eq!(ramp.theta_rate, 0.2 * 3e8, max_relative = 1e-15);
        assert_relative_eq!(ramp.duration, 0.7 / (0.2 * 3e8), max_relative = 1e-15);
        assert_eq!(shape_ramp(0.0, 3e8, &policy).unwrap().duration, 0.0);
        let capped = AdiabaticRampPolicy {
            max_ramp_duration: 1e-12,
            ..policy
        };
        assert!(shape_ramp(0.7, 3e8, &capped).is_err());
    }

    #[test]
    fn plateau_adiabaticity_matches_loop_formula() {
        let sched = schedule();
        let geom = &sched.spec.geometry;
        let quiet = NoiseTrace::zero(CorrelationMode::Correlated);
        let t = sched.ramp_duration + 50e-9;
        let s = adiabaticity(&sched, &quiet, t).unwrap();
        let expected = geom.omega_b * geom.theta.sin() / geom.gap();
        assert_relative_eq!(s, expected, max_relative = 1e-4);
    }

    #[test]
    fn ramp_adiabaticity_matches_design_target() {
        let sched = schedule();
        let quiet = NoiseTrace::zero(CorrelationMode::Correlated);
        let t = sched.ramp_duration * 0.5;
        let s = adiabaticity(&sched, &quiet, t).unwrap();
        assert_relative_eq!(s, 0.2, max_relative = 1e-4);
    }

    #[test]
    fn adiabaticity_excludes_boundaries_and_pulses() {
        let sched = schedule();
        let quiet = NoiseTrace::zero(CorrelationMode::Correlated);
        assert!(adiabaticity(&sched, &quiet, 0.0).is_err());
        assert!(adiabaticity(&sched, &quiet, sched.ramp_duration).is_err());
        assert!(adiabaticity(&sched, &quiet, sched.total_duration).is_err());
    }

    #[test]
    fn report_tracks_noise_on_the_plateau_only() {
        let sched = schedule();
        let geom = sched.spec.geometry;
        let amp = 0.3 * geom.omega0;
        let noise = NoiseTrace::constant(
            CorrelationMode::Correlated,
            amp,
            sched.window_span,
            1e-10,
        );
        let report = adiabaticity_report(&sched, &noise, 0.28, 2e-9).unwrap();
        let sin_noisy = (geom.omega0 + amp) / (geom.omega0 + amp).hypot(geom.delta);
        let expected_noisy = geom.omega_b * sin_noisy / geom.gap();
        for seg in &report.segments {
            if seg.kind == "plateau" {
                assert_relative_eq!(seg.noisy_max_s, expected_noisy, max_relative = 1e-12);
                assert_relative_eq!(seg.max_s, report.plateau_s, max_relative = 1e-12);
                assert!(seg.noisy_max_s > seg.max_s);
            } else {
                assert_relative_eq!(seg.max_s, 0.2, max_relative = 1e-12);
                assert_relative_eq!(seg.noisy_max_s, 0.2, max_relative = 1e-12);
            }
        }
        assert!(report.within_bound);
        let brutal = adiabaticity_report(&sched, &noise, 0.01, 2e-9).unwrap();
        assert!(!brutal.within_bound);
    }

    #[test]
    fn report_agrees_with_pointwise_adiabaticity() {
        let sched = schedule();
        let geom = sched.spec.geometry;
        let amp = 0.2 * geom.omega0;
        let noise = NoiseTrace::constant(
            CorrelationMode::Correlated,
            amp,
            sched.window_span,
            1e-10,
        );
        let report = adiabaticity_report(&sched, &noise, 0.28, 2e-9).unwrap();
        let mid_plateau = sched.ramp_duration + 50e-9;
        let s_point = adiabaticity(&sched, &noise, mid_plateau).unwrap();
        let sample = report
            .samples
            .iter()
            .min_by(|a, b| {
                (a.t - mid_plateau)
                    .abs()
                    .total_cmp(&(b.t - mid_plateau).abs())
            })
            .unwrap();
        assert_relative_eq!(sample.s_noisy, s_point, max_relative = 1e-3);
    }
}
