//! Field geometry, loop protocols, and pulse schedules.
//!
//! The drive Hamiltonian is H = (Δ σz + Ω cos φ σx + Ω sin φ σy)/2, so the state
//! precesses about the field B = (Ω cos φ, Ω sin φ, Δ). A loop closes the field
//! path by sweeping φ through n full turns at fixed cone angle θ = arctan(Ω/|Δ|),
//! subtending solid angle 2πn(1 − cos θ). Schedules wrap two such windows in a
//! spin-echo sequence (π/2, loop, π, loop, π/2), with adiabatic amplitude ramps
//! opening and closing each window.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::adiabatic::{shape_ramp, AdiabaticRampPolicy, Ramp};
use crate::noise::NoiseTrace;
use crate::{Error, Result};

/// Default static detuning Δ = −2π · 35 MHz in rad/s.
pub const DEFAULT_DELTA: f64 = -(TAU * 35.0e6);

/// Effective magnetic field in angular-frequency units (rad/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    pub bx: f64,
    pub by: f64,
    pub bz: f64,
}

impl FieldVector {
    /// Euclidean norm of the field.
    pub fn magnitude(self) -> f64 {
        (self.bx * self.bx + self.by * self.by + self.bz * self.bz).sqrt()
    }
}

/// Cone angle θ ∈ [0, π/2) subtending the requested solid angle over n loops.
///
/// Solves 2πn(1 − cos θ) = solid_angle. Errors when n = 0, when the signs of
/// the solid angle and n disagree, or when the ratio falls outside [0, 1).
pub fn theta_for_solid_angle(solid_angle: f64, n_loops: i32) -> Result<f64> {
    if n_loops == 0 {
        return Err(Error::Domain("loop count must be nonzero".into()));
    }
    let x = solid_angle / (TAU * n_loops as f64);
    if !(0.0..1.0).contains(&x) {
        return Err(Error::Domain(format!(
            "solid angle {solid_angle} not reachable with {n_loops} loops: \
             need 0 <= A/(2 pi n) < 1, got {x}"
        )));
    }
    Ok((1.0 - x).acos())
}

/// Loop geometry: detuning, cone angle, drive amplitude, loop count and timing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Static detuning Δ in rad/s (nonzero; negative in the default setup).
    pub delta: f64,
    /// Cone angle θ in radians, in [0, π/2).
    pub theta: f64,
    /// Plateau drive amplitude Ω₀ = |Δ| tan θ in rad/s.
    pub omega0: f64,
    /// Signed number of loops per window; the sign orients the first window.
    pub n_loops: i32,
    /// Loop angular rate ω_B = 2π|n|/T in rad/s.
    pub omega_b: f64,
    /// Plateau duration T of one window in seconds.
    pub t_window: f64,
}

impl Geometry {
    /// Builds the geometry for a target solid angle.
    pub fn from_solid_angle(
        solid_angle: f64,
        n_loops: i32,
        delta: f64,
        t_window: f64,
    ) -> Result<Self> {
        if !delta.is_finite() || delta == 0.0 {
            return Err(Error::Domain("detuning must be finite and nonzero".into()));
        }
        if !t_window.is_finite() || t_window <= 0.0 {
            return Err(Error::Domain("window duration must be positive".into()));
        }
        let theta = theta_for_solid_angle(solid_angle, n_loops)?;
        let omega0 = delta.abs() * theta.tan();
        let omega_b = TAU * n_loops.unsigned_abs() as f64 / t_window;
        Ok(Geometry {
            delta,
            theta,
            omega0,
            n_loops,
            omega_b,
            t_window,
        })
    }

    /// Signed solid angle 2πn(1 − cos θ) subtended per window.
    pub fn solid_angle(&self) -> f64 {
        TAU * self.n_loops as f64 * (1.0 - self.theta.cos())
    }

    /// Plateau energy gap G = √(Δ² + Ω₀²).
    pub fn gap(&self) -> f64 {
        self.delta.hypot(self.omega0)
    }

    /// Orientation of the first window: sign of n.
    pub fn first_window_sign(&self) -> i8 {
        if self.n_loops > 0 {
            1
        } else {
            -1
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() || self.delta == 0.0 {
            return Err(Error::Domain("detuning must be finite and nonzero".into()));
        }
        if !(0.0..FRAC_PI_2).contains(&self.theta) {
            return Err(Error::Domain(format!(
                "cone angle {} outside [0, pi/2)",
                self.theta
            )));
        }
        if self.n_loops == 0 {
            return Err(Error::Domain("loop count must be nonzero".into()));
        }
        if !self.t_window.is_finite() || self.t_window <= 0.0 {
            return Err(Error::Domain("window duration must be positive".into()));
        }
        let omega0 = self.delta.abs() * self.theta.tan();
        if (self.omega0 - omega0).abs() > 1e-6 * omega0.max(1.0) {
            return Err(Error::Domain(
                "drive amplitude inconsistent with cone angle and detuning".into(),
            ));
        }
        let omega_b = TAU * self.n_loops.unsigned_abs() as f64 / self.t_window;
        if (self.omega_b - omega_b).abs() > 1e-6 * omega_b {
            return Err(Error::Domain(
                "loop rate inconsistent with loop count and window duration".into(),
            ));
        }
        Ok(())
    }
}

/// Echo protocol: both loops same sense (P), reversed sense (R), or no loop (Dp).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Both windows traverse the loop with the same orientation.
    P,
    /// The second window traverses the loop with reversed orientation.
    R,
    /// Dynamic phase only: the drive is held at fixed φ, no loop is traversed.
    #[serde(rename = "DP")]
    Dp,
}

impl Protocol {
    /// Short label used in tables and CSV output.
    pub fn label(self) -> &'static str {
        match self {
            Protocol::P => "P",
            Protocol::R => "R",
            Protocol::Dp => "DP",
        }
    }

    /// Parses a label produced by [`Protocol::label`].
    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Protocol::P),
            "R" => Ok(Protocol::R),
            "DP" => Ok(Protocol::Dp),
            other => Err(Error::Domain(format!("unknown protocol label {other:?}"))),
        }
    }
}

/// Coherence curve within a protocol's dataset, labelled by window orientations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Curve {
    /// P protocol, first window positive: orientations (+, +).
    PlusPlus,
    /// P protocol, first window negative: orientations (−, −).
    MinusMinus,
    /// R protocol, first window positive: orientations (+, −).
    PlusMinus,
    /// R protocol, first window negative: orientations (−, +).
    MinusPlus,
    /// Dynamic-phase-only reference curve.
    Dp,
}

impl Curve {
    /// Short label used in tables and CSV output.
    pub fn label(self) -> &'static str {
        match self {
            Curve::PlusPlus => "C++",
            Curve::MinusMinus => "C--",
            Curve::PlusMinus => "C+-",
            Curve::MinusPlus => "C-+",
            Curve::Dp => "DP",
        }
    }

    /// Parses a label produced by [`Curve::label`].
    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "C++" => Ok(Curve::PlusPlus),
            "C--" => Ok(Curve::MinusMinus),
            "C+-" => Ok(Curve::PlusMinus),
            "C-+" => Ok(Curve::MinusPlus),
            "DP" => Ok(Curve::Dp),
            other => Err(Error::Domain(format!("unknown curve label {other:?}"))),
        }
    }

    /// Orientation of the first window: +1, −1, or 0 for the reference curve.
    pub fn first_window_sign(self) -> i8 {
        match self {
            Curve::PlusPlus | Curve::PlusMinus => 1,
            Curve::MinusMinus | Curve::MinusPlus => -1,
            Curve::Dp => 0,
        }
    }
}

/// A fully specified sequence cell: protocol, noise pairing, and geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    /// Orientation of the first window, +1 or −1 (sign of `geometry.n_loops`).
    pub first_window_sign: i8,
    pub correlation_mode: crate::noise::CorrelationMode,
    pub geometry: Geometry,
}

impl ProtocolSpec {
    /// Builds a spec, validating the geometry.
    pub fn new(
        protocol: Protocol,
        correlation_mode: crate::noise::CorrelationMode,
        geometry: Geometry,
    ) -> Result<Self> {
        geometry.validate()?;
        Ok(ProtocolSpec {
            protocol,
            first_window_sign: geometry.first_window_sign(),
            correlation_mode,
            geometry,
        })
    }

    /// Loop orientation of window 0 or 1: ±1, or 0 when no loop is traversed.
    pub fn window_sign(&self, window: u8) -> i8 {
        match self.protocol {
            Protocol::Dp => 0,
            Protocol::P => self.first_window_sign,
            Protocol::R => {
                if window == 0 {
                    self.first_window_sign
                } else {
                    -self.first_window_sign
                }
            }
        }
    }

    /// The coherence curve this cell contributes to.
    pub fn curve(&self) -> Curve {
        match (self.protocol, self.first_window_sign) {
            (Protocol::Dp, _) => Curve::Dp,
            (Protocol::P, 1) => Curve::PlusPlus,
            (Protocol::P, _) => Curve::MinusMinus,
            (Protocol::R, 1) => Curve::PlusMinus,
            (Protocol::R, _) => Curve::MinusPlus,
        }
    }
}

/// Shape of one schedule segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Drive amplitude opens along a meridian: θ rises 0 → θ_end at fixed φ.
    RampUp {
        theta_rate: f64,
        theta_end: f64,
        phi: f64,
    },
    /// Plateau: fixed amplitude, φ advances linearly (rate 0 holds the field).
    Precession {
        omega: f64,
        phi_start: f64,
        phi_rate: f64,
    },
    /// Drive amplitude closes: θ falls θ_start → 0 at fixed φ.
    RampDown {
        theta_rate: f64,
        theta_start: f64,
        phi: f64,
    },
    /// Instantaneous rotation about an equatorial axis (x, y) by `angle`.
    EchoPulse { axis_x: f64, axis_y: f64, angle: f64 },
    /// Free evolution under the bare detuning.
    Idle,
}

/// One schedule segment with its realized integration grid and noise tagging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Segment duration in seconds (0 for echo pulses).
    pub duration: f64,
    /// Realized integration step: `duration / n_steps`.
    pub dt: f64,
    /// Number of integration steps (0 for echo pulses).
    pub n_steps: usize,
    /// Noise window this segment belongs to, if any.
    pub window: Option<u8>,
    /// Start time of this segment within its window's noisy span.
    pub window_offset: f64,
}

impl Segment {
    /// Deterministic drive envelope (Ω, φ) at local time `t` into the segment.
    pub fn envelope(&self, delta_abs: f64, t_local: f64) -> (f64, f64) {
        match self.kind {
            SegmentKind::RampUp {
                theta_rate,
                theta_end,
                phi,
            } => {
                let theta = (theta_rate * t_local).min(theta_end);
                (delta_abs * theta.tan(), phi)
            }
            SegmentKind::RampDown {
                theta_rate,
                theta_start,
                phi,
            } => {
                let theta = (theta_start - theta_rate * t_local).max(0.0);
                (delta_abs * theta.tan(), phi)
            }
            SegmentKind::Precession {
                omega,
                phi_start,
                phi_rate,
            } => (omega, phi_start + phi_rate * t_local),
            SegmentKind::EchoPulse { .. } | SegmentKind::Idle => (0.0, 0.0),
        }
    }

    /// Whether amplitude noise acts during this segment.
    pub fn admits_noise(&self) -> bool {
        matches!(
            self.kind,
            SegmentKind::RampUp { .. }
                | SegmentKind::RampDown { .. }
                | SegmentKind::Precession { .. }
        )
    }
}

/// A complete echo sequence, ready for propagation or serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub spec: ProtocolSpec,
    /// Requested integration step; each segment's realized `dt` is at most this.
    pub dt_requested: f64,
    pub segments: Vec<Segment>,
    /// Duration of one window's noisy span: ramp-up + plateau + ramp-down.
    pub window_span: f64,
    /// Duration of each amplitude ramp.
    pub ramp_duration: f64,
    /// Rate of the amplitude ramps dθ/dt in rad/s (0 when no ramp is needed).
    pub theta_rate: f64,
    /// Total sequence duration in seconds.
    pub total_duration: f64,
}

impl PulseSchedule {
    /// Time spans within a window's noisy span occupied by the ramps.
    pub fn ramp_spans(&self) -> [(f64, f64); 2] {
        let t_r = self.ramp_duration;
        [(0.0, t_r), (self.window_span - t_r, self.window_span)]
    }

    /// Start times of all segments, in order.
    pub fn segment_starts(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut t = 0.0;
        for seg in &self.segments {
            out.push(t);
            t += seg.duration;
        }
        out
    }
}

fn grid(duration: f64, dt: f64) -> (usize, f64) {
    let n = ((duration / dt) - 1e-9).ceil().max(1.0) as usize;
    (n, duration / n as f64)
}

/// Builds the echo schedule for one cell.
///
/// The sequence is π/2 about ∓y, window 0, π about +x, window 1, π/2 about +x,
/// with the first axis sign chosen so the detuning-aligned ground state lands
/// on +x. Each window opens with a constant-rate ramp shaped by `policy`,
/// precesses for the window duration with dφ/dt = s · sgn(Δ) · ω_B for window
/// orientation s, and closes with the mirrored ramp. φ is continuous across
/// windows. Errors when the step exceeds a fiftieth of the plateau precession
/// period, or when the loop rate itself breaks the policy's hard adiabatic
/// bound.
pub fn build_schedule(
    spec: &ProtocolSpec,
    policy: &AdiabaticRampPolicy,
    dt: f64,
) -> Result<PulseSchedule> {
    spec.geometry.validate()?;
    policy.validate()?;
    let geom = &spec.geometry;
    let gap = geom.gap();
    let max_dt = TAU / gap / 50.0;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Schedule("integration step must be positive".into()));
    }
    if dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::Schedule(format!(
            "integration step {dt:.3e} s exceeds {max_dt:.3e} s \
             (fifty steps per precession period of the gap {gap:.3e} rad/s)"
        )));
    }
    let plateau_s = geom.omega_b * geom.theta.sin() / gap;
    if spec.protocol != Protocol::Dp && plateau_s > policy.s_max {
        return Err(Error::Schedule(format!(
            "plateau adiabaticity {plateau_s:.3} exceeds hard bound {:.3}",
            policy.s_max
        )));
    }
    let ramp = shape_ramp(geom.theta, gap, policy)?;
    let window_span = 2.0 * ramp.duration + geom.t_window;

    let delta_sign = if geom.delta > 0.0 { 1.0 } else { -1.0 };
    let mut segments = Vec::with_capacity(9);
    let mut phi = 0.0;

    segments.push(Segment {
        kind: SegmentKind::EchoPulse {
            axis_x: 0.0,
            axis_y: -delta_sign,
            angle: FRAC_PI_2,
        },
        duration: 0.0,
        dt: 0.0,
        n_steps: 0,
        window: None,
        window_offset: 0.0,
    });
    for w in 0..2u8 {
        let phi_rate = f64::from(spec.window_sign(w)) * delta_sign * geom.omega_b;
        push_window(&mut segments, geom, &ramp, w, phi, phi_rate, dt);
        phi += phi_rate * geom.t_window;
        let (axis_y, angle) = if w == 0 { (0.0, PI) } else { (0.0, FRAC_PI_2) };
        segments.push(Segment {
            kind: SegmentKind::EchoPulse {
                axis_x: 1.0,
                axis_y,
                angle,
            },
            duration: 0.0,
            dt: 0.0,
            n_steps: 0,
            window: None,
            window_offset: 0.0,
        });
    }

    let total_duration = segments.iter().map(|s| s.duration).sum();
    Ok(PulseSchedule {
        spec: *spec,
        dt_requested: dt,
        segments,
        window_span,
        ramp_duration: ramp.duration,
        theta_rate: ramp.theta_rate,
        total_duration,
    })
}

fn push_window(
    segments: &mut Vec<Segment>,
    geom: &Geometry,
    ramp: &Ramp,
    window: u8,
    phi_start: f64,
    phi_rate: f64,
    dt: f64,
) {
    let mut offset = 0.0;
    if ramp.duration > 0.0 {
        let (n, d) = grid(ramp.duration, dt);
        segments.push(Segment {
            kind: SegmentKind::RampUp {
                theta_rate: ramp.theta_rate,
                theta_end: geom.theta,
                phi: phi_start,
            },
            duration: ramp.duration,
            dt: d,
            n_steps: n,
            window: Some(window),
            window_offset: offset,
        });
        offset += ramp.duration;
    }
    let (n, d) = grid(geom.t_window, dt);
    segments.push(Segment {
        kind: SegmentKind::Precession {
            omega: geom.omega0,
            phi_start,
            phi_rate,
        },
        duration: geom.t_window,
        dt: d,
        n_steps: n,
        window: Some(window),
        window_offset: offset,
    });
    offset += geom.t_window;
    if ramp.duration > 0.0 {
        let (n, d) = grid(ramp.duration, dt);
        segments.push(Segment {
            kind: SegmentKind::RampDown {
                theta_rate: ramp.theta_rate,
                theta_start: geom.theta,
                phi: phi_start + phi_rate * geom.t_window,
            },
            duration: ramp.duration,
            dt: d,
            n_steps: n,
            window: Some(window),
            window_offset: offset,
        });
    }
}

/// Evaluates the instantaneous field at time `t`, including amplitude noise.
///
/// At the instant of a zero-duration echo pulse the bare detuning field is
/// returned; the pulse itself is not a field. Errors when `t` falls outside
/// the schedule.
pub fn field_at(schedule: &PulseSchedule, noise: &NoiseTrace, t: f64) -> Result<FieldVector> {
    if !t.is_finite() || t < 0.0 || t > schedule.total_duration * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "time {t:.3e} s outside schedule of duration {:.3e} s",
            schedule.total_duration
        )));
    }
    let delta = schedule.spec.geometry.delta;
    let mut start = 0.0;
    let mut chosen: Option<(&Segment, f64)> = None;
    for seg in &schedule.segments {
        if seg.duration == 0.0 {
            if (t - start).abs() <= 1e-18 {
                chosen = Some((seg, 0.0));
                break;
            }
        } else if t < start + seg.duration {
            chosen = Some((seg, t - start));
            break;
        }
        start += seg.duration;
    }
    let (seg, t_local) = match chosen {
        Some(pair) => pair,
        // t lands exactly on the final endpoint: clamp into the last segment.
        None => {
            let seg = schedule
                .segments
                .iter()
                .rev()
                .find(|s| s.duration > 0.0)
                .ok_or_else(|| Error::Schedule("schedule has no finite segments".into()))?;
            (seg, seg.duration)
        }
    };
    if matches!(seg.kind, SegmentKind::EchoPulse { .. }) {
        return Ok(FieldVector {
            bx: 0.0,
            by: 0.0,
            bz: delta,
        });
    }
    let (omega_det, phi) = seg.envelope(delta.abs(), t_local);
    let noise_val = match (seg.admits_noise(), seg.window) {
        (true, Some(w)) => noise.sample(w, seg.window_offset + t_local),
        _ => 0.0,
    };
    let omega = omega_det + noise_val;
    Ok(FieldVector {
        bx: omega * phi.cos(),
        by: omega * phi.sin(),
        bz: delta,
    })
}
