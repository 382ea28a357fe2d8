//! SU(2) propagation of echo schedules and ensemble reduction.
//!
//! One realization composes a rotation per integration step. Plateau segments
//! integrate in the frame corotating with the drive phase, where zero-order-held
//! noise makes every step an exact rotation; the step product is wrapped in the
//! axial rotations that undo the frame change. Ramps take two-node Gauss-Magnus
//! steps of fourth order, pulses are single exact rotations, and the running
//! rotor is renormalized every thousand steps. Ensembles average Bloch vectors
//! over realizations in a fixed order, so results are bit-identical for any
//! worker count, with bootstrap standard errors from a dedicated seed stream.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adiabatic::AdiabaticRampPolicy;
use crate::analytic::wrap_to_pi;
use crate::model::{
    build_schedule, Curve, Geometry, Protocol, ProtocolSpec, PulseSchedule, Segment, SegmentKind,
};
use crate::noise::{paired_traces_from_key, NoiseTrace, OUParams};
use crate::seeding::{salt_from_parts, trace_key};
use crate::{Error, Result};

const RENORM_INTERVAL: usize = 1000;
const BOOTSTRAP_REPLICAS: usize = 200;
/// Smallest noiseless contrast the coherence estimate may be referenced to.
const MIN_REFERENCE_CONTRAST: f64 = 0.05;
/// Gauss-Legendre node offset √3/6 from the step midpoint.
const GAUSS_SHIFT: f64 = 0.288_675_134_594_812_9;
/// Magnus commutator weight √3/12.
const MAGNUS_CROSS: f64 = 0.144_337_567_297_406_44;

/// Unit quaternion acting on the Bloch sphere as a right-handed rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Rotor {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Rotor {
    const IDENTITY: Rotor = Rotor {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Rotation by `angle` about the given axis (normalized here).
    fn from_axis_angle(ax: f64, ay: f64, az: f64, angle: f64) -> Rotor {
        let n = (ax * ax + ay * ay + az * az).sqrt();
        if n == 0.0 {
            return Rotor::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Rotor {
            w: c,
            x: k * ax,
            y: k * ay,
            z: k * az,
        }
    }

    /// Rotation by |v| about v̂, e.g. one step under a constant field v = B·dt.
    fn from_scaled_axis(vx: f64, vy: f64, vz: f64) -> Rotor {
        let n = (vx * vx + vy * vy + vz * vz).sqrt();
        let half = 0.5 * n;
        let k = if n > 1e-6 {
            half.sin() / n
        } else {
            0.5 - n * n / 48.0
        };
        Rotor {
            w: half.cos(),
            x: k * vx,
            y: k * vy,
            z: k * vz,
        }
    }

    /// Rotation by `angle` about +z.
    fn rz(angle: f64) -> Rotor {
        let (s, c) = (0.5 * angle).sin_cos();
        Rotor {
            w: c,
            x: 0.0,
            y: 0.0,
            z: s,
        }
    }

    /// Hamilton product: `self.times(r)` applies `r` first, then `self`.
    fn times(self, r: Rotor) -> Rotor {
        Rotor {
            w: self.w * r.w - self.x * r.x - self.y * r.y - self.z * r.z,
            x: self.w * r.x + r.w * self.x + self.y * r.z - self.z * r.y,
            y: self.w * r.y + r.w * self.y + self.z * r.x - self.x * r.z,
            z: self.w * r.z + r.w * self.z + self.x * r.y - self.y * r.x,
        }
    }

    fn normalized(self) -> Rotor {
        let n = (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        Rotor {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let u = [self.x, self.y, self.z];
        let t = cross(u, v);
        let t = [2.0 * t[0], 2.0 * t[1], 2.0 * t[2]];
        let c = cross(u, t);
        [
            v[0] + self.w * t[0] + c[0],
            v[1] + self.w * t[1] + c[1],
            v[2] + self.w * t[2] + c[2],
        ]
    }

    /// The SU(2) matrix w·1 − i(x σx + y σy + z σz).
    fn to_unitary(self) -> Unitary2 {
        Unitary2 {
            u00: Complex64::new(self.w, -self.z),
            u01: Complex64::new(-self.y, -self.x),
            u10: Complex64::new(self.y, -self.x),
            u11: Complex64::new(self.w, self.z),
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// 2×2 complex propagator of a schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Unitary2 {
    pub u00: Complex64,
    pub u01: Complex64,
    pub u10: Complex64,
    pub u11: Complex64,
}

impl Unitary2 {
    /// The identity matrix.
    pub fn identity() -> Unitary2 {
        Unitary2 {
            u00: Complex64::new(1.0, 0.0),
            u01: Complex64::new(0.0, 0.0),
            u10: Complex64::new(0.0, 0.0),
            u11: Complex64::new(1.0, 0.0),
        }
    }

    /// Largest entry of |U†U − 1|.
    pub fn unitarity_defect(&self) -> f64 {
        let e00 = self.u00.conj() * self.u00 + self.u10.conj() * self.u10;
        let e01 = self.u00.conj() * self.u01 + self.u10.conj() * self.u11;
        let e11 = self.u01.conj() * self.u01 + self.u11.conj() * self.u11;
        let one = Complex64::new(1.0, 0.0);
        (e00 - one)
            .norm()
            .max(e01.norm())
            .max((e11 - one).norm())
    }

    /// Matrix determinant; unit modulus for a unitary.
    pub fn determinant(&self) -> Complex64 {
        self.u00 * self.u11 - self.u01 * self.u10
    }
}

/// Expectation values (⟨σx⟩, ⟨σy⟩, ⟨σz⟩) of one state or ensemble mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl BlochState {
    /// Euclidean length; 1 for a pure state, the coherence for a mean.
    pub fn norm(self) -> f64 {
        (self.sx * self.sx + self.sy * self.sy + self.sz * self.sz).sqrt()
    }

    /// Length of the equatorial projection, the fringe contrast an analysis
    /// pulse sweep reads out. Any mean polar component is excluded: it shifts
    /// the fringe offset, not its amplitude.
    pub fn contrast(self) -> f64 {
        (self.sx * self.sx + self.sy * self.sy).sqrt()
    }

    /// Equatorial angle atan2(⟨σy⟩, ⟨σx⟩) in radians.
    pub fn azimuth(self) -> f64 {
        self.sy.atan2(self.sx)
    }
}

/// Ensemble average over noise realizations with bootstrap errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub mean_bloch: BlochState,
    /// Coherence: noise-induced suppression of the equatorial contrast,
    /// referenced to the same schedule run without noise so that
    /// deterministic transients divide out.
    pub nu: f64,
    pub nu_se: f64,
    /// Mean echo phase atan2(⟨σy⟩, ⟨σx⟩) in radians.
    pub phase: f64,
    pub phase_se: f64,
    /// Equatorial contrast of the noiseless reference run.
    pub reference_contrast: f64,
    pub n_realizations: usize,
}

/// Integration, noise and seeding choices shared by a batch of runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Requested integration step in seconds.
    pub dt: f64,
    /// Noise sample hold time in seconds.
    pub noise_dt: f64,
    /// Noise amplitude as σ/Ω₀.
    pub relative_amplitude: f64,
    /// Inverse noise correlation time Γ in 1/s.
    pub gamma: f64,
    /// Whether amplitude noise also acts during the ramps (not just the plateau).
    pub ramp_noise: bool,
    /// Share noise streams across protocols and orientations of equal geometry,
    /// for common-random-number contrasts.
    pub pair_seeds: bool,
    pub policy: AdiabaticRampPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            dt: 5e-11,
            noise_dt: 5e-11,
            relative_amplitude: 0.1,
            gamma: 1.0e7,
            ramp_noise: true,
            pair_seeds: false,
            policy: AdiabaticRampPolicy::default(),
        }
    }
}

impl EngineConfig {
    /// Checks steps, noise parameters and the ramp policy.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain("integration step must be positive".into()));
        }
        if !(self.noise_dt > 0.0 && self.noise_dt.is_finite()) {
            return Err(Error::Domain("noise hold time must be positive".into()));
        }
        if !(self.relative_amplitude >= 0.0 && self.relative_amplitude.is_finite()) {
            return Err(Error::Domain(
                "relative noise amplitude must be nonnegative".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain("noise rate must be positive".into()));
        }
        self.policy.validate()
    }

    /// Noise parameters for a drive of plateau amplitude `omega0`.
    pub fn ou_params(&self, omega0: f64) -> Result<OUParams> {
        OUParams::from_relative_amplitude(self.relative_amplitude, omega0, self.gamma)
    }
}

enum Op {
    Fixed(Rotor),
    Plateau {
        dt: f64,
        n_steps: usize,
        omega: f64,
        bz: f64,
        phi_start: f64,
        phi_end: f64,
        window: Option<u8>,
        offset: f64,
    },
    Ramp {
        seg: Segment,
        cos_phi: f64,
        sin_phi: f64,
    },
}

fn compile(schedule: &PulseSchedule) -> (Vec<Op>, usize) {
    let delta = schedule.spec.geometry.delta;
    let ops: Vec<Op> = schedule
        .segments
        .iter()
        .map(|seg| match seg.kind {
            SegmentKind::EchoPulse {
                axis_x,
                axis_y,
                angle,
            } => Op::Fixed(Rotor::from_axis_angle(axis_x, axis_y, 0.0, angle)),
            SegmentKind::Idle => Op::Fixed(Rotor::from_scaled_axis(
                0.0,
                0.0,
                delta * seg.duration,
            )),
            SegmentKind::Precession {
                omega,
                phi_start,
                phi_rate,
            } => Op::Plateau {
                dt: seg.dt,
                n_steps: seg.n_steps,
                omega,
                bz: delta - phi_rate,
                phi_start,
                phi_end: phi_start + phi_rate * seg.duration,
                window: seg.window,
                offset: seg.window_offset,
            },
            SegmentKind::RampUp { phi, .. } | SegmentKind::RampDown { phi, .. } => Op::Ramp {
                seg: *seg,
                cos_phi: phi.cos(),
                sin_phi: phi.sin(),
            },
        })
        .collect();
    let body_len = match schedule.segments.last() {
        Some(seg) if matches!(seg.kind, SegmentKind::EchoPulse { .. }) => ops.len() - 1,
        _ => ops.len(),
    };
    (ops, body_len)
}

struct Walker {
    rot: Rotor,
    steps: usize,
}

impl Walker {
    fn new() -> Walker {
        Walker {
            rot: Rotor::IDENTITY,
            steps: 0,
        }
    }

    fn push(&mut self, step: Rotor) {
        self.rot = step.times(self.rot);
        self.steps += 1;
        if self.steps % RENORM_INTERVAL == 0 {
            self.rot = self.rot.normalized();
        }
    }
}

fn lookup(noise: &NoiseTrace, window: Option<u8>, tau: f64) -> f64 {
    match window {
        Some(w) => noise.sample(w, tau),
        None => 0.0,
    }
}

fn ramp_node_field(
    seg: &Segment,
    delta: f64,
    cos_phi: f64,
    sin_phi: f64,
    noise: &NoiseTrace,
    t_local: f64,
) -> [f64; 3] {
    let (omega, _) = seg.envelope(delta.abs(), t_local);
    let amp = omega + lookup(noise, seg.window, seg.window_offset + t_local);
    [amp * cos_phi, amp * sin_phi, delta]
}

fn apply_ops(ops: &[Op], delta: f64, noise: &NoiseTrace) -> Result<Rotor> {
    let mut walker = Walker::new();
    for (index, op) in ops.iter().enumerate() {
        match op {
            Op::Fixed(rot) => walker.push(*rot),
            Op::Plateau {
                dt,
                n_steps,
                omega,
                bz,
                phi_start,
                phi_end,
                window,
                offset,
            } => {
                walker.push(Rotor::rz(-phi_start));
                for k in 0..*n_steps {
                    let tau = offset + (k as f64 + 0.5) * dt;
                    let amp = omega + lookup(noise, *window, tau);
                    walker.push(Rotor::from_scaled_axis(amp * dt, 0.0, bz * dt));
                }
                walker.push(Rotor::rz(*phi_end));
            }
            Op::Ramp {
                seg,
                cos_phi,
                sin_phi,
            } => {
                let dt = seg.dt;
                for k in 0..seg.n_steps {
                    let t0 = k as f64 * dt;
                    let b1 = ramp_node_field(
                        seg,
                        delta,
                        *cos_phi,
                        *sin_phi,
                        noise,
                        t0 + dt * (0.5 - GAUSS_SHIFT),
                    );
                    let b2 = ramp_node_field(
                        seg,
                        delta,
                        *cos_phi,
                        *sin_phi,
                        noise,
                        t0 + dt * (0.5 + GAUSS_SHIFT),
                    );
                    let c = cross(b2, b1);
                    let f = MAGNUS_CROSS * dt * dt;
                    walker.push(Rotor::from_scaled_axis(
                        0.5 * dt * (b1[0] + b2[0]) + f * c[0],
                        0.5 * dt * (b1[1] + b2[1]) + f * c[1],
                        0.5 * dt * (b1[2] + b2[2]) + f * c[2],
                    ));
                }
            }
        }
        if !walker.rot.is_finite() {
            return Err(Error::Numerical(format!(
                "state became non-finite while integrating segment {index}"
            )));
        }
    }
    Ok(walker.rot)
}

fn check_trace(schedule: &PulseSchedule, noise: &NoiseTrace) -> Result<()> {
    if noise.samples1.is_empty() && noise.samples2.is_empty() {
        return Ok(());
    }
    if !(noise.dt > 0.0 && noise.dt.is_finite()) {
        return Err(Error::GridMismatch(
            "noise hold time must be positive".into(),
        ));
    }
    let covered = noise.samples1.len().min(noise.samples2.len()) as f64 * noise.dt;
    if covered < schedule.window_span * (1.0 - 1e-9) {
        return Err(Error::GridMismatch(format!(
            "trace covers {covered:.3e} s of a {:.3e} s window",
            schedule.window_span
        )));
    }
    Ok(())
}

/// Composes the full schedule, pulses included, into one propagator.
///
/// Plateau steps are exact for noise held constant over each step; ramps carry
/// a fourth-order two-node Magnus rotation per step; pulses are exact. Errors
/// when a nonempty trace fails to cover the window span or the state turns
/// non-finite.
pub fn propagate(schedule: &PulseSchedule, noise: &NoiseTrace) -> Result<Unitary2> {
    check_trace(schedule, noise)?;
    let (ops, _) = compile(schedule);
    let rot = apply_ops(&ops, schedule.spec.geometry.delta, noise)?;
    Ok(rot.to_unitary())
}

/// Evolves one noise realization and returns the Bloch vector at readout.
///
/// The state starts in the detuning-aligned ground state, −sgn(Δ)ẑ, and is
/// carried through every segment except the trailing readout pulse, which only
/// fixes the measurement frame; the returned vector's equatorial angle is the
/// echo phase and its length is 1 up to roundoff.
pub fn run_realization(schedule: &PulseSchedule, noise: &NoiseTrace) -> Result<BlochState> {
    check_trace(schedule, noise)?;
    let (ops, body_len) = compile(schedule);
    let delta = schedule.spec.geometry.delta;
    let rot = apply_ops(&ops[..body_len], delta, noise)?;
    let ground = if delta > 0.0 { -1.0 } else { 1.0 };
    let v = rot.rotate([0.0, 0.0, ground]);
    Ok(BlochState {
        sx: v[0],
        sy: v[1],
        sz: v[2],
    })
}

fn ensemble_salt_parts(spec: &ProtocolSpec, config: &EngineConfig) -> Vec<String> {
    let mut parts = vec![
        "trace".to_string(),
        format!("{:016x}", spec.geometry.theta.to_bits()),
        format!("{:016x}", spec.geometry.t_window.to_bits()),
        format!("{:016x}", config.noise_dt.to_bits()),
        format!("{:016x}", config.relative_amplitude.to_bits()),
        format!("{:016x}", config.gamma.to_bits()),
    ];
    if !config.pair_seeds {
        parts.push(spec.protocol.label().to_string());
        parts.push(spec.curve().label().to_string());
    }
    parts
}

fn ensemble_salt(spec: &ProtocolSpec, config: &EngineConfig) -> u64 {
    let parts = ensemble_salt_parts(spec, config);
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    salt_from_parts(&refs)
}

fn bootstrap_salt(spec: &ProtocolSpec, config: &EngineConfig) -> u64 {
    let mut parts = ensemble_salt_parts(spec, config);
    parts.push("bootstrap".to_string());
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    salt_from_parts(&refs)
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn bootstrap_errors(
    vectors: &[[f64; 3]],
    nu: f64,
    phase: f64,
    key: [u8; 32],
) -> (f64, f64) {
    let n = vectors.len();
    let mut nus = Vec::with_capacity(BOOTSTRAP_REPLICAS);
    let mut dphis = Vec::with_capacity(BOOTSTRAP_REPLICAS);
    for b in 0..BOOTSTRAP_REPLICAS {
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(b as u64);
        let mut sum = [0.0f64; 3];
        for _ in 0..n {
            let v = vectors[rng.random_range(0..n)];
            sum[0] += v[0];
            sum[1] += v[1];
            sum[2] += v[2];
        }
        let m = [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64];
        let nu_b = (m[0] * m[0] + m[1] * m[1]).sqrt();
        nus.push(nu_b);
        dphis.push(wrap_to_pi(m[1].atan2(m[0]) - phase));
    }
    let _ = nu;
    (sample_std(&nus), sample_std(&dphis))
}

/// Averages Bloch vectors over `n_realizations` noise draws.
///
/// Realization r always consumes streams 2r and 2r+1 of a key derived from the
/// base seed, the cell geometry and the noise parameters, so results do not
/// depend on evaluation order or worker count. With `pair_seeds` the key drops
/// the protocol and curve labels, giving matched noise across cells of equal
/// geometry. Zero noise amplitude collapses to a single noiseless run with
/// zero standard errors.
pub fn run_ensemble(
    spec: &ProtocolSpec,
    config: &EngineConfig,
    n_realizations: usize,
    base_seed: u64,
) -> Result<EnsembleResult> {
    config.validate()?;
    if n_realizations < 2 {
        return Err(Error::InsufficientData(
            "ensembles need at least two realizations".into(),
        ));
    }
    let schedule = build_schedule(spec, &config.policy, config.dt)?;
    let quiet = run_realization(&schedule, &NoiseTrace::zero(spec.correlation_mode))?;
    let reference = quiet.contrast();
    if reference < MIN_REFERENCE_CONTRAST {
        return Err(Error::Numerical(format!(
            "noiseless reference contrast {reference:.3e} is too small to calibrate \
             against; the schedule is too far from adiabatic"
        )));
    }
    if config.relative_amplitude == 0.0 {
        return Ok(EnsembleResult {
            mean_bloch: quiet,
            nu: 1.0,
            nu_se: 0.0,
            phase: quiet.azimuth(),
            phase_se: 0.0,
            reference_contrast: reference,
            n_realizations,
        });
    }
    let params = config.ou_params(spec.geometry.omega0)?;
    let key = trace_key(base_seed, ensemble_salt(spec, config));
    let ramp_spans = schedule.ramp_spans();
    let vectors: Vec<[f64; 3]> = (0..n_realizations as u64)
        .into_par_iter()
        .map(|r| -> Result<[f64; 3]> {
            let mut trace = paired_traces_from_key(
                &params,
                spec.correlation_mode,
                schedule.window_span,
                config.noise_dt,
                key,
                r,
                base_seed,
            )?;
            if !config.ramp_noise {
                trace.zero_spans(&ramp_spans);
            }
            let v = run_realization(&schedule, &trace)?;
            Ok([v.sx, v.sy, v.sz])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = [0.0f64; 3];
    for v in &vectors {
        sum[0] += v[0];
        sum[1] += v[1];
        sum[2] += v[2];
    }
    let n = n_realizations as f64;
    let mean = BlochState {
        sx: sum[0] / n,
        sy: sum[1] / n,
        sz: sum[2] / n,
    };
    let nu = mean.contrast() / reference;
    let phase = mean.azimuth();
    let (contrast_se, phase_se) = bootstrap_errors(
        &vectors,
        nu,
        phase,
        trace_key(base_seed, bootstrap_salt(spec, config)),
    );
    Ok(EnsembleResult {
        mean_bloch: mean,
        nu,
        nu_se: contrast_se / reference,
        phase,
        phase_se,
        reference_contrast: reference,
        n_realizations,
    })
}

/// One line of a sweep table: the cell identity plus its ensemble estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub protocol: Protocol,
    pub curve: Curve,
    pub mode: crate::noise::CorrelationMode,
    /// Signed solid angle per window in steradians.
    pub solid_angle: f64,
    pub n_loops: i32,
    pub t_window: f64,
    pub result: EnsembleResult,
}

/// Runs one ensemble per spec, preserving order.
pub fn sweep(
    specs: &[ProtocolSpec],
    config: &EngineConfig,
    n_realizations: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>> {
    specs
        .iter()
        .map(|spec| {
            let result = run_ensemble(spec, config, n_realizations, base_seed)?;
            Ok(SweepRow {
                protocol: spec.protocol,
                curve: spec.curve(),
                mode: spec.correlation_mode,
                solid_angle: spec.geometry.solid_angle(),
                n_loops: spec.geometry.n_loops,
                t_window: spec.geometry.t_window,
                result,
            })
        })
        .collect()
}

/// Builds the standard three-curve sweep for one protocol and mode.
///
/// For an orientation-carrying protocol the blocks are: the positive-n curve
/// over the angle grid, the static reference, then the negative-n curve with
/// mirrored solid angles. The static protocol yields its single block.
pub fn protocol_sweep_points(
    protocol: Protocol,
    mode: crate::noise::CorrelationMode,
    angles: &[f64],
    n_loops: i32,
    delta: f64,
    t_window: f64,
) -> Result<Vec<ProtocolSpec>> {
    if n_loops <= 0 {
        return Err(Error::Domain(
            "loop count must be positive; curve blocks set the orientation".into(),
        ));
    }
    let mut specs = Vec::new();
    if protocol != Protocol::Dp {
        for &a in angles {
            let geom = Geometry::from_solid_angle(a, n_loops, delta, t_window)?;
            specs.push(ProtocolSpec::new(protocol, mode, geom)?);
        }
    }
    for &a in angles {
        let geom = Geometry::from_solid_angle(a, n_loops, delta, t_window)?;
        specs.push(ProtocolSpec::new(Protocol::Dp, mode, geom)?);
    }
    if protocol != Protocol::Dp {
        for &a in angles {
            let geom = Geometry::from_solid_angle(-a, -n_loops, delta, t_window)?;
            specs.push(ProtocolSpec::new(protocol, mode, geom)?);
        }
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{
        mean_total_phase, predict, protocol_factors, suppression_factor, wrap_to_pi,
    };
    use crate::model::DEFAULT_DELTA;
    use crate::noise::CorrelationMode;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};

    fn spec_for(
        protocol: Protocol,
        mode: CorrelationMode,
        solid_angle: f64,
        n_loops: i32,
        t_window: f64,
    ) -> ProtocolSpec {
        let geom = Geometry::from_solid_angle(solid_angle, n_loops, DEFAULT_DELTA, t_window)
            .unwrap();
        ProtocolSpec::new(protocol, mode, geom).unwrap()
    }

    fn rodrigues(axis: [f64; 3], angle: f64, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = angle.sin_cos();
        let k = axis;
        let kv = cross(k, v);
        let kdv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
        [
            v[0] * c + kv[0] * s + k[0] * kdv * (1.0 - c),
            v[1] * c + kv[1] * s + k[1] * kdv * (1.0 - c),
            v[2] * c + kv[2] * s + k[2] * kdv * (1.0 - c),
        ]
    }

    #[test]
    fn rotor_algebra_matches_rodrigues_rotation() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut axis = [0.0f64; 3];
            for a in &mut axis {
                *a = rng.random_range(-1.0..1.0);
            }
            let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
            if n < 1e-3 {
                continue;
            }
            let axis = [axis[0] / n, axis[1] / n, axis[2] / n];
            let angle = rng.random_range(-6.0..6.0);
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let q = Rotor::from_axis_angle(axis[0], axis[1], axis[2], angle);
            let got = q.rotate(v);
            let want = rodrigues(axis, angle, v);
            for i in 0..3 {
                assert_relative_eq!(got[i], want[i], epsilon = 1e-12);
            }
            let scaled = Rotor::from_scaled_axis(
                axis[0] * angle.abs(),
                axis[1] * angle.abs(),
                axis[2] * angle.abs(),
            );
            let direct = Rotor::from_axis_angle(axis[0], axis[1], axis[2], angle.abs());
            assert_relative_eq!(scaled.w, direct.w, epsilon = 1e-14);
            assert_relative_eq!(scaled.x, direct.x, epsilon = 1e-14);

            let q2 = Rotor::from_axis_angle(axis[1], axis[2], axis[0], 0.7 * angle);
            let composed = q2.times(q).rotate(v);
            let sequential = q2.rotate(q.rotate(v));
            for i in 0..3 {
                assert_relative_eq!(composed[i], sequential[i], epsilon = 1e-12);
            }
        }
        let tiny = Rotor::from_scaled_axis(1e-9, 0.0, 0.0);
        assert_relative_eq!(tiny.x, 5e-10, max_relative = 1e-12);
        assert_relative_eq!(tiny.w, 1.0, epsilon = 1e-15);
    }

    fn matmul(a: &Unitary2, b: &Unitary2) -> Unitary2 {
        Unitary2 {
            u00: a.u00 * b.u00 + a.u01 * b.u10,
            u01: a.u00 * b.u01 + a.u01 * b.u11,
            u10: a.u10 * b.u00 + a.u11 * b.u10,
            u11: a.u10 * b.u01 + a.u11 * b.u11,
        }
    }

    fn entries_close(a: &Unitary2, b: &Unitary2, tol: f64) {
        assert!((a.u00 - b.u00).norm() < tol, "u00 {} vs {}", a.u00, b.u00);
        assert!((a.u01 - b.u01).norm() < tol, "u01 {} vs {}", a.u01, b.u01);
        assert!((a.u10 - b.u10).norm() < tol, "u10 {} vs {}", a.u10, b.u10);
        assert!((a.u11 - b.u11).norm() < tol, "u11 {} vs {}", a.u11, b.u11);
    }

    #[test]
    fn unitary_form_mirrors_the_quaternion_algebra() {
        let xi = 0.83;
        let u = Rotor::rz(xi).to_unitary();
        assert_relative_eq!(u.u00.re, (0.5 * xi).cos(), epsilon = 1e-15);
        assert_relative_eq!(u.u00.im, -(0.5 * xi).sin(), epsilon = 1e-15);
        assert_eq!(u.u01, Complex64::new(0.0, 0.0));
        assert_eq!(u.u10, Complex64::new(0.0, 0.0));
        assert_relative_eq!(u.u11.im, (0.5 * xi).sin(), epsilon = 1e-15);

        let ux = Rotor::from_axis_angle(1.0, 0.0, 0.0, FRAC_PI_2).to_unitary();
        let c = (0.25 * PI).cos();
        assert_relative_eq!(ux.u00.re, c, epsilon = 1e-15);
        assert_relative_eq!(ux.u01.im, -c, epsilon = 1e-15);
        assert_relative_eq!(ux.u10.im, -c, epsilon = 1e-15);

        let q1 = Rotor::from_axis_angle(0.6, 0.0, 0.8, 1.1);
        let q2 = Rotor::from_axis_angle(0.0, 1.0, 0.0, -0.4);
        let lhs = q2.times(q1).to_unitary();
        let rhs = matmul(&q2.to_unitary(), &q1.to_unitary());
        entries_close(&lhs, &rhs, 1e-14);
        assert!(lhs.unitarity_defect() < 1e-14);
        assert_relative_eq!(lhs.determinant().norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn static_field_evolution_matches_the_closed_form() {
        let geom = Geometry::from_solid_angle(FRAC_PI_2, 1, TAU * 35.0e6, 100e-9).unwrap();
        let spec = ProtocolSpec::new(Protocol::Dp, CorrelationMode::Correlated, geom).unwrap();
        let tau = 13e-9;
        let n_steps = 260;
        let seg = Segment {
            kind: SegmentKind::Precession {
                omega: geom.omega0,
                phi_start: 0.0,
                phi_rate: 0.0,
            },
            duration: tau,
            dt: tau / n_steps as f64,
            n_steps,
            window: None,
            window_offset: 0.0,
        };
        let sched = PulseSchedule {
            spec,
            dt_requested: seg.dt,
            segments: vec![seg],
            window_span: tau,
            ramp_duration: 0.0,
            theta_rate: 0.0,
            total_duration: tau,
        };
        let quiet = NoiseTrace::zero(CorrelationMode::Correlated);
        let got = propagate(&sched, &quiet).unwrap();
        let want = Rotor::from_scaled_axis(geom.omega0 * tau, 0.0, geom.delta * tau).to_unitary();
        entries_close(&got, &want, 1e-12);

        let empty = PulseSchedule {
            segments: Vec::new(),
            total_duration: 0.0,
            ..sched
        };
        entries_close(
            &propagate(&empty, &quiet).unwrap(),
            &Unitary2::identity(),
            1e-15,
        );
    }

    #[test]
    fn step_halving_leaves_noiseless_runs_unchanged() {
        let policy = AdiabaticRampPolicy::default();
        let quiet = NoiseTrace::zero(CorrelationMode::Correlated);
        for protocol in [Protocol::R, Protocol::P, Protocol::Dp] {
            let spec = spec_for(protocol, CorrelationMode::Correlated, FRAC_PI_2, 1, 100e-9);
            let coarse = build_schedule(&spec, &policy, 5e-11).unwrap();
            let fine = build_schedule(&spec, &policy, 2.5e-11).unwrap();
            let a = run_realization(&coarse, &quiet).unwrap();
            let b = run_realization(&fine, &quiet).unwrap();
            assert!(
                (a.sx - b.sx).abs() < 1e-6
                    && (a.sy - b.sy).abs() < 1e-6
                    && (a.sz - b.sz).abs() < 1e-6,
                "{protocol:?}: {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn a_constant_amplitude_offset_integrates_exactly() {
        let spec = spec_for(Protocol::R, CorrelationMode::Correlated, FRAC_PI_2, 1, 1e-6);
        let policy = AdiabaticRampPolicy::default();
        let coarse = build_schedule(&spec, &policy, 5e-11).unwrap();
        let fine = build_schedule(&spec, &policy, 2.5e-11).unwrap();
        let offset = 0.2 * spec.geometry.omega0;
        let noise = NoiseTrace::constant(
            CorrelationMode::Correlated,
            offset,
            coarse.window_span,
            5e-11,
        );
        let a = run_realization(&coarse, &noise).unwrap();
        let b = run_realization(&fine, &noise).unwrap();
        assert!(
            (a.sx - b.sx).abs() < 1e-8
                && (a.sy - b.sy).abs() < 1e-8
                && (a.sz - b.sz).abs() < 1e-8,
            "{a:?} vs {b:?}"
        );

        // A small offset confined to the plateaus shifts each window's
        // precession rate to the closed-form value; the shift itself is a
        // fifth of a radian here, far above the tolerance.
        let gentle = AdiabaticRampPolicy {
            s_target: 0.0125,
            ..AdiabaticRampPolicy::default()
        };
        let sched = build_schedule(&spec, &gentle, 5e-11).unwrap();
        let small = 0.05 * spec.geometry.omega0;
        let mut plateau_only = NoiseTrace::constant(
            CorrelationMode::Correlated,
            small,
            sched.window_span,
            5e-11,
        );
        plateau_only.zero_spans(&sched.ramp_spans());
        let v = run_realization(&sched, &plateau_only).unwrap();
        let geom = &spec.geometry;
        let g = |s: f64| (geom.delta.abs() - s * geom.omega_b).hypot(geom.omega0 + small);
        let shifted = geom.t_window * (g(1.0) - g(-1.0));
        assert!(
            wrap_to_pi(v.azimuth() - shifted).abs() < 1e-2,
            "azimuth {} vs shifted-plateau value {}",
            v.azimuth(),
            wrap_to_pi(shifted)
        );
    }

    #[test]
    fn unitarity_holds_across_the_longest_noisy_schedule() {
        let spec = spec_for(
            Protocol::R,
            CorrelationMode::Uncorrelated,
            0.75 * PI,
            1,
            1e-6,
        );
        let sched = build_schedule(&spec, &AdiabaticRampPolicy::default(), 5e-11).unwrap();
        let params = OUParams::from_relative_amplitude(0.1, spec.geometry.omega0, 1e7).unwrap();
        let noise = paired_traces_from_key(
            &params,
            CorrelationMode::Uncorrelated,
            sched.window_span,
            5e-11,
            trace_key(42, 0),
            0,
            42,
        )
        .unwrap();
        let u = propagate(&sched, &noise).unwrap();
        assert!(u.unitarity_defect() < 1e-8, "defect {}", u.unitarity_defect());
        assert!((u.determinant().norm() - 1.0).abs() < 1e-8);
        let v = run_realization(&sched, &noise).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-9, "norm {}", v.norm());
    }

    #[test]
    fn noiseless_phases_track_the_loop_geometry() {
        // Ramp-corner transients scale as the square of the shaping target, so
        // the oracle comparison uses gently shaped ramps; default shaping is
        // smoke-checked at the end.
        let gentle = AdiabaticRampPolicy {
            s_target: 0.0125,
            ..AdiabaticRampPolicy::default()
        };
        let quiet = NoiseTrace::zero(CorrelationMode::Correlated);
        for &angle in &[PI / 16.0, FRAC_PI_4, FRAC_PI_2, 0.75 * PI] {
            for n in [1i32, -1] {
                let signed = angle * f64::from(n);
                let spec = spec_for(Protocol::R, CorrelationMode::Correlated, signed, n, 1e-6);
                let sched = build_schedule(&spec, &gentle, 5e-11).unwrap();
                let v = run_realization(&sched, &quiet).unwrap();
                assert!((v.norm() - 1.0).abs() < 1e-9);
                let oracle = mean_total_phase(Protocol::R, &spec.geometry);
                let dev = wrap_to_pi(v.azimuth() - oracle).abs();
                assert!(
                    dev < 6e-3,
                    "A={signed:.4}: azimuth {} vs oracle {}, dev {dev:.2e}",
                    v.azimuth(),
                    wrap_to_pi(oracle)
                );
                let two_a = wrap_to_pi(v.azimuth() - 2.0 * spec.geometry.solid_angle()).abs();
                assert!(two_a < 8e-3, "A={signed:.4}: 2A deviation {two_a:.2e}");
            }
            for protocol in [Protocol::P, Protocol::Dp] {
                let spec = spec_for(protocol, CorrelationMode::Correlated, angle, 1, 1e-6);
                let sched = build_schedule(&spec, &gentle, 5e-11).unwrap();
                let v = run_realization(&sched, &quiet).unwrap();
                assert!(
                    wrap_to_pi(v.azimuth()).abs() < 5e-3,
                    "{protocol:?} at A={angle:.4}: phase {}",
                    v.azimuth()
                );
            }
        }

        let spec = spec_for(Protocol::R, CorrelationMode::Correlated, FRAC_PI_2, 1, 1e-6);
        let sched = build_schedule(&spec, &AdiabaticRampPolicy::default(), 5e-11).unwrap();
        let v = run_realization(&sched, &quiet).unwrap();
        let dev = wrap_to_pi(v.azimuth() - mean_total_phase(Protocol::R, &spec.geometry)).abs();
        assert!(dev < 1.0, "default shaping drifted by {dev:.3}");
    }

    #[test]
    fn zero_variance_ensembles_are_fully_coherent() {
        let spec = spec_for(Protocol::R, CorrelationMode::Uncorrelated, FRAC_PI_2, 1, 100e-9);
        let config = EngineConfig {
            relative_amplitude: 0.0,
            ..EngineConfig::default()
        };
        let out = run_ensemble(&spec, &config, 400, 7).unwrap();
        assert!(
            (out.mean_bloch.norm() - 1.0).abs() < 1e-9,
            "noiseless run must stay pure, norm {}",
            out.mean_bloch.norm()
        );
        assert_eq!(out.nu, 1.0);
        assert!(
            out.reference_contrast > 0.9 && out.reference_contrast <= 1.0 + 1e-12,
            "reference contrast {} outside the coherent-transient budget",
            out.reference_contrast
        );
        assert_eq!(out.nu_se, 0.0);
        assert_eq!(out.phase_se, 0.0);
        assert_eq!(out.n_realizations, 400);
        assert!(run_ensemble(&spec, &config, 1, 7).is_err());
    }

    #[test]
    fn ensembles_are_deterministic_across_runs_and_pools() {
        let spec = spec_for(
            Protocol::R,
            CorrelationMode::FirstWindowOnly,
            FRAC_PI_2,
            1,
            100e-9,
        );
        let config = EngineConfig::default();
        let a = run_ensemble(&spec, &config, 64, 3).unwrap();
        let b = run_ensemble(&spec, &config, 64, 3).unwrap();
        assert_eq!(a.nu.to_bits(), b.nu.to_bits());
        assert_eq!(a.nu_se.to_bits(), b.nu_se.to_bits());
        assert_eq!(a.phase.to_bits(), b.phase.to_bits());
        assert_eq!(a.mean_bloch.sx.to_bits(), b.mean_bloch.sx.to_bits());

        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_ensemble(&spec, &config, 64, 3).unwrap());
        let wide = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run_ensemble(&spec, &config, 64, 3).unwrap());
        assert_eq!(single.nu.to_bits(), wide.nu.to_bits());
        assert_eq!(single.nu_se.to_bits(), wide.nu_se.to_bits());
        assert_eq!(single.phase.to_bits(), wide.phase.to_bits());

        let other = run_ensemble(&spec, &config, 64, 4).unwrap();
        assert_ne!(a.nu.to_bits(), other.nu.to_bits());
    }

    #[test]
    fn trace_pairing_follows_the_seed_policy() {
        let paired = EngineConfig {
            pair_seeds: true,
            ..EngineConfig::default()
        };
        let unpaired = EngineConfig::default();
        let plus = spec_for(Protocol::P, CorrelationMode::FirstWindowOnly, FRAC_PI_2, 1, 100e-9);
        let minus = spec_for(
            Protocol::P,
            CorrelationMode::FirstWindowOnly,
            -FRAC_PI_2,
            -1,
            100e-9,
        );
        let reversed = spec_for(
            Protocol::R,
            CorrelationMode::FirstWindowOnly,
            FRAC_PI_2,
            1,
            100e-9,
        );
        assert_eq!(ensemble_salt(&plus, &paired), ensemble_salt(&minus, &paired));
        assert_eq!(ensemble_salt(&plus, &paired), ensemble_salt(&reversed, &paired));
        assert_ne!(
            ensemble_salt(&plus, &unpaired),
            ensemble_salt(&minus, &unpaired)
        );
        assert_ne!(
            ensemble_salt(&plus, &unpaired),
            ensemble_salt(&reversed, &unpaired)
        );

        let policy = AdiabaticRampPolicy::default();
        let sched_plus = build_schedule(&plus, &policy, 5e-11).unwrap();
        let sched_minus = build_schedule(&minus, &policy, 5e-11).unwrap();
        let params = OUParams::from_relative_amplitude(0.1, plus.geometry.omega0, 1e7).unwrap();
        let key = trace_key(17, ensemble_salt(&plus, &paired));
        let n = 200;
        let mut vp = Vec::with_capacity(n);
        let mut vm = Vec::with_capacity(n);
        for r in 0..n as u64 {
            let mut trace = paired_traces_from_key(
                &params,
                CorrelationMode::FirstWindowOnly,
                sched_plus.window_span,
                5e-11,
                key,
                r,
                17,
            )
            .unwrap();
            trace.zero_spans(&sched_plus.ramp_spans());
            vp.push(run_realization(&sched_plus, &trace).unwrap());
            vm.push(run_realization(&sched_minus, &trace).unwrap());
        }
        let mean = |vs: &[BlochState]| {
            let mut s = [0.0; 3];
            for v in vs {
                s[0] += v.sx;
                s[1] += v.sy;
                s[2] += v.sz;
            }
            [s[0] / vs.len() as f64, s[1] / vs.len() as f64, s[2] / vs.len() as f64]
        };
        let norm3 = |m: [f64; 3]| (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        let contrast = norm3(mean(&vm)).ln() - norm3(mean(&vp)).ln();

        let factors = protocol_factors(Protocol::P, CorrelationMode::FirstWindowOnly);
        let e_plus = suppression_factor(&factors, &plus.geometry, &params).exponent;
        let e_minus = suppression_factor(&factors, &minus.geometry, &params).exponent;
        let predicted = e_plus - e_minus;
        assert!(predicted > 0.2, "expected a sizable orientation contrast");

        let mut sp = [0.0; 3];
        let mut sm = [0.0; 3];
        for (p, m) in vp.iter().zip(&vm) {
            sp = [sp[0] + p.sx, sp[1] + p.sy, sp[2] + p.sz];
            sm = [sm[0] + m.sx, sm[1] + m.sy, sm[2] + m.sz];
        }
        let nf = (n - 1) as f64;
        let mut jack = Vec::with_capacity(n);
        for (p, m) in vp.iter().zip(&vm) {
            let mp = [(sp[0] - p.sx) / nf, (sp[1] - p.sy) / nf, (sp[2] - p.sz) / nf];
            let mm = [(sm[0] - m.sx) / nf, (sm[1] - m.sy) / nf, (sm[2] - m.sz) / nf];
            jack.push(norm3(mm).ln() - norm3(mp).ln());
        }
        let jbar = jack.iter().sum::<f64>() / n as f64;
        let se = (jack.iter().map(|j| (j - jbar).powi(2)).sum::<f64>() * nf / n as f64).sqrt();
        assert!(
            (contrast - predicted).abs() < 3.0 * se + 0.01,
            "contrast {contrast:.4} vs {predicted:.4}, jackknife se {se:.4}"
        );
    }

    #[test]
    fn grid_checks_reject_short_or_broken_traces() {
        let spec = spec_for(Protocol::R, CorrelationMode::Correlated, FRAC_PI_2, 1, 100e-9);
        let sched = build_schedule(&spec, &AdiabaticRampPolicy::default(), 5e-11).unwrap();
        let short = NoiseTrace::constant(
            CorrelationMode::Correlated,
            1e6,
            0.5 * sched.window_span,
            5e-11,
        );
        assert!(matches!(
            propagate(&sched, &short),
            Err(Error::GridMismatch(_))
        ));
        assert!(matches!(
            run_realization(&sched, &short),
            Err(Error::GridMismatch(_))
        ));
        let mut broken = NoiseTrace::constant(
            CorrelationMode::Correlated,
            1e6,
            sched.window_span,
            5e-11,
        );
        broken.samples1[10] = f64::NAN;
        assert!(matches!(
            run_realization(&sched, &broken),
            Err(Error::Numerical(_))
        ));
        let full = NoiseTrace::constant(
            CorrelationMode::Correlated,
            1e6,
            sched.window_span,
            5e-11,
        );
        assert!(run_realization(&sched, &full).is_ok());
        assert!(run_realization(&sched, &NoiseTrace::zero(CorrelationMode::Correlated)).is_ok());
    }

    #[test]
    fn sweeps_tabulate_curves_in_block_order() {
        let angles: Vec<f64> = (1..=12).map(|k| k as f64 * PI / 16.0).collect();
        let specs = protocol_sweep_points(
            Protocol::P,
            CorrelationMode::FirstWindowOnly,
            &angles,
            1,
            DEFAULT_DELTA,
            100e-9,
        )
        .unwrap();
        assert_eq!(specs.len(), 36);
        assert!(specs[..12].iter().all(|s| s.curve() == Curve::PlusPlus));
        assert!(specs[12..24].iter().all(|s| s.curve() == Curve::Dp));
        assert!(specs[24..].iter().all(|s| s.curve() == Curve::MinusMinus));
        assert!(specs[24..].iter().all(|s| s.geometry.n_loops == -1));
        assert!(specs[24..].iter().all(|s| s.geometry.solid_angle() < 0.0));

        let reversed = protocol_sweep_points(
            Protocol::R,
            CorrelationMode::Correlated,
            &angles[..2],
            1,
            DEFAULT_DELTA,
            100e-9,
        )
        .unwrap();
        assert_eq!(reversed.len(), 6);
        assert_eq!(reversed[0].curve(), Curve::PlusMinus);
        assert_eq!(reversed[4].curve(), Curve::MinusPlus);

        let only_dp = protocol_sweep_points(
            Protocol::Dp,
            CorrelationMode::Correlated,
            &angles,
            1,
            DEFAULT_DELTA,
            100e-9,
        )
        .unwrap();
        assert_eq!(only_dp.len(), 12);

        let config = EngineConfig {
            relative_amplitude: 0.0,
            ..EngineConfig::default()
        };
        let rows = sweep(&specs, &config, 2, 1).unwrap();
        assert_eq!(rows.len(), 36);
        for (row, spec) in rows.iter().zip(&specs) {
            assert_eq!(row.protocol, spec.protocol);
            assert_eq!(row.curve, spec.curve());
            assert!((row.result.mean_bloch.norm() - 1.0).abs() < 1e-9);
            assert_eq!(row.result.nu, 1.0);
            assert_relative_eq!(row.solid_angle, spec.geometry.solid_angle(), epsilon = 1e-12);
        }
    }

    #[test]
    fn silencing_ramp_noise_raises_coherence() {
        let spec = spec_for(
            Protocol::R,
            CorrelationMode::FirstWindowOnly,
            FRAC_PI_2,
            1,
            100e-9,
        );
        let policy = AdiabaticRampPolicy::default();
        let sched = build_schedule(&spec, &policy, 5e-11).unwrap();
        let params = OUParams::from_relative_amplitude(0.1, spec.geometry.omega0, 1e7).unwrap();
        let config = EngineConfig::default();
        let key = trace_key(5, ensemble_salt(&spec, &config));
        let n = 200;
        let mut sum_on = [0.0f64; 3];
        let mut sum_off = [0.0f64; 3];
        for r in 0..n as u64 {
            let trace = paired_traces_from_key(
                &params,
                CorrelationMode::FirstWindowOnly,
                sched.window_span,
                5e-11,
                key,
                r,
                5,
            )
            .unwrap();
            let v = run_realization(&sched, &trace).unwrap();
            sum_on = [sum_on[0] + v.sx, sum_on[1] + v.sy, sum_on[2] + v.sz];
            let mut silenced = trace.clone();
            silenced.zero_spans(&sched.ramp_spans());
            let v = run_realization(&sched, &silenced).unwrap();
            sum_off = [sum_off[0] + v.sx, sum_off[1] + v.sy, sum_off[2] + v.sz];
        }
        let nu = |s: [f64; 3]| {
            ((s[0] / n as f64).powi(2) + (s[1] / n as f64).powi(2) + (s[2] / n as f64).powi(2))
                .sqrt()
        };
        let gain = nu(sum_off).ln() - nu(sum_on).ln();
        assert!(
            (0.04..0.9).contains(&gain),
            "ramp noise exposure changed ln nu by {gain:.4}"
        );
    }

    #[test]
    fn the_analytic_suppression_matches_monte_carlo() {
        let config = EngineConfig {
            ramp_noise: false,
            ..EngineConfig::default()
        };
        let n = 600;
        let seed = 2024;
        let mut nus = Vec::new();
        for (protocol, orientation) in [(Protocol::R, 1), (Protocol::Dp, 1), (Protocol::R, -1)] {
            let spec = spec_for(
                protocol,
                CorrelationMode::FirstWindowOnly,
                FRAC_PI_2 * f64::from(orientation),
                orientation,
                100e-9,
            );
            let params = config.ou_params(spec.geometry.omega0).unwrap();
            let predicted = predict(
                protocol,
                CorrelationMode::FirstWindowOnly,
                &spec.geometry,
                &params,
            )
            .nu;
            let out = run_ensemble(&spec, &config, n, seed).unwrap();
            assert!(
                (out.nu - predicted).abs() < 3.0 * out.nu_se,
                "{protocol:?} n={orientation}: nu {:.4} vs predicted {predicted:.4}, se {:.4}",
                out.nu,
                out.nu_se
            );
            nus.push(out.nu);
        }
        assert!(
            nus[0] < nus[1] && nus[1] < nus[2],
            "ordering violated: {nus:?}"
        );
    }
}
