//! Closed-form coherence and phase predictions for noisy field loops.
//!
//! Everything here describes the precession plateau alone; the short amplitude
//! ramps are validated against the simulation by dedicated tests instead of
//! being folded into these formulas. Decay exponents follow the split into a
//! dynamic term, an orientation-odd geometric term linear in the loop rate,
//! and a non-adiabatic term quadratic in the loop rate.

use serde::{Deserialize, Serialize};

use crate::model::{Geometry, Protocol};
use crate::noise::{integrated_correlator_ou, CorrelationMode, NoiseTrace, OUParams};
use crate::{Error, Result};

/// Decoherence factors (a, b, c) for one protocol and correlation mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DephasingFactors {
    /// Weight of the dynamic (orientation-even) exponent term.
    pub a: f64,
    /// Weight of the geometric (orientation-odd) exponent term.
    pub b: f64,
    /// Weight of the non-adiabatic loop-rate-squared exponent term.
    pub c: f64,
}

/// The factor table over all protocol and correlation-mode cells.
pub fn protocol_factors(protocol: Protocol, mode: CorrelationMode) -> DephasingFactors {
    use CorrelationMode::*;
    let (a, b, c) = match protocol {
        Protocol::P => match mode {
            Correlated => (0.0, 0.0, 0.0),
            Anticorrelated => (4.0, 4.0, 4.0),
            Uncorrelated => (2.0, 2.0, 2.0),
            FirstWindowOnly => (1.0, 1.0, 1.0),
        },
        Protocol::R => match mode {
            Correlated => (0.0, 0.0, 4.0),
            Anticorrelated => (4.0, 0.0, 0.0),
            Uncorrelated => (2.0, 0.0, 2.0),
            FirstWindowOnly => (1.0, 1.0, 1.0),
        },
        Protocol::Dp => match mode {
            Correlated => (0.0, 0.0, 0.0),
            Anticorrelated => (4.0, 0.0, 0.0),
            Uncorrelated => (2.0, 0.0, 0.0),
            FirstWindowOnly => (1.0, 0.0, 0.0),
        },
    };
    DephasingFactors { a, b, c }
}

/// Angular weights (sin²θ, 2 cos θ sin²θ / G, (cos θ sin θ / G)²) that the
/// factors multiply in the decay exponent.
pub fn angular_factors(geometry: &Geometry) -> (f64, f64, f64) {
    let (sin, cos) = geometry.theta.sin_cos();
    let gap = geometry.gap();
    (
        sin * sin,
        2.0 * cos * sin * sin / gap,
        (cos * sin / gap).powi(2),
    )
}

/// One evaluated decay exponent, split into its three terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suppression {
    /// Predicted coherence ν = exp(−exponent).
    pub nu: f64,
    /// Total decay exponent.
    pub exponent: f64,
    /// Orientation-even term D·a·sin²θ.
    pub dynamic_term: f64,
    /// Orientation-odd term D·sgn(n)·b·(2 cos θ sin²θ / G)·ω_B.
    pub geometric_term: f64,
    /// Loop-rate-squared term D·c·(cos θ sin θ / G)²·ω_B².
    pub residual_term: f64,
}

/// Evaluates the decay exponent for given factors, geometry and noise.
pub fn suppression_factor(
    factors: &DephasingFactors,
    geometry: &Geometry,
    noise: &OUParams,
) -> Suppression {
    let (ang_a, ang_b, ang_c) = angular_factors(geometry);
    let d_t = integrated_correlator_ou(noise.sigma2, noise.gamma, geometry.t_window);
    let sign = f64::from(geometry.first_window_sign());
    let dynamic_term = d_t * factors.a * ang_a;
    let geometric_term = d_t * sign * factors.b * ang_b * geometry.omega_b;
    let residual_term = d_t * factors.c * ang_c * geometry.omega_b * geometry.omega_b;
    let exponent = dynamic_term + geometric_term + residual_term;
    Suppression {
        nu: (-exponent).exp(),
        exponent,
        dynamic_term,
        geometric_term,
        residual_term,
    }
}

/// Echo-phase variance derived directly from the window-difference algebra.
///
/// Each window responds to its integrated noise with weight
/// κ_w = sin θ + s_w ω_B sin θ cos θ / G for loop sense s_w, the integrated
/// noise of one window has variance 2·D(T), and the two windows combine with
/// the mode's correlation coefficient. This route is independent of the factor
/// table and must reproduce it.
pub fn variance_oracle(
    protocol: Protocol,
    mode: CorrelationMode,
    geometry: &Geometry,
    noise: &OUParams,
) -> f64 {
    let (sin, cos) = geometry.theta.sin_cos();
    let eps = geometry.omega_b * sin * cos / geometry.gap();
    let s1 = f64::from(geometry.first_window_sign());
    let (k1, k2) = match protocol {
        Protocol::P => (sin + s1 * eps, sin + s1 * eps),
        Protocol::R => (sin + s1 * eps, sin - s1 * eps),
        Protocol::Dp => (sin, sin),
    };
    let two_d = 2.0 * integrated_correlator_ou(noise.sigma2, noise.gamma, geometry.t_window);
    match mode {
        CorrelationMode::FirstWindowOnly => two_d * k1 * k1,
        _ => {
            let rho = mode.window_correlation();
            two_d * (k1 * k1 + k2 * k2 - 2.0 * rho * k1 * k2)
        }
    }
}

/// Accumulated phase ∫ √((|Δ| − s ω_B)² + (Ω₀ + δΩ)²) dt over one plateau.
///
/// `orientation` is the loop sense s of the chosen window (0 holds the field
/// still). The trace is read zero-order-held with τ = 0 at the plateau start;
/// an empty trace yields the closed noiseless form. Errors if the fluctuating
/// drive amplitude reaches zero, where the corotating picture degenerates.
pub fn phase_integral(
    geometry: &Geometry,
    noise: &NoiseTrace,
    window: u8,
    orientation: i8,
) -> Result<f64> {
    if window > 1 {
        return Err(Error::Domain(format!("window index {window} out of range")));
    }
    if !matches!(orientation, -1 | 0 | 1) {
        return Err(Error::Domain(format!(
            "window orientation {orientation} must be -1, 0 or 1"
        )));
    }
    let z = geometry.delta.abs() - f64::from(orientation) * geometry.omega_b;
    let duration = geometry.t_window;
    let samples = if window == 0 {
        &noise.samples1
    } else {
        &noise.samples2
    };
    if samples.is_empty() {
        return Ok(duration * z.hypot(geometry.omega0));
    }
    let n = (((duration / noise.dt) - 1e-9).ceil().max(1.0)) as usize;
    let mut phase = 0.0;
    for k in 0..n {
        let t_k = k as f64 * noise.dt;
        let step = noise.dt.min(duration - t_k);
        let radial = geometry.omega0 + samples[k.min(samples.len() - 1)];
        if radial <= 0.0 {
            return Err(Error::GapClosing);
        }
        phase += step * z.hypot(radial);
    }
    Ok(phase)
}

/// First-order structure of the plateau phase rate in loop rotation and noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTerms {
    /// Unshifted plateau gap G = √(Δ² + Ω₀²) in rad/s.
    pub gap: f64,
    /// First-order corotating shift of the gap, −sgn(n) ω_B cos θ, in rad/s.
    pub loop_shift: f64,
    /// Echo-phase response per unit radial noise in the second window of the
    /// orientation-preserving echo, −sin θ at leading order.
    pub amplitude_slope: f64,
    /// Loop-rate correction to that response, −sgn(n) ω_B sin θ cos θ / G.
    pub cross_slope: f64,
    /// Expansion parameter ω_B / G.
    pub expansion_ratio: f64,
    /// Whether the expansion parameter is small enough to trust first order.
    pub regime_ok: bool,
}

/// Expands the corotating gap in loop rate and radial noise.
pub fn expansion_terms(geometry: &Geometry) -> ExpansionTerms {
    let (sin, cos) = geometry.theta.sin_cos();
    let gap = geometry.gap();
    let sign = f64::from(geometry.first_window_sign());
    let ratio = geometry.omega_b / gap;
    ExpansionTerms {
        gap,
        loop_shift: -sign * geometry.omega_b * cos,
        amplitude_slope: -sin,
        cross_slope: -sign * geometry.omega_b * sin * cos / gap,
        expansion_ratio: ratio,
        regime_ok: ratio <= 0.3,
    }
}

/// Full analytic prediction for one sweep cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DephasingPrediction {
    /// Dynamic angular weight a·sin²θ, dimensionless.
    pub cal_a: f64,
    /// Geometric angular weight b·2 cos θ sin²θ / G, in seconds.
    pub cal_b: f64,
    /// Non-adiabatic angular weight c·(cos θ sin θ / G)², in seconds squared.
    pub cal_c: f64,
    /// Integrated noise correlator D(T) in rad².
    pub d_t: f64,
    /// Predicted coherence.
    pub nu: f64,
    /// Predicted mean echo phase in radians, unwrapped.
    pub gamma_mean: f64,
}

/// Evaluates coherence and mean phase for one protocol, mode and geometry.
pub fn predict(
    protocol: Protocol,
    mode: CorrelationMode,
    geometry: &Geometry,
    noise: &OUParams,
) -> DephasingPrediction {
    let factors = protocol_factors(protocol, mode);
    let (ang_a, ang_b, ang_c) = angular_factors(geometry);
    let supp = suppression_factor(&factors, geometry, noise);
    DephasingPrediction {
        cal_a: factors.a * ang_a,
        cal_b: factors.b * ang_b,
        cal_c: factors.c * ang_c,
        d_t: integrated_correlator_ou(noise.sigma2, noise.gamma, geometry.t_window),
        nu: supp.nu,
        gamma_mean: mean_total_phase(protocol, geometry),
    }
}

/// Ensemble-mean echo phase: first-window minus second-window plateau phase.
///
/// For the orientation-reversing echo this is T(g(s₁) − g(−s₁)) with
/// g(s) = √((|Δ| − s ω_B)² + Ω₀²), which is congruent to twice the signed
/// solid angle modulo 2π up to loop-rate corrections of third order. The
/// orientation-preserving and static echoes balance exactly.
pub fn mean_total_phase(protocol: Protocol, geometry: &Geometry) -> f64 {
    match protocol {
        Protocol::R => {
            let s1 = f64::from(geometry.first_window_sign());
            let g = |s: f64| {
                (geometry.delta.abs() - s * geometry.omega_b).hypot(geometry.omega0)
            };
            geometry.t_window * (g(s1) - g(-s1))
        }
        Protocol::P | Protocol::Dp => 0.0,
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_to_pi(x: f64) -> f64 {
    let y = x.rem_euclid(std::f64::consts::TAU);
    if y > std::f64::consts::PI {
        y - std::f64::consts::TAU
    } else {
        y
    }
}

/// D(T) against its short- and long-correlation-time limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeLimits {
    /// Exact integrated correlator D(T).
    pub d_exact: f64,
    /// White-noise limit σ²T/Γ, approached when ΓT ≫ 1.
    pub d_white: f64,
    /// Quasistatic limit σ²T²/2, approached when ΓT ≪ 1.
    pub d_quasistatic: f64,
    /// d_exact / d_white.
    pub white_ratio: f64,
    /// d_exact / d_quasistatic.
    pub quasistatic_ratio: f64,
}

/// Places the noise between the quasistatic and white-noise regimes.
pub fn regime_limits(noise: &OUParams, t: f64) -> RegimeLimits {
    let d_exact = integrated_correlator_ou(noise.sigma2, noise.gamma, t);
    let d_white = noise.sigma2 * t / noise.gamma;
    let d_quasistatic = noise.sigma2 * t * t / 2.0;
    RegimeLimits {
        d_exact,
        d_white,
        d_quasistatic,
        white_ratio: d_exact / d_white,
        quasistatic_ratio: d_exact / d_quasistatic,
    }
}
