//! Ornstein-Uhlenbeck drive-amplitude noise, exact on its sampling grid.
//!
//! Traces are stationary AR(1) sequences with the exact one-step kernel
//! x_{k+1} = x_k e^{−Γ dt} + √(σ²(1 − e^{−2Γ dt})) ξ_k, held zero-order between
//! samples. Each echo window carries one trace; the correlation mode fixes how
//! the two windows' traces relate (equal, negated, independent, or second off).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seeding::trace_key;
use crate::{Error, Result};

/// Stationary parameters of the Ornstein-Uhlenbeck process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OUParams {
    /// Stationary variance σ² in (rad/s)².
    pub sigma2: f64,
    /// Inverse correlation time Γ in 1/s.
    pub gamma: f64,
}

impl OUParams {
    /// Validates and builds the parameter set.
    pub fn new(sigma2: f64, gamma: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Domain("noise variance must be nonnegative".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain("noise rate must be positive".into()));
        }
        Ok(OUParams { sigma2, gamma })
    }

    /// Sets σ = relative · Ω₀, the usual way amplitudes are quoted.
    pub fn from_relative_amplitude(relative: f64, omega0: f64, gamma: f64) -> Result<Self> {
        if !(relative >= 0.0 && relative.is_finite()) {
            return Err(Error::Domain(
                "relative noise amplitude must be nonnegative".into(),
            ));
        }
        OUParams::new((relative * omega0).powi(2), gamma)
    }
}

/// Relation between the noise seen by the two echo windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorrelationMode {
    /// Window 1 replays window 0's trace sample for sample.
    #[serde(rename = "correlated")]
    Correlated,
    /// Window 1 replays the negated trace.
    #[serde(rename = "anticorrelated")]
    Anticorrelated,
    /// Window 1 draws an independent trace of the same spectrum.
    #[serde(rename = "uncorrelated")]
    Uncorrelated,
    /// Window 1 sees no noise at all.
    #[serde(rename = "first-window")]
    FirstWindowOnly,
}

impl CorrelationMode {
    /// All modes in canonical order.
    pub const ALL: [CorrelationMode; 4] = [
        CorrelationMode::Correlated,
        CorrelationMode::Anticorrelated,
        CorrelationMode::Uncorrelated,
        CorrelationMode::FirstWindowOnly,
    ];

    /// Short label used in tables and CSV output.
    pub fn label(self) -> &'static str {
        match self {
            CorrelationMode::Correlated => "correlated",
            CorrelationMode::Anticorrelated => "anticorrelated",
            CorrelationMode::Uncorrelated => "uncorrelated",
            CorrelationMode::FirstWindowOnly => "first-window",
        }
    }

    /// Parses a label produced by [`CorrelationMode::label`].
    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "correlated" => Ok(CorrelationMode::Correlated),
            "anticorrelated" => Ok(CorrelationMode::Anticorrelated),
            "uncorrelated" => Ok(CorrelationMode::Uncorrelated),
            "first-window" => Ok(CorrelationMode::FirstWindowOnly),
            other => Err(Error::Domain(format!("unknown mode label {other:?}"))),
        }
    }

    /// Sample-wise correlation coefficient between the windows' traces.
    pub fn window_correlation(self) -> f64 {
        match self {
            CorrelationMode::Correlated => 1.0,
            CorrelationMode::Anticorrelated => -1.0,
            CorrelationMode::Uncorrelated | CorrelationMode::FirstWindowOnly => 0.0,
        }
    }
}

/// Amplitude noise for both windows of one realization, zero-order held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrace {
    /// Sample hold time in seconds.
    pub dt: f64,
    /// Window-0 samples in rad/s.
    pub samples1: Vec<f64>,
    /// Window-1 samples in rad/s.
    pub samples2: Vec<f64>,
    pub mode: CorrelationMode,
    /// Base seed the trace was derived from, for bookkeeping.
    pub seed: u64,
}

impl NoiseTrace {
    /// A trace with no samples; lookups return zero.
    pub fn zero(mode: CorrelationMode) -> Self {
        NoiseTrace {
            dt: 1.0,
            samples1: Vec::new(),
            samples2: Vec::new(),
            mode,
            seed: 0,
        }
    }

    /// A trace holding one constant value in both windows, mostly for tests.
    pub fn constant(mode: CorrelationMode, value: f64, duration: f64, dt: f64) -> Self {
        let n = ((duration / dt).ceil() as usize).max(1);
        NoiseTrace {
            dt,
            samples1: vec![value; n],
            samples2: vec![value; n],
            mode,
            seed: 0,
        }
    }

    /// Zero-order-hold lookup of window `window` at time `tau` into its span.
    pub fn sample(&self, window: u8, tau: f64) -> f64 {
        let samples = if window == 0 {
            &self.samples1
        } else {
            &self.samples2
        };
        if samples.is_empty() {
            return 0.0;
        }
        let idx = ((tau / self.dt).floor().max(0.0) as usize).min(samples.len() - 1);
        samples[idx]
    }

    /// Zeroes every sample whose midpoint falls inside one of the spans.
    pub fn zero_spans(&mut self, spans: &[(f64, f64)]) {
        let dt = self.dt;
        for samples in [&mut self.samples1, &mut self.samples2] {
            for (k, s) in samples.iter_mut().enumerate() {
                let mid = (k as f64 + 0.5) * dt;
                if spans.iter().any(|&(a, b)| mid >= a && mid < b) {
                    *s = 0.0;
                }
            }
        }
    }
}

fn ar1_coefficients(params: &OUParams, dt: f64) -> (f64, f64) {
    let phi = (-params.gamma * dt).exp();
    let innovation = (params.sigma2 * (1.0 - phi * phi)).sqrt();
    (phi, innovation)
}

fn ou_samples(rng: &mut ChaCha12Rng, params: &OUParams, n: usize, dt: f64) -> Vec<f64> {
    let (phi, innovation) = ar1_coefficients(params, dt);
    let sigma = params.sigma2.sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x = sigma * rng.sample::<f64, _>(StandardNormal);
    out.push(x);
    for _ in 1..n {
        x = phi * x + innovation * rng.sample::<f64, _>(StandardNormal);
        out.push(x);
    }
    out
}

fn sample_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain("noise step must be positive".into()));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Domain("noise span must be positive".into()));
    }
    Ok((((duration / dt) - 1e-9).ceil().max(1.0)) as usize)
}

/// Draws one stationary trace of `duration / dt` samples from a bare seed.
pub fn sample_ou(params: &OUParams, duration: f64, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let n = sample_count(duration, dt)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok(ou_samples(&mut rng, params, n, dt))
}

/// Draws the two windows' traces for one realization from a bare seed.
pub fn paired_traces(
    params: &OUParams,
    mode: CorrelationMode,
    duration: f64,
    dt: f64,
    seed: u64,
) -> Result<NoiseTrace> {
    paired_traces_from_key(params, mode, duration, dt, trace_key(seed, 0), 0, seed)
}

/// Draws the two windows' traces from a derived key and realization index.
///
/// Realization r uses streams 2r and 2r + 1 of the keyed ChaCha generator, so
/// ensembles are reproducible for any evaluation order, and window 0's trace
/// never depends on the correlation mode.
pub fn paired_traces_from_key(
    params: &OUParams,
    mode: CorrelationMode,
    duration: f64,
    dt: f64,
    key: [u8; 32],
    realization: u64,
    seed: u64,
) -> Result<NoiseTrace> {
    let n = sample_count(duration, dt)?;
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.set_stream(realization.wrapping_mul(2));
    let samples1 = ou_samples(&mut rng, params, n, dt);
    let samples2 = match mode {
        CorrelationMode::Correlated => samples1.clone(),
        CorrelationMode::Anticorrelated => samples1.iter().map(|x| -x).collect(),
        CorrelationMode::FirstWindowOnly => vec![0.0; n],
        CorrelationMode::Uncorrelated => {
            let mut rng2 = ChaCha12Rng::from_seed(key);
            rng2.set_stream(realization.wrapping_mul(2).wrapping_add(1));
            ou_samples(&mut rng2, params, n, dt)
        }
    };
    Ok(NoiseTrace {
        dt,
        samples1,
        samples2,
        mode,
        seed,
    })
}

/// Closed-form half-variance of the integrated noise over a span of length `t`:
/// σ² (Γt − 1 + e^{−Γt}) / Γ².
pub fn integrated_correlator_ou(sigma2: f64, gamma: f64, t: f64) -> f64 {
    let x = gamma * t;
    if x < 1e-4 {
        // Series for x → 0 avoids catastrophic cancellation.
        return sigma2 * t * t * (0.5 - x / 6.0 + x * x / 24.0);
    }
    sigma2 * (x + (-x).exp_m1()) / (gamma * gamma)
}

/// Monte-Carlo estimate of the integrated-noise half-variance over `[0, t]`.
///
/// Integrates window 0 of each trace and returns (mean of z²/2, standard
/// error). All traces must share the sampling grid and cover `t`.
pub fn empirical_correlator(traces: &[NoiseTrace], t: f64) -> Result<(f64, f64)> {
    if traces.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two traces to estimate the correlator".into(),
        ));
    }
    let dt = traces[0].dt;
    let n_int = (((t / dt) - 1e-9).ceil().max(1.0)) as usize;
    let mut values = Vec::with_capacity(traces.len());
    for trace in traces {
        if (trace.dt - dt).abs() > 1e-15 * dt {
            return Err(Error::GridMismatch(
                "traces disagree on the sampling step".into(),
            ));
        }
        if trace.samples1.len() < n_int {
            return Err(Error::GridMismatch(format!(
                "trace of {} samples cannot cover {t:.3e} s",
                trace.samples1.len()
            )));
        }
        let z: f64 = trace.samples1[..n_int].iter().sum::<f64>() * dt;
        values.push(0.5 * z * z);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const PARAMS: OUParams = OUParams {
        sigma2: 4.0e14,
        gamma: 1.0e7,
    };

    #[test]
    fn traces_are_deterministic_in_seed_and_stream() {
        let a = paired_traces(&PARAMS, CorrelationMode::Uncorrelated, 1e-7, 1e-10, 7).unwrap();
        let b = paired_traces(&PARAMS, CorrelationMode::Uncorrelated, 1e-7, 1e-10, 7).unwrap();
        assert_eq!(a, b);
        let c = paired_traces(&PARAMS, CorrelationMode::Uncorrelated, 1e-7, 1e-10, 8).unwrap();
        assert_ne!(a.samples1, c.samples1);
        let key = trace_key(7, 99);
        let r0 = paired_traces_from_key(
            &PARAMS,
            CorrelationMode::Uncorrelated,
            1e-7,
            1e-10,
            key,
            0,
            7,
        )
        .unwrap();
        let r1 = paired_traces_from_key(
            &PARAMS,
            CorrelationMode::Uncorrelated,
            1e-7,
            1e-10,
            key,
            1,
            7,
        )
        .unwrap();
        assert_ne!(r0.samples1, r1.samples1);
    }

    #[test]
    fn window_zero_is_mode_independent() {
        let key = trace_key(3, 1);
        let mut first: Option<Vec<f64>> = None;
        for mode in CorrelationMode::ALL {
            let tr = paired_traces_from_key(&PARAMS, mode, 1e-7, 1e-10, key, 5, 3).unwrap();
            match &first {
                None => first = Some(tr.samples1.clone()),
                Some(f) => assert_eq!(&tr.samples1, f),
            }
        }
    }

    #[test]
    fn modes_relate_windows_as_documented() {
        let key = trace_key(11, 0);
        let corr =
            paired_traces_from_key(&PARAMS, CorrelationMode::Correlated, 1e-7, 1e-10, key, 0, 11)
                .unwrap();
        assert_eq!(corr.samples1, corr.samples2);
        let anti = paired_traces_from_key(
            &PARAMS,
            CorrelationMode::Anticorrelated,
            1e-7,
            1e-10,
            key,
            0,
            11,
        )
        .unwrap();
        assert!(anti
            .samples1
            .iter()
            .zip(&anti.samples2)
            .all(|(a, b)| *b == -*a));
        let fwo = paired_traces_from_key(
            &PARAMS,
            CorrelationMode::FirstWindowOnly,
            1e-7,
            1e-10,
            key,
            0,
            11,
        )
        .unwrap();
        assert!(fwo.samples2.iter().all(|x| *x == 0.0));
        assert!(fwo.samples1.iter().any(|x| *x != 0.0));
        let unc = paired_traces_from_key(
            &PARAMS,
            CorrelationMode::Uncorrelated,
            1e-7,
            1e-10,
            key,
            0,
            11,
        )
        .unwrap();
        assert_ne!(unc.samples1, unc.samples2);
    }

    #[test]
    fn trace_statistics_match_the_stationary_law() {
        let n_traces = 400;
        let dt = 1e-9;
        let mut first = Vec::new();
        let mut last = Vec::new();
        let mut lag1 = 0.0;
        let mut lag1_norm = 0.0;
        for seed in 0..n_traces {
            let tr = sample_ou(&PARAMS, 2e-7, dt, seed).unwrap();
            first.push(tr[0]);
            last.push(*tr.last().unwrap());
            for w in tr.windows(2) {
                lag1 += w[0] * w[1];
                lag1_norm += w[0] * w[0];
            }
        }
        let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert_relative_eq!(var(&first), PARAMS.sigma2, max_relative = 0.15);
        assert_relative_eq!(var(&last), PARAMS.sigma2, max_relative = 0.15);
        let expected_phi = (-PARAMS.gamma * dt).exp();
        assert_relative_eq!(lag1 / lag1_norm, expected_phi, max_relative = 0.05);
    }

    #[test]
    fn integrated_correlator_limits_and_continuity() {
        let sigma2 = 2.5;
        let gamma: f64 = 1.0e7;
        // Small-x series against the direct formula where both are accurate.
        let t_mid = 1e-3 / gamma;
        let x = gamma * t_mid;
        let direct = sigma2 * (x + (-x).exp_m1()) / (gamma * gamma);
        assert_relative_eq!(
            integrated_correlator_ou(sigma2, gamma, t_mid),
            direct,
            max_relative = 1e-6
        );
        // Long-time limit: D → σ² t / Γ.
        let t_long = 1e3 / gamma;
        assert_relative_eq!(
            integrated_correlator_ou(sigma2, gamma, t_long),
            sigma2 * t_long / gamma,
            max_relative = 2e-3
        );
        // Short-time limit: D → σ² t² / 2.
        let t_short = 1e-6 / gamma;
        assert_relative_eq!(
            integrated_correlator_ou(sigma2, gamma, t_short),
            sigma2 * t_short * t_short / 2.0,
            max_relative = 1e-6
        );
    }

    #[test]
    fn empirical_correlator_matches_the_formula() {
        let t = 1e-7;
        let dt = 1e-10;
        let traces: Vec<NoiseTrace> = (0..600)
            .map(|seed| paired_traces(&PARAMS, CorrelationMode::Correlated, t, dt, seed).unwrap())
            .collect();
        let (est, se) = empirical_correlator(&traces, t).unwrap();
        let expected = integrated_correlator_ou(PARAMS.sigma2, PARAMS.gamma, t);
        assert!(
            (est - expected).abs() < 3.0 * se,
            "estimate {est:.4e} vs {expected:.4e} with se {se:.2e}"
        );
    }

    #[test]
    fn zero_order_hold_lookup_and_span_zeroing() {
        let mut trace = NoiseTrace {
            dt: 1.0,
            samples1: vec![1.0, 2.0, 3.0, 4.0],
            samples2: vec![5.0, 6.0, 7.0, 8.0],
            mode: CorrelationMode::Correlated,
            seed: 0,
        };
        assert_eq!(trace.sample(0, 0.0), 1.0);
        assert_eq!(trace.sample(0, 1.999), 2.0);
        assert_eq!(trace.sample(1, 2.0), 7.0);
        assert_eq!(trace.sample(0, 99.0), 4.0);
        assert_eq!(NoiseTrace::zero(CorrelationMode::Correlated).sample(0, 1.0), 0.0);
        trace.zero_spans(&[(0.0, 1.0), (3.2, 4.0)]);
        assert_eq!(trace.samples1, vec![0.0, 2.0, 3.0, 0.0]);
        assert_eq!(trace.samples2, vec![0.0, 6.0, 7.0, 0.0]);
    }

    #[test]
    fn parameter_validation() {
        assert!(OUParams::new(-1.0, 1.0).is_err());
        assert!(OUParams::new(1.0, 0.0).is_err());
        assert!(OUParams::from_relative_amplitude(0.1, 2e8, 1e7).is_ok());
        assert!(sample_ou(&PARAMS, 0.0, 1e-10, 1).is_err());
        assert!(sample_ou(&PARAMS, 1e-7, 0.0, 1).is_err());
        for mode in CorrelationMode::ALL {
            assert_eq!(CorrelationMode::from_label(mode.label()).unwrap(), mode);
        }
    }
}
