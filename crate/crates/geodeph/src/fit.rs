//! Weighted least-squares recovery of the decoherence factors.
//!
//! Taking −ln ν per row makes every model here linear in its parameters, so
//! fits are plain weighted linear least squares: convex, deterministic, and
//! free of starting-point choices. Weights propagate from the reported
//! coherence errors via δ(ln ν) = δν/ν, and rows below [`COHERENCE_FLOOR`]
//! carry no weight because phase and coherence both lose meaning that close
//! to full dephasing.
//!
//! Two fit shapes are provided. [`fit_cell`] treats one (protocol, mode)
//! block in isolation and recovers the full factor triple of that block.
//! [`fit_simultaneous`] fits all rows of one protocol at once through the
//! per-curve coefficient map, sharing parameters across modes the way the
//! block structure dictates, optionally with the placeholder parameters b′
//! and b″ attached to curves whose orientation-odd term should vanish.

use crate::analytic::{suppression_factor, DephasingFactors};
use crate::engine::SweepRow;
use crate::model::{Curve, Geometry, Protocol, ProtocolSpec};
use crate::noise::{CorrelationMode, OUParams};
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Rows with ν below this value are excluded from every fit.
pub const COHERENCE_FLOOR: f64 = 0.1;

/// Largest coherence a dataset row may carry. Referenced coherence estimates
/// can exceed 1 when noise scrambles a coherent schedule transient that
/// depressed the noiseless reference, so the cap sits well above 1.
pub const MAX_COHERENCE: f64 = 2.0;

/// One measured or simulated coherence point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRow {
    pub protocol: Protocol,
    pub curve: Curve,
    pub mode: CorrelationMode,
    /// Signed solid angle per window in steradians.
    pub solid_angle: f64,
    pub n_loops: i32,
    pub t_window: f64,
    pub nu: f64,
    pub nu_se: f64,
}

impl From<&SweepRow> for CoherenceRow {
    fn from(row: &SweepRow) -> Self {
        CoherenceRow {
            protocol: row.protocol,
            curve: row.curve,
            mode: row.mode,
            solid_angle: row.solid_angle,
            n_loops: row.n_loops,
            t_window: row.t_window,
            nu: row.result.nu,
            nu_se: row.result.nu_se,
        }
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// Produced by the Monte-Carlo engine.
    Simulation { base_seed: u64, realizations: usize },
    /// Built from the closed-form coherence model.
    Synthetic,
    /// Loaded from a file of unknown origin.
    External { source: String },
}

/// Coherence-vs-solid-angle rows plus the field context needed to fit them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceDataset {
    pub rows: Vec<CoherenceRow>,
    /// Static detuning in rad/s shared by every row.
    pub delta: f64,
    /// Noise correlation decay rate in 1/s shared by every row.
    pub gamma: f64,
    pub provenance: Provenance,
}

impl CoherenceDataset {
    /// Collects engine sweep rows into a fittable dataset.
    pub fn from_sweep(
        rows: &[SweepRow],
        delta: f64,
        gamma: f64,
        provenance: Provenance,
    ) -> Self {
        CoherenceDataset {
            rows: rows.iter().map(CoherenceRow::from).collect(),
            delta,
            gamma,
            provenance,
        }
    }

    /// Rejects rows whose coherence or geometry cannot have come from a run.
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InsufficientData("dataset has no rows".into()));
        }
        if !self.delta.is_finite() || self.delta == 0.0 {
            return Err(Error::Domain(format!(
                "dataset detuning must be finite and nonzero, got {}",
                self.delta
            )));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::Domain(format!(
                "dataset noise rate must be positive, got {}",
                self.gamma
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !row.nu.is_finite() || !row.nu_se.is_finite() || row.nu_se < 0.0 {
                return Err(Error::Domain(format!(
                    "row {i}: coherence {} ± {} is not a valid measurement",
                    row.nu, row.nu_se
                )));
            }
            if row.nu < 0.0 || row.nu > MAX_COHERENCE {
                return Err(Error::Domain(format!(
                    "row {i}: coherence {} ± {} lies outside [0, {MAX_COHERENCE}]",
                    row.nu, row.nu_se
                )));
            }
            self.geometry(row).map_err(|e| {
                Error::Domain(format!("row {i}: invalid geometry: {e}"))
            })?;
        }
        Ok(())
    }

    fn geometry(&self, row: &CoherenceRow) -> Result<Geometry> {
        Geometry::from_solid_angle(row.solid_angle, row.n_loops, self.delta, row.t_window)
    }

    fn noise(&self, geometry: &Geometry, relative_amplitude: f64) -> Result<OUParams> {
        OUParams::from_relative_amplitude(relative_amplitude, geometry.omega0, self.gamma)
    }
}

/// Model family: with or without the placeholder parameters b′ and b″.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitFamily {
    Constrained,
    Unconstrained,
}

impl FitFamily {
    /// Short label used in report names and file names.
    pub fn label(self) -> &'static str {
        match self {
            FitFamily::Constrained => "constrained",
            FitFamily::Unconstrained => "unconstrained",
        }
    }
}

/// The three per-row regressors every model is assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    /// Orientation-even decay, D(T)·sin²θ.
    Even,
    /// Orientation-odd decay, D(T)·sgn(n)·(2 cos θ sin²θ / G)·ω_B.
    Odd,
    /// Loop-rate-squared decay, D(T)·(cos θ sin θ / G)²·ω_B².
    Loop,
}

fn slot_values(geometry: &Geometry, noise: &OUParams) -> (f64, f64, f64) {
    let even = DephasingFactors { a: 1.0, b: 0.0, c: 0.0 };
    let odd = DephasingFactors { a: 0.0, b: 1.0, c: 0.0 };
    let lop = DephasingFactors { a: 0.0, b: 0.0, c: 1.0 };
    (
        suppression_factor(&even, geometry, noise).exponent,
        suppression_factor(&odd, geometry, noise).exponent,
        suppression_factor(&lop, geometry, noise).exponent,
    )
}

/// Parameter names of one family fit, in report order.
pub fn family_params(protocol: Protocol, family: FitFamily) -> Result<&'static [&'static str]> {
    match (protocol, family) {
        (Protocol::R, FitFamily::Constrained) => Ok(&["a", "b", "c"]),
        (Protocol::R, FitFamily::Unconstrained) => {
            Ok(&["a", "b", "c", "b_prime", "b_double_prime"])
        }
        (Protocol::P, FitFamily::Constrained) => Ok(&["a", "b", "c_prime"]),
        (Protocol::P, FitFamily::Unconstrained) => Ok(&["a", "b", "c_prime", "b_prime"]),
        (Protocol::Dp, _) => Err(Error::Domain(
            "the static reference is not a fittable protocol of its own".into(),
        )),
    }
}

/// Per-curve coefficient map of the family fits.
///
/// Each entry names a parameter, the regressor slot it multiplies, and the
/// block weight. The odd-slot regressor already carries the row's loop
/// orientation, so one signed column per parameter serves both curve
/// branches. Static-reference rows keep the even weight of their block and,
/// in the unconstrained family, pick up a placeholder odd term that should
/// fit to zero.
fn family_coefficients(
    protocol: Protocol,
    family: FitFamily,
    mode: CorrelationMode,
    curve: Curve,
) -> Vec<(&'static str, Slot, f64)> {
    let unc = family == FitFamily::Unconstrained;
    let side = curve != Curve::Dp;
    let mut entries = Vec::new();
    match protocol {
        Protocol::R => match mode {
            CorrelationMode::Correlated => {
                if side {
                    entries.push(("c", Slot::Loop, 4.0));
                    if unc {
                        entries.push(("b_prime", Slot::Odd, 1.0));
                    }
                } else if unc {
                    entries.push(("b_double_prime", Slot::Odd, 1.0));
                }
            }
            CorrelationMode::Anticorrelated | CorrelationMode::Uncorrelated => {
                let f = if mode == CorrelationMode::Anticorrelated { 4.0 } else { 2.0 };
                entries.push(("a", Slot::Even, f));
                if side {
                    if unc {
                        entries.push(("b_prime", Slot::Odd, 1.0));
                    }
                } else if unc {
                    entries.push(("b_double_prime", Slot::Odd, 1.0));
                }
            }
            CorrelationMode::FirstWindowOnly => {
                entries.push(("a", Slot::Even, 1.0));
                if side {
                    entries.push(("b", Slot::Odd, 1.0));
                } else if unc {
                    entries.push(("b_prime", Slot::Odd, 1.0));
                }
            }
        },
        Protocol::P => match mode {
            CorrelationMode::Correlated => {
                entries.push(("c_prime", Slot::Loop, 1.0));
                if unc {
                    entries.push(("b_prime", Slot::Odd, 1.0));
                }
            }
            CorrelationMode::Anticorrelated | CorrelationMode::Uncorrelated => {
                let f = if mode == CorrelationMode::Anticorrelated { 4.0 } else { 2.0 };
                entries.push(("a", Slot::Even, f));
                if side {
                    entries.push(("b", Slot::Odd, f));
                } else if unc {
                    entries.push(("b_prime", Slot::Odd, 1.0));
                }
            }
            CorrelationMode::FirstWindowOnly => {
                entries.push(("a", Slot::Even, 1.0));
                if side {
                    entries.push(("b", Slot::Odd, 1.0));
                } else if unc {
                    entries.push(("b_prime", Slot::Odd, 1.0));
                }
            }
        },
        Protocol::Dp => {}
    }
    entries
}

/// Effective noise amplitude recovered from the static-reference rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeCalibration {
    /// Fitted noise amplitude relative to the plateau drive, σ_eff/Ω₀.
    pub relative_amplitude: f64,
    /// Standard error of the relative amplitude.
    pub se: f64,
    /// Set when the reference rows carry no decay to calibrate on.
    pub degenerate: bool,
    /// Reference rows that entered the calibration.
    pub n_rows: usize,
}

/// Fits the noise amplitude on the first-window static-reference rows.
///
/// Those rows decay as exp(−(σ/Ω₀)²·q) with q fixed by geometry and T, so
/// the squared relative amplitude is a one-parameter linear fit.
pub fn calibrate_amplitude(dataset: &CoherenceDataset) -> Result<AmplitudeCalibration> {
    dataset.validate()?;
    let rows: Vec<&CoherenceRow> = dataset
        .rows
        .iter()
        .filter(|r| r.curve == Curve::Dp && r.mode == CorrelationMode::FirstWindowOnly)
        .collect();
    if rows.is_empty() {
        return Err(Error::InsufficientData(
            "amplitude calibration needs first-window static-reference rows".into(),
        ));
    }
    let weights = row_weights(&rows);
    let n_used = weights.iter().filter(|&&w| w > 0.0).count();
    if n_used == 0 {
        return Err(Error::InsufficientData(
            "every calibration row sits below the coherence floor".into(),
        ));
    }
    let mut sqq = 0.0;
    let mut sqy = 0.0;
    let mut qs = Vec::with_capacity(rows.len());
    for (row, &w) in rows.iter().zip(&weights) {
        let geometry = dataset.geometry(row)?;
        let unit = dataset.noise(&geometry, 1.0)?;
        let (q, _, _) = slot_values(&geometry, &unit);
        qs.push(q);
        if w > 0.0 {
            let y = -row.nu.ln();
            sqq += w * q * q;
            sqy += w * q * y;
        }
    }
    if sqq <= 0.0 {
        return Err(Error::Numerical(
            "calibration regressor vanished on every usable row".into(),
        ));
    }
    let p = sqy / sqq;
    let mut wrss = 0.0;
    for ((row, &w), &q) in rows.iter().zip(&weights).zip(&qs) {
        if w > 0.0 {
            let r = -row.nu.ln() - p * q;
            wrss += w * r * r;
        }
    }
    let degenerate = p <= 0.0;
    let amplitude = if degenerate { 0.0 } else { p.sqrt() };
    let se = if degenerate || n_used < 2 {
        0.0
    } else {
        (wrss / (n_used as f64 - 1.0) / sqq).sqrt() / (2.0 * amplitude)
    };
    Ok(AmplitudeCalibration {
        relative_amplitude: amplitude,
        se,
        degenerate,
        n_rows: n_used,
    })
}

/// One fitted parameter with its uncertainty and identifiability status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub value: f64,
    pub se: f64,
    /// Absent when the parameter is unidentifiable or its error vanishes.
    pub t_value: Option<f64>,
    pub significant: bool,
    /// Cleared when the parameter's column is identically zero on the data.
    pub identifiable: bool,
}

/// Result of one least-squares fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Human-readable model name, e.g. "R unconstrained".
    pub label: String,
    pub protocol: Protocol,
    /// Set for single-block fits, absent for protocol-wide ones.
    pub mode: Option<CorrelationMode>,
    /// Set for family fits, absent for single-block ones.
    pub family: Option<FitFamily>,
    pub amplitude: AmplitudeCalibration,
    pub params: Vec<ParamEstimate>,
    pub n_rows: usize,
    /// Rows with nonzero weight.
    pub n_used: usize,
    /// Linear parameters actually solved for.
    pub n_solved: usize,
    /// Model size charged to information criteria: solved parameters plus
    /// the shared noise amplitude.
    pub k: usize,
    /// Residual degrees of freedom, n_used − k.
    pub dof: usize,
    /// Minimized weighted residual sum of squares in log-coherence space.
    pub rss: f64,
    /// Finite-sample-corrected information criterion; absent when the fit
    /// is exact or the preconditions fail.
    pub aicc: Option<f64>,
    /// Two-sided 95% Student-t threshold at the fit's degrees of freedom.
    pub t_threshold: f64,
    /// Coherence-space residuals ν − ν̂ over the used rows.
    pub residuals: Vec<f64>,
}

/// Fits one protocol's rows across all modes at once.
///
/// The noise amplitude is calibrated first on the first-window
/// static-reference rows, then every row of the inferred protocol enters a
/// single weighted solve through the per-curve coefficient map. Parameters
/// whose columns vanish on the given rows are reported unidentifiable
/// rather than guessed.
pub fn fit_simultaneous(dataset: &CoherenceDataset, family: FitFamily) -> Result<FitReport> {
    dataset.validate()?;
    let mut protocols: Vec<Protocol> = dataset
        .rows
        .iter()
        .map(|r| r.protocol)
        .filter(|&p| p != Protocol::Dp)
        .collect();
    protocols.sort_by_key(|p| p.label());
    protocols.dedup();
    let protocol = match protocols.as_slice() {
        [] => Protocol::R,
        [one] => *one,
        _ => {
            return Err(Error::Domain(
                "dataset mixes protocols; fit one protocol at a time".into(),
            ))
        }
    };
    let amplitude = calibrate_amplitude(dataset)?;
    let rows: Vec<&CoherenceRow> = dataset
        .rows
        .iter()
        .filter(|r| r.protocol == protocol || r.curve == Curve::Dp)
        .collect();
    require_two_angles_per_curve(&rows)?;
    let names = family_params(protocol, family)?;
    let design = build_design(dataset, &rows, names, &amplitude, |row| {
        family_coefficients(protocol, family, row.mode, row.curve)
    })?;
    let mut report = solve_wls(design)?;
    report.label = format!("{} {}", protocol.label(), family.label());
    report.protocol = protocol;
    report.mode = None;
    report.family = Some(family);
    report.amplitude = amplitude;
    Ok(report)
}

/// Fits one (protocol, mode) block in isolation.
///
/// All rows of the block share the even column; the looped curves add the
/// signed odd column. The loop-rate-squared column enters only the
/// correlated block, where the even and odd noise couplings cancel and the
/// quadratic effect stands alone. In the other blocks the coupling's
/// quadratic remainder, which the leading-order model does not carry, would
/// masquerade as that parameter, so it is left out and reported as absent.
pub fn fit_cell(
    dataset: &CoherenceDataset,
    protocol: Protocol,
    mode: CorrelationMode,
    amplitude: &AmplitudeCalibration,
) -> Result<FitReport> {
    if protocol == Protocol::Dp {
        return Err(Error::Domain(
            "the static reference belongs to every block rather than forming its own".into(),
        ));
    }
    dataset.validate()?;
    let rows: Vec<&CoherenceRow> = dataset
        .rows
        .iter()
        .filter(|r| r.mode == mode && (r.protocol == protocol || r.curve == Curve::Dp))
        .collect();
    if !rows.iter().any(|r| r.curve != Curve::Dp) {
        return Err(Error::InsufficientData(format!(
            "no {} rows with mode {}",
            protocol.label(),
            mode.label()
        )));
    }
    require_two_angles_per_curve(&rows)?;
    let with_loop = mode == CorrelationMode::Correlated;
    let names: &'static [&'static str] = if with_loop { &["a", "b", "c"] } else { &["a", "b"] };
    let design = build_design(dataset, &rows, names, amplitude, |row| {
        let mut entries = vec![("a", Slot::Even, 1.0)];
        if row.curve != Curve::Dp {
            entries.push(("b", Slot::Odd, 1.0));
            if with_loop {
                entries.push(("c", Slot::Loop, 1.0));
            }
        }
        entries
    })?;
    let mut report = solve_wls(design)?;
    report.label = format!("{} {} block", protocol.label(), mode.label());
    report.protocol = protocol;
    report.mode = Some(mode);
    report.family = None;
    report.amplitude = *amplitude;
    Ok(report)
}

fn require_two_angles_per_curve(rows: &[&CoherenceRow]) -> Result<()> {
    use std::collections::BTreeMap;
    let mut angles: BTreeMap<(&'static str, &'static str), Vec<f64>> = BTreeMap::new();
    for row in rows {
        angles
            .entry((row.mode.label(), row.curve.label()))
            .or_default()
            .push(row.solid_angle);
    }
    for ((mode, curve), mut list) in angles {
        list.sort_by(f64::total_cmp);
        list.dedup();
        if list.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "curve {curve} with mode {mode} needs at least two solid angles"
            )));
        }
    }
    Ok(())
}

fn row_weights(rows: &[&CoherenceRow]) -> Vec<f64> {
    let mut max_w = 0.0f64;
    for row in rows {
        if row.nu >= COHERENCE_FLOOR && row.nu_se > 0.0 {
            max_w = max_w.max((row.nu / row.nu_se).powi(2));
        }
    }
    let exact = if max_w > 0.0 { max_w } else { 1.0 };
    rows.iter()
        .map(|row| {
            if row.nu < COHERENCE_FLOOR {
                0.0
            } else if row.nu_se > 0.0 {
                (row.nu / row.nu_se).powi(2)
            } else {
                exact
            }
        })
        .collect()
}

struct Design {
    names: Vec<&'static str>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
    nu: Vec<f64>,
    n_rows: usize,
}

fn build_design<F>(
    dataset: &CoherenceDataset,
    rows: &[&CoherenceRow],
    names: &[&'static str],
    amplitude: &AmplitudeCalibration,
    coefficients: F,
) -> Result<Design>
where
    F: Fn(&CoherenceRow) -> Vec<(&'static str, Slot, f64)>,
{
    let weights = row_weights(rows);
    let mut x = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    let mut nu = Vec::with_capacity(rows.len());
    for row in rows {
        let geometry = dataset.geometry(row)?;
        let noise = dataset.noise(&geometry, amplitude.relative_amplitude)?;
        let (even, odd, lop) = slot_values(&geometry, &noise);
        let mut cols = vec![0.0; names.len()];
        for (name, slot, factor) in coefficients(row) {
            let col = names
                .iter()
                .position(|&n| n == name)
                .ok_or_else(|| Error::Numerical(format!("unmapped parameter {name}")))?;
            let value = match slot {
                Slot::Even => even,
                Slot::Odd => odd,
                Slot::Loop => lop,
            };
            cols[col] += factor * value;
        }
        x.push(cols);
        y.push(-row.nu.ln());
        nu.push(row.nu);
    }
    Ok(Design {
        names: names.to_vec(),
        x,
        y,
        w: weights,
        nu,
        n_rows: rows.len(),
    })
}

fn solve_wls(design: Design) -> Result<FitReport> {
    let n_used = design.w.iter().filter(|&&w| w > 0.0).count();
    if n_used == 0 {
        return Err(Error::InsufficientData(
            "every row fell below the coherence floor".into(),
        ));
    }
    let total = design.names.len();
    let mut kept = Vec::new();
    for j in 0..total {
        let norm: f64 = design
            .x
            .iter()
            .zip(&design.w)
            .map(|(row, &w)| w * row[j] * row[j])
            .sum();
        if norm > 0.0 {
            kept.push(j);
        }
    }
    let m = kept.len();
    let k = m + 1;
    if n_used <= k {
        return Err(Error::InsufficientData(format!(
            "{n_used} usable rows cannot constrain {k} parameters"
        )));
    }
    let dof = n_used - k;
    let mut xtwx = DMatrix::zeros(m, m);
    let mut xtwy = DVector::zeros(m);
    for (row, (&w, &y)) in design.x.iter().zip(design.w.iter().zip(&design.y)) {
        if w == 0.0 {
            continue;
        }
        for (a, &ja) in kept.iter().enumerate() {
            xtwy[a] += w * row[ja] * y;
            for (b, &jb) in kept.iter().enumerate() {
                xtwx[(a, b)] += w * row[ja] * row[jb];
            }
        }
    }
    let chol = if m > 0 {
        Some(Cholesky::new(xtwx).ok_or_else(|| {
            Error::Numerical("rank-deficient design; parameters are confounded".into())
        })?)
    } else {
        None
    };
    let beta = match &chol {
        Some(c) => c.solve(&xtwy),
        None => DVector::zeros(0),
    };
    let mut wrss = 0.0;
    let mut y_scale = 0.0;
    let mut residuals = Vec::with_capacity(n_used);
    for ((row, &w), (&y, &nu)) in design
        .x
        .iter()
        .zip(&design.w)
        .zip(design.y.iter().zip(&design.nu))
    {
        if w == 0.0 {
            continue;
        }
        let yhat: f64 = kept.iter().enumerate().map(|(a, &j)| beta[a] * row[j]).sum();
        let r = y - yhat;
        wrss += w * r * r;
        y_scale += w * y * y;
        residuals.push(nu - (-yhat).exp());
    }
    if wrss <= y_scale * 1e-20 {
        wrss = 0.0;
    }
    let s2 = wrss / dof as f64;
    let cov = chol.as_ref().map(|c| c.inverse() * s2);
    let t_threshold = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Numerical(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    let mut params = Vec::with_capacity(total);
    for (j, name) in design.names.iter().enumerate() {
        if let Some(a) = kept.iter().position(|&x| x == j) {
            let value = beta[a];
            let var = cov.as_ref().map_or(0.0, |c| c[(a, a)].max(0.0));
            let se = var.sqrt();
            let t_value = if se > 0.0 { Some(value / se) } else { None };
            params.push(ParamEstimate {
                name: (*name).into(),
                value,
                se,
                t_value,
                significant: t_value.is_some_and(|t| t.abs() > t_threshold),
                identifiable: true,
            });
        } else {
            params.push(ParamEstimate {
                name: (*name).into(),
                value: 0.0,
                se: 0.0,
                t_value: None,
                significant: false,
                identifiable: false,
            });
        }
    }
    let aicc_value = aicc(n_used, k, wrss).ok();
    Ok(FitReport {
        label: String::new(),
        protocol: Protocol::R,
        mode: None,
        family: None,
        amplitude: AmplitudeCalibration {
            relative_amplitude: 0.0,
            se: 0.0,
            degenerate: true,
            n_rows: 0,
        },
        params,
        n_rows: design.n_rows,
        n_used,
        n_solved: m,
        k,
        dof,
        rss: wrss,
        aicc: aicc_value,
        t_threshold,
        residuals,
    })
}

/// Finite-sample-corrected information criterion
/// N ln(RSS/N) + 2k + 2k(k+1)/(N−k−1).
pub fn aicc(n_rows: usize, n_params: usize, rss: f64) -> Result<f64> {
    if n_rows <= n_params + 1 {
        return Err(Error::Domain(format!(
            "information criterion needs more than {} rows, got {n_rows}",
            n_params + 1
        )));
    }
    if !rss.is_finite() || rss <= 0.0 {
        return Err(Error::Domain(format!(
            "information criterion needs positive residual sum, got {rss}"
        )));
    }
    let n = n_rows as f64;
    let k = n_params as f64;
    Ok(n * (rss / n).ln() + 2.0 * k + 2.0 * k * (k + 1.0) / (n - k - 1.0))
}

/// One parameter's t statistic against zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TValue {
    pub name: String,
    pub t_value: f64,
    /// Set when |t| clears the report's two-sided 95% threshold.
    pub significant: bool,
}

/// t statistics for every identifiable parameter of a report.
pub fn t_values(report: &FitReport) -> Result<Vec<TValue>> {
    let mut out = Vec::new();
    for param in report.params.iter().filter(|p| p.identifiable) {
        if param.se <= 0.0 {
            return Err(Error::Domain(format!(
                "parameter {} has zero standard error; its t-test is undefined",
                param.name
            )));
        }
        let t = param.value / param.se;
        out.push(TValue {
            name: param.name.clone(),
            t_value: t,
            significant: t.abs() > report.t_threshold,
        });
    }
    Ok(out)
}

/// One point of a normal-probability plot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    /// Normal quantile at the point's plotting position.
    pub expected: f64,
    /// Sorted residual.
    pub observed: f64,
}

/// Normality diagnostics for a report's residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub points: Vec<QuantilePoint>,
    /// Residual spread about zero, √(Σr²/n).
    pub residual_std: f64,
    /// Largest gap between the empirical and the fitted normal CDF.
    pub ks_statistic: f64,
    /// 99% Kolmogorov band, 1.628/√n.
    pub ks_band_99: f64,
    pub within_band: bool,
}

/// Compares a report's residuals against a zero-mean normal law.
///
/// The spread is taken from the residuals themselves with the mean pinned
/// at zero, so a fit with a constant offset shows up as a band violation
/// rather than being absorbed into the reference line.
pub fn residual_diagnostics(report: &FitReport) -> Result<ResidualDiagnostics> {
    let n = report.residuals.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "normality diagnostics need at least 10 residuals, got {n}"
        )));
    }
    let mut sorted = report.residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let std = (sorted.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let band = 1.628 / (n as f64).sqrt();
    if std == 0.0 {
        let points = sorted
            .iter()
            .map(|&r| QuantilePoint { expected: 0.0, observed: r })
            .collect();
        return Ok(ResidualDiagnostics {
            points,
            residual_std: 0.0,
            ks_statistic: 0.0,
            ks_band_99: band,
            within_band: true,
        });
    }
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Numerical(format!("normal reference: {e}")))?;
    let mut points = Vec::with_capacity(n);
    let mut ks = 0.0f64;
    for (i, &r) in sorted.iter().enumerate() {
        let pos = (i as f64 + 0.5) / n as f64;
        points.push(QuantilePoint {
            expected: normal.inverse_cdf(pos),
            observed: r,
        });
        let cdf = normal.cdf(r);
        ks = ks.max((cdf - i as f64 / n as f64).abs());
        ks = ks.max(((i as f64 + 1.0) / n as f64 - cdf).abs());
    }
    Ok(ResidualDiagnostics {
        points,
        residual_std: std,
        ks_statistic: ks,
        ks_band_99: band,
        within_band: ks <= band,
    })
}

/// Builds a noiseless dataset whose looped curves decay with the given
/// factor triple and whose static-reference rows keep its even weight.
pub fn synthetic_from_factors(
    protocol: Protocol,
    mode: CorrelationMode,
    angles: &[f64],
    n_loops: i32,
    delta: f64,
    t_window: f64,
    relative_amplitude: f64,
    gamma: f64,
    factors: &DephasingFactors,
) -> Result<CoherenceDataset> {
    if n_loops <= 0 {
        return Err(Error::Domain(
            "loop count must be positive; both orientations are generated".into(),
        ));
    }
    let reference = DephasingFactors { a: factors.a, b: 0.0, c: 0.0 };
    let mut rows = Vec::new();
    let mut push = |angle: f64, n: i32, curve_protocol: Protocol, f: &DephasingFactors| -> Result<()> {
        let geometry = Geometry::from_solid_angle(angle, n, delta, t_window)?;
        let spec = ProtocolSpec::new(curve_protocol, mode, geometry)?;
        let noise = OUParams::from_relative_amplitude(relative_amplitude, geometry.omega0, gamma)?;
        let nu = suppression_factor(f, &geometry, &noise).nu;
        rows.push(CoherenceRow {
            protocol: curve_protocol,
            curve: spec.curve(),
            mode,
            solid_angle: angle,
            n_loops: n,
            t_window,
            nu,
            nu_se: 0.0,
        });
        Ok(())
    };
    if protocol != Protocol::Dp {
        for &a in angles {
            push(a, n_loops, protocol, factors)?;
        }
    }
    for &a in angles {
        push(a, n_loops, Protocol::Dp, &reference)?;
    }
    if protocol != Protocol::Dp {
        for &a in angles {
            push(-a, -n_loops, protocol, factors)?;
        }
    }
    Ok(CoherenceDataset {
        rows,
        delta,
        gamma,
        provenance: Provenance::Synthetic,
    })
}

/// Builds a noiseless dataset that one family fit can represent exactly.
///
/// `values` pairs with [`family_params`] order. Every row's decay exponent
/// is assembled from the same coefficient map the fit uses, so fitting the
/// returned dataset must reproduce `values` up to solver round-off.
pub fn synthetic_from_family(
    protocol: Protocol,
    family: FitFamily,
    values: &[f64],
    modes: &[CorrelationMode],
    angles: &[f64],
    n_loops: i32,
    delta: f64,
    t_window: f64,
    relative_amplitude: f64,
    gamma: f64,
) -> Result<CoherenceDataset> {
    let names = family_params(protocol, family)?;
    if values.len() != names.len() {
        return Err(Error::Domain(format!(
            "expected {} parameter values, got {}",
            names.len(),
            values.len()
        )));
    }
    if n_loops <= 0 {
        return Err(Error::Domain(
            "loop count must be positive; both orientations are generated".into(),
        ));
    }
    let mut rows = Vec::new();
    for &mode in modes {
        let mut push = |angle: f64, n: i32, curve_protocol: Protocol| -> Result<()> {
            let geometry = Geometry::from_solid_angle(angle, n, delta, t_window)?;
            let spec = ProtocolSpec::new(curve_protocol, mode, geometry)?;
            let noise =
                OUParams::from_relative_amplitude(relative_amplitude, geometry.omega0, gamma)?;
            let (even, odd, lop) = slot_values(&geometry, &noise);
            let mut exponent = 0.0;
            for (name, slot, factor) in
                family_coefficients(protocol, family, mode, spec.curve())
            {
                let idx = names.iter().position(|&n| n == name).expect("mapped name");
                let value = match slot {
                    Slot::Even => even,
                    Slot::Odd => odd,
                    Slot::Loop => lop,
                };
                exponent += values[idx] * factor * value;
            }
            if exponent < 0.0 {
                return Err(Error::Domain(format!(
                    "parameter values drive a coherence above one at angle {angle}"
                )));
            }
            rows.push(CoherenceRow {
                protocol: curve_protocol,
                curve: spec.curve(),
                mode,
                solid_angle: angle,
                n_loops: n,
                t_window,
                nu: (-exponent).exp(),
                nu_se: 0.0,
            });
            Ok(())
        };
        for &a in angles {
            push(a, n_loops, protocol)?;
        }
        for &a in angles {
            push(a, n_loops, Protocol::Dp)?;
        }
        for &a in angles {
            push(-a, -n_loops, protocol)?;
        }
    }
    Ok(CoherenceDataset {
        rows,
        delta,
        gamma,
        provenance: Provenance::Synthetic,
    })
}
