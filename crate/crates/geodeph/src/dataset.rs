//! CSV and JSON interchange for sweep results and fits.
//!
//! All numeric columns are written with shortest-round-trip formatting, so
//! writing the same values twice yields byte-identical files. Times appear
//! in CSV as nanoseconds to match the configuration's unit-suffixed fields.

use crate::adiabatic::AdiabaticityReport;
use crate::analytic::{predict, protocol_factors, suppression_factor};
use crate::engine::SweepRow;
use crate::fit::{CoherenceDataset, CoherenceRow, Provenance, QuantilePoint};
use crate::model::{Curve, Geometry, Protocol};
use crate::noise::{CorrelationMode, OUParams};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// One sweep result as it appears in CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub protocol: String,
    pub curve: String,
    pub mode: String,
    pub solid_angle: f64,
    pub n_loops: i32,
    pub t_window_ns: f64,
    pub nu: f64,
    pub nu_se: f64,
    pub phase: f64,
    pub phase_se: f64,
    pub realizations: usize,
}

impl From<&SweepRow> for SweepRecord {
    fn from(row: &SweepRow) -> Self {
        SweepRecord {
            protocol: row.protocol.label().into(),
            curve: row.curve.label().into(),
            mode: row.mode.label().into(),
            solid_angle: row.solid_angle,
            n_loops: row.n_loops,
            t_window_ns: row.t_window * 1e9,
            nu: row.result.nu,
            nu_se: row.result.nu_se,
            phase: row.result.phase,
            phase_se: row.result.phase_se,
            realizations: row.result.n_realizations,
        }
    }
}

/// Writes sweep rows as CSV.
pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in rows {
        out.serialize(SweepRecord::from(row))?;
    }
    out.flush().map_err(crate::Error::Io)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CoherenceRecord {
    protocol: String,
    curve: String,
    mode: String,
    solid_angle: f64,
    n_loops: i32,
    t_window_ns: f64,
    nu: f64,
    nu_se: f64,
}

/// Reads a coherence dataset from CSV in the sweep schema.
///
/// Only the columns a fit needs are required; extra columns such as phases
/// are ignored, so engine sweep files load directly.
pub fn read_coherence_csv<R: Read>(
    reader: R,
    delta: f64,
    gamma: f64,
    provenance: Provenance,
) -> Result<CoherenceDataset> {
    let mut input = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for record in input.deserialize::<CoherenceRecord>() {
        let record = record?;
        rows.push(CoherenceRow {
            protocol: Protocol::from_label(&record.protocol)?,
            curve: Curve::from_label(&record.curve)?,
            mode: CorrelationMode::from_label(&record.mode)?,
            solid_angle: record.solid_angle,
            n_loops: record.n_loops,
            t_window: record.t_window_ns * 1e-9,
            nu: record.nu,
            nu_se: record.nu_se,
        });
    }
    let dataset = CoherenceDataset { rows, delta, gamma, provenance };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a coherence dataset using the same core columns the reader needs.
pub fn write_coherence_csv<W: Write>(writer: W, dataset: &CoherenceDataset) -> Result<()> {
    #[derive(Serialize)]
    struct Core<'a> {
        protocol: &'a str,
        curve: &'a str,
        mode: &'a str,
        solid_angle: f64,
        n_loops: i32,
        t_window_ns: f64,
        nu: f64,
        nu_se: f64,
    }
    let mut out = csv::Writer::from_writer(writer);
    for row in &dataset.rows {
        out.serialize(Core {
            protocol: row.protocol.label(),
            curve: row.curve.label(),
            mode: row.mode.label(),
            solid_angle: row.solid_angle,
            n_loops: row.n_loops,
            t_window_ns: row.t_window * 1e9,
            nu: row.nu,
            nu_se: row.nu_se,
        })?;
    }
    out.flush().map_err(crate::Error::Io)?;
    Ok(())
}

/// Closed-form companion to one sweep row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub protocol: String,
    pub curve: String,
    pub mode: String,
    pub solid_angle: f64,
    pub n_loops: i32,
    pub t_window_ns: f64,
    pub nu_pred: f64,
    pub exponent: f64,
    pub dynamic_term: f64,
    pub geometric_term: f64,
    pub residual_term: f64,
    pub phase_pred: f64,
}

/// Evaluates the closed-form coherence and phase for each sweep row.
pub fn prediction_records(
    rows: &[SweepRow],
    delta: f64,
    relative_amplitude: f64,
    gamma: f64,
) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let geometry =
            Geometry::from_solid_angle(row.solid_angle, row.n_loops, delta, row.t_window)?;
        let noise =
            OUParams::from_relative_amplitude(relative_amplitude, geometry.omega0, gamma)?;
        let factors = protocol_factors(row.protocol, row.mode);
        let suppression = suppression_factor(&factors, &geometry, &noise);
        let prediction = predict(row.protocol, row.mode, &geometry, &noise);
        out.push(PredictionRecord {
            protocol: row.protocol.label().into(),
            curve: row.curve.label().into(),
            mode: row.mode.label().into(),
            solid_angle: row.solid_angle,
            n_loops: row.n_loops,
            t_window_ns: row.t_window * 1e9,
            nu_pred: suppression.nu,
            exponent: suppression.exponent,
            dynamic_term: suppression.dynamic_term,
            geometric_term: suppression.geometric_term,
            residual_term: suppression.residual_term,
            phase_pred: prediction.gamma_mean,
        });
    }
    Ok(out)
}

/// Writes closed-form companion rows as CSV.
pub fn write_predictions_csv<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for record in records {
        out.serialize(record)?;
    }
    out.flush().map_err(crate::Error::Io)?;
    Ok(())
}

/// Exponent-term decomposition at one precession period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub t_window_ns: f64,
    pub dynamic_term: f64,
    pub geometric_term: f64,
    pub residual_term: f64,
    pub nu: f64,
}

/// Writes exponent-term rows as CSV.
pub fn write_terms_csv<W: Write>(writer: W, records: &[TermRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for record in records {
        out.serialize(record)?;
    }
    out.flush().map_err(crate::Error::Io)?;
    Ok(())
}

/// Writes normal-probability plot points as CSV.
pub fn write_quantiles_csv<W: Write>(writer: W, points: &[QuantilePoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for point in points {
        out.serialize(point)?;
    }
    out.flush().map_err(crate::Error::Io)?;
    Ok(())
}

/// Writes an adiabaticity report's time samples as CSV.
pub fn write_adiabaticity_csv<W: Write>(writer: W, report: &AdiabaticityReport) -> Result<()> {
    #[derive(Serialize)]
    struct Sample {
        t_ns: f64,
        s: f64,
        s_noisy: f64,
    }
    let mut out = csv::Writer::from_writer(writer);
    for sample in &report.samples {
        out.serialize(Sample {
            t_ns: sample.t * 1e9,
            s: sample.s,
            s_noisy: sample.s_noisy,
        })?;
    }
    out.flush().map_err(crate::Error::Io)?;
    Ok(())
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize>(mut writer: W, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    writer.write_all(text.as_bytes()).map_err(crate::Error::Io)?;
    Ok(())
}
