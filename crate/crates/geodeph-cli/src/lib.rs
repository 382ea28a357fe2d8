//! Command-line batch runner for the geodeph simulator.
//!
//! Five subcommands cover the workflows the library supports: `sweep` runs the
//! configured coherence sweeps next to their closed-form predictions, `table1`
//! rebuilds the protocol factor table from simulated data, `fig2f` decomposes
//! the decay exponent over window durations, `fit` runs both nested models on
//! external coherence files, and `adiab-report` checks schedule adiabaticity.
//!
//! Every run writes `config.json` (the fully resolved configuration, which can
//! be fed back through `--config`) and `manifest.json` (command, seed, config
//! hash, tool version) into the output directory. Nothing depends on wall
//! clock or machine identity, so rerunning a command with the same inputs
//! reproduces every output file byte for byte.
//!
//! Exit codes: 0 on success, 2 for configuration or input problems (with a
//! machine-readable JSON line on stderr, before any file is written), 3 for
//! numerical failures encountered mid-run.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use geodeph::adiabatic::{adiabaticity_report, AdiabaticityReport};
use geodeph::analytic::{protocol_factors, suppression_factor};
use geodeph::config::{OutputFormat, RunConfig};
use geodeph::dataset::{
    prediction_records, write_adiabaticity_csv, write_coherence_csv, write_json,
    write_predictions_csv, write_quantiles_csv, write_sweep_csv, write_terms_csv, SweepRecord,
    TermRecord,
};
use geodeph::engine::{protocol_sweep_points, sweep, SweepRow};
use geodeph::fit::{
    calibrate_amplitude, fit_cell, fit_simultaneous, residual_diagnostics, AmplitudeCalibration,
    CoherenceDataset, FitFamily, FitReport, Provenance,
};
use geodeph::model::{build_schedule, Geometry, Protocol, ProtocolSpec};
use geodeph::noise::{paired_traces, CorrelationMode, NoiseTrace, OUParams};

#[derive(Parser)]
#[command(
    name = "geodeph",
    version,
    about = "Simulates and fits geometric dephasing of a driven two-level system"
)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the ensemble size.
    #[arg(long, global = true)]
    realizations: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Tabular output format: csv or json.
    #[arg(long, global = true)]
    format: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured coherence sweeps with closed-form predictions alongside.
    Sweep,
    /// Simulate the full protocol grid, fit every cell, and tabulate theory versus recovery.
    Table1,
    /// Decompose the decay exponent into its three terms across window durations.
    Fig2f,
    /// Fit coherence CSV files (sweep schema) with the constrained and unconstrained models.
    Fit {
        /// Input CSV files; rows are concatenated into one dataset.
        #[arg(required = true, value_name = "CSV")]
        datasets: Vec<PathBuf>,
    },
    /// Report the adiabaticity parameter across the configured schedules.
    AdiabReport,
}

/// Which phase of a run failed, deciding the exit code.
enum Stage {
    /// Configuration or input files: exit 2, nothing was written.
    Input,
    /// Simulation, fitting, or output: exit 3.
    Compute,
}

struct Failure {
    stage: Stage,
    error: anyhow::Error,
}

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        stage: Stage::Input,
        error: error.into(),
    }
}

fn compute(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        stage: Stage::Compute,
        error: error.into(),
    }
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(failure) => {
            let (kind, code) = match failure.stage {
                Stage::Input => ("config", 2),
                Stage::Compute => ("numerical", 3),
            };
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": format!("{:#}", failure.error) }
            });
            eprintln!("{payload}");
            code
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let config = resolve_config(&cli).map_err(input)?;
    match cli.command {
        Command::Sweep => {
            let dir = prepare_out_dir(&config, "sweep").map_err(input)?;
            cmd_sweep(&dir, &config).map_err(compute)
        }
        Command::Table1 => {
            let dir = prepare_out_dir(&config, "table1").map_err(input)?;
            cmd_table1(&dir, &config).map_err(compute)
        }
        Command::Fig2f => {
            let dir = prepare_out_dir(&config, "fig2f").map_err(input)?;
            cmd_fig2f(&dir, &config).map_err(compute)
        }
        Command::Fit { datasets } => {
            let dataset = load_datasets(&datasets, &config).map_err(input)?;
            let dir = prepare_out_dir(&config, "fit").map_err(input)?;
            cmd_fit(&dir, &dataset).map_err(compute)
        }
        Command::AdiabReport => {
            let dir = prepare_out_dir(&config, "adiab-report").map_err(input)?;
            cmd_adiab_report(&dir, &config).map_err(compute)
        }
    }
}

/// Loads the config file (or defaults), applies flag overrides, validates.
fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.base_seed = seed;
    }
    if let Some(n) = cli.realizations {
        config.realizations = n;
    }
    if let Some(dir) = &cli.out {
        config.out_dir = dir.clone();
    }
    if let Some(label) = &cli.format {
        config.format = OutputFormat::from_label(label)?;
    }
    config.validate()?;
    Ok(config)
}

/// Creates the output directory and writes the config echo and run manifest.
fn prepare_out_dir(config: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_json = format!("{}\n", config.to_json()?);
    fs::write(dir.join("config.json"), &config_json)?;
    let digest = Sha256::digest(config_json.as_bytes());
    let manifest = serde_json::json!({
        "tool": "geodeph",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "base_seed": config.base_seed,
        "config_sha256": format!("{digest:x}"),
        "config_file": "config.json",
    });
    write_json(File::create(dir.join("manifest.json"))?, &manifest)?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<File> {
    File::create(dir.join(name)).with_context(|| format!("creating {name}"))
}

/// One simulated sweep per (protocol, correlation mode, window duration).
fn cmd_sweep(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let engine = config.engine_config();
    let delta = config.delta();
    for &protocol in &config.protocols {
        for &mode in &config.modes {
            for (&t_ns, &t_window) in config.t_ns.iter().zip(&config.windows()) {
                let specs = protocol_sweep_points(
                    protocol,
                    mode,
                    &config.angles(),
                    config.n_loops,
                    delta,
                    t_window,
                )?;
                let rows = sweep(&specs, &engine, config.realizations, config.base_seed)?;
                let stem = format!(
                    "sweep_{}_{}_t{t_ns}",
                    protocol.label().to_lowercase(),
                    mode.label()
                );
                match config.format {
                    OutputFormat::Csv => {
                        write_sweep_csv(create(dir, &format!("{stem}.csv"))?, &rows)?;
                    }
                    OutputFormat::Json => {
                        let records: Vec<SweepRecord> =
                            rows.iter().map(SweepRecord::from).collect();
                        write_json(create(dir, &format!("{stem}.json"))?, &records)?;
                    }
                }
                let predictions = prediction_records(
                    &rows,
                    delta,
                    config.relative_amplitude,
                    config.gamma_per_s,
                )?;
                let pred_stem = format!(
                    "pred_{}_{}_t{t_ns}",
                    protocol.label().to_lowercase(),
                    mode.label()
                );
                match config.format {
                    OutputFormat::Csv => {
                        write_predictions_csv(create(dir, &format!("{pred_stem}.csv"))?, &predictions)?;
                    }
                    OutputFormat::Json => {
                        write_json(create(dir, &format!("{pred_stem}.json"))?, &predictions)?;
                    }
                }
                println!(
                    "{stem}: {} rows ({} realizations each)",
                    rows.len(),
                    config.realizations
                );
            }
        }
    }
    println!("sweep outputs in {}", dir.display());
    Ok(())
}

/// One line of the factor table: theory next to the recovered values.
#[derive(Serialize)]
struct TableRow {
    protocol: String,
    mode: String,
    theory_a: f64,
    theory_b: f64,
    theory_c: f64,
    a_hat: Option<f64>,
    a_se: Option<f64>,
    b_hat: Option<f64>,
    b_se: Option<f64>,
    c_hat: Option<f64>,
    c_se: Option<f64>,
    amplitude: Option<f64>,
    degenerate: Option<bool>,
    n_used: Option<usize>,
    error: Option<String>,
}

impl TableRow {
    fn empty(protocol: Protocol, mode: CorrelationMode) -> Self {
        let theory = protocol_factors(protocol, mode);
        TableRow {
            protocol: protocol.label().to_string(),
            mode: mode.label().to_string(),
            theory_a: theory.a,
            theory_b: theory.b,
            theory_c: theory.c,
            a_hat: None,
            a_se: None,
            b_hat: None,
            b_se: None,
            c_hat: None,
            c_se: None,
            amplitude: None,
            degenerate: None,
            n_used: None,
            error: None,
        }
    }

    fn from_report(
        protocol: Protocol,
        mode: CorrelationMode,
        report: &FitReport,
        calibration: &AmplitudeCalibration,
    ) -> Self {
        let mut row = TableRow::empty(protocol, mode);
        for param in &report.params {
            let (value, se) = if param.identifiable {
                (Some(param.value), Some(param.se))
            } else {
                (None, None)
            };
            match param.name.as_str() {
                "a" => (row.a_hat, row.a_se) = (value, se),
                "b" => (row.b_hat, row.b_se) = (value, se),
                "c" => (row.c_hat, row.c_se) = (value, se),
                _ => {}
            }
        }
        row.amplitude = Some(calibration.relative_amplitude);
        row.degenerate = Some(calibration.degenerate);
        row.n_used = Some(report.n_used);
        row
    }
}

fn format_cell(value: Option<f64>, se: Option<f64>) -> String {
    match (value, se) {
        (Some(v), Some(s)) => format!("{v:7.3} +/- {s:5.3}"),
        _ => "      n/a        ".to_string(),
    }
}

/// Simulates the full protocol grid at the first window duration and fits
/// every (protocol, mode) cell against the factor table.
///
/// The fitted model describes noise accumulated over the precession windows,
/// so this comparison always confines the injected noise to the plateaus;
/// the `ramp_noise` setting only affects plain sweeps.
fn cmd_table1(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let mut engine = config.engine_config();
    engine.ramp_noise = false;
    let delta = config.delta();
    let t_window = config.windows()[0];
    let mut table: Vec<TableRow> = Vec::new();

    for &protocol in &config.protocols {
        let mut rows: Vec<SweepRow> = Vec::new();
        for &mode in &config.modes {
            let specs = protocol_sweep_points(
                protocol,
                mode,
                &config.angles(),
                config.n_loops,
                delta,
                t_window,
            )?;
            rows.extend(sweep(&specs, &engine, config.realizations, config.base_seed)?);
        }
        let dataset = CoherenceDataset::from_sweep(
            &rows,
            delta,
            config.gamma_per_s,
            Provenance::Simulation {
                base_seed: config.base_seed,
                realizations: config.realizations,
            },
        );
        write_coherence_csv(
            create(dir, &format!("dataset_{}.csv", protocol.label().to_lowercase()))?,
            &dataset,
        )?;

        let calibration = calibrate_amplitude(&dataset);
        for &mode in &config.modes {
            let row = match &calibration {
                Ok(cal) => match fit_cell(&dataset, protocol, mode, cal) {
                    Ok(report) => TableRow::from_report(protocol, mode, &report, cal),
                    Err(err) => {
                        let mut row = TableRow::empty(protocol, mode);
                        row.error = Some(err.to_string());
                        row
                    }
                },
                Err(err) => {
                    let mut row = TableRow::empty(protocol, mode);
                    row.error = Some(err.to_string());
                    row
                }
            };
            table.push(row);
        }
    }

    match config.format {
        OutputFormat::Csv => {
            let mut writer = csv::Writer::from_writer(create(dir, "table1.csv")?);
            for row in &table {
                writer.serialize(row)?;
            }
            writer.flush()?;
        }
        OutputFormat::Json => write_json(create(dir, "table1.json")?, &table)?,
    }

    println!(
        "{:<9} {:<13} {:>13} {:>18} {:>18} {:>18}",
        "protocol", "mode", "theory (a b c)", "fitted a", "fitted b", "fitted c"
    );
    for row in &table {
        println!(
            "{:<9} {:<13} {:>5} {:>3} {:>3} {:>18} {:>18} {:>18}{}",
            row.protocol,
            row.mode,
            row.theory_a,
            row.theory_b,
            row.theory_c,
            format_cell(row.a_hat, row.a_se),
            format_cell(row.b_hat, row.b_se),
            format_cell(row.c_hat, row.c_se),
            match (&row.error, row.degenerate) {
                (Some(err), _) => format!("  [{err}]"),
                (None, Some(true)) => "  [degenerate amplitude]".to_string(),
                _ => String::new(),
            }
        );
    }
    if let Some(amp) = table.iter().find_map(|r| r.amplitude) {
        println!("calibrated noise amplitude sigma/Omega0 = {amp:.4}");
    }
    println!("table outputs in {}", dir.display());
    Ok(())
}

/// Tabulates the three exponent terms against window duration at a right-angle
/// solid angle, for the first-window echo cell where all three weights are 1.
fn cmd_fig2f(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let delta = config.delta();
    let factors = protocol_factors(Protocol::R, CorrelationMode::FirstWindowOnly);
    let solid_angle = PI / 2.0;
    let (t_min, t_max, steps) = (50e-9_f64, 1e-6_f64, 120usize);
    let mut records = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t_window = t_min * (t_max / t_min).powf(k as f64 / steps as f64);
        let geometry = Geometry::from_solid_angle(solid_angle, config.n_loops, delta, t_window)?;
        let noise = OUParams::from_relative_amplitude(
            config.relative_amplitude,
            geometry.omega0,
            config.gamma_per_s,
        )?;
        let supp = suppression_factor(&factors, &geometry, &noise);
        records.push(TermRecord {
            t_window_ns: t_window * 1e9,
            dynamic_term: supp.dynamic_term,
            geometric_term: supp.geometric_term,
            residual_term: supp.residual_term,
            nu: supp.nu,
        });
    }
    match config.format {
        OutputFormat::Csv => write_terms_csv(create(dir, "fig2f.csv")?, &records)?,
        OutputFormat::Json => write_json(create(dir, "fig2f.json")?, &records)?,
    }
    println!(
        "exponent decomposition over {} window durations in {}",
        records.len(),
        dir.display()
    );
    Ok(())
}

/// Reads and concatenates coherence CSV files into one dataset.
fn load_datasets(paths: &[PathBuf], config: &RunConfig) -> anyhow::Result<CoherenceDataset> {
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for path in paths {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let part = geodeph::dataset::read_coherence_csv(
            file,
            config.delta(),
            config.gamma_per_s,
            Provenance::External {
                source: path.display().to_string(),
            },
        )
        .with_context(|| format!("reading {}", path.display()))?;
        rows.extend(part.rows);
        sources.push(path.display().to_string());
    }
    let dataset = CoherenceDataset {
        rows,
        delta: config.delta(),
        gamma: config.gamma_per_s,
        provenance: Provenance::External {
            source: sources.join(", "),
        },
    };
    dataset.validate()?;
    Ok(dataset)
}

fn print_fit_report(report: &FitReport) {
    println!("== {} ==", report.label);
    println!(
        "rows used {} of {}, parameters {}, degrees of freedom {}",
        report.n_used, report.n_rows, report.k, report.dof
    );
    let amp = &report.amplitude;
    println!(
        "noise amplitude sigma/Omega0 = {:.5} +/- {:.5}{}",
        amp.relative_amplitude,
        amp.se,
        if amp.degenerate { " (degenerate)" } else { "" }
    );
    println!(
        "{:<16} {:>12} {:>12} {:>9}  {}",
        "parameter", "value", "std error", "t", "significant"
    );
    for param in &report.params {
        if param.identifiable {
            println!(
                "{:<16} {:>12.5} {:>12.5} {:>9}  {}",
                param.name,
                param.value,
                param.se,
                param
                    .t_value
                    .map_or("n/a".to_string(), |t| format!("{t:.2}")),
                if param.significant { "yes" } else { "no" }
            );
        } else {
            println!("{:<16} not identifiable from this dataset", param.name);
        }
    }
    match report.aicc {
        Some(aicc) => println!("weighted rss {:.6e}, AICc {aicc:.3}", report.rss),
        None => println!("weighted rss {:.6e}, AICc undefined for an exact fit", report.rss),
    }
    println!();
}

/// Fits both nested models, writes reports, quantile files, and a comparison.
fn cmd_fit(dir: &Path, dataset: &CoherenceDataset) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for family in [FitFamily::Constrained, FitFamily::Unconstrained] {
        let report = fit_simultaneous(dataset, family)?;
        write_json(
            create(dir, &format!("fit_{}.json", family.label()))?,
            &report,
        )?;
        if let Ok(diagnostics) = residual_diagnostics(&report) {
            write_quantiles_csv(
                create(dir, &format!("quantiles_{}.csv", family.label()))?,
                &diagnostics.points,
            )?;
            println!(
                "{} residuals: std {:.4}, KS statistic {:.4} (99% band {:.4}), {}",
                family.label(),
                diagnostics.residual_std,
                diagnostics.ks_statistic,
                diagnostics.ks_band_99,
                if diagnostics.within_band {
                    "consistent with Gaussian"
                } else {
                    "outside the Gaussian band"
                }
            );
        }
        print_fit_report(&report);
        reports.push(report);
    }

    let comparison = serde_json::json!({
        "constrained_aicc": reports[0].aicc,
        "unconstrained_aicc": reports[1].aicc,
        "aicc_difference": match (reports[0].aicc, reports[1].aicc) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        },
        "preferred": match (reports[0].aicc, reports[1].aicc) {
            (Some(a), Some(b)) => {
                if a <= b { "constrained" } else { "unconstrained" }
            }
            _ => "undecided",
        },
    });
    write_json(create(dir, "fit_summary.json")?, &comparison)?;
    match (reports[0].aicc, reports[1].aicc) {
        (Some(a), Some(b)) => println!(
            "AICc: constrained {a:.3}, unconstrained {b:.3}; {} preferred",
            if a <= b { "constrained" } else { "unconstrained" }
        ),
        _ => println!("AICc comparison undefined (exact fit)"),
    }
    println!("fit outputs in {}", dir.display());
    Ok(())
}

/// One summary line per schedule in the adiabaticity report.
#[derive(Serialize)]
struct AdiabRow {
    protocol: String,
    t_window_ns: f64,
    solid_angle: f64,
    plateau_s: f64,
    max_s: f64,
    noisy_max_s: f64,
    within_bound: bool,
}

/// Checks the adiabaticity parameter for every configured schedule, with and
/// without a noise realization riding on the drive amplitude.
fn cmd_adiab_report(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let engine = config.engine_config();
    let policy = config.ramp.policy();
    let delta = config.delta();
    let mode = config.modes[0];
    let mut summary: Vec<AdiabRow> = Vec::new();
    let mut worst: Option<(f64, AdiabaticityReport)> = None;

    for &protocol in &config.protocols {
        for &t_window in &config.windows() {
            for &solid_angle in &config.angles() {
                let geometry =
                    Geometry::from_solid_angle(solid_angle, config.n_loops, delta, t_window)?;
                let spec = ProtocolSpec::new(protocol, mode, geometry)?;
                let schedule = build_schedule(&spec, &policy, engine.dt)?;
                let noise = if config.relative_amplitude > 0.0 {
                    let params = OUParams::from_relative_amplitude(
                        config.relative_amplitude,
                        geometry.omega0,
                        config.gamma_per_s,
                    )?;
                    let mut trace = paired_traces(
                        &params,
                        mode,
                        schedule.window_span,
                        engine.noise_dt,
                        config.base_seed,
                    )?;
                    if !config.ramp_noise {
                        trace.zero_spans(&schedule.ramp_spans());
                    }
                    trace
                } else {
                    NoiseTrace::zero(mode)
                };
                let sample_dt = (schedule.window_span / 1000.0).max(engine.dt);
                let report = adiabaticity_report(&schedule, &noise, policy.s_max, sample_dt)?;
                summary.push(AdiabRow {
                    protocol: protocol.label().to_string(),
                    t_window_ns: t_window * 1e9,
                    solid_angle,
                    plateau_s: report.plateau_s,
                    max_s: report.max_s,
                    noisy_max_s: report.noisy_max_s,
                    within_bound: report.within_bound,
                });
                if worst.as_ref().is_none_or(|(s, _)| report.noisy_max_s > *s) {
                    worst = Some((report.noisy_max_s, report));
                }
            }
        }
    }

    match config.format {
        OutputFormat::Csv => {
            let mut writer = csv::Writer::from_writer(create(dir, "adiab_summary.csv")?);
            for row in &summary {
                writer.serialize(row)?;
            }
            writer.flush()?;
        }
        OutputFormat::Json => write_json(create(dir, "adiab_summary.json")?, &summary)?,
    }
    if let Some((_, report)) = &worst {
        write_adiabaticity_csv(create(dir, "adiab_samples.csv")?, report)?;
        write_json(create(dir, "adiab_worst.json")?, report)?;
        println!(
            "worst schedule: max s {:.4} (noisy {:.4}), bound {:.2}, within bound: {}",
            report.max_s, report.noisy_max_s, report.bound, report.within_bound
        );
    }
    let all_within = summary.iter().all(|row| row.within_bound);
    println!(
        "{} schedules checked, all within bound: {all_within}",
        summary.len()
    );
    println!("adiabaticity outputs in {}", dir.display());
    Ok(())
}
