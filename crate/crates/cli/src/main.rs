use clap::{Args, Parser, Subcommand, ValueEnum};
use lymphosim::io::{json_with_metadata, load_params, load_protocol, write_output, IoError, ParamsFile, RunMetadata};
use lymphosim::model::{CloneOrigin, MarrowState, ModelError, ModelParameters};
use lymphosim::protocol::{default_sehop_protocol, serialize_protocol, Deltas, DoseEntry, Protocol, ProtocolError};
use lymphosim::scenarios::{
    default_heatmap_grids, first_return_within, full_treatment_from, growth_from, heatmap, linspace,
    prednisone_sweep, treatment_start_from, ResponseCriteria, ScenarioError,
};
use lymphosim::sensitivity::{default_delta_domain, delta_sensitivity, Qoi, SensitivityError, SobolConfig};
use lymphosim::solver::{digest_of, SolverConfig, SolverError};
use lymphosim::stability::{full_stability_survey, survey_to_csv, StabilityError, Verdict};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lymphosim", version, about = "Leukemic clone growth, chemotherapy response, stability and sensitivity")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Parameter file (JSON); defaults to the bundled reference set.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Protocol file (JSON); defaults to the bundled induction schedule.
    #[arg(long, global = true)]
    protocol: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for grid commands (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    rel_tol: Option<f64>,
    #[arg(long, global = true)]
    abs_tol: Option<f64>,
    /// Clone origin, overriding the parameter file.
    #[arg(long, global = true)]
    origin: Option<Origin>,
    /// How doses enter the drug pool, overriding the protocol file.
    #[arg(long, global = true)]
    dose_entry: Option<Entry>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Origin {
    ProB,
    PreB,
}

#[derive(Clone, Copy, ValueEnum)]
enum Entry {
    DayStart,
    InDay,
}

#[derive(Subcommand)]
enum Command {
    /// Untreated growth from the initial state until detection.
    Grow,
    /// Growth, treatment from the day after detection, and follow-up.
    Treat {
        /// Influences `P,V,D,A`; defaults to the protocol's own.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        /// Days simulated after the protocol ends.
        #[arg(long, default_value_t = 50.0)]
        follow_up: f64,
    },
    /// Steady states and their eigenvalues.
    Stability,
    /// Day +8 blasts over a range of prednisone influences.
    Sweep {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 1.0 / 60.0)]
        min: f64,
        #[arg(long, default_value_t = 1.0 / 6.0)]
        max: f64,
    },
    /// Day +15 MRD over a prednisone x vincristine grid.
    Heatmap {
        #[arg(long, default_value_t = 21)]
        n_p: usize,
        #[arg(long, default_value_t = 21)]
        n_v: usize,
    },
    /// Sobol indices of the four drug influences.
    Sobol {
        /// Base sample count (power of two).
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        /// healthy_dayN, leukemic_dayN or log10_leukemic_dayN.
        #[arg(long, default_value = "leukemic_day15")]
        qoi: String,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidConfig(_) | SolverError::InvalidSpan { .. } | SolverError::NegativeInitialState => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Solver(s) => s.into(),
            ScenarioError::InvalidGrid(_) | ScenarioError::InvalidCriteria(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> Self {
        match e {
            SensitivityError::Solver(s) => s.into(),
            SensitivityError::InvalidRange { .. } | SensitivityError::InvalidSampleCount(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<StabilityError> for CliError {
    fn from(e: StabilityError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

/// Validated inputs shared by every command.
struct Run {
    file: ParamsFile,
    params: ModelParameters,
    protocol: Protocol,
    solver: SolverConfig,
    out: PathBuf,
    seed: u64,
}

impl Run {
    fn from_common(c: &Common) -> Result<Self, CliError> {
        let mut file = match &c.params {
            Some(p) => load_params(p)?,
            None => ParamsFile::bundled(),
        };
        if let Some(o) = c.origin {
            file = file.with_origin(match o {
                Origin::ProB => CloneOrigin::ProB,
                Origin::PreB => CloneOrigin::PreB,
            });
        }
        let params = file.parameters()?;
        let mut protocol = match &c.protocol {
            Some(p) => load_protocol(p)?,
            None => default_sehop_protocol(),
        };
        if let Some(e) = c.dose_entry {
            protocol = protocol.with_dose_entry(match e {
                Entry::DayStart => DoseEntry::DayStartBolus,
                Entry::InDay => DoseEntry::InDayThenReservoir,
            });
        }
        let mut solver = SolverConfig::default();
        if let Some(r) = c.rel_tol {
            solver.rel_tol = r;
        }
        if let Some(a) = c.abs_tol {
            solver.abs_tol = a;
        }
        solver.validate(true)?;
        if let Some(n) = c.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
        }
        Ok(Self {
            file,
            params,
            protocol,
            solver,
            out: c.out.clone(),
            seed: c.seed,
        })
    }

    fn metadata(&self, command: &str, with_protocol: bool) -> RunMetadata {
        let m = RunMetadata::new(command, self.seed)
            .with_digest("params", digest_of(&self.file))
            .with_digest("solver", digest_of(&self.solver));
        if with_protocol {
            m.with_digest("protocol", digest_of(&serialize_protocol(&self.protocol)))
        } else {
            m
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        Ok(write_output(&self.out, name, contents)?)
    }
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

fn grow(run: &Run) -> Result<(), CliError> {
    let meta = run.metadata("grow", false);
    let g = growth_from(&run.params, run.file.initial_state(), &run.solver)?;
    run.write("growth_trace.csv", &g.trace.to_csv(&[meta.header_line()]))?;
    let summary = json!({
        "clone_origin": run.file.clone_origin,
        "detection_day": g.detection_day,
    });
    let p = run.write("grow_summary.json", &json_with_metadata(&meta, summary))?;
    match g.detection_day {
        Some(d) => println!("detection day {d:.3} ({})", p.display()),
        None => println!("no detection within the growth horizon ({})", p.display()),
    }
    Ok(())
}

fn treat(run: &Run, deltas: Option<&[f64]>, follow_up: f64) -> Result<(), CliError> {
    let deltas = match deltas {
        Some(d) => {
            if d.len() != 4 {
                return Err(CliError::Config(format!("--deltas takes 4 comma-separated values, got {}", d.len())));
            }
            let d = Deltas::from_array([d[0], d[1], d[2], d[3]]);
            if d.to_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(CliError::Config("--deltas must be finite and >= 0".into()));
            }
            d
        }
        None => run.protocol.deltas(),
    };
    if !(follow_up.is_finite() && follow_up >= 0.0) {
        return Err(CliError::Config("--follow-up must be finite and >= 0".into()));
    }
    let protocol = run.protocol.with_deltas(&deltas);
    let meta = run.metadata("treat", true);
    let criteria = ResponseCriteria::default();
    let fc = full_treatment_from(&run.params, run.file.initial_state(), &deltas, &protocol, &criteria, follow_up, &run.solver)?;
    run.write("treatment_trace.csv", &fc.trace.to_csv(&[meta.header_line()]))?;
    let t0 = fc.start.t_start;
    let after = t0 + f64::from(protocol.duration_days);
    let healthy = MarrowState { l: 0.0, ..run.file.initial_state() };
    let back = first_return_within(&fc.trace, after, &healthy, 0.10);
    let summary = json!({
        "clone_origin": run.file.clone_origin,
        "detection_day": fc.start.detection_day,
        "t_start": t0,
        "deltas": deltas,
        "criteria": criteria,
        "response": fc.response,
        "healthy_return_within_10pct_day": back.map(|t| t.map(|t| t - t0)),
        "final_leukemic": finite_or_null(fc.trace.last_state().l),
    });
    let p = run.write("response.json", &json_with_metadata(&meta, summary))?;
    println!("{} ({})", fc.response.overall, p.display());
    Ok(())
}

fn stability(run: &Run) -> Result<(), CliError> {
    let meta = run.metadata("stability", false);
    let survey = full_stability_survey(&run.params)?;
    let p = run.write("stability.csv", &survey_to_csv(&survey, &[meta.header_line()]))?;
    let stable: Vec<&str> = survey
        .iter()
        .filter(|r| r.verdict == Verdict::Stable)
        .map(|r| r.label.as_str())
        .collect();
    println!("stable: {} ({})", if stable.is_empty() { "none".to_string() } else { stable.join(", ") }, p.display());
    Ok(())
}

fn sweep(run: &Run, n: usize, range: (f64, f64)) -> Result<(), CliError> {
    let meta = run.metadata("sweep", true);
    let (_, start) = treatment_start_from(&run.params, run.file.initial_state(), &run.solver)?;
    let criteria = ResponseCriteria::default();
    let s = prednisone_sweep(&run.params, &run.protocol, &start, &criteria, n, range, &run.solver)?;
    run.write("sweep.csv", &s.to_csv(&[meta.header_line()]))?;
    let summary = json!({
        "t_start": start.t_start,
        "day8_limit": s.limit,
        "threshold_delta": s.threshold_delta,
        "interpolated_threshold": s.interpolated_threshold,
        "n": n,
        "range": [range.0, range.1],
    });
    let p = run.write("sweep_summary.json", &json_with_metadata(&meta, summary))?;
    match s.threshold_delta {
        Some(t) => println!("threshold_delta {t:.5} ({})", p.display()),
        None => println!("no responder in range ({})", p.display()),
    }
    Ok(())
}

fn heatmap_cmd(run: &Run, n_p: usize, n_v: usize) -> Result<(), CliError> {
    if n_p < 2 || n_v < 2 {
        return Err(CliError::Config("--n-p and --n-v must be at least 2".into()));
    }
    let meta = run.metadata("heatmap", true);
    let (dp, dv) = default_heatmap_grids();
    let (dp, dv) = (linspace(dp[0], dp[dp.len() - 1], n_p), linspace(dv[0], dv[dv.len() - 1], n_v));
    let (_, start) = treatment_start_from(&run.params, run.file.initial_state(), &run.solver)?;
    let h = heatmap(&run.params, &run.protocol, &start, &dp, &dv, &run.protocol.deltas(), &run.solver)?;
    run.write("heatmap.csv", &h.to_csv(&[meta.header_line()]))?;
    let threshold = 100.0 * ResponseCriteria::default().day15_mrd_fraction;
    let (resp, nonresp) = h.region_counts(threshold);
    let summary = json!({
        "t_start": start.t_start,
        "mrd_threshold_percent": threshold,
        "responder_regions": resp,
        "nonresponder_regions": nonresp,
        "cells": dp.len() * dv.len(),
    });
    let p = run.write("heatmap_summary.json", &json_with_metadata(&meta, summary))?;
    println!("{} cells, regions {resp} responder / {nonresp} non-responder ({})", dp.len() * dv.len(), p.display());
    Ok(())
}

fn sobol(run: &Run, samples: usize, qoi: &str, bootstrap: usize) -> Result<(), CliError> {
    let qoi: Qoi = qoi.parse().map_err(CliError::Config)?;
    let meta = run.metadata("sobol", true);
    let cfg = SobolConfig {
        base_samples: samples,
        seed: run.seed,
        qoi,
        bootstrap,
    };
    cfg.validate()?;
    let (_, start) = treatment_start_from(&run.params, run.file.initial_state(), &run.solver)?;
    let r = delta_sensitivity(&run.params, &run.protocol, &start, &default_delta_domain(), &cfg, &run.solver)?;
    run.write("sobol.csv", &r.to_csv(&[meta.header_line()]))?;
    let p = run.write("sobol_summary.json", &json_with_metadata(&meta, serde_json::to_value(&r).expect("serializable")))?;
    let ranking: Vec<&str> = r.total_ranking().iter().map(|&i| r.names[i].as_str()).collect();
    println!("total-index ranking: {} ({})", ranking.join(" > "), p.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let run = Run::from_common(&cli.common)?;
    match &cli.command {
        Command::Grow => grow(&run),
        Command::Treat { deltas, follow_up } => treat(&run, deltas.as_deref(), *follow_up),
        Command::Stability => stability(&run),
        Command::Sweep { n, min, max } => sweep(&run, *n, (*min, *max)),
        Command::Heatmap { n_p, n_v } => heatmap_cmd(&run, *n_p, *n_v),
        Command::Sobol { samples, qoi, bootstrap } => sobol(&run, *samples, qoi, *bootstrap),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, msg) = match &e {
                CliError::Config(m) => ("configuration error", m),
                CliError::Numerical(m) => ("numerical failure", m),
            };
            eprintln!("lymphosim: {kind}: {msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
