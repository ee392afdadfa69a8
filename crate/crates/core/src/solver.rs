//! Time integration of the untreated and treated systems, plus trace queries.

use crate::integrator::{DenseStep, Dopri5, IntegratorError};
use crate::model::{treatment_rhs, MarrowState, ModelParameters};
use crate::protocol::{apply_dose_event, DoseEntry, DrugState, Protocol, DRUG_COUNT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid time span [{t0}, {t1}]")]
    InvalidSpan { t0: f64, t1: f64 },
    #[error("initial state must be nonnegative")]
    NegativeInitialState,
    #[error("compartment {compartment} reached {value:e} at t = {t} (below -abs_tol)")]
    NegativeState {
        t: f64,
        compartment: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("t = {t} outside the trace span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("blast fraction undefined for an empty marrow")]
    EmptyMarrow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rel_tol: f64,
    /// Absolute tolerance on cell counts.
    pub abs_tol: f64,
    /// Absolute tolerance on drug amounts.
    pub drug_abs_tol: f64,
    /// Relative tolerance on drug amounts.
    pub drug_rel_tol: f64,
    /// Step ceiling (days).
    pub max_step: f64,
    /// Output grid spacing (days).
    pub sample_interval: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-2,
            drug_abs_tol: 1e-12,
            drug_rel_tol: 1e-10,
            max_step: 1.0,
            sample_interval: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, with_protocol: bool) -> Result<(), SolverError> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SolverError::InvalidConfig(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        pos("rel_tol", self.rel_tol)?;
        pos("abs_tol", self.abs_tol)?;
        pos("drug_abs_tol", self.drug_abs_tol)?;
        pos("drug_rel_tol", self.drug_rel_tol)?;
        pos("max_step", self.max_step)?;
        pos("sample_interval", self.sample_interval)?;
        if with_protocol && self.max_step > 1.0 {
            return Err(SolverError::InvalidConfig(format!(
                "max_step must be <= 1 day under treatment, got {}",
                self.max_step
            )));
        }
        Ok(())
    }

    /// Same configuration with both tolerances scaled by `factor`.
    pub fn scaled_tolerances(&self, factor: f64) -> Self {
        Self {
            rel_tol: self.rel_tol * factor,
            abs_tol: self.abs_tol * factor,
            drug_abs_tol: self.drug_abs_tol * factor,
            drug_rel_tol: self.drug_rel_tol * factor,
            ..*self
        }
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    Sha256::digest(&json).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub params_digest: String,
    pub protocol_digest: Option<String>,
    pub config_digest: String,
    /// Treatment start (days), if any.
    pub t_start: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub states: Vec<MarrowState>,
    /// One entry per time, or empty for untreated runs.
    pub drug_amounts: Vec<DrugState>,
    pub mu_values: Vec<f64>,
    pub metadata: TraceMetadata,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty trace")
    }

    pub fn last_state(&self) -> MarrowState {
        *self.states.last().expect("non-empty trace")
    }

    pub fn last_drug_state(&self) -> DrugState {
        self.drug_amounts.last().copied().unwrap_or_default()
    }

    pub fn is_treated(&self) -> bool {
        !self.drug_amounts.is_empty()
    }

    /// Appends `later`, which must start where `self` ends. The shared time
    /// point is taken from `later`.
    pub fn concat(mut self, later: SimulationTrace) -> SimulationTrace {
        let split = if !self.is_empty() && !later.is_empty() && self.end() >= later.start() {
            self.times.iter().position(|t| *t >= later.start()).unwrap_or(self.len())
        } else {
            self.len()
        };
        self.times.truncate(split);
        self.states.truncate(split);
        self.mu_values.truncate(split);
        let treated = self.is_treated() || later.is_treated();
        if treated {
            self.drug_amounts.resize(split, DrugState::zero());
        }
        self.times.extend(later.times);
        self.states.extend(later.states);
        self.mu_values.extend(later.mu_values);
        if treated {
            if later.drug_amounts.is_empty() {
                self.drug_amounts.resize(self.times.len(), DrugState::zero());
            } else {
                self.drug_amounts.extend(later.drug_amounts);
            }
        }
        self.metadata = TraceMetadata {
            protocol_digest: later.metadata.protocol_digest.or(self.metadata.protocol_digest),
            t_start: later.metadata.t_start.or(self.metadata.t_start),
            ..later.metadata
        };
        self
    }

    /// Writes the trace as CSV, optionally preceded by `# ` comment lines.
    pub fn to_csv(&self, header_comments: &[String]) -> String {
        let mut out = String::new();
        for c in header_comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("t_days,C1,C2,C3,L,mu,mu_P,mu_V,mu_D,mu_A,blast_fraction\n");
        for i in 0..self.len() {
            let s = &self.states[i];
            let d = self.drug_amounts.get(i).copied().unwrap_or_default();
            let bf = blast_fraction(s).unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                self.times[i],
                s.c1,
                s.c2,
                s.c3,
                s.l,
                self.mu_values[i],
                d.amounts[0],
                d.amounts[1],
                d.amounts[2],
                d.amounts[3],
                bf
            );
        }
        out
    }
}

/// `L / (C1 + C2 + C3 + L)`.
pub fn blast_fraction(state: &MarrowState) -> Result<f64, SolverError> {
    let total = state.total();
    if total > 0.0 {
        Ok(state.l / total)
    } else {
        Err(SolverError::EmptyMarrow)
    }
}

/// First time the blast fraction reaches `threshold`, interpolated linearly
/// in the fraction between bracketing samples.
pub fn detect_detection_day(trace: &SimulationTrace, threshold: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for (t, s) in trace.times.iter().zip(&trace.states) {
        let Ok(f) = blast_fraction(s) else {
            prev = None;
            continue;
        };
        if f >= threshold {
            return Some(match prev {
                Some((t0, f0)) if f0 < threshold => t0 + (threshold - f0) / (f - f0) * (t - t0),
                _ => *t,
            });
        }
        prev = Some((*t, f));
    }
    None
}

fn bracket(trace: &SimulationTrace, t: f64) -> Result<(usize, f64), SolverError> {
    if trace.is_empty() || !(t >= trace.start() && t <= trace.end()) {
        return Err(SolverError::OutOfRange {
            t,
            start: trace.times.first().copied().unwrap_or(f64::NAN),
            end: trace.times.last().copied().unwrap_or(f64::NAN),
        });
    }
    let i = trace.times.partition_point(|x| *x <= t);
    if i == 0 {
        return Ok((0, 0.0));
    }
    let lo = i - 1;
    if trace.times[lo] == t || lo + 1 == trace.len() {
        return Ok((lo, 0.0));
    }
    let w = (t - trace.times[lo]) / (trace.times[lo + 1] - trace.times[lo]);
    Ok((lo, w))
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + w * (b - a)
    }
}

/// Cell state at `t`, linearly interpolated between samples.
pub fn sample_at(trace: &SimulationTrace, t: f64) -> Result<MarrowState, SolverError> {
    let (i, w) = bracket(trace, t)?;
    if w == 0.0 {
        return Ok(trace.states[i]);
    }
    let (a, b) = (trace.states[i].to_array(), trace.states[i + 1].to_array());
    Ok(MarrowState::from_array(std::array::from_fn(|k| lerp(a[k], b[k], w))))
}

/// Drug amounts at `t`, linearly interpolated (zero for untreated traces).
pub fn sample_drugs_at(trace: &SimulationTrace, t: f64) -> Result<DrugState, SolverError> {
    let (i, w) = bracket(trace, t)?;
    if !trace.is_treated() {
        return Ok(DrugState::zero());
    }
    if w == 0.0 {
        return Ok(trace.drug_amounts[i]);
    }
    let (a, b) = (trace.drug_amounts[i].amounts, trace.drug_amounts[i + 1].amounts);
    Ok(DrugState {
        amounts: std::array::from_fn(|k| lerp(a[k], b[k], w)),
    })
}

const COMPARTMENTS: [&str; 4] = ["C1", "C2", "C3", "L"];
const N_JOINT: usize = 4 + DRUG_COUNT;

fn clamp_cells(a: [f64; 4]) -> MarrowState {
    MarrowState::from_array(a.map(|v| v.max(0.0)))
}

fn check_negative(t: f64, y: &[f64], abs_tol: f64) -> Result<(), SolverError> {
    for (i, v) in y.iter().take(4).enumerate() {
        if *v < -abs_tol {
            return Err(SolverError::NegativeState {
                t,
                compartment: COMPARTMENTS[i],
                value: *v,
            });
        }
    }
    Ok(())
}

/// Sample times of the uniform grid `t0 + i·dt` lying strictly inside `(a, b)`,
/// skipping points that coincide with either end up to roundoff.
fn grid_inside(t0: f64, dt: f64, a: f64, b: f64) -> impl Iterator<Item = f64> {
    let eps = 1e-9 * a.abs().max(b.abs()).max(1.0);
    let first = ((a - t0) / dt).floor().max(0.0) as u64;
    (first..)
        .map(move |i| t0 + i as f64 * dt)
        .skip_while(move |t| *t <= a + eps)
        .take_while(move |t| *t < b - eps)
}

struct Recorder<'a> {
    trace: &'a mut SimulationTrace,
    pending: std::iter::Peekable<std::vec::IntoIter<f64>>,
    abs_tol: f64,
    with_drugs: bool,
    mu_of: &'a dyn Fn(&[f64]) -> f64,
}

impl Recorder<'_> {
    fn push(&mut self, t: f64, y: &[f64]) {
        let cells = [y[0], y[1], y[2], y[3]];
        self.trace.times.push(t);
        self.trace.states.push(clamp_cells(cells));
        self.trace.mu_values.push((self.mu_of)(y));
        if self.with_drugs {
            self.trace.drug_amounts.push(DrugState {
                amounts: std::array::from_fn(|j| y[4 + j].max(0.0)),
            });
        }
    }

    fn on_step<const N: usize>(&mut self, d: &DenseStep<N>) -> Result<(), SolverError> {
        let end = d.t1();
        let y_end = d.eval(end);
        check_negative(end, &y_end, self.abs_tol)?;
        while let Some(&t) = self.pending.peek() {
            if t > end {
                break;
            }
            self.pending.next();
            let y = d.eval(t);
            check_negative(t, &y, self.abs_tol)?;
            self.push(t, &y);
        }
        Ok(())
    }
}

fn make_integrator<const N: usize>(config: &SolverConfig, max_step: f64) -> Dopri5<N> {
    Dopri5 {
        rtol: std::array::from_fn(|i| if i < 4 { config.rel_tol } else { config.drug_rel_tol }),
        atol: std::array::from_fn(|i| if i < 4 { config.abs_tol } else { config.drug_abs_tol }),
        max_step,
        min_step: 0.0,
    }
}

fn validate_state(state: &MarrowState) -> Result<(), SolverError> {
    if state.is_nonnegative() && state.to_array().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NegativeInitialState)
    }
}

/// Integrates the untreated system over `[t0, t1]`, sampled every
/// `config.sample_interval` days (plus both ends).
pub fn integrate_leukemia(
    params: &ModelParameters,
    state0: MarrowState,
    t_span: (f64, f64),
    config: &SolverConfig,
) -> Result<SimulationTrace, SolverError> {
    config.validate(false)?;
    validate_state(&state0)?;
    let (t0, t1) = t_span;
    if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
        return Err(SolverError::InvalidSpan { t0, t1 });
    }
    let mut trace = SimulationTrace {
        times: Vec::new(),
        states: Vec::new(),
        drug_amounts: Vec::new(),
        mu_values: Vec::new(),
        metadata: TraceMetadata {
            params_digest: digest_of(params.values()),
            protocol_digest: None,
            config_digest: digest_of(config),
            t_start: None,
        },
    };
    let zero = |_: &[f64]| 0.0;
    let grid: Vec<f64> = grid_inside(t0, config.sample_interval, t0, t1).collect();
    let mut rec = Recorder {
        trace: &mut trace,
        pending: grid.into_iter().peekable(),
        abs_tol: config.abs_tol,
        with_drugs: false,
        mu_of: &zero,
    };
    let y0 = state0.to_array();
    rec.push(t0, &y0);
    let solver = make_integrator::<4>(config, config.max_step);
    let rhs = |_: f64, y: &[f64; 4]| treatment_rhs(params, &MarrowState::from_array(*y), 0.0).to_array();
    let y1 = solver.integrate(rhs, t0, y0, t1, |d: &DenseStep<4>| rec.on_step(d))?;
    rec.push(t1, &y1);
    Ok(trace)
}

fn joint_rhs(params: &ModelParameters, lambda: &[f64; DRUG_COUNT], deltas: &[f64; DRUG_COUNT], offset: f64, y: &[f64; N_JOINT]) -> [f64; N_JOINT] {
    let cells = MarrowState::from_array([y[0], y[1], y[2], y[3]]);
    let mu = offset + (0..DRUG_COUNT).map(|j| deltas[j] * y[4 + j]).sum::<f64>();
    let dc = treatment_rhs(params, &cells, mu).to_array();
    let mut out = [0.0; N_JOINT];
    out[..4].copy_from_slice(&dc);
    for j in 0..DRUG_COUNT {
        out[4 + j] = -lambda[j] * y[4 + j];
    }
    out
}

/// Integrates the treated system from `t_start` to `t_end`.
///
/// Treatment day `d` covers `[t_start + d − 1, t_start + d)`. The integrator
/// is restarted at every day boundary of the protocol, where the day's doses
/// enter according to `protocol.dose_entry`. After the last protocol day the
/// drug amounts keep decaying with no further doses.
pub fn integrate_treatment(
    params: &ModelParameters,
    protocol: &Protocol,
    state0: MarrowState,
    drug_state0: DrugState,
    t_start: f64,
    t_end: f64,
    config: &SolverConfig,
) -> Result<SimulationTrace, SolverError> {
    config.validate(true)?;
    validate_state(&state0)?;
    if !(t_start.is_finite() && t_end.is_finite() && t_end > t_start) {
        return Err(SolverError::InvalidSpan { t0: t_start, t1: t_end });
    }
    if !drug_state0.is_nonnegative() {
        return Err(SolverError::NegativeInitialState);
    }
    let lambda = protocol.decay_rates();
    let deltas = protocol.deltas().to_array();
    let mut trace = SimulationTrace {
        times: Vec::new(),
        states: Vec::new(),
        drug_amounts: Vec::new(),
        mu_values: Vec::new(),
        metadata: TraceMetadata {
            params_digest: digest_of(params.values()),
            protocol_digest: Some(digest_of(&crate::protocol::serialize_protocol(protocol))),
            config_digest: digest_of(config),
            t_start: Some(t_start),
        },
    };
    let solver = make_integrator::<N_JOINT>(config, config.max_step.min(1.0));

    let mut y = [0.0; N_JOINT];
    y[..4].copy_from_slice(&state0.to_array());
    y[4..].copy_from_slice(&drug_state0.amounts);

    let mut seg_start = t_start;
    let mut day = 1u32;
    loop {
        let in_protocol = day <= protocol.duration_days;
        let seg_end = if in_protocol {
            (t_start + day as f64).min(t_end)
        } else {
            t_end
        };
        let mut offset = 0.0;
        if in_protocol {
            match protocol.dose_entry {
                DoseEntry::DayStartBolus => {
                    let d = apply_dose_event(&DrugState { amounts: y4(&y) }, protocol, day);
                    y[4..].copy_from_slice(&d.amounts);
                }
                DoseEntry::InDayThenReservoir => {
                    let q = protocol.doses_on(day);
                    offset = (0..DRUG_COUNT).map(|j| deltas[j] * q[j]).sum();
                }
            }
        }
        let mu_of = move |v: &[f64]| offset + (0..DRUG_COUNT).map(|j| deltas[j] * v[4 + j]).sum::<f64>();
        let grid: Vec<f64> = grid_inside(t_start, config.sample_interval, seg_start, seg_end).collect();
        let mut rec = Recorder {
            trace: &mut trace,
            pending: grid.into_iter().peekable(),
            abs_tol: config.abs_tol,
            with_drugs: true,
            mu_of: &mu_of,
        };
        rec.push(seg_start, &y);
        let rhs = |_: f64, v: &[f64; N_JOINT]| joint_rhs(params, &lambda, &deltas, offset, v);
        y = solver.integrate(rhs, seg_start, y, seg_end, |d: &DenseStep<N_JOINT>| rec.on_step(d))?;
        if in_protocol && protocol.dose_entry == DoseEntry::InDayThenReservoir {
            let d = apply_dose_event(&DrugState { amounts: y4(&y) }, protocol, day);
            y[4..].copy_from_slice(&d.amounts);
        }
        if seg_end >= t_end {
            let final_mu = (0..DRUG_COUNT).map(|j| deltas[j] * y[4 + j]).sum::<f64>();
            let mut rec_end = Recorder {
                trace: &mut trace,
                pending: Vec::new().into_iter().peekable(),
                abs_tol: config.abs_tol,
                with_drugs: true,
                mu_of: &|_| final_mu,
            };
            rec_end.push(t_end, &y);
            break;
        }
        seg_start = seg_end;
        day += 1;
    }
    Ok(trace)
}

fn y4(y: &[f64; N_JOINT]) -> [f64; DRUG_COUNT] {
    std::array::from_fn(|j| y[4 + j])
}
