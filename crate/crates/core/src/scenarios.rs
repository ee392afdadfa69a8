//! Experiments: growth to detection, response checkpoints, the prednisone
//! sweep, the prednisone/vincristine grid and the full treatment course.

use crate::model::{MarrowState, ModelParameters};
use crate::protocol::{Deltas, DrugState, Protocol};
use crate::solver::{
    blast_fraction, detect_detection_day, integrate_leukemia, integrate_treatment, sample_at, SimulationTrace,
    SolverConfig, SolverError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("trace covers [{start}, {end}] but day {needed} is required")]
    InsufficientSpan { start: f64, end: f64, needed: f64 },
    #[error("blast fraction never reached {threshold} within {horizon} days")]
    NotDetected { threshold: f64, horizon: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid response criteria: {0}")]
    InvalidCriteria(String),
}

/// Blast fraction at which the disease is diagnosed.
pub const DETECTION_FRACTION: f64 = 0.8;
/// Horizon of the untreated growth runs (days).
pub const GROWTH_HORIZON: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseCriteria {
    /// Marrow blasts allowed at day +8 (cells).
    pub day8_marrow_blast_limit: f64,
    /// Leukemic marrow fraction allowed at day +15.
    pub day15_mrd_fraction: f64,
    /// Blasts allowed at day +33 (cells).
    pub day33_blast_limit: f64,
    /// Blood volume (litres).
    pub blood_volume: f64,
    pub marrow_to_blood_factor: f64,
}

impl Default for ResponseCriteria {
    fn default() -> Self {
        Self::from_blood(2.3, 10.0)
    }
}

impl ResponseCriteria {
    /// Day +8 limit of `1e6` blasts per ml of blood scaled to the marrow.
    pub fn from_blood(blood_volume: f64, marrow_to_blood_factor: f64) -> Self {
        Self {
            day8_marrow_blast_limit: blood_volume * 1e6 * 1000.0 * marrow_to_blood_factor,
            day15_mrd_fraction: 1e-4,
            day33_blast_limit: 1.0,
            blood_volume,
            marrow_to_blood_factor,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fields = [
            ("day8_marrow_blast_limit", self.day8_marrow_blast_limit),
            ("day15_mrd_fraction", self.day15_mrd_fraction),
            ("day33_blast_limit", self.day33_blast_limit),
            ("blood_volume", self.blood_volume),
            ("marrow_to_blood_factor", self.marrow_to_blood_factor),
        ];
        for (name, v) in fields {
            if v.is_nan() || v <= 0.0 {
                return Err(ScenarioError::InvalidCriteria(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checkpoint {
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Overall {
    Responder,
    NonResponder,
}

impl fmt::Display for Overall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Overall::Responder => "Responder",
            Overall::NonResponder => "NonResponder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResponseReport {
    /// Leukemic cells at day +8.
    pub day8_blasts: Checkpoint,
    /// Leukemic marrow fraction at day +15.
    pub day15_fraction: Checkpoint,
    /// Leukemic cells at day +33.
    pub day33_blasts: Checkpoint,
    pub overall: Overall,
}

fn state_at(trace: &SimulationTrace, t: f64) -> Result<MarrowState, ScenarioError> {
    sample_at(trace, t).map_err(|_| ScenarioError::InsufficientSpan {
        start: trace.times.first().copied().unwrap_or(f64::NAN),
        end: trace.times.last().copied().unwrap_or(f64::NAN),
        needed: t,
    })
}

/// Evaluates the day +8, +15 and +33 checkpoints of a trace treated from `t_start`.
pub fn classify_response(
    trace: &SimulationTrace,
    criteria: &ResponseCriteria,
    t_start: f64,
) -> Result<ResponseReport, ScenarioError> {
    criteria.validate()?;
    let l8 = state_at(trace, t_start + 8.0)?.l;
    let f15 = blast_fraction(&state_at(trace, t_start + 15.0)?)?;
    let l33 = state_at(trace, t_start + 33.0)?.l;
    let day8_blasts = Checkpoint {
        value: l8,
        pass: l8 < criteria.day8_marrow_blast_limit,
    };
    let day15_fraction = Checkpoint {
        value: f15,
        pass: f15 < criteria.day15_mrd_fraction,
    };
    let day33_blasts = Checkpoint {
        value: l33,
        pass: l33 < criteria.day33_blast_limit,
    };
    let overall = if day8_blasts.pass && day15_fraction.pass && day33_blasts.pass {
        Overall::Responder
    } else {
        Overall::NonResponder
    };
    Ok(ResponseReport {
        day8_blasts,
        day15_fraction,
        day33_blasts,
        overall,
    })
}

/// Untreated run from the reference marrow with a single leukemic cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthResult {
    pub trace: SimulationTrace,
    pub detection_day: Option<f64>,
}

pub fn growth_experiment(params: &ModelParameters, config: &SolverConfig) -> Result<GrowthResult, ScenarioError> {
    growth_from(params, MarrowState::reference_initial(1.0), config)
}

/// Untreated run over [`GROWTH_HORIZON`] from an arbitrary marrow.
pub fn growth_from(params: &ModelParameters, initial: MarrowState, config: &SolverConfig) -> Result<GrowthResult, ScenarioError> {
    let trace = integrate_leukemia(params, initial, (0.0, GROWTH_HORIZON), config)?;
    let detection_day = detect_detection_day(&trace, DETECTION_FRACTION);
    Ok(GrowthResult { trace, detection_day })
}

/// Where treatment begins: the day after detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreatmentStart {
    pub detection_day: f64,
    /// First whole day after detection.
    pub t_start: f64,
    /// Marrow state at `t_start`.
    pub state: MarrowState,
}

/// Grows the clone from one cell, detects it and integrates up to the start of treatment.
pub fn treatment_start(params: &ModelParameters, config: &SolverConfig) -> Result<(GrowthResult, TreatmentStart), ScenarioError> {
    treatment_start_from(params, MarrowState::reference_initial(1.0), config)
}

pub fn treatment_start_from(
    params: &ModelParameters,
    initial: MarrowState,
    config: &SolverConfig,
) -> Result<(GrowthResult, TreatmentStart), ScenarioError> {
    let growth = growth_from(params, initial, config)?;
    let detection_day = growth.detection_day.ok_or(ScenarioError::NotDetected {
        threshold: DETECTION_FRACTION,
        horizon: GROWTH_HORIZON,
    })?;
    let t_start = detection_day.floor() + 1.0;
    let to_start = integrate_leukemia(params, initial, (0.0, t_start), config)?;
    let start = TreatmentStart {
        detection_day,
        t_start,
        state: to_start.last_state(),
    };
    Ok((
        GrowthResult {
            trace: to_start,
            detection_day: Some(detection_day),
        },
        start,
    ))
}

fn treat_until(
    params: &ModelParameters,
    protocol: &Protocol,
    start: &TreatmentStart,
    day: f64,
    config: &SolverConfig,
) -> Result<MarrowState, ScenarioError> {
    let cfg = SolverConfig {
        sample_interval: config.sample_interval.max(1.0),
        ..*config
    };
    let trace = integrate_treatment(params, protocol, start.state, DrugState::zero(), start.t_start, start.t_start + day, &cfg)?;
    Ok(trace.last_state())
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub delta_values: Vec<f64>,
    /// Leukemic cells at day +8.
    pub day8_blasts: Vec<f64>,
    pub limit: f64,
    /// Smallest swept value whose day +8 blasts are under the limit.
    pub threshold_delta: Option<f64>,
    /// Crossing of the limit, interpolated in `log L` between the bracketing sweep values.
    pub interpolated_threshold: Option<f64>,
}

impl SweepResult {
    pub fn responds(&self, i: usize) -> bool {
        self.day8_blasts[i] < self.limit
    }

    pub fn to_csv(&self, header_comments: &[String]) -> String {
        let mut out = String::new();
        for c in header_comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("delta_P,day8_blasts,responds\n");
        for i in 0..self.delta_values.len() {
            let _ = writeln!(out, "{},{:e},{}", self.delta_values[i], self.day8_blasts[i], self.responds(i));
        }
        out
    }
}

/// Day +8 marrow blasts over `n` prednisone influences spanning `range`.
///
/// Only prednisone is given before day +8, so the other influences are set
/// to zero and the run stops at the day +8 readout.
pub fn prednisone_sweep(
    params: &ModelParameters,
    protocol: &Protocol,
    start: &TreatmentStart,
    criteria: &ResponseCriteria,
    n: usize,
    range: (f64, f64),
    config: &SolverConfig,
) -> Result<SweepResult, ScenarioError> {
    criteria.validate()?;
    if n < 2 || range.0.partial_cmp(&range.1) != Some(Ordering::Less) || range.0 < 0.0 {
        return Err(ScenarioError::InvalidGrid(format!(
            "sweep needs n >= 2 and 0 <= low < high, got n = {n}, range = {range:?}"
        )));
    }
    let delta_values = linspace(range.0, range.1, n);
    let day8_blasts = delta_values
        .par_iter()
        .map(|&dp| {
            let deltas = Deltas {
                prednisone: dp,
                ..Deltas::zero()
            };
            treat_until(params, &protocol.with_deltas(&deltas), start, 8.0, config).map(|s| s.l)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let limit = criteria.day8_marrow_blast_limit;
    let first = day8_blasts.iter().position(|l| *l < limit);
    let threshold_delta = first.map(|i| delta_values[i]);
    let interpolated_threshold = first.map(|i| {
        if i == 0 {
            return delta_values[0];
        }
        let (x0, x1) = (delta_values[i - 1], delta_values[i]);
        let (y0, y1) = (day8_blasts[i - 1].ln(), day8_blasts[i].ln());
        x0 + (limit.ln() - y0) / (y1 - y0) * (x1 - x0)
    });
    Ok(SweepResult {
        delta_values,
        day8_blasts,
        limit,
        threshold_delta,
        interpolated_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapResult {
    pub delta_p: Vec<f64>,
    pub delta_v: Vec<f64>,
    /// `mrd_percent[i][j]`: day +15 leukemic percentage at `(delta_p[i], delta_v[j])`.
    pub mrd_percent: Vec<Vec<f64>>,
}

impl HeatmapResult {
    /// Value at the grid cell closest to `(dp, dv)`.
    pub fn nearest(&self, dp: f64, dv: f64) -> (f64, f64, f64) {
        let near = |g: &[f64], x: f64| {
            (0..g.len())
                .min_by(|&a, &b| (g[a] - x).abs().total_cmp(&(g[b] - x).abs()))
                .expect("non-empty grid")
        };
        let (i, j) = (near(&self.delta_p, dp), near(&self.delta_v, dv));
        (self.delta_p[i], self.delta_v[j], self.mrd_percent[i][j])
    }

    /// Number of 4-connected components of responding cells (`< threshold`)
    /// and of non-responding cells.
    pub fn region_counts(&self, threshold_percent: f64) -> (usize, usize) {
        let (np, nv) = (self.delta_p.len(), self.delta_v.len());
        let mut label = vec![vec![false; nv]; np];
        let mut counts = [0usize; 2];
        for i0 in 0..np {
            for j0 in 0..nv {
                if label[i0][j0] {
                    continue;
                }
                let class = self.mrd_percent[i0][j0] < threshold_percent;
                counts[usize::from(class)] += 1;
                let mut stack = vec![(i0, j0)];
                label[i0][j0] = true;
                while let Some((i, j)) = stack.pop() {
                    let mut visit = |a: usize, b: usize| {
                        if !label[a][b] && (self.mrd_percent[a][b] < threshold_percent) == class {
                            label[a][b] = true;
                            stack.push((a, b));
                        }
                    };
                    if i > 0 {
                        visit(i - 1, j);
                    }
                    if i + 1 < np {
                        visit(i + 1, j);
                    }
                    if j > 0 {
                        visit(i, j - 1);
                    }
                    if j + 1 < nv {
                        visit(i, j + 1);
                    }
                }
            }
        }
        (counts[1], counts[0])
    }

    pub fn to_csv(&self, header_comments: &[String]) -> String {
        let mut out = String::new();
        for c in header_comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("delta_P,delta_V,mrd_percent\n");
        for (i, dp) in self.delta_p.iter().enumerate() {
            for (j, dv) in self.delta_v.iter().enumerate() {
                let _ = writeln!(out, "{dp},{dv},{:e}", self.mrd_percent[i][j]);
            }
        }
        out
    }
}

/// 21 prednisone values up to 0.167 and 21 vincristine values up to 4.22.
pub fn default_heatmap_grids() -> (Vec<f64>, Vec<f64>) {
    (linspace(0.0, 0.167, 21), linspace(0.0, 4.22, 21))
}

fn check_grid(name: &str, g: &[f64]) -> Result<(), ScenarioError> {
    if g.is_empty() || g.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less)) || g.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(ScenarioError::InvalidGrid(format!("{name} must be nonempty, nonnegative and ascending")));
    }
    Ok(())
}

/// Day +15 leukemic percentage on a prednisone × vincristine grid.
/// Daunorubicin and asparaginase keep the influences of `base`.
pub fn heatmap(
    params: &ModelParameters,
    protocol: &Protocol,
    start: &TreatmentStart,
    delta_p: &[f64],
    delta_v: &[f64],
    base: &Deltas,
    config: &SolverConfig,
) -> Result<HeatmapResult, ScenarioError> {
    check_grid("delta_P grid", delta_p)?;
    check_grid("delta_V grid", delta_v)?;
    let cells: Vec<(usize, usize)> = (0..delta_p.len())
        .flat_map(|i| (0..delta_v.len()).map(move |j| (i, j)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let deltas = Deltas {
                prednisone: delta_p[i],
                vincristine: delta_v[j],
                ..*base
            };
            let s = treat_until(params, &protocol.with_deltas(&deltas), start, 15.0, config)?;
            Ok(100.0 * blast_fraction(&s)?)
        })
        .collect::<Result<Vec<f64>, ScenarioError>>()?;
    let mrd_percent = values.chunks(delta_v.len()).map(<[f64]>::to_vec).collect();
    Ok(HeatmapResult {
        delta_p: delta_p.to_vec(),
        delta_v: delta_v.to_vec(),
        mrd_percent,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullCourse {
    /// Growth from one leukemic cell, then treatment and follow-up.
    pub trace: SimulationTrace,
    pub start: TreatmentStart,
    pub response: ResponseReport,
}

/// Grows to detection, treats from the next day, and follows up for
/// `follow_up_days` after the protocol ends.
pub fn full_treatment_experiment(
    params: &ModelParameters,
    deltas: &Deltas,
    protocol: &Protocol,
    criteria: &ResponseCriteria,
    follow_up_days: f64,
    config: &SolverConfig,
) -> Result<FullCourse, ScenarioError> {
    full_treatment_from(params, MarrowState::reference_initial(1.0), deltas, protocol, criteria, follow_up_days, config)
}

/// [`full_treatment_experiment`] starting from an arbitrary marrow.
pub fn full_treatment_from(
    params: &ModelParameters,
    initial: MarrowState,
    deltas: &Deltas,
    protocol: &Protocol,
    criteria: &ResponseCriteria,
    follow_up_days: f64,
    config: &SolverConfig,
) -> Result<FullCourse, ScenarioError> {
    let (growth, start) = treatment_start_from(params, initial, config)?;
    let protocol = protocol.with_deltas(deltas);
    let t_end = start.t_start + f64::from(protocol.duration_days).max(33.0) + follow_up_days.max(0.0);
    let treated = integrate_treatment(params, &protocol, start.state, DrugState::zero(), start.t_start, t_end, config)?;
    let trace = growth.trace.concat(treated);
    let response = classify_response(&trace, criteria, start.t_start)?;
    Ok(FullCourse { trace, start, response })
}

/// `log10(L(t_start + d − 1) / L(t_start + d))` for treatment days `1..=days`.
pub fn daily_leukemic_log_drops(trace: &SimulationTrace, t_start: f64, days: u32) -> Result<Vec<f64>, ScenarioError> {
    (1..=days)
        .map(|d| {
            let before = state_at(trace, t_start + f64::from(d) - 1.0)?.l;
            let after = state_at(trace, t_start + f64::from(d))?.l;
            Ok((before / after).log10())
        })
        .collect()
}

/// For each healthy compartment, the first sample time `>= from` at which it
/// lies within `tolerance` (relative) of `reference`.
pub fn first_return_within(
    trace: &SimulationTrace,
    from: f64,
    reference: &MarrowState,
    tolerance: f64,
) -> [Option<f64>; 3] {
    let r = reference.to_array();
    std::array::from_fn(|k| {
        trace
            .times
            .iter()
            .zip(&trace.states)
            .find(|(t, s)| **t >= from && (s.to_array()[k] - r[k]).abs() <= tolerance * r[k].abs())
            .map(|(t, _)| *t)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CloneOrigin;
    use crate::protocol::{default_sehop_protocol, zero_dose_protocol};

    fn params() -> ModelParameters {
        ModelParameters::reference(CloneOrigin::ProB)
    }

    #[test]
    fn day8_limit_from_blood() {
        let c = ResponseCriteria::default();
        assert!((c.day8_marrow_blast_limit - 2.3e10).abs() < 1.0);
        assert_eq!(c.day15_mrd_fraction, 1e-4);
        assert!(ResponseCriteria { day33_blast_limit: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn linspace_ends() {
        let v = linspace(1.0 / 60.0, 1.0 / 6.0, 50);
        assert_eq!(v.len(), 50);
        assert_eq!(v[0], 1.0 / 60.0);
        assert!((v[49] - 1.0 / 6.0).abs() < 1e-16);
        assert_eq!(linspace(0.0, 1.0, 1), vec![0.0]);
    }

    #[test]
    fn untreated_is_non_responder_and_vacuous_limit_passes() {
        let c = SolverConfig::default();
        let (_, start) = treatment_start(&params(), &c).unwrap();
        let tr = integrate_treatment(&params(), &zero_dose_protocol(), start.state, DrugState::zero(), start.t_start, start.t_start + 34.0, &c).unwrap();
        let r = classify_response(&tr, &ResponseCriteria::default(), start.t_start).unwrap();
        assert_eq!(r.overall, Overall::NonResponder);
        assert!(!r.day8_blasts.pass && !r.day15_fraction.pass && !r.day33_blasts.pass);

        let p = default_sehop_protocol();
        let tr = integrate_treatment(&params(), &p, start.state, DrugState::zero(), start.t_start, start.t_start + 34.0, &c).unwrap();
        let vacuous = ResponseCriteria {
            day8_marrow_blast_limit: f64::INFINITY,
            ..ResponseCriteria::default()
        };
        let r = classify_response(&tr, &vacuous, start.t_start).unwrap();
        assert!(r.day8_blasts.pass);
        assert_eq!(r.overall == Overall::Responder, r.day15_fraction.pass && r.day33_blasts.pass);
        assert!(classify_response(&tr, &vacuous, start.t_start + 10.0).is_err());
    }

    #[test]
    fn region_counting() {
        let h = HeatmapResult {
            delta_p: vec![0.0, 1.0, 2.0],
            delta_v: vec![0.0, 1.0, 2.0],
            mrd_percent: vec![vec![5.0, 5.0, 0.0], vec![5.0, 0.0, 5.0], vec![0.0, 5.0, 5.0]],
        };
        assert_eq!(h.region_counts(0.01), (3, 2));
        assert_eq!(h.nearest(0.9, 1.2), (1.0, 1.0, 0.0));
        let csv = h.to_csv(&[]);
        assert_eq!(csv.lines().count(), 10);
        assert!(csv.starts_with("delta_P,delta_V,mrd_percent\n"));
    }

    #[test]
    fn grid_validation() {
        let c = SolverConfig::default();
        let start = TreatmentStart {
            detection_day: 0.0,
            t_start: 1.0,
            state: MarrowState::reference_initial(1e10),
        };
        let p = default_sehop_protocol();
        assert!(heatmap(&params(), &p, &start, &[0.1, 0.05], &[1.0], &Deltas::reference(), &c).is_err());
        assert!(heatmap(&params(), &p, &start, &[], &[1.0], &Deltas::reference(), &c).is_err());
        assert!(prednisone_sweep(&params(), &p, &start, &ResponseCriteria::default(), 1, (0.0, 1.0), &c).is_err());
    }
}
