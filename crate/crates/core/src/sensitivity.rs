//! Variance-based (Sobol) sensitivity of treatment outcomes to the drug influences.

use crate::model::ModelParameters;
use crate::protocol::{Deltas, DrugId, Protocol, DRUG_COUNT};
use crate::scenarios::TreatmentStart;
use crate::solver::{integrate_treatment, SolverConfig, SolverError};
use crate::protocol::DrugState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("invalid range for `{name}`: [{low}, {high}]")]
    InvalidRange { name: String, low: f64, high: f64 },
    #[error("base sample count must be a power of two in [64, 65536], got {0}")]
    InvalidSampleCount(usize),
    #[error("output variance is zero; indices are undefined")]
    DegenerateVariance,
    #[error("non-finite model output at sample {0}")]
    NonFinite(usize),
    #[error("evaluation mismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Named box `[low, high]^D` from which inputs are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDomain<const D: usize> {
    pub names: [String; D],
    pub ranges: [(f64, f64); D],
}

impl<const D: usize> ParameterDomain<D> {
    pub fn new(names: [String; D], ranges: [(f64, f64); D]) -> Result<Self, SensitivityError> {
        for (name, &(low, high)) in names.iter().zip(&ranges) {
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(SensitivityError::InvalidRange {
                    name: name.clone(),
                    low,
                    high,
                });
            }
        }
        Ok(Self { names, ranges })
    }

    fn scale(&self, unit: [f64; D]) -> [f64; D] {
        std::array::from_fn(|i| {
            let (lo, hi) = self.ranges[i];
            lo + unit[i] * (hi - lo)
        })
    }
}

/// Influence ranges of the four drugs.
pub fn default_delta_domain() -> ParameterDomain<DRUG_COUNT> {
    ParameterDomain::new(
        DrugId::ALL.map(|d| format!("delta_{}", d.tag())),
        DrugId::ALL.map(|d| d.influence_range()),
    )
    .expect("reference ranges are valid")
}

/// Scalar model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "day")]
pub enum Qoi {
    /// `C1 + C2 + C3` at the given treatment day.
    HealthyAtDay(u32),
    /// `L` at the given treatment day.
    LeukemicAtDay(u32),
    /// `log10 L` at the given treatment day.
    LogLeukemicAtDay(u32),
}

impl Qoi {
    pub fn day(self) -> u32 {
        match self {
            Qoi::HealthyAtDay(d) | Qoi::LeukemicAtDay(d) | Qoi::LogLeukemicAtDay(d) => d,
        }
    }
}

impl fmt::Display for Qoi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Qoi::HealthyAtDay(d) => write!(f, "healthy_day{d}"),
            Qoi::LeukemicAtDay(d) => write!(f, "leukemic_day{d}"),
            Qoi::LogLeukemicAtDay(d) => write!(f, "log10_leukemic_day{d}"),
        }
    }
}

impl std::str::FromStr for Qoi {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |rest: &str| rest.parse::<u32>().map_err(|e| format!("bad day in `{s}`: {e}"));
        if let Some(rest) = s.strip_prefix("healthy_day") {
            Ok(Qoi::HealthyAtDay(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("log10_leukemic_day") {
            Ok(Qoi::LogLeukemicAtDay(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("leukemic_day") {
            Ok(Qoi::LeukemicAtDay(parse(rest)?))
        } else {
            Err(format!("unknown quantity `{s}` (expected healthy_dayN, leukemic_dayN or log10_leukemic_dayN)"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolConfig {
    /// Base sample count `N`; the design holds `N·(D + 2)` points.
    pub base_samples: usize,
    pub seed: u64,
    pub qoi: Qoi,
    /// Bootstrap resamples for the confidence intervals (0 disables them).
    pub bootstrap: usize,
}

impl Default for SobolConfig {
    fn default() -> Self {
        Self {
            base_samples: 1024,
            seed: 0,
            qoi: Qoi::LeukemicAtDay(15),
            bootstrap: 200,
        }
    }
}

impl SobolConfig {
    pub fn validate(&self) -> Result<(), SensitivityError> {
        let n = self.base_samples;
        if n.is_power_of_two() && (64..=1 << 16).contains(&n) {
            Ok(())
        } else {
            Err(SensitivityError::InvalidSampleCount(n))
        }
    }
}

/// Saltelli design: `A`, `B`, and `A_B^(i)` (`A` with column `i` from `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct SaltelliDesign<const D: usize> {
    pub a: Vec<[f64; D]>,
    pub b: Vec<[f64; D]>,
    pub ab: Vec<Vec<[f64; D]>>,
}

impl<const D: usize> SaltelliDesign<D> {
    pub fn base_samples(&self) -> usize {
        self.a.len()
    }

    /// All points in evaluation order: `A`, `B`, then each `A_B^(i)`.
    pub fn points(&self) -> Vec<[f64; D]> {
        let mut out = Vec::with_capacity(self.a.len() * (D + 2));
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.b);
        for m in &self.ab {
            out.extend_from_slice(m);
        }
        out
    }
}

fn fold_seed(seed: u64) -> u32 {
    (seed ^ (seed >> 32)) as u32
}

/// Owen-scrambled Sobol' points; `A` uses dimensions `0..D`, `B` uses `D..2D`.
pub fn saltelli_matrices<const D: usize>(
    domain: &ParameterDomain<D>,
    base_samples: usize,
    seed: u64,
) -> Result<SaltelliDesign<D>, SensitivityError> {
    let cfg = SobolConfig {
        base_samples,
        seed,
        ..SobolConfig::default()
    };
    cfg.validate()?;
    let s = fold_seed(seed);
    let row = |j: usize, offset: usize| -> [f64; D] {
        let unit = std::array::from_fn(|i| f64::from(sobol_burley::sample(j as u32, (offset + i) as u32, s)));
        domain.scale(unit)
    };
    let a: Vec<[f64; D]> = (0..base_samples).map(|j| row(j, 0)).collect();
    let b: Vec<[f64; D]> = (0..base_samples).map(|j| row(j, D)).collect();
    let ab = (0..D)
        .map(|i| {
            a.iter()
                .zip(&b)
                .map(|(ra, rb)| {
                    let mut r = *ra;
                    r[i] = rb[i];
                    r
                })
                .collect()
        })
        .collect();
    Ok(SaltelliDesign { a, b, ab })
}

/// First-order and total indices per input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SobolResult {
    pub names: Vec<String>,
    pub first_order: Vec<f64>,
    pub total: Vec<f64>,
    /// 95% bootstrap percentile intervals; empty when bootstrapping is off.
    pub first_order_ci: Vec<(f64, f64)>,
    pub total_ci: Vec<(f64, f64)>,
    pub variance: f64,
    pub base_samples: usize,
    pub seed: u64,
    pub qoi: String,
}

impl SobolResult {
    /// Index of the input with the largest total index.
    pub fn most_influential(&self) -> usize {
        argmax(&self.total)
    }

    pub fn least_influential(&self) -> usize {
        argmax(&self.total.iter().map(|v| -v).collect::<Vec<_>>())
    }

    /// Input indices ordered by descending total index.
    pub fn total_ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.total.len()).collect();
        idx.sort_by(|&i, &j| self.total[j].total_cmp(&self.total[i]));
        idx
    }

    pub fn to_csv(&self, header_comments: &[String]) -> String {
        let mut out = String::new();
        for c in header_comments {
            let _ = writeln!(out, "# {c}");
        }
        if self.first_order.iter().chain(&self.total).any(|v| *v < 0.0) {
            out.push_str("# negative indices are estimator noise around zero\n");
        }
        out.push_str("parameter,S1,ST,variance,N,seed,qoi\n");
        for i in 0..self.names.len() {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{},{}",
                self.names[i], self.first_order[i], self.total[i], self.variance, self.base_samples, self.seed, self.qoi
            );
        }
        out
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

struct Estimates {
    s1: Vec<f64>,
    st: Vec<f64>,
    variance: f64,
}

fn estimate(f_a: &[f64], f_b: &[f64], f_ab: &[Vec<f64>], rows: &[usize]) -> Estimates {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&j| f_a[j] + f_b[j]).sum::<f64>() / (2.0 * n);
    let variance = rows
        .iter()
        .map(|&j| (f_a[j] - mean).powi(2) + (f_b[j] - mean).powi(2))
        .sum::<f64>()
        / (2.0 * n - 1.0);
    let s1 = f_ab
        .iter()
        .map(|fi| rows.iter().map(|&j| f_b[j] * (fi[j] - f_a[j])).sum::<f64>() / n / variance)
        .collect();
    let st = f_ab
        .iter()
        .map(|fi| rows.iter().map(|&j| (f_a[j] - fi[j]).powi(2)).sum::<f64>() / (2.0 * n) / variance)
        .collect();
    Estimates { s1, st, variance }
}

fn percentile_interval(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    (at(0.025), at(0.975))
}

/// Saltelli first-order and Jansen total estimators over completed evaluations.
///
/// `evaluations` follows [`SaltelliDesign::points`] order.
pub fn sobol_indices<const D: usize>(
    domain: &ParameterDomain<D>,
    evaluations: &[f64],
    base_samples: usize,
    seed: u64,
    qoi: &str,
    bootstrap: usize,
) -> Result<SobolResult, SensitivityError> {
    let expected = base_samples * (D + 2);
    if evaluations.len() != expected {
        return Err(SensitivityError::LengthMismatch {
            expected,
            got: evaluations.len(),
        });
    }
    if let Some(i) = evaluations.iter().position(|v| !v.is_finite()) {
        return Err(SensitivityError::NonFinite(i));
    }
    let n = base_samples;
    let f_a = &evaluations[..n];
    let f_b = &evaluations[n..2 * n];
    let f_ab: Vec<Vec<f64>> = (0..D).map(|i| evaluations[(2 + i) * n..(3 + i) * n].to_vec()).collect();
    let all: Vec<usize> = (0..n).collect();
    let est = estimate(f_a, f_b, &f_ab, &all);
    let mean = f_a.iter().chain(f_b).sum::<f64>() / (2 * n) as f64;
    let scale = mean.abs().max(f64::MIN_POSITIVE);
    if est.variance.is_nan() || est.variance <= 0.0 || est.variance.sqrt() <= 1e-13 * scale {
        return Err(SensitivityError::DegenerateVariance);
    }

    let (mut s1_ci, mut st_ci) = (Vec::new(), Vec::new());
    if bootstrap > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<usize>> = (0..bootstrap)
            .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
            .collect();
        let reps: Vec<Estimates> = draws
            .par_iter()
            .map(|rows| estimate(f_a, f_b, &f_ab, rows))
            .filter(|e| e.variance > 0.0)
            .collect();
        if !reps.is_empty() {
            for i in 0..D {
                s1_ci.push(percentile_interval(reps.iter().map(|e| e.s1[i]).collect()));
                st_ci.push(percentile_interval(reps.iter().map(|e| e.st[i]).collect()));
            }
        }
    }
    Ok(SobolResult {
        names: domain.names.to_vec(),
        first_order: est.s1,
        total: est.st,
        first_order_ci: s1_ci,
        total_ci: st_ci,
        variance: est.variance,
        base_samples: n,
        seed,
        qoi: qoi.to_string(),
    })
}

/// Builds the design, evaluates `f` on every point in parallel, and estimates the indices.
pub fn analyze<const D: usize, F, E>(
    domain: &ParameterDomain<D>,
    config: &SobolConfig,
    qoi_label: &str,
    f: F,
) -> Result<SobolResult, SensitivityError>
where
    F: Fn(&[f64; D]) -> Result<f64, E> + Sync,
    E: Into<SensitivityError> + Send,
{
    config.validate()?;
    let design = saltelli_matrices(domain, config.base_samples, config.seed)?;
    let values = design
        .points()
        .par_iter()
        .map(|x| f(x).map_err(Into::into))
        .collect::<Result<Vec<f64>, SensitivityError>>()?;
    sobol_indices(domain, &values, config.base_samples, config.seed, qoi_label, config.bootstrap)
}

/// Treats from `start` with the given influences and reads the QoI.
pub fn evaluate_qoi(
    params: &ModelParameters,
    protocol_template: &Protocol,
    start: &TreatmentStart,
    deltas: &Deltas,
    qoi: Qoi,
    solver: &SolverConfig,
) -> Result<f64, SolverError> {
    let protocol = protocol_template.with_deltas(deltas);
    // Only the end state is needed; a coarse output grid keeps this cheap.
    let config = SolverConfig {
        sample_interval: 1.0,
        ..*solver
    };
    let t_end = start.t_start + f64::from(qoi.day());
    let trace = integrate_treatment(params, &protocol, start.state, DrugState::zero(), start.t_start, t_end, &config)?;
    let s = trace.last_state();
    Ok(match qoi {
        Qoi::HealthyAtDay(_) => s.healthy_total(),
        Qoi::LeukemicAtDay(_) => s.l,
        // Floor keeps the logarithm finite once the clone is eradicated.
        Qoi::LogLeukemicAtDay(_) => s.l.max(1e-300).log10(),
    })
}

/// Sobol analysis of the drug influences on the model.
pub fn delta_sensitivity(
    params: &ModelParameters,
    protocol_template: &Protocol,
    start: &TreatmentStart,
    domain: &ParameterDomain<DRUG_COUNT>,
    config: &SobolConfig,
    solver: &SolverConfig,
) -> Result<SobolResult, SensitivityError> {
    analyze(domain, config, &config.qoi.to_string(), |x| {
        evaluate_qoi(params, protocol_template, start, &Deltas::from_array(*x), config.qoi, solver)
    })
}
