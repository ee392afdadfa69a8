//! Drugs, dosing schedules and the drug-amount dynamics.
//!
//! Each drug `j` keeps a residual amount `μ_j` that decays as
//! `dμ_j/dt = −λ_j μ_j`. Doses are given in whole treatment days; day `d`
//! spans `[t_start + d − 1, t_start + d)`. The total effect fed into the cell
//! equations is the weighted sum `μ = Σ δ_j (μ_j + Q_j)`, where `Q_j` is the
//! dose scheduled for the current day.
//!
//! How the scheduled dose enters the decaying pool is selected by
//! [`DoseEntry`]. With the default [`DoseEntry::DayStartBolus`] the dose is
//! added to `μ_j` at the start of its day, so the effect at the dose instant
//! is exactly `Σ δ_j (μ_j + Q_j)` and decays from there.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("half-life must be finite and > 0, got {0}")]
    NonPositiveHalfLife(f64),
    #[error("{context}: {message}")]
    Invalid { context: String, message: String },
    #[error("protocol file, line {line} column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

impl ProtocolError {
    fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        ProtocolError::Invalid {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub const DRUG_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrugId {
    Prednisone,
    Vincristine,
    Daunorubicin,
    Asparaginase,
}

impl DrugId {
    pub const ALL: [DrugId; DRUG_COUNT] = [
        DrugId::Prednisone,
        DrugId::Vincristine,
        DrugId::Daunorubicin,
        DrugId::Asparaginase,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// One-letter tag used in column names (`mu_P`, `mu_V`, ...).
    pub fn tag(self) -> &'static str {
        match self {
            DrugId::Prednisone => "P",
            DrugId::Vincristine => "V",
            DrugId::Daunorubicin => "D",
            DrugId::Asparaginase => "A",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DrugId::Prednisone => "prednisone",
            DrugId::Vincristine => "vincristine",
            DrugId::Daunorubicin => "daunorubicin",
            DrugId::Asparaginase => "asparaginase",
        }
    }

    /// Plausible influence interval `[δ_min, δ_max]` (day per dose unit).
    pub fn influence_range(self) -> (f64, f64) {
        match self {
            DrugId::Prednisone => (1.0 / 60.0, 1.0 / 6.0),
            DrugId::Vincristine => (1.0 / 1.5, 10.0 / 1.5),
            DrugId::Daunorubicin => (1.0 / 30.0, 1.0 / 3.0),
            DrugId::Asparaginase => (1e-4, 1e-3),
        }
    }

    /// Decay rate `λ_j` (1/day) of the reference protocol.
    pub fn reference_decay_rate(self) -> f64 {
        let ln2 = std::f64::consts::LN_2;
        match self {
            DrugId::Prednisone => 9.6 * ln2,
            DrugId::Vincristine => 0.28 * ln2,
            DrugId::Daunorubicin => 1.17 * ln2,
            DrugId::Asparaginase => 0.8 * ln2,
        }
    }

    pub fn unit(self) -> DoseUnit {
        match self {
            DrugId::Asparaginase => DoseUnit::UPerDay,
            _ => DoseUnit::MgPerDay,
        }
    }
}

impl fmt::Display for DrugId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DoseUnit {
    #[serde(rename = "mg_per_day")]
    MgPerDay,
    #[serde(rename = "U_per_day")]
    UPerDay,
}

/// Per-drug influence coefficients `δ_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub prednisone: f64,
    pub vincristine: f64,
    pub daunorubicin: f64,
    pub asparaginase: f64,
}

impl Deltas {
    /// The minimal responding pair `δ_P = 0.092`, `δ_V = 2.11` with
    /// `δ_D = 2.5/30`, `δ_A = 2.5e-4`.
    pub fn reference() -> Self {
        Self {
            prednisone: 0.092,
            vincristine: 2.11,
            daunorubicin: 2.5 / 30.0,
            asparaginase: 2.5e-4,
        }
    }

    /// Lower end of every influence interval.
    pub fn range_minima() -> Self {
        Self::from_array(DrugId::ALL.map(|d| d.influence_range().0))
    }

    pub fn range_maxima() -> Self {
        Self::from_array(DrugId::ALL.map(|d| d.influence_range().1))
    }

    pub fn zero() -> Self {
        Self::from_array([0.0; DRUG_COUNT])
    }

    pub fn get(&self, id: DrugId) -> f64 {
        self.to_array()[id.index()]
    }

    pub fn set(&mut self, id: DrugId, value: f64) {
        let mut a = self.to_array();
        a[id.index()] = value;
        *self = Self::from_array(a);
    }

    pub fn to_array(self) -> [f64; DRUG_COUNT] {
        [
            self.prednisone,
            self.vincristine,
            self.daunorubicin,
            self.asparaginase,
        ]
    }

    pub fn from_array(a: [f64; DRUG_COUNT]) -> Self {
        Self {
            prednisone: a[0],
            vincristine: a[1],
            daunorubicin: a[2],
            asparaginase: a[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledDose {
    pub day: u32,
    pub dose: f64,
}

/// One drug of a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct DrugSpec {
    pub id: DrugId,
    pub unit: DoseUnit,
    /// Strictly increasing treatment days, each with a nonnegative dose.
    pub schedule: Vec<ScheduledDose>,
    /// Decay rate `λ_j` (1/day).
    pub lambda: f64,
    /// Influence `δ_j` (day per dose unit).
    pub delta: f64,
}

impl DrugSpec {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let ctx = format!("drug `{}`", self.id);
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(ProtocolError::invalid(
                ctx,
                format!("decay rate must be finite and > 0, got {}", self.lambda),
            ));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(ProtocolError::invalid(
                ctx,
                format!("influence must be finite and >= 0, got {}", self.delta),
            ));
        }
        let mut previous = 0u32;
        for (i, entry) in self.schedule.iter().enumerate() {
            let ctx = format!("drug `{}`, schedule entry {}", self.id, i + 1);
            if entry.day < 1 {
                return Err(ProtocolError::invalid(ctx, "treatment days start at 1"));
            }
            if !(entry.dose.is_finite() && entry.dose >= 0.0) {
                return Err(ProtocolError::invalid(
                    ctx,
                    format!("dose must be finite and >= 0, got {}", entry.dose),
                ));
            }
            if entry.day <= previous {
                return Err(ProtocolError::invalid(
                    ctx,
                    format!(
                        "treatment days must be strictly increasing ({} after {})",
                        entry.day, previous
                    ),
                ));
            }
            previous = entry.day;
        }
        Ok(())
    }

    pub fn last_day(&self) -> u32 {
        self.schedule.last().map_or(0, |d| d.day)
    }

    pub fn total_administered(&self) -> f64 {
        self.schedule.iter().map(|d| d.dose).sum()
    }

    pub fn half_life(&self) -> f64 {
        std::f64::consts::LN_2 / self.lambda
    }
}

/// How a scheduled dose enters the decaying drug pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseEntry {
    /// `μ_j += q_j` at the start of the dose day; the effect is `Σ δ_j μ_j`.
    #[default]
    DayStartBolus,
    /// `Q_j` acts at a constant level throughout the dose day and is moved
    /// into the pool (`μ_j += q_j`) when the day ends.
    InDayThenReservoir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub name: String,
    pub duration_days: u32,
    pub drugs: Vec<DrugSpec>,
    pub dose_entry: DoseEntry,
}

impl Protocol {
    pub fn new(
        name: impl Into<String>,
        duration_days: u32,
        drugs: Vec<DrugSpec>,
    ) -> Result<Self, ProtocolError> {
        let protocol = Self {
            name: name.into(),
            duration_days,
            drugs,
            dose_entry: DoseEntry::default(),
        };
        protocol.validate()?;
        Ok(protocol)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut seen = [false; DRUG_COUNT];
        for drug in &self.drugs {
            drug.validate()?;
            if std::mem::replace(&mut seen[drug.id.index()], true) {
                return Err(ProtocolError::invalid(
                    format!("protocol `{}`", self.name),
                    format!("drug `{}` listed twice", drug.id),
                ));
            }
            if drug.last_day() > self.duration_days {
                return Err(ProtocolError::invalid(
                    format!("protocol `{}`", self.name),
                    format!(
                        "drug `{}` is scheduled on day {} but the protocol lasts {} days",
                        drug.id,
                        drug.last_day(),
                        self.duration_days
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn drug(&self, id: DrugId) -> Option<&DrugSpec> {
        self.drugs.iter().find(|d| d.id == id)
    }

    /// Copy with every listed drug's `δ_j` replaced.
    pub fn with_deltas(&self, deltas: &Deltas) -> Self {
        let mut out = self.clone();
        for drug in &mut out.drugs {
            drug.delta = deltas.get(drug.id);
        }
        out
    }

    pub fn with_dose_entry(mut self, dose_entry: DoseEntry) -> Self {
        self.dose_entry = dose_entry;
        self
    }

    /// Influences of the listed drugs; absent drugs read as zero.
    pub fn deltas(&self) -> Deltas {
        let mut d = Deltas::zero();
        for drug in &self.drugs {
            d.set(drug.id, drug.delta);
        }
        d
    }

    /// Sorted set of days on which at least one drug is given.
    pub fn dose_days(&self) -> Vec<u32> {
        let mut days: Vec<u32> = self
            .drugs
            .iter()
            .flat_map(|d| d.schedule.iter().filter(|s| s.dose > 0.0).map(|s| s.day))
            .collect();
        days.sort_unstable();
        days.dedup();
        days
    }

    /// Scheduled doses `Q_j(day)` for every drug slot.
    pub fn doses_on(&self, treatment_day: u32) -> [f64; DRUG_COUNT] {
        let mut q = [0.0; DRUG_COUNT];
        for drug in &self.drugs {
            q[drug.id.index()] = dose_indicator(drug, treatment_day);
        }
        q
    }

    /// Decay rates per drug slot (zero for absent drugs, which never hold any amount).
    pub fn decay_rates(&self) -> [f64; DRUG_COUNT] {
        let mut l = [0.0; DRUG_COUNT];
        for drug in &self.drugs {
            l[drug.id.index()] = drug.lambda;
        }
        l
    }

    /// `Σ δ_j μ_j`: effect of the pooled amounts alone.
    pub fn pooled_effect(&self, drug_state: &DrugState) -> f64 {
        self.drugs
            .iter()
            .map(|d| d.delta * drug_state.amount(d.id))
            .sum()
    }
}

/// Residual drug amounts `μ_j`, one slot per [`DrugId`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DrugState {
    pub amounts: [f64; DRUG_COUNT],
}

impl DrugState {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn amount(&self, id: DrugId) -> f64 {
        self.amounts[id.index()]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.amounts.iter().all(|a| *a >= 0.0)
    }
}

/// `λ = ln 2 / τ`.
pub fn decay_rate_from_half_life(half_life: f64) -> Result<f64, ProtocolError> {
    if half_life.is_finite() && half_life > 0.0 {
        Ok(std::f64::consts::LN_2 / half_life)
    } else {
        Err(ProtocolError::NonPositiveHalfLife(half_life))
    }
}

/// Dose `Q_j` scheduled for `treatment_day`, zero if none.
pub fn dose_indicator(drug: &DrugSpec, treatment_day: u32) -> f64 {
    drug.schedule
        .binary_search_by_key(&treatment_day, |s| s.day)
        .map_or(0.0, |i| drug.schedule[i].dose)
}

/// `dμ_j/dt = −λ_j μ_j` for every drug slot.
pub fn drug_decay_rhs(drug_state: &DrugState, protocol: &Protocol) -> [f64; DRUG_COUNT] {
    let lambda = protocol.decay_rates();
    std::array::from_fn(|i| -lambda[i] * drug_state.amounts[i])
}

/// Adds each dose scheduled on `treatment_day` to its pool.
pub fn apply_dose_event(drug_state: &DrugState, protocol: &Protocol, treatment_day: u32) -> DrugState {
    let q = protocol.doses_on(treatment_day);
    DrugState {
        amounts: std::array::from_fn(|i| drug_state.amounts[i] + q[i]),
    }
}

/// `μ = Σ δ_j (μ_j + Q_j(day))`.
pub fn total_effect(drug_state: &DrugState, protocol: &Protocol, treatment_day: u32) -> f64 {
    protocol
        .drugs
        .iter()
        .map(|d| d.delta * (drug_state.amount(d.id) + dose_indicator(d, treatment_day)))
        .sum()
}

fn drug_with_schedule(id: DrugId, delta: f64, schedule: Vec<(u32, f64)>) -> DrugSpec {
    DrugSpec {
        id,
        unit: id.unit(),
        schedule: schedule
            .into_iter()
            .map(|(day, dose)| ScheduledDose { day, dose })
            .collect(),
        lambda: id.reference_decay_rate(),
        delta,
    }
}

/// 37-day induction schedule for a 1 m² standard-risk patient.
///
/// Influences default to [`Deltas::reference`].
pub fn default_sehop_protocol() -> Protocol {
    let deltas = Deltas::reference();
    let prednisone = (1..=37)
        .map(|day| {
            let dose = match day {
                1..=28 => 60.0,
                29..=31 => 30.0,
                32..=34 => 15.0,
                _ => 7.5,
            };
            (day, dose)
        })
        .collect();
    let vincristine = [8, 15, 22, 29].map(|d| (d, 1.5)).to_vec();
    let daunorubicin = [8, 15].map(|d| (d, 30.0)).to_vec();
    let asparaginase = [12, 15, 18, 21, 24, 27, 30, 33].map(|d| (d, 10000.0)).to_vec();
    Protocol::new(
        "SEHOP-PETHEMA-2013 induction I'A (standard risk)",
        37,
        vec![
            drug_with_schedule(DrugId::Prednisone, deltas.prednisone, prednisone),
            drug_with_schedule(DrugId::Vincristine, deltas.vincristine, vincristine),
            drug_with_schedule(DrugId::Daunorubicin, deltas.daunorubicin, daunorubicin),
            drug_with_schedule(DrugId::Asparaginase, deltas.asparaginase, asparaginase),
        ],
    )
    .expect("reference protocol is valid")
}

/// Same schedule days with every dose set to zero.
pub fn zero_dose_protocol() -> Protocol {
    let mut p = default_sehop_protocol();
    p.name = "zero dose".to_string();
    for drug in &mut p.drugs {
        for s in &mut drug.schedule {
            s.dose = 0.0;
        }
    }
    p
}

// ---------------------------------------------------------------------------
// JSON file format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DoseFile {
    day: u32,
    dose: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrugFile {
    id: DrugId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    half_life_days: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_per_day: Option<f64>,
    delta: f64,
    unit: DoseUnit,
    schedule: Vec<DoseFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolFile {
    name: String,
    duration_days: u32,
    #[serde(default, skip_serializing_if = "is_default_entry")]
    dose_entry: DoseEntry,
    drugs: Vec<DrugFile>,
}

fn is_default_entry(e: &DoseEntry) -> bool {
    *e == DoseEntry::default()
}

impl TryFrom<DrugFile> for DrugSpec {
    type Error = ProtocolError;

    fn try_from(f: DrugFile) -> Result<Self, Self::Error> {
        let lambda = match (f.half_life_days, f.lambda_per_day) {
            (Some(t), None) => decay_rate_from_half_life(t)?,
            (None, Some(l)) => l,
            _ => {
                return Err(ProtocolError::invalid(
                    format!("drug `{}`", f.id),
                    "exactly one of `half_life_days` and `lambda_per_day` is required",
                ))
            }
        };
        let spec = DrugSpec {
            id: f.id,
            unit: f.unit,
            schedule: f
                .schedule
                .into_iter()
                .map(|d| ScheduledDose {
                    day: d.day,
                    dose: d.dose,
                })
                .collect(),
            lambda,
            delta: f.delta,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Approximate line of the `n`-th (1-based) occurrence of `"id": "<drug>"` for error reporting.
fn locate_drug(text: &str, id: DrugId) -> Option<usize> {
    let needle = format!("\"{}\"", id.name());
    text.lines().position(|l| l.contains("\"id\"") && l.contains(&needle)).map(|i| i + 1)
}

/// Parses and validates a protocol file.
pub fn parse_protocol(text: &str) -> Result<Protocol, ProtocolError> {
    let file: ProtocolFile = serde_json::from_str(text).map_err(|e| ProtocolError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let with_line = |err: ProtocolError, id: Option<DrugId>| -> ProtocolError {
        let line = id.and_then(|id| locate_drug(text, id)).unwrap_or(1);
        ProtocolError::Parse {
            line,
            column: 1,
            message: err.to_string(),
        }
    };
    let mut drugs = Vec::with_capacity(file.drugs.len());
    for d in file.drugs {
        let id = d.id;
        drugs.push(DrugSpec::try_from(d).map_err(|e| with_line(e, Some(id)))?);
    }
    let protocol = Protocol {
        name: file.name,
        duration_days: file.duration_days,
        drugs,
        dose_entry: file.dose_entry,
    };
    protocol.validate().map_err(|e| {
        let culprit = protocol
            .drugs
            .iter()
            .find(|d| d.last_day() > protocol.duration_days)
            .map(|d| d.id);
        with_line(e, culprit)
    })?;
    Ok(protocol)
}

/// Serializes to the protocol file format (decay given as `lambda_per_day`).
pub fn serialize_protocol(protocol: &Protocol) -> String {
    let file = ProtocolFile {
        name: protocol.name.clone(),
        duration_days: protocol.duration_days,
        dose_entry: protocol.dose_entry,
        drugs: protocol
            .drugs
            .iter()
            .map(|d| DrugFile {
                id: d.id,
                half_life_days: None,
                lambda_per_day: Some(d.lambda),
                delta: d.delta,
                unit: d.unit,
                schedule: d
                    .schedule
                    .iter()
                    .map(|s| DoseFile {
                        day: s.day,
                        dose: s.dose,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("protocol serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn half_life_conversion() {
        let ln2 = std::f64::consts::LN_2;
        assert_relative_eq!(decay_rate_from_half_life(1.0).unwrap(), ln2);
        assert_relative_eq!(decay_rate_from_half_life(1.0 / 9.6).unwrap(), 9.6 * ln2, max_relative = 1e-14);
        assert_relative_eq!(decay_rate_from_half_life(1.0 / 9.6).unwrap(), 6.6542, epsilon = 1e-4);
        assert_relative_eq!(decay_rate_from_half_life(1.0 / 0.28).unwrap(), 0.19408, epsilon = 1e-5);
        assert!(decay_rate_from_half_life(0.0).is_err());
        assert!(decay_rate_from_half_life(-2.0).is_err());
        assert!(decay_rate_from_half_life(f64::NAN).is_err());
    }

    #[test]
    fn dose_indicator_examples() {
        let p = default_sehop_protocol();
        let v = p.drug(DrugId::Vincristine).unwrap();
        assert_eq!(dose_indicator(v, 8), 1.5);
        assert_eq!(dose_indicator(v, 9), 0.0);
        assert_eq!(dose_indicator(p.drug(DrugId::Prednisone).unwrap(), 30), 30.0);
        assert_eq!(dose_indicator(p.drug(DrugId::Prednisone).unwrap(), 38), 0.0);
    }

    #[test]
    fn reference_protocol_shape() {
        let p = default_sehop_protocol();
        assert_eq!(p.duration_days, 37);
        let pred = p.drug(DrugId::Prednisone).unwrap();
        // summation over the schedule
        let expected: f64 = (1..=28).map(|_| 60.0).sum::<f64>() + 3.0 * 30.0 + 3.0 * 15.0 + 3.0 * 7.5;
        assert_eq!(pred.total_administered(), expected);
        assert_eq!(expected, 1837.5);
        assert_eq!(p.drug(DrugId::Asparaginase).unwrap().schedule.len(), 8);
        assert_eq!(p.dose_days(), (1..=37).collect::<Vec<_>>());
        for id in DrugId::ALL {
            let (lo, hi) = id.influence_range();
            let d = p.drug(id).unwrap().delta;
            assert!(lo <= d && d <= hi, "{id} delta {d} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn decay_rhs() {
        let p = default_sehop_protocol();
        assert_eq!(drug_decay_rhs(&DrugState::zero(), &p), [0.0; 4]);
        let s = DrugState {
            amounts: [60.0, 0.0, 0.0, 0.0],
        };
        assert_relative_eq!(drug_decay_rhs(&s, &p)[0], -60.0 * 9.6 * std::f64::consts::LN_2);
        assert_relative_eq!(drug_decay_rhs(&s, &p)[0], -399.25, epsilon = 1e-2);
    }

    #[test]
    fn dose_events() {
        let p = default_sehop_protocol();
        let s = DrugState {
            amounts: [1.0, 2.0, 3.0, 4.0],
        };
        // day 9: prednisone only
        let after = apply_dose_event(&s, &p, 9);
        assert_eq!(after.amounts, [61.0, 2.0, 3.0, 4.0]);
        let empty = Protocol::new("empty", 10, vec![]).unwrap();
        assert_eq!(apply_dose_event(&s, &empty, 3), s);
        let after = apply_dose_event(&DrugState::zero(), &p, 8);
        assert_eq!(after.amounts, [60.0, 1.5, 30.0, 0.0]);
    }

    #[test]
    fn prednisone_pool_geometric_limit() {
        // Dose, then decay one day, repeated: the pre-dose pool tends to 60 r / (1 - r).
        let p = default_sehop_protocol();
        let r = 2f64.powf(-9.6);
        let lambda = p.drug(DrugId::Prednisone).unwrap().lambda;
        let mut s = DrugState::zero();
        for day in 1..=28 {
            s = apply_dose_event(&s, &p, day);
            s.amounts[0] *= (-lambda).exp();
        }
        assert_relative_eq!(s.amounts[0], 60.0 * r / (1.0 - r), max_relative = 1e-12);
    }

    #[test]
    fn total_effect_examples() {
        let p = default_sehop_protocol();
        assert_eq!(total_effect(&DrugState::zero(), &p, 38), 0.0);
        let only_p = p.with_deltas(&Deltas {
            prednisone: 1.0 / 60.0,
            ..Deltas::zero()
        });
        assert_relative_eq!(total_effect(&DrugState::zero(), &only_p, 1), 1.0, max_relative = 1e-15);

        // Day 8 with the pool holding day 7's prednisone after one day of decay.
        let lambda_p = p.drug(DrugId::Prednisone).unwrap().lambda;
        let residual = 60.0 * (-lambda_p).exp();
        let s = DrugState {
            amounts: [residual, 0.0, 0.0, 0.0],
        };
        let expected = 0.092 * (residual + 60.0) + 2.11 * 1.5 + (2.5 / 30.0) * 30.0;
        assert_relative_eq!(total_effect(&s, &p, 8), expected, max_relative = 1e-14);
        // After a bolus the pooled effect equals the total effect at the dose instant.
        let bolus = apply_dose_event(&s, &p, 8);
        assert_relative_eq!(p.pooled_effect(&bolus), expected, max_relative = 1e-14);
    }

    #[test]
    fn total_effect_is_linear_in_each_delta() {
        let p = default_sehop_protocol();
        let s = DrugState {
            amounts: [3.0, 1.0, 7.0, 2000.0],
        };
        for id in DrugId::ALL {
            let at = |x: f64| {
                let mut d = Deltas::reference();
                d.set(id, x);
                total_effect(&s, &p.with_deltas(&d), 15)
            };
            let (a, b, c) = (at(0.0), at(1.0), at(2.5));
            assert_relative_eq!(c - a, 2.5 * (b - a), max_relative = 1e-12);
        }
    }

    #[test]
    fn protocol_round_trip() {
        let p = default_sehop_protocol();
        let text = serialize_protocol(&p);
        assert_eq!(parse_protocol(&text).unwrap(), p);
        let q = zero_dose_protocol().with_dose_entry(DoseEntry::InDayThenReservoir);
        assert_eq!(parse_protocol(&serialize_protocol(&q)).unwrap(), q);
    }

    #[test]
    fn parse_rejects_bad_files() {
        let good = r#"{
  "name": "x",
  "duration_days": 28,
  "drugs": [
    {"id": "prednisone", "half_life_days": 0.1, "delta": 0.1, "unit": "mg_per_day",
     "schedule": [{"day": 1, "dose": 60}]}
  ]
}"#;
        let p = parse_protocol(good).unwrap();
        assert_relative_eq!(p.drugs[0].lambda, 10.0 * std::f64::consts::LN_2, max_relative = 1e-14);

        let day0 = good.replace("\"day\": 1", "\"day\": 0");
        let err = parse_protocol(&day0).unwrap_err();
        assert!(matches!(err, ProtocolError::Parse { line: 5, .. }), "{err}");
        assert!(err.to_string().contains("start at 1"));

        let late = good
            .replace("prednisone", "asparaginase")
            .replace("[{\"day\": 1, \"dose\": 60}]", "[{\"day\": 33, \"dose\": 10000}]");
        let err = parse_protocol(&late).unwrap_err();
        assert!(err.to_string().contains("lasts 28 days"), "{err}");

        let unknown = good.replace("prednisone", "aspirin");
        assert!(matches!(parse_protocol(&unknown), Err(ProtocolError::Parse { line: 5, .. })));

        let negative = good.replace("\"dose\": 60", "\"dose\": -60");
        assert!(parse_protocol(&negative).unwrap_err().to_string().contains(">= 0"));

        let both = good.replace("\"half_life_days\": 0.1", "\"half_life_days\": 0.1, \"lambda_per_day\": 2");
        assert!(parse_protocol(&both).unwrap_err().to_string().contains("exactly one"));

        let unordered = good.replace(
            "[{\"day\": 1, \"dose\": 60}]",
            "[{\"day\": 2, \"dose\": 60}, {\"day\": 2, \"dose\": 60}]",
        );
        assert!(parse_protocol(&unordered).unwrap_err().to_string().contains("strictly increasing"));

        let syntax = good.replace("\"duration_days\": 28,", "\"duration_days\": 28");
        assert!(matches!(parse_protocol(&syntax), Err(ProtocolError::Parse { line: 4, .. })));
    }

    #[test]
    fn duplicate_drugs_rejected() {
        let p = default_sehop_protocol();
        let mut drugs = p.drugs.clone();
        drugs.push(p.drugs[0].clone());
        assert!(Protocol::new("dup", 37, drugs).is_err());
    }
}
