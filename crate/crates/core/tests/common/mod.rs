//! Checks shared by the property tests and the acceptance harness.
#![allow(dead_code)]

use lymphosim::model::{leukemia_rhs, MarrowState, ModelParameters};
use lymphosim::protocol::{default_sehop_protocol, zero_dose_protocol, Deltas, DrugId, DrugState, Protocol};
use lymphosim::sensitivity::{analyze, ParameterDomain, Qoi, SensitivityError, SobolConfig};
use lymphosim::solver::{integrate_leukemia, integrate_treatment, sample_at, SolverConfig};
use lymphosim::stability::{analytic_jacobian, eigenvalues_4x4};
use nalgebra::{Complex, Matrix4};

/// Runs untreated (`deltas = None`) or under the reference schedule and checks
/// nonnegativity and the carrying-capacity bound on every sample.
pub fn check_positivity_and_bound(
    params: &ModelParameters,
    state0: MarrowState,
    deltas: Option<Deltas>,
    span: f64,
) -> Result<(), String> {
    let config = SolverConfig::default();
    let trace = match deltas {
        None => integrate_leukemia(params, state0, (0.0, span), &config),
        Some(d) => integrate_treatment(
            params,
            &default_sehop_protocol().with_deltas(&d),
            state0,
            DrugState::zero(),
            0.0,
            span,
            &config,
        ),
    }
    .map_err(|e| format!("run failed: {e}"))?;
    let bound = state0.l.max(params.l_max()) * (1.0 + 1e-9);
    for (t, s) in trace.times.iter().zip(&trace.states) {
        if !s.is_nonnegative() {
            return Err(format!("negative state {s:?} at t = {t}"));
        }
        if s.l > bound {
            return Err(format!("L = {:e} exceeds {bound:e} at t = {t}", s.l));
        }
    }
    Ok(())
}

/// Largest relative gap between an untreated run and a zero-dose treated run,
/// with an absolute floor of one cell.
pub fn mu_zero_reduction_error(params: &ModelParameters, state0: MarrowState, span: f64) -> f64 {
    let config = SolverConfig::default();
    let a = integrate_leukemia(params, state0, (0.0, span), &config).expect("untreated run");
    let b = integrate_treatment(params, &zero_dose_protocol(), state0, DrugState::zero(), 0.0, span, &config)
        .expect("zero-dose run");
    let mut worst: f64 = 0.0;
    for i in 0..=(span as usize) {
        let t = i as f64;
        let (x, y) = (sample_at(&a, t).unwrap().to_array(), sample_at(&b, t).unwrap().to_array());
        for k in 0..4 {
            worst = worst.max((x[k] - y[k]).abs() / x[k].abs().max(1.0));
        }
    }
    worst
}

/// Fourth-order central-difference Jacobian of the untreated right-hand side.
///
/// The step is wide on purpose: the feedback varies on the `1/k` scale, and a
/// narrow step would drown the tiny coupling entries in the roundoff of `c0`.
pub fn finite_difference_jacobian(params: &ModelParameters, state: &[f64; 4]) -> Matrix4<f64> {
    let f = |y: [f64; 4]| leukemia_rhs(params, &MarrowState::from_array(y)).to_array();
    let shifted = |j: usize, d: f64| {
        let mut y = *state;
        y[j] += d;
        f(y)
    };
    let mut m = Matrix4::zeros();
    for j in 0..4 {
        let h = 1e-3 * state[j].abs().max(1e9);
        let (p1, m1, p2, m2) = (shifted(j, h), shifted(j, -h), shifted(j, 2.0 * h), shifted(j, -2.0 * h));
        for i in 0..4 {
            m[(i, j)] = (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h);
        }
    }
    m
}

/// Largest entrywise relative error of the analytic Jacobian against finite
/// differences. Entries below `1e-6` of their row's largest entry are measured
/// on that scale, which is what differencing can resolve next to the big terms.
pub fn jacobian_fd_error(params: &ModelParameters, state: &[f64; 4]) -> f64 {
    let a = analytic_jacobian(params, state);
    let n = finite_difference_jacobian(params, state);
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        let floor = 1e-6 * a.row(i).amax();
        for j in 0..4 {
            worst = worst.max((a[(i, j)] - n[(i, j)]).abs() / a[(i, j)].abs().max(floor));
        }
    }
    worst
}

/// Relative mismatch of `Σλ` vs trace and `Πλ` vs determinant.
pub fn trace_det_error(m: &Matrix4<f64>) -> (f64, f64) {
    let ev = eigenvalues_4x4(m);
    let sum: Complex<f64> = ev.iter().sum();
    let prod: Complex<f64> = ev.iter().product();
    let abs_sum: f64 = ev.iter().map(|l| l.norm()).sum();
    let abs_prod: f64 = ev.iter().map(|l| l.norm()).product();
    let tr = m.trace();
    let det = m.determinant();
    (
        (sum - Complex::new(tr, 0.0)).norm() / abs_sum.max(f64::MIN_POSITIVE),
        (prod - Complex::new(det, 0.0)).norm() / abs_prod.max(f64::MIN_POSITIVE),
    )
}

/// Worst relative error of every sampled `μ_j` against `μ_j(b)·exp(−λ_j (t − b))`,
/// where `b` is the start of the sample's treatment day.
pub fn drug_closed_form_error(params: &ModelParameters, protocol: &Protocol, state0: MarrowState, t_start: f64, days: f64) -> f64 {
    let config = SolverConfig::default();
    let trace = integrate_treatment(params, protocol, state0, DrugState::zero(), t_start, t_start + days, &config)
        .expect("treated run");
    // Below this the absolute tolerance, not the method, sets the error; a
    // relative bound of 1e-8 needs amounts well above `drug_abs_tol / 1e-8`.
    let floor = 10.0 * config.drug_abs_tol / 1e-8;
    let mut worst: f64 = 0.0;
    let mut boundary = 0usize;
    for i in 0..trace.len() {
        let t = trace.times[i];
        let offset = t - t_start;
        if (offset - offset.round()).abs() < 1e-9 {
            boundary = i;
            continue;
        }
        let dt = t - trace.times[boundary];
        for id in DrugId::ALL {
            let Some(drug) = protocol.drug(id) else { continue };
            let b = trace.drug_amounts[boundary].amount(id);
            if b <= 0.0 {
                continue;
            }
            let exact = b * (-drug.lambda * dt).exp();
            if exact < floor {
                continue;
            }
            worst = worst.max((trace.drug_amounts[i].amount(id) - exact).abs() / exact);
        }
    }
    worst
}

/// Indices of `f(x) = x1 + 2 x2` on the unit square.
pub fn additive_sobol(base_samples: usize, seed: u64) -> ([f64; 2], [f64; 2]) {
    let domain = ParameterDomain::new(["x1".to_string(), "x2".to_string()], [(0.0, 1.0); 2]).unwrap();
    let cfg = SobolConfig {
        base_samples,
        seed,
        qoi: Qoi::LeukemicAtDay(15),
        bootstrap: 0,
    };
    let r = analyze(&domain, &cfg, "x1+2x2", |x| Ok::<_, SensitivityError>(x[0] + 2.0 * x[1])).unwrap();
    ([r.first_order[0], r.first_order[1]], [r.total[0], r.total[1]])
}

/// Random-looking but reproducible nonnegative marrow states.
pub fn state_from_unit(u: [f64; 4]) -> MarrowState {
    // Log-uniform over the ranges seen in practice; an exact zero for the lowest draws.
    let pick = |x: f64, lo: f64, hi: f64| if x < 0.05 { 0.0 } else { (lo.ln() + x * (hi.ln() - lo.ln())).exp() };
    MarrowState::new(pick(u[0], 1e3, 5e10), pick(u[1], 1e3, 5e10), pick(u[2], 1e3, 5e10), pick(u[3], 1.0, 1.5e12))
}

pub fn deltas_from_unit(u: [f64; 4]) -> Deltas {
    let mut d = Deltas::zero();
    for (i, id) in DrugId::ALL.iter().enumerate() {
        let (lo, hi) = id.influence_range();
        d.set(*id, lo + u[i] * (hi - lo));
    }
    d
}
