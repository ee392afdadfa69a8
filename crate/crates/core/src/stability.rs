//! Steady states of the untreated system and their linear stability.

use crate::model::{healthy_signal, leukemia_rhs, leukemic_signal, MarrowState, ModelParameters};
use nalgebra::{Complex, Matrix4, Vector4};
use serde::Serialize;
use std::fmt::{self, Write as _};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("closed-form candidate {index} is degenerate: {reason}")]
    Degenerate { index: usize, reason: &'static str },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("Newton iteration stalled after {iterations} iterations (relative residual {relative_residual:e})")]
    NotConverged {
        iterations: usize,
        relative_residual: f64,
    },
    #[error("non-finite state or residual during refinement")]
    NonFinite,
}

/// Composite expressions `φ`, `ψ`, `ω` used by the closed-form equilibria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedFormConstants {
    pub phi: f64,
    pub psi: f64,
    pub omega: f64,
}

impl ClosedFormConstants {
    pub fn from_params(p: &ModelParameters) -> Self {
        let (a1, a2, a3) = (p.alpha1(), p.alpha2(), p.alpha3());
        let (r1, r2, rl) = (p.rho1(), p.rho2(), p.rho_l());
        let (k, gl, lm) = (p.k(), p.gamma_l(), p.l_max());
        Self {
            phi: a1 * a2 * r1 + a1 * a3 * r1 + a2 * a3 * r1 - a1 * a3 * r2,
            psi: gl * k * lm - rl,
            omega: a1 * gl * k * lm - a1 * rl - a1 * k * lm * rl + r1 * rl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyState {
    /// `(C1, C2, C3, L)`; components may be negative.
    pub state: [f64; 4],
    /// `max_i |f_i|` (cells/day).
    pub residual_norm: f64,
    /// `max_i |f_i| / Σ|terms of f_i|`, a cancellation-aware measure.
    pub relative_residual: f64,
    /// Whether `c0` was part of the solved system.
    pub include_influx: bool,
    pub iterations: usize,
}

impl SteadyState {
    fn evaluate(params: &ModelParameters, state: [f64; 4], iterations: usize) -> Self {
        let f = rhs(params, &state);
        Self {
            state,
            residual_norm: f.iter().fold(0.0, |m, v| m.max(v.abs())),
            relative_residual: relative_residual(params, &state),
            include_influx: params.c0() != 0.0,
            iterations,
        }
    }

    pub fn marrow_state(&self) -> MarrowState {
        MarrowState::from_array(self.state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "Stable",
            Verdict::Unstable => "Unstable",
            Verdict::Inconclusive => "Inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Row label, `P_L1` … `P_L6`.
    pub label: String,
    /// 1-based index of the closed-form candidate that seeded the refinement.
    pub seed_index: usize,
    pub steady_state: SteadyState,
    pub eigenvalues: [Complex<f64>; 4],
    pub verdict: Verdict,
}

pub const DEFAULT_ZERO_TOL: f64 = 1e-9;

fn rhs(params: &ModelParameters, y: &[f64; 4]) -> [f64; 4] {
    leukemia_rhs(params, &MarrowState::from_array(*y)).to_array()
}

/// Per-equation sums of absolute term magnitudes of the untreated system.
fn term_scales(p: &ModelParameters, y: &[f64; 4]) -> [f64; 4] {
    let s = MarrowState::from_array(*y);
    let sig = healthy_signal(p, &s);
    let sig_l = leukemic_signal(p, &s);
    let [c1, c2, c3, l] = *y;
    [
        p.c0().abs() + (sig * p.rho1() * c1).abs() + (p.alpha1() * c1).abs(),
        (sig * p.rho2() * c2).abs() + (p.alpha1() * c1).abs() + (p.alpha2() * c2).abs(),
        (p.alpha2() * c2).abs() + (p.alpha3() * c3).abs(),
        (sig_l * p.rho_l() * l * (1.0 - l / p.l_max())).abs() + (p.gamma_l() * l).abs(),
    ]
}

/// `max_i |f_i| / Σ|terms of f_i|`; zero where every term vanishes.
pub fn relative_residual(params: &ModelParameters, state: &[f64; 4]) -> f64 {
    let f = rhs(params, state);
    let sc = term_scales(params, state);
    (0..4)
        .map(|i| if sc[i] > 0.0 { f[i].abs() / sc[i] } else { f[i].abs() })
        .fold(0.0, f64::max)
}

/// The six equilibria of the system without influx, as explicit formulas.
///
/// Entry `i` carries a degeneracy error when one of its denominators vanishes.
pub fn closed_form_steady_states(params: &ModelParameters) -> Vec<Result<SteadyState, StabilityError>> {
    let p = params.with_c0(0.0).expect("c0 = 0 is admissible");
    let ClosedFormConstants { phi, psi, .. } = ClosedFormConstants::from_params(&p);
    let (a1, a2, a3) = (p.alpha1(), p.alpha2(), p.alpha3());
    let (r1, r2, rl) = (p.rho1(), p.rho2(), p.rho_l());
    let (k, gl, lm) = (p.k(), p.gamma_l(), p.l_max());
    // A denominator counts as zero when it is roundoff relative to its own terms.
    let nz = |x: f64, scale: f64| x.is_finite() && x.abs() > 1e-12 * scale.abs();
    let phi_nz = nz(phi, a1 * a2 * r1 + a1 * a3 * r1 + a2 * a3 * r1 + a1 * a3 * r2);
    let psi_nz = nz(psi, gl * k * lm + rl);
    let degenerate = |index, reason| Err(StabilityError::Degenerate { index, reason });

    let mut out = Vec::with_capacity(6);
    out.push(Ok([0.0; 4]));
    out.push(if nz(rl, 1.0) { Ok([0.0, 0.0, 0.0, lm * (rl - gl) / rl]) } else { degenerate(2, "rho_L = 0") });
    out.push(if nz(a2 + a3, a2.abs() + a3.abs()) {
        let c3 = (r2 - a2) / ((a2 + a3) * k);
        Ok([0.0, a3 * c3 / a2, c3, 0.0])
    } else {
        degenerate(3, "alpha2 + alpha3 = 0")
    });
    // Healthy equilibrium: s = α1/ρ1 fixes the total, the chain fixes the ratios.
    out.push(if phi_nz {
        let c2 = a3 * r1 * (r1 - a1) / (k * phi);
        let c3 = a2 * r1 * (r1 - a1) / (k * phi);
        let c1 = a3 * (a2 * r1 - a1 * r2) * (r1 - a1) / (a1 * k * phi);
        Ok([c1, c2, c3, 0.0])
    } else {
        degenerate(4, "phi = 0")
    });
    // Leukemic coexistence: s = α1/ρ1 fixes the total, the L equation fixes L,
    // the chain splits the healthy rest. Reduces to the φ/ψ/ω form when ρ_L = ρ1.
    out.push(if phi_nz && psi_nz && nz(a1, 1.0) {
        let total = (r1 - a1) / (a1 * k);
        let l = lm * (gl * r1 - a1 * rl) / (a1 * psi);
        let c1_per_c2 = (a2 * r1 - a1 * r2) / (a1 * r1);
        let c2 = (total - l) / (c1_per_c2 + 1.0 + a2 / a3);
        Ok([c1_per_c2 * c2, c2, a2 * c2 / a3, l])
    } else {
        degenerate(5, "phi = 0 or psi = 0")
    });
    out.push(if psi_nz && nz(a2 + a3, a2.abs() + a3.abs()) {
        let d = (a2 + a3) * k * psi;
        Ok([
            0.0,
            a3 * (-gl * k * lm + rl + k * lm * rl - r2 * rl / a2) / d,
            (-r2 * rl + a2 * (-psi + k * lm * rl)) / d,
            (gl * lm * r2 - a2 * lm * rl) / (a2 * psi),
        ])
    } else {
        degenerate(6, "psi = 0 or alpha2 + alpha3 = 0")
    });
    out.into_iter()
        .map(|r| r.map(|s| SteadyState::evaluate(&p, s, 0)))
        .collect()
}

/// Exact partial derivatives of the untreated right-hand side.
pub fn analytic_jacobian(params: &ModelParameters, state: &[f64; 4]) -> Matrix4<f64> {
    let s = MarrowState::from_array(*state);
    let sig = healthy_signal(params, &s);
    let sig_l = leukemic_signal(params, &s);
    let [c1, c2, _c3, l] = *state;
    let k = params.k();
    let (r1, r2, rl) = (params.rho1(), params.rho2(), params.rho_l());
    let (a1, a2, a3) = (params.alpha1(), params.alpha2(), params.alpha3());
    let lm = params.l_max();

    let g1 = -k * r1 * c1 * sig * sig;
    let g2 = -k * r2 * c2 * sig * sig;
    let g4 = -k * rl * sig_l * sig_l * l * (1.0 - l / lm);
    Matrix4::new(
        sig * r1 - a1 + g1, g1, g1, g1,
        a1 + g2, sig * r2 - a2 + g2, g2, g2,
        0.0, a2, -a3, 0.0,
        g4, g4, g4, sig_l * rl * (1.0 - 2.0 * l / lm) - params.gamma_l(),
    )
}

/// Options for [`newton_refine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Target [`relative_residual`].
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iterations: 100,
            max_halvings: 30,
        }
    }
}

fn inf_norm(v: &[f64; 4]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped Newton iteration on the untreated system with `c0` as configured.
pub fn newton_refine(
    params: &ModelParameters,
    guess: [f64; 4],
    options: &NewtonOptions,
) -> Result<SteadyState, StabilityError> {
    let mut x = guess;
    let mut f = rhs(params, &x);
    for it in 0..=options.max_iterations {
        if !x.iter().chain(&f).all(|v| v.is_finite()) {
            return Err(StabilityError::NonFinite);
        }
        let rel = relative_residual(params, &x);
        if rel < options.tol {
            return Ok(SteadyState::evaluate(params, x, it));
        }
        if it == options.max_iterations {
            return Err(StabilityError::NotConverged {
                iterations: it,
                relative_residual: rel,
            });
        }
        let jac = analytic_jacobian(params, &x);
        let dx = jac
            .lu()
            .solve(&Vector4::from(f))
            .filter(|d| d.iter().all(|v| v.is_finite()))
            .ok_or(StabilityError::SingularJacobian { iteration: it })?;
        let norm0 = inf_norm(&f);
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=options.max_halvings {
            let trial: [f64; 4] = std::array::from_fn(|i| x[i] - lambda * dx[i]);
            let ft = rhs(params, &trial);
            let nt = inf_norm(&ft);
            if nt < norm0 || (nt == norm0 && relative_residual(params, &trial) < rel) {
                x = trial;
                f = ft;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(StabilityError::NotConverged {
                iterations: it,
                relative_residual: rel,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// All four eigenvalues, sorted by descending real part then descending
/// imaginary part, so conjugate pairs sit next to each other.
pub fn eigenvalues_4x4(matrix: &Matrix4<f64>) -> [Complex<f64>; 4] {
    let ev = matrix.complex_eigenvalues();
    let mut out = [ev[0], ev[1], ev[2], ev[3]];
    out.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    out
}

/// Hyperbolic classification with a zero band of half-width `zero_tol`.
pub fn classify(eigenvalues: &[Complex<f64>], zero_tol: f64) -> Verdict {
    if eigenvalues.iter().any(|l| l.re > zero_tol) {
        Verdict::Unstable
    } else if eigenvalues.iter().all(|l| l.re < -zero_tol) {
        Verdict::Stable
    } else {
        Verdict::Inconclusive
    }
}

/// Stability report at a given state.
pub fn report_at(params: &ModelParameters, label: &str, seed_index: usize, steady: SteadyState) -> StabilityReport {
    let eigenvalues = eigenvalues_4x4(&analytic_jacobian(params, &steady.state));
    StabilityReport {
        label: label.to_string(),
        seed_index,
        steady_state: steady,
        eigenvalues,
        verdict: classify(&eigenvalues, DEFAULT_ZERO_TOL),
    }
}

/// Closed-form index seeding each survey row `P_L1` … `P_L6`.
pub const SURVEY_SEEDS: [usize; 6] = [5, 6, 3, 1, 2, 4];

/// Refines every closed-form candidate on the system with `c0` as configured
/// and classifies the result. Rows follow the `P_L1` … `P_L6` convention.
pub fn full_stability_survey(params: &ModelParameters) -> Result<Vec<StabilityReport>, StabilityError> {
    let candidates = closed_form_steady_states(params);
    let options = NewtonOptions::default();
    SURVEY_SEEDS
        .iter()
        .enumerate()
        .map(|(row, &seed)| {
            let guess = candidates[seed - 1].clone()?;
            let refined = newton_refine(params, guess.state, &options)?;
            Ok(report_at(params, &format!("P_L{}", row + 1), seed, refined))
        })
        .collect()
}

pub fn survey_to_csv(reports: &[StabilityReport], header_comments: &[String]) -> String {
    let mut out = String::new();
    for c in header_comments {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str("candidate,C1,C2,C3,L,residual,re1,im1,re2,im2,re3,im3,re4,im4,verdict\n");
    for r in reports {
        let s = &r.steady_state.state;
        let _ = write!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.label, s[0], s[1], s[2], s[3], r.steady_state.residual_norm);
        for l in &r.eigenvalues {
            let _ = write!(out, ",{},{}", l.re, l.im);
        }
        let _ = writeln!(out, ",{}", r.verdict);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CloneOrigin, ParameterValues};
    use approx::assert_relative_eq;

    fn params() -> ModelParameters {
        ModelParameters::reference(CloneOrigin::ProB)
    }

    #[test]
    fn constants_by_hand() {
        let p = params();
        let c = ClosedFormConstants::from_params(&p);
        let ln2 = std::f64::consts::LN_2;
        let (a1, a2, a3) = (0.168, 0.144, 0.288);
        assert_relative_eq!(c.phi, a1 * a2 * ln2 + a1 * a3 * ln2 + a2 * a3 * ln2 - a1 * a3 * ln2 / 1.5, max_relative = 1e-15);
        assert_relative_eq!(c.psi, 0.288e-3 * 1e-10 * 1e12 - ln2, max_relative = 1e-15);
    }

    #[test]
    fn closed_forms_are_roots() {
        for origin in [CloneOrigin::ProB, CloneOrigin::PreB] {
            let p = ModelParameters::reference(origin);
            for (i, c) in closed_form_steady_states(&p).into_iter().enumerate() {
                let c = c.unwrap();
                assert!(c.relative_residual < 1e-9, "{origin} candidate {} residual {}", i + 1, c.relative_residual);
                assert!(!c.include_influx);
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        let c = closed_form_steady_states(&params());
        assert_eq!(c[0].as_ref().unwrap().state, [0.0; 4]);
        assert_relative_eq!(c[1].as_ref().unwrap().state[3], 9.99585e11, max_relative = 1e-5);
        // The healthy equilibrium without influx is the reference initial marrow.
        let h = c[3].as_ref().unwrap().state;
        let r = MarrowState::reference_initial(0.0).to_array();
        for i in 0..3 {
            assert_relative_eq!(h[i], r[i], max_relative = 1e-5);
        }
    }

    #[test]
    fn coexistence_candidate_matches_compact_form() {
        let p = params().with_c0(0.0).unwrap();
        let ClosedFormConstants { phi, psi, omega } = ClosedFormConstants::from_params(&p);
        let (a1, a2, a3, r1, r2) = (p.alpha1(), p.alpha2(), p.alpha3(), p.rho1(), p.rho2());
        let d = p.k() * phi * psi;
        let compact = [
            -a3 * (a2 * r1 - a1 * r2) * omega / (a1 * d),
            -a3 * r1 * omega / d,
            -a2 * r1 * omega / d,
            p.l_max() * r1 * (p.gamma_l() - a1) / (a1 * psi),
        ];
        let c = closed_form_steady_states(&p)[4].clone().unwrap().state;
        for i in 0..4 {
            assert_relative_eq!(c[i], compact[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn degenerate_denominators_are_marked() {
        let mut v = ParameterValues::reference(CloneOrigin::ProB);
        // psi = 0 when gamma_L k L_max = rho_L
        v.gamma_l = v.rho1 / (v.k * v.l_max);
        let p = ModelParameters::new(v).unwrap();
        let c = closed_form_steady_states(&p);
        assert!(matches!(c[4], Err(StabilityError::Degenerate { index: 5, .. })));
        assert!(matches!(c[5], Err(StabilityError::Degenerate { index: 6, .. })));
        assert!(c[0].is_ok());
    }

    #[test]
    fn jacobian_at_origin() {
        let p = params().with_c0(0.0).unwrap();
        let j = analytic_jacobian(&p, &[0.0; 4]);
        assert_relative_eq!(j[(0, 0)], p.rho1() - p.alpha1());
        assert_relative_eq!(j[(1, 1)], p.rho2() - p.alpha2());
        assert_relative_eq!(j[(2, 2)], -p.alpha3());
        assert_relative_eq!(j[(3, 3)], p.rho_l() - p.gamma_l());
        assert_eq!(j[(1, 0)], p.alpha1());
        assert_eq!(j[(2, 1)], p.alpha2());
        assert_eq!(j[(0, 1)], 0.0);
        assert_eq!(j[(3, 0)], 0.0);
    }

    #[test]
    fn jacobian_row_three_is_constant() {
        let p = params();
        let j = analytic_jacobian(&p, &[3e9, 1e10, 7e9, 4e11]);
        assert_eq!([j[(2, 0)], j[(2, 1)], j[(2, 2)], j[(2, 3)]], [0.0, p.alpha2(), -p.alpha3(), 0.0]);
    }

    #[test]
    fn eigenvalue_examples() {
        let d = Matrix4::from_diagonal(&Vector4::new(1.0, 2.0, 3.0, 4.0));
        let ev = eigenvalues_4x4(&d);
        let re: Vec<f64> = ev.iter().map(|l| l.re).collect();
        assert_eq!(re.len(), 4);
        for (a, b) in re.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        let rot = Matrix4::new(0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, -3.0);
        let ev = eigenvalues_4x4(&rot);
        assert_relative_eq!(ev[1].im, 1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[2].im, -1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1].re, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn classification() {
        let c = |v: &[(f64, f64)]| classify(&v.iter().map(|(r, i)| Complex::new(*r, *i)).collect::<Vec<_>>(), DEFAULT_ZERO_TOL);
        assert_eq!(c(&[(-1.0, 0.0), (-0.1, 0.0)]), Verdict::Stable);
        assert_eq!(
            c(&[(-0.254221, 0.0), (0.165061, 0.0), (-0.0672105, 0.0249579), (-0.0672105, -0.0249579)]),
            Verdict::Unstable
        );
        assert_eq!(c(&[(-1.0, 0.0), (0.0, 0.0)]), Verdict::Inconclusive);
    }

    #[test]
    fn newton_keeps_exact_fixed_points() {
        let p = params().with_c0(0.0).unwrap();
        let s = newton_refine(&p, [0.0; 4], &NewtonOptions::default()).unwrap();
        assert_eq!(s.state, [0.0; 4]);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn newton_from_printed_states() {
        let p = params();
        let s = newton_refine(&p, [6.20596e7, 7.47794e7, 3.73897e7, 9.99577e11], &NewtonOptions::default()).unwrap();
        for (a, b) in s.state.iter().zip([6.20596e7, 7.47794e7, 3.73897e7, 9.99577e11]) {
            assert_relative_eq!(*a, b, max_relative = 1e-2);
        }
        assert!(s.include_influx);
        let h = newton_refine(&p, [3.77184e9, 1.87656e10, 9.38282e9, 0.0], &NewtonOptions::default()).unwrap();
        assert_eq!(h.state[3], 0.0);
        assert_relative_eq!(h.state[0], 3.77184e9, max_relative = 1e-5);
    }

    #[test]
    fn survey_csv_shape() {
        let reports = full_stability_survey(&params()).unwrap();
        let csv = survey_to_csv(&reports, &[]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[5].starts_with("P_L5,"));
        assert!(lines[5].ends_with(",Stable"));
        assert_eq!(lines[1].split(',').count(), 15);
    }
}
