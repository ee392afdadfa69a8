//! Dormand–Prince 5(4) with step-size control and 4th-order dense output.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("too many steps ({0}) before reaching the end of the interval")]
    TooManySteps(usize),
    #[error("non-finite value in the solution at t = {0}")]
    NonFinite(f64),
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const MAX_STEPS: usize = 1_000_000;

/// Interpolant over one accepted step `[t0, t0 + h]`.
#[derive(Debug, Clone)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    r: [[f64; N]; 5],
}

impl<const N: usize> DenseStep<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let r = &self.r;
        std::array::from_fn(|i| {
            r[0][i] + theta * (r[1][i] + theta1 * (r[2][i] + theta * (r[3][i] + theta1 * r[4][i])))
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dopri5<const N: usize> {
    pub rtol: [f64; N],
    pub atol: [f64; N],
    pub max_step: f64,
    pub min_step: f64,
}

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    std::array::from_fn(|i| y[i] + h * terms.iter().map(|(c, k)| c * k[i]).sum::<f64>())
}

struct Stage<const N: usize> {
    y1: [f64; N],
    k: [[f64; N]; 7],
    err: [f64; N],
}

fn stage<const N: usize, F>(f: &mut F, t: f64, y: &[f64; N], k1: &[f64; N], h: f64) -> Stage<N>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    let k2 = f(t + C2 * h, &axpy(y, h, &[(A21, k1)]));
    let k3 = f(t + C3 * h, &axpy(y, h, &[(A31, k1), (A32, &k2)]));
    let k4 = f(t + C4 * h, &axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]));
    let k5 = f(
        t + C5 * h,
        &axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
    );
    let k6 = f(
        t + h,
        &axpy(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    );
    let y1 = axpy(y, h, &[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
    let k7 = f(t + h, &y1);
    let err = std::array::from_fn(|i| {
        h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i])
    });
    Stage {
        y1,
        k: [*k1, k2, k3, k4, k5, k6, k7],
        err,
    }
}

impl<const N: usize> Dopri5<N> {
    fn error_norm(&self, y0: &[f64; N], y1: &[f64; N], err: &[f64; N]) -> f64 {
        (0..N)
            .map(|i| {
                let sc = self.atol[i] + self.rtol[i] * y0[i].abs().max(y1[i].abs());
                (err[i] / sc).abs()
            })
            .fold(0.0, f64::max)
    }

    fn initial_step<F>(&self, f: &mut F, t0: f64, y0: &[f64; N], f0: &[f64; N], span: f64) -> f64
    where
        F: FnMut(f64, &[f64; N]) -> [f64; N],
    {
        let sc: [f64; N] = std::array::from_fn(|i| self.atol[i] + self.rtol[i] * y0[i].abs());
        let rms = |v: &[f64; N]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / N as f64).sqrt();
        let d0 = rms(y0);
        let d1 = rms(f0);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(self.max_step).min(span);
        let y1 = axpy(y0, h0, &[(1.0, f0)]);
        let f1 = f(t0 + h0, &y1);
        let diff: [f64; N] = std::array::from_fn(|i| f1[i] - f0[i]);
        let d2 = rms(&diff) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h0).min(h1).min(self.max_step).min(span)
    }

    /// Integrates from `t0` to `t1` (`t1 > t0`), handing every accepted step to
    /// `on_step`. Returns the state at `t1`.
    pub fn integrate<F, S, E>(
        &self,
        mut f: F,
        t0: f64,
        y0: [f64; N],
        t1: f64,
        mut on_step: S,
    ) -> Result<[f64; N], E>
    where
        F: FnMut(f64, &[f64; N]) -> [f64; N],
        S: FnMut(&DenseStep<N>) -> Result<(), E>,
        E: From<IntegratorError>,
    {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(y0);
        }
        let mut t = t0;
        let mut y = y0;
        let mut k1 = f(t, &y);
        let mut h = self.initial_step(&mut f, t, &y, &k1, span);
        let mut steps = 0usize;
        let mut last_rejected = false;
        loop {
            let remaining = t1 - t;
            // Land exactly on t1, avoiding a sliver step at the end.
            let last = h >= remaining * (1.0 - 1e-12);
            if last {
                h = remaining;
            }
            if h < self.min_step.max(f64::EPSILON * t.abs().max(1.0) * 16.0) && !last {
                return Err(IntegratorError::StepSizeUnderflow { t, h }.into());
            }
            steps += 1;
            if steps > MAX_STEPS {
                return Err(IntegratorError::TooManySteps(MAX_STEPS).into());
            }
            let st = stage(&mut f, t, &y, &k1, h);
            let en = self.error_norm(&y, &st.y1, &st.err);
            if !en.is_finite() {
                h *= FAC_MIN;
                last_rejected = true;
                continue;
            }
            if en <= 1.0 {
                let k = &st.k;
                let ydiff: [f64; N] = std::array::from_fn(|i| st.y1[i] - y[i]);
                let bspl: [f64; N] = std::array::from_fn(|i| h * k[0][i] - ydiff[i]);
                let r4: [f64; N] = std::array::from_fn(|i| ydiff[i] - h * k[6][i] - bspl[i]);
                let r5: [f64; N] = std::array::from_fn(|i| {
                    h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i])
                });
                let dense = DenseStep {
                    t0: t,
                    h,
                    r: [y, ydiff, bspl, r4, r5],
                };
                if st.y1.iter().any(|v| !v.is_finite()) {
                    return Err(IntegratorError::NonFinite(t + h).into());
                }
                on_step(&dense)?;
                t = if last { t1 } else { t + h };
                y = st.y1;
                k1 = k[6];
                if last {
                    return Ok(y);
                }
                let mut fac = SAFETY * en.max(1e-10).powf(-0.2);
                fac = fac.clamp(FAC_MIN, FAC_MAX);
                if last_rejected {
                    fac = fac.min(1.0);
                }
                h = (h * fac).min(self.max_step);
                last_rejected = false;
            } else {
                let fac = (SAFETY * en.powf(-0.2)).max(FAC_MIN);
                h *= fac;
                last_rejected = true;
            }
        }
    }

    /// Fixed-step integration without error control.
    pub fn integrate_fixed<F>(&self, mut f: F, t0: f64, y0: [f64; N], t1: f64, steps: usize) -> [f64; N]
    where
        F: FnMut(f64, &[f64; N]) -> [f64; N],
    {
        let h = (t1 - t0) / steps as f64;
        let mut y = y0;
        let mut k1 = f(t0, &y);
        for i in 0..steps {
            let t = t0 + i as f64 * h;
            let st = stage(&mut f, t, &y, &k1, h);
            y = st.y1;
            k1 = st.k[6];
        }
        y
    }
}
