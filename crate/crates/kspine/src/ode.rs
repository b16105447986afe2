//! Dormand-Prince 5(4) embedded Runge-Kutta integrator for autonomous systems.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    TooManySteps { t: f64 },
}

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
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Dopri5 {
            atol: 1e-10,
            rtol: 1e-10,
            max_steps: 10_000_000,
        }
    }
}

impl Dopri5 {
    /// Advances `y` by `duration` under y' = f(y).
    pub fn advance<F, P>(&self, f: F, y: &mut [f64], duration: f64, project: P) -> Result<(), OdeError>
    where
        F: FnMut(&[f64], &mut [f64]),
        P: FnMut(&mut [f64]),
    {
        self.advance_through(f, y, &[duration], project, |_, _, _| {})
    }

    /// Integrates from 0 through the increasing `stops`, landing on each one
    /// exactly and reporting (index, state, derivative) there.
    pub fn advance_through<F, P, O>(
        &self,
        mut f: F,
        y: &mut [f64],
        stops: &[f64],
        mut project: P,
        mut observe: O,
    ) -> Result<(), OdeError>
    where
        F: FnMut(&[f64], &mut [f64]),
        P: FnMut(&mut [f64]),
        O: FnMut(usize, &[f64], &[f64]),
    {
        let n = y.len();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut k5 = vec![0.0; n];
        let mut k6 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut ynew = vec![0.0; n];
        project(y);
        f(y, &mut k1);
        let mut t = 0.0;
        let mut h = self.initial_step(y, &k1, stops.last().copied().unwrap_or(0.0));
        let mut steps = 0usize;
        for (idx, &stop) in stops.iter().enumerate() {
            while t < stop {
                steps += 1;
                if steps > self.max_steps {
                    return Err(OdeError::TooManySteps { t });
                }
                let last = t + h >= stop;
                let hh = if last { stop - t } else { h };
                if hh < 1e-14 * stop.max(1.0) && !last {
                    return Err(OdeError::StepUnderflow { t });
                }
                for i in 0..n {
                    tmp[i] = y[i] + hh * A21 * k1[i];
                }
                f(&tmp, &mut k2);
                for i in 0..n {
                    tmp[i] = y[i] + hh * (A31 * k1[i] + A32 * k2[i]);
                }
                f(&tmp, &mut k3);
                for i in 0..n {
                    tmp[i] = y[i] + hh * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
                }
                f(&tmp, &mut k4);
                for i in 0..n {
                    tmp[i] = y[i] + hh * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
                }
                f(&tmp, &mut k5);
                for i in 0..n {
                    tmp[i] = y[i]
                        + hh * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
                }
                f(&tmp, &mut k6);
                for i in 0..n {
                    ynew[i] = y[i]
                        + hh * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
                }
                f(&ynew, &mut k7);
                let mut err = 0.0;
                for i in 0..n {
                    let e = hh
                        * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                    let sc = self.atol + self.rtol * y[i].abs().max(ynew[i].abs());
                    err += (e / sc) * (e / sc);
                }
                let err = (err / n as f64).sqrt();
                if !err.is_finite() {
                    if hh < 1e-14 {
                        return Err(OdeError::NonFinite { t });
                    }
                    h = hh * 0.1;
                    continue;
                }
                if err <= 1.0 {
                    t = if last { stop } else { t + hh };
                    y.copy_from_slice(&ynew);
                    project(y);
                    f(y, &mut k1);
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(OdeError::NonFinite { t });
                    }
                    let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    if !last || fac < 1.0 {
                        h = hh * fac;
                    }
                } else {
                    let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                    h = hh * fac;
                    if h < 1e-14 * stop.max(1.0) {
                        return Err(OdeError::StepUnderflow { t });
                    }
                }
            }
            observe(idx, y, &k1);
        }
        Ok(())
    }

    fn initial_step(&self, y: &[f64], dy: &[f64], span: f64) -> f64 {
        let mut d0: f64 = 0.0;
        let mut d1: f64 = 0.0;
        for (a, b) in y.iter().zip(dy) {
            let sc = self.atol + self.rtol * a.abs();
            d0 = d0.max(a.abs() / sc);
            d1 = d1.max(b.abs() / sc);
        }
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min(span.max(1e-12)).max(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let mut y = vec![1.0, 2.0];
        Dopri5::default()
            .advance(
                |y, dy| {
                    dy[0] = -y[0];
                    dy[1] = -0.5 * y[1];
                },
                &mut y,
                3.0,
                |_| {},
            )
            .unwrap();
        assert!((y[0] - (-3.0f64).exp()).abs() < 1e-9);
        assert!((y[1] - 2.0 * (-1.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn stops_are_hit_exactly() {
        let mut y = vec![0.0];
        let mut seen = vec![];
        Dopri5::default()
            .advance_through(
                |_, dy| dy[0] = 1.0,
                &mut y,
                &[0.5, 1.0, 2.5],
                |_| {},
                |i, y, dy| seen.push((i, y[0], dy[0])),
            )
            .unwrap();
        assert_eq!(seen.len(), 3);
        assert!((seen[2].1 - 2.5).abs() < 1e-12);
        assert_eq!(seen[1].2, 1.0);
    }

    #[test]
    fn logistic_matches_closed_form() {
        let mut y = vec![0.1];
        Dopri5::default()
            .advance(|y, dy| dy[0] = y[0] * (1.0 - y[0]), &mut y, 5.0, |_| {})
            .unwrap();
        let exact = 1.0 / (1.0 + 9.0 * (-5.0f64).exp());
        assert!((y[0] - exact).abs() < 1e-9);
    }
}
