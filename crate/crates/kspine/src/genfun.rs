//! Generating functions of the branching process.
//!
//! F_t(s) = E[s^{Z_t}] per root type solves the backward system
//! dF_i/dt = α_i (f_i(F) − F_i), F_0 = s. Everything here is derived from
//! that system or from its Taylor expansion in a radial variable.

use rayon::prelude::*;
use thiserror::Error;

use crate::forest::{self, OffspringSampler};
use crate::model::{monomial, OffspringModel, SpectralData};
use crate::ode::{Dopri5, OdeError};
use crate::series;

pub const MAX_FD_ORDER: usize = 6;
pub const RICHARDSON_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenFunError {
    #[error("ODE solver failed: {0}")]
    Ode(#[from] OdeError),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("finite-difference order {0} exceeds the supported maximum {MAX_FD_ORDER}")]
    OrderTooHigh(usize),
    #[error("simulation failed: {0}")]
    Simulation(String),
}

fn solver() -> Dopri5 {
    Dopri5::default()
}

/// dF/dt for any number of stacked d-blocks.
pub(crate) fn pgf_rhs(model: &OffspringModel, y: &[f64], dy: &mut [f64]) {
    let d = model.d;
    for (yb, db) in y.chunks(d).zip(dy.chunks_mut(d)) {
        for i in 0..d {
            db[i] = model.alpha[i] * (model.pgf(i, yb) - yb[i]);
        }
    }
}

fn clamp_unit(y: &mut [f64]) {
    for v in y {
        *v = v.clamp(0.0, 1.0);
    }
}

fn check_time(t: f64) -> Result<(), GenFunError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(GenFunError::Domain(format!("time {t} must be finite and non-negative")));
    }
    Ok(())
}

/// F_t(s) for s in the unit cube.
pub fn generating_function(
    model: &OffspringModel,
    t: f64,
    s: &[f64],
) -> Result<Vec<f64>, GenFunError> {
    check_time(t)?;
    if s.len() != model.d || s.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(GenFunError::Domain(format!("s = {s:?} is not a point of [0,1]^{}", model.d)));
    }
    let mut y = s.to_vec();
    solver().advance(|y, dy| pgf_rhs(model, y, dy), &mut y, t, clamp_unit)?;
    Ok(y)
}

/// F_t(s) without the unit-cube projection; `s` may leave the cube slightly.
pub(crate) fn generating_function_free(
    model: &OffspringModel,
    t: f64,
    points: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, GenFunError> {
    let d = model.d;
    let mut y: Vec<f64> = points.iter().flatten().copied().collect();
    solver().advance(|y, dy| pgf_rhs(model, y, dy), &mut y, t, |_| {})?;
    Ok(y.chunks(d).map(<[f64]>::to_vec).collect())
}

/// F_t(s) on an increasing time grid.
#[derive(Debug, Clone)]
pub struct GenFunSolution {
    pub s: Vec<f64>,
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub tolerance: f64,
}

pub fn solve_on_grid(
    model: &OffspringModel,
    s: &[f64],
    grid: &[f64],
) -> Result<GenFunSolution, GenFunError> {
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.first().is_some_and(|&g| g < 0.0) {
        return Err(GenFunError::Domain("grid must be increasing and non-negative".into()));
    }
    let mut y = s.to_vec();
    let mut values = Vec::with_capacity(grid.len());
    solver().advance_through(
        |y, dy| pgf_rhs(model, y, dy),
        &mut y,
        grid,
        clamp_unit,
        |_, y, _| values.push(y.to_vec()),
    )?;
    Ok(GenFunSolution {
        s: s.to_vec(),
        grid: grid.to_vec(),
        values,
        tolerance: solver().atol,
    })
}

/// q(t) = F_t(0).
pub fn extinction_prob(model: &OffspringModel, t: f64) -> Result<Vec<f64>, GenFunError> {
    generating_function(model, t, &vec![0.0; model.d])
}

/// E_m[e^{−θ·Z_t}] for each root type m.
pub fn laplace(model: &OffspringModel, t: f64, theta: &[f64]) -> Result<Vec<f64>, GenFunError> {
    if theta.len() != model.d || theta.iter().any(|&x| !(x >= 0.0)) {
        return Err(GenFunError::Domain(format!("θ = {theta:?} must be a non-negative {}-vector", model.d)));
    }
    let s: Vec<f64> = theta.iter().map(|x| (-x).exp()).collect();
    generating_function(model, t, &s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorialMoments {
    pub values: Vec<f64>,
    /// Relative gap between the two Richardson levels.
    pub discrepancy: f64,
    pub low_confidence: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// E_m[N_t^{⌊k⌋} e^{−θ·Z_t}] as the k-th derivative at y = 1 of
/// y ↦ F_t(y e^{−θ}), by central differences at steps h and h/2 combined by
/// Richardson extrapolation. All stencil points share one adaptive step
/// sequence so that the differences see a smooth flow map.
pub fn factorial_moment_discounted(
    model: &OffspringModel,
    t: f64,
    theta: &[f64],
    k: usize,
) -> Result<FactorialMoments, GenFunError> {
    check_time(t)?;
    if k == 0 {
        return Err(GenFunError::Domain("order must be positive".into()));
    }
    if k > MAX_FD_ORDER {
        return Err(GenFunError::OrderTooHigh(k));
    }
    let d = model.d;
    let base: Vec<f64> = theta.iter().map(|x| (-x).exp()).collect();
    let h = 1e-3 * (k as f64).max(1.0);
    let steps = [h, h / 2.0];
    let mut points = Vec::new();
    for &hh in &steps {
        for j in 0..=k {
            let y = 1.0 + (j as f64 - k as f64 / 2.0) * hh;
            points.push(base.iter().map(|b| b * y).collect::<Vec<_>>());
        }
    }
    let vals = generating_function_free(model, t, &points)?;
    let mut est = [vec![0.0; d], vec![0.0; d]];
    for (level, &hh) in steps.iter().enumerate() {
        for j in 0..=k {
            let sign = if (k - j).is_multiple_of(2) { 1.0 } else { -1.0 };
            let c = sign * binomial(k, j) / hh.powi(k as i32);
            for m in 0..d {
                est[level][m] += c * vals[level * (k + 1) + j][m];
            }
        }
    }
    let values: Vec<f64> = (0..d).map(|m| (4.0 * est[1][m] - est[0][m]) / 3.0).collect();
    let discrepancy = (0..d)
        .map(|m| (est[1][m] - est[0][m]).abs() / values[m].abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GenFunError::Ode(OdeError::NonFinite { t }));
    }
    Ok(FactorialMoments {
        values,
        discrepancy,
        low_confidence: discrepancy > RICHARDSON_TOL,
    })
}

/// Taylor system for c_{i,j}(t) = (1/j!) ∂_y^j F_{t,i}(y e^{−θ}) at y = 1.
///
/// State layout: `y[i * (order + 1) + j]`.
#[derive(Debug, Clone)]
pub(crate) struct TaylorSystem<'a> {
    pub model: &'a OffspringModel,
    pub order: usize,
}

impl TaylorSystem<'_> {
    pub fn width(&self) -> usize {
        self.order + 1
    }

    pub fn initial(&self, theta: &[f64]) -> Vec<f64> {
        let w = self.width();
        let mut y = vec![0.0; self.model.d * w];
        for (m, th) in theta.iter().enumerate() {
            let b = (-th).exp();
            y[m * w] = b;
            if self.order >= 1 {
                y[m * w + 1] = b;
            }
        }
        y
    }

    /// Coefficients of f_i(G) for every type.
    pub fn composed(&self, y: &[f64], out: &mut [f64]) {
        let w = self.width();
        let d = self.model.d;
        let g: Vec<&[f64]> = (0..d).map(|m| &y[m * w..(m + 1) * w]).collect();
        let mut prod = Vec::with_capacity(w);
        let mut scratch = Vec::with_capacity(w);
        for i in 0..d {
            let o = &mut out[i * w..(i + 1) * w];
            o.iter_mut().for_each(|v| *v = 0.0);
            for outcome in &self.model.offspring[i] {
                if outcome.p == 0.0 {
                    continue;
                }
                series::monomial_series(&outcome.ell, &g, self.order, &mut prod, &mut scratch);
                for (a, b) in o.iter_mut().zip(&prod) {
                    *a += outcome.p * b;
                }
            }
        }
    }

    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        self.composed(y, dy);
        let w = self.width();
        for i in 0..self.model.d {
            let a = self.model.alpha[i];
            for j in 0..w {
                let idx = i * w + j;
                dy[idx] = a * (dy[idx] - y[idx]);
            }
        }
    }

    pub fn project(&self, y: &mut [f64]) {
        let w = self.width();
        for (idx, v) in y.iter_mut().enumerate() {
            *v = if idx % w == 0 { v.clamp(0.0, 1.0) } else { v.max(0.0) };
        }
    }
}

/// φ_m^{(j)}(t) = E_m[N_t^{⌊j⌋} e^{−θ·Z_t}] for j = 0..=order, from the
/// exact ODE satisfied by the Taylor coefficients in the radial variable.
pub fn discounted_factorial_moments_exact(
    model: &OffspringModel,
    t: f64,
    theta: &[f64],
    order: usize,
) -> Result<Vec<Vec<f64>>, GenFunError> {
    check_time(t)?;
    let sys = TaylorSystem { model, order };
    let mut y = sys.initial(theta);
    solver().advance(|y, dy| sys.rhs(y, dy), &mut y, t, |y| sys.project(y))?;
    let w = sys.width();
    Ok((0..model.d)
        .map(|m| {
            let mut fact = 1.0;
            (0..w)
                .map(|j| {
                    if j > 0 {
                        fact *= j as f64;
                    }
                    fact * y[m * w + j]
                })
                .collect()
        })
        .collect())
}

/// F_t(s) together with the Jacobian ∂F_{t,i}/∂s_j.
pub fn jacobian(
    model: &OffspringModel,
    t: f64,
    s: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>), GenFunError> {
    check_time(t)?;
    let d = model.d;
    let mut y = vec![0.0; d + d * d];
    y[..d].copy_from_slice(s);
    for i in 0..d {
        y[d + i * d + i] = 1.0;
    }
    let rhs = |y: &[f64], dy: &mut [f64]| {
        let f = &y[..d];
        for i in 0..d {
            dy[i] = model.alpha[i] * (model.pgf(i, f) - f[i]);
        }
        let mut df = vec![0.0; d * d];
        for i in 0..d {
            for o in &model.offspring[i] {
                for m in 0..d {
                    if o.ell[m] == 0 {
                        continue;
                    }
                    let mut e = o.ell.clone();
                    e[m] -= 1;
                    df[i * d + m] += o.p * o.ell[m] as f64 * monomial(&e, f);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                let mut acc = -y[d + i * d + j];
                for m in 0..d {
                    acc += df[i * d + m] * y[d + m * d + j];
                }
                dy[d + i * d + j] = model.alpha[i] * acc;
            }
        }
    };
    solver().advance(rhs, &mut y, t, |_| {})?;
    let f = y[..d].to_vec();
    let jac = (0..d).map(|i| y[d + i * d..d + (i + 1) * d].to_vec()).collect();
    Ok((f, jac))
}

/// 1 − (2ξ_m/ζ)·(η·θ/(1+(1−ρ)η·θ))/T per component.
pub fn asymptotic_laplace(spectral: &SpectralData, rho_frac: f64, theta: &[f64], horizon: f64) -> Vec<f64> {
    let et = spectral.eta_dot(theta);
    let frac = et / (1.0 + (1.0 - rho_frac) * et);
    spectral
        .xi
        .iter()
        .map(|x| 1.0 - 2.0 * x / spectral.zeta * frac / horizon)
        .collect()
}

/// ((1−ρ)Tζ/2)^{k−1} k! ξ_m (1·η)^k / (1+(1−ρ)η·θ)^{k+1} per component.
pub fn asymptotic_factorial_moment(
    spectral: &SpectralData,
    rho_frac: f64,
    theta: &[f64],
    horizon: f64,
    k: usize,
) -> Vec<f64> {
    let et = spectral.eta_dot(theta);
    let one_eta = spectral.eta_sum();
    let kf: f64 = (1..=k).map(|j| j as f64).product();
    let scale = ((1.0 - rho_frac) * horizon * spectral.zeta / 2.0).powi(k as i32 - 1);
    spectral
        .xi
        .iter()
        .map(|x| scale * kf * x * one_eta.powi(k as i32) / (1.0 + (1.0 - rho_frac) * et).powi(k as i32 + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityResidual {
    pub residual: f64,
    pub std_err: f64,
    /// Monte Carlo side Σ_j E_r[Z_t^{(j)} ∏_m F_m^{Z_t^{(m)} − δ_mj}]·∂_u F_{T−t,j}.
    pub chain: f64,
    /// ∂_u F_{T,r}(e^{−θ(u)}).
    pub direct: f64,
}

pub struct IdentityConfig<'a> {
    pub t: f64,
    pub horizon: f64,
    pub theta_path: &'a (dyn Fn(f64) -> Vec<f64> + Sync),
    pub u0: f64,
    pub root_type: usize,
    pub replicates: u64,
    pub seed: u64,
}

/// Both sides of the chain rule for u ↦ F_{T,r}(e^{−θ(u)}) through the
/// semigroup split F_T = F_t ∘ F_{T−t}. The isolated-type form for type i
/// differs from the full form only by moving the j ≠ i terms across, so the
/// residual is the same for every i.
pub fn derivative_identity_residual(
    model: &OffspringModel,
    cfg: &IdentityConfig<'_>,
) -> Result<IdentityResidual, GenFunError> {
    let d = model.d;
    let du = 1e-4;
    let s_of = |u: f64| -> Vec<f64> { (cfg.theta_path)(u).iter().map(|x| (-x).exp()).collect() };
    let pts = vec![s_of(cfg.u0 - du), s_of(cfg.u0 + du), s_of(cfg.u0)];
    let rest = generating_function_free(model, cfg.horizon - cfg.t, &pts)?;
    let full = generating_function_free(model, cfg.horizon, &pts)?;
    let d_rest: Vec<f64> = (0..d).map(|j| (rest[1][j] - rest[0][j]) / (2.0 * du)).collect();
    let direct = (full[1][cfg.root_type] - full[0][cfg.root_type]) / (2.0 * du);
    let f = rest[2].clone();
    let sampler = OffspringSampler::new(model);
    let chunk = 4096u64;
    let nchunks = cfg.replicates.div_ceil(chunk);
    let parts: Result<Vec<(f64, f64)>, GenFunError> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for r in c * chunk..((c + 1) * chunk).min(cfg.replicates) {
                let mut rng = forest::stream(cfg.seed, r);
                let z = forest::simulate_population(model, &sampler, cfg.t, cfg.root_type, 1 << 40, &mut rng)
                    .map_err(|e| GenFunError::Simulation(e.to_string()))?;
                let x = chain_sample(&z, &f, &d_rest);
                s1 += x;
                s2 += x * x;
            }
            Ok((s1, s2))
        })
        .collect();
    let (s1, s2) = parts?.into_iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = cfg.replicates as f64;
    let chain = s1 / n;
    let var = (s2 / n - chain * chain).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(IdentityResidual {
        residual: (chain - direct).abs(),
        std_err: (var / n).sqrt(),
        chain,
        direct,
    })
}

fn chain_sample(z: &[u64], f: &[f64], dfj: &[f64]) -> f64 {
    let d = z.len();
    let mut x = 0.0;
    for j in 0..d {
        if z[j] == 0 {
            continue;
        }
        let mut prod = z[j] as f64;
        for m in 0..d {
            let e = z[m] as i32 - if m == j { 1 } else { 0 };
            prod *= f[m].powi(e);
        }
        x += prod * dfj[j];
    }
    x
}

/// Max-norm of J_T(e^{−θ}) − J_t(F_{T−t}(e^{−θ}))·J_{T−t}(e^{−θ}), ODE only.
pub fn chain_rule_residual(
    model: &OffspringModel,
    t: f64,
    horizon: f64,
    theta: &[f64],
) -> Result<f64, GenFunError> {
    let d = model.d;
    let s: Vec<f64> = theta.iter().map(|x| (-x).exp()).collect();
    let (_, jt) = jacobian(model, horizon, &s)?;
    let (f_rest, j_rest) = jacobian(model, horizon - t, &s)?;
    let (_, j_head) = jacobian(model, t, &f_rest)?;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let prod: f64 = (0..d).map(|m| j_head[i][m] * j_rest[m][j]).sum();
            worst = worst.max((prod - jt[i][j]).abs());
        }
    }
    Ok(worst)
}

/// Monte Carlo estimate of E_r[N_t^{⌊k⌋} e^{−θ·Z_t}] with its standard error.
pub fn factorial_moment_mc(
    model: &OffspringModel,
    t: f64,
    theta: &[f64],
    k: usize,
    root_type: usize,
    replicates: u64,
    seed: u64,
) -> Result<(f64, f64), GenFunError> {
    let sampler = OffspringSampler::new(model);
    let chunk = 4096u64;
    let nchunks = replicates.div_ceil(chunk);
    let parts: Result<Vec<(f64, f64)>, GenFunError> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let (mut s1, mut s2) = (0.0, 0.0);
            for r in c * chunk..((c + 1) * chunk).min(replicates) {
                let mut rng = forest::stream(seed, r);
                let z = forest::simulate_population(model, &sampler, t, root_type, 1 << 40, &mut rng)
                    .map_err(|e| GenFunError::Simulation(e.to_string()))?;
                let x = falling_factorial(z.iter().sum(), k) * discount(&z, theta);
                s1 += x;
                s2 += x * x;
            }
            Ok((s1, s2))
        })
        .collect();
    let (s1, s2) = parts?.into_iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = replicates as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// n(n−1)…(n−k+1).
pub fn falling_factorial(n: u64, k: usize) -> f64 {
    (0..k as u64).map(|i| n.saturating_sub(i) as f64).product()
}

/// e^{−θ·z}.
pub fn discount(z: &[u64], theta: &[f64]) -> f64 {
    (-z.iter().zip(theta).map(|(&a, &b)| a as f64 * b).sum::<f64>()).exp()
}
