//! Exact simulation of the branching process with k marked spines under the
//! size-biased and discounted measure Q^{(k),θ}_{T,r}, the rates that drive
//! it, and the weights that carry Q-expectations back to the uniform-sample
//! measure.
//!
//! A particle of type i carrying h marks at time t branches at total rate
//! R_h(i, t) = α_i + (d/ds) log c_{i,h}(s) at s = T − t, where c_{i,h}(s) is
//! the h-th Taylor coefficient of y ↦ F_{s,i}(y e^{−θ}) at y = 1, so that
//! E_i[N_s^{⌊h⌋} e^{−θ·Z_s}] = h! c_{i,h}(s). The case h = 0 is the law of
//! particles without marks. Lifetimes are drawn by inverting the integrated
//! hazard α_i s + log c_{i,h}(s), which is exact up to interpolation of the
//! tabulated coefficients.

use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::forest::{ForestError, GenealogyTree, DEFAULT_CAP};
use crate::genealogy::{
    falling_vec, partition_count, BlockSizes, ColouredPartition,
    SplitEvent,
};
use crate::genfun::{self, GenFunError, TaylorSystem};
use crate::model::{monomial, OffspringModel};
use crate::ode::{Dopri5, OdeError};
use crate::series;

/// Largest supported number of marks.
pub const MAX_MARKS: usize = 8;
/// Largest supported offspring table.
pub const MAX_OUTCOMES: usize = 64;
/// Base number of uniform cells of the coefficient table.
pub const BASE_CELLS: usize = 2048;
/// Octaves below the uniform cell width covered by the geometric part of
/// the table near s = 0.
pub const GEOMETRIC_OCTAVES: i32 = 40;
/// Geometric nodes per octave.
pub const NODES_PER_OCTAVE: i32 = 8;
/// Relative interpolation error allowed at cell midpoints.
pub const INTERPOLATION_BUDGET: f64 = 1e-6;
const MAX_CELLS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpineError {
    #[error(transparent)]
    GenFun(#[from] GenFunError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("coefficient table misses the interpolation budget: relative error {0:e}")]
    Interpolation(f64),
}

impl From<OdeError> for SpineError {
    fn from(e: OdeError) -> Self {
        SpineError::GenFun(GenFunError::Ode(e))
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|j| j as f64).product()
}

fn offspring_probability(model: &OffspringModel, i: usize, ell: &[u32]) -> f64 {
    model.offspring[i]
        .iter()
        .filter(|o| o.ell == ell)
        .map(|o| o.p)
        .sum()
}

#[derive(Debug, Clone, Copy)]
enum CellKind {
    /// [0, s_1]: linear in c, or a power law when c(0) = 0.
    Origin,
    /// Cells with nodes in geometric progression.
    Geometric,
    /// Cells of the uniform part.
    Uniform,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    kind: CellKind,
    left: usize,
    s: f64,
}

/// Tabulated c_{m,j}(s) for s in [0, T], every type m and j = 0..=k.
#[derive(Debug, Clone)]
pub struct SpineCache {
    pub model: OffspringModel,
    pub k: usize,
    pub theta: Vec<f64>,
    pub horizon: f64,
    /// Number of uniform cells.
    pub cells: usize,
    /// Largest relative error observed at cell midpoints.
    pub interpolation_error: f64,
    nodes: Vec<f64>,
    /// Index of the last node of the geometric part.
    geo_last: usize,
    s_min: f64,
    width: f64,
    ncomp: usize,
    logc: Vec<f64>,
    dlogc: Vec<f64>,
    psi: Vec<Vec<f64>>,
}

impl SpineCache {
    /// Builds the table, doubling the resolution until the midpoint check
    /// meets [`INTERPOLATION_BUDGET`].
    pub fn new(model: &OffspringModel, k: usize, theta: &[f64], horizon: f64) -> Result<Self, SpineError> {
        if k > MAX_MARKS {
            return Err(SpineError::Invalid(format!("k = {k} exceeds {MAX_MARKS}")));
        }
        if model.offspring.iter().any(|t| t.len() > MAX_OUTCOMES) {
            return Err(SpineError::Invalid(format!("offspring tables are limited to {MAX_OUTCOMES} outcomes")));
        }
        if theta.len() != model.d || theta.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(SpineError::Invalid(format!("θ = {theta:?} must be a non-negative {}-vector", model.d)));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SpineError::Invalid(format!("horizon {horizon} must be positive")));
        }
        let mut cells = BASE_CELLS;
        loop {
            let mut cache = Self::build(model, k, theta, horizon, cells)?;
            let err = cache.midpoint_error()?;
            cache.interpolation_error = err;
            if err <= INTERPOLATION_BUDGET {
                return Ok(cache);
            }
            if cells * 2 > MAX_CELLS {
                return Err(SpineError::Interpolation(err));
            }
            cells *= 2;
        }
    }

    fn solver() -> Dopri5 {
        Dopri5 {
            atol: 1e-280,
            rtol: 1e-11,
            max_steps: 50_000_000,
        }
    }

    fn build(model: &OffspringModel, k: usize, theta: &[f64], horizon: f64, cells: usize) -> Result<Self, SpineError> {
        let width = horizon / cells as f64;
        let ratio = 2f64.powf(1.0 / NODES_PER_OCTAVE as f64);
        let s_min = width * 2f64.powi(-GEOMETRIC_OCTAVES);
        let switch = (width / (ratio - 1.0)).min(horizon);
        let mut nodes = vec![0.0];
        let mut j = 0;
        loop {
            let s = s_min * ratio.powi(j);
            if s >= switch {
                break;
            }
            nodes.push(s);
            j += 1;
        }
        let geo_last = nodes.len() - 1;
        let start = nodes[geo_last];
        let mut j = 1;
        loop {
            let s = start + j as f64 * width;
            if s >= horizon - 0.25 * width {
                nodes.push(horizon);
                break;
            }
            nodes.push(s);
            j += 1;
        }
        let sys = TaylorSystem { model, order: k };
        let ncomp = model.d * (k + 1);
        let mut y = sys.initial(theta);
        let mut logc = vec![0.0; nodes.len() * ncomp];
        let mut dlogc = vec![0.0; nodes.len() * ncomp];
        let mut dy0 = vec![0.0; ncomp];
        sys.rhs(&y, &mut dy0);
        let mut store = |node: usize, y: &[f64], dy: &[f64]| {
            for c in 0..ncomp {
                logc[node * ncomp + c] = y[c].ln();
                dlogc[node * ncomp + c] = if y[c] > 0.0 { dy[c] / y[c] } else { f64::INFINITY };
            }
        };
        store(0, &y, &dy0);
        Self::solver().advance_through(
            |y, dy| sys.rhs(y, dy),
            &mut y,
            &nodes[1..],
            |y| sys.project(y),
            |idx, y, dy| store(idx + 1, y, dy),
        )?;
        let mut cache = SpineCache {
            model: model.clone(),
            k,
            theta: theta.to_vec(),
            horizon,
            cells,
            interpolation_error: 0.0,
            nodes,
            geo_last,
            s_min,
            width,
            ncomp,
            logc,
            dlogc,
            psi: Vec::new(),
        };
        cache.psi = (0..ncomp)
            .map(|comp| {
                let a = model.alpha[comp / (k + 1)];
                (0..cache.nodes.len())
                    .map(|n| a * cache.nodes[n] + cache.logc[n * ncomp + comp])
                    .collect()
            })
            .collect();
        if cache.logc.iter().skip(ncomp).any(|v| !v.is_finite()) {
            return Err(SpineError::Invalid(
                "a discounted factorial moment vanishes on (0, T]; the model cannot carry the requested marks".into(),
            ));
        }
        Ok(cache)
    }

    fn midpoint_error(&self) -> Result<f64, SpineError> {
        let mids: Vec<f64> = self.nodes.windows(2).skip(1).map(|w| 0.5 * (w[0] + w[1])).collect();
        let sys = TaylorSystem { model: &self.model, order: self.k };
        let mut y = sys.initial(&self.theta);
        let mut worst: f64 = 0.0;
        Self::solver().advance_through(
            |y, dy| sys.rhs(y, dy),
            &mut y,
            &mids,
            |y| sys.project(y),
            |idx, y, _| {
                let cell = self.locate(mids[idx]);
                for (comp, &exact) in y.iter().enumerate() {
                    let (l, _) = self.eval(cell, comp);
                    let rel = (l.exp() - exact).abs() / exact;
                    worst = worst.max(rel);
                }
            },
        )?;
        Ok(worst)
    }

    pub fn d(&self) -> usize {
        self.model.d
    }

    fn comp(&self, m: usize, j: usize) -> usize {
        m * (self.k + 1) + j
    }

    fn locate(&self, s: f64) -> Cell {
        let s = s.clamp(0.0, self.horizon);
        if s < self.nodes[1] {
            return Cell { kind: CellKind::Origin, left: 0, s };
        }
        let last = self.nodes.len() - 2;
        let (kind, guess) = if s < self.nodes[self.geo_last] {
            let j = ((s / self.s_min).log2() * NODES_PER_OCTAVE as f64).floor() as i64 + 1;
            (CellKind::Geometric, j.clamp(1, self.geo_last as i64 - 1) as usize)
        } else {
            let j = ((s - self.nodes[self.geo_last]) / self.width).floor() as usize;
            (CellKind::Uniform, (self.geo_last + j).min(last))
        };
        let mut left = guess;
        while left > 1 && self.nodes[left] > s {
            left -= 1;
        }
        while left < last && self.nodes[left + 1] < s {
            left += 1;
        }
        Cell { kind, left, s }
    }

    /// (log c, d log c / ds) of one component inside a located cell. Away
    /// from the origin log c is a cubic Hermite in log s, which is exact for
    /// the power laws c ~ s^p found near s = 0.
    fn eval(&self, cell: Cell, comp: usize) -> (f64, f64) {
        let n = self.ncomp;
        let (a, b) = (cell.left, cell.left + 1);
        let (la, lb) = (self.logc[a * n + comp], self.logc[b * n + comp]);
        let (da, db) = (self.dlogc[a * n + comp], self.dlogc[b * n + comp]);
        let (sa, sb) = (self.nodes[a], self.nodes[b]);
        match cell.kind {
            CellKind::Origin => {
                if la.is_finite() {
                    let (ca, cb) = (la.exp(), lb.exp());
                    let slope = (cb - ca) / sb;
                    let c = ca + slope * cell.s;
                    (c.ln(), slope / c)
                } else if cell.s <= 0.0 {
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let p = sb * db;
                    (lb + p * (cell.s / sb).ln(), p / cell.s)
                }
            }
            CellKind::Geometric | CellKind::Uniform => {
                let (x0, x1, x) = (sa.ln(), sb.ln(), cell.s.ln());
                let (y, dydx) = hermite(x0, x1, la, lb, sa * da, sb * db, x);
                (y, dydx / cell.s)
            }
        }
    }

    /// c_{m,j}(s).
    pub fn coefficient(&self, m: usize, j: usize, s: f64) -> f64 {
        self.eval(self.locate(s), self.comp(m, j)).0.exp()
    }

    /// E_m[N_s^{⌊j⌋} e^{−θ·Z_s}].
    pub fn moment(&self, m: usize, j: usize, s: f64) -> f64 {
        factorial(j) * self.coefficient(m, j, s)
    }

    /// E_m[e^{−θ·Z_s}].
    pub fn laplace(&self, m: usize, s: f64) -> f64 {
        self.coefficient(m, 0, s)
    }

    /// out[m * (deg + 1) + j] = c_{m,j}(s) for j ≤ deg.
    fn coefficients_into(&self, s: f64, deg: usize, out: &mut Vec<f64>) {
        let cell = self.locate(s);
        out.clear();
        for m in 0..self.d() {
            for j in 0..=deg {
                out.push(self.eval(cell, self.comp(m, j)).0.exp());
            }
        }
    }

    /// Total branching rate of a type-i particle carrying h marks at time t.
    pub fn total_rate(&self, i: usize, h: usize, t: f64) -> f64 {
        let (_, dl) = self.eval(self.locate(self.horizon - t), self.comp(i, h));
        self.model.alpha[i] + dl
    }

    /// Rate of one labelled coloured partition with block sizes `sizes` and
    /// offspring `ell`, for a type-i particle carrying h = Σ sizes marks.
    pub fn split_rate(&self, i: usize, sizes: &BlockSizes, ell: &[u32], t: f64) -> f64 {
        let s = self.horizon - t;
        let moment = |m: usize, j: usize| self.moment(m, j, s);
        split_rate_formula(&self.model, i, sizes, ell, moment)
    }

    /// partition_count × split_rate: the rate of the whole block-size family.
    pub fn family_rate(&self, i: usize, sizes: &BlockSizes, ell: &[u32], t: f64) -> f64 {
        partition_count(sizes) as f64 * self.split_rate(i, sizes, ell, t)
    }

    /// Rate of births off the spine with offspring `ell` for a type-i
    /// particle carrying h ≥ 1 marks: all marks follow one child.
    pub fn offspine_rate(&self, i: usize, h: usize, ell: &[u32], t: f64) -> f64 {
        (0..self.d())
            .map(|m| {
                let mut sizes: BlockSizes = vec![Vec::new(); self.d()];
                sizes[m].push(h as u32);
                self.family_rate(i, &sizes, ell, t)
            })
            .sum()
    }

    /// Branching rate and offspring law of a type-i particle without marks.
    pub fn no_mark_dynamics(&self, i: usize, t: f64) -> (f64, Vec<(Vec<u32>, f64)>) {
        let s = self.horizon - t;
        let lap: Vec<f64> = (0..self.d()).map(|m| self.laplace(m, s)).collect();
        no_mark_formula(&self.model, i, &lap)
    }

    /// Time of death of a particle of type i with h marks born at time
    /// `birth`, given a unit exponential `e`; `None` if it lives past T.
    pub fn death_time(&self, i: usize, h: usize, birth: f64, e: f64) -> Option<f64> {
        let s0 = self.horizon - birth;
        let comp = self.comp(i, h);
        let alpha = self.model.alpha[i];
        let psi = &self.psi[comp];
        let (l0, _) = self.eval(self.locate(s0), comp);
        let target = alpha * s0 + l0 - e;
        if target <= psi[0] {
            return None;
        }
        let j = psi.partition_point(|&p| p <= target).saturating_sub(1);
        let lo = self.nodes[j];
        let hi = self.nodes[(j + 1).min(self.nodes.len() - 1)].min(s0);
        if j == 0 && !psi[0].is_finite() {
            let s1 = self.nodes[1];
            let p = s1 * self.dlogc[self.ncomp + comp];
            let s = s1 * ((target - psi[1]) / p).exp();
            return Some(self.horizon - s.clamp(0.0, s1));
        }
        let f = |s: f64| {
            let (l, dl) = self.eval(self.locate(s), comp);
            (alpha * s + l - target, alpha + dl)
        };
        let s = solve_monotone(f, lo, hi);
        Some(self.horizon - s)
    }
}

/// Cubic Hermite value and derivative on [x0, x1].
fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, m0: f64, m1: f64, x: f64) -> (f64, f64) {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let y = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + t) * h * m0
        + (-2.0 * t3 + 3.0 * t2) * y1
        + (t3 - t2) * h * m1;
    let dy = (6.0 * t2 - 6.0 * t) / h * y0
        + (3.0 * t2 - 4.0 * t + 1.0) * m0
        + (-6.0 * t2 + 6.0 * t) / h * y1
        + (3.0 * t2 - 2.0 * t) * m1;
    (y, dy)
}

/// Root of an increasing function on [lo, hi] by Newton steps kept inside a
/// shrinking bracket.
fn solve_monotone<F: Fn(f64) -> (f64, f64)>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let (flo, _) = f(lo);
    let (fhi, _) = f(hi);
    if flo >= 0.0 {
        return lo;
    }
    if fhi <= 0.0 {
        return hi;
    }
    let mut x = lo + (hi - lo) * (-flo / (fhi - flo));
    for _ in 0..100 {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 1e-15 * hi.max(f64::MIN_POSITIVE) {
            break;
        }
        let newton = x - fx / dfx;
        x = if dfx > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (newton - x).abs() <= 1e-15 * x.abs() && fx.abs() < 1e-13 {
            break;
        }
    }
    x
}

fn split_rate_formula<M: Fn(usize, usize) -> f64>(
    model: &OffspringModel,
    i: usize,
    sizes: &BlockSizes,
    ell: &[u32],
    moment: M,
) -> f64 {
    let d = model.d;
    let g: Vec<u32> = sizes.iter().map(|b| b.len() as u32).collect();
    let h: u32 = sizes.iter().flatten().sum();
    if h == 0 || g.iter().zip(ell).any(|(a, b)| a > b) {
        return 0.0;
    }
    let p = offspring_probability(model, i, ell);
    if p == 0.0 {
        return 0.0;
    }
    let mut rate = model.alpha[i] * p * falling_vec(ell, &g);
    for m in 0..d {
        rate *= moment(m, 0).powi((ell[m] - g[m]) as i32);
        for &a in &sizes[m] {
            rate *= moment(m, a as usize);
        }
    }
    rate / moment(i, h as usize)
}

fn no_mark_formula(model: &OffspringModel, i: usize, lap: &[f64]) -> (f64, Vec<(Vec<u32>, f64)>) {
    let weights: Vec<(Vec<u32>, f64)> = model.offspring[i]
        .iter()
        .map(|o| (o.ell.clone(), o.p * monomial(&o.ell, lap)))
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let rate = model.alpha[i] * total / lap[i];
    (rate, weights.into_iter().map(|(e, w)| (e, w / total)).collect())
}

/// Spine splitting rate evaluated directly from the generating-function
/// ODE at s = T − t:
/// α_i p_i(ℓ) ℓ^{⌊g⌋} ∏_m E_m[e^{−θ·Z_s}]^{ℓ_m−g_m} ∏_{m,q} E_m[N_s^{⌊a_{m,q}⌋}e^{−θ·Z_s}] / E_i[N_s^{⌊h⌋}e^{−θ·Z_s}].
pub fn spine_split_rate(
    model: &OffspringModel,
    i: usize,
    sizes: &BlockSizes,
    ell: &[u32],
    t: f64,
    horizon: f64,
    theta: &[f64],
) -> Result<f64, SpineError> {
    let h: u32 = sizes.iter().flatten().sum();
    let phi = genfun::discounted_factorial_moments_exact(model, horizon - t, theta, h as usize)?;
    Ok(split_rate_formula(model, i, sizes, ell, |m, j| phi[m][j]))
}

/// The same rate written as a leading expectation times a normalized
/// offspring law: α_i E_i[L^{⌊g⌋}∏_m F_m^{L_m−g_m}] · (ℓ^{⌊g⌋}∏_m F_m^{ℓ_m−g_m} p_i(ℓ) / E_i[…]) · ∏φ/φ_i.
pub fn spine_split_rate_factored(
    model: &OffspringModel,
    i: usize,
    sizes: &BlockSizes,
    ell: &[u32],
    t: f64,
    horizon: f64,
    theta: &[f64],
) -> Result<f64, SpineError> {
    let d = model.d;
    let h: u32 = sizes.iter().flatten().sum();
    let phi = genfun::discounted_factorial_moments_exact(model, horizon - t, theta, h as usize)?;
    let g: Vec<u32> = sizes.iter().map(|b| b.len() as u32).collect();
    if h == 0 || g.iter().zip(ell).any(|(a, b)| a > b) {
        return Ok(0.0);
    }
    let lap: Vec<f64> = (0..d).map(|m| phi[m][0]).collect();
    let term = |l: &[u32]| -> f64 {
        if g.iter().zip(l).any(|(a, b)| a > b) {
            return 0.0;
        }
        falling_vec(l, &g) * (0..d).map(|m| lap[m].powi((l[m] - g[m]) as i32)).product::<f64>()
    };
    let lead: f64 = model.offspring[i].iter().map(|o| o.p * term(&o.ell)).sum();
    if lead == 0.0 {
        return Ok(0.0);
    }
    let law = term(ell) * offspring_probability(model, i, ell) / lead;
    let mut marks = 1.0;
    for m in 0..d {
        for &a in &sizes[m] {
            marks *= phi[m][a as usize];
        }
    }
    Ok(model.alpha[i] * lead * law * marks / phi[i][h as usize])
}

/// Branching rate and offspring law of a type-i particle carrying no marks
/// at time t, from the generating-function ODE.
pub fn no_mark_dynamics(
    model: &OffspringModel,
    i: usize,
    t: f64,
    horizon: f64,
    theta: &[f64],
) -> Result<(f64, Vec<(Vec<u32>, f64)>), SpineError> {
    let lap = genfun::laplace(model, horizon - t, theta)?;
    Ok(no_mark_formula(model, i, &lap))
}

/// Rate of births off the spine with offspring ℓ at time 0 for a root of
/// type r carrying all k marks:
/// α_r p_r(ℓ) Σ_m ℓ_m E_m[N_T^{⌊k⌋}e^{−θ·Z_T}] / E_r[N_T^{⌊k⌋}e^{−θ·Z_T}] ∏_j E_j[e^{−θ·Z_T}]^{ℓ_j−δ_{mj}}.
pub fn offspine_rate_at_origin(
    model: &OffspringModel,
    k: usize,
    theta: &[f64],
    horizon: f64,
    r: usize,
    ell: &[u32],
) -> Result<f64, SpineError> {
    let d = model.d;
    let phi = genfun::discounted_factorial_moments_exact(model, horizon, theta, k)?;
    let p = offspring_probability(model, r, ell);
    let mut sum = 0.0;
    for m in 0..d {
        if ell[m] == 0 {
            continue;
        }
        let mut term = ell[m] as f64 * phi[m][k] / phi[r][k];
        for j in 0..d {
            let e = ell[j] as i32 - if j == m { 1 } else { 0 };
            term *= phi[j][0].powi(e);
        }
        sum += term;
    }
    Ok(model.alpha[r] * p * sum)
}

/// Limit of the births-off-the-spine rate: α_r p_r(ℓ)(ℓ·ξ)/ξ_r.
pub fn offspine_rate_limit(model: &OffspringModel, xi: &[f64], r: usize, ell: &[u32]) -> f64 {
    let lxi: f64 = ell.iter().zip(xi).map(|(&l, &x)| l as f64 * x).sum();
    model.alpha[r] * offspring_probability(model, r, ell) * lxi / xi[r]
}

/// Uniform placement of labelled marks on the children of a branching
/// event with offspring `ell` and block sizes `sizes`. Children are indexed
/// in type order. Returns the coloured partition and the marks of each child.
pub fn allocate_spines<R: Rng + ?Sized>(
    ell: &[u32],
    sizes: &BlockSizes,
    marks: &[u8],
    rng: &mut R,
) -> Result<(ColouredPartition, Vec<Vec<u8>>), SpineError> {
    let d = ell.len();
    if sizes.len() != d {
        return Err(SpineError::Invalid("block sizes and offspring differ in dimension".into()));
    }
    let total: u32 = sizes.iter().flatten().sum();
    if total as usize != marks.len() || sizes.iter().flatten().any(|&a| a == 0) {
        return Err(SpineError::Invalid("block sizes must be positive and sum to the number of marks".into()));
    }
    if sizes.iter().zip(ell).any(|(b, &l)| b.len() as u32 > l) {
        return Err(SpineError::Invalid("more blocks than children of that type".into()));
    }
    let mut shuffled = marks.to_vec();
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let n: u32 = ell.iter().sum();
    let mut per_child = vec![Vec::new(); n as usize];
    let mut blocks = vec![Vec::new(); d];
    let mut offset = 0usize;
    let mut cursor = 0usize;
    for m in 0..d {
        let lm = ell[m] as usize;
        let mut chosen: Vec<usize> = (0..lm).collect();
        for i in 0..sizes[m].len() {
            let j = rng.random_range(i..lm);
            chosen.swap(i, j);
        }
        chosen.truncate(sizes[m].len());
        let mut order = sizes[m].clone();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for (&child, &a) in chosen.iter().zip(&order) {
            let blk: Vec<u8> = shuffled[cursor..cursor + a as usize].to_vec();
            cursor += a as usize;
            per_child[offset + child] = blk.clone();
            blocks[m].push(blk);
        }
        offset += lm;
    }
    for c in &mut per_child {
        c.sort_unstable();
    }
    Ok((ColouredPartition::new(blocks), per_child))
}

/// A branching event on the spines at which all marks follow one child.
#[derive(Debug, Clone, PartialEq)]
pub struct OffSpineBirth {
    pub time: f64,
    pub ty: usize,
    pub offspring: Vec<u32>,
    pub marks: u32,
    pub vertex: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpineRecord {
    /// Spine splittings in time order.
    pub events: Vec<SplitEvent>,
    pub offspine: Vec<OffSpineBirth>,
    /// `sample[j]` carries mark j + 1 at T.
    pub sample: Vec<u32>,
    /// Z_T, or `None` when subtrees without marks were not grown.
    pub final_population: Option<Vec<u64>>,
}

impl SpineRecord {
    pub fn m(&self) -> usize {
        self.events.len()
    }

    pub fn n_total(&self) -> Option<u64> {
        self.final_population.as_ref().map(|z| z.iter().sum())
    }
}

#[derive(Debug, Clone)]
pub struct SpineOptions {
    pub root_type: usize,
    /// Simulate subtrees that carry no marks (needed for Z_T and weights).
    pub grow_unmarked: bool,
    pub cap: usize,
}

impl Default for SpineOptions {
    fn default() -> Self {
        SpineOptions {
            root_type: 0,
            grow_unmarked: true,
            cap: DEFAULT_CAP,
        }
    }
}

/// Reusable buffers for [`spine_simulate`].
#[derive(Debug, Default)]
pub struct SpineWorkspace {
    marks: Vec<u64>,
    stack: Vec<u32>,
    coeffs: Vec<f64>,
    weights: Vec<f64>,
    prod: Vec<f64>,
    scratch: Vec<f64>,
    suffix: Vec<Vec<f64>>,
    types: Vec<usize>,
    degrees: Vec<usize>,
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One realisation of the tree with k spines under Q^{(k),θ}_{T,r}.
pub fn spine_simulate<R: Rng + ?Sized>(
    cache: &SpineCache,
    opts: &SpineOptions,
    tree: &mut GenealogyTree,
    ws: &mut SpineWorkspace,
    rng: &mut R,
) -> Result<SpineRecord, SpineError> {
    let model = &cache.model;
    let d = model.d;
    let k = cache.k;
    let horizon = cache.horizon;
    if opts.root_type >= d {
        return Err(SpineError::Forest(ForestError::BadRootType(opts.root_type)));
    }
    tree.d = d;
    tree.reset(opts.root_type, horizon);
    ws.marks.clear();
    ws.marks.push(if k == 0 { 0 } else { (1u64 << k) - 1 });
    ws.stack.clear();
    ws.stack.push(0);
    let mut events = Vec::new();
    let mut offspine = Vec::new();
    let mut sample = vec![u32::MAX; k];
    let mut z = vec![0u64; d];
    while let Some(v) = ws.stack.pop() {
        let ind = *tree.get(v);
        let ty = ind.ty as usize;
        let mask = ws.marks[v as usize];
        let h = mask.count_ones() as usize;
        let e: f64 = rng.sample(Exp1);
        let Some(death) = cache.death_time(ty, h, ind.birth, e) else {
            z[ty] += 1;
            if h == 1 {
                sample[mask.trailing_zeros() as usize] = v;
            }
            debug_assert!(h <= 1, "a particle with {h} marks survived to the horizon");
            continue;
        };
        let death = death.max(ind.birth);
        let s = horizon - death;
        cache.coefficients_into(s, h, &mut ws.coeffs);
        let w = h + 1;
        ws.weights.clear();
        for o in &model.offspring[ty] {
            if o.p == 0.0 {
                ws.weights.push(0.0);
                continue;
            }
            if h == 0 {
                let mut x = o.p;
                for m in 0..d {
                    x *= ws.coeffs[m * w].powi(o.ell[m] as i32);
                }
                ws.weights.push(x);
            } else {
                let g: Vec<&[f64]> = (0..d).map(|m| &ws.coeffs[m * w..(m + 1) * w]).collect();
                series::monomial_series(&o.ell, &g, h, &mut ws.prod, &mut ws.scratch);
                ws.weights.push(o.p * ws.prod[h]);
            }
        }
        let choice = pick(&ws.weights, rng);
        let ell = model.offspring[ty][choice].ell.clone();
        let first = tree.branch(v, death, &ell);
        let n = ell.iter().sum::<u32>() as usize;
        ws.marks.resize(first as usize + n, 0);
        if tree.len() > opts.cap {
            return Err(SpineError::Forest(ForestError::PopulationCap { cap: opts.cap, time: death }));
        }
        if h > 0 {
            ws.types.clear();
            for (m, &l) in ell.iter().enumerate() {
                ws.types.extend(std::iter::repeat_n(m, l as usize));
            }
            ws.suffix.resize(n + 1, Vec::new());
            ws.suffix[n].clear();
            ws.suffix[n].resize(w, 0.0);
            ws.suffix[n][0] = 1.0;
            for c in (0..n).rev() {
                let m = ws.types[c];
                let (head, tail) = ws.suffix.split_at_mut(c + 1);
                head[c].resize(w, 0.0);
                series::mul_into(&ws.coeffs[m * w..(m + 1) * w], &tail[0], &mut head[c]);
            }
            ws.degrees.clear();
            let mut rem = h;
            for c in 0..n {
                let m = ws.types[c];
                ws.weights.clear();
                for a in 0..=rem {
                    ws.weights.push(ws.coeffs[m * w + a] * ws.suffix[c + 1][rem - a]);
                }
                let a = if c + 1 == n { rem } else { pick(&ws.weights, rng) };
                ws.degrees.push(a);
                rem -= a;
            }
            let mut carried: Vec<u8> = (0..k as u8).filter(|b| mask >> b & 1 == 1).collect();
            for i in (1..carried.len()).rev() {
                let j = rng.random_range(0..=i);
                carried.swap(i, j);
            }
            let mut cursor = 0;
            let mut blocks = vec![Vec::new(); d];
            let mut receiving = 0;
            for c in 0..n {
                let a = ws.degrees[c];
                if a == 0 {
                    continue;
                }
                receiving += 1;
                let mut child_mask = 0u64;
                let mut blk = Vec::with_capacity(a);
                for &b in &carried[cursor..cursor + a] {
                    child_mask |= 1 << b;
                    blk.push(b + 1);
                }
                cursor += a;
                ws.marks[first as usize + c] = child_mask;
                blocks[ws.types[c]].push(blk);
            }
            if receiving >= 2 {
                events.push(SplitEvent {
                    time: death,
                    type_before: ty,
                    offspring: ell.clone(),
                    partition: ColouredPartition::new(blocks),
                    vertex: v,
                });
            } else {
                offspine.push(OffSpineBirth {
                    time: death,
                    ty,
                    offspring: ell.clone(),
                    marks: h as u32,
                    vertex: v,
                });
            }
        }
        for c in (0..n).rev() {
            let idx = first + c as u32;
            if opts.grow_unmarked || ws.marks[idx as usize] != 0 {
                ws.stack.push(idx);
            }
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    assert!(
        events.windows(2).all(|w| w[0].time < w[1].time),
        "spine split events with identical times"
    );
    offspine.sort_by(|a, b| a.time.total_cmp(&b.time));
    assert!(sample.iter().all(|&s| s != u32::MAX), "a mark was lost before the horizon");
    Ok(SpineRecord {
        events,
        offspine,
        sample,
        final_population: opts.grow_unmarked.then_some(z),
    })
}

/// g_{k,T}: ∏ over marks and branch points on each mark's ancestral line of
/// (L_w·ξ)/ξ_{c_w}, times the indicator that the marks sit on distinct
/// individuals alive at T. Equals 1 for k = 0.
pub fn g_statistic(tree: &GenealogyTree, sample: &[u32], xi: &[f64]) -> f64 {
    for (a, &x) in sample.iter().enumerate() {
        if !tree.get(x).death.is_infinite() || sample[..a].contains(&x) {
            return 0.0;
        }
    }
    let mut g = 1.0;
    for &leaf in sample {
        let mut v = leaf;
        while v != 0 {
            let parent = tree.get(v).parent;
            let ell = tree.offspring_vector(parent).expect("parent has branched");
            let lxi: f64 = ell.iter().zip(xi).map(|(&l, &x)| l as f64 * x).sum();
            g *= lxi / xi[tree.get(v).ty as usize];
            v = parent;
        }
    }
    g
}

/// E_r[N_T^{⌊k⌋}e^{−θ·Z_T}] / (N_T^{⌊k⌋} e^{−θ·Z_T}) for a complete record.
pub fn importance_weight(cache: &SpineCache, record: &SpineRecord, root_type: usize) -> Option<f64> {
    let z = record.final_population.as_ref()?;
    let n: u64 = z.iter().sum();
    let k = cache.k;
    assert!(n as usize >= k, "fewer than k individuals at the horizon under Q");
    let log_num = cache.moment(root_type, k, cache.horizon).ln();
    let log_ff: f64 = (0..k as u64).map(|i| ((n - i) as f64).ln()).sum();
    let tz: f64 = z.iter().zip(&cache.theta).map(|(&a, &b)| a as f64 * b).sum();
    Some((log_num - log_ff + tz).exp())
}

/// k marks dropped on a plain forward tree: each mark starts at the root and
/// at every branching follows a child of type m with probability ℓ_mξ_m/ℓ·ξ,
/// uniform among children of that type. Returns where the marks end and
/// the accumulated g, which is 0 when a mark dies out or two marks coincide.
pub fn mark_walk<R: Rng + ?Sized>(tree: &GenealogyTree, k: usize, xi: &[f64], rng: &mut R) -> (Vec<u32>, f64) {
    let mut g = 1.0;
    let mut ends = Vec::with_capacity(k);
    let mut lost = false;
    for _ in 0..k {
        let mut v = 0u32;
        loop {
            let ind = tree.get(v);
            if ind.death.is_infinite() {
                break;
            }
            if ind.n_children == 0 {
                lost = true;
                break;
            }
            let ell = tree.offspring_vector(v).expect("dead");
            let lxi: f64 = ell.iter().zip(xi).map(|(&l, &x)| l as f64 * x).sum();
            let mut u = rng.random::<f64>() * lxi;
            let mut m = 0;
            while m + 1 < ell.len() && (ell[m] == 0 || u >= ell[m] as f64 * xi[m]) {
                if ell[m] > 0 {
                    u -= ell[m] as f64 * xi[m];
                }
                m += 1;
            }
            let before: u32 = ell[..m].iter().sum();
            let child = ind.first_child + before + rng.random_range(0..ell[m]);
            g *= lxi / xi[m];
            v = child;
        }
        ends.push(v);
    }
    for a in 0..ends.len() {
        if ends[..a].contains(&ends[a]) {
            lost = true;
        }
    }
    (ends, if lost { 0.0 } else { g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{simulate_tree, stream};
    use crate::genealogy::{enumerate_block_families, split_records};
    use crate::model::{load_model, spectral};

    fn sym2() -> OffspringModel {
        load_model(include_str!("../../../models/sym2.json")).unwrap()
    }
    fn geo1() -> OffspringModel {
        load_model(include_str!("../../../models/geo1.json")).unwrap()
    }
    fn asym2() -> OffspringModel {
        load_model(include_str!("../../../models/asym2.json")).unwrap()
    }

    #[test]
    fn cache_matches_direct_moments() {
        let model = asym2();
        let theta = [0.3, 0.1];
        let cache = SpineCache::new(&model, 3, &theta, 12.0).unwrap();
        assert!(cache.interpolation_error < INTERPOLATION_BUDGET);
        for &s in &[1e-9, 1e-4, 0.37, 5.0, 11.99, 12.0] {
            let phi = genfun::discounted_factorial_moments_exact(&model, s, &theta, 3).unwrap();
            for m in 0..2 {
                for j in 0..=3 {
                    let c = cache.moment(m, j, s);
                    assert!((c / phi[m][j] - 1.0).abs() < 2e-6, "s={s} m={m} j={j} {c} {}", phi[m][j]);
                }
            }
        }
    }

    #[test]
    fn family_rates_sum_to_total_rate() {
        let model = asym2();
        let theta = [0.2, 0.5];
        let k = 4;
        let cache = SpineCache::new(&model, k, &theta, 6.0).unwrap();
        for &t in &[0.0, 2.5, 5.9] {
            for i in 0..2 {
                for h in 1..=k {
                    let mut sum = 0.0;
                    for fam in enumerate_block_families(h as u32, 2) {
                        for o in &model.offspring[i] {
                            sum += cache.family_rate(i, &fam, &o.ell, t);
                        }
                    }
                    let total = cache.total_rate(i, h, t);
                    assert!((sum / total - 1.0).abs() < 1e-5, "t={t} i={i} h={h} {sum} {total}");
                }
                let (rate, law) = cache.no_mark_dynamics(i, t);
                assert!((rate / cache.total_rate(i, 0, t) - 1.0).abs() < 1e-5);
                assert!((law.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_and_factored_rates_agree() {
        let model = asym2();
        let theta = [1.0, 0.4];
        let cache = SpineCache::new(&model, 3, &theta, 4.0).unwrap();
        let cases: Vec<(usize, BlockSizes, Vec<u32>)> = vec![
            (0, vec![vec![1], vec![1]], vec![1, 1]),
            (0, vec![vec![2, 1], vec![]], vec![2, 1]),
            (1, vec![vec![1], vec![2]], vec![1, 2]),
            (1, vec![vec![], vec![3]], vec![1, 2]),
            (0, vec![vec![1, 1, 1], vec![]], vec![2, 1]),
        ];
        for (i, sizes, ell) in cases {
            let a = spine_split_rate(&model, i, &sizes, &ell, 1.5, 4.0, &theta).unwrap();
            let b = spine_split_rate_factored(&model, i, &sizes, &ell, 1.5, 4.0, &theta).unwrap();
            let c = cache.split_rate(i, &sizes, &ell, 1.5);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            assert!((a - c).abs() <= 1e-5 * a.abs().max(1e-300), "{a} {c}");
        }
        assert_eq!(
            spine_split_rate(&model, 0, &vec![vec![1, 1, 1], vec![]], &[2, 1], 1.5, 4.0, &theta).unwrap(),
            0.0
        );
    }

    #[test]
    fn no_mark_dynamics_cases() {
        let model = sym2();
        let (rate, law) = no_mark_dynamics(&model, 0, 1.0, 3.0, &[0.0, 0.0]).unwrap();
        assert!((rate - model.alpha[0]).abs() < 1e-12);
        for (ell, p) in &law {
            assert!((p - offspring_probability(&model, 0, ell)).abs() < 1e-12);
        }
        let theta = [0.7, 0.2];
        let (_, at_end) = no_mark_dynamics(&model, 1, 3.0, 3.0, &theta).unwrap();
        let base = [(-0.7f64).exp(), (-0.2f64).exp()];
        let norm: f64 = model.offspring[1].iter().map(|o| o.p * monomial(&o.ell, &base)).sum();
        for (ell, p) in &at_end {
            let want = offspring_probability(&model, 1, ell) * monomial(ell, &base) / norm;
            assert!((p - want).abs() < 1e-12);
        }
        let theta = [1.0, 1.0];
        let (rate, law) = no_mark_dynamics(&model, 0, 5.0, 10.0, &theta).unwrap();
        let lap = genfun::laplace(&model, 5.0, &theta).unwrap();
        let mut total = 0.0;
        for o in &model.offspring[0] {
            let w = o.p * lap[0].powi(o.ell[0] as i32) * lap[1].powi(o.ell[1] as i32);
            total += w;
        }
        for (ell, p) in &law {
            let w = offspring_probability(&model, 0, ell) * monomial(ell, &lap);
            assert!((p - w / total).abs() < 1e-12);
        }
        assert!((law.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((rate - model.alpha[0] * total / lap[0]).abs() < 1e-12);
    }

    #[test]
    fn allocation_cases() {
        let mut rng = stream(5, 0);
        let (p, kids) = allocate_spines(&[1], &vec![vec![3]], &[1, 2, 3], &mut rng).unwrap();
        assert_eq!(kids, vec![vec![1, 2, 3]]);
        assert_eq!(p.g(), vec![1]);
        let n = 100_000u64;
        let mut first_gets_1 = 0;
        let mut pair_counts = std::collections::HashMap::new();
        for r in 0..n {
            let mut rng = stream(6, r);
            let (_, kids) = allocate_spines(&[2, 0], &vec![vec![1, 1], vec![]], &[1, 2], &mut rng).unwrap();
            if kids[0] == vec![1] {
                first_gets_1 += 1;
            }
            let (part, _) = allocate_spines(&[2, 1], &vec![vec![2], vec![1]], &[1, 2, 3], &mut rng).unwrap();
            *pair_counts.entry(part.blocks[0][0].clone()).or_insert(0u64) += 1;
        }
        let se = (0.25 / n as f64).sqrt();
        assert!((first_gets_1 as f64 / n as f64 - 0.5).abs() < 4.0 * se);
        assert_eq!(pair_counts.len(), 3);
        let se = ((1.0 / 3.0) * (2.0 / 3.0) / n as f64).sqrt();
        for &c in pair_counts.values() {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 4.0 * se);
        }
        assert!(allocate_spines(&[1, 0], &vec![vec![1, 1], vec![]], &[1, 2], &mut rng).is_err());
    }

    #[test]
    fn g_statistic_cases() {
        let mut tree = GenealogyTree::new(2, 0, 2.0);
        tree.branch(0, 1.0, &[1, 1]);
        assert_eq!(g_statistic(&tree, &[1], &[0.5, 0.5]), 2.0);
        assert_eq!(g_statistic(&tree, &[1, 1], &[0.5, 0.5]), 0.0);
        assert_eq!(g_statistic(&tree, &[], &[0.5, 0.5]), 1.0);
        assert_eq!(g_statistic(&tree, &[0], &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn survival_matches_closed_ratio() {
        let model = geo1();
        let (k, horizon) = (2, 6.0);
        let theta = [0.2];
        let cache = SpineCache::new(&model, k, &theta, horizon).unwrap();
        let t = horizon / 2.0;
        let phi_t = genfun::discounted_factorial_moments_exact(&model, horizon - t, &theta, k).unwrap();
        let phi_0 = genfun::discounted_factorial_moments_exact(&model, horizon, &theta, k).unwrap();
        let p = phi_t[0][k] / phi_0[0][k] * (-model.alpha[0] * t).exp();
        let n = 200_000u64;
        let hits = (0..n)
            .filter(|&r| {
                let mut rng = stream(8, r);
                let e: f64 = rng.sample(Exp1);
                cache.death_time(0, k, 0.0, e).is_none_or(|d| d > t)
            })
            .count();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn spine_runs_are_consistent() {
        let model = asym2();
        let sp = spectral(&model).unwrap();
        let k = 3;
        let theta = [0.3, 0.3];
        let horizon = 5.0;
        let cache = SpineCache::new(&model, k, &theta, horizon).unwrap();
        let mut tree = GenealogyTree::new(2, 0, horizon);
        let mut ws = SpineWorkspace::default();
        let opts = SpineOptions::default();
        let n = 20_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for r in 0..n {
            let mut rng = stream(9, r);
            let rec = spine_simulate(&cache, &opts, &mut tree, &mut ws, &mut rng).unwrap();
            let created: usize = rec.events.iter().map(|e| e.partition.n_blocks() - 1).sum();
            assert_eq!(created, k - 1);
            let genealogy = split_records(&tree, &rec.sample).unwrap();
            assert_eq!(genealogy.events, rec.events);
            assert!(g_statistic(&tree, &rec.sample, &sp.xi) > 0.0);
            let z = rec.final_population.clone().unwrap();
            assert_eq!(z, tree.final_population());
            let w = importance_weight(&cache, &rec, 0).unwrap();
            assert!(w > 0.0);
            let nt = z.iter().sum::<u64>() as f64;
            s1 += nt;
            s2 += nt * nt;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let phi = genfun::discounted_factorial_moments_exact(&model, horizon, &theta, k + 1).unwrap();
        let want = (phi[0][k + 1] + k as f64 * phi[0][k]) / phi[0][k];
        assert!((mean - want).abs() < 3.0 * se, "E_Q[N_T] {mean} ± {se} vs {want}");
    }

    #[test]
    fn first_split_law_matches_rates() {
        let model = sym2();
        let k = 2;
        let horizon = 3.0;
        let theta = [0.5, 0.5];
        let cache = SpineCache::new(&model, k, &theta, horizon).unwrap();
        let mut tree = GenealogyTree::new(2, 0, horizon);
        let mut ws = SpineWorkspace::default();
        let opts = SpineOptions {
            grow_unmarked: false,
            ..SpineOptions::default()
        };
        let n = 40_000u64;
        let mut early = 0u64;
        let cut = 1.0;
        for r in 0..n {
            let mut rng = stream(10, r);
            let rec = spine_simulate(&cache, &opts, &mut tree, &mut ws, &mut rng).unwrap();
            assert!(rec.final_population.is_none());
            if rec.events[0].time < cut {
                early += 1;
            }
        }
        // P(τ_1 < cut) by integrating the split hazard along the spine, which
        // stays on the particle carrying both marks until τ_1.
        let mut y = vec![1.0f64, 0.0, 0.0];
        let steps = 4000;
        let dt = cut / steps as f64;
        // state: probability of unsplit in type 0 and type 1, accumulated split mass
        let split_rate = |i: usize, t: f64| -> f64 {
            let mut s = 0.0;
            for fam in enumerate_block_families(2, 2) {
                if fam.iter().map(Vec::len).sum::<usize>() < 2 {
                    continue;
                }
                for o in &model.offspring[i] {
                    s += cache.family_rate(i, &fam, &o.ell, t);
                }
            }
            s
        };
        let move_rate = |i: usize, j: usize, t: f64| -> f64 {
            let mut sizes: BlockSizes = vec![Vec::new(); 2];
            sizes[j].push(2);
            model.offspring[i].iter().map(|o| cache.family_rate(i, &sizes, &o.ell, t)).sum()
        };
        let deriv = |y: &[f64], t: f64| -> Vec<f64> {
            let mut dy = vec![0.0; 3];
            for i in 0..2 {
                let out = cache.total_rate(i, 2, t) - move_rate(i, i, t);
                dy[i] -= out * y[i];
                dy[1 - i] += move_rate(i, 1 - i, t) * y[i];
                dy[2] += split_rate(i, t) * y[i];
            }
            dy
        };
        for s in 0..steps {
            let t = s as f64 * dt;
            let k1 = deriv(&y, t);
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k2 = deriv(&y2, t + 0.5 * dt);
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k3 = deriv(&y3, t + 0.5 * dt);
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
            let k4 = deriv(&y4, t + dt);
            for j in 0..3 {
                y[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        let p = y[2];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((early as f64 / n as f64 - p).abs() < 3.5 * se, "{} vs {p}", early as f64 / n as f64);
    }

    #[test]
    fn martingale_identity_small() {
        let model = sym2();
        let sp = spectral(&model).unwrap();
        let theta = [1.0, 1.0];
        let (k, horizon) = (2, 4.0);
        let n = 100_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for r in 0..n {
            let mut rng = stream(11, r);
            let tree = simulate_tree(&model, horizon, 0, &mut rng).unwrap();
            let (_, g) = mark_walk(&tree, k, &sp.xi, &mut rng);
            let x = g * genfun::discount(&tree.final_population(), &theta);
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let phi = genfun::discounted_factorial_moments_exact(&model, horizon, &theta, k).unwrap();
        assert!((mean - phi[0][k]).abs() < 3.0 * se, "{mean} ± {se} vs {}", phi[0][k]);
    }

    #[test]
    fn offspine_rate_converges() {
        let model = asym2();
        let sp = spectral(&model).unwrap();
        let ell = [1, 1];
        let limit = offspine_rate_limit(&model, &sp.xi, 0, &ell);
        let mut prev = f64::INFINITY;
        for &horizon in &[25.0, 50.0, 100.0, 200.0] {
            let theta: Vec<f64> = [1.0, 1.0].iter().map(|x| 2.0 * x / (sp.zeta * horizon)).collect();
            let direct = offspine_rate_at_origin(&model, 3, &theta, horizon, 0, &ell).unwrap();
            let cache = SpineCache::new(&model, 3, &theta, horizon).unwrap();
            let cached = cache.offspine_rate(0, 3, &ell, 0.0);
            assert!((direct / cached - 1.0).abs() < 1e-5);
            let dev = (direct / limit - 1.0).abs();
            assert!(dev < prev);
            prev = dev;
        }
        assert!(prev < 0.1);
    }
}
