//! Limit laws of the sample genealogy of a critical process as the horizon
//! grows: the first split under the discounted size-biased measure, the
//! type and offspring laws at a split, the universal split-time density
//! f_k, and the joint density of the whole genealogy of a uniform sample.

use std::io::Write;

use thiserror::Error;

use crate::genealogy::{falling_vec, BlockSizes, ColouredPartition};
use crate::genfun::{self, GenFunError};
use crate::model::{self, w_weight, ModelError, OffspringModel, SpectralData};
use crate::quadrature::{integrate, integrate_half_line, QuadError};

/// Absolute tolerance of every improper integral in this module.
pub const QUAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model is not critical (rho = {0:e})")]
    NotCritical(f64),
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("theta has {got} entries, model has {d} types")]
    ThetaDimension { got: usize, d: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(transparent)]
    GenFun(#[from] GenFunError),
}

#[derive(Debug, Clone)]
pub struct LimitParams {
    pub model: OffspringModel,
    pub spectral: SpectralData,
    pub k: usize,
    /// Unscaled discount direction; the process is discounted by 2θ/(ζT).
    pub theta: Vec<f64>,
}

impl LimitParams {
    pub fn new(model: &OffspringModel, k: usize, theta: &[f64]) -> Result<Self, LimitError> {
        if k < 2 {
            return Err(LimitError::InvalidK(k));
        }
        if theta.len() != model.d {
            return Err(LimitError::ThetaDimension { got: theta.len(), d: model.d });
        }
        if theta.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(LimitError::Invalid("theta entries must be finite and non-negative".into()));
        }
        let spectral = model::spectral(model)?;
        if spectral.non_critical {
            return Err(LimitError::NotCritical(spectral.rho));
        }
        Ok(LimitParams {
            model: model.clone(),
            spectral,
            k,
            theta: theta.to_vec(),
        })
    }

    /// η·θ.
    pub fn eta_theta(&self) -> f64 {
        self.spectral.eta_dot(&self.theta)
    }

    fn time_factor(&self, rho: f64) -> f64 {
        let et = self.eta_theta();
        let k = self.k as i32;
        (1.0 - rho).powi(k - 2) * (1.0 + et).powi(k - 1) / (1.0 + (1.0 - rho) * et).powi(k)
    }
}

/// The first-split display 2(1−ρ)^{k−2}(1+η·θ)^{k−1}/(1+(1−ρ)η·θ)^k,
/// evaluated as written. It equals 2/(k−1) times [`first_split_marginal`].
pub fn first_split_density(params: &LimitParams, rho: f64) -> f64 {
    2.0 * params.time_factor(rho)
}

/// Density in ρ of the rescaled first split time of the k spines in the
/// limit: (k−1)(1−ρ)^{k−2}(1+η·θ)^{k−1}/(1+(1−ρ)η·θ)^k. Integrates to 1.
pub fn first_split_marginal(params: &LimitParams, rho: f64) -> f64 {
    (params.k - 1) as f64 * params.time_factor(rho)
}

/// Binary split shapes: `Some((m, n))` when the sizes describe exactly two
/// blocks, following children of types m ≤ n.
fn binary_types(sizes: &BlockSizes) -> Option<(usize, usize)> {
    let mut types = Vec::new();
    for (m, per_type) in sizes.iter().enumerate() {
        for &a in per_type {
            if a == 0 {
                return None;
            }
            types.push(m);
        }
    }
    if types.len() == 2 {
        Some((types[0], types[1]))
    } else {
        None
    }
}

/// Joint limit density of the first split at ρ, by a type-i spine with
/// offspring ℓ, into blocks of the given sizes:
/// α_i η_i p_i(ℓ) ℓ^{⌊g⌋} ξ^g / (1 + 1{two equal blocks on one type})
/// · (1−ρ)^{k−2} (2/ζ) (1+η·θ)^{k−1}/(1+(1−ρ)η·θ)^k, and 0 unless the
/// split is binary. Summing over canonical size families, offspring and
/// types gives [`first_split_marginal`].
pub fn first_split_full_law(params: &LimitParams, rho: f64, sizes: &BlockSizes, ell: &[u32], i: usize) -> f64 {
    let d = params.model.d;
    if sizes.len() != d || ell.len() != d || i >= d {
        return 0.0;
    }
    let total: u32 = sizes.iter().flatten().sum();
    if total as usize != params.k {
        return 0.0;
    }
    let Some((m, n)) = binary_types(sizes) else {
        return 0.0;
    };
    let p = params.model.offspring[i]
        .iter()
        .find(|o| o.ell == ell)
        .map_or(0.0, |o| o.p);
    if p == 0.0 {
        return 0.0;
    }
    let xi = &params.spectral.xi;
    let g: Vec<u32> = sizes.iter().map(|s| s.len() as u32).collect();
    let ell_g = falling_vec(ell, &g);
    let xi_g = xi[m] * xi[n];
    let symmetric = m == n && sizes[m][0] == sizes[m][1];
    let indicator = if symmetric { 2.0 } else { 1.0 };
    params.model.alpha[i] * params.spectral.eta[i] * p * ell_g * xi_g / indicator
        * (2.0 / params.spectral.zeta)
        * params.time_factor(rho)
}

/// Probability that the k spines split into groups of unordered sizes
/// {h, k−h}: (1 + 1{h ≠ k−h})/(k−1).
pub fn split_size_law(k: usize, h: usize) -> f64 {
    assert!(k >= 2 && (1..k).contains(&h), "need 1 <= h <= k-1");
    (1.0 + if h != k - h { 1.0 } else { 0.0 }) / (k - 1) as f64
}

/// The same law obtained by normalizing the symmetric-block indicator
/// weight 1/(1 + 1{h = k−h}) over the unordered size pairs.
pub fn split_size_law_from_indicator(k: usize, h: usize) -> f64 {
    let weight = |h: usize| if h == k - h { 0.5 } else { 1.0 };
    let total: f64 = (1..=k / 2).map(weight).sum();
    weight(h.min(k - h)) / total
}

/// Tables for the type, offspring and child-type laws at a split in the
/// limit, in both factorizations. Outcome indices refer to
/// `model.offspring[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLaws {
    /// ζ_i/ζ.
    pub type_law: Vec<f64>,
    /// E_i[w(L)].
    pub mean_w: Vec<f64>,
    /// offspring[i][o] = p_i(ℓ) w(ℓ)/E_i[w(L)].
    pub offspring: Vec<Vec<f64>>,
    /// pair[i][o][m][n]: ordered child-type pair given ℓ,
    /// ℓ_m(ℓ_n − δ_mn)ξ_mξ_n / w(ℓ).
    pub pair: Vec<Vec<Vec<Vec<f64>>>>,
    /// pair_first[i][m][n] = ξ_mξ_n E_i[L_m(L_n − δ_mn)]/E_i[w(L)].
    pub pair_first: Vec<Vec<Vec<f64>>>,
    /// offspring_given_pair[i][m][n][o] = p_i(ℓ) ℓ_m(ℓ_n − δ_mn)/E_i[L_m(L_n − δ_mn)].
    pub offspring_given_pair: Vec<Vec<Vec<Vec<f64>>>>,
}

impl SplitLaws {
    /// joint[i][o][m][n] = P(L = ℓ_o, pair = (m, n) | type i) via offspring
    /// first, then the pair.
    pub fn joint(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        self.pair
            .iter()
            .enumerate()
            .map(|(i, per_o)| {
                per_o
                    .iter()
                    .enumerate()
                    .map(|(o, mn)| {
                        mn.iter()
                            .map(|row| row.iter().map(|x| x * self.offspring[i][o]).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// The same joint table via the pair first, then the offspring.
    pub fn joint_alt(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        let d = self.type_law.len();
        (0..d)
            .map(|i| {
                let n_out = self.offspring[i].len();
                (0..n_out)
                    .map(|o| {
                        (0..d)
                            .map(|m| {
                                (0..d)
                                    .map(|n| self.pair_first[i][m][n] * self.offspring_given_pair[i][m][n][o])
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Largest entrywise difference between the two joint tables.
    pub fn factorization_gap(&self) -> f64 {
        let a = self.joint();
        let b = self.joint_alt();
        a.iter()
            .flatten()
            .flatten()
            .flatten()
            .zip(b.iter().flatten().flatten().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

fn ordered_pair_weight(ell: &[u32], m: usize, n: usize) -> f64 {
    ell[m] as f64 * (ell[n] as f64 - if m == n { 1.0 } else { 0.0 })
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

pub fn split_type_and_offspring_law(spectral: &SpectralData, model: &OffspringModel) -> SplitLaws {
    let d = model.d;
    let xi = &spectral.xi;
    let zeta_sum: f64 = spectral.zeta_i.iter().sum();
    let type_law = spectral.zeta_i.iter().map(|z| z / zeta_sum).collect();
    let mut mean_w = vec![0.0; d];
    let mut offspring = Vec::with_capacity(d);
    let mut pair = Vec::with_capacity(d);
    let mut pair_first = Vec::with_capacity(d);
    let mut offspring_given_pair = Vec::with_capacity(d);
    for i in 0..d {
        let outs = &model.offspring[i];
        let ew: f64 = outs.iter().map(|o| o.p * w_weight(&o.ell, xi)).sum();
        mean_w[i] = ew;
        offspring.push(outs.iter().map(|o| safe_div(o.p * w_weight(&o.ell, xi), ew)).collect());
        pair.push(
            outs.iter()
                .map(|o| {
                    let w = w_weight(&o.ell, xi);
                    (0..d)
                        .map(|m| {
                            (0..d)
                                .map(|n| safe_div(ordered_pair_weight(&o.ell, m, n) * xi[m] * xi[n], w))
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        );
        let moment = |m: usize, n: usize| -> f64 { outs.iter().map(|o| o.p * ordered_pair_weight(&o.ell, m, n)).sum() };
        pair_first.push(
            (0..d)
                .map(|m| (0..d).map(|n| safe_div(xi[m] * xi[n] * moment(m, n), ew)).collect())
                .collect(),
        );
        offspring_given_pair.push(
            (0..d)
                .map(|m| {
                    (0..d)
                        .map(|n| {
                            let e = moment(m, n);
                            outs.iter()
                                .map(|o| safe_div(o.p * ordered_pair_weight(&o.ell, m, n), e))
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        );
    }
    SplitLaws {
        type_law,
        mean_w,
        offspring,
        pair,
        pair_first,
        offspring_given_pair,
    }
}

fn check_times(times: &[f64], k: usize) -> Result<(), LimitError> {
    if k < 2 {
        return Err(LimitError::InvalidK(k));
    }
    if times.len() != k - 1 {
        return Err(LimitError::Invalid(format!("expected {} times, got {}", k - 1, times.len())));
    }
    if times.iter().any(|t| !(0.0..1.0).contains(t)) {
        return Err(LimitError::Invalid("times must lie in [0, 1)".into()));
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(LimitError::Invalid("times must be ordered".into()));
    }
    Ok(())
}

/// ∫_0^∞ y^{k−1}/(1+y)² ∏_h (1+(1−ρ_h)y)^{−2} dy.
pub fn mixture_integral(k: usize, rhos: &[f64]) -> Result<f64, LimitError> {
    check_times(rhos, k)?;
    let v = integrate_half_line(
        |y| {
            let mut f = 1.0 / ((1.0 + y) * (1.0 + y));
            for &r in rhos {
                let den = 1.0 + (1.0 - r) * y;
                f *= y / (den * den);
            }
            f
        },
        QUAD_TOL,
    )?;
    Ok(v)
}

/// Joint density of the k−1 ordered rescaled split times of a uniform
/// k-sample: k!∫_0^∞ ∏_h φ/(1+φ(1−t_h))² · (1+φ)^{−2} dφ. The half line
/// is split at φ = 1 and the tail mapped by φ = 1/v.
pub fn fk_density(k: usize, times: &[f64]) -> Result<f64, LimitError> {
    check_times(times, k)?;
    let kf: f64 = (1..=k).map(|j| j as f64).product();
    let integrand = |phi: f64| -> f64 {
        let mut f = 1.0 / ((1.0 + phi) * (1.0 + phi));
        for &t in times {
            let den = 1.0 + phi * (1.0 - t);
            f *= phi / (den * den);
        }
        f
    };
    let head = integrate(integrand, 0.0, 1.0, 0.5 * QUAD_TOL)?;
    let tail = integrate(
        |v| {
            let val = integrand(1.0 / v) / (v * v);
            if val.is_finite() {
                val
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        0.5 * QUAD_TOL,
    )?;
    Ok(kf * (head + tail))
}

/// Marginal density of the first rescaled split time ρ_1 of a uniform
/// k-sample: k(k−1)(1−t)^{k−2} ∫_0^∞ φ^{k−1}(1+φ)^{−2}(1+φ(1−t))^{−k} dφ.
pub fn first_split_unif_density(k: usize, t: f64) -> Result<f64, LimitError> {
    if k < 2 {
        return Err(LimitError::InvalidK(k));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(LimitError::Invalid("time must lie in [0, 1)".into()));
    }
    let s = 1.0 - t;
    let v = integrate_half_line(
        |phi| phi.powi(k as i32 - 1) / ((1.0 + phi) * (1.0 + phi) * (1.0 + phi * s).powi(k as i32)),
        QUAD_TOL,
    )?;
    Ok((k * (k - 1)) as f64 * s.powi(k as i32 - 2) * v)
}

/// CDF of ρ_1 for a uniform k-sample:
/// 1 − k(1−x)^{k−1} ∫_0^∞ φ^{k−1}(1+φ)^{−2}(1+φ(1−x))^{−(k−1)} dφ.
pub fn first_split_unif_cdf(k: usize, x: f64) -> Result<f64, LimitError> {
    if k < 2 {
        return Err(LimitError::InvalidK(k));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    if k == 2 {
        return Ok(f2_cdf(x));
    }
    let s = 1.0 - x;
    let v = integrate_half_line(
        |phi| {
            let q = phi / (1.0 + phi * s);
            q.powi(k as i32 - 1) / ((1.0 + phi) * (1.0 + phi))
        },
        QUAD_TOL,
    )?;
    Ok((1.0 - k as f64 * s.powi(k as i32 - 1) * v).clamp(0.0, 1.0))
}

/// Closed-form CDF of f_2: 2/x + 2(1−x)ln(1−x)/x² − 1.
pub fn f2_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x < 1e-3 {
        // Series x/3 + x²/6 + x³/10 + x⁴/15 avoids cancellation.
        return x / 3.0 + x * x / 6.0 + x.powi(3) / 10.0 + x.powi(4) / 15.0;
    }
    2.0 / x + 2.0 * (1.0 - x) * (-x).ln_1p() / (x * x) - 1.0
}

/// One split of the limit genealogy: rescaled time, type of the splitting
/// individual, its offspring vector and the coloured partition of the
/// marks it carried into the two blocks that follow distinct children.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitEvent {
    pub rho: f64,
    pub ty: usize,
    pub ell: Vec<u32>,
    pub partition: ColouredPartition,
}

/// Discrete weight of one split: ζ_i/ζ · p_i(ℓ)w(ℓ)/E_i[w] · ℓ^{⌊g⌋}ξ^g/w(ℓ).
pub fn split_event_weight(params: &LimitParams, ev: &LimitEvent) -> f64 {
    let d = params.model.d;
    if ev.ty >= d || ev.ell.len() != d || ev.partition.d() != d || ev.partition.n_blocks() != 2 {
        return 0.0;
    }
    let Some(p) = params.model.offspring[ev.ty].iter().find(|o| o.ell == ev.ell).map(|o| o.p) else {
        return 0.0;
    };
    let sp = &params.spectral;
    let zeta_sum: f64 = sp.zeta_i.iter().sum();
    let ew: f64 = params.model.offspring[ev.ty]
        .iter()
        .map(|o| o.p * w_weight(&o.ell, &sp.xi))
        .sum();
    if ew <= 0.0 {
        return 0.0;
    }
    let g = ev.partition.g();
    let xi_g: f64 = g.iter().zip(&sp.xi).map(|(&gm, x)| x.powi(gm as i32)).product();
    sp.zeta_i[ev.ty] / zeta_sum * p * falling_vec(&ev.ell, &g) * xi_g / ew
}

/// Checks that the events form a ranked binary history of the marks
/// 1..=k: each event splits one current block into its two blocks.
pub fn is_ranked_history(k: usize, events: &[LimitEvent]) -> bool {
    if events.len() + 1 != k {
        return false;
    }
    let mut blocks: Vec<Vec<u8>> = vec![(1..=k as u8).collect()];
    for ev in events {
        if ev.partition.n_blocks() != 2 {
            return false;
        }
        let marks = ev.partition.marks();
        let Some(pos) = blocks.iter().position(|b| *b == marks) else {
            return false;
        };
        blocks.swap_remove(pos);
        for per_type in &ev.partition.blocks {
            blocks.extend(per_type.iter().cloned());
        }
    }
    events.windows(2).all(|w| w[0].rho < w[1].rho)
}

/// Joint limit density of the genealogy of a uniform k-sample:
/// ∏_h [split_event_weight] · (2^{k−1}/(k−1)!) · mixture_integral(ρ).
/// Zero unless the events form a ranked binary history with k−1 splits.
pub fn unif_limit_density(params: &LimitParams, events: &[LimitEvent]) -> Result<f64, LimitError> {
    let k = params.k;
    if !is_ranked_history(k, events) {
        return Ok(0.0);
    }
    let mut w = 1.0;
    for ev in events {
        w *= split_event_weight(params, ev);
    }
    if w == 0.0 {
        return Ok(0.0);
    }
    let rhos: Vec<f64> = events.iter().map(|e| e.rho).collect();
    Ok(w * unif_time_density(k, &rhos)?)
}

/// (2^{k−1}/(k−1)!) · mixture_integral(ρ): the density of the ranked split
/// times for any one ranked history after summing the discrete marks.
pub fn unif_time_density(k: usize, rhos: &[f64]) -> Result<f64, LimitError> {
    let fact: f64 = (1..k).map(|j| j as f64).product();
    Ok(2f64.powi(k as i32 - 1) / fact * mixture_integral(k, rhos)?)
}

/// Number k!(k−1)!/2^{k−1} of ranked binary histories of k labelled marks.
pub fn ranked_history_count(k: usize) -> u128 {
    let f = |n: usize| (1..=n as u128).product::<u128>();
    (f(k) * f(k - 1)) >> (k - 1)
}

/// Every ranked binary history of the marks 1..=k: a sequence of k−1
/// splits, each an unordered pair of blocks whose union is a current block.
pub fn ranked_histories(k: usize) -> Vec<Vec<[Vec<u8>; 2]>> {
    fn rec(blocks: &[Vec<u8>], cur: &mut Vec<[Vec<u8>; 2]>, out: &mut Vec<Vec<[Vec<u8>; 2]>>) {
        if blocks.iter().all(|b| b.len() == 1) {
            out.push(cur.clone());
            return;
        }
        for (bi, b) in blocks.iter().enumerate() {
            if b.len() < 2 {
                continue;
            }
            let rest = &b[1..];
            // The block's first mark always goes left, so each unordered
            // split is produced once.
            for mask in 0..(1u32 << rest.len()) - 1 {
                let mut left = vec![b[0]];
                let mut right = Vec::new();
                for (j, &x) in rest.iter().enumerate() {
                    if mask >> j & 1 == 1 {
                        left.push(x);
                    } else {
                        right.push(x);
                    }
                }
                let mut next: Vec<Vec<u8>> = blocks.to_vec();
                next.remove(bi);
                next.push(left.clone());
                next.push(right.clone());
                cur.push([left, right]);
                rec(&next, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&[(1..=k as u8).collect()], &mut Vec::new(), &mut out);
    out
}

/// Binary coloured partitions of `marks` into the two given blocks.
pub fn colourings(split: &[Vec<u8>; 2], d: usize) -> Vec<ColouredPartition> {
    let mut out = Vec::new();
    for m in 0..d {
        for n in 0..d {
            let mut blocks = vec![Vec::new(); d];
            blocks[m].push(split[0].clone());
            blocks[n].push(split[1].clone());
            let cp = ColouredPartition::new(blocks);
            if !out.contains(&cp) {
                out.push(cp);
            }
        }
    }
    out
}

/// Σ over types, offspring and colourings of ∏ split_event_weight for one
/// uncoloured ranked history. Equal to 1 for every history.
pub fn history_mass(params: &LimitParams, history: &[[Vec<u8>; 2]]) -> f64 {
    let d = params.model.d;
    let mut total = 1.0;
    for split in history {
        let mut s = 0.0;
        for cp in colourings(split, d) {
            for i in 0..d {
                for o in &params.model.offspring[i] {
                    let ev = LimitEvent {
                        rho: 0.0,
                        ty: i,
                        ell: o.ell.clone(),
                        partition: cp.clone(),
                    };
                    s += split_event_weight(params, &ev);
                }
            }
        }
        total *= s;
    }
    total
}

/// Description of the spine splits of a single-type k-spine tree: the
/// split times and, for each split, the index of the split at which its
/// individual was born (`None` for the child of the root) and its number
/// of spine-carrying children g_h.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub times: Vec<f64>,
    pub parent: Vec<Option<usize>>,
    pub g: Vec<u32>,
}

impl SplitConfig {
    fn validate(&self, horizon: f64) -> Result<(), LimitError> {
        let n = self.times.len();
        if self.parent.len() != n || self.g.len() != n {
            return Err(LimitError::Invalid("split config fields differ in length".into()));
        }
        if n > 0 && self.parent.iter().filter(|p| p.is_none()).count() != 1 {
            return Err(LimitError::Invalid("exactly one split descends from the root".into()));
        }
        for h in 0..n {
            let t = self.times[h];
            if !(t > 0.0 && t < horizon) {
                return Err(LimitError::Invalid(format!("split time {t} outside (0, T)")));
            }
            if let Some(p) = self.parent[h] {
                if p >= n || self.times[p] >= t {
                    return Err(LimitError::Invalid("a split must follow its parent split".into()));
                }
            }
            let inner = self.parent.iter().filter(|&&p| p == Some(h)).count() as u32;
            if self.g[h] < 2 || inner > self.g[h] {
                return Err(LimitError::Invalid("each split needs g >= 2 and at most g inner children".into()));
            }
        }
        Ok(())
    }
}

fn derivative_at(model: &OffspringModel, t: f64, x: f64) -> Result<f64, LimitError> {
    if t == 0.0 {
        return Ok(1.0);
    }
    let (_, jac) = genfun::jacobian(model, t, &[x])?;
    Ok(jac[0][0])
}

/// |LHS − RHS| of the single-type reduction of the joint splitting law.
/// LHS: for every spine-carrying individual born at time t_h (t_0 = 0 for
/// the root) that splits again at t_c, the factor F'_{t_c−t_h}(F_{T−t_c}(e^{−θ}));
/// for every spine-carrying child of split h that never splits again,
/// F'_{T−t_h}(e^{−θ}). RHS: F'_T(e^{−θ}) ∏_h F'_{T−t_h}(e^{−θ})^{g_h−1}.
/// All derivatives come from the variational ODE of the generating
/// function.
pub fn single_type_reduction_residual(
    model: &OffspringModel,
    theta: f64,
    horizon: f64,
    config: &SplitConfig,
) -> Result<f64, LimitError> {
    if model.d != 1 {
        return Err(LimitError::Invalid("single-type model required".into()));
    }
    if !(theta >= 0.0 && theta.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(LimitError::Invalid("theta and horizon must be finite, theta >= 0, T > 0".into()));
    }
    config.validate(horizon)?;
    let n = config.times.len();
    if n == 0 {
        return Ok(0.0);
    }
    let s0 = (-theta).exp();
    let f_at = |t: f64| -> Result<f64, LimitError> { Ok(genfun::generating_function(model, t, &[s0])?[0]) };
    let mut lhs = 1.0;
    for h in 0..n {
        let tc = config.times[h];
        let born = config.parent[h].map_or(0.0, |p| config.times[p]);
        lhs *= derivative_at(model, tc - born, f_at(horizon - tc)?)?;
        let inner = config.parent.iter().filter(|&&p| p == Some(h)).count() as i32;
        let leaves = config.g[h] as i32 - inner;
        lhs *= derivative_at(model, horizon - tc, s0)?.powi(leaves);
    }
    let mut rhs = derivative_at(model, horizon, s0)?;
    for h in 0..n {
        rhs *= derivative_at(model, horizon - config.times[h], s0)?.powi(config.g[h] as i32 - 1);
    }
    Ok((lhs - rhs).abs())
}

/// Writes `t,density` rows of the first-split density of a uniform
/// k-sample at t = j/grid, j = 0..grid.
pub fn write_density_table<W: Write>(mut w: W, k: usize, grid: usize) -> Result<(), LimitError> {
    let io = |e: std::io::Error| LimitError::Invalid(e.to_string());
    writeln!(w, "t,density").map_err(io)?;
    for j in 0..grid {
        let t = j as f64 / grid as f64;
        let f = first_split_unif_density(k, t)?;
        writeln!(w, "{t:.6},{f:.6}").map_err(io)?;
    }
    Ok(())
}
