//! Experiments: uniform samples by rejection, k-spine samples with
//! importance reweighting, Monte Carlo checks of the size-biasing
//! identities, and their comparison with the limit laws.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::forest::{self, ForestError, GenealogyTree, TreeSimulator, DEFAULT_CAP};
use crate::genealogy::{self, BlockSizes, GenealogyError, SplitEvent, SplitRecords};
use crate::genfun::{self, GenFunError};
use crate::limitlaw::{self, LimitError, LimitParams};
use crate::model::{self, ModelError, OffspringModel, SpectralData};
use crate::quadrature::{self, QuadError};
use crate::spine::{self, SpineCache, SpineError, SpineOptions, SpineWorkspace};
use crate::stats;

/// Replicates per parallel work item. Results are collected in chunk
/// order, so outputs do not depend on the number of worker threads.
pub const CHUNK: u64 = 4096;
/// Rejection sampling aborts when fewer than this fraction of trees reach k.
pub const MIN_ACCEPTANCE: f64 = 1e-4;
/// Attempts made before the acceptance rate is judged.
pub const ACCEPTANCE_BURN_IN: u64 = 100_000;
/// Bins of every rescaled-time histogram.
pub const BINS: usize = 50;
pub const KS_THRESHOLD: f64 = 0.02;
pub const P_THRESHOLD: f64 = 0.01;
pub const SE_THRESHOLD: f64 = 3.0;
/// Spine runs warn when the effective sample size drops below this
/// fraction of the replicates.
pub const ESS_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Genealogy(#[from] GenealogyError),
    #[error(transparent)]
    GenFun(#[from] GenFunError),
    #[error(transparent)]
    Spine(#[from] SpineError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(
        "acceptance rate {rate:e} after {attempts} trees at T = {horizon} is below {min:e}; lower T or raise the population cap"
    )]
    AcceptanceTooLow { rate: f64, attempts: u64, horizon: f64, min: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ForwardRejection,
    Spine,
}

impl std::str::FromStr for Mode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward-rejection" | "rejection" | "forward" => Ok(Mode::ForwardRejection),
            "spine" => Ok(Mode::Spine),
            other => Err(HarnessError::Config(format!("unknown mode {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: OffspringModel,
    pub model_path: Option<String>,
    pub mode: Mode,
    pub k: usize,
    pub horizons: Vec<f64>,
    /// Unscaled discount; spine runs use 2θ/(ζT).
    pub theta: Vec<f64>,
    /// Accepted samples (rejection) or spine replicates per horizon.
    pub replicates: u64,
    pub seed: u64,
    pub root_type: usize,
    pub cap: usize,
}

impl ExperimentConfig {
    pub fn new(model: OffspringModel, mode: Mode, k: usize, horizons: Vec<f64>, replicates: u64, seed: u64) -> Self {
        let d = model.d;
        ExperimentConfig {
            model,
            model_path: None,
            mode,
            k,
            horizons,
            theta: vec![0.0; d],
            replicates,
            seed,
            root_type: 0,
            cap: DEFAULT_CAP,
        }
    }

    pub fn validate(&self) -> Result<SpectralData, HarnessError> {
        if self.k < 1 || self.k > spine::MAX_MARKS {
            return Err(HarnessError::Config(format!("k must lie in 1..={}", spine::MAX_MARKS)));
        }
        if self.replicates < 1 {
            return Err(HarnessError::Config("replicates must be at least 1".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(HarnessError::Config("every T must be finite and positive".into()));
        }
        if self.theta.len() != self.model.d || self.theta.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(HarnessError::Config("theta needs one finite non-negative entry per type".into()));
        }
        if self.root_type >= self.model.d {
            return Err(HarnessError::Config("root type out of range".into()));
        }
        let sp = model::spectral(&self.model)?;
        if sp.non_critical {
            return Err(HarnessError::Config(format!("model is not critical (rho = {:e})", sp.rho)));
        }
        Ok(sp)
    }

    /// Discount 2θ/(ζT) applied at horizon T.
    pub fn scaled_theta(&self, zeta: f64, horizon: f64) -> Vec<f64> {
        self.theta.iter().map(|x| 2.0 * x / (zeta * horizon)).collect()
    }
}

/// One split of a sample genealogy, with rescaled time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSummary {
    pub rho: f64,
    pub ty: usize,
    pub ell: Vec<u32>,
    pub sizes: BlockSizes,
    pub n_blocks: usize,
}

/// What the statistics need from one sampled genealogy.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub events: Vec<EventSummary>,
    pub n_total: u64,
    /// Self-normalization weight (1 for rejection samples).
    pub weight: f64,
}

impl SampleSummary {
    fn from_events(events: &[SplitEvent], horizon: f64, n_total: u64, weight: f64) -> Self {
        SampleSummary {
            events: events
                .iter()
                .map(|e| EventSummary {
                    rho: e.time / horizon,
                    ty: e.type_before,
                    ell: e.offspring.clone(),
                    sizes: e.partition.sizes(),
                    n_blocks: e.partition.n_blocks(),
                })
                .collect(),
            n_total,
            weight,
        }
    }

    pub fn m(&self) -> usize {
        self.events.len()
    }
}

/// Uniform k-samples from trees conditioned on N_T ≥ k.
#[derive(Debug, Clone)]
pub struct UnifBatch {
    pub samples: Vec<SampleSummary>,
    /// Split records with the attempt index that produced them, when kept.
    pub records: Vec<(u64, SplitRecords)>,
    pub attempts: u64,
}

#[allow(clippy::too_many_arguments)]
fn unif_chunk(
    model: &OffspringModel,
    k: usize,
    horizon: f64,
    root: usize,
    cap: usize,
    seed: u64,
    chunk: u64,
    keep: bool,
) -> Result<Vec<(u64, SampleSummary, Option<SplitRecords>)>, HarnessError> {
    let mut sim = TreeSimulator::new(model);
    sim.cap = cap;
    let mut tree = GenealogyTree::new(model.d, root, horizon);
    let mut out = Vec::new();
    for a in chunk * CHUNK..(chunk + 1) * CHUNK {
        let mut rng = forest::stream(seed, a);
        sim.run(&mut tree, horizon, root, &mut rng)?;
        let alive = tree.final_population().iter().sum::<u64>();
        if (alive as usize) < k {
            continue;
        }
        let sample = genealogy::uniform_sample(&tree, k, &mut rng)?;
        let rec = genealogy::split_records(&tree, &sample)?;
        let summary = SampleSummary::from_events(&rec.events, horizon, alive, 1.0);
        out.push((a, summary, keep.then_some(rec)));
    }
    Ok(out)
}

/// Draws trees until `target` of them reach N_T ≥ k, then samples k
/// individuals uniformly from each. Attempt a uses stream(seed, a); the
/// accepted samples are the first `target` in attempt order.
#[allow(clippy::too_many_arguments)]
pub fn sample_unif(
    model: &OffspringModel,
    k: usize,
    horizon: f64,
    root: usize,
    target: u64,
    seed: u64,
    cap: usize,
    keep_records: bool,
) -> Result<UnifBatch, HarnessError> {
    let batch = rayon::current_num_threads().max(1) as u64 * 4;
    let mut samples = Vec::new();
    let mut records = Vec::new();
    let mut next_chunk = 0u64;
    let mut last_attempt = 0u64;
    while (samples.len() as u64) < target {
        let chunks: Vec<u64> = (next_chunk..next_chunk + batch).collect();
        next_chunk += batch;
        let parts: Result<Vec<_>, HarnessError> = chunks
            .into_par_iter()
            .map(|c| unif_chunk(model, k, horizon, root, cap, seed, c, keep_records))
            .collect();
        for part in parts? {
            for (a, s, r) in part {
                if (samples.len() as u64) < target {
                    samples.push(s);
                    if let Some(r) = r {
                        records.push((a, r));
                    }
                    last_attempt = a;
                }
            }
        }
        let attempts = next_chunk * CHUNK;
        let rate = samples.len() as f64 / attempts as f64;
        if attempts >= ACCEPTANCE_BURN_IN && rate < MIN_ACCEPTANCE {
            return Err(HarnessError::AcceptanceTooLow {
                rate,
                attempts,
                horizon,
                min: MIN_ACCEPTANCE,
            });
        }
    }
    Ok(UnifBatch {
        samples,
        records,
        attempts: last_attempt + 1,
    })
}

/// Spine samples under Q^{(k),θ}_{T,r} with their self-normalization weights
/// E_r[N_T^{⌊k⌋}e^{−θ·Z_T}]/(N_T^{⌊k⌋}e^{−θ·Z_T}).
pub fn sample_spine(
    cache: &SpineCache,
    root: usize,
    replicates: u64,
    seed: u64,
    cap: usize,
) -> Result<Vec<SampleSummary>, HarnessError> {
    let opts = SpineOptions {
        root_type: root,
        grow_unmarked: true,
        cap,
    };
    let horizon = cache.horizon;
    let nchunks = replicates.div_ceil(CHUNK);
    let parts: Result<Vec<Vec<SampleSummary>>, HarnessError> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut tree = GenealogyTree::new(cache.d(), root, horizon);
            let mut ws = SpineWorkspace::default();
            let mut out = Vec::new();
            for r in c * CHUNK..((c + 1) * CHUNK).min(replicates) {
                let mut rng = forest::stream(seed, r);
                let rec = spine::spine_simulate(cache, &opts, &mut tree, &mut ws, &mut rng)?;
                let w = spine::importance_weight(cache, &rec, root).expect("unmarked subtrees are grown");
                let n = rec.n_total().expect("unmarked subtrees are grown");
                out.push(SampleSummary::from_events(&rec.events, horizon, n, w));
            }
            Ok(out)
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    /// 1-based type of the splitting individual.
    pub ty: usize,
    pub ell: Vec<u32>,
    pub frequency: Estimate,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub sizes: [usize; 2],
    pub frequency: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

/// Statistics of a batch of sampled genealogies at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub samples: usize,
    pub effective_sample_size: f64,
    pub mean_population: Estimate,
    /// P(M = m) for m = 0..=k−1.
    pub m_distribution: Vec<f64>,
    pub binary_fraction: f64,
    pub first_split_mean: Option<Estimate>,
    pub first_split_histogram: Vec<f64>,
    pub first_split_ks: Option<f64>,
    pub first_split_ks_pvalue: Option<f64>,
    /// Frequency of the type of the first split, per type.
    pub split_types: Vec<Estimate>,
    /// Joint frequency of (type, offspring) at the first split.
    pub split_offspring: Vec<FrequencyRow>,
    /// Unordered block sizes at binary first splits.
    pub split_sizes: Vec<SizeRow>,
    pub split_sizes_pvalue: Option<f64>,
}

fn weighted_frequency(indicator: &[f64], w: &[f64]) -> Estimate {
    let (value, se) = stats::weighted_mean_se(indicator, w);
    Estimate { value, se }
}

/// Limit law of the unordered sizes {h, k−h} at the first split.
fn size_limit(k: usize, h: usize) -> f64 {
    limitlaw::split_size_law(k, h)
}

pub fn sample_stats(samples: &[SampleSummary], k: usize, model: &OffspringModel, sp: &SpectralData) -> Result<SampleStats, HarnessError> {
    let d = model.d;
    let w: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let ess = stats::effective_sample_size(&w);
    let pop: Vec<f64> = samples.iter().map(|s| s.n_total as f64).collect();
    let (pv, pse) = stats::weighted_mean_se(&pop, &w);
    let wsum: f64 = w.iter().sum();
    let mut m_distribution = vec![0.0; k];
    for s in samples {
        let m = s.m().min(k.saturating_sub(1));
        if k > 0 {
            m_distribution[m] += s.weight;
        }
    }
    m_distribution.iter_mut().for_each(|x| *x /= wsum);
    let binary_fraction = if k >= 1 { m_distribution[k - 1] } else { 1.0 };
    let mut stats_out = SampleStats {
        samples: samples.len(),
        effective_sample_size: ess,
        mean_population: Estimate { value: pv, se: pse },
        m_distribution,
        binary_fraction,
        first_split_mean: None,
        first_split_histogram: Vec::new(),
        first_split_ks: None,
        first_split_ks_pvalue: None,
        split_types: Vec::new(),
        split_offspring: Vec::new(),
        split_sizes: Vec::new(),
        split_sizes_pvalue: None,
    };
    if k < 2 {
        return Ok(stats_out);
    }
    let rho: Vec<f64> = samples.iter().map(|s| s.events[0].rho).collect();
    let (m, se) = stats::weighted_mean_se(&rho, &w);
    stats_out.first_split_mean = Some(Estimate { value: m, se });
    stats_out.first_split_histogram = stats::histogram(&rho, Some(&w), BINS, 0.0, 1.0);
    let cdf = |x: f64| limitlaw::first_split_unif_cdf(k, x).expect("valid k");
    let ks = stats::ks_statistic_weighted(&rho, &w, cdf);
    stats_out.first_split_ks = Some(ks);
    stats_out.first_split_ks_pvalue = Some(stats::ks_pvalue(ks, ess));
    let laws = limitlaw::split_type_and_offspring_law(sp, model);
    stats_out.split_types = (0..d)
        .map(|i| {
            let ind: Vec<f64> = samples.iter().map(|s| (s.events[0].ty == i) as u8 as f64).collect();
            weighted_frequency(&ind, &w)
        })
        .collect();
    for i in 0..d {
        for (o, out) in model.offspring[i].iter().enumerate() {
            if out.ell.iter().sum::<u32>() < 2 {
                continue;
            }
            let ind: Vec<f64> = samples
                .iter()
                .map(|s| (s.events[0].ty == i && s.events[0].ell == out.ell) as u8 as f64)
                .collect();
            stats_out.split_offspring.push(FrequencyRow {
                ty: i + 1,
                ell: out.ell.clone(),
                frequency: weighted_frequency(&ind, &w),
                limit: laws.type_law[i] * laws.offspring[i][o],
            });
        }
    }
    let mut size_w = vec![0.0; k / 2 + 1];
    let mut binary_w = 0.0;
    for s in samples {
        let e = &s.events[0];
        if e.n_blocks != 2 {
            continue;
        }
        let small = e.sizes.iter().flatten().copied().min().expect("two blocks") as usize;
        size_w[small] += s.weight;
        binary_w += s.weight;
    }
    let mut observed = Vec::new();
    let mut expected = Vec::new();
    for h in 1..=k / 2 {
        let f = if binary_w > 0.0 { size_w[h] / binary_w } else { 0.0 };
        let lim = size_limit(k, h);
        stats_out.split_sizes.push(SizeRow {
            sizes: [h, k - h],
            frequency: f,
            limit: lim,
        });
        let n_eff = if binary_w > 0.0 { ess * binary_w / wsum } else { 0.0 };
        observed.push(f * n_eff);
        expected.push(lim * n_eff);
    }
    if k >= 4 && binary_w > 0.0 {
        stats_out.split_sizes_pvalue = Some(stats::chi_square(&observed, &expected).2);
    }
    Ok(stats_out)
}

/// Raw statistics of the first spine split under Q, against its limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QStats {
    pub first_split_histogram: Vec<f64>,
    pub first_split_limit_bins: Vec<f64>,
    pub chi_square_pvalue: f64,
    pub split_types: Vec<Estimate>,
    pub type_limit: Vec<f64>,
}

fn limit_bin_masses<F: Fn(f64) -> f64>(density: F) -> Result<Vec<f64>, HarnessError> {
    (0..BINS)
        .map(|b| {
            let lo = b as f64 / BINS as f64;
            let hi = (b + 1) as f64 / BINS as f64;
            Ok(quadrature::integrate(&density, lo, hi, 1e-12)?)
        })
        .collect()
}

fn q_stats(samples: &[SampleSummary], params: &LimitParams) -> Result<QStats, HarnessError> {
    let n = samples.len() as f64;
    let rho: Vec<f64> = samples.iter().map(|s| s.events[0].rho).collect();
    let hist = stats::histogram(&rho, None, BINS, 0.0, 1.0);
    let lim = limit_bin_masses(|r| limitlaw::first_split_marginal(params, r))?;
    let observed: Vec<f64> = hist.iter().map(|h| h * n).collect();
    let expected: Vec<f64> = lim.iter().map(|p| p * n).collect();
    let (_, _, pv) = stats::chi_square(&observed, &expected);
    let d = params.model.d;
    let laws = limitlaw::split_type_and_offspring_law(&params.spectral, &params.model);
    let split_types = (0..d)
        .map(|i| {
            let ind: Vec<f64> = samples.iter().map(|s| (s.events[0].ty == i) as u8 as f64).collect();
            let (value, se) = stats::mean_se(&ind);
            Estimate { value, se }
        })
        .collect();
    Ok(QStats {
        first_split_histogram: hist,
        first_split_limit_bins: lim,
        chi_square_pvalue: pv,
        split_types,
        type_limit: laws.type_law,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonReport {
    pub horizon: f64,
    pub attempts: Option<u64>,
    pub acceptance_rate: Option<f64>,
    /// T·(acceptance rate), to be set against 2ξ_r/ζ.
    pub acceptance_rate_times_t: Option<f64>,
    pub stats: SampleStats,
    pub q_stats: Option<QStats>,
    pub warnings: Vec<String>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCurves {
    /// Bin masses of the first rescaled split time of a uniform sample.
    pub first_split_bins: Vec<f64>,
    pub first_split_mean: f64,
    pub type_law: Vec<f64>,
    /// 2ξ_r/ζ.
    pub acceptance_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub model: Option<String>,
    pub mode: Mode,
    pub k: usize,
    pub theta: Vec<f64>,
    pub replicates: u64,
    pub seed: u64,
    pub root_type: usize,
    pub spectral: SpectralData,
    pub reference: Option<ReferenceCurves>,
    pub runs: Vec<HorizonReport>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.runs.iter().all(|r| r.checks.iter().all(|c| c.passed))
    }
}

fn reference(k: usize, sp: &SpectralData, model: &OffspringModel, root: usize) -> Result<Option<ReferenceCurves>, HarnessError> {
    if k < 2 {
        return Ok(None);
    }
    let bins: Vec<f64> = (0..BINS)
        .map(|b| {
            let lo = limitlaw::first_split_unif_cdf(k, b as f64 / BINS as f64)?;
            let hi = limitlaw::first_split_unif_cdf(k, (b + 1) as f64 / BINS as f64)?;
            Ok(hi - lo)
        })
        .collect::<Result<_, LimitError>>()?;
    let mean = quadrature::integrate(|x| 1.0 - limitlaw::first_split_unif_cdf(k, x).unwrap_or(f64::NAN), 0.0, 1.0, 1e-9)?;
    let laws = limitlaw::split_type_and_offspring_law(sp, model);
    Ok(Some(ReferenceCurves {
        first_split_bins: bins,
        first_split_mean: mean,
        type_law: laws.type_law,
        acceptance_limit: 2.0 * sp.xi[root] / sp.zeta,
    }))
}

fn horizon_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn standard_checks(stats: &SampleStats, reference: Option<&ReferenceCurves>) -> Vec<Check> {
    let mut checks = Vec::new();
    if let (Some(ks), Some(_)) = (stats.first_split_ks, reference) {
        checks.push(Check::at_most("first_split_ks", ks, KS_THRESHOLD));
    }
    if let Some(r) = reference {
        for (i, (e, lim)) in stats.split_types.iter().zip(&r.type_law).enumerate() {
            if e.se > 0.0 {
                checks.push(Check::at_most(
                    format!("split_type_{}_z", i + 1),
                    (e.value - lim).abs() / e.se,
                    SE_THRESHOLD,
                ));
            }
        }
    }
    if let Some(p) = stats.split_sizes_pvalue {
        checks.push(Check::at_least("split_sizes_p", p, P_THRESHOLD));
    }
    checks
}

/// Uniform k-samples by rejection at every horizon of the configuration.
pub fn run_unif_experiment(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let sp = config.validate()?;
    let reference = reference(config.k, &sp, &config.model, config.root_type)?;
    let mut runs = Vec::new();
    for (j, &horizon) in config.horizons.iter().enumerate() {
        let batch = sample_unif(
            &config.model,
            config.k,
            horizon,
            config.root_type,
            config.replicates,
            horizon_seed(config.seed, j),
            config.cap,
            false,
        )?;
        let stats = sample_stats(&batch.samples, config.k, &config.model, &sp)?;
        let rate = batch.samples.len() as f64 / batch.attempts as f64;
        let checks = standard_checks(&stats, reference.as_ref());
        runs.push(HorizonReport {
            horizon,
            attempts: Some(batch.attempts),
            acceptance_rate: Some(rate),
            acceptance_rate_times_t: Some(rate * horizon),
            stats,
            q_stats: None,
            warnings: Vec::new(),
            checks,
        });
    }
    let mut checks = Vec::new();
    if config.k >= 2 && runs.len() >= 2 {
        let ks: Vec<f64> = runs.iter().filter_map(|r| r.stats.first_split_ks).collect();
        let decreasing = ks.windows(2).all(|w| w[1] <= w[0]);
        checks.push(Check::at_least("first_split_ks_decreasing", decreasing as u8 as f64, 1.0));
    }
    Ok(Report {
        model: config.model_path.clone(),
        mode: Mode::ForwardRejection,
        k: config.k,
        theta: config.theta.clone(),
        replicates: config.replicates,
        seed: config.seed,
        root_type: config.root_type,
        spectral: sp,
        reference,
        runs,
        checks,
    })
}

/// k-spine samples at every horizon, discounted by 2θ/(ζT): raw statistics
/// under Q against the first-split limit, and self-normalized reweighted
/// statistics against the uniform-sample limit.
pub fn run_spine_experiment(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let sp = config.validate()?;
    let reference = reference(config.k, &sp, &config.model, config.root_type)?;
    let mut runs = Vec::new();
    for (j, &horizon) in config.horizons.iter().enumerate() {
        let theta_t = config.scaled_theta(sp.zeta, horizon);
        let cache = SpineCache::new(&config.model, config.k, &theta_t, horizon)?;
        let samples = sample_spine(&cache, config.root_type, config.replicates, horizon_seed(config.seed, j), config.cap)?;
        let stats = sample_stats(&samples, config.k, &config.model, &sp)?;
        let mut warnings = Vec::new();
        if stats.effective_sample_size < ESS_WARN_FRACTION * samples.len() as f64 {
            warnings.push(format!(
                "effective sample size {:.1} is below {}% of {} replicates",
                stats.effective_sample_size,
                ESS_WARN_FRACTION * 100.0,
                samples.len()
            ));
        }
        let q = if config.k >= 2 {
            let params = LimitParams::new(&config.model, config.k, &config.theta)?;
            Some(q_stats(&samples, &params)?)
        } else {
            None
        };
        let mut checks = standard_checks(&stats, reference.as_ref());
        if let Some(q) = &q {
            checks.push(Check::at_least("q_first_split_p", q.chi_square_pvalue, P_THRESHOLD));
        }
        runs.push(HorizonReport {
            horizon,
            attempts: None,
            acceptance_rate: None,
            acceptance_rate_times_t: None,
            stats,
            q_stats: q,
            warnings,
            checks,
        });
    }
    Ok(Report {
        model: config.model_path.clone(),
        mode: Mode::Spine,
        k: config.k,
        theta: config.theta.clone(),
        replicates: config.replicates,
        seed: config.seed,
        root_type: config.root_type,
        spectral: sp,
        reference,
        runs,
        checks: Vec::new(),
    })
}

/// Compares the same statistic from two estimators: |a − b| in units of
/// the combined standard error.
pub fn combined_z(a: &Estimate, b: &Estimate) -> f64 {
    (a.value - b.value).abs() / (a.se * a.se + b.se * b.se).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub k: usize,
    pub horizon: f64,
    pub theta: Vec<f64>,
    pub replicates: u64,
    /// Monte Carlo E^{(k)}_r[g_{k,T} e^{−θ·Z_T}] from marks dropped on
    /// forward trees.
    pub size_biased: Estimate,
    /// E_r[N_T^{⌊k⌋} e^{−θ·Z_T}] from the ODE.
    pub factorial_moment: f64,
    /// Empirical P_Q(χ_∅ > T/2).
    pub survival: Estimate,
    /// e^{−α_r T/2} φ_r^{(k)}(T/2)/φ_r^{(k)}(T).
    pub survival_formula: f64,
    /// Offspring vectors at the root when it gives birth off the spine.
    pub offspine_rows: Vec<(Vec<u32>, f64, f64)>,
    pub offspine_pvalue: Option<f64>,
    pub checks: Vec<Check>,
}

/// Monte Carlo checks of the size-biasing identities at one small horizon:
/// (1) E^{(k)}_r[g_{k,T}e^{−θ·Z_T}] = E_r[N_T^{⌊k⌋}e^{−θ·Z_T}];
/// (2) P_Q(χ_∅ > T/2) against the ratio of discounted factorial moments;
/// (3) the offspring law at the root's birth off the spine against the
/// birth rates of the spine sampler at the observed times.
pub fn martingale_checks(config: &ExperimentConfig) -> Result<MartingaleReport, HarnessError> {
    let sp = config.validate()?;
    let model = &config.model;
    let (k, horizon, root) = (config.k, config.horizons[0], config.root_type);
    let theta = &config.theta;
    let n = config.replicates;
    let nchunks = n.div_ceil(CHUNK);
    let parts: Result<Vec<(f64, f64)>, HarnessError> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut sim = TreeSimulator::new(model);
            sim.cap = config.cap;
            let mut tree = GenealogyTree::new(model.d, root, horizon);
            let (mut s1, mut s2) = (0.0, 0.0);
            for r in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = forest::stream(config.seed, r);
                sim.run(&mut tree, horizon, root, &mut rng)?;
                let (_, g) = spine::mark_walk(&tree, k, &sp.xi, &mut rng);
                let x = g * genfun::discount(&tree.final_population(), theta);
                s1 += x;
                s2 += x * x;
            }
            Ok((s1, s2))
        })
        .collect();
    let (s1, s2) = parts?.into_iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mean = s1 / n as f64;
    let se = ((s2 / n as f64 - mean * mean).max(0.0) / (n as f64 - 1.0).max(1.0)).sqrt();
    let phi = genfun::discounted_factorial_moments_exact(model, horizon, theta, k)?;
    let factorial_moment = phi[root][k];

    let cache = SpineCache::new(model, k, theta, horizon)?;
    let half = horizon / 2.0;
    let phi_half = genfun::discounted_factorial_moments_exact(model, horizon - half, theta, k)?;
    let survival_formula = (-model.alpha[root] * half).exp() * phi_half[root][k] / factorial_moment;
    let q_seed = config.seed.wrapping_add(0x5851_F42D_4C95_7F2D);
    let parts: Result<Vec<(u64, Vec<(f64, Vec<u32>)>)>, HarnessError> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut tree = GenealogyTree::new(model.d, root, horizon);
            let mut ws = SpineWorkspace::default();
            let opts = SpineOptions {
                root_type: root,
                grow_unmarked: false,
                cap: config.cap,
            };
            let mut hits = 0u64;
            let mut births = Vec::new();
            for r in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = forest::stream(q_seed, r);
                let rec = spine::spine_simulate(&cache, &opts, &mut tree, &mut ws, &mut rng)?;
                if tree.get(0).death > half {
                    hits += 1;
                }
                if let Some(b) = rec.offspine.iter().find(|b| b.vertex == 0) {
                    births.push((b.time, b.offspring.clone()));
                }
            }
            Ok((hits, births))
        })
        .collect();
    let mut hits = 0u64;
    let mut births = Vec::new();
    for (h, b) in parts? {
        hits += h;
        births.extend(b);
    }
    let p = hits as f64 / n as f64;
    let survival = Estimate {
        value: p,
        se: (p * (1.0 - p) / n as f64).sqrt(),
    };

    let outcomes: Vec<Vec<u32>> = model.offspring[root].iter().map(|o| o.ell.clone()).collect();
    let mut observed = vec![0.0; outcomes.len()];
    let mut expected = vec![0.0; outcomes.len()];
    for (t, ell) in &births {
        let rates: Vec<f64> = outcomes.iter().map(|l| cache.offspine_rate(root, k, l, *t)).collect();
        let total: f64 = rates.iter().sum();
        for (o, r) in rates.iter().enumerate() {
            expected[o] += r / total;
        }
        let o = outcomes.iter().position(|l| l == ell).expect("outcome of the model");
        observed[o] += 1.0;
    }
    let offspine_pvalue = (!births.is_empty()).then(|| stats::chi_square(&observed, &expected).2);
    let offspine_rows = outcomes
        .into_iter()
        .zip(observed.iter().zip(&expected))
        .map(|(l, (o, e))| (l, *o, *e))
        .collect();

    let mut checks = vec![
        Check::at_most("size_biased_identity_z", (mean - factorial_moment).abs() / se.max(f64::MIN_POSITIVE), SE_THRESHOLD),
        Check::at_most(
            "spine_survival_z",
            (p - survival_formula).abs() / survival.se.max(f64::MIN_POSITIVE),
            SE_THRESHOLD,
        ),
    ];
    if let Some(pv) = offspine_pvalue {
        checks.push(Check::at_least("offspine_law_p", pv, P_THRESHOLD));
    }
    Ok(MartingaleReport {
        k,
        horizon,
        theta: theta.clone(),
        replicates: n,
        size_biased: Estimate { value: mean, se },
        factorial_moment,
        survival,
        survival_formula,
        offspine_rows,
        offspine_pvalue,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model;

    fn sym2() -> OffspringModel {
        load_model(include_str!("../../../models/sym2.json")).unwrap()
    }

    fn geo1() -> OffspringModel {
        load_model(include_str!("../../../models/geo1.json")).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::new(sym2(), Mode::ForwardRejection, 0, vec![5.0], 10, 1);
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        c.k = 2;
        c.horizons = vec![-1.0];
        assert!(c.validate().is_err());
        c.horizons = vec![5.0];
        c.theta = vec![1.0];
        assert!(c.validate().is_err());
        c.theta = vec![0.0, 0.0];
        c.replicates = 0;
        assert!(c.validate().is_err());
        c.replicates = 1;
        assert!(c.validate().is_ok());
        assert_eq!("spine".parse::<Mode>().unwrap(), Mode::Spine);
        assert!("other".parse::<Mode>().is_err());
    }

    #[test]
    fn k1_reports_population_only() {
        let c = ExperimentConfig::new(sym2(), Mode::ForwardRejection, 1, vec![3.0], 500, 4);
        let r = run_unif_experiment(&c).unwrap();
        let s = &r.runs[0].stats;
        assert_eq!(s.m_distribution, vec![1.0]);
        assert!(s.first_split_mean.is_none() && s.split_types.is_empty());
        assert!(r.reference.is_none());
        assert!(s.mean_population.value >= 1.0);
    }

    #[test]
    fn reports_are_reproducible() {
        let mut c = ExperimentConfig::new(sym2(), Mode::ForwardRejection, 2, vec![4.0, 6.0], 300, 9);
        let a = serde_json::to_string(&run_unif_experiment(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run_unif_experiment(&c).unwrap()).unwrap();
        assert_eq!(a, b);
        c.mode = Mode::Spine;
        c.theta = vec![1.0, 1.0];
        let a = serde_json::to_string(&run_spine_experiment(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run_spine_experiment(&c).unwrap()).unwrap();
        assert_eq!(a, b);
        c.seed = 10;
        let d = serde_json::to_string(&run_spine_experiment(&c).unwrap()).unwrap();
        assert_ne!(a, d);
    }

    /// k = 1, θ = 0: the weights are E[N_T]/N_T, so the self-normalized mean
    /// of N_T is E[N_T]/P(N_T ≥ 1).
    #[test]
    fn k1_reweighting_identity() {
        let model = sym2();
        let horizon = 5.0;
        let cache = SpineCache::new(&model, 1, &[0.0, 0.0], horizon).unwrap();
        let samples = sample_spine(&cache, 0, 40_000, 3, DEFAULT_CAP).unwrap();
        let n: Vec<f64> = samples.iter().map(|s| s.n_total as f64).collect();
        let w: Vec<f64> = samples.iter().map(|s| s.weight).collect();
        for (s, &wi) in samples.iter().zip(&w) {
            assert!((wi * s.n_total as f64 - 1.0).abs() < 1e-6);
        }
        let (mean, se) = stats::weighted_mean_se(&n, &w);
        let q = genfun::extinction_prob(&model, horizon).unwrap()[0];
        let expect = 1.0 / (1.0 - q);
        assert!((mean - expect).abs() < 3.0 * se, "{mean} ± {se} vs {expect}");
    }

    #[test]
    fn acceptance_abort() {
        let c = ExperimentConfig::new(geo1(), Mode::ForwardRejection, 8, vec![0.3], 10, 1);
        assert!(matches!(
            run_unif_experiment(&c),
            Err(HarnessError::AcceptanceTooLow { .. })
        ));
    }

    #[test]
    fn martingale_checks_small() {
        let mut c = ExperimentConfig::new(sym2(), Mode::Spine, 2, vec![4.0], 100_000, 21);
        c.theta = vec![1.0, 1.0];
        let r = martingale_checks(&c).unwrap();
        for check in &r.checks {
            assert!(check.passed, "{check:?}");
        }
        let mut c = ExperimentConfig::new(geo1(), Mode::Spine, 1, vec![3.0], 20_000, 2);
        c.theta = vec![0.0];
        let r = martingale_checks(&c).unwrap();
        assert!((r.factorial_moment - 1.0).abs() < 1e-9);
        assert!(r.checks[0].passed);
    }

    #[test]
    fn unif_and_spine_agree_small() {
        let mut c = ExperimentConfig::new(sym2(), Mode::ForwardRejection, 2, vec![8.0], 4000, 5);
        let a = run_unif_experiment(&c).unwrap();
        c.mode = Mode::Spine;
        c.replicates = 8000;
        let b = run_spine_experiment(&c).unwrap();
        let ea = a.runs[0].stats.first_split_mean.clone().unwrap();
        let eb = b.runs[0].stats.first_split_mean.clone().unwrap();
        assert!(combined_z(&ea, &eb) < 3.0, "{ea:?} vs {eb:?}");
        let ta = &a.runs[0].stats.split_types[0];
        let tb = &b.runs[0].stats.split_types[0];
        assert!(combined_z(ta, tb) < 3.0);
    }
}
