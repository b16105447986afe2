//! Goodness-of-fit statistics and small summaries used by the experiments.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Kolmogorov distance sup_x |F_n(x) − F(x)| of a sample from a continuous CDF.
pub fn ks_statistic<F: FnMut(f64) -> f64>(samples: &[f64], mut cdf: F) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (j, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((j + 1) as f64 / n - f).max(f - j as f64 / n);
    }
    d
}

/// Kolmogorov distance between a weighted empirical CDF and a continuous CDF.
pub fn ks_statistic_weighted<F: FnMut(f64) -> f64>(samples: &[f64], w: &[f64], mut cdf: F) -> f64 {
    let pts = weighted_ecdf_points(samples, w);
    let mut below = 0.0;
    let mut d: f64 = 0.0;
    let mut j = 0;
    while j < pts.len() {
        let x = pts[j].0;
        let mut mass = 0.0;
        while j < pts.len() && pts[j].0 == x {
            mass += pts[j].1;
            j += 1;
        }
        let f = cdf(x);
        d = d.max((below + mass - f).abs()).max((f - below).abs());
        below += mass;
    }
    d
}

/// Asymptotic p-value of the Kolmogorov distance `d` for effective sample
/// size `n`, with Stephens' finite-sample correction.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    if n <= 0.0 {
        return 1.0;
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = 2.0 * (-2.0 * jf * jf * lambda * lambda).exp();
        p += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

fn weighted_ecdf_points(x: &[f64], w: &[f64]) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let total: f64 = w.iter().sum();
    idx.into_iter().map(|i| (x[i], w[i] / total)).collect()
}

/// Kish effective sample size (Σw)²/Σw².
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Two-sample Kolmogorov-Smirnov test between weighted samples; the
/// p-value uses the effective sizes of both samples. Returns (D, p).
pub fn ks_two_sample_weighted(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> (f64, f64) {
    let pa = weighted_ecdf_points(a, wa);
    let pb = weighted_ecdf_points(b, wb);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut d: f64 = 0.0;
    while i < pa.len() || j < pb.len() {
        let x = match (pa.get(i), pb.get(j)) {
            (Some(u), Some(v)) => u.0.min(v.0),
            (Some(u), None) => u.0,
            (None, Some(v)) => v.0,
            (None, None) => break,
        };
        while i < pa.len() && pa[i].0 <= x {
            fa += pa[i].1;
            i += 1;
        }
        while j < pb.len() && pb[j].0 <= x {
            fb += pb[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    let na = effective_sample_size(wa);
    let nb = effective_sample_size(wb);
    let ne = na * nb / (na + nb);
    (d, ks_pvalue(d, ne))
}

/// Unweighted two-sample Kolmogorov-Smirnov test. Returns (D, p).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    ks_two_sample_weighted(a, &vec![1.0; a.len()], b, &vec![1.0; b.len()])
}

/// Pearson chi-square of observed counts against expected counts. Cells
/// with expected count below 5 are pooled into one cell. Returns
/// (statistic, degrees of freedom, p-value).
pub fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, usize, f64) {
    assert_eq!(observed.len(), expected.len());
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e < 5.0 {
            pooled.0 += o;
            pooled.1 += e;
        } else {
            cells.push((o, e));
        }
    }
    if pooled.1 > 0.0 {
        cells.push(pooled);
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let df = cells.len().saturating_sub(1);
    if df == 0 {
        return (stat, 0, 1.0);
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    (stat, df, 1.0 - dist.cdf(stat))
}

/// Sample mean and its standard error.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, f64::NAN);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Self-normalized estimate Σw x/Σw and its delta-method standard error.
pub fn weighted_mean_se(x: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let n = x.len() as f64;
    let wbar = sw / n;
    let var = x
        .iter()
        .zip(w)
        .map(|(a, b)| {
            let r = b * (a - mean) / wbar;
            r * r
        })
        .sum::<f64>()
        / (n * (n - 1.0).max(1.0));
    (mean, var.sqrt())
}

/// Bin masses of a weighted sample over `bins` equal cells of [lo, hi],
/// normalized to sum 1. Values at `hi` fall in the last cell.
pub fn histogram(x: &[f64], w: Option<&[f64]>, bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for (j, &v) in x.iter().enumerate() {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        h[b] += w.map_or(1.0, |w| w[j]);
    }
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter_mut().for_each(|v| *v /= s);
    }
    h
}
