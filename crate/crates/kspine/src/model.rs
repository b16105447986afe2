//! Offspring models and their spectral constants.
//!
//! A model has `d` types. An individual of type `i` lives an exponential
//! time with rate `alpha[i]` and is then replaced by a random offspring
//! vector `ell` drawn from a finite table. Types are 0-based in the API and
//! 1-based in every text output.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const EIGEN_TOL: f64 = 1e-12;
pub const EIGEN_MAX_ITER: usize = 100_000;
pub const CRITICAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model document does not parse: {0}")]
    Parse(String),
    #[error("model must have at least one type")]
    NoTypes,
    #[error("{what}: expected length {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("branching rate of type {ty} is {value}, must be positive")]
    NonPositiveRate { ty: usize, value: f64 },
    #[error("offspring table of type {ty} is empty")]
    EmptyTable { ty: usize },
    #[error("negative probability {p} in offspring table of type {ty}")]
    NegativeProbability { ty: usize, p: f64 },
    #[error("probabilities do not sum to 1 for type {ty} (sum = {sum})")]
    NotNormalized { ty: usize, sum: f64 },
    #[error(
        "simple process: every outcome has exactly one child, so no branching ever occurs; \
         at least one outcome with total offspring other than 1 is required"
    )]
    Simple,
    #[error("mean matrix is reducible")]
    Reducible,
    #[error("eigen-solver did not converge within {0} iterations")]
    NoConvergence(usize),
}

/// One row of an offspring table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub ell: Vec<u32>,
    pub p: f64,
}

impl Outcome {
    pub fn total(&self) -> u32 {
        self.ell.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    d: usize,
    alpha: Vec<f64>,
    offspring: Vec<TableDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffspringModel {
    pub d: usize,
    pub alpha: Vec<f64>,
    pub offspring: Vec<Vec<Outcome>>,
}

impl OffspringModel {
    /// Builds and validates a model.
    pub fn new(
        d: usize,
        alpha: Vec<f64>,
        offspring: Vec<Vec<Outcome>>,
    ) -> Result<Self, ModelError> {
        let model = OffspringModel {
            d,
            alpha,
            offspring,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let d = self.d;
        if d == 0 {
            return Err(ModelError::NoTypes);
        }
        check_len("alpha", d, self.alpha.len())?;
        check_len("offspring", d, self.offspring.len())?;
        for (ty, &a) in self.alpha.iter().enumerate() {
            if !(a > 0.0) || !a.is_finite() {
                return Err(ModelError::NonPositiveRate { ty, value: a });
            }
        }
        let mut simple = true;
        for (ty, table) in self.offspring.iter().enumerate() {
            if table.is_empty() {
                return Err(ModelError::EmptyTable { ty });
            }
            let mut sum = 0.0;
            for o in table {
                check_len(&format!("ell in table of type {}", ty + 1), d, o.ell.len())?;
                if o.p < 0.0 || !o.p.is_finite() {
                    return Err(ModelError::NegativeProbability { ty, p: o.p });
                }
                sum += o.p;
                if o.p > 0.0 && o.total() != 1 {
                    simple = false;
                }
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(ModelError::NotNormalized { ty, sum });
            }
        }
        if simple {
            return Err(ModelError::Simple);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            d: self.d,
            alpha: self.alpha.clone(),
            offspring: self
                .offspring
                .iter()
                .map(|t| TableDoc { outcomes: t.clone() })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    /// Offspring generating function f_i(s) = Σ_ℓ p_i(ℓ) s^ℓ.
    pub fn pgf(&self, i: usize, s: &[f64]) -> f64 {
        self.offspring[i]
            .iter()
            .map(|o| o.p * monomial(&o.ell, s))
            .sum()
    }

    /// Largest total offspring count over all tables.
    pub fn max_children(&self) -> u32 {
        self.offspring
            .iter()
            .flat_map(|t| t.iter().map(Outcome::total))
            .max()
            .unwrap_or(0)
    }
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected != found {
        return Err(ModelError::Dimension {
            what: what.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

/// s^ℓ = ∏_m s_m^{ℓ_m}.
pub fn monomial(ell: &[u32], s: &[f64]) -> f64 {
    ell.iter()
        .zip(s)
        .map(|(&l, &x)| x.powi(l as i32))
        .product()
}

pub fn load_model(document: &str) -> Result<OffspringModel, ModelError> {
    let doc: ModelDoc =
        serde_json::from_str(document).map_err(|e| ModelError::Parse(e.to_string()))?;
    OffspringModel::new(
        doc.d,
        doc.alpha,
        doc.offspring.into_iter().map(|t| t.outcomes).collect(),
    )
}

/// M[i][j] = Σ_ℓ ℓ_j p_i(ℓ).
pub fn mean_matrix(model: &OffspringModel) -> Vec<Vec<f64>> {
    let d = model.d;
    let mut m = vec![vec![0.0; d]; d];
    for (i, table) in model.offspring.iter().enumerate() {
        for o in table {
            for j in 0..d {
                m[i][j] += o.ell[j] as f64 * o.p;
            }
        }
    }
    m
}

/// Strong connectivity of the graph with an edge i → j whenever M[i][j] > 0.
pub fn is_irreducible(m: &[Vec<f64>]) -> bool {
    let d = m.len();
    if d == 0 {
        return false;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; d];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..d {
                let w = if forward { m[u][v] } else { m[v][u] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralData {
    pub m: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub rho: f64,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub zeta: f64,
    pub zeta_i: Vec<f64>,
    /// Set when |ρ| exceeds the criticality tolerance.
    pub non_critical: bool,
}

impl SpectralData {
    pub fn d(&self) -> usize {
        self.xi.len()
    }

    pub fn eta_dot(&self, v: &[f64]) -> f64 {
        dot(&self.eta, v)
    }

    pub fn eta_sum(&self) -> f64 {
        self.eta.iter().sum()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn spectral(model: &OffspringModel) -> Result<SpectralData, ModelError> {
    let d = model.d;
    let m = mean_matrix(model);
    if !is_irreducible(&m) {
        return Err(ModelError::Reducible);
    }
    let c: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| model.alpha[i] * (m[i][j] - if i == j { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let cm = DMatrix::from_fn(d, d, |i, j| c[i][j]);
    let mut xi = perron_vector(&cm)?;
    let mut eta = perron_vector(&cm.transpose())?;
    let s: f64 = xi.iter().sum();
    xi.iter_mut().for_each(|x| *x /= s);
    let s = dot(&eta, &xi);
    eta.iter_mut().for_each(|x| *x /= s);
    let cxi: Vec<f64> = (0..d).map(|i| dot(&c[i], &xi)).collect();
    let rho = dot(&eta, &cxi) / dot(&eta, &xi);
    let (zeta, zeta_i) = zeta(model, &xi, &eta);
    Ok(SpectralData {
        m,
        c,
        rho,
        xi,
        eta,
        zeta,
        zeta_i,
        non_critical: rho.abs() > CRITICAL_TOL,
    })
}

/// Positive eigenvector of the eigenvalue with maximal real part of an
/// essentially non-negative irreducible matrix, normalized to sum 1.
///
/// Inverse power iteration on σI − A with σ just above the Gershgorin bound
/// on the real parts of the spectrum.
fn perron_vector(a: &DMatrix<f64>) -> Result<Vec<f64>, ModelError> {
    let d = a.nrows();
    if d == 1 {
        return Ok(vec![1.0]);
    }
    let bound = (0..d)
        .map(|i| a[(i, i)] + (0..d).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| a[(i, j)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let sigma = bound + 1e-3 * scale;
    let shifted = DMatrix::from_fn(d, d, |i, j| if i == j { sigma } else { 0.0 }) - a;
    let lu = shifted.lu();
    let mut v = nalgebra::DVector::from_element(d, 1.0 / d as f64);
    for _ in 0..EIGEN_MAX_ITER {
        let mut w = lu.solve(&v).ok_or(ModelError::NoConvergence(0))?;
        let s: f64 = w.iter().sum();
        w /= s;
        let diff = (&w - &v).amax();
        v = w;
        if diff < EIGEN_TOL {
            return Ok(v.iter().copied().collect());
        }
    }
    Err(ModelError::NoConvergence(EIGEN_MAX_ITER))
}

/// ζ from the second derivatives of the offspring generating functions, and
/// the per-type split ζ_i = α_i η_i E_i[w(L)].
pub fn zeta(model: &OffspringModel, xi: &[f64], eta: &[f64]) -> (f64, Vec<f64>) {
    let d = model.d;
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            for l in 0..d {
                let second: f64 = model.offspring[i]
                    .iter()
                    .map(|o| {
                        let lj = o.ell[j] as f64;
                        let ll = o.ell[l] as f64 - if j == l { 1.0 } else { 0.0 };
                        o.p * lj * ll
                    })
                    .sum();
                total += model.alpha[i] * second * eta[i] * xi[j] * xi[l];
            }
        }
    }
    let per_type = (0..d)
        .map(|i| {
            let ew: f64 = model.offspring[i]
                .iter()
                .map(|o| o.p * w_weight(&o.ell, xi))
                .sum();
            model.alpha[i] * eta[i] * ew
        })
        .collect();
    (total, per_type)
}

/// w(ℓ) = Σ_{m,n} ℓ_m (ℓ_n − δ_mn) ξ_m ξ_n over ordered pairs.
pub fn w_weight(ell: &[u32], xi: &[f64]) -> f64 {
    let mut w = 0.0;
    for (m, &lm) in ell.iter().enumerate() {
        for (n, &ln) in ell.iter().enumerate() {
            let ln = ln as f64 - if m == n { 1.0 } else { 0.0 };
            w += lm as f64 * ln * xi[m] * xi[n];
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sym2() -> OffspringModel {
        load_model(include_str!("../../../models/sym2.json")).unwrap()
    }

    fn geo1() -> OffspringModel {
        load_model(include_str!("../../../models/geo1.json")).unwrap()
    }

    #[test]
    fn mean_matrices() {
        assert_eq!(mean_matrix(&sym2()), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(mean_matrix(&geo1()), vec![vec![1.0]]);
        let dead = OffspringModel {
            d: 2,
            alpha: vec![1.0, 1.0],
            offspring: vec![
                vec![Outcome { ell: vec![0, 0], p: 1.0 }],
                vec![Outcome { ell: vec![0, 0], p: 1.0 }],
            ],
        };
        assert_eq!(mean_matrix(&dead), vec![vec![0.0; 2]; 2]);
    }

    #[test]
    fn irreducibility() {
        assert!(is_irreducible(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        assert!(!is_irreducible(&[vec![1.0, 0.0], vec![1.0, 1.0]]));
        assert!(is_irreducible(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
    }

    #[test]
    fn reference_spectra() {
        let s = spectral(&sym2()).unwrap();
        assert!(s.rho.abs() < 1e-10);
        assert!((s.xi[0] - 0.5).abs() < 1e-12 && (s.xi[1] - 0.5).abs() < 1e-12);
        assert!((s.eta[0] - 1.0).abs() < 1e-12 && (s.eta[1] - 1.0).abs() < 1e-12);
        assert!((s.zeta - 0.5).abs() < 1e-14);
        assert!((s.zeta_i[0] - 0.25).abs() < 1e-14);
        assert!(!s.non_critical);
        let g = spectral(&geo1()).unwrap();
        assert_eq!(g.xi, vec![1.0]);
        assert!((g.eta[0] - 1.0).abs() < 1e-15);
        assert!((g.zeta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rate_scaling_keeps_criticality() {
        let mut m = sym2();
        m.alpha = vec![2.0, 2.0];
        let s = spectral(&m).unwrap();
        assert!(s.rho.abs() < 1e-10);
        assert!((s.zeta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w_values() {
        assert!((w_weight(&[1, 1], &[0.5, 0.5]) - 0.5).abs() < 1e-15);
        assert!((w_weight(&[2, 0], &[0.5, 0.5]) - 0.5).abs() < 1e-15);
        assert_eq!(w_weight(&[1, 0], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn rejects_bad_documents() {
        let bad = r#"{"d":1,"alpha":[1.0],"offspring":[{"outcomes":[{"ell":[0],"p":0.4},{"ell":[2],"p":0.5}]}]}"#;
        let err = load_model(bad).unwrap_err();
        assert!(err.to_string().contains("probabilities do not sum to 1"));
        let simple = r#"{"d":1,"alpha":[1.0],"offspring":[{"outcomes":[{"ell":[1],"p":1.0}]}]}"#;
        assert!(matches!(load_model(simple), Err(ModelError::Simple)));
        let neg_rate = r#"{"d":1,"alpha":[0.0],"offspring":[{"outcomes":[{"ell":[0],"p":0.5},{"ell":[2],"p":0.5}]}]}"#;
        assert!(matches!(load_model(neg_rate), Err(ModelError::NonPositiveRate { .. })));
        let empty = r#"{"d":1,"alpha":[1.0],"offspring":[{"outcomes":[]}]}"#;
        assert!(matches!(load_model(empty), Err(ModelError::EmptyTable { .. })));
        let negp = r#"{"d":1,"alpha":[1.0],"offspring":[{"outcomes":[{"ell":[0],"p":-0.5},{"ell":[2],"p":1.5}]}]}"#;
        assert!(matches!(load_model(negp), Err(ModelError::NegativeProbability { .. })));
        let extra = r#"{"d":1,"alpha":[1.0],"offspring":[{"outcomes":[{"ell":[0],"p":0.5},{"ell":[2],"p":0.5}]}],"x":1}"#;
        assert!(matches!(load_model(extra), Err(ModelError::Parse(_))));
        let short = r#"{"d":2,"alpha":[1.0,1.0],"offspring":[{"outcomes":[{"ell":[0],"p":1.0}]},{"outcomes":[{"ell":[0,2],"p":1.0}]}]}"#;
        assert!(matches!(load_model(short), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn reducible_model_is_refused() {
        let m = OffspringModel::new(
            2,
            vec![1.0, 1.0],
            vec![
                vec![Outcome { ell: vec![0, 0], p: 0.5 }, Outcome { ell: vec![2, 0], p: 0.5 }],
                vec![Outcome { ell: vec![1, 0], p: 0.5 }, Outcome { ell: vec![1, 1], p: 0.5 }],
            ],
        )
        .unwrap();
        assert!(matches!(spectral(&m), Err(ModelError::Reducible)));
    }
}
