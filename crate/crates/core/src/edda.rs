//! Learning phase: eigenvalue-decomposition discriminant analysis on
//! fully labelled training data.
//!
//! Six covariance structures are available, all with closed-form maximum
//! likelihood estimates:
//!
//! | tag | class covariance        | free covariance parameters |
//! |-----|-------------------------|----------------------------|
//! | EII | `λ I`                   | 1                          |
//! | VII | `λ_k I`                 | K                          |
//! | EEI | `Δ` (diagonal, shared)  | P                          |
//! | VVI | `Δ_k` (diagonal)        | K·P                        |
//! | EEE | `Σ` (shared)            | P(P+1)/2                   |
//! | VVV | `Σ_k`                   | K·P(P+1)/2                 |

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DamdaError, Result};
use crate::gaussian::GaussianParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CovStructure {
    EII,
    VII,
    EEI,
    VVI,
    EEE,
    VVV,
}

impl CovStructure {
    pub const ALL: [CovStructure; 6] = [
        CovStructure::EII,
        CovStructure::VII,
        CovStructure::EEI,
        CovStructure::VVI,
        CovStructure::EEE,
        CovStructure::VVV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovStructure::EII => "EII",
            CovStructure::VII => "VII",
            CovStructure::EEI => "EEI",
            CovStructure::VVI => "VVI",
            CovStructure::EEE => "EEE",
            CovStructure::VVV => "VVV",
        }
    }

    pub fn covariance_params(self, k: usize, p: usize) -> usize {
        match self {
            CovStructure::EII => 1,
            CovStructure::VII => k,
            CovStructure::EEI => p,
            CovStructure::VVI => k * p,
            CovStructure::EEE => p * (p + 1) / 2,
            CovStructure::VVV => k * p * (p + 1) / 2,
        }
    }

    /// Mixing weights, means and covariance parameters.
    pub fn free_params(self, k: usize, p: usize) -> usize {
        (k - 1) + k * p + self.covariance_params(k, p)
    }

    fn is_diagonal(self) -> bool {
        !matches!(self, CovStructure::EEE | CovStructure::VVV)
    }
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CovStructure {
    type Err = DamdaError;

    fn from_str(s: &str) -> Result<Self> {
        CovStructure::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DamdaError::InvalidInput(format!("unknown covariance structure '{s}'")))
    }
}

/// Fitted learning-phase classifier.
#[derive(Clone, Debug)]
pub struct EddaModel {
    pub structure: CovStructure,
    pub tau: Vec<f64>,
    pub classes: Vec<GaussianParams>,
    /// Training log-likelihood. NaN for marginal sub-models.
    pub loglik: f64,
    /// Training BIC. NaN for marginal sub-models.
    pub bic: f64,
    pub variable_names: Vec<String>,
    pub class_labels: Vec<String>,
}

impl EddaModel {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn p(&self) -> usize {
        self.variable_names.len()
    }

    pub fn with_variable_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(DamdaError::DimensionMismatch {
                expected: self.p(),
                found: names.len(),
            });
        }
        self.variable_names = names;
        Ok(self)
    }

    pub fn with_class_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.k() {
            return Err(DamdaError::DimensionMismatch {
                expected: self.k(),
                found: labels.len(),
            });
        }
        self.class_labels = labels;
        Ok(self)
    }

    pub fn free_params(&self) -> usize {
        self.structure.free_params(self.k(), self.p())
    }

    /// Checks that every class covariance can be rebuilt from the canonical
    /// parameters of `self.structure` within `tol`.
    pub fn conforms_to_structure(&self, tol: f64) -> bool {
        let p = self.p();
        let first = self.classes[0].cov();
        self.classes.iter().all(|c| {
            let cov = c.cov();
            let rebuilt = match self.structure {
                CovStructure::EII => DMatrix::identity(p, p) * (first.trace() / p as f64),
                CovStructure::VII => DMatrix::identity(p, p) * (cov.trace() / p as f64),
                CovStructure::EEI => DMatrix::from_diagonal(&first.diagonal()),
                CovStructure::VVI => DMatrix::from_diagonal(&cov.diagonal()),
                CovStructure::EEE => first.clone(),
                CovStructure::VVV => cov.clone(),
            };
            (cov - rebuilt).amax() <= tol
        })
    }
}

struct ClassMoments {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

/// Rows of each class sorted lexicographically so every reduction runs in
/// a canonical order, making the fit independent of the input row order.
fn class_moments(x: &DMatrix<f64>, labels: &[usize], k: usize) -> Vec<ClassMoments> {
    let p = x.ncols();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        rows[l].push(i);
    }
    rows.into_iter()
        .map(|mut idx| {
            idx.sort_by(|&a, &b| {
                (0..p)
                    .map(|j| x[(a, j)].total_cmp(&x[(b, j)]))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            });
            let n = idx.len();
            let mut mean = DVector::zeros(p);
            for &i in &idx {
                for j in 0..p {
                    mean[j] += x[(i, j)];
                }
            }
            mean /= n as f64;
            let mut scatter = DMatrix::zeros(p, p);
            for &i in &idx {
                let d = x.row(i).transpose() - &mean;
                scatter += &d * d.transpose();
            }
            ClassMoments { n, mean, scatter }
        })
        .collect()
}

fn fitted_covariances(
    structure: CovStructure,
    moments: &[ClassMoments],
    floors: &[f64],
) -> Vec<DMatrix<f64>> {
    let p = floors.len();
    let m: usize = moments.iter().map(|c| c.n).sum();
    let pooled = moments
        .iter()
        .fold(DMatrix::zeros(p, p), |acc, c| acc + &c.scatter);
    let max_floor = floors.iter().cloned().fold(0.0, f64::max);
    let floor_diag = |d: DVector<f64>| {
        DMatrix::from_diagonal(&DVector::from_fn(p, |j, _| d[j].max(floors[j])))
    };
    let floor_full = |mut s: DMatrix<f64>| {
        for j in 0..p {
            s[(j, j)] = s[(j, j)].max(floors[j]);
        }
        s
    };
    match structure {
        CovStructure::EII => {
            let lambda = (pooled.trace() / (m * p) as f64).max(max_floor);
            vec![DMatrix::identity(p, p) * lambda; moments.len()]
        }
        CovStructure::VII => moments
            .iter()
            .map(|c| {
                let lambda = (c.scatter.trace() / (c.n * p) as f64).max(max_floor);
                DMatrix::identity(p, p) * lambda
            })
            .collect(),
        CovStructure::EEI => {
            vec![floor_diag(pooled.diagonal() / m as f64); moments.len()]
        }
        CovStructure::VVI => moments
            .iter()
            .map(|c| floor_diag(c.scatter.diagonal() / c.n as f64))
            .collect(),
        CovStructure::EEE => vec![floor_full(pooled / m as f64); moments.len()],
        CovStructure::VVV => moments
            .iter()
            .map(|c| floor_full(&c.scatter / c.n as f64))
            .collect(),
    }
}

fn training_loglik(x: &DMatrix<f64>, labels: &[usize], tau: &[f64], classes: &[GaussianParams]) -> Result<f64> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut total = 0.0;
    for (k, idx) in by_class.iter().enumerate() {
        let sub = x.select_rows(idx.iter());
        let dens = classes[k].log_density_rows(&sub)?;
        let mut sorted = dens;
        sorted.sort_by(f64::total_cmp);
        total += sorted.iter().sum::<f64>() + idx.len() as f64 * tau[k].ln();
    }
    Ok(total)
}

/// Fits every requested structure and returns the one with the largest
/// `BIC = 2·loglik − η·log M`. Ties go to the structure with fewer
/// parameters.
///
/// `labels[i]` is the class index (`0..K`) of row `i`. Variable names default
/// to `x1..xP` and class labels to `1..K`.
pub fn fit_edda(x: &DMatrix<f64>, labels: &[usize], structures: &[CovStructure]) -> Result<EddaModel> {
    let (m, p) = x.shape();
    if labels.len() != m {
        return Err(DamdaError::DimensionMismatch {
            expected: m,
            found: labels.len(),
        });
    }
    if p == 0 {
        return Err(DamdaError::InvalidInput("training data has no variables".into()));
    }
    if structures.is_empty() {
        return Err(DamdaError::InvalidInput("no covariance structure requested".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DamdaError::InvalidInput("training data contains non-finite values".into()));
    }
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(DamdaError::DegenerateClass { class, count });
    }

    let moments = class_moments(x, labels, k);
    let tau: Vec<f64> = counts.iter().map(|&c| c as f64 / m as f64).collect();
    let floors: Vec<f64> = (0..p)
        .map(|j| {
            let col = x.column(j);
            let range = col.max() - col.min();
            1e-8 * range * range
        })
        .collect();

    let mut best: Option<EddaModel> = None;
    let mut failures = Vec::new();
    let mut menu = structures.to_vec();
    menu.sort();
    menu.dedup();
    for structure in menu {
        let fitted = fitted_covariances(structure, &moments, &floors)
            .into_iter()
            .zip(&moments)
            .map(|(cov, c)| GaussianParams::new(c.mean.clone(), cov))
            .collect::<Result<Vec<_>>>();
        let classes = match fitted {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("{structure}: {e}"));
                continue;
            }
        };
        let loglik = training_loglik(x, labels, &tau, &classes)?;
        let eta = structure.free_params(k, p);
        let bic = 2.0 * loglik - eta as f64 * (m as f64).ln();
        log::debug!("edda {structure}: loglik={loglik:.4} bic={bic:.4} params={eta}");
        let better = match &best {
            None => true,
            Some(b) => bic > b.bic || (bic == b.bic && eta < b.free_params()),
        };
        if better {
            best = Some(EddaModel {
                structure,
                tau: tau.clone(),
                classes,
                loglik,
                bic,
                variable_names: (1..=p).map(|j| format!("x{j}")).collect(),
                class_labels: (1..=k).map(|c| c.to_string()).collect(),
            });
        }
    }
    best.ok_or_else(|| DamdaError::AllStructuresSingular(failures.join("; ")))
}

fn normalize_log_weights(logw: &mut [f64]) -> f64 {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logw.iter().map(|v| (v - max).exp()).sum();
    for v in logw.iter_mut() {
        *v = (*v - max).exp() / sum;
    }
    max + sum.ln()
}

/// Posterior class probabilities of one observation (MAP rule input).
pub fn predict_map(model: &EddaModel, y: &DVector<f64>) -> Result<Vec<f64>> {
    let mut logw = model
        .classes
        .iter()
        .zip(&model.tau)
        .map(|(c, &t)| Ok(t.ln() + c.log_density(y)?))
        .collect::<Result<Vec<f64>>>()?;
    normalize_log_weights(&mut logw);
    Ok(logw)
}

/// Restricts the model to the variables in `keep` (in the given order).
/// Learned parameters are not refitted: the marginal of a Gaussian is its
/// sub-blocks.
pub fn marginal_submodel(model: &EddaModel, keep: &[usize]) -> Result<EddaModel> {
    if keep.is_empty() {
        return Err(DamdaError::InvalidInput("cannot marginalize onto an empty variable set".into()));
    }
    let classes = model
        .classes
        .iter()
        .map(|c| c.marginal(keep))
        .collect::<Result<Vec<_>>>()?;
    let structure = if model.structure.is_diagonal() {
        model.structure
    } else {
        CovStructure::VVV
    };
    Ok(EddaModel {
        structure,
        tau: model.tau.clone(),
        classes,
        loglik: f64::NAN,
        bic: f64::NAN,
        variable_names: keep.iter().map(|&j| model.variable_names[j].clone()).collect(),
        class_labels: model.class_labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_data() -> (DMatrix<f64>, Vec<usize>) {
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[
                0.0, 0.1, 1.0, -0.4, -0.5, 0.7, 0.3, 0.2, //
                5.0, 5.5, 6.1, 4.2, 4.4, 5.9, 5.3, 4.8,
            ],
        );
        (x, vec![0, 0, 0, 0, 1, 1, 1, 1])
    }

    #[test]
    fn means_are_class_sample_means_for_every_structure() {
        let (x, labels) = two_class_data();
        for s in CovStructure::ALL {
            let m = fit_edda(&x, &labels, &[s]).unwrap();
            assert_eq!(m.structure, s);
            for (k, rows) in [(0usize, 0..4usize), (1, 4..8)] {
                for j in 0..2 {
                    let mean = rows.clone().map(|i| x[(i, j)]).sum::<f64>() / 4.0;
                    assert_close!(m.classes[k].mean()[j], mean, 1e-12);
                }
            }
            assert!(m.conforms_to_structure(1e-8), "{s}");
        }
    }

    #[test]
    fn spherical_lambda_maximizes_likelihood() {
        // 10 points in 2-D
        let pts = [
            [0.3, -1.2],
            [1.1, 0.4],
            [-0.7, 0.9],
            [2.2, 1.5],
            [0.0, 0.0],
            [-1.4, -0.3],
            [0.8, -0.6],
            [1.9, 2.1],
            [-0.2, 1.3],
            [0.5, -2.0],
        ];
        let x = DMatrix::from_fn(10, 2, |i, j| pts[i][j]);
        let m = fit_edda(&x, &[0; 10], &[CovStructure::EII]).unwrap();
        let lambda = m.classes[0].cov()[(0, 0)];
        // independent likelihood evaluation over a grid of λ
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / 10.0,
            pts.iter().map(|p| p[1]).sum::<f64>() / 10.0,
        ];
        let ss: f64 = pts
            .iter()
            .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
            .sum();
        let ll = |l: f64| -10.0 * (2.0 * std::f64::consts::PI * l).ln() - ss / (2.0 * l);
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut l = 0.01;
        while l < 10.0 {
            if ll(l) > best.0 {
                best = (ll(l), l);
            }
            l += 1e-5;
        }
        assert_close!(lambda, best.1, 2e-5);
        assert_close!(lambda, ss / 20.0, 1e-12);
        assert_close!(m.loglik, ll(lambda), 1e-9);
    }

    #[test]
    fn vvv_is_weighted_scatter() {
        let (x, labels) = two_class_data();
        let m = fit_edda(&x, &labels, &[CovStructure::VVV]).unwrap();
        for (k, rows) in [(0usize, 0..4usize), (1, 4..8)] {
            let n = rows.len() as f64;
            let mu: Vec<f64> = (0..2)
                .map(|j| rows.clone().map(|i| x[(i, j)]).sum::<f64>() / n)
                .collect();
            for a in 0..2 {
                for b in 0..2 {
                    let s = rows
                        .clone()
                        .map(|i| (x[(i, a)] - mu[a]) * (x[(i, b)] - mu[b]))
                        .sum::<f64>()
                        / n;
                    assert_close!(m.classes[k].cov()[(a, b)], s, 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_class_is_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert!(matches!(
            fit_edda(&x, &[0, 0, 1], &CovStructure::ALL),
            Err(DamdaError::DegenerateClass { class: 1, count: 1 })
        ));
    }

    #[test]
    fn bic_parameter_counts() {
        assert_eq!(CovStructure::EII.free_params(2, 2), 6);
        assert_eq!(CovStructure::VVV.free_params(2, 2), 11);
    }

    #[test]
    fn structure_names_round_trip() {
        for s in CovStructure::ALL {
            assert_eq!(s.name().parse::<CovStructure>().unwrap(), s);
        }
        assert!("XYZ".parse::<CovStructure>().is_err());
    }

    #[test]
    fn predict_map_symmetric_and_single_class() {
        let (x, labels) = two_class_data();
        let m = fit_edda(&x, &labels, &[CovStructure::EII]).unwrap();
        let one = fit_edda(&x.rows(0, 4).into_owned(), &[0; 4], &[CovStructure::VVV]).unwrap();
        assert_eq!(predict_map(&one, &DVector::from_vec(vec![3.0, 3.0])).unwrap(), vec![1.0]);
        let mut sym = m.clone();
        let a = DVector::from_vec(vec![1.0, 1.0]);
        let cov = DMatrix::identity(2, 2);
        sym.classes = vec![
            GaussianParams::new(-&a, cov.clone()).unwrap(),
            GaussianParams::new(a, cov).unwrap(),
        ];
        sym.tau = vec![0.5, 0.5];
        let post = predict_map(&sym, &DVector::zeros(2)).unwrap();
        assert_close!(post[0], 0.5, 1e-15);
        assert_close!(post[1], 0.5, 1e-15);
    }

    #[test]
    fn predict_map_scalar_oracle() {
        let x = DMatrix::from_row_slice(4, 1, &[-1.0, 1.0, 3.0, 5.0]);
        let mut m = fit_edda(&x, &[0, 0, 1, 1], &[CovStructure::VII]).unwrap();
        m.classes = vec![
            GaussianParams::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap(),
            GaussianParams::new(DVector::from_element(1, 4.0), DMatrix::identity(1, 1)).unwrap(),
        ];
        m.tau = vec![0.5, 0.5];
        let post = predict_map(&m, &DVector::from_element(1, 1.0)).unwrap();
        let f = |mu: f64| (-(1.0f64 - mu).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = f(0.0) / (f(0.0) + f(4.0));
        assert_close!(post[0], expected, 1e-14);
        assert_close!(post[1], 1.0 - expected, 1e-14);
        assert!(predict_map(&m, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn marginal_submodel_behaviour() {
        let x = DMatrix::from_row_slice(
            10,
            3,
            &[
                0.0, 1.0, 2.0, 1.0, 0.5, 2.5, 2.0, 2.5, 1.0, 0.3, 1.7, 1.4, 1.2, 0.1, 0.6, //
                0.5, 0.2, 3.0, 1.5, 1.9, 2.2, 0.7, 1.1, 0.1, 2.4, 0.9, 1.3, 0.2, 2.6, 0.8,
            ],
        );
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let full = fit_edda(&x, &labels, &[CovStructure::VVV]).unwrap();
        let same = marginal_submodel(&full, &[0, 1, 2]).unwrap();
        for k in 0..2 {
            assert_eq!(same.classes[k].cov(), full.classes[k].cov());
            assert_eq!(same.classes[k].mean(), full.classes[k].mean());
        }
        let sub = marginal_submodel(&full, &[0, 2]).unwrap();
        assert_eq!(sub.structure, CovStructure::VVV);
        assert_eq!(sub.variable_names, vec!["x1", "x3"]);
        for k in 0..2 {
            let c = full.classes[k].cov();
            for (a, &ia) in [0usize, 2].iter().enumerate() {
                for (b, &ib) in [0usize, 2].iter().enumerate() {
                    assert_eq!(sub.classes[k].cov()[(a, b)], c[(ia, ib)]);
                }
            }
        }
        let eii = fit_edda(&x, &labels, &[CovStructure::EII]).unwrap();
        let sub = marginal_submodel(&eii, &[1]).unwrap();
        assert_eq!(sub.structure, CovStructure::EII);
        assert_eq!(sub.classes[0].cov()[(0, 0)], eii.classes[0].cov()[(0, 0)]);
        assert!(marginal_submodel(&eii, &[]).is_err());
        let eee = fit_edda(&x, &labels, &[CovStructure::EEE]).unwrap();
        assert_eq!(marginal_submodel(&eee, &[0, 1]).unwrap().structure, CovStructure::VVV);
    }

    #[test]
    fn constant_column_is_floored() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 1.0, 5.0, 0.0, 6.0, 2.0]);
        let m = fit_edda(&x, &[0, 0, 1, 1], &[CovStructure::VVI]).unwrap();
        // class 0 has zero variance in column 1; floor = 1e-8 · 2²
        assert_close!(m.classes[0].cov()[(1, 1)], 4e-8, 1e-20);
    }
}
