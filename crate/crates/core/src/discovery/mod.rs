//! Discovery phase: EM over unlabelled test data with the learned
//! parameters held fixed.
//!
//! Columns of the test matrix are laid out as `[trained (P) | test-only (Q)]`
//! with the first `P` columns in the order of the learned model. Mixture
//! components are indexed `0..K` for the known classes followed by `K..K+H`
//! for the hidden ones.

mod em;
mod init;
mod mstep;

use nalgebra::{DMatrix, DVector};

use crate::error::{DamdaError, Result};
use crate::gaussian::{assemble_cov, GaussianParams, PartitionedCov};

pub use em::{
    bic_h, discovery_parameter_count, e_step, log_likelihood, run_em, run_em_observed,
    run_em_with_tree, initial_trees, select_h, select_h_with_trees, EmConfig, EmSnapshot, HFit, HSelection,
};
pub use init::{initialize, initialize_with_tree};
pub use mstep::{
    inductive_conditional_update, m_step_hidden, m_step_mixing, regularize_scatter,
    weighted_scatter, ConditionalEstimate, Regularizer, ScatterPartition, WeightedScatter,
};

/// A class seen during training, extended to the test-only variables.
#[derive(Clone, Debug)]
pub struct KnownClass {
    /// Learned parameters on the `P` trained variables. Never re-estimated.
    pub fixed: GaussianParams,
    pub aug_mean: DVector<f64>,
    pub aug_cov: PartitionedCov,
    joint: GaussianParams,
}

impl KnownClass {
    pub fn new(
        fixed: GaussianParams,
        aug_mean: DVector<f64>,
        cross: DMatrix<f64>,
        new_cov: DMatrix<f64>,
    ) -> Result<Self> {
        if aug_mean.len() != new_cov.nrows() {
            return Err(DamdaError::DimensionMismatch {
                expected: new_cov.nrows(),
                found: aug_mean.len(),
            });
        }
        let aug_cov = PartitionedCov::new(fixed.cov().clone(), cross, new_cov)?;
        let cov = assemble_cov(&aug_cov)?;
        let p = fixed.dim();
        let q = aug_mean.len();
        let mut mean = DVector::zeros(p + q);
        mean.rows_mut(0, p).copy_from(fixed.mean());
        mean.rows_mut(p, q).copy_from(&aug_mean);
        let joint = GaussianParams::new(mean, cov)?;
        Ok(Self {
            fixed,
            aug_mean,
            aug_cov,
            joint,
        })
    }

    /// Known class with no test-only variables.
    pub fn unaugmented(fixed: GaussianParams) -> Result<Self> {
        let p = fixed.dim();
        Self::new(fixed, DVector::zeros(0), DMatrix::zeros(p, 0), DMatrix::zeros(0, 0))
    }

    /// Distribution over all `R = P + Q` variables.
    pub fn joint(&self) -> &GaussianParams {
        &self.joint
    }
}

/// Posterior membership probabilities, `N × (K+H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    t: DMatrix<f64>,
}

impl Responsibilities {
    /// Rows must be probability vectors (within 1e-12).
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        for (i, row) in t.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DamdaError::InvalidInput(format!(
                    "row {i} of the responsibilities is not a probability vector"
                )));
            }
        }
        Ok(Self { t })
    }

    pub(crate) fn from_normalized(t: DMatrix<f64>) -> Self {
        Self { t }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn n(&self) -> usize {
        self.t.nrows()
    }

    pub fn components(&self) -> usize {
        self.t.ncols()
    }

    /// Effective component sizes `N_c = Σ_i t_ic`.
    pub fn sizes(&self) -> Vec<f64> {
        self.t.column_iter().map(|c| c.sum()).collect()
    }

    /// MAP component per row; ties resolve to the lowest index.
    pub fn map_labels(&self) -> Vec<usize> {
        self.t
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Scatter matrix regularization applied during a fit.
#[derive(Clone, Debug)]
pub struct RegularizationRecord {
    pub iteration: usize,
    pub component: usize,
    pub raw: DMatrix<f64>,
    pub regularized: DMatrix<f64>,
}

/// Discovery-phase model over `R = P + Q` variables.
#[derive(Clone, Debug)]
pub struct DamdaModel {
    pub tau: Vec<f64>,
    pub known: Vec<KnownClass>,
    pub hidden: Vec<GaussianParams>,
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub bic: f64,
    /// Number of test observations the model was fitted on.
    pub n: usize,
    pub responsibilities: Option<Responsibilities>,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the fit restarted after a component collapsed.
    pub restarted: bool,
    pub regularizations: Vec<RegularizationRecord>,
}

impl DamdaModel {
    /// Unfitted model assembled from parts; `loglik` and `bic` are NaN.
    pub fn from_parts(known: Vec<KnownClass>, hidden: Vec<GaussianParams>, tau: Vec<f64>) -> Result<Self> {
        let c = known.len() + hidden.len();
        if c == 0 {
            return Err(DamdaError::InvalidInput("model has no components".into()));
        }
        if tau.len() != c {
            return Err(DamdaError::DimensionMismatch {
                expected: c,
                found: tau.len(),
            });
        }
        let r = known
            .first()
            .map(|k| k.joint().dim())
            .unwrap_or_else(|| hidden[0].dim());
        for g in known.iter().map(KnownClass::joint).chain(hidden.iter()) {
            if g.dim() != r {
                return Err(DamdaError::DimensionMismatch {
                    expected: r,
                    found: g.dim(),
                });
            }
        }
        Ok(Self {
            tau,
            known,
            hidden,
            loglik_trace: Vec::new(),
            loglik: f64::NAN,
            bic: f64::NAN,
            n: 0,
            responsibilities: None,
            iterations: 0,
            converged: false,
            restarted: false,
            regularizations: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.known.len()
    }

    pub fn h(&self) -> usize {
        self.hidden.len()
    }

    pub fn p(&self) -> usize {
        self.known.first().map_or(0, |k| k.fixed.dim())
    }

    pub fn q(&self) -> usize {
        self.r() - self.p()
    }

    pub fn r(&self) -> usize {
        self.component(0).dim()
    }

    pub fn n_components(&self) -> usize {
        self.k() + self.h()
    }

    /// Joint Gaussian of component `c` (known classes first).
    pub fn component(&self, c: usize) -> &GaussianParams {
        if c < self.k() {
            self.known[c].joint()
        } else {
            &self.hidden[c - self.k()]
        }
    }

    pub fn components(&self) -> impl Iterator<Item = &GaussianParams> {
        self.known.iter().map(KnownClass::joint).chain(self.hidden.iter())
    }

    pub fn free_params(&self) -> usize {
        discovery_parameter_count(self.k(), self.h(), self.p(), self.q())
    }

    /// Posterior membership of new observations under the fitted model.
    pub fn predict(&self, y: &DMatrix<f64>) -> Result<Responsibilities> {
        e_step(y, self)
    }
}
