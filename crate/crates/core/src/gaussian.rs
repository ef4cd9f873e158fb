//! Dense Gaussian primitives shared by every phase of the classifier.
//!
//! Positive definiteness is decided in exactly one place, [`pd_cholesky`]:
//! a symmetric matrix is accepted when its Cholesky factorization succeeds and
//! every pivot (the squared diagonal of the factor) exceeds [`PD_PIVOT_MIN`].


use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{DamdaError, Result};

/// Smallest accepted Cholesky pivot.
pub const PD_PIVOT_MIN: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Returns `(A + Aᵀ) / 2`. Already-symmetric input is returned bit-for-bit.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (a[(i, j)] + a[(j, i)]) / 2.0;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Cholesky factorization gated on the pivot threshold.
pub fn pd_cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() || a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    if (0..a.nrows()).all(|i| l[(i, i)] * l[(i, i)] > PD_PIVOT_MIN) {
        Some(chol)
    } else {
        None
    }
}

pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    pd_cholesky(a).is_some()
}

/// Gathers `rows × cols` of `a`.
pub fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Mean and covariance of one class on one variable set.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(DamdaError::DimensionMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(DamdaError::InvalidInput("non-finite mean".into()));
        }
        let cov = symmetrize(&cov);
        let chol = pd_cholesky(&cov).ok_or_else(|| {
            DamdaError::NotPositiveDefinite(format!("{d}x{d} covariance failed the Cholesky gate"))
        })?;
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// `Σ⁻¹ b` through the Cholesky factor.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(DamdaError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut z = x - &self.mean;
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        Ok(self.log_norm_const() - 0.5 * z.norm_squared())
    }

    /// Log-density of every row of `y`.
    pub fn log_density_rows(&self, y: &DMatrix<f64>) -> Result<Vec<f64>> {
        let d = self.dim();
        if y.ncols() != d {
            return Err(DamdaError::DimensionMismatch {
                expected: d,
                found: y.ncols(),
            });
        }
        let n = y.nrows();
        // rows of Z = (Y − 1μᵀ) L⁻ᵀ are the whitened observations
        let mut centered = y.clone();
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        let l_inv = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("Cholesky factor has a nonzero diagonal");
        let z = centered * l_inv.transpose();
        let c = self.log_norm_const();
        let mut quad = vec![0.0; n];
        for col in z.column_iter() {
            for (q, v) in quad.iter_mut().zip(col.iter()) {
                *q += v * v;
            }
        }
        Ok(quad.into_iter().map(|q| c - 0.5 * q).collect())
    }

    fn log_norm_const(&self) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det)
    }

    /// Marginal distribution over the listed coordinates, in the listed order.
    pub fn marginal(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.dim()) {
            return Err(DamdaError::InvalidInput(format!(
                "index {bad} out of range for dimension {}",
                self.dim()
            )));
        }
        Self::new(subvector(&self.mean, idx), submatrix(&self.cov, idx, idx))
    }
}

pub fn log_density(x: &DVector<f64>, params: &GaussianParams) -> Result<f64> {
    params.log_density(x)
}

/// Divergence score used to match clusters to learned classes:
///
/// `tr(Σ_g⁻¹ Σ_k) + (μ_g − μ_k)ᵀ Σ_g⁻¹ (μ_g − μ_k) + log(det Σ_g / det Σ_k)`
///
/// It is the Kullback–Leibler divergence up to an affine transformation
/// (no `½` factor, no `−d` offset), which leaves its argmin unchanged.
pub fn kl_match_score(cluster: &GaussianParams, learned: &GaussianParams) -> Result<f64> {
    if cluster.dim() != learned.dim() {
        return Err(DamdaError::DimensionMismatch {
            expected: learned.dim(),
            found: cluster.dim(),
        });
    }
    let trace = cluster.solve(learned.cov()).trace();
    let diff = cluster.mean() - learned.mean();
    let mut z = diff.clone();
    cluster.chol.l_dirty().solve_lower_triangular_mut(&mut z);
    Ok(trace + z.norm_squared() + cluster.log_det() - learned.log_det())
}

/// Block covariance `[[Σ̄, C], [Cᵀ, Σ_Q]]` of a known class over trained
/// (`P`) and test-only (`Q`) variables.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedCov {
    pub fixed_block: DMatrix<f64>,
    pub cross_block: DMatrix<f64>,
    pub new_block: DMatrix<f64>,
}

impl PartitionedCov {
    pub fn new(
        fixed_block: DMatrix<f64>,
        cross_block: DMatrix<f64>,
        new_block: DMatrix<f64>,
    ) -> Result<Self> {
        let p = fixed_block.nrows();
        let q = new_block.nrows();
        if fixed_block.ncols() != p || new_block.ncols() != q {
            return Err(DamdaError::InvalidInput("diagonal blocks must be square".into()));
        }
        if cross_block.nrows() != p || cross_block.ncols() != q {
            return Err(DamdaError::DimensionMismatch {
                expected: p * q,
                found: cross_block.nrows() * cross_block.ncols(),
            });
        }
        Ok(Self {
            fixed_block,
            cross_block,
            new_block,
        })
    }

    pub fn p(&self) -> usize {
        self.fixed_block.nrows()
    }

    pub fn q(&self) -> usize {
        self.new_block.nrows()
    }

    /// `Σ_Q − Cᵀ Σ̄⁻¹ C`.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>> {
        let chol = pd_cholesky(&self.fixed_block).ok_or_else(|| {
            DamdaError::NotPositiveDefinite("fixed covariance block".into())
        })?;
        let solved = chol.solve(&self.cross_block);
        Ok(symmetrize(
            &(&self.new_block - self.cross_block.transpose() * solved),
        ))
    }

    pub fn is_valid(&self) -> bool {
        match self.schur_complement() {
            Ok(s) => self.q() == 0 || is_positive_definite(&s),
            Err(_) => false,
        }
    }
}

/// Assembles the full `R×R` covariance. The top-left block is copied from
/// `fixed_block` unchanged.
pub fn assemble_cov(p: &PartitionedCov) -> Result<DMatrix<f64>> {
    let (np, nq) = (p.p(), p.q());
    if nq == 0 {
        return Ok(p.fixed_block.clone());
    }
    if !p.is_valid() {
        return Err(DamdaError::InvalidAugmentedCovariance);
    }
    let r = np + nq;
    let mut out = DMatrix::zeros(r, r);
    out.view_mut((0, 0), (np, np)).copy_from(&p.fixed_block);
    out.view_mut((0, np), (np, nq)).copy_from(&p.cross_block);
    out.view_mut((np, 0), (nq, np))
        .copy_from(&p.cross_block.transpose());
    out.view_mut((np, np), (nq, nq)).copy_from(&symmetrize(&p.new_block));
    Ok(out)
}
