use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{DamdaError, Result};
use crate::gaussian::pd_cholesky;

/// One draw from `W(df, scale)` by the Bartlett decomposition
/// `L A Aᵀ Lᵀ`, with `L` the Cholesky factor of `scale`, `A` lower
/// triangular, `A_ii² ~ χ²(df − i)` and standard normal entries below the
/// diagonal.
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if df < d as f64 {
        return Err(DamdaError::InvalidInput(format!(
            "Wishart degrees of freedom {df} below dimension {d}"
        )));
    }
    let l = pd_cholesky(scale)
        .ok_or_else(|| DamdaError::NotPositiveDefinite("Wishart scale matrix".into()))?
        .l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| DamdaError::InvalidInput(format!("chi-square: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

/// Unit diagonal with every off-diagonal entry equal to `rho`.
pub fn equicorrelation(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho })
}
