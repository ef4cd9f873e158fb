use nalgebra::{DMatrix, DVector};

use super::Responsibilities;
use crate::error::{DamdaError, Result};
use crate::gaussian::{pd_cholesky, symmetrize, GaussianParams};

/// `τ̂_c = N_c / N`, re-estimated on the test data for every component.
pub fn m_step_mixing(t: &Responsibilities) -> Vec<f64> {
    let n = t.n() as f64;
    t.sizes().into_iter().map(|s| s / n).collect()
}

/// Weighted first and second moments of the rows of `y`.
#[derive(Clone, Debug)]
pub struct WeightedScatter {
    pub mean: DVector<f64>,
    /// `O = Σ_i w_i (y_i − ȳ)(y_i − ȳ)ᵀ`
    pub scatter: DMatrix<f64>,
    pub weight: f64,
}

pub fn weighted_scatter(y: &DMatrix<f64>, w: &[f64]) -> Result<WeightedScatter> {
    let n = y.nrows();
    if w.len() != n {
        return Err(DamdaError::DimensionMismatch {
            expected: n,
            found: w.len(),
        });
    }
    let weight: f64 = w.iter().sum();
    if weight <= 0.0 {
        return Err(DamdaError::InvalidInput("weights sum to zero".into()));
    }
    let wv = DVector::from_column_slice(w);
    let mut mean = y.tr_mul(&wv);
    mean /= weight;
    let mut centered = y.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut weighted = centered.clone();
    for mut col in weighted.column_iter_mut() {
        col.component_mul_assign(&wv);
    }
    let scatter = symmetrize(&weighted.tr_mul(&centered));
    Ok(WeightedScatter {
        mean,
        scatter,
        weight,
    })
}

/// Bayesian ridge for singular scatter matrices:
///
/// `O_reg = O + S / det(S)^{1/R} · (γ / (K+H))^{1/R}`, `γ = log(R) / N`,
///
/// where `S` is the covariance of the whole test sample. `γ` is floored at
/// `1e-8`, which only matters for `R = 1`.
#[derive(Clone, Debug)]
pub struct Regularizer {
    s: DMatrix<f64>,
    scaled: DMatrix<f64>,
    coef: f64,
}

pub const GAMMA_FLOOR: f64 = 1e-8;

impl Regularizer {
    pub fn new(s: &DMatrix<f64>, n_components: usize, n: usize) -> Self {
        let r = s.nrows();
        let mut s = symmetrize(s);
        let chol = match pd_cholesky(&s) {
            Some(c) => c,
            None => {
                s += DMatrix::identity(r, r) * 1e-8;
                pd_cholesky(&s).expect("S + 1e-8·I is positive definite")
            }
        };
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..r).map(|i| l[(i, i)].ln()).sum::<f64>();
        let scaled = &s / (log_det / r as f64).exp();
        let gamma = ((r as f64).ln() / n as f64).max(GAMMA_FLOOR);
        let coef = (gamma / n_components as f64).powf(1.0 / r as f64);
        Self { s, scaled, coef }
    }

    /// Regularizer built from the empirical covariance (divisor `N`) of `y`.
    pub fn from_data(y: &DMatrix<f64>, n_components: usize) -> Self {
        let n = y.nrows();
        let ws = weighted_scatter(y, &vec![1.0; n]).expect("non-empty data");
        Self::new(&(ws.scatter / n as f64), n_components, n)
    }

    pub fn sample_covariance(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn apply(&self, o: &DMatrix<f64>) -> DMatrix<f64> {
        o + &self.scaled * self.coef
    }
}

pub fn regularize_scatter(o: &DMatrix<f64>, s: &DMatrix<f64>, k: usize, h: usize, n: usize) -> DMatrix<f64> {
    Regularizer::new(s, k + h, n).apply(o)
}

impl WeightedScatter {
    /// Whether the scatter can be used without regularization: it passes the
    /// PD gate and its expected class size exceeds the dimension. With fewer
    /// effective rows than variables the scatter is singular except for the
    /// tiny weights of far-away rows, which the pivot bound alone lets through.
    pub fn is_usable(&self) -> bool {
        self.weight > self.scatter.nrows() as f64 && pd_cholesky(&self.scatter).is_some()
    }
}

/// `(raw, regularized)` scatter matrices.
pub type ScatterPair = (DMatrix<f64>, DMatrix<f64>);

/// Mean and covariance of hidden component `h` from the weights in column
/// `h` of `t`. Falls back to the regularized scatter when the plain scatter
/// is not usable (see [`WeightedScatter::is_usable`]); the second element
/// then carries the scatter pair.
pub fn m_step_hidden(
    y: &DMatrix<f64>,
    t: &Responsibilities,
    h: usize,
    reg: &Regularizer,
) -> Result<(GaussianParams, Option<ScatterPair>)> {
    let w: Vec<f64> = t.matrix().column(h).iter().copied().collect();
    let ws = weighted_scatter(y, &w)?;
    if ws.is_usable() {
        if let Ok(g) = GaussianParams::new(ws.mean.clone(), &ws.scatter / ws.weight) {
            return Ok((g, None));
        }
    }
    let regularized = reg.apply(&ws.scatter);
    let g = GaussianParams::new(ws.mean, &regularized / ws.weight)?;
    Ok((g, Some((ws.scatter, regularized))))
}

/// Blocks of a known-class scatter matrix `O_k = [[W, V], [Vᵀ, U]]`.
#[derive(Clone, Debug)]
pub struct ScatterPartition {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub n_k: f64,
}

impl ScatterPartition {
    pub fn split(o: &DMatrix<f64>, p: usize, n_k: f64) -> Self {
        let r = o.nrows();
        let q = r - p;
        Self {
            w: o.view((0, 0), (p, p)).into_owned(),
            v: o.view((0, p), (p, q)).into_owned(),
            u: o.view((p, p), (q, q)).into_owned(),
            n_k,
        }
    }
}

/// Augmented-block estimates of one known class.
#[derive(Clone, Debug)]
pub struct ConditionalEstimate {
    /// `Ĉ`, `P × Q`
    pub cross: DMatrix<f64>,
    /// `Ê`, covariance of the test-only variables given the trained ones
    pub conditional_cov: DMatrix<f64>,
    /// `Σ̂_Q = Ê + Ĉᵀ Σ̄⁻¹ Ĉ`
    pub new_cov: DMatrix<f64>,
    /// `μ̂_Q`
    pub aug_mean: DVector<f64>,
}

/// Maximizes the expected complete log-likelihood of one known class over
/// `(C, Σ_Q, μ_Q)` with `(μ̄, Σ̄)` fixed:
///
/// ```text
/// Ĉ   = (Σ̄⁻¹ W Σ̄⁻¹)⁻¹ (Σ̄⁻¹ V)
/// Ê   = [Ĉᵀ Σ̄⁻¹ W Σ̄⁻¹ Ĉ − 2 Vᵀ Σ̄⁻¹ Ĉ + U] / N_k
/// Σ̂_Q = Ê + Ĉᵀ Σ̄⁻¹ Ĉ
/// μ̂_Q = [Σ_i t_ik y_iQ − Ĉᵀ Σ̄⁻¹ Σ_i t_ik (y_iP − μ̄)] / N_k
/// ```
///
/// `sum_q = Σ_i t_ik y_iQ` and `sum_p_dev = Σ_i t_ik (y_iP − μ̄)`.
pub fn inductive_conditional_update(
    scatter: &ScatterPartition,
    fixed: &GaussianParams,
    sum_q: &DVector<f64>,
    sum_p_dev: &DVector<f64>,
) -> Result<ConditionalEstimate> {
    let p = fixed.dim();
    let q = scatter.u.nrows();
    if scatter.w.nrows() != p || scatter.v.shape() != (p, q) || sum_p_dev.len() != p || sum_q.len() != q {
        return Err(DamdaError::DimensionMismatch {
            expected: p,
            found: scatter.w.nrows(),
        });
    }
    if q == 0 {
        return Ok(ConditionalEstimate {
            cross: DMatrix::zeros(p, 0),
            conditional_cov: DMatrix::zeros(0, 0),
            new_cov: DMatrix::zeros(0, 0),
            aug_mean: DVector::zeros(0),
        });
    }
    let n_k = scatter.n_k;
    let sinv_w = fixed.solve(&scatter.w);
    // Σ̄⁻¹ W Σ̄⁻¹ = Σ̄⁻¹ (Σ̄⁻¹ W)ᵀ since W and Σ̄ are symmetric
    let a = symmetrize(&fixed.solve(&sinv_w.transpose()));
    let b = fixed.solve(&scatter.v);
    let a_chol = pd_cholesky(&a)
        .ok_or_else(|| DamdaError::NotPositiveDefinite("trained-variable scatter block W".into()))?;
    let cross = a_chol.solve(&b);
    let ct_a_c = cross.transpose() * &a * &cross;
    let vt_sinv_c = b.transpose() * &cross;
    let e = symmetrize(&((ct_a_c - vt_sinv_c * 2.0 + &scatter.u) / n_k));
    if pd_cholesky(&e).is_none() {
        return Err(DamdaError::NotPositiveDefinite("conditional covariance E".into()));
    }
    let sinv_c = fixed.solve(&cross);
    let new_cov = symmetrize(&(&e + cross.transpose() * &sinv_c));
    let aug_mean = (sum_q - sinv_c.transpose() * sum_p_dev) / n_k;
    Ok(ConditionalEstimate {
        cross,
        conditional_cov: e,
        new_cov,
        aug_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(rows: &[&[f64]]) -> Responsibilities {
        let c = rows[0].len();
        Responsibilities::new(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn mixing_from_degenerate_and_uniform_weights() {
        assert_eq!(m_step_mixing(&resp(&[&[1.0, 0.0], &[1.0, 0.0]])), vec![1.0, 0.0]);
        assert_eq!(m_step_mixing(&resp(&[&[0.5, 0.5], &[0.5, 0.5]])), vec![0.5, 0.5]);
    }

    #[test]
    fn mixing_is_column_mean() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let a = 0.1 + 0.1 * i as f64;
                let b = (1.0 - a) * 0.25;
                vec![a, b, 1.0 - a - b]
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let tau = m_step_mixing(&resp(&refs));
        for c in 0..3 {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / 7.0;
            assert_close!(tau[c], mean, 1e-15);
        }
        assert_close!(tau.iter().sum::<f64>(), 1.0, 1e-15);
    }

    #[test]
    fn hidden_mstep_equal_weights_gives_sample_moments() {
        let y = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 0.5, 1.0, 3.0, -1.0, 2.0]);
        let t = resp(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        let reg = Regularizer::from_data(&y, 1);
        let (g, regd) = m_step_hidden(&y, &t, 0, &reg).unwrap();
        assert!(regd.is_none());
        let mx = (0.0 + 2.0 + 1.0 - 1.0) / 4.0;
        let my = (1.0 + 0.5 + 3.0 + 2.0) / 4.0;
        assert_close!(g.mean()[0], mx, 1e-15);
        assert_close!(g.mean()[1], my, 1e-15);
        let cxy = [(0.0, 1.0), (2.0, 0.5), (1.0, 3.0), (-1.0, 2.0)]
            .iter()
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / 4.0;
        assert_close!(g.cov()[(0, 1)], cxy, 1e-14);
    }

    #[test]
    fn hidden_mstep_random_weights_direct_sum() {
        let pts = [[0.3, 1.0], [1.7, -0.4], [2.2, 0.9], [-0.5, 0.1], [0.9, 2.5], [1.1, 1.3]];
        let w = [0.2, 0.9, 0.35, 0.6, 0.05, 0.75];
        let y = DMatrix::from_fn(6, 2, |i, j| pts[i][j]);
        let t = Responsibilities::new(DMatrix::from_fn(6, 2, |i, j| if j == 0 { w[i] } else { 1.0 - w[i] })).unwrap();
        let reg = Regularizer::from_data(&y, 2);
        let (g, _) = m_step_hidden(&y, &t, 0, &reg).unwrap();
        let nh: f64 = w.iter().sum();
        let mu: Vec<f64> = (0..2).map(|j| (0..6).map(|i| w[i] * pts[i][j]).sum::<f64>() / nh).collect();
        for a in 0..2 {
            assert_close!(g.mean()[a], mu[a], 1e-14);
            for b in 0..2 {
                let s = (0..6).map(|i| w[i] * (pts[i][a] - mu[a]) * (pts[i][b] - mu[b])).sum::<f64>() / nh;
                assert_close!(g.cov()[(a, b)], s, 1e-14);
            }
        }
    }

    #[test]
    fn hidden_mstep_degenerate_mass_regularizes() {
        let y = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 5.0, -1.0, 0.0, 0.0]);
        let t = resp(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let reg = Regularizer::from_data(&y, 2);
        let (g, regd) = m_step_hidden(&y, &t, 0, &reg).unwrap();
        assert_eq!(g.mean().as_slice(), &[1.0, 2.0]);
        let (raw, regularized) = regd.expect("regularization path");
        assert!(raw.amax() == 0.0);
        assert!(pd_cholesky(&regularized).is_some());
    }

    #[test]
    fn regularize_identity_scale() {
        let o = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let s = DMatrix::identity(2, 2);
        let out = regularize_scatter(&o, &s, 2, 1, 50);
        let coef = ((2f64.ln() / 50.0) / 3.0).powf(0.5);
        let expected = &o + DMatrix::identity(2, 2) * coef;
        assert!((out - expected).amax() < 1e-15);
    }

    #[test]
    fn regularize_r1_uses_gamma_floor() {
        let o = DMatrix::zeros(1, 1);
        let s = DMatrix::from_element(1, 1, 2.0);
        let out = regularize_scatter(&o, &s, 1, 1, 10);
        // log(1) = 0, so γ sits at its floor: 2/2 · (1e-8/2)
        assert_close!(out[(0, 0)], 1e-8 / 2.0, 1e-22);
    }

    #[test]
    fn regularize_direct_expression() {
        let o = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]);
        let (k, h, n) = (2usize, 1usize, 40usize);
        let det: f64 = 2.0 * 1.5 - 0.25;
        let gamma = 2f64.ln() / n as f64;
        let factor = (gamma / (k + h) as f64).powf(0.5) / det.powf(0.5);
        let out = regularize_scatter(&o, &s, k, h, n);
        for i in 0..2 {
            for j in 0..2 {
                assert_close!(out[(i, j)], o[(i, j)] + s[(i, j)] * factor, 1e-14);
            }
        }
    }

    #[test]
    fn conditional_update_without_extra_variables_is_noop() {
        let fixed = GaussianParams::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let sp = ScatterPartition::split(&(DMatrix::identity(2, 2) * 3.0), 2, 3.0);
        let est = inductive_conditional_update(&sp, &fixed, &DVector::zeros(0), &DVector::zeros(2)).unwrap();
        assert_eq!(est.cross.shape(), (2, 0));
        assert_eq!(est.new_cov.shape(), (0, 0));
    }

    #[test]
    fn scalar_case_recovers_sample_cross_covariance() {
        // P = Q = 1 with Σ̄ = W / N: Ĉ = Σ̄·V/W = V/N
        let (w, v, u, n) = (6.0, 2.5, 4.0, 3.0);
        let fixed = GaussianParams::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, w / n)).unwrap();
        let sp = ScatterPartition {
            w: DMatrix::from_element(1, 1, w),
            v: DMatrix::from_element(1, 1, v),
            u: DMatrix::from_element(1, 1, u),
            n_k: n,
        };
        let est = inductive_conditional_update(&sp, &fixed, &DVector::from_element(1, 0.0), &DVector::from_element(1, 0.0)).unwrap();
        assert_close!(est.cross[(0, 0)], v / n, 1e-14);
        // Σ_Q is then the plain sample variance U/N
        assert_close!(est.new_cov[(0, 0)], u / n, 1e-14);
    }

    #[test]
    fn cross_block_simplifies_to_sigma_w_inverse_v() {
        let sig = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let w = DMatrix::from_row_slice(2, 2, &[5.0, 1.0, 1.0, 4.0]);
        let v = DMatrix::from_row_slice(2, 1, &[1.5, -0.7]);
        let fixed = GaussianParams::new(DVector::zeros(2), sig.clone()).unwrap();
        let sp = ScatterPartition {
            w: w.clone(),
            v: v.clone(),
            u: DMatrix::from_element(1, 1, 6.0),
            n_k: 5.0,
        };
        let est = inductive_conditional_update(&sp, &fixed, &DVector::from_element(1, 1.0), &DVector::zeros(2)).unwrap();
        let direct = &sig * w.clone().try_inverse().unwrap() * &v;
        assert!((est.cross - direct).amax() < 1e-13);
        let schur = (6.0 - (v.transpose() * w.try_inverse().unwrap() * &v)[(0, 0)]) / 5.0;
        assert_close!(est.conditional_cov[(0, 0)], schur, 1e-13);
    }
}
