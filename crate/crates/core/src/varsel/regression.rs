use nalgebra::{DMatrix, DVector};

use crate::error::{DamdaError, Result};

/// Residual variance never drops below this fraction of `var(y)`.
pub const RESIDUAL_VARIANCE_FLOOR: f64 = 1e-10;

/// Outcome of [`stepwise_regression_bic`].
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    /// Columns of the predictor matrix in the chosen model, ascending.
    pub predictors: Vec<usize>,
    pub loglik: f64,
    pub bic: f64,
}

fn variance(y: &DVector<f64>) -> f64 {
    let m = y.mean();
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64
}

/// Gaussian linear regression of `y` on the chosen columns of `x` plus an
/// intercept. `None` when the chosen columns are collinear.
fn ols(y: &DVector<f64>, x: &DMatrix<f64>, cols: &[usize], floor: f64) -> Option<(f64, f64)> {
    let n = y.len();
    let mut design = DMatrix::from_element(n, cols.len() + 1, 1.0);
    for (k, &j) in cols.iter().enumerate() {
        design.set_column(k + 1, &x.column(j));
    }
    let qr = design.qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale.max(1.0)) {
        return None;
    }
    let q = qr.q();
    let resid = y - &q * (q.tr_mul(y));
    let sigma2 = (resid.norm_squared() / n as f64).max(floor);
    let nf = n as f64;
    let loglik = -0.5 * nf * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let eta = (cols.len() + 2) as f64;
    Some((loglik, 2.0 * loglik - eta * nf.ln()))
}

/// Forward-backward stepwise search over the columns of `x`, maximizing
/// `BIC = 2 L − η log N` with `η` = predictors + intercept + noise variance.
/// Starts from the intercept-only model. A candidate that is an exact linear
/// combination of the predictors already in the model is skipped.
pub fn stepwise_regression_bic(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<RegressionFit> {
    let n = y.len();
    if x.nrows() != n {
        return Err(DamdaError::DimensionMismatch { expected: n, found: x.nrows() });
    }
    if n < 3 {
        return Err(DamdaError::InvalidInput("regression needs at least 3 observations".into()));
    }
    let var_y = variance(y);
    let floor = if var_y > 0.0 { RESIDUAL_VARIANCE_FLOOR * var_y } else { f64::MIN_POSITIVE };
    let mut current: Vec<usize> = Vec::new();
    let (mut loglik, mut bic) = ols(y, x, &current, floor).expect("intercept-only design is full rank");
    let max_predictors = n.saturating_sub(3);
    loop {
        let mut changed = false;
        let mut added = None;
        if current.len() < max_predictors {
            let mut best: Option<(usize, f64, f64)> = None;
            for j in (0..x.ncols()).filter(|j| !current.contains(j)) {
                let mut cols = current.clone();
                cols.push(j);
                if let Some((l, b)) = ols(y, x, &cols, floor) {
                    if b > bic && best.is_none_or(|(_, _, bb)| b > bb) {
                        best = Some((j, l, b));
                    }
                }
            }
            if let Some((j, l, b)) = best {
                current.push(j);
                (loglik, bic) = (l, b);
                added = Some(j);
                changed = true;
            }
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for (pos, &j) in current.iter().enumerate() {
            if Some(j) == added {
                continue;
            }
            let mut cols = current.clone();
            cols.remove(pos);
            if let Some((l, b)) = ols(y, x, &cols, floor) {
                if b > bic && best.is_none_or(|(_, _, bb)| b > bb) {
                    best = Some((pos, l, b));
                }
            }
        }
        if let Some((pos, l, b)) = best {
            current.remove(pos);
            (loglik, bic) = (l, b);
            changed = true;
        }
        if !changed {
            break;
        }
    }
    current.sort_unstable();
    Ok(RegressionFit { predictors: current, loglik, bic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn intercept_only_for_independent_noise() {
        let mut hits = 0;
        for rep in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let x = noise(&mut rng, 200, 3);
            let y = noise(&mut rng, 200, 1).column(0).into_owned();
            if stepwise_regression_bic(&y, &x).unwrap().predictors.is_empty() {
                hits += 1;
            }
        }
        assert!(hits > 10, "{hits}/20");
    }

    #[test]
    fn exact_predictor_hits_the_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = noise(&mut rng, 50, 2);
        let y = x.column(0).into_owned();
        let fit = stepwise_regression_bic(&y, &x).unwrap();
        assert_eq!(fit.predictors, vec![0]);
        let floor = RESIDUAL_VARIANCE_FLOOR * variance(&y);
        let expected = -25.0 * ((2.0 * std::f64::consts::PI * floor).ln() + 1.0);
        assert_close!(fit.loglik, expected, 1e-9 * expected.abs());
        assert_close!(fit.bic, 2.0 * expected - 3.0 * 50f64.ln(), 1e-9 * expected.abs());
    }

    #[test]
    fn linear_signal_is_found() {
        let mut hits = 0;
        for rep in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
            let x = noise(&mut rng, 400, 3);
            let e = noise(&mut rng, 400, 1);
            let y = x.column(0) * 2.0 + e.column(0);
            if stepwise_regression_bic(&y, &x).unwrap().predictors == vec![0] {
                hits += 1;
            }
        }
        assert!(hits > 10, "{hits}/20");
    }

    #[test]
    fn collinear_candidate_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = noise(&mut rng, 60, 1);
        let mut x = DMatrix::zeros(60, 2);
        x.set_column(0, &base.column(0));
        x.set_column(1, &(base.column(0) * 3.0));
        let e = noise(&mut rng, 60, 1);
        let y = base.column(0) + e.column(0) * 0.1;
        let fit = stepwise_regression_bic(&y, &x).unwrap();
        assert_eq!(fit.predictors.len(), 1);
    }

    #[test]
    fn bic_matches_closed_form_for_intercept_only() {
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 7.0]);
        let fit = stepwise_regression_bic(&y, &DMatrix::zeros(4, 0)).unwrap();
        let s2 = variance(&y);
        let l = -2.0 * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0);
        assert_close!(fit.bic, 2.0 * l - 2.0 * 4f64.ln(), 1e-12);
    }
}
