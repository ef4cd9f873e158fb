use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DamdaError, Result};

const RESTARTS: usize = 5;
const MAX_ITER: usize = 500;
const TOL: f64 = 1e-8;
/// Component variances are kept above this fraction of the column variance.
const VARIANCE_FLOOR: f64 = 1e-3;

/// FNV-1a, so a variable's random stream depends only on its name.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Log-likelihood of the best of [`RESTARTS`] EM runs for a `g`-component
/// univariate Gaussian mixture.
fn univariate_mixture_loglik(x: &[f64], g: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if g == 1 {
        return x.iter().map(|&v| ln_normal(v, mean, var)).sum();
    }
    let floor = VARIANCE_FLOOR * var;
    let mut best = f64::NEG_INFINITY;
    let mut t = vec![0.0; x.len() * g];
    for _ in 0..RESTARTS {
        let mut mu: Vec<f64> = (0..g).map(|_| x[rng.random_range(0..x.len())]).collect();
        let mut s2 = vec![var; g];
        let mut pi = vec![1.0 / g as f64; g];
        let mut prev = f64::NEG_INFINITY;
        let mut ll = prev;
        for _ in 0..MAX_ITER {
            ll = 0.0;
            let ln_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
            let ln_var: Vec<f64> = s2.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).collect();
            for (i, &v) in x.iter().enumerate() {
                let row = &mut t[i * g..(i + 1) * g];
                for c in 0..g {
                    row[c] = ln_pi[c] - 0.5 * (ln_var[c] + (v - mu[c]).powi(2) / s2[c]);
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|w| (w - m).exp()).sum();
                for w in row.iter_mut() {
                    *w = (*w - m).exp() / s;
                }
                ll += m + s.ln();
            }
            if (ll - prev).abs() <= TOL * (ll.abs() + 1.0) {
                break;
            }
            prev = ll;
            for c in 0..g {
                let nc: f64 = (0..x.len()).map(|i| t[i * g + c]).sum();
                if nc < 1e-10 {
                    // empty component: reseed at a random point
                    mu[c] = x[rng.random_range(0..x.len())];
                    s2[c] = var;
                    pi[c] = 1.0 / n;
                    continue;
                }
                let m = (0..x.len()).map(|i| t[i * g + c] * x[i]).sum::<f64>() / nc;
                let v = (0..x.len()).map(|i| t[i * g + c] * (x[i] - m).powi(2)).sum::<f64>() / nc;
                mu[c] = m;
                s2[c] = v.max(floor);
                pi[c] = nc / n;
            }
            let total: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= total);
        }
        if ll.is_finite() && ll > best {
            best = ll;
        }
    }
    best
}

/// `max_g BIC(g) − BIC(1)` over univariate Gaussian mixtures with
/// `g = 1..=max_components`, where `BIC(g) = 2 L − (3g − 1) log N`.
/// Constant columns score `−∞`.
pub fn mixture_bic_gain(x: &[f64], max_components: usize, seed: u64) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    if n < 2 || x.iter().all(|&v| v == mean) || x.iter().all(|&v| v == x[0]) {
        return f64::NEG_INFINITY;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln_n = (n as f64).ln();
    let bic = |g: usize, rng: &mut ChaCha8Rng| 2.0 * univariate_mixture_loglik(x, g, rng) - (3 * g - 1) as f64 * ln_n;
    let single = bic(1, &mut rng);
    let mut best = single;
    for g in 2..=max_components.max(1) {
        best = best.max(bic(g, &mut rng));
    }
    best - single
}

/// Ranks the columns of `y` by [`mixture_bic_gain`], largest first, and
/// returns the top `s` column indices. Ties keep column order.
pub fn rank_initial_subset(y: &DMatrix<f64>, names: &[String], max_components: usize, s: usize, seed: u64) -> Result<Vec<usize>> {
    if names.len() != y.ncols() {
        return Err(DamdaError::DimensionMismatch { expected: y.ncols(), found: names.len() });
    }
    if s > y.ncols() {
        return Err(DamdaError::InvalidInput(format!(
            "subset size {s} exceeds the {} available variables",
            y.ncols()
        )));
    }
    let gains: Vec<f64> = (0..y.ncols())
        .map(|j| {
            let col: Vec<f64> = y.column(j).iter().copied().collect();
            mixture_bic_gain(&col, max_components, seed ^ name_hash(&names[j]))
        })
        .collect();
    let mut order: Vec<usize> = (0..y.ncols()).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    order.truncate(s);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn mixture_variable_ranks_first() {
        let mut wins = 0;
        for rep in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let y = DMatrix::from_fn(120, 2, |i, j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if j == 1 {
                    z + if i % 2 == 0 { 5.0 } else { -5.0 }
                } else {
                    z
                }
            });
            let names = vec!["plain".to_owned(), "mixed".to_owned()];
            if rank_initial_subset(&y, &names, 3, 2, 0).unwrap()[0] == 1 {
                wins += 1;
            }
        }
        assert!(wins > 10, "{wins}/20");
    }

    #[test]
    fn full_subset_and_singletons() {
        let y = DMatrix::from_fn(30, 3, |i, j| ((i * (j + 3)) % 7) as f64);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut all = rank_initial_subset(&y, &names, 3, 3, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        let one = DMatrix::from_fn(30, 1, |i, _| i as f64);
        assert_eq!(rank_initial_subset(&one, &names[..1], 3, 1, 1).unwrap(), vec![0]);
        assert!(rank_initial_subset(&one, &names[..1], 3, 2, 1).is_err());
    }

    #[test]
    fn constant_column_ranks_last() {
        let y = DMatrix::from_fn(30, 2, |i, j| if j == 0 { 4.0 } else { (i % 5) as f64 });
        assert_eq!(mixture_bic_gain(&[4.0; 30], 3, 0), f64::NEG_INFINITY);
        let names = vec!["const".to_owned(), "vary".to_owned()];
        assert_eq!(rank_initial_subset(&y, &names, 3, 2, 0).unwrap(), vec![1, 0]);
    }

    #[test]
    fn gain_is_nonnegative_and_reproducible() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let a = mixture_bic_gain(&x, 4, 9);
        assert!(a >= 0.0);
        assert_eq!(a.to_bits(), mixture_bic_gain(&x, 4, 9).to_bits());
    }
}
