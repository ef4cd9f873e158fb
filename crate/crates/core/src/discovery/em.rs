use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::init::initialize_with_tree;
use super::mstep::{
    inductive_conditional_update, m_step_hidden, m_step_mixing, weighted_scatter, Regularizer,
    ScatterPartition,
};
use super::{DamdaModel, KnownClass, RegularizationRecord, Responsibilities};
use crate::edda::EddaModel;
use crate::error::{DamdaError, Result};
use crate::hierarchy::{ward_linkage, Dendrogram};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when `|ΔL| / (|L| + 1)` drops below this.
    pub rel_tol: f64,
    /// Seeds the perturbed restart after a component collapse.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-7,
            seed: 0,
        }
    }
}

/// Components whose effective size falls below this fraction of `N`
/// count as collapsed.
const COLLAPSE_FRACTION: f64 = 1e-6;
/// Likelihood drop beyond which a regularized update is undone.
const ASCENT_SLACK: f64 = 1e-8;

/// State handed to an observer after every E-step.
pub struct EmSnapshot<'a> {
    pub iteration: usize,
    pub model: &'a DamdaModel,
    pub responsibilities: &'a Responsibilities,
    pub loglik: f64,
}

fn posterior(y: &DMatrix<f64>, model: &DamdaModel) -> Result<(Responsibilities, f64)> {
    let (n, r) = y.shape();
    if r != model.r() {
        return Err(DamdaError::DimensionMismatch {
            expected: model.r(),
            found: r,
        });
    }
    let c = model.n_components();
    let mut logw = DMatrix::zeros(n, c);
    for (j, (g, &tau)) in model.components().zip(&model.tau).enumerate() {
        let lt = tau.ln();
        for (i, d) in g.log_density_rows(y)?.into_iter().enumerate() {
            logw[(i, j)] = lt + d;
        }
    }
    let mut loglik = 0.0;
    for i in 0..n {
        let max = (0..c).map(|j| logw[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(DamdaError::NonFiniteDensity { row: i });
        }
        let mut sum = 0.0;
        for j in 0..c {
            let e = (logw[(i, j)] - max).exp();
            logw[(i, j)] = e;
            sum += e;
        }
        for j in 0..c {
            logw[(i, j)] /= sum;
        }
        loglik += max + sum.ln();
    }
    if !loglik.is_finite() {
        return Err(DamdaError::NonFiniteDensity { row: n });
    }
    Ok((Responsibilities::from_normalized(logw), loglik))
}

/// `t_ic ∝ τ_c φ(y_i; μ*_c, Σ*_c)`, normalized per row in log-space.
pub fn e_step(y: &DMatrix<f64>, model: &DamdaModel) -> Result<Responsibilities> {
    posterior(y, model).map(|(t, _)| t)
}

/// Observed-data log-likelihood `Σ_i log Σ_c τ_c φ(y_i; μ*_c, Σ*_c)`.
pub fn log_likelihood(y: &DMatrix<f64>, model: &DamdaModel) -> Result<f64> {
    posterior(y, model).map(|(_, l)| l)
}

/// Number of parameters estimated in the discovery phase:
/// `(H+K−1) + 2HR + H·C(R,2) + 2KQ + KPQ + K·C(Q,2)`.
pub fn discovery_parameter_count(k: usize, h: usize, p: usize, q: usize) -> usize {
    let r = p + q;
    let pairs = |m: usize| m * m.saturating_sub(1) / 2;
    (h + k).saturating_sub(1) + 2 * h * r + h * pairs(r) + 2 * k * q + k * p * q + k * pairs(q)
}

/// `BIC_H = 2 L − η_H log N`.
pub fn bic_h(loglik: f64, h: usize, k: usize, p: usize, q: usize, n: usize) -> f64 {
    2.0 * loglik - discovery_parameter_count(k, h, p, q) as f64 * (n as f64).ln()
}

fn m_step(
    y: &DMatrix<f64>,
    model: &DamdaModel,
    t: &Responsibilities,
    reg: &Regularizer,
    iteration: usize,
    records: &mut Vec<RegularizationRecord>,
) -> Result<DamdaModel> {
    let n = y.nrows() as f64;
    let sizes = t.sizes();
    if let Some((component, &size)) = sizes
        .iter()
        .enumerate()
        .find(|(_, &s)| s < COLLAPSE_FRACTION * n)
    {
        return Err(DamdaError::ComponentCollapse { component, size });
    }
    let tau = m_step_mixing(t);
    let p = model.p();
    let k = model.k();

    let mut known = Vec::with_capacity(k);
    for (c, class) in model.known.iter().enumerate() {
        if model.q() == 0 {
            known.push(class.clone());
            continue;
        }
        let w: Vec<f64> = t.matrix().column(c).iter().copied().collect();
        let ws = weighted_scatter(y, &w)?;
        let update = |o: &DMatrix<f64>| -> Result<KnownClass> {
            let part = ScatterPartition::split(o, p, ws.weight);
            let mean_p = ws.mean.rows(0, p);
            let sum_p_dev: DVector<f64> = (mean_p - class.fixed.mean()) * ws.weight;
            let sum_q: DVector<f64> = ws.mean.rows(p, model.q()) * ws.weight;
            let est = inductive_conditional_update(&part, &class.fixed, &sum_q, &sum_p_dev)?;
            KnownClass::new(class.fixed.clone(), est.aug_mean, est.cross, est.new_cov)
        };
        let plain = if ws.is_usable() {
            update(&ws.scatter).ok()
        } else {
            None
        };
        let updated = match plain {
            Some(kc) => kc,
            None => {
                let regularized = reg.apply(&ws.scatter);
                let kc = update(&regularized)?;
                records.push(RegularizationRecord {
                    iteration,
                    component: c,
                    raw: ws.scatter.clone(),
                    regularized,
                });
                kc
            }
        };
        known.push(updated);
    }

    let mut hidden = Vec::with_capacity(model.h());
    for h in 0..model.h() {
        let (g, regd) = m_step_hidden(y, t, k + h, reg)?;
        if let Some((raw, regularized)) = regd {
            records.push(RegularizationRecord {
                iteration,
                component: k + h,
                raw,
                regularized,
            });
        }
        hidden.push(g);
    }
    DamdaModel::from_parts(known, hidden, tau)
}

fn em_loop(
    y: &DMatrix<f64>,
    start: DamdaModel,
    config: &EmConfig,
    reg: &Regularizer,
    observer: &mut dyn FnMut(&EmSnapshot<'_>),
) -> Result<DamdaModel> {
    let mut model = start;
    let mut trace: Vec<f64> = Vec::new();
    let mut records: Vec<RegularizationRecord> = Vec::new();
    let mut iteration = 0;
    // The regularized update is not an exact maximizer. When it loses
    // likelihood, the regularized components keep their previous parameters
    // while the rest of the step stands, which is a generalized EM step.
    let mut previous: Option<DamdaModel> = None;
    loop {
        let (t, loglik) = posterior(y, &model)?;
        observer(&EmSnapshot {
            iteration,
            model: &model,
            responsibilities: &t,
            loglik,
        });
        let last = trace.last().copied();
        if let (Some(prev), Some(prev_model)) = (last, previous.take()) {
            if loglik < prev - ASCENT_SLACK && records.last().is_some_and(|r| r.iteration == iteration) {
                let mut known = model.known.clone();
                let mut hidden = model.hidden.clone();
                for r in records.iter().filter(|r| r.iteration == iteration) {
                    match r.component.checked_sub(model.k()) {
                        None => known[r.component] = prev_model.known[r.component].clone(),
                        Some(h) => hidden[h] = prev_model.hidden[h].clone(),
                    }
                }
                records.retain(|r| r.iteration < iteration);
                model = DamdaModel::from_parts(known, hidden, model.tau.clone())?;
                continue;
            }
        }
        let converged = last.is_some_and(|prev| (loglik - prev).abs() / (loglik.abs() + 1.0) < config.rel_tol);
        trace.push(loglik);
        if converged || iteration >= config.max_iter {
            model.converged = converged;
            model.iterations = iteration;
            model.loglik = loglik;
            model.loglik_trace = trace;
            model.responsibilities = Some(t);
            model.regularizations = records;
            model.n = y.nrows();
            model.bic = bic_h(loglik, model.h(), model.k(), model.p(), model.q(), model.n);
            return Ok(model);
        }
        iteration += 1;
        let next = m_step(y, &model, &t, reg, iteration, &mut records)?;
        previous = Some(std::mem::replace(&mut model, next));
    }
}

/// Restart point after a collapse: responsibilities of `start` blended with
/// random ones, followed by one M-step.
fn perturbed_start(y: &DMatrix<f64>, start: &DamdaModel, reg: &Regularizer, seed: u64) -> Result<DamdaModel> {
    let (t, _) = posterior(y, start)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = t.matrix().shape();
    let mut blended = t.matrix().clone();
    for i in 0..n {
        let u: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = u.iter().sum();
        for j in 0..c {
            blended[(i, j)] = 0.5 * blended[(i, j)] + 0.5 * u[j] / s;
        }
    }
    m_step(y, start, &Responsibilities::from_normalized(blended), reg, 0, &mut Vec::new())
}

/// Fits the discovery model with `h` hidden classes.
pub fn run_em(y: &DMatrix<f64>, learned: &EddaModel, h: usize, config: &EmConfig) -> Result<DamdaModel> {
    run_em_observed(y, learned, h, config, &mut |_| {})
}

/// [`run_em`] with a callback invoked after every E-step.
pub fn run_em_observed(
    y: &DMatrix<f64>,
    learned: &EddaModel,
    h: usize,
    config: &EmConfig,
    observer: &mut dyn FnMut(&EmSnapshot<'_>),
) -> Result<DamdaModel> {
    let tree = ward_linkage(y);
    run_em_with_tree(y, learned, h, config, &tree, observer)
}

/// [`run_em_observed`] reusing a precomputed Ward tree of `y`.
pub fn run_em_with_tree(
    y: &DMatrix<f64>,
    learned: &EddaModel,
    h: usize,
    config: &EmConfig,
    tree: &Dendrogram,
    observer: &mut dyn FnMut(&EmSnapshot<'_>),
) -> Result<DamdaModel> {
    let total = learned.k() + h;
    let reg = Regularizer::from_data(y, total);
    let start = initialize_with_tree(y, learned, total, tree, &reg)?;
    match em_loop(y, start.clone(), config, &reg, observer) {
        Err(DamdaError::ComponentCollapse { component, size }) => {
            log::debug!("component {component} collapsed ({size:.3e}); restarting from a perturbed start");
            let restart = perturbed_start(y, &start, &reg, config.seed)?;
            let mut model = em_loop(y, restart, config, &reg, observer)?;
            model.restarted = true;
            Ok(model)
        }
        other => other,
    }
}

/// Outcome of one `H` in [`select_h`].
#[derive(Clone, Debug)]
pub struct HFit {
    pub h: usize,
    pub outcome: std::result::Result<(f64, f64), String>,
}

impl HFit {
    pub fn bic(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|&(_, bic)| bic)
    }
}

#[derive(Clone, Debug)]
pub struct HSelection {
    pub best: DamdaModel,
    /// One entry per requested `H`, ascending; `(loglik, bic)` or the error.
    pub fits: Vec<HFit>,
}

/// Fits every `H` in `h_values` and keeps the largest `BIC_H`; ties go to the
/// smaller `H`.
pub fn select_h(y: &DMatrix<f64>, learned: &EddaModel, h_values: &[usize], config: &EmConfig) -> Result<HSelection> {
    select_h_with_trees(y, learned, h_values, config, &initial_trees(y))
}

/// Ward trees of `y` on its raw and on its standardized columns. Each `H` is
/// fitted from both and the higher likelihood is kept, so that one badly
/// scaled variable cannot dictate the starting partition.
pub fn initial_trees(y: &DMatrix<f64>) -> Vec<Dendrogram> {
    let mut z = y.clone();
    for mut c in z.column_iter_mut() {
        let m = c.mean();
        let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
        if sd > 0.0 {
            c.apply(|v| *v = (*v - m) / sd);
        }
    }
    vec![ward_linkage(y), ward_linkage(&z)]
}

/// Best of the EM runs started from each tree; errors only if all fail.
fn fit_from_trees(y: &DMatrix<f64>, learned: &EddaModel, h: usize, config: &EmConfig, trees: &[Dendrogram]) -> Result<DamdaModel> {
    let mut best: Option<DamdaModel> = None;
    let mut last_err = None;
    for tree in trees {
        match run_em_with_tree(y, learned, h, config, tree, &mut |_| {}) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.loglik > b.loglik) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| DamdaError::InvalidInput("no initial tree".into())))
}

pub fn select_h_with_trees(
    y: &DMatrix<f64>,
    learned: &EddaModel,
    h_values: &[usize],
    config: &EmConfig,
    trees: &[Dendrogram],
) -> Result<HSelection> {
    if h_values.is_empty() {
        return Err(DamdaError::InvalidInput("empty range of hidden-class counts".into()));
    }
    let mut hs = h_values.to_vec();
    hs.sort_unstable();
    hs.dedup();
    let mut best: Option<DamdaModel> = None;
    let mut fits = Vec::with_capacity(hs.len());
    for h in hs {
        match fit_from_trees(y, learned, h, config, trees) {
            Ok(model) => {
                log::debug!("H={h}: loglik={:.4} bic={:.4} iters={}", model.loglik, model.bic, model.iterations);
                fits.push(HFit {
                    h,
                    outcome: Ok((model.loglik, model.bic)),
                });
                if best.as_ref().is_none_or(|b| model.bic > b.bic) {
                    best = Some(model);
                }
            }
            Err(e) => {
                log::debug!("H={h}: {e}");
                fits.push(HFit {
                    h,
                    outcome: Err(e.to_string()),
                });
            }
        }
    }
    match best {
        Some(best) => Ok(HSelection { best, fits }),
        None => Err(DamdaError::AllFitsFailed(
            fits.into_iter()
                .map(|f| format!("H={}: {}", f.h, f.outcome.unwrap_err()))
                .collect(),
        )),
    }
}
