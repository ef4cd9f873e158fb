//! Greedy BIC variable selection on top of the discovery model.
//!
//! At each step a proposed variable `v` is scored against the current
//! relevant set `S` by comparing two models: `v` informative about the
//! classes (discovery model on `S ∪ {v}`), or `v` explained by a linear
//! regression on a subset of `S` (discovery model on `S` plus the
//! regression). Trained variables enter and leave the learned block by
//! marginalization only, so the learned parameters are never refitted.

mod ranking;
mod regression;

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::discovery::{select_h, DamdaModel, EmConfig};
use crate::edda::{marginal_submodel, EddaModel};
use crate::error::{DamdaError, Result};

pub use ranking::{mixture_bic_gain, rank_initial_subset};
pub use regression::{stepwise_regression_bic, RegressionFit, RESIDUAL_VARIANCE_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Trained,
    TestOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Add,
    Remove,
    /// A proposal that was declined or whose fit failed.
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub var: String,
    pub action: Action,
    /// NaN (written as `null`) when the fit failed.
    pub delta_bic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarSelConfig {
    /// Size of the initial subset; `None` starts from every trained variable.
    pub seed_size: Option<usize>,
    /// Largest univariate mixture used to rank the initial subset; `None`
    /// means `K + 2`.
    pub max_components: Option<usize>,
    pub h_range: Vec<usize>,
    /// Budget of add and remove attempts.
    pub max_steps: usize,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for VarSelConfig {
    fn default() -> Self {
        Self {
            seed_size: Some(10),
            max_components: None,
            h_range: (0..=4).collect(),
            max_steps: 200,
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

/// Discovery fit on one variable set.
#[derive(Clone, Debug)]
pub struct SubsetFit {
    /// Test columns in model order: trained variables in learned order, then
    /// test-only variables by name.
    pub columns: Vec<usize>,
    pub h: usize,
    pub bic: f64,
    pub model: DamdaModel,
}

#[derive(Clone, Debug)]
pub struct CandidateEval {
    pub variable: usize,
    pub action: Action,
    /// `BIC₁ − BIC₂` for additions, `BIC₂ − BIC₁` for removals.
    pub delta_bic: f64,
    pub accept: bool,
    /// Discovery fit on the set that results if the proposal is accepted.
    pub fit: Arc<SubsetFit>,
}

/// Scores variable sets against one test matrix, caching every discovery fit.
pub struct Searcher<'a> {
    learned: &'a EddaModel,
    y: &'a DMatrix<f64>,
    names: &'a [String],
    learned_index: Vec<Option<usize>>,
    h_range: Vec<usize>,
    em: EmConfig,
    cache: HashMap<Vec<usize>, std::result::Result<Arc<SubsetFit>, String>>,
}

impl<'a> Searcher<'a> {
    /// Every learned variable must name a column of `y`.
    pub fn new(learned: &'a EddaModel, y: &'a DMatrix<f64>, names: &'a [String], h_range: &[usize], em: EmConfig) -> Result<Self> {
        if names.len() != y.ncols() {
            return Err(DamdaError::DimensionMismatch { expected: y.ncols(), found: names.len() });
        }
        let missing: Vec<String> = learned
            .variable_names
            .iter()
            .filter(|v| !names.contains(v))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(DamdaError::MissingColumns(missing));
        }
        if h_range.is_empty() {
            return Err(DamdaError::InvalidInput("empty range of hidden-class counts".into()));
        }
        let learned_index = names
            .iter()
            .map(|n| learned.variable_names.iter().position(|v| v == n))
            .collect();
        Ok(Self {
            learned,
            y,
            names,
            learned_index,
            h_range: h_range.to_vec(),
            em,
            cache: HashMap::new(),
        })
    }

    pub fn provenance(&self, column: usize) -> Provenance {
        match self.learned_index[column] {
            Some(_) => Provenance::Trained,
            None => Provenance::TestOnly,
        }
    }

    /// Model column order for a variable set.
    pub fn layout(&self, set: &[usize]) -> Vec<usize> {
        let mut trained: Vec<usize> = set.iter().copied().filter(|&j| self.learned_index[j].is_some()).collect();
        trained.sort_by_key(|&j| self.learned_index[j]);
        let mut extra: Vec<usize> = set.iter().copied().filter(|&j| self.learned_index[j].is_none()).collect();
        extra.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        trained.extend(extra);
        trained
    }

    /// `BIC_class` of a set: the discovery model maximized over the `H` range.
    pub fn bic_class(&mut self, set: &[usize]) -> Result<Arc<SubsetFit>> {
        let mut key = set.to_vec();
        key.sort_unstable();
        if let Some(hit) = self.cache.get(&key) {
            return hit.clone().map_err(|e| DamdaError::AllFitsFailed(vec![e]));
        }
        let outcome = self.fit(set);
        let stored = outcome.as_ref().map(Arc::clone).map_err(|e| e.to_string());
        self.cache.insert(key, stored);
        outcome
    }

    fn fit(&self, set: &[usize]) -> Result<Arc<SubsetFit>> {
        let columns = self.layout(set);
        let keep: Vec<usize> = columns.iter().filter_map(|&j| self.learned_index[j]).collect();
        if keep.is_empty() {
            return Err(DamdaError::InvalidInput("variable set holds no trained variable".into()));
        }
        let sub = marginal_submodel(self.learned, &keep)?;
        let ys = self.y.select_columns(&columns);
        let sel = select_h(&ys, &sub, &self.h_range, &self.em)?;
        Ok(Arc::new(SubsetFit {
            columns,
            h: sel.best.h(),
            bic: sel.best.bic,
            model: sel.best,
        }))
    }

    /// `BIC_reg` of `variable` regressed on the columns in `set`.
    pub fn bic_reg(&self, variable: usize, set: &[usize]) -> Result<f64> {
        let mut cols = set.to_vec();
        cols.sort_unstable();
        let x = self.y.select_columns(&cols);
        let target = self.y.column(variable).into_owned();
        Ok(stepwise_regression_bic(&target, &x)?.bic)
    }

    /// Compares the class model against the regression model for one
    /// proposal. Errors when a discovery fit fails.
    pub fn evaluate_candidate(&mut self, selected: &[usize], variable: usize, action: Action) -> Result<CandidateEval> {
        match action {
            Action::Add => {
                if selected.contains(&variable) {
                    return Err(DamdaError::InvalidInput(format!("'{}' is already selected", self.names[variable])));
                }
                let mut with: Vec<usize> = selected.to_vec();
                with.push(variable);
                let fit = self.bic_class(&with)?;
                let base = self.bic_class(selected)?;
                let delta = fit.bic - (base.bic + self.bic_reg(variable, selected)?);
                Ok(CandidateEval { variable, action, delta_bic: delta, accept: delta > 0.0, fit })
            }
            Action::Remove => {
                if !selected.contains(&variable) {
                    return Err(DamdaError::InvalidInput(format!("'{}' is not selected", self.names[variable])));
                }
                let without: Vec<usize> = selected.iter().copied().filter(|&j| j != variable).collect();
                let full = self.bic_class(selected)?;
                let fit = self.bic_class(&without)?;
                let delta = fit.bic + self.bic_reg(variable, &without)? - full.bic;
                Ok(CandidateEval { variable, action, delta_bic: delta, accept: delta > 0.0, fit })
            }
            Action::Reject => Err(DamdaError::InvalidInput("a rejection is not a proposal".into())),
        }
    }

    /// Distinct variable sets fitted so far.
    pub fn fits(&self) -> usize {
        self.cache.len()
    }
}

#[derive(Clone, Debug)]
pub struct VarSelState {
    pub selected: Vec<usize>,
    pub candidates: Vec<usize>,
    /// Variables whose addition failed to fit, with the reason.
    pub rejected: Vec<(usize, String)>,
    pub provenance: Vec<Provenance>,
    pub history: Vec<HistoryEntry>,
    pub current: Arc<SubsetFit>,
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    pub state: VarSelState,
    /// Initial subset in rank order; in learned order when it holds every
    /// trained variable and fits as is.
    pub seed: Vec<usize>,
    pub names: Vec<String>,
    pub steps: usize,
}

impl SelectionResult {
    pub fn h(&self) -> usize {
        self.state.current.h
    }

    pub fn bic(&self) -> f64 {
        self.state.current.bic
    }

    pub fn model(&self) -> &DamdaModel {
        &self.state.current.model
    }

    /// Selected variables in model order.
    pub fn selected_names(&self) -> Vec<String> {
        self.state.current.columns.iter().map(|&j| self.names[j].clone()).collect()
    }

    pub fn report(&self) -> SelectionReport {
        SelectionReport {
            seed: self.seed.iter().map(|&j| self.names[j].clone()).collect(),
            history: self.state.history.clone(),
            selected: self.selected_names(),
            h: self.h(),
            bic: self.bic(),
        }
    }

    /// One row per test variable: name, provenance, seed and selection flags.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["variable", "provenance", "seed", "selected"])?;
        for (j, name) in self.names.iter().enumerate() {
            let prov = match self.state.provenance[j] {
                Provenance::Trained => "trained",
                Provenance::TestOnly => "test-only",
            };
            let flag = |b: bool| if b { "1" } else { "0" };
            w.write_record([
                name.as_str(),
                prov,
                flag(self.seed.contains(&j)),
                flag(self.state.selected.contains(&j)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub seed: Vec<String>,
    pub history: Vec<HistoryEntry>,
    pub selected: Vec<String>,
    #[serde(rename = "H")]
    pub h: usize,
    pub bic: f64,
}

/// Best proposal of one attempt, scanning variables in name order so ties go
/// to the smaller name. Failed fits are returned separately.
fn best_proposal(
    searcher: &mut Searcher<'_>,
    selected: &[usize],
    pool: &[usize],
    action: Action,
) -> (Option<CandidateEval>, Vec<(usize, String)>) {
    let mut best: Option<CandidateEval> = None;
    let mut failed = Vec::new();
    for &v in pool {
        match searcher.evaluate_candidate(selected, v, action) {
            Ok(ev) => {
                if best.as_ref().is_none_or(|b| ev.delta_bic > b.delta_bic) {
                    best = Some(ev);
                }
            }
            Err(e) => failed.push((v, e.to_string())),
        }
    }
    (best, failed)
}

/// Stepwise search alternating one best-add and one best-remove attempt per
/// round until a round changes nothing or `max_steps` attempts are spent.
pub fn greedy_search(learned: &EddaModel, y: &DMatrix<f64>, names: &[String], config: &VarSelConfig) -> Result<SelectionResult> {
    let mut searcher = Searcher::new(learned, y, names, &config.h_range, config.em)?;
    let trained: Vec<usize> = learned
        .variable_names
        .iter()
        .map(|v| names.iter().position(|n| n == v).expect("checked by the searcher"))
        .collect();
    let k = learned.k();
    let g = config.max_components.unwrap_or(k + 2);
    if g <= k {
        return Err(DamdaError::InvalidInput(format!(
            "ranking needs more mixture components ({g}) than learned classes ({k})"
        )));
    }
    let s = config.seed_size.unwrap_or(trained.len()).min(trained.len());
    if s == 0 {
        return Err(DamdaError::InvalidInput("the initial subset must not be empty".into()));
    }
    let trained_names: Vec<String> = trained.iter().map(|&j| names[j].clone()).collect();
    let rank = || -> Result<Vec<usize>> {
        let ranked = rank_initial_subset(&y.select_columns(&trained), &trained_names, g, s, config.seed)?;
        Ok(ranked.into_iter().map(|i| trained[i]).collect())
    };
    // a seed holding every trained variable only needs the ranking to shrink
    let mut ranked = s < trained.len();
    let mut seed: Vec<usize> = if ranked { rank()? } else { trained.clone() };

    let current = loop {
        match searcher.bic_class(&seed) {
            Ok(fit) => break fit,
            Err(e) if !ranked => {
                log::debug!("full initial subset failed ({e}); ranking it");
                seed = rank()?;
                ranked = true;
            }
            Err(e) if seed.len() > 2 => {
                log::warn!("initial subset of {} variables failed ({e}); dropping {}", seed.len(), names[*seed.last().unwrap()]);
                seed.pop();
            }
            Err(e) => return Err(e),
        }
    };

    let provenance: Vec<Provenance> = (0..names.len()).map(|j| searcher.provenance(j)).collect();
    let mut by_name: Vec<usize> = (0..names.len()).collect();
    by_name.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut state = VarSelState {
        selected: seed.clone(),
        candidates: by_name.iter().copied().filter(|j| !seed.contains(j)).collect(),
        rejected: Vec::new(),
        provenance,
        history: Vec::new(),
        current,
    };
    let mut steps = 0;
    while steps < config.max_steps {
        let mut changed = false;
        let mut added = None;

        if !state.candidates.is_empty() {
            steps += 1;
            let pool = state.candidates.clone();
            let (best, failed) = best_proposal(&mut searcher, &state.selected, &pool, Action::Add);
            for (v, reason) in failed {
                log::debug!("step {steps}: cannot add {}: {reason}", names[v]);
                state.candidates.retain(|&c| c != v);
                state.history.push(HistoryEntry { step: steps, var: names[v].clone(), action: Action::Reject, delta_bic: f64::NAN });
                state.rejected.push((v, reason));
            }
            if let Some(ev) = best {
                let action = if ev.accept { Action::Add } else { Action::Reject };
                log::debug!("step {steps}: add {} Δ={:.4} ({action:?})", names[ev.variable], ev.delta_bic);
                state.history.push(HistoryEntry { step: steps, var: names[ev.variable].clone(), action, delta_bic: ev.delta_bic });
                if ev.accept {
                    state.candidates.retain(|&c| c != ev.variable);
                    state.selected.push(ev.variable);
                    state.current = ev.fit;
                    added = Some(ev.variable);
                    changed = true;
                }
            }
        }
        if steps >= config.max_steps {
            break;
        }

        let n_trained = state.selected.iter().filter(|&&j| state.provenance[j] == Provenance::Trained).count();
        let removable: Vec<usize> = by_name
            .iter()
            .copied()
            .filter(|j| state.selected.contains(j) && Some(*j) != added)
            .filter(|&j| !(state.provenance[j] == Provenance::Trained && n_trained == 1))
            .collect();
        if !removable.is_empty() {
            steps += 1;
            let (best, failed) = best_proposal(&mut searcher, &state.selected, &removable, Action::Remove);
            for (v, reason) in failed {
                log::debug!("step {steps}: cannot remove {}: {reason}", names[v]);
                state.history.push(HistoryEntry { step: steps, var: names[v].clone(), action: Action::Reject, delta_bic: f64::NAN });
            }
            if let Some(ev) = best {
                let action = if ev.accept { Action::Remove } else { Action::Reject };
                log::debug!("step {steps}: remove {} Δ={:.4} ({action:?})", names[ev.variable], ev.delta_bic);
                state.history.push(HistoryEntry { step: steps, var: names[ev.variable].clone(), action, delta_bic: ev.delta_bic });
                if ev.accept {
                    state.selected.retain(|&j| j != ev.variable);
                    let pos = state
                        .candidates
                        .iter()
                        .position(|&c| names[c] > names[ev.variable])
                        .unwrap_or(state.candidates.len());
                    state.candidates.insert(pos, ev.variable);
                    state.current = ev.fit;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    log::info!("selection finished after {steps} attempts and {} distinct fits", searcher.fits());
    Ok(SelectionResult {
        state,
        seed,
        names: names.to_vec(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::{bic_h, log_likelihood, run_em};
    use crate::edda::{fit_edda, CovStructure};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Two classes far apart on `informative` columns, pure noise elsewhere.
    fn two_class(rng: &mut ChaCha8Rng, n: usize, informative: usize, noise: usize) -> (DMatrix<f64>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y = DMatrix::from_fn(n, informative + noise, |i, j| {
            let z: f64 = StandardNormal.sample(rng);
            if j < informative { z + 10.0 * labels[i] as f64 } else { z }
        });
        (y, labels)
    }

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|j| format!("v{j:02}")).collect()
    }

    fn learned_on(x: &DMatrix<f64>, labels: &[usize], cols: &[usize], all: &[String]) -> EddaModel {
        fit_edda(&x.select_columns(cols), labels, &[CovStructure::VVV])
            .unwrap()
            .with_variable_names(cols.iter().map(|&j| all[j].clone()).collect())
            .unwrap()
    }

    fn quick() -> VarSelConfig {
        VarSelConfig { seed_size: None, h_range: vec![0, 1], ..VarSelConfig::default() }
    }

    #[test]
    fn noise_addition_and_informative_removal_are_declined() {
        let mut add_rejects = 0;
        let mut remove_rejects = 0;
        for rep in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let (x, lx) = two_class(&mut rng, 80, 2, 1);
            let (y, _) = two_class(&mut rng, 80, 2, 1);
            let all = names(3);
            let learned = learned_on(&x, &lx, &[0, 1], &all);
            let mut s = Searcher::new(&learned, &y, &all, &[0, 1], EmConfig::default()).unwrap();
            if !s.evaluate_candidate(&[0, 1], 2, Action::Add).unwrap().accept {
                add_rejects += 1;
            }
            if !s.evaluate_candidate(&[0, 1], 1, Action::Remove).unwrap().accept {
                remove_rejects += 1;
            }
        }
        assert!(add_rejects > 10, "{add_rejects}/20");
        assert!(remove_rejects > 10, "{remove_rejects}/20");
    }

    #[test]
    fn exact_copies_are_never_added() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, lx) = two_class(&mut rng, 80, 2, 0);
        let (y2, _) = two_class(&mut rng, 80, 2, 0);
        let mut y = DMatrix::zeros(80, 4);
        for j in 0..2 {
            y.set_column(j, &y2.column(j));
            y.set_column(j + 2, &y2.column(j));
        }
        let all = names(4);
        let learned = learned_on(&x, &lx, &[0, 1], &all);
        let res = greedy_search(&learned, &y, &all, &quick()).unwrap();
        let mut sel = res.state.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1]);
        assert!(res.state.history.iter().all(|h| h.action == Action::Reject));
        assert_eq!(res.steps, 2);
    }

    #[test]
    fn zero_budget_returns_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, lx) = two_class(&mut rng, 60, 2, 2);
        let (y, _) = two_class(&mut rng, 60, 2, 2);
        let all = names(4);
        let learned = learned_on(&x, &lx, &[0, 1, 2], &all);
        let cfg = VarSelConfig { max_steps: 0, ..quick() };
        let res = greedy_search(&learned, &y, &all, &cfg).unwrap();
        assert_eq!(res.state.selected, res.seed);
        assert!(res.state.history.is_empty());
        let report = res.report();
        let mut seed = report.seed.clone();
        seed.sort();
        let mut sel = report.selected.clone();
        sel.sort();
        assert_eq!(seed, sel);
    }

    #[test]
    fn history_replays_to_final_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (x, lx) = two_class(&mut rng, 80, 3, 2);
        let (y, _) = two_class(&mut rng, 80, 3, 2);
        let all = names(5);
        // learned on one informative and one noise variable
        let learned = learned_on(&x, &lx, &[0, 3], &all);
        let res = greedy_search(&learned, &y, &all, &quick()).unwrap();
        let mut replay: Vec<String> = res.report().seed;
        for h in &res.state.history {
            match h.action {
                Action::Add => {
                    assert!(h.delta_bic > 0.0);
                    replay.push(h.var.clone());
                }
                Action::Remove => {
                    assert!(h.delta_bic > 0.0);
                    replay.retain(|v| v != &h.var);
                }
                Action::Reject => {}
            }
        }
        let mut fin = res.selected_names();
        fin.sort();
        replay.sort();
        assert_eq!(replay, fin);
        assert!(fin.contains(&"v01".to_owned()));
        assert!(!fin.contains(&"v04".to_owned()) && !fin.contains(&"v05".to_owned()));
    }

    #[test]
    fn bic_class_reduces_to_learned_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, lx) = two_class(&mut rng, 60, 2, 0);
        let (y, _) = two_class(&mut rng, 90, 2, 0);
        let all = names(2);
        let learned = learned_on(&x, &lx, &[0, 1], &all);
        let mut s = Searcher::new(&learned, &y, &all, &[0], EmConfig::default()).unwrap();
        let fit = s.bic_class(&[1, 0]).unwrap();
        let direct = run_em(&y, &learned, 0, &EmConfig::default()).unwrap();
        assert_eq!(fit.bic.to_bits(), direct.bic.to_bits());
        let l = log_likelihood(&y, &direct).unwrap();
        assert_close!(fit.bic, bic_h(l, 0, 2, 2, 0, 90), 1e-9);
        assert_close!(fit.bic, 2.0 * l - 90f64.ln(), 1e-9);
    }

    #[test]
    fn layout_orders_trained_then_extra_by_name() {
        let y = DMatrix::from_fn(10, 4, |i, j| (i * j) as f64);
        let all: Vec<String> = ["zeta", "b", "alpha", "a"].iter().map(|s| s.to_string()).collect();
        let learned = EddaModel {
            structure: CovStructure::EII,
            tau: vec![1.0],
            classes: vec![crate::gaussian::GaussianParams::new(nalgebra::DVector::zeros(2), DMatrix::identity(2, 2)).unwrap()],
            loglik: 0.0,
            bic: 0.0,
            variable_names: vec!["b".into(), "zeta".into()],
            class_labels: vec!["1".into()],
        };
        let s = Searcher::new(&learned, &y, &all, &[0], EmConfig::default()).unwrap();
        assert_eq!(s.layout(&[0, 1, 2, 3]), vec![1, 0, 3, 2]);
        assert_eq!(s.provenance(2), Provenance::TestOnly);
        let missing: Vec<String> = ["b", "q"].iter().map(|s| s.to_string()).collect();
        let bad = EddaModel { variable_names: missing, ..learned.clone() };
        assert!(matches!(
            Searcher::new(&bad, &y, &all, &[0], EmConfig::default()),
            Err(DamdaError::MissingColumns(_))
        ));
    }
}
