use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::wishart::{equicorrelation, sample_wishart};
use crate::error::{DamdaError, Result};
use crate::gaussian::pd_cholesky;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMatrix {
    Identity,
    /// Unit diagonal, constant off-diagonal.
    Equicorrelated(f64),
}

impl ScaleMatrix {
    fn matrix(self, dim: usize) -> DMatrix<f64> {
        match self {
            ScaleMatrix::Identity => DMatrix::identity(dim, dim),
            ScaleMatrix::Equicorrelated(rho) => equicorrelation(dim, rho),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariableRole {
    Gen,
    Cor,
    Noi,
}

impl VariableRole {
    pub fn prefix(self) -> &'static str {
        match self {
            VariableRole::Gen => "Gen",
            VariableRole::Cor => "Cor",
            VariableRole::Noi => "Noi",
        }
    }
}

/// Which variables the training set observes: `gen` random Gen variables,
/// `cor` random Cor variables, then `extra` drawn from the remaining Cor and
/// Noi variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedVariables {
    pub gen: usize,
    pub cor: usize,
    pub extra: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    pub n_gen: usize,
    pub n_cor: usize,
    pub n_noi: usize,
    /// Normalized to sum to one before sampling.
    pub proportions: Vec<f64>,
    /// Class `c` draws each Gen mean uniformly in `(−r_c, r_c)`.
    pub mean_ranges: Vec<f64>,
    /// Wishart degrees of freedom are `n_gen + offset`.
    pub wishart_df_offsets: Vec<f64>,
    pub wishart_scales: Vec<ScaleMatrix>,
    pub noi_correlated: bool,
    pub noi_correlation: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub hidden_classes_removed: usize,
    pub observed: ObservedVariables,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: "1.a".into(),
            n_gen: 10,
            n_cor: 30,
            n_noi: 60,
            proportions: vec![0.3, 0.4, 0.4, 0.3],
            mean_ranges: vec![7.0, 4.5, 0.5, 10.0],
            wishart_df_offsets: vec![0.0, 2.0, 1.0, 0.0],
            wishart_scales: vec![
                ScaleMatrix::Equicorrelated(0.7),
                ScaleMatrix::Identity,
                ScaleMatrix::Equicorrelated(0.5),
                ScaleMatrix::Identity,
            ],
            noi_correlated: true,
            noi_correlation: 0.5,
            train_size: 200,
            test_size: 200,
            hidden_classes_removed: 2,
            observed: ObservedVariables { gen: 10, cor: 0, extra: 10 },
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Preset for the experiment tags `1.a` … `3.c`. `sample_size` sets the
    /// test size, and the training size where the experiment ties them.
    pub fn experiment(tag: &str, sample_size: usize, seed: u64) -> Result<Self> {
        let base = Self::default();
        let (exp, variant) = tag
            .split_once('.')
            .ok_or_else(|| DamdaError::InvalidInput(format!("unknown scenario '{tag}'")))?;
        let (n_gen, n_cor, n_noi, noi_correlated, train_size) = match exp {
            "1" => (10, 30, 60, true, sample_size),
            "2" => (10, 30, 60, true, 50),
            "3" => (20, 60, 120, false, sample_size),
            _ => return Err(DamdaError::InvalidInput(format!("unknown scenario '{tag}'"))),
        };
        let observed = match (exp, variant) {
            ("1", "a") => ObservedVariables { gen: 10, cor: 0, extra: 10 },
            ("1", "b") => ObservedVariables { gen: 5, cor: 5, extra: 10 },
            ("1", "c") => ObservedVariables { gen: 2, cor: 0, extra: 18 },
            ("2", "a") => ObservedVariables { gen: 10, cor: 0, extra: 40 },
            ("2", "b") => ObservedVariables { gen: 5, cor: 15, extra: 30 },
            ("2", "c") => ObservedVariables { gen: 2, cor: 0, extra: 48 },
            ("3", "a") => ObservedVariables { gen: 20, cor: 0, extra: 20 },
            ("3", "b") => ObservedVariables { gen: 10, cor: 10, extra: 20 },
            ("3", "c") => ObservedVariables { gen: 4, cor: 0, extra: 36 },
            _ => return Err(DamdaError::InvalidInput(format!("unknown scenario '{tag}'"))),
        };
        Ok(Self {
            scenario: tag.to_owned(),
            n_gen,
            n_cor,
            n_noi,
            noi_correlated,
            train_size,
            test_size: sample_size,
            observed,
            seed,
            ..base
        })
    }

    pub fn n_classes(&self) -> usize {
        self.proportions.len()
    }

    pub fn n_variables(&self) -> usize {
        self.n_gen + self.n_cor + self.n_noi
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        let bad = |m: String| Err(DamdaError::InvalidInput(m));
        if self.n_gen < 2 {
            return bad("at least two Gen variables are required".into());
        }
        if c == 0 || self.mean_ranges.len() != c || self.wishart_df_offsets.len() != c || self.wishart_scales.len() != c {
            return bad("per-class settings must all have one entry per class".into());
        }
        if self.proportions.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("mixing proportions must be positive".into());
        }
        if self.hidden_classes_removed >= c {
            return bad(format!("cannot hide {} of {c} classes", self.hidden_classes_removed));
        }
        if self.wishart_df_offsets.iter().any(|&o| self.n_gen as f64 + o < self.n_gen as f64) {
            return bad("Wishart degrees of freedom must be at least the number of Gen variables".into());
        }
        let o = self.observed;
        if o.gen > self.n_gen || o.cor > self.n_cor || o.extra > self.n_cor - o.cor + self.n_noi {
            return bad("observed-variable rule asks for more variables than exist".into());
        }
        if o.gen + o.cor + o.extra == 0 {
            return bad("the training set must observe at least one variable".into());
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("sample sizes must be positive".into());
        }
        if !(self.noi_correlation > -1.0 / (self.n_noi.max(2) - 1) as f64 && self.noi_correlation < 1.0) {
            return bad("Noi correlation does not give a positive definite matrix".into());
        }
        Ok(())
    }
}

/// Simulated training and test sets with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedWorld {
    /// `M × P`, columns in test-column order restricted to the observed mask.
    pub x_train: DMatrix<f64>,
    /// True class (`0..C`) of each training row.
    pub labels_train: Vec<usize>,
    pub y_test: DMatrix<f64>,
    pub labels_test: Vec<usize>,
    pub names: Vec<String>,
    pub roles: Vec<VariableRole>,
    pub observed: Vec<bool>,
    /// Classes present in the training set, ascending.
    pub observed_classes: Vec<usize>,
    /// Gen parents of each Cor variable, as Gen indices.
    pub cor_parents: Vec<(usize, usize)>,
}

/// Roles sidecar written next to an exported world.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldRoles {
    pub names: Vec<String>,
    pub roles: Vec<VariableRole>,
    pub observed: Vec<bool>,
    pub observed_classes: Vec<usize>,
    pub cor_parents: Vec<(usize, usize)>,
}

impl GeneratedWorld {
    pub fn observed_columns(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&j| self.observed[j]).collect()
    }

    pub fn train_names(&self) -> Vec<String> {
        self.observed_columns().into_iter().map(|j| self.names[j].clone()).collect()
    }

    /// Training labels recoded to `0..K` in the order of `observed_classes`.
    pub fn compact_train_labels(&self) -> Vec<usize> {
        self.labels_train
            .iter()
            .map(|l| self.observed_classes.iter().position(|c| c == l).expect("observed class"))
            .collect()
    }

    pub fn roles_sidecar(&self) -> WorldRoles {
        WorldRoles {
            names: self.names.clone(),
            roles: self.roles.clone(),
            observed: self.observed.clone(),
            observed_classes: self.observed_classes.clone(),
            cor_parents: self.cor_parents.clone(),
        }
    }
}

fn draw_class<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

fn normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Draws a world following the Gen/Cor/Noi protocol.
pub fn generate_world(config: &ScenarioConfig) -> Result<GeneratedWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g = config.n_gen;
    let c = config.n_classes();

    let means: Vec<DVector<f64>> = config
        .mean_ranges
        .iter()
        .map(|&r| DVector::from_fn(g, |_, _| rng.random_range(-r..=r)))
        .collect();
    let mut chols = Vec::with_capacity(c);
    for (offset, scale) in config.wishart_df_offsets.iter().zip(&config.wishart_scales) {
        let cov = sample_wishart(g as f64 + offset, &scale.matrix(g), &mut rng)?;
        let chol = pd_cholesky(&cov).ok_or_else(|| DamdaError::NotPositiveDefinite("class covariance".into()))?;
        chols.push(chol.l());
    }
    let cor_parents: Vec<(usize, usize)> = (0..config.n_cor)
        .map(|_| {
            let pick = sample(&mut rng, g, 2);
            (pick.index(0), pick.index(1))
        })
        .collect();
    let noi_l = if config.noi_correlated && config.n_noi > 0 {
        Some(
            pd_cholesky(&equicorrelation(config.n_noi, config.noi_correlation))
                .ok_or_else(|| DamdaError::NotPositiveDefinite("Noi covariance".into()))?
                .l(),
        )
    } else {
        None
    };

    let mut observed_classes = sorted_sample(&mut rng, c, c - config.hidden_classes_removed);
    observed_classes.sort_unstable();

    let o = config.observed;
    let gen_obs = sorted_sample(&mut rng, g, o.gen);
    let cor_obs = sorted_sample(&mut rng, config.n_cor, o.cor);
    let pool: Vec<usize> = (g..config.n_variables())
        .filter(|&j| !cor_obs.contains(&(j - g)))
        .collect();
    let extra: Vec<usize> = sorted_sample(&mut rng, pool.len(), o.extra).into_iter().map(|i| pool[i]).collect();
    let mut observed = vec![false; config.n_variables()];
    for j in gen_obs.iter().copied().chain(cor_obs.iter().map(|&k| g + k)).chain(extra) {
        observed[j] = true;
    }

    let r = config.n_variables();
    let draw_row = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let x = &means[class] + &chols[class] * normal_vector(g, rng);
        let mut row = Vec::with_capacity(r);
        row.extend(x.iter());
        for &(a, b) in &cor_parents {
            let e: f64 = StandardNormal.sample(rng);
            row.push(x[a] + x[b] + e);
        }
        let z = normal_vector(config.n_noi, rng);
        match &noi_l {
            Some(l) => row.extend((l * z).iter()),
            None => row.extend(z.iter()),
        }
        row
    };

    let all_cum = cumulative(&config.proportions);
    let mut y_rows = Vec::with_capacity(config.test_size * r);
    let mut labels_test = Vec::with_capacity(config.test_size);
    for _ in 0..config.test_size {
        let class = draw_class(&all_cum, &mut rng);
        labels_test.push(class);
        y_rows.extend(draw_row(class, &mut rng));
    }
    let train_cum = cumulative(&observed_classes.iter().map(|&k| config.proportions[k]).collect::<Vec<_>>());
    let cols: Vec<usize> = (0..r).filter(|&j| observed[j]).collect();
    let mut x_rows = Vec::with_capacity(config.train_size * cols.len());
    let mut labels_train = Vec::with_capacity(config.train_size);
    for _ in 0..config.train_size {
        let class = observed_classes[draw_class(&train_cum, &mut rng)];
        labels_train.push(class);
        let row = draw_row(class, &mut rng);
        x_rows.extend(cols.iter().map(|&j| row[j]));
    }

    let roles: Vec<VariableRole> = std::iter::repeat_n(VariableRole::Gen, g)
        .chain(std::iter::repeat_n(VariableRole::Cor, config.n_cor))
        .chain(std::iter::repeat_n(VariableRole::Noi, config.n_noi))
        .collect();
    let names = role_names(&roles);
    Ok(GeneratedWorld {
        x_train: DMatrix::from_row_slice(config.train_size, cols.len(), &x_rows),
        labels_train,
        y_test: DMatrix::from_row_slice(config.test_size, r, &y_rows),
        labels_test,
        names,
        roles,
        observed,
        observed_classes,
        cor_parents,
    })
}

fn role_names(roles: &[VariableRole]) -> Vec<String> {
    let mut counts = [0usize; 3];
    roles
        .iter()
        .map(|&role| {
            let slot = role as usize;
            counts[slot] += 1;
            format!("{}{}", role.prefix(), counts[slot])
        })
        .collect()
}

/// Well separated classes for checking hidden-class detection: every pair of
/// class means is at least `separation` apart in the Mahalanobis metric of
/// the pooled covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatedConfig {
    pub classes: usize,
    pub hidden: usize,
    /// Variables observed in training.
    pub p: usize,
    /// Test-only variables.
    pub q: usize,
    pub separation: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SeparatedConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            hidden: 2,
            p: 2,
            q: 1,
            separation: 6.0,
            train_size: 200,
            test_size: 400,
            seed: 0,
        }
    }
}

pub fn generate_separated_world(config: &SeparatedConfig) -> Result<GeneratedWorld> {
    let (c, r) = (config.classes, config.p + config.q);
    if c == 0 || config.hidden >= c || config.p == 0 || config.test_size == 0 || config.train_size == 0 {
        return Err(DamdaError::InvalidInput("invalid separated-world configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let df = (r + 4) as f64;
    let covs: Vec<DMatrix<f64>> = (0..c)
        .map(|_| sample_wishart(df, &DMatrix::identity(r, r), &mut rng).map(|w| w / df))
        .collect::<Result<_>>()?;
    let pooled = covs.iter().fold(DMatrix::zeros(r, r), |acc, s| acc + s) / c as f64;
    let pooled_chol = pd_cholesky(&pooled).expect("average of positive definite matrices");
    let mut means: Vec<DVector<f64>> = (0..c)
        .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-1.0..=1.0)))
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..c {
        for b in (a + 1)..c {
            let d = &means[a] - &means[b];
            min_dist = min_dist.min(d.dot(&pooled_chol.solve(&d)).sqrt());
        }
    }
    if min_dist < config.separation {
        // scaling the means about the origin scales every distance alike
        let f = config.separation / min_dist * (1.0 + 1e-9);
        for m in &mut means {
            *m *= f;
        }
    }
    let chols: Vec<DMatrix<f64>> = covs.iter().map(|s| pd_cholesky(s).expect("Wishart draw").l()).collect();
    let mut observed_classes = sorted_sample(&mut rng, c, c - config.hidden);
    observed_classes.sort_unstable();

    let draw = |class: usize, rng: &mut ChaCha8Rng| &means[class] + &chols[class] * normal_vector(r, rng);
    let mut y = DMatrix::zeros(config.test_size, r);
    let mut labels_test = Vec::with_capacity(config.test_size);
    for i in 0..config.test_size {
        let class = rng.random_range(0..c);
        labels_test.push(class);
        y.set_row(i, &draw(class, &mut rng).transpose());
    }
    let mut x = DMatrix::zeros(config.train_size, config.p);
    let mut labels_train = Vec::with_capacity(config.train_size);
    for i in 0..config.train_size {
        let class = observed_classes[rng.random_range(0..observed_classes.len())];
        labels_train.push(class);
        let row = draw(class, &mut rng);
        x.set_row(i, &row.rows(0, config.p).transpose());
    }
    Ok(GeneratedWorld {
        x_train: x,
        labels_train,
        y_test: y,
        labels_test,
        names: (1..=r).map(|j| format!("v{j}")).collect(),
        roles: vec![VariableRole::Gen; r],
        observed: (0..r).map(|j| j < config.p).collect(),
        observed_classes,
        cor_parents: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_gen: 4,
            n_cor: 3,
            n_noi: 5,
            observed: ObservedVariables { gen: 4, cor: 0, extra: 2 },
            train_size: 60,
            test_size: 80,
            seed: 3,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn shapes_and_training_classes() {
        let w = generate_world(&small()).unwrap();
        assert_eq!(w.x_train.shape(), (60, 6));
        assert_eq!(w.y_test.shape(), (80, 12));
        assert_eq!(w.observed.iter().filter(|&&o| o).count(), 6);
        let mut seen = w.labels_train.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen, w.observed_classes);
        assert_eq!(w.names[0], "Gen1");
        assert_eq!(w.names[4], "Cor1");
        assert_eq!(w.names[11], "Noi5");
        assert!(w.observed[..4].iter().all(|&o| o));
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&ScenarioConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.y_test, c.y_test);
    }

    #[test]
    fn cor_columns_follow_their_parents() {
        let cfg = ScenarioConfig { test_size: 400, ..small() };
        let w = generate_world(&cfg).unwrap();
        let corr = |a: usize, b: usize| {
            let (x, y) = (w.y_test.column(a), w.y_test.column(b));
            let (mx, my) = (x.mean(), y.mean());
            let sxy: f64 = x.iter().zip(y.iter()).map(|(u, v)| (u - mx) * (v - my)).sum();
            let sxx: f64 = x.iter().map(|u| (u - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
            sxy / (sxx * syy).sqrt()
        };
        for (k, &(a, b)) in w.cor_parents.iter().enumerate() {
            assert_ne!(a, b);
            assert!(corr(4 + k, a).abs() > 0.3);
            assert!(corr(4 + k, b).abs() > 0.3);
        }
    }

    #[test]
    fn experiment_presets() {
        let c = ScenarioConfig::experiment("2.b", 100, 1).unwrap();
        assert_eq!(c.train_size, 50);
        assert_eq!(c.observed, ObservedVariables { gen: 5, cor: 15, extra: 30 });
        let c = ScenarioConfig::experiment("3.c", 400, 1).unwrap();
        assert!(!c.noi_correlated);
        assert_eq!(c.n_variables(), 200);
        assert!(ScenarioConfig::experiment("4.a", 100, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig { n_gen: 1, ..small() }.validate().is_err());
        assert!(ScenarioConfig { hidden_classes_removed: 4, ..small() }.validate().is_err());
        assert!(ScenarioConfig { observed: ObservedVariables { gen: 5, cor: 0, extra: 0 }, ..small() }.validate().is_err());
    }

    #[test]
    fn separated_world_meets_separation() {
        let cfg = SeparatedConfig { seed: 9, ..SeparatedConfig::default() };
        let w = generate_separated_world(&cfg).unwrap();
        assert_eq!(w.x_train.ncols(), 2);
        assert_eq!(w.y_test.shape(), (400, 3));
        assert_eq!(w.observed_classes.len(), 2);
        assert!(w.labels_train.iter().all(|l| w.observed_classes.contains(l)));
    }
}
