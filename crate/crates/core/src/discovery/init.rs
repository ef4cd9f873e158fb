use nalgebra::{DMatrix, DVector};

use super::mstep::{weighted_scatter, Regularizer};
use super::{DamdaModel, KnownClass};
use crate::edda::EddaModel;
use crate::error::{DamdaError, Result};
use crate::gaussian::{kl_match_score, GaussianParams, PartitionedCov};
use crate::hierarchy::{ward_linkage, Dendrogram};

/// Starting point for the discovery EM with `total_classes = K + H`
/// components.
///
/// The test rows are clustered by Ward linkage and the tree is cut at
/// `total_classes` clusters. Learned classes, in their learned order, each
/// claim the unclaimed cluster whose trained-variable moments have the lowest
/// [`kl_match_score`]. Claimed clusters keep the learned block and take the
/// cluster moments for the test-only and cross blocks; the rest seed the
/// hidden classes.
pub fn initialize(y: &DMatrix<f64>, learned: &EddaModel, total_classes: usize) -> Result<DamdaModel> {
    let tree = ward_linkage(y);
    let reg = Regularizer::from_data(y, total_classes);
    initialize_with_tree(y, learned, total_classes, &tree, &reg)
}

pub fn initialize_with_tree(
    y: &DMatrix<f64>,
    learned: &EddaModel,
    total_classes: usize,
    tree: &Dendrogram,
    reg: &Regularizer,
) -> Result<DamdaModel> {
    let (n, r) = y.shape();
    let k = learned.k();
    let p = learned.p();
    if r < p {
        return Err(DamdaError::DimensionMismatch { expected: p, found: r });
    }
    if total_classes < k {
        return Err(DamdaError::InvalidInput(format!(
            "{total_classes} components cannot hold {k} learned classes"
        )));
    }
    if n < total_classes {
        return Err(DamdaError::InvalidInput(format!(
            "{n} observations cannot seed {total_classes} components"
        )));
    }
    let labels = tree.cut_with_min_size(y, total_classes, 2)?;

    let mut clusters = Vec::with_capacity(total_classes);
    for g in 0..total_classes {
        let w: Vec<f64> = labels.iter().map(|&l| if l == g { 1.0 } else { 0.0 }).collect();
        let ws = weighted_scatter(y, &w)?;
        let scatter = if ws.is_usable() {
            ws.scatter
        } else {
            reg.apply(&ws.scatter)
        };
        let cov = scatter / ws.weight;
        clusters.push((GaussianParams::new(ws.mean, cov)?, ws.weight));
    }

    let trained: Vec<usize> = (0..p).collect();
    let scores = clusters
        .iter()
        .map(|(g, _)| {
            let gp = g.marginal(&trained)?;
            learned
                .classes
                .iter()
                .map(|c| kl_match_score(&gp, c))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let matched = greedy_match(&scores, k);

    let q = r - p;
    let extra: Vec<usize> = (p..r).collect();
    let mut known = Vec::with_capacity(k);
    let mut tau = Vec::with_capacity(total_classes);
    for (class, &g) in matched.iter().enumerate() {
        let (cluster, size) = &clusters[g];
        let fixed = learned.classes[class].clone();
        let aug_mean = DVector::from_fn(q, |j, _| cluster.mean()[p + j]);
        let cov = cluster.cov();
        let cross = cov.view((0, p), (p, q)).into_owned();
        let new_cov = crate::gaussian::submatrix(cov, &extra, &extra);
        let candidate = PartitionedCov::new(fixed.cov().clone(), cross.clone(), new_cov.clone())?;
        let cross = if candidate.is_valid() { cross } else { DMatrix::zeros(p, q) };
        known.push(KnownClass::new(fixed, aug_mean, cross, new_cov)?);
        tau.push(size / n as f64);
    }
    let mut hidden = Vec::new();
    for (g, (cluster, size)) in clusters.into_iter().enumerate() {
        if !matched.contains(&g) {
            hidden.push(cluster);
            tau.push(size / n as f64);
        }
    }
    DamdaModel::from_parts(known, hidden, tau)
}

/// `scores[g][k]`: each class `k` in order takes the lowest-scoring cluster
/// not yet taken. Ties resolve to the lower cluster index.
pub(crate) fn greedy_match(scores: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    (0..k)
        .map(|class| {
            let mut best: Option<usize> = None;
            for (g, row) in scores.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                if best.is_none_or(|b| row[class] < scores[b][class]) {
                    best = Some(g);
                }
            }
            let g = best.expect("at least K clusters");
            taken[g] = true;
            g
        })
        .collect()
}
