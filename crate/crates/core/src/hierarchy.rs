//! Ward-linkage agglomerative clustering used to seed the discovery EM.

use nalgebra::DMatrix;

use crate::error::{DamdaError, Result};

/// Merge history of an agglomerative clustering. Leaves are `0..n`; merge
/// `i` creates the cluster with id `n + i`.
#[derive(Clone, Debug)]
pub struct Dendrogram {
    n: usize,
    merges: Vec<Merge>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Ward linkage on squared Euclidean distances via the Lance–Williams
/// recurrence. Ties are broken by the lowest pair of cluster slots, so the
/// result is fully deterministic.
pub fn ward_linkage(y: &DMatrix<f64>) -> Dendrogram {
    let n = y.nrows();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = y
                .row(i)
                .iter()
                .zip(y.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    // nearest active neighbour (with j > i) cached per row
    let nearest = |i: usize, active: &[bool], dist: &[f64]| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for j in (i + 1)..n {
            if active[j] && best.is_none_or(|(_, d)| dist[i * n + j] < d) {
                best = Some((j, dist[i * n + j]));
            }
        }
        best
    };
    let mut nn: Vec<Option<(usize, f64)>> = (0..n).map(|i| nearest(i, &active, &dist)).collect();

    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            if let Some((j, d)) = nn[i] {
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let (a, b, d) = best.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((na + nk) * dist[a * n + k] + (nb + nk) * dist[b * n + k]
                - nk * dist[a * n + b])
                / (na + nb + nk);
            dist[a * n + k] = updated;
            dist[k * n + a] = updated;
        }
        active[b] = false;
        merges.push(Merge {
            left: id[a].min(id[b]),
            right: id[a].max(id[b]),
            height: d,
            size: size[a] + size[b],
        });
        size[a] += size[b];
        id[a] = n + step;

        for i in 0..n {
            if !active[i] {
                continue;
            }
            let stale = match nn[i] {
                Some((j, _)) => j == a || j == b,
                None => false,
            };
            if i == a || stale {
                nn[i] = nearest(i, &active, &dist);
            } else if i < a && dist[i * n + a] < nn[i].map_or(f64::INFINITY, |(_, d)| d) {
                nn[i] = Some((a, dist[i * n + a]));
            }
        }
    }
    Dendrogram { n, merges }
}

impl Dendrogram {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Flat partition into `c` clusters. Labels are numbered by the first
    /// row in which they appear.
    pub fn cut(&self, c: usize) -> Result<Vec<usize>> {
        if c == 0 || c > self.n {
            return Err(DamdaError::InvalidInput(format!(
                "cannot cut {} observations into {c} clusters",
                self.n
            )));
        }
        let mut parent: Vec<usize> = (0..2 * self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (i, m) in self.merges.iter().take(self.n - c).enumerate() {
            let node = self.n + i;
            let (l, r) = (find(&mut parent, m.left), find(&mut parent, m.right));
            parent[l] = node;
            parent[r] = node;
        }
        let mut labels = vec![usize::MAX; self.n];
        let mut roots: Vec<usize> = Vec::new();
        for (i, label) in labels.iter_mut().enumerate() {
            let root = find(&mut parent, i);
            *label = match roots.iter().position(|&r| r == root) {
                Some(pos) => pos,
                None => {
                    roots.push(root);
                    roots.len() - 1
                }
            };
        }
        Ok(labels)
    }

    /// Partition into exactly `c` clusters of at least `min_size` rows.
    /// The tree is cut at successively finer levels until `c` clusters reach
    /// `min_size`; rows of smaller clusters join the nearest large cluster
    /// by centroid distance.
    pub fn cut_with_min_size(&self, y: &DMatrix<f64>, c: usize, min_size: usize) -> Result<Vec<usize>> {
        for level in c..=self.n {
            let labels = self.cut(level)?;
            let mut sizes = vec![0usize; level];
            for &l in &labels {
                sizes[l] += 1;
            }
            let big: Vec<usize> = (0..level).filter(|&g| sizes[g] >= min_size).collect();
            if big.len() != c {
                continue;
            }
            let centroids: Vec<Vec<f64>> = big
                .iter()
                .map(|&g| {
                    let rows: Vec<usize> = (0..self.n).filter(|&i| labels[i] == g).collect();
                    (0..y.ncols())
                        .map(|j| rows.iter().map(|&i| y[(i, j)]).sum::<f64>() / rows.len() as f64)
                        .collect()
                })
                .collect();
            let relabel: Vec<Option<usize>> = (0..level).map(|g| big.iter().position(|&b| b == g)).collect();
            let out = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    relabel[l].unwrap_or_else(|| {
                        let mut best = (0, f64::INFINITY);
                        for (b, cen) in centroids.iter().enumerate() {
                            let d: f64 = cen
                                .iter()
                                .enumerate()
                                .map(|(j, m)| (y[(i, j)] - m).powi(2))
                                .sum();
                            if d < best.1 {
                                best = (b, d);
                            }
                        }
                        best.0
                    })
                })
                .collect();
            return Ok(out);
        }
        Err(DamdaError::InvalidInput(format!(
            "cannot form {c} clusters with at least {min_size} members from {} rows",
            self.n
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_groups_are_recovered() {
        let y = DMatrix::from_row_slice(
            7,
            1,
            &[0.0, 0.1, 0.2, 10.0, 10.1, 20.0, 20.3],
        );
        let tree = ward_linkage(&y);
        assert_eq!(tree.merges().len(), 6);
        assert_eq!(tree.cut(3).unwrap(), vec![0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(tree.cut(1).unwrap(), vec![0; 7]);
        assert_eq!(tree.cut(7).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(tree.cut(8).is_err());
    }

    #[test]
    fn ward_heights_match_merge_cost() {
        // singletons merge at |a−b|²; later heights follow Lance–Williams
        let y = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let tree = ward_linkage(&y);
        assert_eq!(tree.merges()[0].height, 1.0);
        // ((1+1)·9 + (1+1)·4 − 1·1) / 3
        assert_eq!(tree.merges()[1].height, (2.0 * 9.0 + 2.0 * 4.0 - 1.0) / 3.0);
        let heights: Vec<f64> = tree.merges().iter().map(|m| m.height).collect();
        assert!(heights.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn singleton_outlier_is_absorbed() {
        let y = DMatrix::from_row_slice(6, 1, &[0.0, 0.1, 5.0, 5.1, 5.2, 100.0]);
        let tree = ward_linkage(&y);
        let labels = tree.cut_with_min_size(&y, 2, 2).unwrap();
        let mut sizes = [0; 2];
        for l in &labels {
            sizes[*l] += 1;
        }
        assert!(sizes.iter().all(|&s| s >= 2));
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[2], labels[3]);
    }
}
