use std::collections::HashMap;

use crate::error::{DamdaError, Result};

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(DamdaError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index. Returns 1 when the index is undefined
/// (both partitions trivial in the same way).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    // sort before summing so the result does not depend on hash order
    let sum = |m: Vec<usize>| {
        let mut v = m;
        v.sort_unstable();
        v.into_iter().map(pairs).sum::<f64>()
    };
    let index = sum(cells.into_values().collect());
    let sa = sum(rows.into_values().collect());
    let sb = sum(cols.into_values().collect());
    let total = pairs(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Misclassification rate after one-to-one matching of predicted labels to
/// true labels. Cells of the contingency table are matched greedily by
/// decreasing count; ties go to the cell whose first row comes earliest.
/// Rows of unmatched predicted classes are errors.
pub fn matched_error(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    // (count, first row) per (truth, pred) cell
    let mut cells: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        cells.entry((t, p)).or_insert((0, i)).0 += 1;
    }
    let mut order: Vec<((usize, usize), (usize, usize))> = cells.into_iter().collect();
    order.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    let mut used_t = Vec::new();
    let mut used_p = Vec::new();
    let mut correct = 0;
    for ((t, p), (count, _)) in order {
        if used_t.contains(&t) || used_p.contains(&p) {
            continue;
        }
        used_t.push(t);
        used_p.push(p);
        correct += count;
    }
    Ok(1.0 - correct as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_trivial_cases() {
        let a = [0, 0, 1, 1, 2];
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
        assert_eq!(ari(&a, &[5, 5, 3, 3, 9]).unwrap(), 1.0);
        assert!(ari(&a, &[0, 1]).is_err());
    }

    #[test]
    fn ari_crossed_partitions() {
        // contingency [[1,1],[1,1]]: index 0, expected 2·2/6, max 2
        let v = ari(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap();
        let expected = 2.0 * 2.0 / 6.0;
        assert_close!(v, (0.0 - expected) / (2.0 - expected), 1e-15);
        assert_close!(v, -0.5, 1e-15);
    }

    #[test]
    fn matched_error_examples() {
        assert_eq!(matched_error(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap(), 0.0);
        assert_eq!(matched_error(&[0, 1, 1, 2], &[7, 3, 3, 0]).unwrap(), 0.0);
        assert_eq!(matched_error(&[1, 1, 1, 2], &[1, 1, 2, 2]).unwrap(), 0.25);
        // a third predicted class stays unmatched
        assert_eq!(matched_error(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap(), 0.25);
    }

    #[test]
    fn matched_error_exhaustive_oracle_on_small_table() {
        // exhaustive search over injective maps pred → truth for the 4-row example
        let truth = [1usize, 1, 1, 2];
        let pred = [1usize, 1, 2, 2];
        let mut best = 0;
        for (m1, m2) in [(1, 2), (2, 1)] {
            let hit = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == if p == 1 { m1 } else { m2 })
                .count();
            best = best.max(hit);
        }
        assert_eq!(matched_error(&truth, &pred).unwrap(), 1.0 - best as f64 / 4.0);
    }
}
