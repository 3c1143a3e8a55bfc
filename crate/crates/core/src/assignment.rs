//! Maximum-score bipartite matching (Kuhn-Munkres) and an exhaustive oracle.
//!
//! Both solvers return the lexicographically smallest row-sorted pair list
//! among the optimal matchings, so they agree pair-for-pair, not just in
//! total score.

use crate::error::{Result, StoaError};
use crate::nn_core::Tensor;

/// An optimal matching of cardinality `min(n, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the matched entries, accumulated in row order.
    pub total_score: f64,
}

impl Assignment {
    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Largest `min(n, m)` for which [`brute_force_assignment`] will enumerate.
pub const BRUTE_FORCE_MAX_CARDINALITY: usize = 7;
const BRUTE_FORCE_MAX_INJECTIONS: f64 = 5e6;

pub fn solve_assignment(score: &Tensor) -> Result<Assignment> {
    validate(score)?;
    let (n, m) = score.shape();
    let k = n.min(m);
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = best_value(score, &all_rows, &all_cols);
    let tol = tolerance(score, k);

    let mut pairs = Vec::with_capacity(k);
    let mut used = vec![false; m];
    let mut prefix = 0.0;
    let mut next_row = 0;
    while pairs.len() < k {
        let need = k - pairs.len() - 1;
        let mut chosen = None;
        'search: for r in next_row..n {
            let rest_rows: Vec<usize> = (r + 1..n).collect();
            for c in 0..m {
                if used[c] {
                    continue;
                }
                let rest_cols: Vec<usize> = (0..m).filter(|&j| !used[j] && j != c).collect();
                if rest_rows.len().min(rest_cols.len()) < need {
                    continue;
                }
                let value = prefix + score.get(r, c) + best_value(score, &rest_rows, &rest_cols);
                if value >= best - tol {
                    chosen = Some((r, c));
                    break 'search;
                }
            }
        }
        let (r, c) = chosen.expect("an optimal completion always exists");
        pairs.push((r, c));
        used[c] = true;
        prefix += score.get(r, c);
        next_row = r + 1;
    }
    Ok(finish(score, pairs))
}

/// Exhaustive search over all injections; refuses when `min(n, m) > 7` or
/// the enumeration would be too large.
pub fn brute_force_assignment(score: &Tensor) -> Result<Assignment> {
    validate(score)?;
    let (n, m) = score.shape();
    let k = n.min(m);
    if k > BRUTE_FORCE_MAX_CARDINALITY {
        return Err(StoaError::Refused(format!(
            "brute force over min(n, m) = {k} exceeds {BRUTE_FORCE_MAX_CARDINALITY}"
        )));
    }
    let big = n.max(m);
    let count: f64 = (0..k).map(|i| (big - i) as f64).product::<f64>() * binomial(n.max(m) as f64, k as f64).max(1.0);
    if count > BRUTE_FORCE_MAX_INJECTIONS {
        return Err(StoaError::Refused(format!(
            "brute force over a {n}x{m} matrix needs ~{count:.0} injections"
        )));
    }

    let mut best = f64::NEG_INFINITY;
    enumerate(score, k, &mut Vec::new(), &mut vec![false; m], 0, &mut |pairs| {
        best = best.max(row_order_sum(score, pairs));
        false
    });
    let tol = tolerance(score, k);
    let mut winner = None;
    enumerate(score, k, &mut Vec::new(), &mut vec![false; m], 0, &mut |pairs| {
        if row_order_sum(score, pairs) >= best - tol {
            winner = Some(pairs.to_vec());
            true
        } else {
            false
        }
    });
    Ok(finish(score, winner.expect("at least one injection exists")))
}

fn validate(score: &Tensor) -> Result<()> {
    let (n, m) = score.shape();
    if n == 0 || m == 0 {
        return Err(StoaError::Shape(format!("empty {n}x{m} score matrix")));
    }
    if let Some(pos) = score.data().iter().position(|v| !v.is_finite()) {
        return Err(StoaError::Numeric(format!(
            "non-finite score at ({}, {})",
            pos / m,
            pos % m
        )));
    }
    Ok(())
}

fn tolerance(score: &Tensor, k: usize) -> f64 {
    let max_abs = score.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    1e-9 * (1.0 + max_abs * k as f64)
}

fn row_order_sum(score: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().fold(0.0, |acc, &(r, c)| acc + score.get(r, c))
}

fn finish(score: &Tensor, pairs: Vec<(usize, usize)>) -> Assignment {
    let total_score = row_order_sum(score, &pairs);
    Assignment { pairs, total_score }
}

fn binomial(n: f64, k: f64) -> f64 {
    let mut r = 1.0;
    let mut i = 0.0;
    while i < k {
        r *= (n - i) / (i + 1.0);
        i += 1.0;
    }
    r
}

/// Visits every `k`-matching in lexicographic order; stops when `visit`
/// returns true. Returns whether it stopped early.
fn enumerate(
    score: &Tensor,
    k: usize,
    pairs: &mut Vec<(usize, usize)>,
    used: &mut Vec<bool>,
    next_row: usize,
    visit: &mut dyn FnMut(&[(usize, usize)]) -> bool,
) -> bool {
    if pairs.len() == k {
        return visit(pairs);
    }
    let (n, m) = score.shape();
    let need = k - pairs.len();
    for r in next_row..n {
        if n - r < need {
            break;
        }
        for c in 0..m {
            if used[c] {
                continue;
            }
            used[c] = true;
            pairs.push((r, c));
            let stop = enumerate(score, k, pairs, used, r + 1, visit);
            pairs.pop();
            used[c] = false;
            if stop {
                return true;
            }
        }
    }
    false
}

/// Optimal total of a maximum-cardinality matching on the sub-matrix.
fn best_value(score: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let (a, b, transposed) = if rows.len() <= cols.len() {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let entry = |i: usize, j: usize| {
        if transposed {
            score.get(b[j], a[i])
        } else {
            score.get(a[i], b[j])
        }
    };
    let assign = hungarian_min(a.len(), b.len(), |i, j| -entry(i, j));
    assign.iter().enumerate().map(|(i, &j)| entry(i, j)).sum()
}

/// Minimum-cost assignment of every row for an `n × m` cost with `n <= m`;
/// returns the column of each row.
fn hungarian_min(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn identity_dominant() {
        let s = mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let a = solve_assignment(&s).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_score, 3.0);
    }

    #[test]
    fn single_row_picks_first_argmax() {
        let s = mat(&[&[0.2, 0.9, 0.9, 0.1]]);
        assert_eq!(solve_assignment(&s).unwrap().pairs, vec![(0, 1)]);
        assert_eq!(brute_force_assignment(&s).unwrap().pairs, vec![(0, 1)]);
    }

    #[test]
    fn two_by_two_by_hand() {
        // options: (0,0)+(1,1) = 1, (0,1)+(1,0) = 5
        let s = mat(&[&[1.0, 2.0], &[3.0, 0.0]]);
        for a in [solve_assignment(&s).unwrap(), brute_force_assignment(&s).unwrap()] {
            assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
            assert_eq!(a.total_score, 5.0);
        }
    }

    #[test]
    fn one_by_one() {
        let s = mat(&[&[-4.0]]);
        assert_eq!(brute_force_assignment(&s).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn tall_matrix_leaves_rows_unmatched() {
        let s = mat(&[&[0.1], &[0.7], &[0.7]]);
        let a = solve_assignment(&s).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
    }

    #[test]
    fn nan_is_numeric_error() {
        let s = mat(&[&[0.0, f64::NAN]]);
        assert!(matches!(solve_assignment(&s), Err(StoaError::Numeric(_))));
        assert!(matches!(brute_force_assignment(&s), Err(StoaError::Numeric(_))));
    }

    #[test]
    fn brute_force_refuses_large_inputs() {
        let s = Tensor::zeros(8, 8);
        assert!(matches!(brute_force_assignment(&s), Err(StoaError::Refused(_))));
        assert!(solve_assignment(&s).is_ok());
    }

    #[test]
    fn all_ties_choose_lexicographic_first() {
        let s = Tensor::filled(3, 4, 1.0);
        let a = solve_assignment(&s).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(brute_force_assignment(&s).unwrap().pairs, a.pairs);
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..=5, 1usize..=5).prop_flat_map(|(n, m)| {
            proptest::collection::vec(-3.0f64..3.0, n * m).prop_map(move |d| Tensor::from_vec(n, m, d))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(s in matrix_strategy()) {
            let a = solve_assignment(&s).unwrap();
            let b = brute_force_assignment(&s).unwrap();
            prop_assert_eq!(a.total_score, b.total_score);
            prop_assert_eq!(a.pairs.len(), s.rows().min(s.cols()));
        }

        #[test]
        fn row_permutation_covariance(s in matrix_strategy(), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..s.rows()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut permuted = Tensor::zeros(s.rows(), s.cols());
            for (new_r, &old_r) in perm.iter().enumerate() {
                permuted.row_mut(new_r).copy_from_slice(s.row(old_r));
            }
            let a = solve_assignment(&s).unwrap();
            let b = solve_assignment(&permuted).unwrap();
            prop_assert!((a.total_score - b.total_score).abs() < 1e-9);
            let mut mapped: Vec<(usize, usize)> =
                b.pairs.iter().map(|&(r, c)| (perm[r], c)).collect();
            mapped.sort();
            prop_assert_eq!(mapped, a.pairs);
        }

        #[test]
        fn constant_shift_keeps_pairs(
            entries in proptest::collection::vec(-4i32..4, 12),
            shift in -10i32..10,
        ) {
            let s = Tensor::from_vec(3, 4, entries.iter().map(|&v| v as f64).collect());
            let shifted = s.map(|v| v + shift as f64);
            prop_assert_eq!(
                solve_assignment(&s).unwrap().pairs,
                solve_assignment(&shifted).unwrap().pairs
            );
        }
    }
}
