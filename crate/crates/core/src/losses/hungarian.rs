//! Minimum-cost bipartite assignment.
//!
//! Shortest-augmenting-path Hungarian algorithm with row/column potentials,
//! O(n²m) for an n×m matrix with n ≤ m. Among all optimal assignments the
//! lexicographically smallest sorted pair list is returned, so results do not
//! depend on the solver's internal visiting order.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Matched `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Optimal cost of a rectangular problem with `rows ≤ cols`; every row is
/// matched. Returns the column chosen for each row.
fn solve_wide(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut owner = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            col_of[owner[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i][col_of[i]]).sum();
    (total, col_of)
}

/// Optimal cost of matching `min(rows, cols)` pairs between the given subsets.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = if rows.len() <= cols.len() {
        rows.iter()
            .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
            .collect()
    } else {
        cols.iter()
            .map(|&c| rows.iter().map(|&r| cost[r][c]).collect())
            .collect()
    };
    solve_wide(&sub).0
}

/// Minimum-cost assignment of `min(K, M)` pairs for a K×M cost matrix.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let k = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if k == 0 || m == 0 {
        return Err(Error::ShapeMismatch("cost matrix must be at least 1x1".into()));
    }
    if let Some(r) = cost.iter().position(|row| row.len() != m) {
        return Err(Error::ShapeMismatch(format!("row {r} has length {}", cost[r].len())));
    }
    for (r, row) in cost.iter().enumerate() {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { row: r, col: c });
        }
    }

    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let scale: f64 = cost.iter().flatten().map(|v| v.abs()).fold(1.0, f64::max);
    let tol = 1e-12 * scale * (k.max(m) as f64);
    let target = k.min(m);

    // Decide rows in order; try columns ascending, then "unmatched", keeping
    // the first choice that still admits an optimal completion.
    let mut pairs = Vec::with_capacity(target);
    let mut fixed = 0.0;
    let mut free_cols = all_cols;
    for r in 0..k {
        let rest: Vec<usize> = (r + 1..k).collect();
        let mut chosen = None;
        for (idx, &c) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            if pairs.len() + 1 + rest.len().min(cols.len()) != target {
                continue;
            }
            if fixed + cost[r][c] + optimum(cost, &rest, &cols) <= best + tol {
                chosen = Some(idx);
                break;
            }
        }
        match chosen {
            Some(idx) => {
                let c = free_cols.remove(idx);
                fixed += cost[r][c];
                pairs.push((r, c));
            }
            None => debug_assert!(pairs.len() + rest.len().min(free_cols.len()) == target),
        }
    }
    Ok(Assignment { pairs, cost: fixed })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive optimum over all injective maps of the smaller side.
    fn brute(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, left: usize) -> f64 {
            if left == 0 {
                return 0.0;
            }
            let k = cost.len();
            if k - r < left {
                return f64::INFINITY;
            }
            let mut best = rec(cost, r + 1, used, left); // row r unmatched
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[r][c] + rec(cost, r + 1, used, left - 1));
                    used[c] = false;
                }
            }
            best
        }
        let m = cost[0].len();
        rec(cost, 0, &mut vec![false; m], cost.len().min(m))
    }

    #[test]
    fn zero_diagonal() {
        let a = hungarian_match(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn three_by_three() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian_match(&c).unwrap();
        assert_eq!(brute(&c), 5.0);
        assert_eq!(a.cost, 5.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn tall_matrix() {
        let c = vec![vec![5.0, 9.0], vec![1.0, 7.0], vec![8.0, 2.0], vec![3.0, 3.0]];
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.cost, brute(&c));
        assert_eq!(a.pairs, vec![(1, 0), (2, 1)]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = vec![vec![1.0; 3]; 3];
        assert_eq!(hungarian_match(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let tall = vec![vec![0.0]; 4];
        assert_eq!(hungarian_match(&tall).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            hungarian_match(&[vec![1.0, f64::NAN]]),
            Err(Error::NonFiniteCost { row: 0, col: 1 })
        ));
        assert!(hungarian_match(&[]).is_err());
        assert!(hungarian_match(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
