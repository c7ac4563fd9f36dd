//! Maximum-weight perfect assignment with exact integer arithmetic.

/// Returns `assignment[row] = col` maximizing `sum weights[row][assignment[row]]`
/// over a square `n x n` row-major matrix. Among all optimal assignments the
/// lexicographically smallest one is returned.
pub fn max_weight_assignment(weights: &[i64], n: usize) -> Vec<usize> {
    assert_eq!(weights.len(), n * n, "matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -weights[i * n + j];
    let (row_potential, col_potential, assignment) = solve_min_cost(n, cost);
    let tight = |i: usize, j: usize| cost(i, j) - row_potential[i] - col_potential[j] == 0;
    lexicographic_tight_matching(n, assignment, tight)
}

/// Kuhn–Munkres with potentials, O(n³). Returns row potentials, column
/// potentials and `row -> col`.
fn solve_min_cost(
    n: usize,
    cost: impl Fn(usize, usize) -> i64,
) -> (Vec<i64>, Vec<i64>, Vec<usize>) {
    // 1-based internally; index 0 is the virtual row/column
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), assignment)
}

/// Every optimal assignment is a perfect matching on the tight edges of an
/// optimal dual, so the lexicographically smallest optimum is found by
/// fixing rows in order to their smallest feasible tight column.
fn lexicographic_tight_matching(
    n: usize,
    start: Vec<usize>,
    tight: impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| tight(i, j)).collect())
        .collect();
    let mut row_to_col = start;
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut locked_col = vec![false; n];

    for i in 0..n {
        for &j in &adjacency[i] {
            if locked_col[j] {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            // give column j to row i; its old row r must reach the column i frees
            let r = col_to_row[j];
            let freed = row_to_col[i];
            let mut seen = vec![false; n];
            seen[j] = true;
            let mut path = Vec::new();
            if augment(
                r,
                freed,
                i,
                &adjacency,
                &locked_col,
                &col_to_row,
                &mut seen,
                &mut path,
            ) {
                // path holds (row, col) edges to flip, outermost first
                for &(row, col) in &path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        locked_col[row_to_col[i]] = true;
    }
    row_to_col
}

#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    target: usize,
    skip_row: usize,
    adjacency: &[Vec<usize>],
    locked_col: &[bool],
    col_to_row: &[usize],
    seen: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for &col in &adjacency[row] {
        if seen[col] || locked_col[col] {
            continue;
        }
        seen[col] = true;
        if col == target {
            path.push((row, col));
            return true;
        }
        let next = col_to_row[col];
        if next == skip_row {
            continue;
        }
        if augment(
            next, target, skip_row, adjacency, locked_col, col_to_row, seen, path,
        ) {
            path.push((row, col));
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(w: &[i64], n: usize, a: &[usize]) -> i64 {
        a.iter().enumerate().map(|(i, &j)| w[i * n + j]).sum()
    }

    #[test]
    fn small_example() {
        let w = [5, 1, 0, 2, 3, 1, 0, 2, 4];
        let a = max_weight_assignment(&w, 3);
        assert_eq!(a, vec![0, 1, 2]);
        assert_eq!(total(&w, 3, &a), 12);
    }

    #[test]
    fn ties_pick_lexicographic_smallest() {
        assert_eq!(max_weight_assignment(&[7; 16], 4), vec![0, 1, 2, 3]);
        // two optima: (1,0) and (0,1) both total 2
        assert_eq!(max_weight_assignment(&[1, 1, 1, 1], 2), vec![0, 1]);
        // optimum forces row 0 off column 0
        let w = [1, 1, 0, 3, 0, 0, 0, 0, 1];
        assert_eq!(max_weight_assignment(&w, 3), vec![1, 0, 2]);
    }

    #[test]
    fn empty_and_singleton() {
        assert!(max_weight_assignment(&[], 0).is_empty());
        assert_eq!(max_weight_assignment(&[4], 1), vec![0]);
    }
}
