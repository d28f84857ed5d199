//! Minimum-cost perfect matching on a square cost matrix.

/// Optimal row -> column assignment for a row-major `n x n` cost matrix
/// (shortest augmenting paths with potentials, O(n^3)).
pub fn solve(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

pub fn assignment_cost(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Among all optimal assignments, the lexicographically smallest one.
/// Costs within `1e-9 * (1 + |optimum|)` of the optimum count as ties.
pub fn solve_lexicographic(cost: &[f64], n: usize) -> Vec<usize> {
    let best = solve(cost, n);
    let optimum = assignment_cost(cost, n, &best);
    let tol = 1e-9 * (1.0 + optimum.abs());

    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let mut chosen = None;
        for col in 0..n {
            if fixed.contains(&col) {
                continue;
            }
            let rest_rows: Vec<usize> = (row + 1..n).collect();
            let rest_cols: Vec<usize> = (0..n).filter(|c| *c != col && !fixed.contains(c)).collect();
            let m = rest_rows.len();
            let sub: Vec<f64> = rest_rows
                .iter()
                .flat_map(|&r| rest_cols.iter().map(move |&c| cost[r * n + c]))
                .collect();
            let rest = solve(&sub, m);
            let total = fixed_cost + cost[row * n + col] + assignment_cost(&sub, m, &rest);
            if total <= optimum + tol {
                chosen = Some(col);
                break;
            }
        }
        // The optimal completion always exists; fall back to it if rounding
        // rejected every candidate.
        let col = chosen.unwrap_or(best[row]);
        fixed_cost += cost[row * n + col];
        fixed.push(col);
    }
    fixed
}
