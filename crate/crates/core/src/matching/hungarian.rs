use super::{Assignment, CostMatrix, MatchError};

/// Minimum-cost perfect matching on the submatrix `rows × cols`
/// (equal lengths). Returns the optimal total and, per row, a position in `cols`.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // Potentials formulation; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| a(i + 1, assign[i] + 1)).sum();
    (total, assign)
}

/// Minimum-cost assignment of gold rows to prediction columns.
///
/// Among optima, the lexicographically smallest β is returned: rows are fixed
/// in order to the lowest column that still admits an optimal completion.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    let k = cost.k();
    if cost.data().iter().any(|c| !c.is_finite()) {
        return Err(MatchError::NonFiniteCost);
    }
    let all: Vec<usize> = (0..k).collect();
    let (best, _) = solve(cost, &all, &all);
    let scale = cost.data().iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * k.max(1) as f64;

    let mut beta = Vec::with_capacity(k);
    let mut fixed = 0.0;
    let mut free_cols: Vec<usize> = all.clone();
    for row in 0..k {
        let rest_rows: Vec<usize> = (row + 1..k).collect();
        let mut chosen = None;
        for (pos, &col) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let (rest, _) = solve(cost, &rest_rows, &rest_cols);
            if fixed + cost.get(row, col) + rest <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        // The optimum is always completable, so some column qualifies; fall
        // back to the first on pathological rounding.
        let pos = chosen.unwrap_or(0);
        let col = free_cols.remove(pos);
        fixed += cost.get(row, col);
        beta.push(col);
    }
    Ok(Assignment(beta))
}
