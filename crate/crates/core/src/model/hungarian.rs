//! Minimum-cost bipartite assignment via the potentials formulation of the
//! Hungarian algorithm, O(n^2 m).

use crate::error::{Error, Result};

/// Optimal one-to-one assignment of min(rows, cols) pairs, returned sorted
/// by row index. `cost` is row-major `rows x cols`.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::Usage(format!(
            "cost length {} for {rows}x{cols}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| c.is_nan()) {
        return Err(Error::Usage("NaN in assignment cost matrix".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows > cols {
        // solve the transpose and swap pairs back
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = cost[i * cols + j];
            }
        }
        let mut pairs: Vec<(usize, usize)> = hungarian_match(&t, cols, rows)?
            .into_iter()
            .map(|(a, b)| (b, a))
            .collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }

    let (n, m) = (rows, cols);
    let at = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)]; // 1-indexed view
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // row assigned to column j (0 = free)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
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
    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if p[j] != 0 {
            pairs.push((p[j] - 1, j - 1));
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * cols + j]).sum()
}
