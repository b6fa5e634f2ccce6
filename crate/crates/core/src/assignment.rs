//! Exact minimum-cost assignment (Hungarian method with potentials, O(n³)).

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Returns `perm` with `perm[i]` the column assigned to row `i`, minimizing
/// `Σ cost[i, perm[i]]`.
pub fn solve_assignment(cost: &Mat) -> Result<Vec<usize>> {
    if !cost.is_square() {
        return Err(Error::dim(
            "solve_assignment",
            "square cost matrix",
            format!("{}x{}", cost.rows(), cost.cols()),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok(Vec::new());
    }

    // 1-based bookkeeping; column 0 is a virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let u0 = u[i0];
            let crow = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = crow[j - 1] - u0 - v[j];
                let m = &mut minv[j];
                if reduced < *m {
                    *m = reduced;
                    way[j] = j0;
                }
                if *m < delta {
                    delta = *m;
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    Ok(perm)
}

pub fn assignment_cost(cost: &Mat, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}
