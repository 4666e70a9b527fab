//! Minimum-cost bipartite assignment of ground-truth masks to queries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(gt_index, query_index)` pairs sorted by gt index.
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.assignment.iter().find(|(g, _)| *g == gt).map(|(_, q)| *q)
    }

    pub fn is_matched(&self, query: usize) -> bool {
        self.assignment.iter().any(|(_, q)| *q == query)
    }
}

/// Kuhn–Munkres with row potentials (shortest augmenting paths) on the
/// `G × N` cost matrix padded to `N × N` with zero rows.
///
/// Runs in `O(N³)`. Ties between equally short paths go to the lowest
/// column index.
pub fn hungarian(cost: &Tensor) -> Result<MatchResult> {
    let (g, n) = match cost.shape() {
        [g, n] => (*g, *n),
        s => return Err(Error::Shape(format!("cost must be G×N, got {s:?}"))),
    };
    if g > n {
        return Err(Error::InvalidArgument(format!("{g} ground-truth masks but only {n} queries")));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let at = |r: usize, c: usize| if r < g { cost.get2(r, c) } else { 0.0 };

    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| col_owner[j] >= 1 && col_owner[j] <= g)
        .map(|j| (col_owner[j] - 1, j - 1))
        .collect();
    assignment.sort_unstable();
    let total_cost = assignment.iter().map(|&(r, c)| cost.get2(r, c)).sum();
    Ok(MatchResult { assignment, total_cost })
}
