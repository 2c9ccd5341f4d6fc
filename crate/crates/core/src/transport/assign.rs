//! Minimum-cost assignment of atoms to target sites.

use serde::{Deserialize, Serialize};

use super::TransportError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(source index, target index)`, one pair per target, ordered by target.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of squared distances, in the squared units of the inputs.
    pub total_cost: f64,
}

impl Assignment {
    /// Target assigned to each source, `None` for surplus sources.
    pub fn target_of(&self, n_sources: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_sources];
        for &(s, t) in &self.pairs {
            out[s] = Some(t);
        }
        out
    }
}

pub fn squared_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Assigns every target a distinct source, minimizing the total squared
/// travel distance. Surplus sources stay unassigned.
pub fn rearrange_assign(sources: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<Assignment, TransportError> {
    if sources.len() < targets.len() {
        return Err(TransportError::Infeasible {
            sources: sources.len(),
            targets: targets.len(),
        });
    }
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| sources.iter().map(|s| squared_distance(*s, *t)).collect())
        .collect();
    let col_of_row = hungarian(&cost);
    let pairs: Vec<(usize, usize)> = col_of_row.iter().enumerate().map(|(t, &s)| (s, t)).collect();
    let total_cost = pairs.iter().map(|&(s, t)| cost[t][s]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Shortest-augmenting-path Hungarian method for an `n × m` cost matrix with
/// `n ≤ m`. Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // 1-based arrays with a sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            out[row_of[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sites_coincide() {
        let s = [[0.0, 0.0], [5.0, 1.0], [2.0, 7.0]];
        let a = rearrange_assign(&s, &s).unwrap();
        assert_eq!(a.total_cost, 0.0);
        assert!(a.pairs.iter().all(|(s, t)| s == t));
    }

    #[test]
    fn two_site_example() {
        let a = rearrange_assign(&[[0.0, 0.0], [10.0, 0.0]], &[[2.0, 0.0], [8.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 8.0);
    }

    #[test]
    fn surplus_sources_left_over() {
        let a = rearrange_assign(&[[0.0, 0.0], [100.0, 0.0], [3.0, 0.0]], &[[4.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![(2, 0)]);
        assert_eq!(a.target_of(3), vec![None, None, Some(0)]);
    }

    #[test]
    fn infeasible() {
        assert_eq!(
            rearrange_assign(&[[0.0, 0.0]], &[[1.0, 0.0], [2.0, 0.0]]),
            Err(TransportError::Infeasible { sources: 1, targets: 2 })
        );
    }

    #[test]
    fn empty_targets() {
        let a = rearrange_assign(&[[0.0, 0.0]], &[]).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }
}
