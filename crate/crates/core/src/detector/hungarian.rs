//! Minimum-cost injective assignment (Kuhn-Munkres with potentials).

use crate::error::{Error, Result};

/// `mapping[i]` is the prediction index assigned to ground truth `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

/// Assign every row of an `n_gt x n_pred` cost matrix to a distinct column
/// at minimum total cost. Requires `n_pred >= n_gt`.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let n = cost.len();
    if n == 0 {
        return Ok(AssignmentResult {
            mapping: Vec::new(),
            total_cost: 0.0,
        });
    }
    let m = cost[0].len();
    if cost.iter().any(|row| row.len() != m) {
        return Err(Error::InvalidArgument("ragged cost matrix".into()));
    }
    if m < n {
        return Err(Error::InvalidArgument(format!(
            "{n} ground truths cannot be matched to {m} predictions"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }

    // 1-based potentials formulation; column 0 is a virtual sink.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
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
    let mut mapping = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            mapping[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = mapping.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(AssignmentResult {
        mapping,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections rows -> columns.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    fn is_injective(mapping: &[usize]) -> bool {
        let mut seen = std::collections::HashSet::new();
        mapping.iter().all(|j| seen.insert(*j))
    }

    #[test]
    fn small_examples() {
        let r = hungarian_assign(&[vec![3.5]]).unwrap();
        assert_eq!(r.mapping, vec![0]);
        assert_eq!(r.total_cost, 3.5);
        let r = hungarian_assign(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(r.mapping, vec![0, 1]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn errors() {
        assert!(hungarian_assign(&[vec![1.0], vec![2.0]]).is_err());
        assert!(hungarian_assign(&[vec![f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn random_integer_matrices_match_enumeration() {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let cost: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| r.gen_range(0..20) as f64).collect())
                .collect();
            let res = hungarian_assign(&cost).unwrap();
            assert!(is_injective(&res.mapping));
            assert_eq!(res.total_cost, brute_force(&cost));
        }
    }

    proptest! {
        #[test]
        fn optimal_for_all_small_shapes(
            n in 1usize..=6,
            extra in 0usize..=2,
            seed in any::<u64>(),
        ) {
            let m = n + extra;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| r.gen_range(-50..50) as f64).collect())
                .collect();
            let res = hungarian_assign(&cost).unwrap();
            prop_assert!(is_injective(&res.mapping));
            prop_assert_eq!(res.total_cost, brute_force(&cost));
        }
    }
}
