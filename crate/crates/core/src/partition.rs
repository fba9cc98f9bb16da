//! Balanced, contiguous, order-preserving partition of `N` ordered blocks into `K` stages.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage sizes for `n` blocks in `k` stages: sizes differ by at most one, sum to `n`, and
/// are non-decreasing, which makes the tuple the lexicographically smallest such partition.
pub fn balanced_partition(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidPlan("stage count must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidPlan("block count must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidPlan(format!(
            "{k} stages cannot partition {n} blocks into non-empty groups"
        )));
    }
    let small = n / k;
    let large_count = n % k;
    Ok((0..k)
        .map(|i| if i < k - large_count { small } else { small + 1 })
        .collect())
}

/// A partition of `N` ordered blocks into `K` contiguous stages.
///
/// Stages are 1-based (`1..=K`) in the public API, matching how curricula are described;
/// block ranges returned by [`StagePlan::stage_blocks`] are 0-based half-open ranges for
/// indexing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    block_count: usize,
    sizes: Vec<usize>,
    cut_points: Vec<usize>,
}

impl StagePlan {
    /// Balanced plan for `n` blocks and `k` stages.
    pub fn new(n: usize, k: usize) -> Result<Self> {
        Self::from_sizes(&balanced_partition(n, k)?)
    }

    /// Plan with explicit stage sizes; every stage must hold at least one block.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidPlan("plan needs at least one stage".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidPlan(format!("empty stage in {sizes:?}")));
        }
        let cut_points: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                *acc += s;
                Some(*acc)
            })
            .collect();
        Ok(StagePlan {
            block_count: *cut_points.last().expect("non-empty"),
            sizes: sizes.to_vec(),
            cut_points,
        })
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn num_stages(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Cumulative sizes `n_1 < n_2 < ... < n_K = N`.
    pub fn cut_points(&self) -> &[usize] {
        &self.cut_points
    }

    pub fn is_balanced(&self) -> bool {
        balanced_partition(self.block_count, self.num_stages()).is_ok_and(|s| s == self.sizes)
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.num_stages() {
            return Err(Error::StageOutOfRange {
                k,
                num_stages: self.num_stages(),
            });
        }
        Ok(())
    }

    /// Number of blocks active at stage `k` (`n_k`).
    pub fn active_blocks(&self, k: usize) -> Result<usize> {
        self.check_stage(k)?;
        Ok(self.cut_points[k - 1])
    }

    /// 0-based block range of stage `k`.
    pub fn stage_blocks(&self, k: usize) -> Result<Range<usize>> {
        self.check_stage(k)?;
        let start = if k == 1 { 0 } else { self.cut_points[k - 2] };
        Ok(start..self.cut_points[k - 1])
    }

    /// 1-based index set `I_k`.
    pub fn index_set(&self, k: usize) -> Result<Vec<usize>> {
        Ok(self.stage_blocks(k)?.map(|i| i + 1).collect())
    }

    /// Stage (1-based) that owns the 0-based block `i`.
    pub fn stage_of_block(&self, i: usize) -> Option<usize> {
        self.cut_points.iter().position(|&c| i < c).map(|s| s + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Enumerates every composition of `n` into `k` positive parts with spread at most one
    /// and returns the lexicographically smallest.
    fn brute_force(n: usize, k: usize) -> Vec<usize> {
        fn rec(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 0 {
                if n == 0 {
                    out.push(prefix.clone());
                }
                return;
            }
            for s in 1..=n {
                prefix.push(s);
                rec(n - s, k - 1, prefix, out);
                prefix.pop();
            }
        }
        let mut all = Vec::new();
        rec(n, k, &mut Vec::new(), &mut all);
        all.retain(|p| p.iter().max().unwrap() - p.iter().min().unwrap() <= 1);
        all.into_iter().min().unwrap()
    }

    #[test]
    fn seven_into_three_matches_enumeration() {
        assert_eq!(brute_force(7, 3), vec![2, 2, 3]);
        assert_eq!(balanced_partition(7, 3).unwrap(), vec![2, 2, 3]);
    }

    #[test]
    fn small_cases_match_enumeration() {
        for n in 1..=10 {
            for k in 1..=n {
                assert_eq!(balanced_partition(n, k).unwrap(), brute_force(n, k), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(balanced_partition(4, 0).is_err());
        assert!(balanced_partition(3, 4).is_err());
        assert!(balanced_partition(0, 1).is_err());
    }

    #[test]
    fn single_stage_holds_everything() {
        assert_eq!(balanced_partition(13, 1).unwrap(), vec![13]);
    }

    #[test]
    fn index_sets_for_eight_blocks_in_four_stages() {
        let plan = StagePlan::new(8, 4).unwrap();
        let sets: Vec<Vec<usize>> = (1..=4).map(|k| plan.index_set(k).unwrap()).collect();
        assert_eq!(sets, vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]]);
        assert_eq!(plan.cut_points(), &[2, 4, 6, 8]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let plan = StagePlan::new(5, 5).unwrap();
        for k in 1..=5 {
            assert_eq!(plan.index_set(k).unwrap(), vec![k]);
        }
    }

    #[test]
    fn fifty_blocks_in_two_stages() {
        let plan = StagePlan::new(50, 2).unwrap();
        assert_eq!(plan.index_set(1).unwrap(), (1..=25).collect::<Vec<_>>());
        assert_eq!(plan.index_set(2).unwrap(), (26..=50).collect::<Vec<_>>());
    }

    #[test]
    fn stage_lookup_and_range_errors() {
        let plan = StagePlan::new(33, 4).unwrap();
        assert_eq!(plan.sizes(), &[8, 8, 8, 9]);
        assert_eq!(plan.stage_of_block(0), Some(1));
        assert_eq!(plan.stage_of_block(24), Some(4));
        assert_eq!(plan.stage_of_block(33), None);
        assert!(matches!(plan.active_blocks(0), Err(Error::StageOutOfRange { .. })));
        assert!(matches!(plan.active_blocks(5), Err(Error::StageOutOfRange { .. })));
    }

    #[test]
    fn explicit_sizes_reject_empty_stages() {
        assert!(StagePlan::from_sizes(&[3, 0, 2]).is_err());
        let plan = StagePlan::from_sizes(&[1, 4]).unwrap();
        assert!(!plan.is_balanced());
        assert_eq!(plan.block_count(), 5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plan_invariants(n in 1usize..=200, k_frac in 0.0f64..1.0) {
                let k = 1 + ((n - 1) as f64 * k_frac) as usize;
                let plan = StagePlan::new(n, k).unwrap();
                let sizes = plan.sizes();
                prop_assert_eq!(sizes.iter().sum::<usize>(), n);
                prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(sizes[sizes.len() - 1] - sizes[0] <= 1);
                let flat: Vec<usize> = (1..=k).flat_map(|s| plan.index_set(s).unwrap()).collect();
                prop_assert_eq!(flat, (1..=n).collect::<Vec<_>>());
            }
        }
    }
}
