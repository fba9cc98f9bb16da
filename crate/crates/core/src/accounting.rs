//! Training cost of a depth curriculum relative to training the full network for the same
//! number of epochs.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, HeadKind};
use crate::error::{Error, Result};
use crate::partition::StagePlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Trainable parameters updated per epoch.
    ParameterUpdates,
    /// Forward plus backward multiply-accumulates per training sample, estimated as three
    /// times the analytic forward count.
    Flops,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parameter-updates" => Ok(CostMode::ParameterUpdates),
            "flops" => Ok(CostMode::Flops),
            other => Err(Error::InvalidSchedule(format!("unknown cost mode `{other}`"))),
        }
    }
}

/// Head attached at stage `k`: progressive before the last stage, `final_head` at it.
pub fn stage_head(plan: &StagePlan, k: usize, final_head: HeadKind) -> HeadKind {
    if k == plan.num_stages() {
        final_head
    } else {
        HeadKind::Progressive
    }
}

/// Cost of one epoch at stage `k`.
pub fn stage_cost(spec: &BackboneSpec, plan: &StagePlan, k: usize, final_head: HeadKind, mode: CostMode) -> Result<f64> {
    if plan.block_count() != spec.block_count() {
        return Err(Error::InvalidPlan(format!(
            "plan covers {} blocks, backbone has {}",
            plan.block_count(),
            spec.block_count()
        )));
    }
    let active = plan.active_blocks(k)?;
    let head = stage_head(plan, k, final_head);
    prefix_cost(spec, active, head, mode)
}

fn prefix_cost(spec: &BackboneSpec, active: usize, head: HeadKind, mode: CostMode) -> Result<f64> {
    Ok(match mode {
        CostMode::ParameterUpdates => spec.prefix_param_count(active, head) as f64,
        CostMode::Flops => {
            let width = if active == 0 { spec.stem_width() } else { spec.blocks[active - 1].out_width() };
            let mut macs = spec.stem_macs()?;
            for i in 0..active {
                macs += spec.block_macs(i)?;
            }
            macs += spec.head_macs(head, width);
            3.0 * macs as f64
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub mode: CostMode,
    /// `c_k` for `k = 1..=K`.
    pub per_stage_cost: Vec<f64>,
    /// `c_full`: the full network with its standard classifier.
    pub full_cost: f64,
}

impl CostModel {
    pub fn new(spec: &BackboneSpec, plan: &StagePlan, final_head: HeadKind, mode: CostMode) -> Result<Self> {
        let per_stage_cost = (1..=plan.num_stages())
            .map(|k| stage_cost(spec, plan, k, final_head, mode))
            .collect::<Result<_>>()?;
        Ok(CostModel {
            mode,
            per_stage_cost,
            full_cost: prefix_cost(spec, spec.block_count(), HeadKind::Final, mode)?,
        })
    }

    /// `sum_k e_k c_k / (sum_k e_k * c_full)`.
    pub fn overall_computation(&self, epochs: &[usize]) -> Result<f64> {
        if epochs.len() != self.per_stage_cost.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} epoch counts for {} stages",
                epochs.len(),
                self.per_stage_cost.len()
            )));
        }
        let total: usize = epochs.iter().sum();
        if total == 0 {
            return Err(Error::InvalidSchedule("schedule has zero total epochs".into()));
        }
        let spent: f64 = epochs.iter().zip(&self.per_stage_cost).map(|(&e, &c)| e as f64 * c).sum();
        Ok(spent / (total as f64 * self.full_cost))
    }

    /// Per-stage share of the progressive run's total cost.
    pub fn stage_shares(&self, epochs: &[usize]) -> Vec<f64> {
        let costs: Vec<f64> = epochs.iter().zip(&self.per_stage_cost).map(|(&e, &c)| e as f64 * c).collect();
        let total: f64 = costs.iter().sum();
        costs.iter().map(|c| if total > 0.0 { c / total } else { 0.0 }).collect()
    }
}

/// Convenience: overall computation of `epochs` over `plan` in `mode`.
pub fn overall_computation(
    spec: &BackboneSpec,
    plan: &StagePlan,
    epochs: &[usize],
    final_head: HeadKind,
    mode: CostMode,
) -> Result<f64> {
    CostModel::new(spec, plan, final_head, mode)?.overall_computation(epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;

    fn frac(p: Preset, classes: usize, epochs: &[usize]) -> f64 {
        let spec = p.spec(classes).unwrap();
        let plan = StagePlan::new(spec.block_count(), epochs.len()).unwrap();
        overall_computation(&spec, &plan, epochs, HeadKind::Final, CostMode::ParameterUpdates).unwrap()
    }

    #[test]
    fn single_stage_costs_exactly_one() {
        for p in Preset::CANONICAL {
            for mode in [CostMode::ParameterUpdates, CostMode::Flops] {
                let spec = p.spec(5).unwrap();
                let plan = StagePlan::new(spec.block_count(), 1).unwrap();
                let f = overall_computation(&spec, &plan, &[17], HeadKind::Final, mode).unwrap();
                assert_eq!(f, 1.0, "{p} {mode:?}");
            }
        }
    }

    #[test]
    fn zero_epochs_and_length_mismatch_are_errors() {
        let spec = Preset::ResNet18.spec(5).unwrap();
        let plan = StagePlan::new(8, 2).unwrap();
        let m = CostModel::new(&spec, &plan, HeadKind::Final, CostMode::ParameterUpdates).unwrap();
        assert!(m.overall_computation(&[0, 0]).is_err());
        assert!(m.overall_computation(&[1, 2, 3]).is_err());
    }

    #[test]
    fn resnet18_first_half_matches_hand_sum() {
        // conv1 + bn1; layer1: two 64->64 blocks; layer2: 64->128 with projection, 128->128
        let stem = 3 * 64 * 49 + 2 * 64;
        let b64 = 2 * 9 * 64 * 64 + 4 * 64;
        let b128_first = 9 * 64 * 128 + 9 * 128 * 128 + 4 * 128 + 64 * 128 + 2 * 128;
        let b128 = 2 * 9 * 128 * 128 + 4 * 128;
        let head = 128 * 256 + 256 + 256 * 5 + 5;
        let want = stem + 2 * b64 + b128_first + b128 + head;
        let spec = Preset::ResNet18.spec(5).unwrap();
        let plan = StagePlan::new(8, 2).unwrap();
        let got = stage_cost(&spec, &plan, 1, HeadKind::Final, CostMode::ParameterUpdates).unwrap();
        assert_eq!(got, want as f64);
    }

    #[test]
    fn vit_base_half_depth_is_about_half() {
        let spec = Preset::VitB16.spec(5).unwrap();
        let plan = StagePlan::new(12, 2).unwrap();
        let m = CostModel::new(&spec, &plan, HeadKind::Final, CostMode::ParameterUpdates).unwrap();
        let r = m.per_stage_cost[0] / m.full_cost;
        assert!((0.50..=0.52).contains(&r), "{r}");
    }

    #[test]
    fn table_fractions_within_tolerance() {
        let rows = [
            (Preset::ResNet18, 5, vec![5, 5, 30, 280], 0.893),
            (Preset::ResNet18, 5, vec![10, 290], 0.968),
            (Preset::ResNet101, 5, vec![5, 5, 30, 280], 0.932),
            (Preset::VitB16, 5, vec![50, 350], 0.938),
            (Preset::VitB16, 10, vec![3, 22], 0.941),
        ];
        for (p, c, e, want) in rows {
            let got = frac(p, c, &e);
            assert!((got - want).abs() <= 0.015, "{p} {e:?}: {got} vs {want}");
        }
    }

    #[test]
    fn stage_costs_increase_and_end_at_full() {
        for p in Preset::CANONICAL {
            for mode in [CostMode::ParameterUpdates, CostMode::Flops] {
                let spec = p.spec(5).unwrap();
                let plan = StagePlan::new(spec.block_count(), 2.min(spec.block_count())).unwrap();
                let m = CostModel::new(&spec, &plan, HeadKind::Final, mode).unwrap();
                assert!(m.per_stage_cost.windows(2).all(|w| w[0] < w[1]), "{p} {mode:?}");
                assert_eq!(*m.per_stage_cost.last().unwrap(), m.full_cost);
            }
        }
    }

    mod props {
        use super::super::*;
        use crate::backbone::Preset;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fraction_in_unit_interval_and_shift_earlier_never_costs_more(
                epochs in proptest::collection::vec(0usize..50, 4),
                last in 1usize..50,
                from in 1usize..4,
            ) {
                let spec = Preset::ResNet34.spec(5).unwrap();
                let plan = StagePlan::new(16, 4).unwrap();
                let m = CostModel::new(&spec, &plan, HeadKind::Final, CostMode::ParameterUpdates).unwrap();
                let mut e = epochs.clone();
                e[3] = last;
                let f = m.overall_computation(&e).unwrap();
                prop_assert!(f > 0.0 && f <= 1.0);
                prop_assert_eq!(f == 1.0, e[..3].iter().all(|&x| x == 0));
                if e[from] > 0 {
                    let mut shifted = e.clone();
                    shifted[from] -= 1;
                    shifted[from - 1] += 1;
                    if shifted[3] >= 1 {
                        prop_assert!(m.overall_computation(&shifted).unwrap() <= f);
                    }
                }
            }
        }
    }
}
