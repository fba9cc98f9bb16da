use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("split fractions {parts:?} must lie in [0, 1] and sum to 1")));
        }
        if self.train == 0.0 {
            return Err(Error::Data("train fraction must be positive".into()));
        }
        Ok(())
    }
}

fn by_class(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut classes = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        classes
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("label {l} outside 0..{num_classes}")))?
            .push(i);
    }
    Ok(classes)
}

/// Per-class shuffled split into train/val/test. Every class contributes
/// `round(n_c * val)` validation and `round(n_c * test)` test samples; the rest train.
pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    fractions.validate()?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, mut idx) in by_class(labels, num_classes)?.into_iter().enumerate() {
        idx.shuffle(&mut rng::stream(seed, "split", c as u64));
        let n = idx.len();
        let n_val = (n as f64 * fractions.val).round() as usize;
        let n_test = ((n as f64 * fractions.test).round() as usize).min(n - n_val);
        val.extend_from_slice(&idx[..n_val]);
        test.extend_from_slice(&idx[n_val..n_val + n_test]);
        train.extend_from_slice(&idx[n_val + n_test..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

/// Exactly `size` indices, allocated to classes in proportion to their frequency (largest
/// remainder, ties to the lower class index) and drawn at random within each class.
pub fn stratified_subset(labels: &[usize], num_classes: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > labels.len() {
        return Err(Error::Data(format!("subset of {size} requested from {} samples", labels.len())));
    }
    let classes = by_class(labels, num_classes)?;
    let total = labels.len() as f64;
    let exact: Vec<f64> = classes.iter().map(|c| c.len() as f64 * size as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = size - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < classes[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(size);
    for (c, mut idx) in classes.into_iter().enumerate() {
        idx.shuffle(&mut rng::stream(seed, "subset", c as u64));
        out.extend_from_slice(&idx[..quota[c]]);
    }
    out.sort_unstable();
    Ok(out)
}
