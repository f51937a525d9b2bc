use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};

use super::InteractionSet;
use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Share of the non-cold interactions that go to training in a cold-item split.
pub const COLD_SPLIT_TRAIN_FRACTION: f64 = 0.7;

// absorbs representation error such as 0.7 * 70 = 48.99999999999999
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Random,
    ColdItem,
    KFold { fold: usize, k: usize },
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitKind::Random => f.write_str("random"),
            SplitKind::ColdItem => f.write_str("cold_item"),
            SplitKind::KFold { fold, k } => write!(f, "kfold_{fold}_of_{k}"),
        }
    }
}

/// Assignment of record indices to train and test. Both lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub cold_items: BTreeSet<String>,
}

impl SplitPlan {
    /// Short stable hash of the assignment; reports carry it so rows can be
    /// checked to share one split.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        h.update(self.seed.to_le_bytes());
        for (tag, list) in [(b'T', &self.train), (b'E', &self.test)] {
            h.update([tag]);
            h.update((list.len() as u64).to_le_bytes());
            for &i in list {
                h.update((i as u64).to_le_bytes());
            }
        }
        for item in &self.cold_items {
            h.update(item.as_bytes());
            h.update([0]);
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Test records that reference a cold item.
    pub fn cold_test_records(&self, data: &InteractionSet) -> Vec<usize> {
        self.test
            .iter()
            .copied()
            .filter(|&i| self.cold_items.contains(&data.records()[i].item_id))
            .collect()
    }
}

fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + FLOOR_SLACK).floor() as usize
}

fn check_fraction(name: &str, fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {fraction}")))
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

pub fn random_split(data: &InteractionSet, train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    check_fraction("train_fraction", train_fraction)?;
    if data.is_empty() {
        return Err(Error::EmptyData("cannot split an empty interaction set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    RngState::new(seed).shuffle(&mut order);
    let n_train = floor_count(train_fraction, order.len());
    let test = order.split_off(n_train);
    Ok(SplitPlan {
        kind: SplitKind::Random,
        seed,
        train: sorted(order),
        test: sorted(test),
        cold_items: BTreeSet::new(),
    })
}

/// Marks a seeded `cold_fraction` of items cold (at least one), sends every
/// interaction with a cold item to test, and splits the rest 7:3.
pub fn cold_item_split(data: &InteractionSet, cold_fraction: f64, seed: u64) -> Result<SplitPlan> {
    check_fraction("cold_fraction", cold_fraction)?;
    if data.is_empty() {
        return Err(Error::EmptyData("cannot split an empty interaction set".into()));
    }
    let root = RngState::new(seed);
    let n_items = data.items().len();
    let n_cold = floor_count(cold_fraction, n_items).max(1);
    if n_cold >= n_items {
        return Err(Error::InvalidArgument(format!(
            "cold_fraction {cold_fraction} marks all {n_items} items cold; training set would be empty"
        )));
    }
    let mut items: Vec<usize> = (0..n_items).collect();
    root.fork(0).shuffle(&mut items);
    let mut is_cold = vec![false; n_items];
    for &i in &items[..n_cold] {
        is_cold[i] = true;
    }

    let (mut test, mut warm): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&r| is_cold[data.records()[r].item]);
    root.fork(1).shuffle(&mut warm);
    let n_train = floor_count(COLD_SPLIT_TRAIN_FRACTION, warm.len());
    test.extend(warm.split_off(n_train));
    if warm.is_empty() {
        return Err(Error::InvalidArgument(
            "cold-item split leaves no training records".into(),
        ));
    }
    let cold_items = items[..n_cold]
        .iter()
        .map(|&i| data.items().id(i).to_owned())
        .collect();
    Ok(SplitPlan {
        kind: SplitKind::ColdItem,
        seed,
        train: sorted(warm),
        test: sorted(test),
        cold_items,
    })
}

/// `k` near-equal folds over a seeded shuffle; the first `N mod k` folds get
/// one extra record.
pub fn kfold(data: &InteractionSet, k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    let n = data.len();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "kfold needs 2 <= k <= N, got k={k}, N={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let base = n / k;
    let extra = n % k;
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for fold in 0..k {
        bounds.push(bounds[fold] + base + usize::from(fold < extra));
    }
    Ok((0..k)
        .map(|fold| {
            let test = order[bounds[fold]..bounds[fold + 1]].to_vec();
            let train = order[..bounds[fold]]
                .iter()
                .chain(&order[bounds[fold + 1]..])
                .copied()
                .collect();
            SplitPlan {
                kind: SplitKind::KFold { fold, k },
                seed,
                train: sorted(train),
                test: sorted(test),
                cold_items: BTreeSet::new(),
            }
        })
        .collect())
}
