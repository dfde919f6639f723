//! Per-class 60/20/20 train/validation/test partitioning.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?} (train, val or test)"
            ))),
        }
    }
}

const PERCENT: [usize; 3] = [60, 20, 20];

/// Train/val/test sizes for `n` items by largest remainder. Leftover items go
/// to the parts with the largest fractional remainders; ties favor train,
/// then val, then test.
pub fn split_counts(n: usize) -> [usize; 3] {
    let mut counts = PERCENT.map(|p| n * p / 100);
    let rems = PERCENT.map(|p| n * p % 100);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let leftover = n - counts.iter().sum::<usize>();
    for &part in order.iter().take(leftover) {
        counts[part] += 1;
    }
    counts
}

/// Assigns a split to each item: per class, a seeded shuffle followed by
/// [`split_counts`]. Each class uses its own stream derived from `seed`.
pub fn split_dataset(labels: &[usize], seed: u64) -> Vec<Split> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Split::Train; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng::rng(rng::derive_seed(seed, class as u64)));
        let [train, val, _] = split_counts(members.len());
        for (rank, &i) in members.iter().enumerate() {
            out[i] = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}
