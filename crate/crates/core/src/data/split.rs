use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 413,
            val: 203,
            test: 395,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Seeded shuffle of `0..n`, cut into consecutive train/val/test blocks,
/// each returned in ascending order so a split column written from them
/// reproduces the same subsets.
pub fn split_indices(n: usize, sizes: SplitSizes, seed: u64) -> Result<[Vec<usize>; 3]> {
    if sizes.total() > n {
        return Err(Error::Data(format!(
            "split sizes {}+{}+{} exceed {n} samples",
            sizes.train, sizes.val, sizes.test
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(sizes.train + sizes.val);
    let val = idx.split_off(sizes.train);
    let mut test = test;
    test.truncate(sizes.test);
    let mut out = [idx, val, test];
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Indices grouped by each sample's split column; `None` when any sample
/// lacks one.
pub fn split_by_column(ds: &Dataset) -> Option<[Vec<usize>; 3]> {
    let mut out: [Vec<usize>; 3] = Default::default();
    for (i, s) in ds.samples.iter().enumerate() {
        let slot = match s.split? {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        out[slot].push(i);
    }
    Some(out)
}
