use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    /// `(train, val, test)` sizes: floor, floor, remainder.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let train = ((self.train * n as f64) + 1e-9).floor() as usize;
        let val = ((self.val * n as f64) + 1e-9).floor() as usize;
        let train = train.min(n);
        let val = val.min(n - train);
        [train, val, n - train - val]
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        let in_range = [self.train, self.val, self.test].iter().all(|f| (0.0..=1.0).contains(f));
        if !in_range || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::SplitFractions(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Splits labelled ids into train/val/test.
///
/// Sizes follow [`SplitFractions::sizes`]. Positives and negatives are
/// apportioned to each split in proportion to its size (largest remainder),
/// then shuffled with a ChaCha stream seeded by `seed`. The result depends only
/// on the set of ids, not on their input order.
pub fn split_dataset(items: &[(String, bool)], fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    fractions.validate()?;
    let n = items.len();
    if n < 3 {
        return Err(Error::SplitTooSmall { n });
    }
    let mut unique = HashSet::new();
    for (id, _) in items {
        if !unique.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate id {id:?} in split input")));
        }
    }

    let sizes = fractions.sizes(n);
    let mut positives: Vec<&str> = items.iter().filter(|(_, p)| *p).map(|(id, _)| id.as_str()).collect();
    let mut negatives: Vec<&str> = items.iter().filter(|(_, p)| !*p).map(|(id, _)| id.as_str()).collect();
    positives.sort_unstable();
    negatives.sort_unstable();

    let mut pos_counts = apportion(positives.len(), &sizes);
    let mut neg_counts: [usize; 3] = std::array::from_fn(|k| sizes[k] - pos_counts[k]);
    cover_every_split(&mut pos_counts, &mut neg_counts, &sizes);
    cover_every_split(&mut neg_counts, &mut pos_counts, &sizes);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut parts: [Vec<String>; 3] = Default::default();
    let (mut pi, mut ni) = (0, 0);
    for k in 0..3 {
        parts[k].extend(positives[pi..pi + pos_counts[k]].iter().map(|s| s.to_string()));
        parts[k].extend(negatives[ni..ni + neg_counts[k]].iter().map(|s| s.to_string()));
        pi += pos_counts[k];
        ni += neg_counts[k];
        parts[k].shuffle(&mut rng);
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { seed, train, val, test })
}

/// Largest-remainder apportionment of `total` items proportional to `sizes`.
fn apportion(total: usize, sizes: &[usize; 3]) -> [usize; 3] {
    let n: usize = sizes.iter().sum();
    let mut counts = [0usize; 3];
    let mut remainders = [(0usize, 0usize); 3];
    for k in 0..3 {
        let exact = total * sizes[k];
        counts[k] = exact / n;
        remainders[k] = (exact % n, k);
    }
    let mut left = total - counts.iter().sum::<usize>();
    // Larger remainder first, earlier split on ties.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(rem, k) in &remainders {
        if left == 0 {
            break;
        }
        if rem > 0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

/// Moves class members so that every non-empty split holds at least one of
/// the class, when the class has enough members. Split sizes are unchanged:
/// each move swaps one member of `class` with one of `other`.
fn cover_every_split(class: &mut [usize; 3], other: &mut [usize; 3], sizes: &[usize; 3]) {
    let needed = sizes.iter().filter(|&&s| s > 0).count();
    if class.iter().sum::<usize>() < needed {
        return;
    }
    for k in 0..3 {
        if sizes[k] == 0 || class[k] > 0 {
            continue;
        }
        let donor = (0..3).filter(|&j| j != k && class[j] >= 2).max_by_key(|&j| (class[j], usize::MAX - j));
        if let Some(j) = donor {
            class[j] -= 1;
            other[j] += 1;
            class[k] += 1;
            other[k] -= 1;
        }
    }
}
