//! Stratified, seeded 3:1:1 train/validation/test assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::apportion;
use crate::error::{Error, Result};

pub const MIN_ROWS_PER_CLASS: usize = 5;
const RATIO: [u64; 3] = [3, 1, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub assignment: Vec<Partition>,
}

impl SplitSpec {
    pub fn indices(&self, part: Partition) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, p)| **p == part).map(|(i, _)| i).collect()
    }
}

/// Each class is shuffled independently and cut by largest-remainder
/// apportionment of 3:1:1. `class_names` labels the negative and positive
/// class in error messages.
pub fn split_data(labels: &[bool], seed: u64, class_names: [&str; 2]) -> Result<SplitSpec> {
    let mut assignment = vec![Partition::Train; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, name) in [false, true].into_iter().zip(class_names) {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        if idx.len() < MIN_ROWS_PER_CLASS {
            return Err(Error::TooFewRows { label: name.to_string(), count: idx.len() });
        }
        idx.shuffle(&mut rng);
        let sizes = apportion(idx.len(), &RATIO);
        let (train, rest) = idx.split_at(sizes[0]);
        let (valid, test) = rest.split_at(sizes[1]);
        for (part, rows) in [(Partition::Train, train), (Partition::Validation, valid), (Partition::Test, test)] {
            for i in rows {
                assignment[*i] = part;
            }
        }
    }
    Ok(SplitSpec { assignment })
}
