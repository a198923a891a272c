use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seen/unseen partition of class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    #[serde(rename = "seen")]
    pub seen_labels: Vec<String>,
    #[serde(rename = "unseen")]
    pub unseen_labels: Vec<String>,
}

/// Sorts the labels, applies a seeded Fisher-Yates shuffle, and takes the
/// first `unseen_count` as unseen. Both halves are returned sorted.
///
/// The result depends only on the label *set* and the seed.
pub fn make_split<S: AsRef<str>>(
    labels: &[S],
    unseen_count: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let sorted: BTreeSet<&str> = labels.iter().map(AsRef::as_ref).collect();
    if sorted.len() != labels.len() {
        return Err(Error::arg("duplicate labels passed to make_split"));
    }
    if unseen_count == 0 || unseen_count >= sorted.len() {
        return Err(Error::arg(format!(
            "unseen count must be in 1..{}, got {unseen_count}",
            sorted.len()
        )));
    }
    let mut order: Vec<&str> = sorted.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut unseen: Vec<String> = order[..unseen_count]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut seen: Vec<String> = order[unseen_count..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    unseen.sort();
    seen.sort();
    Ok(SplitSpec {
        seed,
        seen_labels: seen,
        unseen_labels: unseen,
    })
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let seen: BTreeSet<&str> = self.seen_labels.iter().map(String::as_str).collect();
        if seen.len() != self.seen_labels.len() {
            return Err(Error::Validation("duplicate seen labels in split".into()));
        }
        let mut unseen = BTreeSet::new();
        for l in &self.unseen_labels {
            if seen.contains(l.as_str()) {
                return Err(Error::Validation(format!(
                    "label '{l}' is both seen and unseen"
                )));
            }
            if !unseen.insert(l.as_str()) {
                return Err(Error::Validation("duplicate unseen labels in split".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let split: Self = serde_json::from_str(s)?;
        split.validate()?;
        Ok(split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
