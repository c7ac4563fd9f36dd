//! Category matching for the fully unsupervised protocol and the k-NN
//! embedding bank of the distance-matching protocol.

mod hungarian;
mod knn;

use std::collections::BTreeSet;

pub use hungarian::max_weight_assignment;
pub use knn::{build_bank, knn_assign, DEFAULT_K};

use crate::error::{Error, Result};
use crate::formats::{SegMask, IGNORE, OTHER};

/// Image-level co-occurrence counts, rows = generated, cols = GT categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingMatrix {
    categories: u32,
    counts: Vec<u64>,
}

impl MatchingMatrix {
    pub fn zeros(categories: u32) -> Self {
        let n = categories as usize;
        Self {
            categories,
            counts: vec![0; n * n],
        }
    }

    pub fn categories(&self) -> u32 {
        self.categories
    }

    /// `S[generated][gt]` with 1-based category ids.
    pub fn get(&self, generated: u16, gt: u16) -> u64 {
        let n = self.categories as usize;
        self.counts[(generated as usize - 1) * n + gt as usize - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    fn check_ids(&self, ids: &BTreeSet<u16>) -> Result<()> {
        match ids
            .iter()
            .find(|&&id| id == OTHER || u32::from(id) > self.categories)
        {
            Some(&id) => Err(Error::CategoryRange {
                id: id.into(),
                max: self.categories,
            }),
            None => Ok(()),
        }
    }

    /// Adds one image's `P x G` Cartesian product.
    pub fn add_image(&mut self, pred: &BTreeSet<u16>, gt: &BTreeSet<u16>) -> Result<()> {
        self.check_ids(pred)?;
        self.check_ids(gt)?;
        let n = self.categories as usize;
        for &p in pred {
            for &g in gt {
                self.counts[(p as usize - 1) * n + g as usize - 1] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.categories != other.categories {
            return Err(Error::Invalid("matching matrices differ in size".into()));
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            categories: self.categories,
            counts,
        })
    }
}

pub fn build_matching_matrix(
    pred_sets: &[BTreeSet<u16>],
    gt_sets: &[BTreeSet<u16>],
    categories: u32,
) -> Result<MatchingMatrix> {
    if pred_sets.len() != gt_sets.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets vs {} GT sets",
            pred_sets.len(),
            gt_sets.len()
        )));
    }
    let mut s = MatchingMatrix::zeros(categories);
    for (p, g) in pred_sets.iter().zip(gt_sets) {
        s.add_image(p, g)?;
    }
    Ok(s)
}

/// Bijection from generated to GT category ids; "other" maps to itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryBijection {
    // targets[i] is the GT id for generated id i + 1
    targets: Vec<u16>,
}

impl CategoryBijection {
    pub fn identity(categories: u32) -> Self {
        Self {
            targets: (1..=categories as u16).collect(),
        }
    }

    pub fn from_targets(targets: Vec<u16>) -> Result<Self> {
        let n = targets.len();
        let mut seen = vec![false; n + 1];
        for &t in &targets {
            if t == 0 || t as usize > n || std::mem::replace(&mut seen[t as usize], true) {
                return Err(Error::Invalid(format!("not a permutation of 1..={n}")));
            }
        }
        Ok(Self { targets })
    }

    pub fn categories(&self) -> u32 {
        self.targets.len() as u32
    }

    pub fn apply(&self, id: u16) -> Option<u16> {
        match id {
            OTHER | IGNORE => Some(id),
            _ => self.targets.get(id as usize - 1).copied(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.targets
            .iter()
            .enumerate()
            .all(|(i, &t)| t as usize == i + 1)
    }

    /// One `gen_id -> gt_id` line per generated category.
    pub fn to_text(&self) -> String {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{} -> {}\n", i + 1, t))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line.split_once("->").and_then(|(a, b)| {
                Some((a.trim().parse::<u16>().ok()?, b.trim().parse::<u16>().ok()?))
            });
            let (gen, gt) = parsed.ok_or_else(|| {
                Error::Invalid(format!("line {}: expected \"gen_id -> gt_id\"", n + 1))
            })?;
            pairs.push((gen, gt));
        }
        pairs.sort_unstable();
        if pairs
            .iter()
            .enumerate()
            .any(|(i, &(g, _))| g as usize != i + 1)
        {
            return Err(Error::Invalid(
                "generated ids must cover 1..=C exactly once".into(),
            ));
        }
        Self::from_targets(pairs.into_iter().map(|(_, t)| t).collect())
    }
}

/// Bijection maximizing total co-occurrence; ties resolve to the
/// lexicographically smallest mapping.
pub fn hungarian_max(s: &MatchingMatrix) -> CategoryBijection {
    let n = s.categories as usize;
    let weights: Vec<i64> = s
        .counts
        .iter()
        .map(|&c| i64::try_from(c).expect("count fits in i64"))
        .collect();
    let assignment = max_weight_assignment(&weights, n);
    CategoryBijection {
        targets: assignment.into_iter().map(|j| (j + 1) as u16).collect(),
    }
}

pub fn relabel_mask(pred: &SegMask, f: &CategoryBijection) -> Result<SegMask> {
    let labels = pred
        .labels()
        .iter()
        .map(|&id| {
            f.apply(id).ok_or(Error::CategoryRange {
                id: id.into(),
                max: f.categories(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SegMask::new(pred.width(), pred.height(), labels)
}
