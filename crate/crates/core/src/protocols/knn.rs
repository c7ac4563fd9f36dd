use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{BankEntry, SegMask, IGNORE};
use crate::labelgen::resize_nearest;
use crate::tensor::{dot, normalize, DenseArray};

pub const DEFAULT_K: usize = 10;

/// Mean embedding of every (image, category) region, "other" included.
///
/// Masks are resized to the embedding grid by nearest neighbour first.
/// Entries come out in input order, then ascending category id.
pub fn build_bank(train: &[(String, DenseArray, SegMask)]) -> Result<Vec<BankEntry>> {
    let per_image: Vec<Vec<BankEntry>> = train
        .par_iter()
        .map(|(image_id, z, mask)| image_entries(image_id, z, mask))
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

fn image_entries(image_id: &str, z: &DenseArray, mask: &SegMask) -> Result<Vec<BankEntry>> {
    let (l, h, w) = z.dims3()?;
    let grid = resize_nearest(mask, w, h)?;
    let mut sums: BTreeMap<u16, (Vec<f64>, u64)> = BTreeMap::new();
    for (p, &label) in grid.labels().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let (sum, n) = sums.entry(label).or_insert_with(|| (vec![0.0; l], 0));
        for (c, s) in sum.iter_mut().enumerate() {
            *s += z.data()[c * h * w + p];
        }
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(label, (sum, n))| BankEntry {
            vector: sum.into_iter().map(|s| s / n as f64).collect(),
            label,
            image_id: image_id.to_string(),
        })
        .collect())
}

/// Labels every pixel of `query` by majority vote over its `k` most
/// cosine-similar bank entries. Vote ties go to the larger summed
/// similarity, then the smaller label.
pub fn knn_assign(query: &DenseArray, bank: &[BankEntry], k: usize) -> Result<SegMask> {
    let (l, h, w) = query.dims3()?;
    if bank.is_empty() {
        return Err(Error::Empty("embedding bank".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if let Some(e) = bank.iter().find(|e| e.vector.len() != l) {
        return Err(Error::Shape(format!(
            "bank vector of length {} for {l}-channel query",
            e.vector.len()
        )));
    }
    let k = if k > bank.len() {
        warn!("k = {k} exceeds bank size {}, clamping", bank.len());
        bank.len()
    } else {
        k
    };
    let units: Vec<Vec<f64>> = bank.iter().map(|e| normalize(&e.vector)).collect();
    let labels = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let v = normalize(&query.pixel(p));
            let mut sims: Vec<(f64, usize)> = units
                .iter()
                .enumerate()
                .map(|(i, u)| (dot(&v, u), i))
                .collect();
            let by_rank =
                |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k < sims.len() {
                sims.select_nth_unstable_by(k - 1, by_rank);
                sims.truncate(k);
            }
            sims.sort_by(by_rank);
            vote(sims.iter().map(|&(s, i)| (bank[i].label, s)))
        })
        .collect();
    SegMask::new(w, h, labels)
}

fn vote(neighbours: impl Iterator<Item = (u16, f64)>) -> u16 {
    let mut tally: BTreeMap<u16, (usize, f64)> = BTreeMap::new();
    for (label, sim) in neighbours {
        let t = tally.entry(label).or_insert((0, 0.0));
        t.0 += 1;
        t.1 += sim;
    }
    // ascending label order; a later label must beat the incumbent strictly
    tally
        .into_iter()
        .reduce(|best, cand| {
            let better = match cand.1 .0.cmp(&best.1 .0) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => cand.1 .1 > best.1 .1,
            };
            if better {
                cand
            } else {
                best
            }
        })
        .map(|(label, _)| label)
        .expect("at least one neighbour")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: &[f64], label: u16) -> BankEntry {
        BankEntry {
            vector: v.to_vec(),
            label,
            image_id: "t".into(),
        }
    }

    #[test]
    fn single_entry_bank_labels_everything() {
        let z = DenseArray::from_fn3(2, 3, 3, |c, y, x| (c + y * 3 + x) as f64 - 4.0).unwrap();
        let m = knn_assign(&z, &[entry(&[1.0, 0.5], 3)], DEFAULT_K).unwrap();
        assert!(m.labels().iter().all(|&id| id == 3));
    }

    #[test]
    fn nearest_orthogonal_entry_wins() {
        let z = DenseArray::new(vec![2, 1, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let bank = [entry(&[1.0, 0.0], 1), entry(&[0.0, 2.0], 2)];
        assert_eq!(knn_assign(&z, &bank, 1).unwrap().labels(), &[1, 2]);
        let doubled = [
            bank[0].clone(),
            bank[0].clone(),
            bank[1].clone(),
            bank[1].clone(),
        ];
        assert_eq!(knn_assign(&z, &doubled, 1).unwrap().labels(), &[1, 2]);
    }

    #[test]
    fn vote_ties() {
        assert_eq!(vote([(4, 0.9), (2, 0.5)].into_iter()), 4);
        assert_eq!(vote([(4, 0.5), (2, 0.5)].into_iter()), 2);
        assert_eq!(vote([(4, 0.9), (2, 0.5), (2, 0.1)].into_iter()), 2);
    }

    #[test]
    fn bank_means() {
        let z = DenseArray::new(vec![1, 1, 4], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let mask = SegMask::new(4, 1, vec![0, 0, 2, 2]).unwrap();
        let bank = build_bank(&[("a".into(), z.clone(), mask)]).unwrap();
        let summary: Vec<_> = bank
            .iter()
            .map(|e| (e.label, e.vector.clone(), e.image_id.as_str()))
            .collect();
        assert_eq!(summary, vec![(0, vec![2.0], "a"), (2, vec![15.0], "a")]);

        let single =
            build_bank(&[("b".into(), z.clone(), SegMask::filled(4, 1, 1).unwrap())]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].vector, vec![8.5]);

        let ignored =
            build_bank(&[("c".into(), z, SegMask::filled(4, 1, IGNORE).unwrap())]).unwrap();
        assert!(ignored.is_empty());
    }

    #[test]
    fn bank_resizes_mask_to_grid() {
        let z = DenseArray::new(vec![1, 1, 2], vec![1.0, 5.0]).unwrap();
        let mask = SegMask::new(4, 2, vec![1, 1, 2, 2, 1, 1, 2, 2]).unwrap();
        let bank = build_bank(&[("a".into(), z, mask)]).unwrap();
        assert_eq!(
            bank.iter()
                .map(|e| (e.label, e.vector[0]))
                .collect::<Vec<_>>(),
            vec![(1, 1.0), (2, 5.0)]
        );
    }

    #[test]
    fn errors() {
        let z = DenseArray::zeros(vec![2, 1, 1]).unwrap();
        assert!(knn_assign(&z, &[], 1).is_err());
        assert!(knn_assign(&z, &[entry(&[1.0], 1)], 1).is_err());
        assert!(knn_assign(&z, &[entry(&[1.0, 0.0], 1)], 0).is_err());
        // k larger than the bank is clamped
        assert!(knn_assign(&z, &[entry(&[1.0, 0.0], 1)], 5).is_ok());
    }
}
