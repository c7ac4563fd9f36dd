use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segeval_core::formats::SegMask;
use segeval_core::protocols::{
    build_bank, build_matching_matrix, hungarian_max, knn_assign, relabel_mask, CategoryBijection,
    MatchingMatrix,
};
use segeval_core::DenseArray;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn random_sets(rng: &mut ChaCha8Rng, n: usize, c: u16) -> Vec<BTreeSet<u16>> {
    (0..n)
        .map(|_| {
            let mut s: BTreeSet<u16> = (1..=c).filter(|_| rng.gen_bool(0.3)).collect();
            if s.is_empty() {
                s.insert(rng.gen_range(1..=c));
            }
            s
        })
        .collect()
}

fn total(s: &MatchingMatrix, f: &CategoryBijection) -> u64 {
    (1..=s.categories() as u16)
        .map(|g| s.get(g, f.apply(g).unwrap()))
        .sum()
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..200 {
        let c = 2 + (i % 6) as u16;
        let s = build_matching_matrix(
            &random_sets(&mut rng, 30, c),
            &random_sets(&mut rng, 30, c),
            c.into(),
        )
        .unwrap();
        let f = hungarian_max(&s);
        let best = permutations(c as usize)
            .iter()
            .map(|p| {
                (0..c as usize)
                    .map(|g| s.get(g as u16 + 1, p[g] as u16 + 1))
                    .sum::<u64>()
            })
            .max()
            .unwrap();
        assert_eq!(total(&s, &f), best);
        // the lexicographically first optimum
        let first = permutations(c as usize)
            .into_iter()
            .filter(|p| {
                (0..c as usize)
                    .map(|g| s.get(g as u16 + 1, p[g] as u16 + 1))
                    .sum::<u64>()
                    == best
            })
            .min()
            .unwrap();
        let got: Vec<usize> = (1..=c).map(|g| f.apply(g).unwrap() as usize - 1).collect();
        assert_eq!(got, first);
    }
}

proptest! {
    #[test]
    fn matrix_total_is_sum_of_set_products(seed in any::<u64>(), n in 1usize..40, c in 1u16..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_sets(&mut rng, n, c);
        let g = random_sets(&mut rng, n, c);
        let s = build_matching_matrix(&p, &g, c.into()).unwrap();
        let expect: u64 = p.iter().zip(&g).map(|(a, b)| (a.len() * b.len()) as u64).sum();
        prop_assert_eq!(s.total(), expect);
    }

    #[test]
    fn relabel_matches_per_pixel_map(seed in any::<u64>(), c in 1u16..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets: Vec<u16> = (1..=c).collect();
        for i in (1..targets.len()).rev() {
            targets.swap(i, rng.gen_range(0..=i));
        }
        let f = CategoryBijection::from_targets(targets.clone()).unwrap();
        let labels: Vec<u16> = (0..64).map(|_| rng.gen_range(0..=c)).collect();
        let m = SegMask::new(8, 8, labels.clone()).unwrap();
        let r = relabel_mask(&m, &f).unwrap();
        for (a, b) in labels.iter().zip(r.labels()) {
            let expect = if *a == 0 { 0 } else { targets[*a as usize - 1] };
            prop_assert_eq!(*b, expect);
        }
        prop_assert_eq!(CategoryBijection::parse(&f.to_text()).unwrap(), f);
    }
}

fn random_map(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize) -> DenseArray {
    DenseArray::from_fn3(l, h, w, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

#[test]
fn knn_is_invariant_to_positive_pixel_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train: Vec<(String, DenseArray, SegMask)> = (0..6)
        .map(|i| {
            let z = random_map(&mut rng, 4, 4, 4);
            let labels = (0..64).map(|_| rng.gen_range(0..4)).collect();
            (format!("t{i}"), z, SegMask::new(8, 8, labels).unwrap())
        })
        .collect();
    let bank = build_bank(&train).unwrap();
    for _ in 0..10 {
        let q = random_map(&mut rng, 4, 3, 5);
        let scales: Vec<f64> = (0..15).map(|_| rng.gen_range(0.1..10.0)).collect();
        let scaled =
            DenseArray::from_fn3(4, 3, 5, |c, y, x| q.get3(c, y, x) * scales[y * 5 + x]).unwrap();
        assert_eq!(
            knn_assign(&q, &bank, 3).unwrap(),
            knn_assign(&scaled, &bank, 3).unwrap()
        );
    }
}

#[test]
fn knn_recovers_separable_labels() {
    // bank vectors along the axes; queries close to one axis take its label
    let mk = |dir: usize| {
        DenseArray::from_fn3(3, 1, 1, |c, _, _| if c == dir { 1.0 } else { 0.0 }).unwrap()
    };
    let train: Vec<_> = (0..3)
        .map(|d| {
            (
                format!("a{d}"),
                mk(d),
                SegMask::filled(1, 1, d as u16 + 1).unwrap(),
            )
        })
        .collect();
    let bank = build_bank(&train).unwrap();
    let q = DenseArray::new(vec![3, 1, 2], vec![0.9, 0.1, 0.1, 0.95, 0.0, 0.0]).unwrap();
    assert_eq!(knn_assign(&q, &bank, 1).unwrap().labels(), &[1, 2]);
}
