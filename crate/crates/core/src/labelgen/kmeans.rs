//! Lloyd's k-means with k-means++ seeding.
//!
//! Assignments are computed in parallel and collected in point order.
//! Centroid sums are formed over fixed blocks of points and the block
//! partials are added in block order, so the result does not depend on the
//! number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::CentroidSet;

use super::nearest_centroid;

pub const DEFAULT_MAX_ITERS: usize = 100;
/// Name of the generator behind every seeded draw.
pub const PRNG_NAME: &str = "ChaCha8Rng";

const BLOCK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: CentroidSet,
    /// Centroid index of every input vector under the returned centroids.
    pub assignments: Vec<usize>,
    /// Objective after the seeding assignment and after every update.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self
            .objective_history
            .last()
            .expect("history is never empty")
    }
}

/// Clusters `vectors` (all of one length, normalized by the caller) into
/// `clusters` groups.
pub fn kmeans(
    vectors: &[Vec<f64>],
    clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    if clusters == 0 {
        return Err(Error::Invalid("cluster count must be at least 1".into()));
    }
    if vectors.len() < clusters {
        return Err(Error::Invalid(format!(
            "{} points for {clusters} clusters",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape(
            "vectors must share one positive length".into(),
        ));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite input vector".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(vectors, clusters, &mut rng)?;
    let (mut assignments, dists) = assign_all(vectors, &centroids);
    let mut history = vec![sum_ordered(&dists)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        centroids = update(vectors, &assignments, &centroids)?;
        iterations += 1;
        let (next, next_dists) = assign_all(vectors, &centroids);
        history.push(sum_ordered(&next_dists));
        let same = next == assignments;
        assignments = next;
        if same {
            converged = true;
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective_history: history,
        iterations,
        converged,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sum_ordered(values: &[f64]) -> f64 {
    values.iter().sum()
}

fn seed_plus_plus(
    vectors: &[Vec<f64>],
    clusters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CentroidSet> {
    let n = vectors.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| sq_dist(v, &vectors[chosen[0]]))
        .collect();
    while chosen.len() < clusters {
        let total = sum_ordered(&d2);
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // every point coincides with a chosen center
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &vectors[next]));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| vectors[i].clone()).collect();
    CentroidSet::from_rows(&rows)
}

fn assign_all(vectors: &[Vec<f64>], centroids: &CentroidSet) -> (Vec<usize>, Vec<f64>) {
    vectors
        .par_iter()
        .map(|v| nearest_centroid(v, centroids))
        .unzip()
}

/// Means of the current assignment; an empty cluster takes the point
/// farthest from its own centroid (each point used at most once).
fn update(vectors: &[Vec<f64>], assignments: &[usize], old: &CentroidSet) -> Result<CentroidSet> {
    let k = old.count();
    let dim = old.dim();
    let partials: Vec<(Vec<f64>, Vec<u64>)> = vectors
        .par_chunks(BLOCK)
        .zip(assignments.par_chunks(BLOCK))
        .map(|(vs, asg)| {
            let mut sums = vec![0.0; k * dim];
            let mut counts = vec![0u64; k];
            for (v, &a) in vs.iter().zip(asg) {
                counts[a] += 1;
                sums[a * dim..(a + 1) * dim]
                    .iter_mut()
                    .zip(v)
                    .for_each(|(s, x)| *s += x);
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0u64; k];
    for (s, c) in &partials {
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }

    let mut rows: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                old.center(c).to_vec()
            } else {
                sums[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|s| s / counts[c] as f64)
                    .collect()
            }
        })
        .collect();

    if counts.iter().all(|&n| n > 0) {
        return CentroidSet::from_rows(&rows);
    }
    // points only ever belong to non-empty clusters, whose rows are final here
    let mut spread: Vec<f64> = vectors
        .iter()
        .zip(assignments)
        .map(|(v, &a)| sq_dist(v, &rows[a]))
        .collect();
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let far = spread
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
            .expect("at least one point");
        rows[c] = vectors[far].clone();
        spread[far] = -1.0;
    }
    CentroidSet::from_rows(&rows)
}
