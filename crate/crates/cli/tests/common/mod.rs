//! Synthetic corpora written to disk in the CLI's layout.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segeval_cli::data::{EMBEDDING_EXT, MASK_EXT};
use segeval_core::formats::{save_embedding, save_mask, Manifest, ManifestEntry, SegMask};
use segeval_core::tensor::normalize;
use segeval_core::DenseArray;

pub struct Corpus {
    pub root: PathBuf,
    pub gt: PathBuf,
    pub pred: PathBuf,
    pub emb: PathBuf,
    pub manifest: PathBuf,
}

impl Corpus {
    pub fn new(root: &Path) -> Self {
        let c = Self {
            root: root.to_path_buf(),
            gt: root.join("gt"),
            pred: root.join("pred"),
            emb: root.join("emb"),
            manifest: root.join("manifest.txt"),
        };
        for d in [&c.gt, &c.pred, &c.emb] {
            std::fs::create_dir_all(d).unwrap();
        }
        c
    }

    /// Writes the GT masks and a manifest listing their category sets.
    pub fn write_gt(&self, categories: u32, masks: &[(String, SegMask)]) {
        let entries = masks
            .iter()
            .map(|(id, m)| {
                let rel = format!("{id}.{MASK_EXT}");
                save_mask(&self.gt.join(&rel), m).unwrap();
                ManifestEntry {
                    image_id: id.clone(),
                    mask_path: rel,
                    gt_categories: m.categories(),
                }
            })
            .collect();
        let m = Manifest {
            category_count: categories,
            entries,
        };
        std::fs::write(&self.manifest, m.to_text()).unwrap();
    }

    pub fn write_pred(&self, id: &str, m: &SegMask) {
        save_mask(&self.pred.join(format!("{id}.{MASK_EXT}")), m).unwrap();
    }

    pub fn write_emb(&self, id: &str, z: &DenseArray) {
        save_embedding(&self.emb.join(format!("{id}.{EMBEDDING_EXT}")), z).unwrap();
    }
}

pub fn image_id(i: usize) -> String {
    format!("img_{i:04}")
}

/// Uniform random labels in `0..=c`, with some GT ignore pixels; every GT
/// holds at least one major category.
pub fn random_pair(rng: &mut ChaCha8Rng, w: usize, h: usize, c: u16) -> (SegMask, SegMask) {
    loop {
        let gt: Vec<u16> = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    u16::MAX
                } else {
                    rng.gen_range(0..=c)
                }
            })
            .collect();
        let pred: Vec<u16> = (0..w * h).map(|_| rng.gen_range(0..=c)).collect();
        let gt = SegMask::new(w, h, gt).unwrap();
        if !gt.categories().is_empty() {
            return (gt, SegMask::new(w, h, pred).unwrap());
        }
    }
}

/// `count` unit vectors in `dim` dimensions, pairwise at least `min_dist` apart.
pub fn separated_centers(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    min_dist: f64,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let v = normalize(
            &(0..dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
        let far = out.iter().all(|c| {
            c.iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far {
            out.push(v);
        }
    }
    out
}

/// Feature map whose pixel at grid cell `p` is `centers[labels[p] - 1]`
/// plus uniform noise in `[-noise, noise]` per channel.
pub fn noisy_map(
    rng: &mut ChaCha8Rng,
    centers: &[Vec<f64>],
    labels: &[u16],
    h: usize,
    w: usize,
    noise: f64,
) -> DenseArray {
    let pixels: Vec<Vec<f64>> = labels
        .iter()
        .map(|&lab| {
            centers[lab as usize - 1]
                .iter()
                .map(|x| x + rng.gen_range(-noise..=noise))
                .collect()
        })
        .collect();
    DenseArray::from_pixels(&pixels, h, w).unwrap()
}

pub struct SyntheticSet {
    pub images: usize,
    pub categories: u16,
    pub dim: usize,
    pub grid: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Pipeline corpus: `n` images of `2 * grid` pixels square, each a
/// dominant category over the left three quarters and a second category
/// on the right quarter, with `grid x grid` feature maps drawn around one
/// center per category.
pub fn pipeline_corpus(root: &Path, set: &SyntheticSet) -> Corpus {
    let corpus = Corpus::new(root);
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed);
    let deviation = set.noise * (set.dim as f64 / 3.0).sqrt();
    let centers = separated_centers(&mut rng, set.categories as usize, set.dim, 10.0 * deviation);
    let (g, side) = (set.grid, 2 * set.grid);
    let split = 3 * g / 4;
    let mut masks = Vec::new();
    for i in 0..set.images {
        let a = (i % set.categories as usize) as u16 + 1;
        let b = (a - 1 + rng.gen_range(1..set.categories)) % set.categories + 1;
        let grid_labels: Vec<u16> = (0..g * g)
            .map(|p| if p % g < split { a } else { b })
            .collect();
        let z = noisy_map(&mut rng, &centers, &grid_labels, g, g, set.noise);
        let full: Vec<u16> = (0..side * side)
            .map(|p| grid_labels[(p / side / 2) * g + (p % side) / 2])
            .collect();
        let id = image_id(i);
        corpus.write_emb(&id, &z);
        masks.push((id, SegMask::new(side, side, full).unwrap()));
    }
    corpus.write_gt(set.categories.into(), &masks);
    corpus
}

/// Every file under `dir` with its bytes, keyed by relative path. A plain
/// file maps to itself under the empty key.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if dir.is_file() {
        out.insert(String::new(), std::fs::read(dir).unwrap());
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
