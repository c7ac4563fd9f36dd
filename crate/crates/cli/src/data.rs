//! Locating and loading the per-image files named by a manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use segeval_core::formats::{self, Manifest, ManifestEntry, SegMask};
use segeval_core::labelgen::AttentionParams;
use segeval_core::DenseArray;

pub const MASK_EXT: &str = "lsmk";
pub const EMBEDDING_EXT: &str = "lemb";
pub const MAPPING_FILE: &str = "mapping.txt";

pub fn load_manifest(path: &Path, expect: Option<u32>) -> Result<Manifest> {
    let m = formats::load_manifest(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    if let Some(c) = expect {
        if c != m.category_count {
            bail!(
                "-C {c} disagrees with C={} in {}",
                m.category_count,
                path.display()
            );
        }
    }
    if m.entries.is_empty() {
        bail!("manifest {} lists no images", path.display());
    }
    Ok(m)
}

pub fn gt_path(root: &Path, e: &ManifestEntry) -> PathBuf {
    root.join(&e.mask_path)
}

pub fn mask_path(dir: &Path, e: &ManifestEntry) -> PathBuf {
    dir.join(format!("{}.{MASK_EXT}", e.image_id))
}

pub fn embedding_path(dir: &Path, e: &ManifestEntry) -> PathBuf {
    dir.join(format!("{}.{EMBEDDING_EXT}", e.image_id))
}

/// Fails with the full list when any path is missing.
pub fn require_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    let missing: Vec<String> = paths
        .into_iter()
        .filter(|p| !p.is_file())
        .map(|p| format!("  {}", p.display()))
        .collect();
    if !missing.is_empty() {
        bail!("{} missing file(s):\n{}", missing.len(), missing.join("\n"));
    }
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<SegMask> {
    formats::load_mask(path).with_context(|| format!("reading mask {}", path.display()))
}

pub fn save_mask(path: &Path, m: &SegMask) -> Result<()> {
    formats::save_mask(path, m).with_context(|| format!("writing mask {}", path.display()))
}

pub fn load_embedding(path: &Path) -> Result<DenseArray> {
    formats::load_embedding(path).with_context(|| format!("reading embedding {}", path.display()))
}

/// Loads every embedding in manifest order, in parallel.
pub fn load_embeddings(dir: &Path, m: &Manifest) -> Result<Vec<DenseArray>> {
    let paths: Vec<PathBuf> = m.entries.iter().map(|e| embedding_path(dir, e)).collect();
    require_files(&paths)?;
    paths.par_iter().map(|p| load_embedding(p)).collect()
}

/// Attention parameters from `path`, or all zeros for `channels` when absent.
pub fn load_attention(path: Option<&Path>, channels: usize) -> Result<AttentionParams> {
    let Some(path) = path else {
        return Ok(AttentionParams::zeros(channels));
    };
    let a = load_embedding(path)?;
    let p = AttentionParams::from_array(&a)
        .with_context(|| format!("attention parameters in {}", path.display()))?;
    if p.channels() != channels {
        bail!(
            "{} holds {}-channel attention, features have {channels}",
            path.display(),
            p.channels()
        );
    }
    Ok(p)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Channel count shared by every map.
pub fn common_channels(maps: &[DenseArray], m: &Manifest) -> Result<usize> {
    let mut l = None;
    for (z, e) in maps.iter().zip(&m.entries) {
        let (c, _, _) = z
            .dims3()
            .with_context(|| format!("embedding of {}", e.image_id))?;
        match l {
            None => l = Some(c),
            Some(prev) if prev != c => bail!(
                "embedding of {} has {c} channels, expected {prev}",
                e.image_id
            ),
            _ => {}
        }
    }
    l.context("no embeddings")
}
