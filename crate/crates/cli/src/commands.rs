use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use segeval_core::formats::{self, CentroidSet, Manifest, SegMask, IGNORE, OTHER};
use segeval_core::labelgen::{
    self, assign_pixels, foreground_gate, image_embedding, pixel_attention, upsample_nearest,
};
use segeval_core::metrics::{evaluate_image, EvalAccumulator, SizeBucket};
use segeval_core::protocols::{
    build_bank, build_matching_matrix, hungarian_max, knn_assign, relabel_mask,
};

use crate::args::{AssignArgs, ClusterArgs, DistmatchArgs, EvaluateArgs, MatchArgs, StatsArgs};
use crate::data::{self, MAPPING_FILE};
use crate::report::{Report, Value};

// images per parallel task; partial results are merged in manifest order
const CHUNK: usize = 32;

/// The `[config]` section every report opens with.
pub(crate) fn config(
    report: &mut Report,
    command: &str,
    seed: u64,
    mut fields: Vec<(&str, Value)>,
) {
    let mut all: Vec<(&str, Value)> = vec![
        ("command", command.into()),
        ("version", env!("CARGO_PKG_VERSION").into()),
        ("prng", labelgen::PRNG_NAME.into()),
        ("seed", seed.into()),
    ];
    all.append(&mut fields);
    report.fields("config", all);
}

fn path_value(p: &Path) -> Value {
    p.display().to_string().into()
}

fn opt_path_value(p: Option<&PathBuf>) -> Value {
    p.map_or_else(|| "none".into(), |p| path_value(p))
}

pub fn cmd_evaluate(a: &EvaluateArgs, seed: u64) -> Result<Report> {
    if !(a.d_frac.is_finite() && a.d_frac > 0.0) {
        bail!("--d-frac must be positive, got {}", a.d_frac);
    }
    let m = data::load_manifest(&a.manifest, a.categories)?;
    let c = m.category_count;
    let pairs: Vec<(PathBuf, PathBuf)> = m
        .entries
        .iter()
        .map(|e| (data::gt_path(&a.gt, e), data::mask_path(&a.pred, e)))
        .collect();
    data::require_files(pairs.iter().flat_map(|(g, p)| [g, p]))?;

    let partials: Vec<EvalAccumulator> = m
        .entries
        .par_chunks(CHUNK)
        .zip(pairs.par_chunks(CHUNK))
        .map(|(entries, paths)| {
            let mut acc = EvalAccumulator::new(c);
            for (e, (g, p)) in entries.iter().zip(paths) {
                let gt = data::load_mask(g)?;
                let pred = data::load_mask(p)?;
                let ev = evaluate_image(&gt, &pred, &e.gt_categories, c, a.d_frac)
                    .with_context(|| format!("image {}", e.image_id))?;
                acc.push(&ev)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = EvalAccumulator::new(c);
    for p in &partials {
        total.merge(p)?;
    }
    let s = total.summary().context("no evaluable pixels")?;
    info!("evaluated {} images", s.images);

    let mut r = Report::new();
    config(
        &mut r,
        "evaluate",
        seed,
        vec![
            ("gt", path_value(&a.gt)),
            ("pred", path_value(&a.pred)),
            ("manifest", path_value(&a.manifest)),
            ("categories", c.into()),
            ("d_frac", a.d_frac.into()),
        ],
    );
    r.fields(
        "summary",
        vec![
            ("images", s.images.into()),
            ("miou", s.miou.into()),
            ("boundary_miou", s.boundary_miou.into()),
            ("img_acc", s.img_acc.into()),
            ("f_beta", s.f_beta.into()),
        ],
    );
    let buckets = s
        .per_bucket
        .iter()
        .map(|(b, mi, bmi)| vec![b.name().into(), (*mi).into(), (*bmi).into()])
        .collect();
    r.table("per_bucket", &["bucket", "miou", "boundary_miou"], buckets);
    let classes = s
        .class_iou
        .iter()
        .enumerate()
        .map(|(i, iou)| vec![(i as u64).into(), iou.map(|v| 100.0 * v).into()])
        .collect();
    r.table("per_class", &["category", "iou"], classes);
    Ok(r)
}

/// Generated category ids present in a prediction.
fn prediction_set(mask: &SegMask, c: u32, id: &str) -> Result<BTreeSet<u16>> {
    let set = mask.categories();
    if let Some(&bad) = set.iter().find(|&&g| u32::from(g) > c) {
        bail!("prediction {id} uses id {bad}, outside 1..={c}");
    }
    if mask.labels().contains(&IGNORE) {
        bail!("prediction {id} contains the ignore id");
    }
    Ok(set)
}

pub fn cmd_match(a: &MatchArgs, seed: u64) -> Result<Report> {
    let m = data::load_manifest(&a.manifest, a.categories)?;
    let c = m.category_count;
    let paths: Vec<PathBuf> = m
        .entries
        .iter()
        .map(|e| data::mask_path(&a.pred, e))
        .collect();
    data::require_files(&paths)?;
    let preds: Vec<SegMask> = paths
        .par_iter()
        .map(|p| data::load_mask(p))
        .collect::<Result<_>>()?;
    let pred_sets: Vec<BTreeSet<u16>> = preds
        .iter()
        .zip(&m.entries)
        .map(|(p, e)| prediction_set(p, c, &e.image_id))
        .collect::<Result<_>>()?;
    let gt_sets: Vec<BTreeSet<u16>> = m.entries.iter().map(|e| e.gt_categories.clone()).collect();
    let s = build_matching_matrix(&pred_sets, &gt_sets, c)?;
    if s.total() == 0 {
        warn!("every prediction set is empty; the matching matrix is zero and the mapping is the identity");
    }
    let f = hungarian_max(&s);

    if let Some(out) = &a.out {
        data::create_dir(out)?;
        let mapping = out.join(MAPPING_FILE);
        std::fs::write(&mapping, f.to_text())
            .with_context(|| format!("writing {}", mapping.display()))?;
        preds.par_iter().zip(&m.entries).try_for_each(|(p, e)| {
            data::save_mask(&data::mask_path(out, e), &relabel_mask(p, &f)?)
        })?;
    }

    let mut r = Report::new();
    config(
        &mut r,
        "match",
        seed,
        vec![
            ("pred", path_value(&a.pred)),
            ("manifest", path_value(&a.manifest)),
            ("out", opt_path_value(a.out.as_ref())),
            ("categories", c.into()),
        ],
    );
    let score: u64 = (1..=c as u16)
        .map(|g| s.get(g, f.apply(g).expect("in range")))
        .sum();
    r.fields(
        "summary",
        vec![
            ("images", m.entries.len().into()),
            ("matrix_total", s.total().into()),
            ("matched_cooccurrence", score.into()),
            ("identity", f.is_identity().into()),
        ],
    );
    let rows = (1..=c as u16)
        .map(|g| {
            let t = f.apply(g).expect("in range");
            vec![g.into(), t.into(), s.get(g, t).into()]
        })
        .collect();
    r.table("mapping", &["generated", "gt", "cooccurrence"], rows);
    Ok(r)
}

pub fn cmd_cluster(a: &ClusterArgs, seed: u64) -> Result<Report> {
    let m = data::load_manifest(&a.manifest, None)?;
    let maps = data::load_embeddings(&a.emb, &m)?;
    let l = data::common_channels(&maps, &m)?;
    let attn = data::load_attention(a.attn.as_deref(), l)?;
    let vectors: Vec<Vec<f64>> = maps
        .par_iter()
        .zip(&m.entries)
        .map(|(z, e)| image_embedding(&attn, z).with_context(|| format!("image {}", e.image_id)))
        .collect::<Result<_>>()?;
    let res = labelgen::kmeans(&vectors, a.clusters, seed, a.max_iters)?;
    if !res.converged {
        warn!(
            "k-means stopped at the {}-iteration cap before reaching a fixpoint",
            a.max_iters
        );
    }
    formats::save_centroids(&a.centroids, &res.centroids)
        .with_context(|| format!("writing {}", a.centroids.display()))?;

    let mut r = Report::new();
    config(
        &mut r,
        "cluster",
        seed,
        vec![
            ("emb", path_value(&a.emb)),
            ("manifest", path_value(&a.manifest)),
            ("clusters", a.clusters.into()),
            ("centroids", path_value(&a.centroids)),
            ("attn", opt_path_value(a.attn.as_ref())),
            ("max_iters", a.max_iters.into()),
        ],
    );
    r.fields(
        "summary",
        vec![
            ("images", vectors.len().into()),
            ("dim", l.into()),
            ("objective", res.objective().into()),
            ("iterations", res.iterations.into()),
            ("converged", res.converged.into()),
        ],
    );
    let mut sizes = vec![0u64; a.clusters];
    res.assignments.iter().for_each(|&i| sizes[i] += 1);
    let rows = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| vec![(i + 1).into(), n.into()])
        .collect();
    r.table("clusters", &["label", "images"], rows);
    let hist = res
        .objective_history
        .iter()
        .enumerate()
        .map(|(i, &o)| vec![i.into(), o.into()])
        .collect();
    r.table("objective_history", &["iteration", "objective"], hist);
    let images = m
        .entries
        .iter()
        .zip(&res.assignments)
        .map(|(e, &i)| vec![e.image_id.clone().into(), (i + 1).into()])
        .collect();
    r.table("image_labels", &["image_id", "label"], images);
    Ok(r)
}

/// Target sizes for upsampling, from the GT masks under `root`.
fn target_sizes(root: Option<&Path>, m: &Manifest) -> Result<Option<Vec<(usize, usize)>>> {
    let Some(root) = root else { return Ok(None) };
    let paths: Vec<PathBuf> = m.entries.iter().map(|e| data::gt_path(root, e)).collect();
    data::require_files(&paths)?;
    let sizes = paths
        .par_iter()
        .map(|p| data::load_mask(p).map(|g| (g.width(), g.height())))
        .collect::<Result<_>>()?;
    Ok(Some(sizes))
}

fn label_histogram(masks: &[SegMask]) -> Vec<Vec<Value>> {
    let mut counts: BTreeMap<u16, u64> = BTreeMap::new();
    for mask in masks {
        for &l in mask.labels() {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(l, n)| vec![l.into(), n.into()])
        .collect()
}

fn finish_masks(
    masks: Vec<SegMask>,
    sizes: Option<&[(usize, usize)]>,
    m: &Manifest,
    out: &Path,
) -> Result<Vec<SegMask>> {
    data::create_dir(out)?;
    masks
        .into_par_iter()
        .enumerate()
        .map(|(i, mask)| {
            let e = &m.entries[i];
            let mask = match sizes {
                Some(s) => upsample_nearest(&mask, s[i].0, s[i].1)
                    .with_context(|| format!("image {}", e.image_id))?,
                None => mask,
            };
            data::save_mask(&data::mask_path(out, e), &mask)?;
            Ok(mask)
        })
        .collect()
}

pub fn cmd_assign(a: &AssignArgs, seed: u64) -> Result<Report> {
    let m = data::load_manifest(&a.manifest, None)?;
    let maps = data::load_embeddings(&a.emb, &m)?;
    let l = data::common_channels(&maps, &m)?;
    let attn = data::load_attention(a.attn.as_deref(), l)?;
    let k: CentroidSet = formats::load_centroids(&a.centroids)
        .with_context(|| format!("reading {}", a.centroids.display()))?;
    let sizes = target_sizes(a.size_from.as_deref(), &m)?;

    let masks: Vec<SegMask> = maps
        .par_iter()
        .zip(&m.entries)
        .map(|(z, e)| {
            let c = pixel_attention(&attn, z)?;
            let gate = foreground_gate(&c, a.tau)?;
            assign_pixels(z, &k, &gate).with_context(|| format!("image {}", e.image_id))
        })
        .collect::<Result<_>>()?;
    let masks = finish_masks(masks, sizes.as_deref(), &m, &a.out)?;
    let pixels: u64 = masks.iter().map(|x| x.len() as u64).sum();
    let fg: u64 = masks
        .iter()
        .map(|x| x.labels().iter().filter(|&&v| v != OTHER).count() as u64)
        .sum();

    let mut r = Report::new();
    config(
        &mut r,
        "assign",
        seed,
        vec![
            ("emb", path_value(&a.emb)),
            ("manifest", path_value(&a.manifest)),
            ("centroids", path_value(&a.centroids)),
            ("attn", opt_path_value(a.attn.as_ref())),
            ("tau", a.tau.into()),
            ("out", path_value(&a.out)),
            ("size_from", opt_path_value(a.size_from.as_ref())),
        ],
    );
    r.fields(
        "summary",
        vec![
            ("images", masks.len().into()),
            ("clusters", k.count().into()),
            ("pixels", pixels.into()),
            ("foreground_fraction", (fg as f64 / pixels as f64).into()),
        ],
    );
    r.table("labels", &["label", "pixels"], label_histogram(&masks));
    Ok(r)
}

pub fn cmd_distmatch(a: &DistmatchArgs, seed: u64) -> Result<Report> {
    let train = data::load_manifest(&a.train_manifest, None)?;
    let train_maps = data::load_embeddings(&a.train_emb, &train)?;
    let gt_paths: Vec<PathBuf> = train
        .entries
        .iter()
        .map(|e| data::gt_path(&a.train_gt, e))
        .collect();
    data::require_files(&gt_paths)?;
    let labelled: Vec<(String, _, SegMask)> = train
        .entries
        .par_iter()
        .zip(train_maps)
        .zip(&gt_paths)
        .map(|((e, z), p)| Ok((e.image_id.clone(), z, data::load_mask(p)?)))
        .collect::<Result<_>>()?;
    let bank = build_bank(&labelled)?;
    if let Some(p) = &a.bank {
        formats::save_bank(p, &bank).with_context(|| format!("writing {}", p.display()))?;
    }

    let m = data::load_manifest(&a.manifest, None)?;
    let maps = data::load_embeddings(&a.emb, &m)?;
    let sizes = target_sizes(a.size_from.as_deref(), &m)?;
    let masks: Vec<SegMask> = maps
        .par_iter()
        .zip(&m.entries)
        .map(|(z, e)| knn_assign(z, &bank, a.k).with_context(|| format!("image {}", e.image_id)))
        .collect::<Result<_>>()?;
    let masks = finish_masks(masks, sizes.as_deref(), &m, &a.out)?;

    let mut r = Report::new();
    config(
        &mut r,
        "distmatch",
        seed,
        vec![
            ("train_manifest", path_value(&a.train_manifest)),
            ("train_emb", path_value(&a.train_emb)),
            ("train_gt", path_value(&a.train_gt)),
            ("emb", path_value(&a.emb)),
            ("manifest", path_value(&a.manifest)),
            ("k", a.k.into()),
            ("out", path_value(&a.out)),
            ("size_from", opt_path_value(a.size_from.as_ref())),
            ("bank", opt_path_value(a.bank.as_ref())),
        ],
    );
    r.fields(
        "summary",
        vec![
            ("bank_entries", bank.len().into()),
            ("images", masks.len().into()),
        ],
    );
    r.table("labels", &["label", "pixels"], label_histogram(&masks));
    Ok(r)
}

pub fn cmd_stats(a: &StatsArgs, seed: u64) -> Result<Report> {
    let m = data::load_manifest(&a.manifest, a.categories)?;
    let c = m.category_count;
    let paths: Vec<PathBuf> = m.entries.iter().map(|e| data::gt_path(&a.gt, e)).collect();
    data::require_files(&paths)?;

    // per category: images listing it, images with pixels, pixels; per bucket: instances
    type Tally = (Vec<[u64; 3]>, [u64; 4], u64, u64);
    let tally = |mask: &SegMask, listed: &BTreeSet<u16>| -> Result<Tally> {
        mask.validate(c)?;
        let mut per = vec![[0u64; 3]; c as usize + 1];
        let mut ignore = 0;
        for &g in mask.labels() {
            if g == IGNORE {
                ignore += 1;
            } else {
                per[g as usize][2] += 1;
            }
        }
        let mut buckets = [0u64; 4];
        for (id, row) in per.iter_mut().enumerate() {
            row[0] = u64::from(listed.contains(&(id as u16)));
            if row[2] > 0 {
                row[1] = 1;
                if id != OTHER as usize {
                    buckets[SizeBucket::from_area(row[2], mask.len() as u64).index()] += 1;
                }
            }
        }
        Ok((per, buckets, mask.len() as u64, ignore))
    };
    let parts: Vec<Tally> = paths
        .par_iter()
        .zip(&m.entries)
        .map(|(p, e)| {
            tally(&data::load_mask(p)?, &e.gt_categories)
                .with_context(|| format!("image {}", e.image_id))
        })
        .collect::<Result<_>>()?;

    let mut per = vec![[0u64; 3]; c as usize + 1];
    let mut buckets = [0u64; 4];
    let (mut pixels, mut ignore) = (0, 0);
    for (p, b, n, ig) in &parts {
        for (acc, row) in per.iter_mut().zip(p) {
            (0..3).for_each(|i| acc[i] += row[i]);
        }
        (0..4).for_each(|i| buckets[i] += b[i]);
        pixels += n;
        ignore += ig;
    }

    let mut r = Report::new();
    config(
        &mut r,
        "stats",
        seed,
        vec![
            ("gt", path_value(&a.gt)),
            ("manifest", path_value(&a.manifest)),
            ("categories", c.into()),
        ],
    );
    r.fields(
        "summary",
        vec![
            ("images", m.entries.len().into()),
            ("pixels", pixels.into()),
            ("ignore_pixels", ignore.into()),
        ],
    );
    let rows = SizeBucket::ALL
        .iter()
        .map(|b| vec![b.name().into(), buckets[b.index()].into()])
        .collect();
    r.table("size_buckets", &["bucket", "instances"], rows);
    let rows = per
        .iter()
        .enumerate()
        .map(|(i, row)| vec![i.into(), row[0].into(), row[1].into(), row[2].into()])
        .collect();
    r.table(
        "categories",
        &["category", "listed_images", "present_images", "pixels"],
        rows,
    );
    Ok(r)
}
