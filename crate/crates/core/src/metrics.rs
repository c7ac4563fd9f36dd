//! Segmentation metrics over integer pixel counts.
//!
//! Every accumulator here is a plain value with an entrywise-sum merge, so
//! results do not depend on how images are sharded across workers.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::formats::{SegMask, IGNORE, OTHER};

/// β² of the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Boundary band width as a fraction of the image diagonal.
pub const DEFAULT_D_FRAC: f64 = 0.03;

/// `(C+1) x (C+1)` pixel counts, `counts[i][j]` = GT `i` predicted `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    categories: u32,
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(categories: u32) -> Self {
        let n = categories as usize + 1;
        Self {
            categories,
            counts: vec![0; n * n],
        }
    }

    pub fn categories(&self) -> u32 {
        self.categories
    }

    fn side(&self) -> usize {
        self.categories as usize + 1
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.side() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: u16, pred: u16) {
        let n = self.side();
        self.counts[gt as usize * n + pred as usize] += 1;
    }

    pub fn accumulate(&mut self, gt: &SegMask, pred: &SegMask) -> Result<()> {
        check_pair(gt, pred, self.categories)?;
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g != IGNORE {
                self.add(g, p);
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.categories != other.categories {
            return Err(Error::Invalid(format!(
                "cannot merge accumulators for {} and {} categories",
                self.categories, other.categories
            )));
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

    /// Per-class `(intersection, union)` derived from the matrix.
    pub fn class_counts(&self) -> ClassIouCounts {
        let n = self.side();
        let mut out = ClassIouCounts::new(self.categories);
        for i in 0..n {
            let row: u64 = (0..n).map(|j| self.get(i, j)).sum();
            let col: u64 = (0..n).map(|j| self.get(j, i)).sum();
            let tp = self.get(i, i);
            out.intersection[i] = tp;
            out.union[i] = row + col - tp;
        }
        out
    }

    /// IoU of every class, `None` where the class has zero union.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        self.class_counts().class_iou()
    }
}

fn check_pair(gt: &SegMask, pred: &SegMask, categories: u32) -> Result<()> {
    if !gt.same_dims(pred) {
        return Err(Error::Shape(format!(
            "gt {}x{} vs pred {}x{}",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    if pred.labels().contains(&IGNORE) {
        return Err(Error::Invalid(
            "prediction contains the ignore sentinel".into(),
        ));
    }
    gt.validate(categories)?;
    pred.validate(categories)
}

pub fn confusion_accumulate(
    gt: &SegMask,
    pred: &SegMask,
    categories: u32,
) -> Result<ConfusionAccumulator> {
    let mut acc = ConfusionAccumulator::new(categories);
    acc.accumulate(gt, pred)?;
    Ok(acc)
}

pub fn merge(a: &ConfusionAccumulator, b: &ConfusionAccumulator) -> Result<ConfusionAccumulator> {
    a.merge(b)
}

/// Mean IoU in percent over classes with non-zero union.
pub fn miou_from_confusion(acc: &ConfusionAccumulator) -> Result<f64> {
    if acc.total() == 0 {
        return Err(Error::Empty("no counted pixels".into()));
    }
    acc.class_counts()
        .miou()
        .ok_or_else(|| Error::Empty("no class with non-zero union".into()))
}

/// Per-class intersection and union pixel counts, indexed by category id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ClassIouCounts {
    pub fn new(categories: u32) -> Self {
        let n = categories as usize + 1;
        Self {
            intersection: vec![0; n],
            union: vec![0; n],
        }
    }

    pub fn add(&mut self, class: usize, intersection: u64, union: u64) {
        self.intersection[class] += intersection;
        self.union[class] += union;
    }

    pub fn merge_from(&mut self, other: &Self) {
        for c in 0..self.union.len() {
            self.add(c, other.intersection[c], other.union[c]);
        }
    }

    pub fn class_iou(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean IoU in percent, `None` when every class has zero union.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| 100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Squared Euclidean distance from every pixel to the nearest background
/// pixel, where everything outside the grid counts as background.
pub fn squared_distance_to_background(mask: &[bool], width: usize, height: usize) -> Vec<u64> {
    // pad by one background pixel on every side
    let (pw, ph) = (width + 2, height + 2);
    let inf = ((pw * pw + ph * ph) as f64) * 4.0;
    let mut grid = vec![0.0; pw * ph];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                grid[(y + 1) * pw + x + 1] = inf;
            }
        }
    }
    let mut column = vec![0.0; ph];
    let mut scratch = Edt1d::new(pw.max(ph));
    for x in 0..pw {
        for y in 0..ph {
            column[y] = grid[y * pw + x];
        }
        scratch.transform(&mut column);
        for y in 0..ph {
            grid[y * pw + x] = column[y];
        }
    }
    for y in 0..ph {
        scratch.transform(&mut grid[y * pw..(y + 1) * pw]);
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(grid[(y + 1) * pw + x + 1].round() as u64);
        }
    }
    out
}

/// Lower envelope of parabolas, one-dimensional squared distance transform.
struct Edt1d {
    v: Vec<usize>,
    z: Vec<f64>,
    d: Vec<f64>,
}

impl Edt1d {
    fn new(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
            d: vec![0.0; n],
        }
    }

    fn transform(&mut self, f: &mut [f64]) {
        let n = f.len();
        let sq = |q: usize| (q * q) as f64;
        let mut k = 0usize;
        self.v[0] = 0;
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        let intersect = |f: &[f64], q: usize, p: usize| {
            ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64)
        };
        for q in 1..n {
            // z[0] is -inf, so this stops at k == 0 at the latest
            let mut s = intersect(f, q, self.v[k]);
            while s <= self.z[k] {
                k -= 1;
                s = intersect(f, q, self.v[k]);
            }
            k += 1;
            self.v[k] = q;
            self.z[k] = s;
            self.z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for q in 0..n {
            while self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as f64 - p as f64;
            self.d[q] = dq * dq + f[p];
        }
        f.copy_from_slice(&self.d[..n]);
    }
}

/// Band radius in pixels for an image of the given size.
pub fn boundary_radius(width: usize, height: usize, d_frac: f64) -> u64 {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((d_frac * diag).round() as u64).max(1)
}

/// Inner boundary band: mask pixels within Euclidean distance `radius` of
/// the background (or the image border).
pub fn boundary_band_with_radius(
    mask: &[bool],
    width: usize,
    height: usize,
    radius: u64,
) -> Vec<bool> {
    let d2 = squared_distance_to_background(mask, width, height);
    let r2 = radius * radius;
    mask.iter().zip(&d2).map(|(&m, &d)| m && d <= r2).collect()
}

pub fn boundary_band(mask: &[bool], width: usize, height: usize, d_frac: f64) -> Result<Vec<bool>> {
    if d_frac <= 0.0 || !d_frac.is_finite() {
        return Err(Error::Invalid(format!(
            "d_frac must be positive, got {d_frac}"
        )));
    }
    if mask.len() != width * height {
        return Err(Error::Shape(format!(
            "{width}x{height} mask with {} pixels",
            mask.len()
        )));
    }
    Ok(boundary_band_with_radius(
        mask,
        width,
        height,
        boundary_radius(width, height, d_frac),
    ))
}

/// Boundary intersection/union counts of one image pair.
pub fn boundary_counts(
    gt: &SegMask,
    pred: &SegMask,
    categories: u32,
    d_frac: f64,
) -> Result<ClassIouCounts> {
    check_pair(gt, pred, categories)?;
    if d_frac <= 0.0 || !d_frac.is_finite() {
        return Err(Error::Invalid(format!(
            "d_frac must be positive, got {d_frac}"
        )));
    }
    let (w, h) = (gt.width(), gt.height());
    let radius = boundary_radius(w, h, d_frac);
    let valid: Vec<bool> = gt.labels().iter().map(|&g| g != IGNORE).collect();
    let mut present = BTreeSet::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != IGNORE {
            present.insert(g);
            present.insert(p);
        }
    }
    let mut out = ClassIouCounts::new(categories);
    for c in present {
        let g_mask: Vec<bool> = gt.labels().iter().map(|&g| g == c).collect();
        let p_mask: Vec<bool> = pred.labels().iter().map(|&p| p == c).collect();
        let g_band = boundary_band_with_radius(&g_mask, w, h, radius);
        let p_band = boundary_band_with_radius(&p_mask, w, h, radius);
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..valid.len() {
            if valid[i] {
                inter += u64::from(g_band[i] && p_band[i]);
                union += u64::from(g_band[i] || p_band[i]);
            }
        }
        out.add(c as usize, inter, union);
    }
    Ok(out)
}

/// Boundary mIoU in percent over a set of image pairs.
pub fn boundary_miou<'a, I>(pairs: I, categories: u32, d_frac: f64) -> Result<f64>
where
    I: IntoIterator<Item = (&'a SegMask, &'a SegMask)>,
{
    let mut total = ClassIouCounts::new(categories);
    for (gt, pred) in pairs {
        total.merge_from(&boundary_counts(gt, pred, categories, d_frac)?);
    }
    total
        .miou()
        .ok_or_else(|| Error::Empty("no counted pixels".into()))
}

/// Predicted major category with the largest area; ties toward the smaller id.
pub fn largest_category(pred: &SegMask) -> Option<u16> {
    let mut area = std::collections::BTreeMap::<u16, u64>::new();
    for &p in pred.labels() {
        if p != OTHER && p != IGNORE {
            *area.entry(p).or_default() += 1;
        }
    }
    // BTreeMap iterates ascending, so max_by keeps the first (smallest id) on ties
    area.into_iter()
        .fold(None, |best: Option<(u16, u64)>, (id, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((id, n)),
        })
        .map(|(id, _)| id)
}

pub fn img_acc(pred: &SegMask, gt_categories: &BTreeSet<u16>) -> bool {
    largest_category(pred).is_some_and(|c| gt_categories.contains(&c))
}

/// Foreground/background counts of one image for the F-measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForegroundCounts {
    pub true_positive: u64,
    pub predicted: u64,
    pub actual: u64,
}

impl ForegroundCounts {
    pub fn from_pair(gt: &SegMask, pred: &SegMask) -> Result<Self> {
        if !gt.same_dims(pred) {
            return Err(Error::Shape("gt and pred differ in size".into()));
        }
        let mut c = Self::default();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g == IGNORE {
                continue;
            }
            let gf = g != OTHER;
            let pf = p != OTHER && p != IGNORE;
            c.true_positive += u64::from(gf && pf);
            c.predicted += u64::from(pf);
            c.actual += u64::from(gf);
        }
        Ok(c)
    }

    /// F-measure of this image, `None` when the GT has no foreground.
    pub fn f_beta(&self) -> Option<f64> {
        if self.actual == 0 {
            return None;
        }
        if self.true_positive == 0 {
            return Some(0.0);
        }
        let precision = self.true_positive as f64 / self.predicted as f64;
        let recall = self.true_positive as f64 / self.actual as f64;
        Some(f_beta_from(precision, recall))
    }
}

pub fn f_beta_from(precision: f64, recall: f64) -> f64 {
    let denom = BETA_SQ * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / denom
    }
}

pub fn f_beta(gt: &SegMask, pred: &SegMask) -> Result<Option<f64>> {
    Ok(ForegroundCounts::from_pair(gt, pred)?.f_beta())
}

/// Mean per-image F-measure in percent over images with GT foreground.
pub fn f_beta_dataset(scores: &[Option<f64>]) -> Option<f64> {
    let valid: Vec<f64> = scores.iter().flatten().copied().collect();
    (!valid.is_empty()).then(|| 100.0 * valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBucket {
    Small,
    MediumSmall,
    MediumLarge,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 4] = [
        Self::Small,
        Self::MediumSmall,
        Self::MediumLarge,
        Self::Large,
    ];

    /// Half-open area-ratio buckets `[0, 5%)`, `[5%, 25%)`, `[25%, 50%)`,
    /// `[50%, 100%]`, compared exactly in integers.
    pub fn from_area(pixels: u64, area: u64) -> Self {
        if pixels * 20 < area {
            Self::Small
        } else if pixels * 4 < area {
            Self::MediumSmall
        } else if pixels * 2 < area {
            Self::MediumLarge
        } else {
            Self::Large
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::MediumSmall => "medium_small",
            Self::MediumLarge => "medium_large",
            Self::Large => "large",
        }
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn size_bucket(gt: &SegMask, category: u16) -> Result<SizeBucket> {
    let pixels = gt.labels().iter().filter(|&&g| g == category).count() as u64;
    if pixels == 0 {
        return Err(Error::Invalid(format!(
            "category {category} absent from mask"
        )));
    }
    Ok(SizeBucket::from_area(pixels, gt.len() as u64))
}

/// Everything the evaluation needs from one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub confusion: ConfusionAccumulator,
    pub boundary: ClassIouCounts,
    pub img_correct: bool,
    pub f_beta: Option<f64>,
    /// Per-bucket (region, boundary) counts of the GT categories in this image.
    pub buckets: [(ClassIouCounts, ClassIouCounts); 4],
}

pub fn evaluate_image(
    gt: &SegMask,
    pred: &SegMask,
    gt_categories: &BTreeSet<u16>,
    categories: u32,
    d_frac: f64,
) -> Result<ImageEval> {
    let confusion = confusion_accumulate(gt, pred, categories)?;
    let boundary = boundary_counts(gt, pred, categories, d_frac)?;
    let region = confusion.class_counts();
    let empty = || {
        (
            ClassIouCounts::new(categories),
            ClassIouCounts::new(categories),
        )
    };
    let mut buckets = [empty(), empty(), empty(), empty()];
    let mut area = vec![0u64; categories as usize + 1];
    for &g in gt.labels() {
        if g != IGNORE {
            area[g as usize] += 1;
        }
    }
    for (c, &px) in area.iter().enumerate().skip(1) {
        if px == 0 {
            continue;
        }
        let b = SizeBucket::from_area(px, gt.len() as u64).index();
        buckets[b].0.add(c, region.intersection[c], region.union[c]);
        buckets[b]
            .1
            .add(c, boundary.intersection[c], boundary.union[c]);
    }
    Ok(ImageEval {
        confusion,
        boundary,
        img_correct: img_acc(pred, gt_categories),
        f_beta: ForegroundCounts::from_pair(gt, pred)?.f_beta(),
        buckets,
    })
}

/// Running dataset totals; fold [`ImageEval`]s in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAccumulator {
    pub confusion: ConfusionAccumulator,
    pub boundary: ClassIouCounts,
    pub images: u64,
    pub img_correct: u64,
    pub f_scores: Vec<Option<f64>>,
    pub buckets: Vec<(ClassIouCounts, ClassIouCounts)>,
}

impl EvalAccumulator {
    pub fn new(categories: u32) -> Self {
        Self {
            confusion: ConfusionAccumulator::new(categories),
            boundary: ClassIouCounts::new(categories),
            images: 0,
            img_correct: 0,
            f_scores: Vec::new(),
            buckets: (0..4)
                .map(|_| {
                    (
                        ClassIouCounts::new(categories),
                        ClassIouCounts::new(categories),
                    )
                })
                .collect(),
        }
    }

    pub fn push(&mut self, e: &ImageEval) -> Result<()> {
        self.confusion = self.confusion.merge(&e.confusion)?;
        self.boundary.merge_from(&e.boundary);
        self.images += 1;
        self.img_correct += u64::from(e.img_correct);
        self.f_scores.push(e.f_beta);
        for (acc, img) in self.buckets.iter_mut().zip(&e.buckets) {
            acc.0.merge_from(&img.0);
            acc.1.merge_from(&img.1);
        }
        Ok(())
    }

    /// Appends `other`, which must cover images after those already here.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.confusion = self.confusion.merge(&other.confusion)?;
        self.boundary.merge_from(&other.boundary);
        self.images += other.images;
        self.img_correct += other.img_correct;
        self.f_scores.extend_from_slice(&other.f_scores);
        for (acc, b) in self.buckets.iter_mut().zip(&other.buckets) {
            acc.0.merge_from(&b.0);
            acc.1.merge_from(&b.1);
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<EvalSummary> {
        let per_bucket = SizeBucket::ALL
            .iter()
            .map(|&b| {
                (
                    b,
                    self.buckets[b.index()].0.miou(),
                    self.buckets[b.index()].1.miou(),
                )
            })
            .collect();
        Ok(EvalSummary {
            miou: miou_from_confusion(&self.confusion)?,
            boundary_miou: self.boundary.miou().unwrap_or(0.0),
            img_acc: if self.images == 0 {
                0.0
            } else {
                100.0 * self.img_correct as f64 / self.images as f64
            },
            f_beta: f_beta_dataset(&self.f_scores),
            class_iou: self.confusion.class_iou(),
            per_bucket,
            images: self.images,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub miou: f64,
    pub boundary_miou: f64,
    pub img_acc: f64,
    pub f_beta: Option<f64>,
    pub class_iou: Vec<Option<f64>>,
    pub per_bucket: Vec<(SizeBucket, Option<f64>, Option<f64>)>,
    pub images: u64,
}
