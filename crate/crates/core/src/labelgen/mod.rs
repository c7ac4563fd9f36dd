//! Pixel attention, attended pooling, clustering-based pseudo labels and
//! the inference rules that turn scores into masks.

mod kmeans;

use rayon::prelude::*;

pub use kmeans::{kmeans, KMeansResult, DEFAULT_MAX_ITERS, PRNG_NAME};

use crate::error::{Error, Result};
use crate::formats::{CentroidSet, SegMask};
use crate::tensor::{l2_normalize_channels, normalize, Activation, DenseArray, Layer, MlpParams};

/// Default foreground threshold on the channel-mean attention.
pub const DEFAULT_TAU: f64 = 0.5;

/// Parameters of the pixel-attention module: one affine map `L -> L`
/// followed by an additive per-channel offset.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub m_a: MlpParams,
    pub theta: Vec<f64>,
}

impl AttentionParams {
    pub fn new(m_a: MlpParams, theta: Vec<f64>) -> Result<Self> {
        let l = theta.len();
        if m_a.layers.len() != 1 || m_a.in_dim() != l || m_a.out_dim() != l {
            return Err(Error::Shape(format!(
                "attention needs a single {l}->{l} layer"
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("non-finite theta".into()));
        }
        Ok(Self { m_a, theta })
    }

    /// All-zero parameters: attention is 0.5 everywhere.
    pub fn zeros(l: usize) -> Self {
        Self {
            m_a: MlpParams {
                layers: vec![Layer::zeros(l, l)],
                activation: Activation::Relu,
            },
            theta: vec![0.0; l],
        }
    }

    pub fn channels(&self) -> usize {
        self.theta.len()
    }

    fn layer(&self) -> &Layer {
        &self.m_a.layers[0]
    }

    /// Packs into an `(L + 2) x 1 x L` array: weight rows, then bias, then theta.
    pub fn to_array(&self) -> DenseArray {
        let l = self.channels();
        let mut data = self.layer().weight.clone();
        data.extend_from_slice(&self.layer().bias);
        data.extend_from_slice(&self.theta);
        DenseArray::new(vec![l + 2, 1, l], data).expect("finite parameters")
    }

    pub fn from_array(a: &DenseArray) -> Result<Self> {
        let (rows, one, l) = a.dims3()?;
        if one != 1 || rows != l + 2 {
            return Err(Error::Shape(format!(
                "attention parameters need shape {}x1x{l}, got {rows}x{one}x{l}",
                l + 2
            )));
        }
        let d = a.data();
        let layer = Layer::new(l, l, d[..l * l].to_vec(), d[l * l..l * l + l].to_vec())?;
        Self::new(
            MlpParams {
                layers: vec![layer],
                activation: Activation::Relu,
            },
            d[l * l + l..].to_vec(),
        )
    }
}

// strictly inside (0, 1) even where the f64 sigmoid would round to an endpoint
const ATTENTION_LO: f64 = f64::MIN_POSITIVE;
const ATTENTION_HI: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pre-activations `M_A(n) + theta` for one normalized pixel vector.
pub(crate) fn attention_logits(p: &AttentionParams, n: &[f64]) -> Vec<f64> {
    p.layer()
        .apply(n)
        .into_iter()
        .zip(&p.theta)
        .map(|(a, t)| a + t)
        .collect()
}

/// `sigmoid(M_A(normalize(z)) + theta)` at every pixel and channel.
pub fn pixel_attention(p: &AttentionParams, z: &DenseArray) -> Result<DenseArray> {
    let (l, h, w) = z.dims3()?;
    if l != p.channels() {
        return Err(Error::Shape(format!(
            "{}-channel attention on {l}-channel features",
            p.channels()
        )));
    }
    let n = l2_normalize_channels(z)?;
    let pixels: Vec<Vec<f64>> = (0..h * w)
        .into_par_iter()
        .map(|px| {
            attention_logits(p, &n.pixel(px))
                .into_iter()
                .map(|a| sigmoid(a).clamp(ATTENTION_LO, ATTENTION_HI))
                .collect()
        })
        .collect();
    DenseArray::from_pixels(&pixels, h, w)
}

fn weighted_pool(z: &DenseArray, c: &DenseArray) -> Result<Vec<f64>> {
    if z.shape() != c.shape() {
        return Err(Error::Shape(format!(
            "features {:?} vs attention {:?}",
            z.shape(),
            c.shape()
        )));
    }
    let (_, h, w) = z.dims3()?;
    let hw = h * w;
    Ok(z.data()
        .chunks_exact(hw)
        .zip(c.data().chunks_exact(hw))
        .map(|(zc, cc)| zc.iter().zip(cc).map(|(a, b)| a * b).sum::<f64>() / hw as f64)
        .collect())
}

/// Average pool of `c * z` over raw features.
pub fn attended_pool_raw(z: &DenseArray, c: &DenseArray) -> Result<Vec<f64>> {
    weighted_pool(z, c)
}

/// Average pool of `c * normalize(z)`.
pub fn attended_pool_normalized(z: &DenseArray, c: &DenseArray) -> Result<Vec<f64>> {
    weighted_pool(&l2_normalize_channels(z)?, c)
}

/// Unit-norm attended image embedding used as the clustering input.
pub fn image_embedding(p: &AttentionParams, z: &DenseArray) -> Result<Vec<f64>> {
    let c = pixel_attention(p, z)?;
    Ok(normalize(&attended_pool_raw(z, &c)?))
}

/// Binary foreground map over the pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub width: usize,
    pub height: usize,
    pub on: Vec<bool>,
}

impl Gate {
    pub fn all_on(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            on: vec![true; width * height],
        }
    }
}

/// On where the channel-mean attention is at least `tau`.
pub fn foreground_gate(c: &DenseArray, tau: f64) -> Result<Gate> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let (l, h, w) = c.dims3()?;
    let on = (0..h * w)
        .map(|p| c.pixel(p).iter().sum::<f64>() / l as f64 >= tau)
        .collect();
    Ok(Gate {
        width: w,
        height: h,
        on,
    })
}

/// Index of the nearest centroid by squared Euclidean distance, ties to the
/// smaller index, with that distance.
pub fn nearest_centroid(v: &[f64], k: &CentroidSet) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in k.rows().enumerate() {
        let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Gated-on pixels get `1 + index` of the nearest centroid to their
/// normalized embedding; gated-off pixels get 0.
pub fn assign_pixels(z: &DenseArray, k: &CentroidSet, gate: &Gate) -> Result<SegMask> {
    let (l, h, w) = z.dims3()?;
    if gate.width != w || gate.height != h || gate.on.len() != w * h {
        return Err(Error::Shape(format!(
            "{}x{} gate for a {w}x{h} feature map",
            gate.width, gate.height
        )));
    }
    if k.dim() != l {
        return Err(Error::Shape(format!(
            "{}-dim centroids for {l}-channel features",
            k.dim()
        )));
    }
    if k.count() > crate::formats::MAX_CATEGORIES as usize {
        return Err(Error::Invalid(format!(
            "{} centroids exceed the id range",
            k.count()
        )));
    }
    let labels = (0..h * w)
        .into_par_iter()
        .map(|p| {
            if gate.on[p] {
                (nearest_centroid(&normalize(&z.pixel(p)), k).0 + 1) as u16
            } else {
                0
            }
        })
        .collect();
    SegMask::new(w, h, labels)
}

/// Nearest-neighbour resampling to any size; the source pixel for target
/// column `x` is `floor((x + 0.5) * src_w / width)`.
pub fn resize_nearest(mask: &SegMask, width: usize, height: usize) -> Result<SegMask> {
    if width == 0 || height == 0 {
        return Err(Error::Shape("target size must be positive".into()));
    }
    let (sw, sh) = (mask.width(), mask.height());
    let xs: Vec<usize> = (0..width).map(|x| (2 * x + 1) * sw / (2 * width)).collect();
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = (2 * y + 1) * sh / (2 * height);
        labels.extend(xs.iter().map(|&sx| mask.get(sx, sy)));
    }
    SegMask::new(width, height, labels)
}

pub fn upsample_nearest(mask: &SegMask, width: usize, height: usize) -> Result<SegMask> {
    if width < mask.width() || height < mask.height() {
        return Err(Error::Shape(format!(
            "cannot upsample {}x{} to smaller {width}x{height}",
            mask.width(),
            mask.height()
        )));
    }
    resize_nearest(mask, width, height)
}

/// Per-pixel argmax over `C + 1` channels, ties to the smaller channel.
pub fn argmax_inference(logits: &DenseArray) -> Result<SegMask> {
    let (channels, h, w) = logits.dims3()?;
    if channels > crate::formats::MAX_CATEGORIES as usize + 1 {
        return Err(Error::Invalid(format!(
            "{channels} channels exceed the id range"
        )));
    }
    let labels = (0..h * w)
        .map(|p| {
            let v = logits.pixel(p);
            let mut best = 0;
            for (c, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    SegMask::new(w, h, labels)
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize_cam(cam: &[f64]) -> Vec<f64> {
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        cam.iter().map(|a| (a - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; cam.len()]
    }
}

/// Masks from per-category activation maps: a pixel takes the category
/// whose normalized activation is largest among those at or above `tau`
/// (ties to the smaller id), otherwise "other".
pub fn cam_infer(
    cams: &[(u16, Vec<f64>)],
    width: usize,
    height: usize,
    tau: f64,
) -> Result<SegMask> {
    if cams.is_empty() {
        return Err(Error::Empty("no activation maps".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    if let Some((c, _)) = cams.iter().find(|(_, m)| m.len() != width * height) {
        return Err(Error::Shape(format!(
            "map for category {c} is not {width}x{height}"
        )));
    }
    if let Some((c, _)) = cams.iter().find(|(_, m)| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invalid(format!(
            "non-finite activation for category {c}"
        )));
    }
    let normalized: Vec<(u16, Vec<f64>)> =
        cams.iter().map(|(c, m)| (*c, normalize_cam(m))).collect();
    let labels = (0..width * height)
        .map(|p| {
            let mut best: Option<(u16, f64)> = None;
            for (c, m) in &normalized {
                let a = m[p];
                if a < tau {
                    continue;
                }
                best = match best {
                    Some((bc, ba)) if ba > a || (ba == a && bc < *c) => Some((bc, ba)),
                    _ => Some((*c, a)),
                };
            }
            best.map_or(0, |(c, _)| c)
        })
        .collect();
    SegMask::new(width, height, labels)
}
