//! Loss kernels with analytic gradients: negative-cosine alignment between
//! overlapping pixels of two views, deep-to-shallow supervision between
//! network stages, and the attention fine-tuning objective.
//!
//! Stop-gradient operands are computed once from the inputs and then held
//! constant. Every kernel has a `*_surrogate` evaluator that takes those
//! operands explicitly, which is the function its analytic gradient
//! differentiates.

mod gradcheck;
mod overlap;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, max_numeric_magnitude, max_relative_error, numeric_gradient};
pub use overlap::{overlap_extract, overlap_indices, PixelPairs, ViewGeometry};

use crate::error::{Error, Result};
use crate::labelgen::{attention_logits, sigmoid, AttentionParams};
use crate::tensor::{
    dot, l2_normalize_channels, mlp_backward, mlp_forward, norm, DenseArray, MlpGrads, MlpParams,
};

/// Named gradient of one parameter group, in that group's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradGroup {
    pub name: String,
    pub values: Vec<f64>,
}

/// Loss value plus gradients for every parameter group and input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub grads: Vec<GradGroup>,
}

impl LossBundle {
    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.grads
            .iter()
            .find(|g| g.name == name)
            .map(|g| g.values.as_slice())
    }

    fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.grads.push(GradGroup {
            name: name.into(),
            values,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineLoss {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// `-<a, b> / (|a| |b|)` with gradients in both arguments.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> Result<CosineLoss> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine loss of a zero vector".into()));
    }
    let ab = dot(a, b);
    let cos = ab / (na * nb);
    // d cos / da = b / (|a||b|) - cos * a / |a|^2
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    Ok(CosineLoss {
        value: -cos,
        grad_a,
        grad_b,
    })
}

/// Image-level loss `L_I(target, x)`; the target is under stop-gradient, so
/// only the gradient in `x` is returned.
pub trait ImageLoss: Sync {
    fn eval(&self, target: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Negative cosine similarity, the default image-level loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineImageLoss;

impl ImageLoss for CosineImageLoss {
    fn eval(&self, target: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let c = cosine_loss(target, x)?;
        Ok((c.value, c.grad_b))
    }
}

/// Stop-gradient targets of the pixel alignment: `M_p` of both views.
pub fn p2p_targets(
    pairs: &[(Vec<f64>, Vec<f64>)],
    mp: &MlpParams,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    pairs
        .iter()
        .map(|(a, b)| Ok((mlp_forward(mp, a)?, mlp_forward(mp, b)?)))
        .collect()
}

/// Pixel alignment loss with its stop-gradient operands supplied.
pub fn p2p_surrogate(
    pairs: &[(Vec<f64>, Vec<f64>)],
    mp: &MlpParams,
    pred: &MlpParams,
    targets: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no overlapping pixel pairs".into()));
    }
    let mut total = 0.0;
    for ((z1, z2), (t1, t2)) in pairs.iter().zip(targets) {
        let p1 = mlp_forward(pred, &mlp_forward(mp, z1)?)?;
        let p2 = mlp_forward(pred, &mlp_forward(mp, z2)?)?;
        total += cosine_loss(&p1, t2)?.value + cosine_loss(t1, &p2)?.value;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean over pairs of `L_s(P(v1), sg(v2)) + L_s(sg(v1), P(v2))` with
/// `v = M_p(z)`. Gradient groups: `mp`, `pred`, `z1`, `z2` (pairs
/// concatenated in order).
pub fn p2p_loss(
    pairs: &[(Vec<f64>, Vec<f64>)],
    mp: &MlpParams,
    pred: &MlpParams,
) -> Result<LossBundle> {
    if pairs.is_empty() {
        return Err(Error::Empty("no overlapping pixel pairs".into()));
    }
    if pred.in_dim() != mp.out_dim() || pred.out_dim() != mp.out_dim() {
        return Err(Error::Shape(
            "predictor must map the projection space to itself".into(),
        ));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut g_mp = MlpGrads::zeros_like(mp);
    let mut g_pred = MlpGrads::zeros_like(pred);
    let mut g_z1 = Vec::new();
    let mut g_z2 = Vec::new();
    let mut value = 0.0;
    for (z1, z2) in pairs {
        let v1 = mlp_forward(mp, z1)?;
        let v2 = mlp_forward(mp, z2)?;
        let mut grad_z =
            |z: &[f64], v: &[f64], target: &[f64], out: &mut Vec<f64>| -> Result<f64> {
                let p = mlp_forward(pred, v)?;
                let c = cosine_loss(&p, target)?;
                let (gp, gv) = mlp_backward(pred, v, &c.grad_a)?;
                let (gm, gz) = mlp_backward(mp, z, &gv)?;
                g_pred.add_assign(&gp);
                g_mp.add_assign(&gm);
                out.extend(gz.iter().map(|g| g * scale));
                Ok(c.value)
            };
        value += grad_z(z1, &v1, &v2, &mut g_z1)?;
        value += grad_z(z2, &v2, &v1, &mut g_z2)?;
    }
    g_mp.scale(scale);
    g_pred.scale(scale);
    let mut b = LossBundle {
        value: value * scale,
        grads: Vec::new(),
    };
    b.push("mp", g_mp.flatten());
    b.push("pred", g_pred.flatten());
    b.push("z1", g_z1);
    b.push("z2", g_z2);
    Ok(b)
}

/// Per-stage image-level and pixel-level heads.
#[derive(Debug, Clone, PartialEq)]
pub struct StageHead {
    pub m_i: MlpParams,
    pub m_k: MlpParams,
}

fn check_stage(stage: u8) -> Result<()> {
    if (1..=4).contains(&stage) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("stage {stage} outside 1..=4")))
    }
}

fn mean_pixels(pixels: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; pixels[0].len()];
    for p in pixels {
        acc.iter_mut().zip(p).for_each(|(a, x)| *a += x);
    }
    acc.iter().map(|a| a / pixels.len() as f64).collect()
}

/// Stage embedding: `M_I(pool(z))` for the last stage, `M_I(pool(M_K(z)))`
/// with `M_K` applied per pixel for the earlier ones.
pub fn d2s_embed(z: &DenseArray, stage: u8, m_i: &MlpParams, m_k: &MlpParams) -> Result<Vec<f64>> {
    check_stage(stage)?;
    let pixels = z.pixels()?;
    let pooled = if stage == 4 {
        mean_pixels(&pixels)
    } else {
        let mapped = pixels
            .iter()
            .map(|p| mlp_forward(m_k, p))
            .collect::<Result<Vec<_>>>()?;
        mean_pixels(&mapped)
    };
    mlp_forward(m_i, &pooled)
}

/// Backward pass of [`d2s_embed`]: gradients of `<g, embed>` for `M_I`
/// and, below the last stage, `M_K`.
fn d2s_embed_backward(
    z: &DenseArray,
    stage: u8,
    head: &StageHead,
    g: &[f64],
) -> Result<(MlpGrads, Option<MlpGrads>)> {
    let pixels = z.pixels()?;
    if stage == 4 {
        let (gi, _) = mlp_backward(&head.m_i, &mean_pixels(&pixels), g)?;
        return Ok((gi, None));
    }
    let mapped = pixels
        .iter()
        .map(|p| mlp_forward(&head.m_k, p))
        .collect::<Result<Vec<_>>>()?;
    let (gi, g_pool) = mlp_backward(&head.m_i, &mean_pixels(&mapped), g)?;
    let per_pixel: Vec<f64> = g_pool.iter().map(|x| x / pixels.len() as f64).collect();
    let mut gk = MlpGrads::zeros_like(&head.m_k);
    for p in &pixels {
        gk.add_assign(&mlp_backward(&head.m_k, p, &per_pixel)?.0);
    }
    Ok((gi, Some(gk)))
}

/// Embeddings of one view, keyed by stage.
pub type StageEmbeddings = BTreeMap<u8, Vec<f64>>;

fn check_stage_set(stages: &[u8], u1: &StageEmbeddings, u2: &StageEmbeddings) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Empty("stage set".into()));
    }
    for &s in stages {
        check_stage(s)?;
        if !u1.contains_key(&s) || !u2.contains_key(&s) {
            return Err(Error::Invalid(format!("missing embedding for stage {s}")));
        }
    }
    if !u1.contains_key(&4) || !u2.contains_key(&4) {
        return Err(Error::Invalid("last-stage embeddings are required".into()));
    }
    Ok(())
}

/// Deep-to-shallow loss with the last-stage targets supplied.
pub fn d2s_surrogate(
    u1: &StageEmbeddings,
    u2: &StageEmbeddings,
    targets: (&[f64], &[f64]),
    stages: &[u8],
    loss: &dyn ImageLoss,
) -> Result<f64> {
    check_stage_set(stages, u1, u2)?;
    let inv = 1.0 / stages.len() as f64;
    let mut value = 0.0;
    for &s in stages {
        value += inv * loss.eval(targets.0, &u2[&s])?.0;
        value += inv * loss.eval(targets.1, &u1[&s])?.0;
    }
    Ok(value)
}

/// `(1/|S|) sum_j L_I(sg(u1[4]), u2[j]) + (1/|S|) sum_j L_I(sg(u2[4]), u1[j])`.
/// Gradient groups `u1.s<j>` and `u2.s<j>` for every stage in `stages`.
pub fn d2s_loss(
    u1: &StageEmbeddings,
    u2: &StageEmbeddings,
    stages: &[u8],
    loss: &dyn ImageLoss,
) -> Result<LossBundle> {
    check_stage_set(stages, u1, u2)?;
    let inv = 1.0 / stages.len() as f64;
    let mut g1: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut g2: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut value = 0.0;
    for &s in stages {
        let (v2, gx2) = loss.eval(&u1[&4], &u2[&s])?;
        let (v1, gx1) = loss.eval(&u2[&4], &u1[&s])?;
        value += inv * (v1 + v2);
        accumulate(
            g2.entry(s).or_insert_with(|| vec![0.0; gx2.len()]),
            &gx2,
            inv,
        );
        accumulate(
            g1.entry(s).or_insert_with(|| vec![0.0; gx1.len()]),
            &gx1,
            inv,
        );
    }
    let mut b = LossBundle {
        value,
        grads: Vec::new(),
    };
    for (s, g) in g1 {
        b.push(format!("u1.s{s}"), g);
    }
    for (s, g) in g2 {
        b.push(format!("u2.s{s}"), g);
    }
    Ok(b)
}

fn accumulate(acc: &mut [f64], g: &[f64], scale: f64) {
    acc.iter_mut().zip(g).for_each(|(a, x)| *a += scale * x);
}

/// Per-stage features of one view.
pub type StageFeatures = BTreeMap<u8, DenseArray>;

fn embed_all(
    feats: &StageFeatures,
    heads: &BTreeMap<u8, StageHead>,
    wanted: &[u8],
) -> Result<StageEmbeddings> {
    let mut out = StageEmbeddings::new();
    for &s in wanted.iter().chain(std::iter::once(&4)) {
        let z = feats
            .get(&s)
            .ok_or_else(|| Error::Invalid(format!("missing features for stage {s}")))?;
        let h = heads
            .get(&s)
            .ok_or_else(|| Error::Invalid(format!("missing head for stage {s}")))?;
        out.insert(s, d2s_embed(z, s, &h.m_i, &h.m_k)?);
    }
    Ok(out)
}

/// Last-stage embeddings of both views, the stop-gradient targets of
/// [`d2s_objective`].
pub fn d2s_targets(
    f1: &StageFeatures,
    f2: &StageFeatures,
    heads: &BTreeMap<u8, StageHead>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let e1 = embed_all(f1, heads, &[])?;
    let e2 = embed_all(f2, heads, &[])?;
    Ok((e1[&4].clone(), e2[&4].clone()))
}

/// [`d2s_objective`] evaluated with its targets held fixed.
pub fn d2s_objective_surrogate(
    f1: &StageFeatures,
    f2: &StageFeatures,
    heads: &BTreeMap<u8, StageHead>,
    stages: &[u8],
    targets: (&[f64], &[f64]),
    loss: &dyn ImageLoss,
) -> Result<f64> {
    let u1 = embed_all(f1, heads, stages)?;
    let u2 = embed_all(f2, heads, stages)?;
    d2s_surrogate(&u1, &u2, targets, stages, loss)
}

/// Deep-to-shallow loss from raw stage features through the stage heads.
/// Gradient groups `s<j>.m_i` and, for `j < 4`, `s<j>.m_k`, for every
/// stage in `stages`, in the flat layout of [`MlpParams::flatten`].
pub fn d2s_objective(
    f1: &StageFeatures,
    f2: &StageFeatures,
    heads: &BTreeMap<u8, StageHead>,
    stages: &[u8],
    loss: &dyn ImageLoss,
) -> Result<LossBundle> {
    let u1 = embed_all(f1, heads, stages)?;
    let u2 = embed_all(f2, heads, stages)?;
    let inner = d2s_loss(&u1, &u2, stages, loss)?;
    let mut b = LossBundle {
        value: inner.value,
        grads: Vec::new(),
    };
    let mut seen: Vec<u8> = stages.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for s in seen {
        let head = &heads[&s];
        let mut gi = MlpGrads::zeros_like(&head.m_i);
        let mut gk = MlpGrads::zeros_like(&head.m_k);
        for (feats, key) in [(f1, format!("u1.s{s}")), (f2, format!("u2.s{s}"))] {
            let g = inner.grad(&key).expect("every stage has a gradient");
            let (dgi, dgk) = d2s_embed_backward(&feats[&s], s, head, g)?;
            gi.add_assign(&dgi);
            if let Some(dgk) = dgk {
                gk.add_assign(&dgk);
            }
        }
        b.push(format!("s{s}.m_i"), gi.flatten());
        if s < 4 {
            b.push(format!("s{s}.m_k"), gk.flatten());
        }
    }
    Ok(b)
}

/// `L_P2P + L_D2S + L_e`, with `L_e = 0` when absent.
pub fn sum_loss(l_p2p: f64, l_d2s: f64, l_e: Option<f64>) -> Result<f64> {
    let l_e = l_e.unwrap_or(0.0);
    if [l_p2p, l_d2s, l_e].iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite loss component".into()));
    }
    Ok(l_p2p + l_d2s + l_e)
}

/// Attended embedding `M_I(pool(c(z) * normalize(z)))`.
pub fn attention_embedding(
    z: &DenseArray,
    params: &AttentionParams,
    m_i: &MlpParams,
) -> Result<Vec<f64>> {
    let (l, _, _) = z.dims3()?;
    if l != params.channels() {
        return Err(Error::Shape(format!(
            "{}-channel attention on {l}-channel features",
            params.channels()
        )));
    }
    let n = l2_normalize_channels(z)?.pixels()?;
    let weighted: Vec<Vec<f64>> = n
        .iter()
        .map(|np| {
            attention_logits(params, np)
                .iter()
                .zip(np)
                .map(|(a, x)| sigmoid(*a) * x)
                .collect()
        })
        .collect();
    mlp_forward(m_i, &mean_pixels(&weighted))
}

/// Attention fine-tuning objective `L_I(target, M_I(pool(c(z) * normalize(z))))`.
///
/// The features are detached: gradient groups are `m_a`, `theta`, `m_i`
/// and `z`, the last identically zero.
pub fn attention_objective(
    z: &DenseArray,
    params: &AttentionParams,
    m_i: &MlpParams,
    target: &[f64],
    loss: &dyn ImageLoss,
) -> Result<LossBundle> {
    let (l, h, w) = z.dims3()?;
    if l != params.channels() {
        return Err(Error::Shape(format!(
            "{}-channel attention on {l}-channel features",
            params.channels()
        )));
    }
    let hw = (h * w) as f64;
    let n = l2_normalize_channels(z)?.pixels()?;
    let gates: Vec<Vec<f64>> = n
        .iter()
        .map(|np| {
            attention_logits(params, np)
                .into_iter()
                .map(sigmoid)
                .collect()
        })
        .collect();
    let weighted: Vec<Vec<f64>> = gates
        .iter()
        .zip(&n)
        .map(|(c, np)| c.iter().zip(np).map(|(a, b)| a * b).collect())
        .collect();
    let pooled = mean_pixels(&weighted);
    let v_hat = mlp_forward(m_i, &pooled)?;
    let (value, g_v) = loss.eval(target, &v_hat)?;
    let (g_mi, g_pooled) = mlp_backward(m_i, &pooled, &g_v)?;

    let mut g_w = vec![0.0; l * l];
    let mut g_b = vec![0.0; l];
    let mut g_theta = vec![0.0; l];
    for (c, np) in gates.iter().zip(&n) {
        for o in 0..l {
            // d pooled_o / d logit_o at this pixel
            let g_logit = g_pooled[o] * np[o] * c[o] * (1.0 - c[o]) / hw;
            g_b[o] += g_logit;
            g_theta[o] += g_logit;
            for (j, &x) in np.iter().enumerate() {
                g_w[o * l + j] += g_logit * x;
            }
        }
    }
    let mut g_ma = g_w;
    g_ma.extend(g_b);

    let mut b = LossBundle {
        value,
        grads: Vec::new(),
    };
    b.push("m_a", g_ma);
    b.push("theta", g_theta);
    b.push("m_i", g_mi.flatten());
    b.push("z", vec![0.0; z.data().len()]);
    Ok(b)
}
