//! Seeded gradient checks of every loss kernel.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use segeval_core::labelgen::AttentionParams;
use segeval_core::losses::{
    attention_objective, cosine_loss, d2s_loss, d2s_objective, d2s_objective_surrogate,
    d2s_surrogate, d2s_targets, grad_check, max_numeric_magnitude, p2p_loss, p2p_surrogate,
    p2p_targets, CosineImageLoss, StageEmbeddings, StageFeatures, StageHead,
};
use segeval_core::tensor::{mlp_backward, mlp_forward, Activation, Layer};
use segeval_core::{DenseArray, MlpParams};

use crate::args::LosscheckArgs;
use crate::commands::config;
use crate::report::Report;

/// Outcome of one kernel over all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Largest finite difference along paths whose gradient is declared zero.
    pub zero_path_max: Option<f64>,
}

type Check = (f64, Option<f64>);
type Instance = fn(&mut ChaCha8Rng, f64) -> Result<Check>;

const KERNELS: [(&str, Instance); 6] = [
    ("mlp", mlp_instance),
    ("cosine_loss", cosine_instance),
    ("p2p_loss", p2p_instance),
    ("d2s_loss", d2s_instance),
    ("d2s_objective", d2s_objective_instance),
    ("attention_objective", attention_instance),
];

fn vec_in(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn map_in(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize) -> DenseArray {
    DenseArray::from_fn3(l, h, w, |_, _, _| rng.gen_range(-1.0..1.0)).expect("finite")
}

fn worst(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.max(b)))
}

fn mlp_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Check> {
    let p = MlpParams::random(&[4, 6, 3], 0.8, rng);
    let x = vec_in(rng, 4);
    let up = vec_in(rng, 3);
    let (g, gx) = mlp_backward(&p, &x, &up)?;
    let inner = |y: Vec<f64>| y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
    let e1 = grad_check(
        |q| inner(mlp_forward(&p.with_flat(q).unwrap(), &x).unwrap()),
        &p.flatten(),
        &g.flatten(),
        eps,
    )?;
    let e2 = grad_check(|q| inner(mlp_forward(&p, q).unwrap()), &x, &gx, eps)?;
    Ok((e1.max(e2), None))
}

fn cosine_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Check> {
    let a = vec_in(rng, 6);
    let b = vec_in(rng, 6);
    let c = cosine_loss(&a, &b)?;
    let e1 = grad_check(|q| cosine_loss(q, &b).unwrap().value, &a, &c.grad_a, eps)?;
    let e2 = grad_check(|q| cosine_loss(&a, q).unwrap().value, &b, &c.grad_b, eps)?;
    Ok((e1.max(e2), None))
}

fn p2p_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Check> {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> =
        (0..3).map(|_| (vec_in(rng, 4), vec_in(rng, 4))).collect();
    let mp = MlpParams::random(&[4, 5, 3], 0.8, rng);
    let pred = MlpParams::random(&[3, 3], 0.8, rng);
    let b = p2p_loss(&pairs, &mp, &pred)?;
    let t = p2p_targets(&pairs, &mp)?;
    let grad = |name| b.grad(name).expect("named group");
    let mut err = grad_check(
        |q| p2p_surrogate(&pairs, &mp.with_flat(q).unwrap(), &pred, &t).unwrap(),
        &mp.flatten(),
        grad("mp"),
        eps,
    )?;
    err = err.max(grad_check(
        |q| p2p_surrogate(&pairs, &mp, &pred.with_flat(q).unwrap(), &t).unwrap(),
        &pred.flatten(),
        grad("pred"),
        eps,
    )?);
    let move_z = |q: &[f64], second: bool| -> Vec<(Vec<f64>, Vec<f64>)> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let moved = q[i * 4..i * 4 + 4].to_vec();
                if second {
                    (a.clone(), moved)
                } else {
                    (moved, b.clone())
                }
            })
            .collect()
    };
    let z1: Vec<f64> = pairs.iter().flat_map(|p| p.0.clone()).collect();
    let z2: Vec<f64> = pairs.iter().flat_map(|p| p.1.clone()).collect();
    err = err.max(grad_check(
        |q| p2p_surrogate(&move_z(q, false), &mp, &pred, &t).unwrap(),
        &z1,
        grad("z1"),
        eps,
    )?);
    err = err.max(grad_check(
        |q| p2p_surrogate(&move_z(q, true), &mp, &pred, &t).unwrap(),
        &z2,
        grad("z2"),
        eps,
    )?);
    // stop-gradient: the targets stay pinned while their sources move
    let pinned = |_: &[f64]| p2p_surrogate(&pairs, &mp, &pred, &t).unwrap();
    let zero = max_numeric_magnitude(pinned, &z2, eps)?;
    Ok((err, Some(zero)))
}

fn d2s_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Check> {
    let stages = [1u8, 2, 3, 4];
    let u1: StageEmbeddings = stages.iter().map(|&s| (s, vec_in(rng, 4))).collect();
    let u2: StageEmbeddings = stages.iter().map(|&s| (s, vec_in(rng, 4))).collect();
    let b = d2s_loss(&u1, &u2, &stages, &CosineImageLoss)?;
    let (t1, t2) = (u1[&4].clone(), u2[&4].clone());
    let mut err: f64 = 0.0;
    let mut zero = None;
    for s in stages {
        for second in [false, true] {
            let base = if second { &u2 } else { &u1 };
            let f = |q: &[f64]| {
                let mut v = base.clone();
                v.insert(s, q.to_vec());
                let (a, b) = if second { (&u1, &v) } else { (&v, &u2) };
                d2s_surrogate(a, b, (&t1, &t2), &stages, &CosineImageLoss).unwrap()
            };
            let name = format!("u{}.s{s}", if second { 2 } else { 1 });
            err = err.max(grad_check(
                f,
                &base[&s],
                b.grad(&name).expect("named group"),
                eps,
            )?);
        }
    }
    // last-stage targets are under stop-gradient: pinned, their sources are inert
    let pinned =
        |_: &[f64]| d2s_surrogate(&u1, &u2, (&t1, &t2), &stages, &CosineImageLoss).unwrap();
    for t in [&t1, &t2] {
        zero = worst(zero, max_numeric_magnitude(pinned, t, eps)?);
    }
    Ok((err, zero))
}

fn d2s_objective_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Check> {
    let (l, d) = (3, 4);
    let heads: BTreeMap<u8, StageHead> = (1..=4)
        .map(|s| {
            let m_k = MlpParams::random(&[l, l], 0.8, rng);
            (
                s,
                StageHead {
                    m_i: MlpParams::random(&[l, 5, d], 0.8, rng),
                    m_k,
                },
            )
        })
        .collect();
    let f1: StageFeatures = (1..=4).map(|s| (s, map_in(rng, l, 2, 3))).collect();
    let f2: StageFeatures = (1..=4).map(|s| (s, map_in(rng, l, 2, 3))).collect();
    let stages = [1u8, 3, 4];
    let b = d2s_objective(&f1, &f2, &heads, &stages, &CosineImageLoss)?;
    let (t1, t2) = d2s_targets(&f1, &f2, &heads)?;
    let mut err: f64 = 0.0;
    for s in stages {
        for pixel_head in [false, true] {
            let Some(g) = b.grad(&format!("s{s}.{}", if pixel_head { "m_k" } else { "m_i" }))
            else {
                continue;
            };
            let base = if pixel_head {
                &heads[&s].m_k
            } else {
                &heads[&s].m_i
            };
            let f = |q: &[f64]| {
                let mut h = heads.clone();
                let e = h.get_mut(&s).expect("stage head");
                let p = base.with_flat(q).unwrap();
                if pixel_head {
                    e.m_k = p
                } else {
                    e.m_i = p
                }
                d2s_objective_surrogate(&f1, &f2, &h, &stages, (&t1, &t2), &CosineImageLoss)
                    .unwrap()
            };
            err = err.max(grad_check(f, &base.flatten(), g, eps)?);
        }
    }
    Ok((err, None))
}

fn attention_instance(rng: &mut ChaCha8Rng, eps: f64) -> Result<Check> {
    let l = 4;
    let z = map_in(rng, l, 3, 3);
    let layer = Layer::random(l, l, 0.9, rng);
    let params = AttentionParams::new(
        MlpParams::new(vec![layer], Activation::Relu)?,
        vec_in(rng, l),
    )?;
    let m_i = MlpParams::random(&[l, 5, 3], 0.8, rng);
    let target = vec_in(rng, 3);
    let b = attention_objective(&z, &params, &m_i, &target, &CosineImageLoss)?;
    let value = |p: &AttentionParams, m: &MlpParams| {
        attention_objective(&z, p, m, &target, &CosineImageLoss)
            .unwrap()
            .value
    };
    let grad = |name| b.grad(name).expect("named group");
    let f = |q: &[f64]| {
        value(
            &AttentionParams::new(params.m_a.with_flat(q).unwrap(), params.theta.clone()).unwrap(),
            &m_i,
        )
    };
    let mut err = grad_check(f, &params.m_a.flatten(), grad("m_a"), eps)?;
    let f = |q: &[f64]| {
        value(
            &AttentionParams::new(params.m_a.clone(), q.to_vec()).unwrap(),
            &m_i,
        )
    };
    err = err.max(grad_check(f, &params.theta, grad("theta"), eps)?);
    err = err.max(grad_check(
        |q| value(&params, &m_i.with_flat(q).unwrap()),
        &m_i.flatten(),
        grad("m_i"),
        eps,
    )?);
    // detached features: the objective sees the pinned z whatever copy moves
    let pinned = |_: &[f64]| value(&params, &m_i);
    let zero = max_numeric_magnitude(pinned, z.data(), eps)?
        .max(grad("z").iter().fold(0.0, |m, g| m.max(g.abs())));
    Ok((err, Some(zero)))
}

/// Runs every kernel on `instances` seeded draws. Instance `i` of kernel `j`
/// reads its own stream of the generator, so results do not depend on the
/// worker count.
pub fn run_checks(seed: u64, instances: usize, eps: f64) -> Result<Vec<KernelCheck>> {
    KERNELS
        .iter()
        .enumerate()
        .map(|(j, &(kernel, f))| {
            let results: Vec<Check> = (0..instances)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((j as u64) << 32) | i as u64);
                    f(&mut rng, eps)
                })
                .collect::<Result<_>>()?;
            Ok(KernelCheck {
                kernel,
                instances,
                max_rel_error: results.iter().fold(0.0, |m, r| m.max(r.0)),
                zero_path_max: results
                    .iter()
                    .fold(None, |m, r| r.1.map_or(m, |z| worst(m, z))),
            })
        })
        .collect()
}

pub const ZERO_PATH_LIMIT: f64 = 1e-8;

pub fn cmd_losscheck(a: &LosscheckArgs, seed: u64) -> Result<Report> {
    if a.instances == 0 {
        bail!("--instances must be at least 1");
    }
    if !(a.eps.is_finite() && a.eps > 0.0) {
        bail!("--eps must be positive");
    }
    let checks = run_checks(seed, a.instances, a.eps)?;
    let pass = |c: &KernelCheck| {
        c.max_rel_error < a.tolerance && c.zero_path_max.is_none_or(|z| z < ZERO_PATH_LIMIT)
    };
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !pass(c))
        .map(|c| c.kernel)
        .collect();

    let mut r = Report::new();
    config(
        &mut r,
        "losscheck",
        seed,
        vec![
            ("instances", a.instances.into()),
            ("eps", a.eps.into()),
            ("tolerance", a.tolerance.into()),
        ],
    );
    r.fields(
        "summary",
        vec![
            ("kernels", checks.len().into()),
            ("all_pass", failed.is_empty().into()),
        ],
    );
    let rows = checks
        .iter()
        .map(|c| {
            vec![
                c.kernel.into(),
                c.instances.into(),
                format!("{:.3e}", c.max_rel_error).into(),
                c.zero_path_max
                    .map_or_else(|| "n/a".to_string(), |z| format!("{z:.3e}"))
                    .into(),
                pass(c).into(),
            ]
        })
        .collect();
    r.table(
        "kernels",
        &[
            "kernel",
            "instances",
            "max_rel_error",
            "zero_path_max",
            "pass",
        ],
        rows,
    );
    if !failed.is_empty() {
        r.failure = Some(format!("gradient check failed for {}", failed.join(", ")));
    }
    Ok(r)
}
