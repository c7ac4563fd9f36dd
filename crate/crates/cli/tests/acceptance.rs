//! Acceptance checks, one PASS/FAIL line each. Exits nonzero on any failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Result};
use clap::Parser;
use common::{image_id, pipeline_corpus, random_pair, snapshot, SyntheticSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segeval_cli::losscheck::{run_checks, ZERO_PATH_LIMIT};
use segeval_cli::{run_with_pool, Cli, Command, Format, Report, Value};
use segeval_core::formats::{SegMask, IGNORE, OTHER};
use segeval_core::labelgen::{kmeans, nearest_centroid, DEFAULT_MAX_ITERS, DEFAULT_TAU};
use segeval_core::metrics::{
    boundary_miou, confusion_accumulate, f_beta, f_beta_dataset, img_acc, merge,
    miou_from_confusion, BETA_SQ, DEFAULT_D_FRAC,
};
use segeval_core::protocols::{hungarian_max, MatchingMatrix, DEFAULT_K};
use segeval_core::tensor::normalize;
use tempfile::TempDir;

const C: u16 = 5;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

// brute-force oracles, straight from the pixels

fn oracle_miou(pairs: &[(SegMask, SegMask)]) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for c in 0..=C {
        let (mut i, mut u) = (0u64, 0u64);
        for (gt, pred) in pairs {
            for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
                if g != IGNORE {
                    i += u64::from(g == c && p == c);
                    u += u64::from(g == c || p == c);
                }
            }
        }
        if u > 0 {
            sum += i as f64 / u as f64;
            n += 1;
        }
    }
    100.0 * sum / n as f64
}

fn oracle_img_acc(pred: &SegMask, gt_cats: &BTreeSet<u16>) -> bool {
    let mut best: Option<(u16, usize)> = None;
    for c in 1..=C {
        let n = pred.labels().iter().filter(|&&p| p == c).count();
        if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
            best = Some((c, n));
        }
    }
    best.is_some_and(|(c, _)| gt_cats.contains(&c))
}

fn oracle_f_beta(gt: &SegMask, pred: &SegMask) -> Option<f64> {
    let (mut tp, mut pp, mut ap) = (0u64, 0u64, 0u64);
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != IGNORE {
            tp += u64::from(g != OTHER && p != OTHER);
            pp += u64::from(p != OTHER);
            ap += u64::from(g != OTHER);
        }
    }
    if ap == 0 {
        return None;
    }
    if tp == 0 {
        return Some(0.0);
    }
    let (prec, rec) = (tp as f64 / pp as f64, tp as f64 / ap as f64);
    Some(1.3 * prec * rec / (0.3 * prec + rec))
}

/// Labels drawn from a random subset of `0..=C`, so some images miss
/// categories, have no foreground or share nothing with their partner.
fn sparse_mask(rng: &mut ChaCha8Rng, ignore: f64) -> SegMask {
    let palette: Vec<u16> = (0..=C).filter(|_| rng.gen_bool(0.4)).collect();
    let palette = if palette.is_empty() {
        vec![OTHER]
    } else {
        palette
    };
    let labels = (0..256)
        .map(|_| {
            if rng.gen_bool(ignore) {
                IGNORE
            } else {
                palette[rng.gen_range(0..palette.len())]
            }
        })
        .collect();
    SegMask::new(16, 16, labels).unwrap()
}

fn random_pairs(seed: u64, n: usize) -> Vec<(SegMask, SegMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                random_pair(&mut rng, 16, 16, C)
            } else {
                (sparse_mask(&mut rng, 0.05), sparse_mask(&mut rng, 0.0))
            }
        })
        .collect()
}

fn ac1() -> Result<String> {
    let pairs = random_pairs(1, 200);
    let mut acc = confusion_accumulate(&pairs[0].0, &pairs[0].1, C.into())?;
    for (gt, pred) in &pairs[1..] {
        acc = merge(&acc, &confusion_accumulate(gt, pred, C.into())?)?;
    }
    let (got, want) = (miou_from_confusion(&acc)?, oracle_miou(&pairs));
    ensure!(close(got, want), "mIoU {got} vs oracle {want}");
    for (i, pair) in pairs.iter().enumerate() {
        let (g, w) = (
            miou_from_confusion(&confusion_accumulate(&pair.0, &pair.1, C.into())?)?,
            oracle_miou(std::slice::from_ref(pair)),
        );
        ensure!(close(g, w), "pair {i}: mIoU {g} vs oracle {w}");
    }
    let mut scores = Vec::new();
    let mut correct = 0;
    for (i, (gt, pred)) in pairs.iter().enumerate() {
        let cats = gt.categories();
        ensure!(
            img_acc(pred, &cats) == oracle_img_acc(pred, &cats),
            "Img-Acc differs on pair {i}"
        );
        correct += usize::from(img_acc(pred, &cats));
        let (f, o) = (f_beta(gt, pred)?, oracle_f_beta(gt, pred));
        ensure!(
            f.is_some() == o.is_some(),
            "F_beta presence differs on pair {i}"
        );
        if let (Some(f), Some(o)) = (f, o) {
            ensure!(close(f, o), "F_beta {f} vs oracle {o} on pair {i}");
        }
        scores.push(f);
    }
    let undefined = scores.iter().filter(|f| f.is_none()).count();
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    let mean = 100.0 * defined.iter().sum::<f64>() / defined.len() as f64;
    let fd = f_beta_dataset(&scores).ok_or_else(|| anyhow!("no F_beta"))?;
    ensure!(close(fd, mean), "dataset F_beta {fd} vs {mean}");
    Ok(format!(
        "miou={got:.4} img_acc={correct}/200 f_beta={fd:.4} ({undefined} n/a)"
    ))
}

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

fn ac2() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let perms: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    for t in 0..200 {
        let c = rng.gen_range(2..=7usize);
        let mut s = MatchingMatrix::zeros(c as u32);
        // each random image pair of sets adds its co-occurrences
        for _ in 0..rng.gen_range(1..40) {
            let pred: BTreeSet<u16> = (1..=c as u16).filter(|_| rng.gen_bool(0.4)).collect();
            let gt: BTreeSet<u16> = (1..=c as u16).filter(|_| rng.gen_bool(0.4)).collect();
            s.add_image(&pred, &gt)?;
        }
        let f = hungarian_max(&s);
        let got: u64 = (1..=c as u16).map(|g| s.get(g, f.apply(g).unwrap())).sum();
        let best = perms[c]
            .iter()
            .map(|p| {
                (0..c)
                    .map(|g| s.get(g as u16 + 1, p[g] as u16 + 1))
                    .sum::<u64>()
            })
            .max()
            .unwrap();
        ensure!(
            got == best,
            "matrix {t} (C={c}): {got} vs exhaustive {best}"
        );
    }
    Ok("200 matrices".into())
}

fn square(x0: usize) -> SegMask {
    let labels = (0..100)
        .map(|p| u16::from((2..8).contains(&(p / 10)) && (x0..x0 + 6).contains(&(p % 10))))
        .collect();
    SegMask::new(10, 10, labels).unwrap()
}

fn ac3() -> Result<String> {
    let pairs = random_pairs(1, 200);
    for (i, (gt, pred)) in pairs.iter().enumerate() {
        let b = boundary_miou([(gt, pred)], C.into(), 2.0)?;
        let m = miou_from_confusion(&confusion_accumulate(gt, pred, C.into())?)?;
        ensure!(b == m, "pair {i}: boundary {b} vs region {m}");
    }
    // 10x10, radius 1: class 1 bands meet in I=10, U=30; class 0 bands in I=46, U=68
    let (gt, pred) = (square(2), square(3));
    let got = boundary_miou([(&gt, &pred)], 1, DEFAULT_D_FRAC)?;
    let want = 100.0 * (10.0 / 30.0 + 46.0 / 68.0) / 2.0;
    ensure!(close(got, want), "shifted square: {got} vs {want}");
    Ok(format!("shifted square {got:.6}"))
}

fn ac4() -> Result<String> {
    let checks = run_checks(0, 100, 1e-5)?;
    let mut worst = 0.0f64;
    for k in &checks {
        ensure!(
            k.max_rel_error < 1e-4,
            "{}: relative error {:e}",
            k.kernel,
            k.max_rel_error
        );
        if let Some(z) = k.zero_path_max {
            ensure!(
                z < ZERO_PATH_LIMIT,
                "{}: declared-zero path moves by {z:e}",
                k.kernel
            );
        }
        worst = worst.max(k.max_rel_error);
    }
    for name in ["p2p_loss", "d2s_loss", "attention_objective"] {
        let k = checks
            .iter()
            .find(|k| k.kernel == name)
            .ok_or_else(|| anyhow!("no {name} check"))?;
        ensure!(
            k.zero_path_max.is_some(),
            "{name} has no declared-zero check"
        );
    }
    Ok(format!("{} kernels, worst {worst:.2e}", checks.len()))
}

fn ac5() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut iters = 0;
    for i in 0..50 {
        let n = rng.gen_range(20..=2000);
        let l = rng.gen_range(2..=32);
        let k = rng.gen_range(1..=10.min(n));
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| normalize(&(0..l).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let r = kmeans(&data, k, i, DEFAULT_MAX_ITERS)?;
        ensure!(
            r.objective_history.windows(2).all(|w| w[1] <= w[0]),
            "instance {i}: objective went up"
        );
        ensure!(r.converged, "instance {i} hit the iteration cap");
        let fresh: Vec<usize> = data
            .iter()
            .map(|v| nearest_centroid(v, &r.centroids).0)
            .collect();
        ensure!(fresh == r.assignments, "instance {i} is not at a fixpoint");
        iters += r.iterations;

        let exact = kmeans(&data[..k], k, i, DEFAULT_MAX_ITERS)?;
        ensure!(
            exact.objective() == 0.0,
            "N == C gives {}",
            exact.objective()
        );
    }
    Ok(format!("50 instances, {iters} iterations"))
}

fn cli(args: &[&str]) -> Cli {
    Cli::parse_from(std::iter::once("segeval").chain(args.iter().copied()))
}

fn run(args: &[&str]) -> Result<Report> {
    run_with_pool(&cli(args))
}

fn float(r: &Report, key: &str) -> Result<f64> {
    match r.get("summary", key) {
        Some(Value::Float(v)) | Some(Value::MaybeFloat(Some(v))) => Ok(*v),
        other => Err(anyhow!("summary.{key} is {other:?}")),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ac6() -> Result<String> {
    let dir = TempDir::new()?;
    let set = SyntheticSet {
        images: 200,
        categories: C,
        dim: 8,
        grid: 4,
        noise: 0.01,
        seed: 6,
    };
    let c = pipeline_corpus(dir.path(), &set);
    let root = dir.path();
    let (cent, labels, matched) = (
        root.join("k.lctr"),
        root.join("labels"),
        root.join("matched"),
    );
    run(&[
        "cluster",
        "--emb",
        p(&c.emb),
        "--manifest",
        p(&c.manifest),
        "-C",
        "5",
        "--centroids",
        p(&cent),
    ])?;
    run(&[
        "assign",
        "--emb",
        p(&c.emb),
        "--manifest",
        p(&c.manifest),
        "--centroids",
        p(&cent),
        "--out",
        p(&labels),
        "--size-from",
        p(&c.gt),
    ])?;
    run(&[
        "match",
        "--pred",
        p(&labels),
        "--manifest",
        p(&c.manifest),
        "--out",
        p(&matched),
    ])?;
    let r = run(&[
        "evaluate",
        "--gt",
        p(&c.gt),
        "--pred",
        p(&matched),
        "--manifest",
        p(&c.manifest),
    ])?;
    let (miou, acc) = (float(&r, "miou")?, float(&r, "img_acc")?);
    ensure!(miou >= 95.0, "mIoU {miou}");
    ensure!(acc >= 99.0, "Img-Acc {acc}");
    Ok(format!("miou={miou:.3} img_acc={acc:.3}"))
}

fn ac7() -> Result<String> {
    ensure!(BETA_SQ == 0.3, "beta^2 = {BETA_SQ}");
    ensure!(DEFAULT_D_FRAC == 0.03, "d = {DEFAULT_D_FRAC}");
    match cli(&["evaluate", "--gt", "g", "--pred", "p", "--manifest", "m"]).command {
        Command::Evaluate(a) => ensure!(
            a.d_frac == 0.03,
            "evaluate --d-frac defaults to {}",
            a.d_frac
        ),
        _ => unreachable!(),
    }
    match cli(&[
        "assign",
        "--emb",
        "e",
        "--manifest",
        "m",
        "--centroids",
        "k",
        "--out",
        "o",
    ])
    .command
    {
        Command::Assign(a) => ensure!(
            a.tau == DEFAULT_TAU && a.tau == 0.5,
            "assign --tau defaults to {}",
            a.tau
        ),
        _ => unreachable!(),
    }
    let dm = cli(&[
        "distmatch",
        "--train-manifest",
        "a",
        "--train-emb",
        "b",
        "--train-gt",
        "c",
        "--emb",
        "e",
        "--manifest",
        "m",
        "--out",
        "o",
    ]);
    match dm.command {
        Command::Distmatch(a) => ensure!(
            a.k == DEFAULT_K && a.k == 10,
            "distmatch -k defaults to {}",
            a.k
        ),
        _ => unreachable!(),
    }
    ensure!(dm.seed == 0, "seed defaults to {}", dm.seed);
    Ok(format!("beta^2={BETA_SQ} d={DEFAULT_D_FRAC}"))
}

/// Rendered report in both formats plus every file under `outputs`.
type Observation = (String, String, BTreeMap<String, Vec<u8>>);

fn observe(args: &[&str], workers: usize, outputs: &[&Path]) -> Result<Observation> {
    let w = workers.to_string();
    let full: Vec<&str> = ["--workers", w.as_str(), "--seed", "17"]
        .iter()
        .copied()
        .chain(args.iter().copied())
        .collect();
    let r = run(&full)?;
    let mut files = BTreeMap::new();
    for (i, o) in outputs.iter().enumerate() {
        for (k, v) in snapshot(o) {
            files.insert(format!("{i}/{k}"), v);
        }
    }
    Ok((r.render(Format::Text), r.render(Format::Jsonl), files))
}

fn ac8() -> Result<String> {
    let dir = TempDir::new()?;
    let root = dir.path();
    let set = SyntheticSet {
        images: 40,
        categories: C,
        dim: 8,
        grid: 8,
        noise: 0.05,
        seed: 8,
    };
    let c = pipeline_corpus(&root.join("val"), &set);
    let train = pipeline_corpus(
        &root.join("train"),
        &SyntheticSet {
            images: 15,
            seed: 9,
            ..set
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for i in 0..set.images {
        let (w, h) = (2 * set.grid, 2 * set.grid);
        c.write_pred(
            &image_id(i),
            &SegMask::new(w, h, (0..w * h).map(|_| rng.gen_range(0..=C)).collect())?,
        );
    }
    let (cent, labels, matched, dm, bank) = (
        root.join("k.lctr"),
        root.join("labels"),
        root.join("matched"),
        root.join("dm"),
        root.join("bank.lbnk"),
    );
    let (emb, man, gt, pred) = (p(&c.emb), p(&c.manifest), p(&c.gt), p(&c.pred));
    let commands: Vec<(&str, Vec<&str>, Vec<&Path>)> = vec![
        (
            "evaluate",
            vec!["evaluate", "--gt", gt, "--pred", pred, "--manifest", man],
            vec![],
        ),
        (
            "match",
            vec![
                "match",
                "--pred",
                pred,
                "--manifest",
                man,
                "--out",
                p(&matched),
            ],
            vec![&matched],
        ),
        (
            "cluster",
            vec![
                "cluster",
                "--emb",
                emb,
                "--manifest",
                man,
                "-C",
                "5",
                "--centroids",
                p(&cent),
            ],
            vec![&cent],
        ),
        (
            "assign",
            vec![
                "assign",
                "--emb",
                emb,
                "--manifest",
                man,
                "--centroids",
                p(&cent),
                "--out",
                p(&labels),
                "--size-from",
                gt,
            ],
            vec![&labels],
        ),
        (
            "distmatch",
            vec![
                "distmatch",
                "--train-manifest",
                p(&train.manifest),
                "--train-emb",
                p(&train.emb),
                "--train-gt",
                p(&train.gt),
                "--emb",
                emb,
                "--manifest",
                man,
                "--out",
                p(&dm),
                "--bank",
                p(&bank),
            ],
            vec![&dm, &bank],
        ),
        ("losscheck", vec!["losscheck", "--instances", "8"], vec![]),
        (
            "stats",
            vec!["stats", "--gt", gt, "--manifest", man],
            vec![],
        ),
    ];
    for (name, args, outputs) in &commands {
        let first = observe(args, 1, outputs)?;
        for workers in [1, 4, 8] {
            let again = observe(args, workers, outputs)?;
            ensure!(
                again.0 == first.0,
                "{name}: text report differs at {workers} workers"
            );
            ensure!(
                again.1 == first.1,
                "{name}: jsonl report differs at {workers} workers"
            );
            ensure!(
                again.2 == first.2,
                "{name}: output files differ at {workers} workers"
            );
        }
    }
    Ok(format!("{} commands x workers {{1,1,4,8}}", commands.len()))
}

type Criterion = (
    &'static str,
    &'static str,
    fn() -> Result<String>,
    Option<Duration>,
);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (
            "AC1",
            "metric oracle equivalence",
            ac1,
            Some(Duration::from_secs(5)),
        ),
        (
            "AC2",
            "hungarian optimality",
            ac2,
            Some(Duration::from_secs(5)),
        ),
        ("AC3", "boundary saturation and shifted square", ac3, None),
        ("AC4", "gradient suite", ac4, Some(Duration::from_secs(30))),
        ("AC5", "k-means contract", ac5, None),
        (
            "AC6",
            "end-to-end synthetic pipeline",
            ac6,
            Some(Duration::from_secs(60)),
        ),
        ("AC7", "protocol constants", ac7, None),
        ("AC8", "determinism across runs and workers", ac8, None),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let t = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if t > b => Err(anyhow!(
                "took {:.2}s, budget {}s",
                t.as_secs_f64(),
                b.as_secs()
            )),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({:.2}s): {detail}", t.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL {id} {name} ({:.2}s): {e:#}", t.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all 8 criteria passed");
        ExitCode::SUCCESS
    }
}
