//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion straight to stderr, so the verdicts survive output capture.
//!
//! Oracles here are written independently of the library: plain loops over
//! `f64` slices, a Jacobi eigenvalue solver and central finite differences.

use std::cell::Cell;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use samda::checkpoint::{read_archive, Archive, MANIFEST_FILE, WEIGHTS_FILE};
use samda::config::PipelineConfig;
use samda::data::Plane;
use samda::error::Error;
use samda::eval::{dice_coefficient, few_shot_experiment, ExperimentData, ExperimentOptions, FewShotCurve};
use samda::losses::{
    cross_entropy_loss, dice_ce_loss, dice_loss, feature_reconstruction_loss, gram_matrix, perceptual_loss,
    scalar, style_reconstruction_loss, DICE_EPS,
};
use samda::model::{ModelConfig, SamdaModel};
use samda::nn::{Conv2d, ParamGroup, ParamRegistry};
use samda::report::{emit_report, read_results_csv, ResultRow, Variant};
use samda::synth::{generate_domain_dataset, PairSizes, StyleShift, SyntheticPair};
use samda::trainer::{run_pipeline, CHECKPOINT_DIR, TAG_FINAL, TAG_PRETRAIN, TAG_UDA, TRACE_DIR};

fn verdict(criterion: &str, ok: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {criterion}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    // bypass the harness capture so the line shows up in every run
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn tensor(data: &[f64], shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_slice(data, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn mask_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

// ---------------------------------------------------------------------------
// brute-force oracles over row-major B×C×H×W slices

fn oracle_foreground(logits: &[f64], b: usize, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
    let l0 = logits[((b * 2) * h + y) * w + x];
    let l1 = logits[((b * 2 + 1) * h + y) * w + x];
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    (l0 - lse, l1 - lse)
}

fn oracle_dice(logits: &[f64], mask: &[f64], b: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for bi in 0..b {
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = oracle_foreground(logits, bi, y, x, h, w).1.exp();
                let g = mask[(bi * h + y) * w + x];
                inter += p * g;
                sp += p;
                sg += g;
            }
        }
        total += 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
    }
    total / b as f64
}

fn oracle_ce(logits: &[f64], mask: &[f64], b: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (lp0, lp1) = oracle_foreground(logits, bi, y, x, h, w);
                let g = mask[(bi * h + y) * w + x];
                total -= g * lp1 + (1.0 - g) * lp0;
            }
        }
    }
    total / (b * h * w) as f64
}

fn oracle_feat(hs: &[f64], ht: &[f64]) -> f64 {
    hs.iter().zip(ht).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / hs.len() as f64
}

/// Gram matrix of sample `b` by explicit loops over h, w, i, j.
fn oracle_gram(s: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    let at = |ch: usize, y: usize, x: usize| s[((b * c + ch) * h + y) * w + x];
    let mut g = vec![vec![0.0; c]; c];
    for y in 0..h {
        for x in 0..w {
            for (i, row) in g.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += at(i, y, x) * at(j, y, x);
                }
            }
        }
    }
    let n = (c * h * w) as f64;
    g.iter_mut().flatten().for_each(|v| *v /= n);
    g
}

fn oracle_style(hs: &[f64], ht: &[f64], b: usize, c: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for bi in 0..b {
        let gs = oracle_gram(hs, bi, c, h, w);
        let gt = oracle_gram(ht, bi, c, h, w);
        for i in 0..c {
            for j in 0..c {
                total += (gs[i][j] - gt[i][j]).powi(2);
            }
        }
    }
    total / b as f64
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn oracle_dice_metric(pred: &Plane, gt: &Plane) -> f64 {
    let (h, w) = pred.dims();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            match (pred.get(y, x) > 0.5, gt.get(y, x) > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn oracle_self_checks() {
    let e = symmetric_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
    let (lo, hi) = (e[0].min(e[1]), e[0].max(e[1]));
    assert!((lo - 1.0).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
    let e = symmetric_eigenvalues(vec![
        vec![4.0, 1.0, 2.0],
        vec![1.0, 3.0, 0.5],
        vec![2.0, 0.5, 5.0],
    ]);
    assert!((e.iter().sum::<f64>() - 12.0).abs() < 1e-10);
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
}

// ---------------------------------------------------------------------------
// 1. loss oracles

fn loss_oracle_errors(dtype: DType) -> Vec<(&'static str, f64)> {
    // p ≡ 0.5 on a 2×2 image with two foreground pixels
    let zeros = [0.0; 8];
    let half_mask = [1.0, 1.0, 0.0, 0.0];
    let logits = tensor(&zeros, &[1, 2, 2, 2], dtype);
    let mask = tensor(&half_mask, &[1, 1, 2, 2], dtype);
    let dice = scalar(&dice_loss(&logits, &mask).unwrap()).unwrap();
    let dice_closed = 1.0 - (2.0 * 1.0 + DICE_EPS) / (2.0 + 2.0 + DICE_EPS);
    let ce = scalar(&cross_entropy_loss(&logits, &mask).unwrap()).unwrap();
    let both = dice_ce_loss(&logits, &mask).unwrap();

    let hs = [1.0, 2.0];
    let ht = [1.0, 0.0];
    let feat = scalar(
        &feature_reconstruction_loss(&tensor(&hs, &[1, 1, 1, 2], dtype), &tensor(&ht, &[1, 1, 1, 2], dtype))
            .unwrap(),
    )
    .unwrap();

    let map = [1.0, 2.0, 3.0, 4.0];
    let g = gram_matrix(&tensor(&map, &[1, 2, 1, 2], dtype)).unwrap().sample(0).unwrap();
    let g_oracle = oracle_gram(&map, 0, 2, 1, 2);
    let g_hand = [[1.25, 2.75], [2.75, 6.25]];
    let mut gram_err = 0f64;
    for i in 0..2 {
        for j in 0..2 {
            gram_err = gram_err.max((g[i][j] - g_hand[i][j]).abs()).max((g[i][j] - g_oracle[i][j]).abs());
        }
    }
    let style = scalar(
        &style_reconstruction_loss(&tensor(&map, &[1, 2, 1, 2], dtype), &tensor(&[0.0; 4], &[1, 2, 1, 2], dtype))
            .unwrap(),
    )
    .unwrap();

    let mut errs = vec![
        ("dice vs closed form", (dice - dice_closed).abs()),
        ("dice vs loop oracle", (dice - oracle_dice(&zeros, &half_mask, 1, 2, 2)).abs()),
        ("ce vs ln 2", (ce - std::f64::consts::LN_2).abs()),
        ("ce vs loop oracle", (ce - oracle_ce(&zeros, &half_mask, 1, 2, 2)).abs()),
        (
            "dice+ce vs sum of closed forms",
            (scalar(&both.total).unwrap() - (dice_closed + std::f64::consts::LN_2)).abs(),
        ),
        ("feat vs 2.0", (feat - 2.0).abs()),
        ("feat vs loop oracle", (feat - oracle_feat(&hs, &ht)).abs()),
        ("gram vs hand and loop oracle", gram_err),
        ("style vs 55.75", (style - 55.75).abs()),
        ("style vs loop oracle", (style - oracle_style(&map, &[0.0; 4], 1, 2, 1, 2)).abs()),
    ];
    // random inputs, compared relative to the oracle's magnitude
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, c, h, w) = (3, 4, 5, 6);
    let lg = random_vec(&mut rng, b * 2 * h * w, -4.0, 4.0);
    let mk = mask_vec(&mut rng, b * h * w);
    let (lt, mt) = (tensor(&lg, &[b, 2, h, w], dtype), tensor(&mk, &[b, 1, h, w], dtype));
    let fs = random_vec(&mut rng, b * c * h * w, -2.0, 2.0);
    let ft = random_vec(&mut rng, b * c * h * w, -2.0, 2.0);
    let (st, tt) = (tensor(&fs, &[b, c, h, w], dtype), tensor(&ft, &[b, c, h, w], dtype));
    errs.extend([
        (
            "random dice vs loop oracle",
            rel(scalar(&dice_loss(&lt, &mt).unwrap()).unwrap(), oracle_dice(&lg, &mk, b, h, w)),
        ),
        (
            "random ce vs loop oracle",
            rel(scalar(&cross_entropy_loss(&lt, &mt).unwrap()).unwrap(), oracle_ce(&lg, &mk, b, h, w)),
        ),
        (
            "random feat vs loop oracle",
            rel(scalar(&feature_reconstruction_loss(&st, &tt).unwrap()).unwrap(), oracle_feat(&fs, &ft)),
        ),
        (
            "random style vs loop oracle",
            rel(
                scalar(&style_reconstruction_loss(&st, &tt).unwrap()).unwrap(),
                oracle_style(&fs, &ft, b, c, h, w),
            ),
        ),
    ]);
    errs
}

#[test]
fn criterion_01_loss_oracles() {
    let mut failures = Vec::new();
    let mut worst = [0f64; 2];
    for (k, (dtype, tol)) in [(DType::F64, 1e-9), (DType::F32, 1e-5)].into_iter().enumerate() {
        for (name, err) in loss_oracle_errors(dtype) {
            worst[k] = worst[k].max(err);
            if !(err <= tol) {
                failures.push(format!("{name} at {dtype:?}: {err:e}"));
            }
        }
    }
    // the Dice ε shifts the hand value 0.5 by less than 1e-5
    let dice = scalar(
        &dice_loss(
            &tensor(&[0.0; 8], &[1, 2, 2, 2], DType::F64),
            &tensor(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2], DType::F64),
        )
        .unwrap(),
    )
    .unwrap();
    if (dice - 0.5).abs() >= 1e-5 {
        failures.push(format!("dice {dice} not within 1e-5 of 0.5"));
    }
    verdict(
        "1 loss oracles",
        failures.is_empty(),
        &format!(
            "max err f64 {:.2e} (tol 1e-9), f32 {:.2e} (tol 1e-5); dice {dice:.9}{}",
            worst[0],
            worst[1],
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. gradient checks

const FD_STEP: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error between the autodiff gradient of `f` at `x0` and central
/// finite differences.
fn grad_check(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&tensor(x0, shape, DType::F64)).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .expect("input receives a gradient")
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let numeric: Vec<f64> = (0..x0.len())
        .map(|i| {
            let mut xp = x0.to_vec();
            let mut xm = x0.to_vec();
            xp[i] += FD_STEP;
            xm[i] -= FD_STEP;
            let fp = scalar(&f(&tensor(&xp, shape, DType::F64))).unwrap();
            let fm = scalar(&f(&tensor(&xm, shape, DType::F64))).unwrap();
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

/// Gradient check through a one-layer convolutional feature extractor built
/// from the library's parameter registry, perturbing its weights in place.
fn toy_network_check(w_feat: f64, w_style: f64) -> f64 {
    let mut reg = ParamRegistry::new(11, DType::F64);
    let conv = Conv2d::new(&mut reg, "toy", 1, 3, 3, 1, 1).unwrap();
    let (params, _) = reg.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tensor(&random_vec(&mut rng, 16, 0.0, 1.0), &[1, 1, 4, 4], DType::F64);
    let ht = tensor(&random_vec(&mut rng, 48, -1.0, 1.0), &[1, 3, 4, 4], DType::F64);
    let loss = || {
        let hs = conv.forward(&x).unwrap();
        perceptual_loss(&hs, &ht, w_feat, w_style).unwrap().total
    };
    let grads = loss().backward().unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for p in &params {
        let base: Vec<f64> = p.var().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        analytic.extend(
            grads.get(p.var().as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        );
        for i in 0..base.len() {
            let eval_at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                p.var().set(&tensor(&v, p.dims(), DType::F64)).unwrap();
                scalar(&loss()).unwrap()
            };
            let d = (eval_at(FD_STEP) - eval_at(-FD_STEP)) / (2.0 * FD_STEP);
            numeric.push(d);
        }
        p.var().set(&tensor(&base, p.dims(), DType::F64)).unwrap();
    }
    rel_err(&analytic, &numeric)
}

#[test]
fn criterion_02_gradient_checks() {
    let cfg = PipelineConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut results: Vec<(String, f64)> = Vec::new();

    for &(b, h, w) in &[(1usize, 4usize, 4usize), (3, 2, 2)] {
        let logits = random_vec(&mut rng, b * 2 * h * w, -2.0, 2.0);
        let mask = tensor(&mask_vec(&mut rng, b * h * w), &[b, 1, h, w], DType::F64);
        results.push((
            format!("dice_ce {b}x2x{h}x{w}"),
            grad_check(&logits, &[b, 2, h, w], |l| dice_ce_loss(l, &mask).unwrap().total),
        ));
    }

    let shape = [1usize, 3, 4, 4];
    let hs = random_vec(&mut rng, 48, -1.0, 1.0);
    let ht_vals = random_vec(&mut rng, 48, -1.0, 1.0);
    let ht = tensor(&ht_vals, &shape, DType::F64);
    let hs_t = tensor(&hs, &shape, DType::F64);
    results.push((
        "feat wrt hs".into(),
        grad_check(&hs, &shape, |x| feature_reconstruction_loss(x, &ht).unwrap()),
    ));
    results.push((
        "feat wrt ht".into(),
        grad_check(&ht_vals, &shape, |x| feature_reconstruction_loss(&hs_t, x).unwrap()),
    ));
    results.push((
        "style wrt hs".into(),
        grad_check(&hs, &shape, |x| style_reconstruction_loss(x, &ht).unwrap()),
    ));
    results.push((
        "style wrt ht".into(),
        grad_check(&ht_vals, &shape, |x| style_reconstruction_loss(&hs_t, x).unwrap()),
    ));
    results.push((
        "perceptual wrt hs".into(),
        grad_check(&hs, &shape, |x| perceptual_loss(x, &ht, cfg.w_feat, cfg.w_style).unwrap().total),
    ));
    results.push(("perceptual through conv".into(), toy_network_check(cfg.w_feat, cfg.w_style)));

    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let bad: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e < 1e-4))
        .map(|(n, e)| format!("{n}: {e:.2e}"))
        .collect();
    verdict(
        "2 gradient checks",
        bad.is_empty(),
        &format!(
            "{} checks, worst relative error {worst:.2e} (tol 1e-4){}",
            results.len(),
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Gram properties

fn permute_spatial(s: &[f64], c: usize, hw: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for ch in 0..c {
        for (dst, &src) in perm.iter().enumerate() {
            out[ch * hw + dst] = s[ch * hw + src];
        }
    }
    out
}

#[test]
fn criterion_03_gram_properties() {
    let min_eig = Cell::new(f64::INFINITY);
    let cases = Cell::new(0usize);
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (1usize..=6, 1usize..=6, 1usize..=6, any::<u64>(), 0.1f64..10.0);
    let outcome = runner.run(&strategy, |(c, h, w, seed, alpha)| {
        cases.set(cases.get() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, c, h, w];
        let s = random_vec(&mut rng, c * h * w, -2.0, 2.0);
        let t = random_vec(&mut rng, c * h * w, -2.0, 2.0);
        let st = tensor(&s, &shape, DType::F64);
        let g = gram_matrix(&st).unwrap().sample(0).unwrap();

        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(g[i][j].to_bits(), g[j][i].to_bits(), "asymmetric at ({}, {})", i, j);
            }
        }

        let e = symmetric_eigenvalues(g.clone()).into_iter().fold(f64::INFINITY, f64::min);
        min_eig.set(min_eig.get().min(e));
        prop_assert!(e >= -1e-10, "min eigenvalue {}", e);

        let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
        let gs = gram_matrix(&tensor(&scaled, &shape, DType::F64)).unwrap().sample(0).unwrap();
        for i in 0..c {
            for j in 0..c {
                let want = alpha * alpha * g[i][j];
                prop_assert!((gs[i][j] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let tt = tensor(&t, &shape, DType::F64);
        let base = scalar(&style_reconstruction_loss(&st, &tt).unwrap()).unwrap();
        let ps = tensor(&permute_spatial(&s, c, h * w, &perm), &shape, DType::F64);
        let pt = tensor(&permute_spatial(&t, c, h * w, &perm.iter().rev().copied().collect::<Vec<_>>()), &shape, DType::F64);
        for (a, b) in [(&ps, &tt), (&st, &pt), (&ps, &pt)] {
            let l = scalar(&style_reconstruction_loss(a, b).unwrap()).unwrap();
            prop_assert!((l - base).abs() <= 1e-12 * base.abs().max(1.0), "{} vs {}", l, base);
        }
        Ok(())
    });

    // feature loss is not permutation invariant: hs=[1,2] vs ht=[1,2] and its swap
    let a = tensor(&[1.0, 2.0], &[1, 1, 1, 2], DType::F64);
    let swapped = tensor(&[2.0, 1.0], &[1, 1, 1, 2], DType::F64);
    let feat_same = scalar(&feature_reconstruction_loss(&a, &a).unwrap()).unwrap();
    let feat_swapped = scalar(&feature_reconstruction_loss(&swapped, &a).unwrap()).unwrap();
    let style_swapped = scalar(&style_reconstruction_loss(&swapped, &a).unwrap()).unwrap();
    let witness = feat_same == 0.0 && feat_swapped > 0.0 && style_swapped == 0.0;

    verdict(
        "3 Gram properties",
        outcome.is_ok() && witness,
        &format!(
            "{} random maps, min eigenvalue {:.3e}, feature-loss witness {}{}",
            cases.get(),
            min_eig.get(),
            if witness { "ok" } else { "broken" },
            match &outcome {
                Ok(()) => String::new(),
                Err(e) => format!("; {e}"),
            }
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. freeze semantics

fn micro_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.unet.n_stages = 3;
    cfg.unet.base_channels = 4;
    cfg.unet.fusion_channels = 8;
    cfg.adapter.embed_dim = 8;
    cfg.adapter.depth = 1;
    cfg.adapter.projector_channels = [8, 8, 8];
    cfg.patch_size = 32;
    cfg.batch_size = 4;
    cfg.epochs = [2, 2, 2];
    cfg.raw_pairs = 6;
    cfg.shots = 3;
    cfg
}

fn group_bits(archive: &Archive, groups: &[ParamGroup]) -> Vec<(String, Vec<u32>)> {
    archive
        .tensors
        .iter()
        .filter(|t| t.group.is_some_and(|g| groups.contains(&g)))
        .map(|t| (t.name.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn criterion_04_freeze_semantics() {
    let cfg = micro_config();
    let source = generate_domain_dataset("src", 8, 6, 32, &StyleShift::IDENTITY, 1).unwrap();
    let target = generate_domain_dataset("tgt", 6, 6, 32, &StyleShift::CANONICAL_TARGET, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, &source, &target, dir.path()).unwrap();
    let ck = |tag: &str| read_archive(&dir.path().join(CHECKPOINT_DIR).join(tag)).unwrap();
    let (pre, uda, fin) = (ck(TAG_PRETRAIN), ck(TAG_UDA), ck(TAG_FINAL));

    let unet = [ParamGroup::UnetEncoder, ParamGroup::UnetDecoder];
    let unet_kept = group_bits(&pre, &unet) == group_bits(&uda, &unet);
    let vit = [ParamGroup::Vit];
    let vit_kept = group_bits(&pre, &vit) == group_bits(&uda, &vit) && group_bits(&uda, &vit) == group_bits(&fin, &vit);
    let vit_nonempty = !group_bits(&pre, &vit).is_empty();
    // the diff must be able to see change where training is allowed
    let projector_moved = group_bits(&pre, &[ParamGroup::Projector]) != group_bits(&uda, &[ParamGroup::Projector]);
    let unet_moved = group_bits(&uda, &unet) != group_bits(&fin, &unet);

    verdict(
        "4 freeze semantics",
        unet_kept && vit_kept && vit_nonempty && projector_moved && unet_moved,
        &format!(
            "UNet identical across stage 2: {unet_kept}; ViT identical across stages 2-3: {vit_kept}; \
             projector moved in stage 2: {projector_moved}; UNet moved in stage 3: {unet_moved}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. checkpoint round trip

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn criterion_05_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let model = SamdaModel::new(ModelConfig::from_pipeline(&PipelineConfig::desk()), 7).unwrap();
    model.set_trainable(ParamGroup::Projector, false);
    model.set_trainable(ParamGroup::UnetDecoder, false);
    model.save(&good).unwrap();
    let back = SamdaModel::load(&good).unwrap();

    let a = model.to_archive().unwrap();
    let b = back.to_archive().unwrap();
    let bits = |ar: &Archive| group_bits(ar, &ParamGroup::ALL);
    let tensors_exact = a.tensors.len() == b.tensors.len() && bits(&a) == bits(&b);
    let flags_exact = ParamGroup::ALL.iter().all(|&g| model.is_trainable(g) == back.is_trainable(g));
    let x = tensor(&vec![0.3; 64 * 64], &[1, 1, 64, 64], DType::F32);
    let out_a: Vec<f32> = model.seg_forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let out_b: Vec<f32> = back.seg_forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let forward_exact = out_a.iter().zip(&out_b).all(|(p, q)| p.to_bits() == q.to_bits());

    let mut checks: Vec<(&str, bool)> = Vec::new();
    let mut corrupt = |name: &'static str, damage: &dyn Fn(&Path), expect: &dyn Fn(&Error) -> bool| {
        let dir = tmp.path().join(name);
        copy_dir(&good, &dir);
        damage(&dir);
        let ok = match SamdaModel::load(&dir) {
            Err(e) => expect(&e),
            Ok(_) => false,
        };
        checks.push((name, ok));
    };
    corrupt(
        "truncated",
        &|d| {
            let p = d.join(WEIGHTS_FILE);
            let bytes = fs::read(&p).unwrap();
            fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        },
        &|e| matches!(e, Error::Truncated { .. }),
    );
    corrupt(
        "oversized",
        &|d| {
            let p = d.join(WEIGHTS_FILE);
            let mut bytes = fs::read(&p).unwrap();
            bytes.extend_from_slice(&[0; 4]);
            fs::write(&p, bytes).unwrap();
        },
        &|e| matches!(e, Error::SizeMismatch { .. }),
    );
    corrupt(
        "garbled_manifest",
        &|d| fs::write(d.join(MANIFEST_FILE), b"{ not json").unwrap(),
        &|e| matches!(e, Error::CorruptManifest { .. }),
    );
    corrupt(
        "future_version",
        &|d| edit_manifest(d, |v| v["version"] = Value::from(99)),
        &|e| matches!(e, Error::CorruptManifest { .. }),
    );
    corrupt(
        "wrong_nbytes",
        &|d| {
            edit_manifest(d, |v| {
                let n = v["tensors"][0]["nbytes"].as_u64().unwrap();
                v["tensors"][0]["nbytes"] = Value::from(n + 4);
            })
        },
        &|e| matches!(e, Error::SizeMismatch { .. }),
    );
    corrupt(
        "offset_out_of_range",
        &|d| {
            edit_manifest(d, |v| {
                let total = v["total_bytes"].as_u64().unwrap();
                v["tensors"][0]["offset"] = Value::from(total);
            })
        },
        &|e| matches!(e, Error::Range { .. }),
    );
    corrupt(
        "missing_weights",
        &|d| fs::remove_file(d.join(WEIGHTS_FILE)).unwrap(),
        &|e| matches!(e, Error::Io { .. }),
    );
    corrupt(
        "renamed_tensor",
        &|d| edit_manifest(d, |v| v["tensors"][0]["name"] = Value::from("no.such.tensor")),
        &|e| matches!(e, Error::TensorMismatch(_)),
    );

    // loading into a model of another architecture is refused before any write
    let mut micro = ModelConfig::from_pipeline(&micro_config());
    micro.input_side = 32;
    let other = SamdaModel::new(micro, 0).unwrap();
    let before = other.digest().unwrap();
    let refused = other.load_state(&a).is_err() && other.digest().unwrap() == before;
    checks.push(("architecture_mismatch", refused));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        "5 checkpoint round trip",
        tensors_exact && flags_exact && forward_exact && failed.is_empty(),
        &format!(
            "{} tensors bit-exact: {tensors_exact}; flags: {flags_exact}; forward: {forward_exact}; \
             {}/{} corruption paths rejected{}",
            a.tensors.len(),
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(" (accepted: {})", failed.join(", ")) }
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Dice metric oracle

fn random_plane(rng: &mut ChaCha8Rng, density: f64) -> Plane {
    let data = (0..16 * 16).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
    Plane::new(16, 16, data).unwrap()
}

#[test]
fn criterion_06_dice_metric_oracle() {
    let empty_pairs = Cell::new(0usize);
    let mut runner = TestRunner::new(PropConfig {
        cases: 200,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let density = prop_oneof![Just(0.0), 0.0f64..=1.0];
    let strategy = (density.clone(), density, any::<u64>());
    let outcome = runner.run(&strategy, |(dp, dg, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_plane(&mut rng, dp);
        let gt = random_plane(&mut rng, dg);
        if pred.count_nonzero() + gt.count_nonzero() == 0 {
            empty_pairs.set(empty_pairs.get() + 1);
        }
        let got = dice_coefficient(&pred, &gt).unwrap();
        let want = oracle_dice_metric(&pred, &gt);
        prop_assert_eq!(got.to_bits(), want.to_bits(), "{} vs {}", got, want);
        Ok(())
    });
    let empty = Plane::filled(16, 16, 0.0);
    let full = Plane::filled(16, 16, 1.0);
    let edge_cases = dice_coefficient(&empty, &empty).unwrap() == 1.0
        && dice_coefficient(&empty, &full).unwrap() == 0.0
        && dice_coefficient(&full, &full).unwrap() == 1.0;
    verdict(
        "6 Dice metric oracle",
        outcome.is_ok() && edge_cases,
        &format!(
            "200 random 16x16 pairs exact ({} empty-empty), fixed edge cases {}{}",
            empty_pairs.get(),
            if edge_cases { "ok" } else { "wrong" },
            match &outcome {
                Ok(()) => String::new(),
                Err(e) => format!("; {e}"),
            }
        ),
    );
}

// ---------------------------------------------------------------------------
// 7 and 8 share one three-seed sweep on the canonical synthetic pair

struct Sweep {
    curve: FewShotCurve,
    elapsed: Duration,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let pair = SyntheticPair::generate(&PairSizes::default(), 0).unwrap();
        let cfg = PipelineConfig::desk();
        let start = Instant::now();
        let curve = few_shot_experiment(
            &cfg,
            ExperimentData {
                source: &pair.source,
                source_test: &pair.source_test,
                target: &pair.target,
                target_test: &pair.target_test,
            },
            &ExperimentOptions {
                unet_adaptor: true,
                ..ExperimentOptions::default()
            },
        )
        .unwrap();
        Sweep {
            curve,
            elapsed: start.elapsed(),
        }
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn shot_mean(curve: &FewShotCurve, k: usize) -> f64 {
    let i = curve.shots.iter().position(|&s| s == k).expect("shot count in sweep");
    curve.mean_dice[i]
}

#[test]
fn criterion_07_end_to_end_adaptation() {
    let s = sweep();
    let runs = &s.curve.runs;
    let in_domain = mean(runs.iter().map(|r| r.in_domain_dice));
    let no_da = mean(runs.iter().map(|r| r.no_da_dice));
    let reduction = mean(runs.iter().map(|r| 1.0 - r.perceptual_after / r.perceptual_before));
    let k10 = shot_mean(&s.curve, 10);
    let (a, b, c, d) = (
        in_domain >= 0.85,
        in_domain - no_da >= 0.10,
        reduction >= 0.30,
        k10 - no_da >= 0.03,
    );
    verdict(
        "7 end-to-end adaptation",
        a && b && c && d,
        &format!(
            "(a) in-domain {in_domain:.3} >= 0.85: {a}; (b) gap {:.3} >= 0.10: {b}; \
             (c) perceptual reduction {:.1}% >= 30%: {c}; (d) 10-shot {k10:.3} vs noDA {no_da:.3}, \
             +{:.3} >= 0.03: {d}; {} seeds, sweep wall time {:.1} min",
            in_domain - no_da,
            reduction * 100.0,
            k10 - no_da,
            runs.len(),
            s.elapsed.as_secs_f64() / 60.0
        ),
    );
}

#[test]
fn ten_shot_finetune_beats_zero_shot() {
    let s = sweep();
    let zero = mean(s.curve.runs.iter().map(|r| r.zero_shot_dice));
    let k10 = shot_mean(&s.curve, 10);
    verdict(
        "7 (stage 3 margin)",
        k10 - zero >= 0.02,
        &format!("10-shot {k10:.3} vs 0-shot {zero:.3}, margin {:.3} >= 0.02", k10 - zero),
    );
}

#[test]
fn criterion_08_few_shot_trend() {
    let s = sweep();
    let shots: Vec<f64> = s.curve.shots.iter().map(|&k| k as f64).collect();
    let rho = spearman(&shots, &s.curve.mean_dice);
    let (one, twenty) = (shot_mean(&s.curve, 1), shot_mean(&s.curve, 20));
    let curve: Vec<String> = s
        .curve
        .shots
        .iter()
        .zip(&s.curve.mean_dice)
        .map(|(k, d)| format!("{k}:{d:.3}"))
        .collect();
    verdict(
        "8 few-shot trend",
        rho >= 0.6 && twenty >= one,
        &format!(
            "Spearman {rho:.3} >= 0.6; 20-shot {twenty:.3} >= 1-shot {one:.3}; curve [{}]",
            curve.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. determinism through the command line

fn samda(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_samda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SAMDA_SEED")
        .status()
        .unwrap()
        .success()
}

fn tree_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_09_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.to_string_lossy().into_owned();
    assert!(samda(&["synth", "--out-dir", &data_s, "--seed", "3", "--canvas", "32"]));
    let config = data.join("config.json").to_string_lossy().into_owned();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let ok = samda(&[
            "run",
            "--config",
            &config,
            "--set",
            "unet.n_stages=3",
            "--set",
            "unet.base_channels=4",
            "--set",
            "unet.fusion_channels=8",
            "--set",
            "adapter.embed_dim=8",
            "--set",
            "adapter.depth=1",
            "--set",
            "adapter.projector_channels=[8,8,8]",
            "--set",
            "patch_size=32",
            "--set",
            "batch_size=8",
            "--set",
            "epochs=[1,2,3]",
            "--set",
            "raw_pairs=8",
            "--set",
            "shots=4",
            "--out-dir",
            &out.to_string_lossy(),
        ]);
        assert!(ok, "run {name} failed");
        (tree_files(&out.join(TRACE_DIR)), tree_files(&out.join(CHECKPOINT_DIR)))
    };
    let (traces_a, ck_a) = run("a");
    let (traces_b, ck_b) = run("b");
    let traces_nonempty = traces_a.len() == 3 && traces_a.iter().all(|(_, b)| b.iter().filter(|&&c| c == b'\n').count() > 1);
    let traces_equal = traces_a == traces_b;
    let ck_equal = ck_a == ck_b;
    let has_final = ck_a.iter().any(|(n, _)| n.starts_with(TAG_FINAL));
    verdict(
        "9 determinism",
        traces_nonempty && traces_equal && ck_equal && has_final,
        &format!(
            "{} trace files byte-identical: {traces_equal}; {} checkpoint files byte-identical: {ck_equal}; \
             final checkpoint present: {has_final}",
            traces_a.len(),
            ck_a.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. report fidelity

#[test]
fn criterion_10_report_fidelity() {
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let jitter = seed as f64 * 0.01;
        let row = |variant, shots, dice: f64| ResultRow {
            source: "synthetic-source".into(),
            target: "synthetic-target".into(),
            variant,
            seed,
            shots,
            mean_dice: dice + jitter,
        };
        rows.push(row(Variant::NoDa, 0, 0.41));
        rows.push(row(Variant::UnetAdaptor, 10, 0.55));
        rows.push(row(Variant::ZeroShot, 0, 0.52));
        for (i, k) in [1usize, 2, 4, 8, 10, 20].into_iter().enumerate() {
            rows.push(row(Variant::KShot, k, 0.6 + 0.03 * i as f64 + 1.0 / 300.0));
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let files = emit_report(&rows, &tmp.path().join("report")).unwrap();

    let round_trip = read_results_csv(&files.results).unwrap() == rows;
    let text = fs::read_to_string(&files.results).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let schema = header == ["source", "target", "variant", "seed", "shots", "mean_dice"];
    let mut variants: Vec<String> = csv::Reader::from_path(&files.results)
        .unwrap()
        .records()
        .map(|r| r.unwrap()[2].to_string())
        .collect();
    variants.sort();
    variants.dedup();
    let four = variants == ["0shot", "kshot", "noDA", "withDA-unet-adaptor"];

    let summary: Value = serde_json::from_slice(&fs::read(&files.summary).unwrap()).unwrap();
    let summary_ok = summary["rows"] == Value::from(rows.len())
        && summary["variants"].as_array().is_some_and(|v| v.len() == 9);
    let png = image::open(&files.plot_png).unwrap();
    let png_ok = png.width() > 100 && png.height() > 100;
    let svg = fs::read_to_string(&files.plot_svg).unwrap();
    let svg_ok = svg.contains("<svg") && ["noDA", "withDA-unet-adaptor", "0shot", "kshot"].iter().all(|v| svg.contains(v));

    // the command-line path reproduces the same table from the CSV
    let again = tmp.path().join("again");
    let cli_ok = samda(&[
        "report",
        "--inputs",
        &files.results.to_string_lossy(),
        "--out-dir",
        &again.to_string_lossy(),
    ]) && fs::read(again.join("reports").join("results.csv")).unwrap() == fs::read(&files.results).unwrap();

    verdict(
        "10 report fidelity",
        round_trip && schema && four && summary_ok && png_ok && svg_ok && cli_ok,
        &format!(
            "csv round trip {round_trip}; header {schema}; variants {variants:?}; summary {summary_ok}; \
             png {}x{} {png_ok}; svg {svg_ok}; cli {cli_ok}",
            png.width(),
            png.height()
        ),
    );
}
