//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; run with
//! `cargo test -p deformreg --test acceptance -- --nocapture` to see them.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use deformreg::augment::{elastic_deform, sample_deform_params, DeformParams, Level, LevelTable};
use deformreg::evalstats::{binarize, dice, evaluate_pairs, mann_whitney_u, median, Binarize, BinaryMask, EvalConfig, EvalReport};
use deformreg::field::{warp_backward, warp_bilinear, DisplacementField};
use deformreg::losses::{hmi_hard, hmi_soft, mse, smoothness, total_loss_supervised, total_loss_unsupervised, LossConfig};
use deformreg::network::layers::{
    avg_pool2, avg_pool2_backward, concat, concat_backward, conv_backward, conv_forward, leaky_relu, leaky_relu_backward, upsample2,
    upsample2_backward, Conv, Tensor,
};
use deformreg::pipeline::{register_direct, register_with_model, split_dataset, train, DirectConfig, Mode, PairRecord, TrainConfig, TrainLog};
use deformreg::rng::{prng, uniform_in, uniform_pm1};
use deformreg::synthdata::{endpoint_error, generate_benchmark_set, translated_pair, BenchmarkConfig};
use deformreg::GrayImage;

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;
const GRAD_SEEDS: u64 = 10;

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    println!("criterion {id} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} {name} failed: {detail}");
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- gradients

/// Central difference, or `None` where the one-sided slopes disagree (a kink
/// of a piecewise-smooth function lies inside the stencil).
fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> Option<f64> {
    let (fp, f0, fm) = (f(x + FD_STEP), f(x), f(x - FD_STEP));
    let (right, left) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
    if (right - left).abs() > 1e-4 * (1.0 + right.abs().max(left.abs())) {
        return None;
    }
    Some((fp - fm) / (2.0 * FD_STEP))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Worst relative error of `analytic` against finite differences of `f`
/// over `coords`, and how many coordinates were judged.
fn fd_check(x0: &[f64], analytic: &[f64], coords: &[usize], f: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut judged = 0;
    for &i in coords {
        let eval = |v: f64| {
            let mut x = x0.to_vec();
            x[i] = v;
            f(&x)
        };
        if let Some(num) = central_diff(eval, x0[i]) {
            worst = worst.max(rel_err(analytic[i], num));
            judged += 1;
        }
    }
    (worst, judged)
}

fn coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = prng(seed);
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = prng(seed);
    GrayImage::new(w, h, (0..w * h).map(|_| uniform_in(&mut rng, 0.02, 0.98)).collect()).unwrap()
}

fn random_field(w: usize, h: usize, amp: f64, seed: u64) -> DisplacementField {
    let mut rng = prng(seed);
    let dx = (0..w * h).map(|_| amp * uniform_pm1(&mut rng)).collect();
    let dy = (0..w * h).map(|_| amp * uniform_pm1(&mut rng)).collect();
    DisplacementField::new(w, h, dx, dy).unwrap()
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = prng(seed);
    (0..n).map(|_| uniform_pm1(&mut rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn field_from(w: usize, h: usize, v: &[f64]) -> DisplacementField {
    let n = w * h;
    DisplacementField::new(w, h, v[..n].to_vec(), v[n..].to_vec()).unwrap()
}

fn flat(f: &DisplacementField) -> Vec<f64> {
    f.dx.iter().chain(&f.dy).copied().collect()
}

struct GradCheck {
    name: &'static str,
    tol: f64,
    worst: f64,
    judged: usize,
}

fn check_warp(seed: u64) -> (f64, usize) {
    let (w, h) = (9, 7);
    let img = random_image(w, h, seed);
    let phi = random_field(w, h, 2.5, seed + 100);
    let up = random_vec(w * h, seed + 200);
    let g = flat(&warp_backward(&img, &phi, &up).unwrap());
    let x0 = flat(&phi);
    fd_check(&x0, &g, &coords(x0.len(), 30, seed), |v| {
        dot(warp_bilinear(&img, &field_from(w, h, v)).unwrap().data(), &up)
    })
}

fn check_hmi_soft(seed: u64) -> (f64, usize) {
    let (w, h) = (8, 8);
    let a = random_image(w, h, seed);
    let b = random_image(w, h, seed + 1);
    let cfg = LossConfig { bins: 8, ..LossConfig::default() };
    let g = hmi_soft(&a, &b, &cfg).unwrap().grad_image.unwrap();
    fd_check(b.data(), &g, &coords(w * h, 30, seed), |v| {
        hmi_soft(&a, &GrayImage::new(w, h, v.to_vec()).unwrap(), &cfg).unwrap().value
    })
}

fn check_mse(seed: u64) -> (f64, usize) {
    let (w, h) = (8, 8);
    let gamma = random_image(w, h, seed);
    let pred = random_image(w, h, seed + 1);
    let g = mse(&gamma, &pred).unwrap().grad_image.unwrap();
    fd_check(pred.data(), &g, &coords(w * h, 30, seed), |v| {
        mse(&gamma, &GrayImage::new(w, h, v.to_vec()).unwrap()).unwrap().value
    })
}

fn check_smoothness(seed: u64) -> (f64, usize) {
    let (w, h) = (7, 6);
    let phi = random_field(w, h, 3.0, seed);
    let g = flat(smoothness(&phi).grad_field.as_ref().unwrap());
    let x0 = flat(&phi);
    fd_check(&x0, &g, &coords(x0.len(), 30, seed), |v| smoothness(&field_from(w, h, v)).value)
}

fn check_composite(seed: u64, supervised: bool) -> (f64, usize) {
    let (w, h) = (10, 8);
    let fixed = random_image(w, h, seed);
    let moving = random_image(w, h, seed + 1);
    let phi = random_field(w, h, 2.0, seed + 2);
    let cfg = LossConfig { bins: 8, lambda: 0.7, ..LossConfig::default() };
    let loss = |p: &DisplacementField| {
        if supervised {
            total_loss_supervised(&fixed, &moving, p, &cfg).unwrap()
        } else {
            total_loss_unsupervised(&fixed, &moving, p, &cfg).unwrap()
        }
    };
    let g = flat(loss(&phi).grad_field.as_ref().unwrap());
    let x0 = flat(&phi);
    fd_check(&x0, &g, &coords(x0.len(), 30, seed), |v| loss(&field_from(w, h, v)).value)
}

fn tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_vec(c, h, w, random_vec(c * h * w, seed))
}

fn check_conv(seed: u64) -> (f64, usize) {
    let (cin, cout, h, w) = (3, 4, 5, 6);
    let mut layer = Conv::<f64>::zeros("c", cin, cout);
    layer.weight = random_vec(layer.weight.len(), seed);
    layer.bias = random_vec(cout, seed + 1);
    let x = tensor(cin, h, w, seed + 2);
    let up = random_vec(cout * h * w, seed + 3);
    let gout = Tensor::from_vec(cout, h, w, up.clone());
    let mut grad = Conv::zeros("c", cin, cout);
    let gx = conv_backward(&layer, &x, &gout, &mut grad, true).unwrap();
    let (e1, n1) = fd_check(&x.data, &gx.data, &coords(x.data.len(), 20, seed), |v| {
        dot(&conv_forward(&layer, &Tensor::from_vec(cin, h, w, v.to_vec())).data, &up)
    });
    let (e2, n2) = fd_check(&layer.weight, &grad.weight, &coords(layer.weight.len(), 20, seed + 5), |v| {
        let mut l = layer.clone();
        l.weight = v.to_vec();
        dot(&conv_forward(&l, &x).data, &up)
    });
    let (e3, n3) = fd_check(&layer.bias, &grad.bias, &(0..cout).collect::<Vec<_>>(), |v| {
        let mut l = layer.clone();
        l.bias = v.to_vec();
        dot(&conv_forward(&l, &x).data, &up)
    });
    (e1.max(e2).max(e3), n1 + n2 + n3)
}

fn check_elementwise(
    seed: u64,
    (c, h, w): (usize, usize, usize),
    out_len: usize,
    fwd: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    bwd: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> (f64, usize) {
    let x = tensor(c, h, w, seed);
    let y = fwd(&x);
    assert_eq!(y.data.len(), out_len);
    let up = random_vec(out_len, seed + 1);
    let gy = Tensor::from_vec(y.c, y.h, y.w, up.clone());
    let gx = bwd(&x, &gy);
    fd_check(&x.data, &gx.data, &coords(x.data.len(), 30, seed), |v| {
        dot(&fwd(&Tensor::from_vec(c, h, w, v.to_vec())).data, &up)
    })
}

fn check_leaky(seed: u64) -> (f64, usize) {
    check_elementwise(
        seed,
        (2, 4, 5),
        40,
        |x| leaky_relu(x.clone()),
        |x, g| leaky_relu_backward(&leaky_relu(x.clone()), g.clone()),
    )
}

fn check_pool(seed: u64) -> (f64, usize) {
    check_elementwise(seed, (2, 4, 6), 12, avg_pool2, |x, g| avg_pool2_backward(g, x.h, x.w))
}

fn check_upsample(seed: u64) -> (f64, usize) {
    check_elementwise(seed, (2, 3, 4), 96, upsample2, |_, g| upsample2_backward(g))
}

fn check_concat(seed: u64) -> (f64, usize) {
    let b = tensor(3, 4, 5, seed + 50);
    check_elementwise(
        seed,
        (2, 4, 5),
        100,
        |x| concat(x, &b),
        |x, g| concat_backward(g, x.c).0,
    )
}

#[test]
fn criterion_1_gradient_suite() {
    let t = Instant::now();
    let suites: Vec<(&'static str, f64, fn(u64) -> (f64, usize))> = vec![
        ("warp_backward", GRAD_TOL, check_warp),
        ("hmi_soft", GRAD_TOL, check_hmi_soft),
        ("mse", GRAD_TOL, check_mse),
        ("smoothness", GRAD_TOL, check_smoothness),
        ("conv", GRAD_TOL, check_conv),
        ("leaky_relu", GRAD_TOL, check_leaky),
        ("avg_pool2", GRAD_TOL, check_pool),
        ("upsample2", GRAD_TOL, check_upsample),
        ("concat", GRAD_TOL, check_concat),
        ("total_loss_unsupervised", COMPOSITE_TOL, |s| check_composite(s, false)),
        ("total_loss_supervised", COMPOSITE_TOL, |s| check_composite(s, true)),
    ];
    let results: Vec<GradCheck> = suites
        .into_iter()
        .map(|(name, tol, f)| {
            let (mut worst, mut judged) = (0.0f64, 0);
            for seed in 0..GRAD_SEEDS {
                let (e, n) = f(seed * 7919 + 1);
                worst = worst.max(e);
                judged += n;
            }
            GradCheck { name, tol, worst, judged }
        })
        .collect();
    let (fast, time) = within(t, Duration::from_secs(60));
    let mut ok = fast;
    let mut parts = Vec::new();
    for r in &results {
        // most coordinates must be judged, or the check says nothing
        let good = r.worst < r.tol && r.judged >= 10 * GRAD_SEEDS as usize;
        ok &= good;
        parts.push(format!("{} {:.1e}/{}", r.name, r.worst, r.judged));
    }
    verdict(1, "gradient suite", ok, format!("{}; {time}", parts.join(", ")));
}

// ------------------------------------------------------------------ oracles

fn brute_mi(a: &GrayImage, b: &GrayImage, bins: usize) -> f64 {
    let bin = |v: f64| ((v * bins as f64).floor() as usize).min(bins - 1);
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ma: HashMap<usize, f64> = HashMap::new();
    let mut mb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        *joint.entry((bin(x), bin(y))).or_default() += 1.0;
        *ma.entry(bin(x)).or_default() += 1.0;
        *mb.entry(bin(y)).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(i, j), &c)| c / n * (c * n / (ma[&i] * mb[&j])).ln())
        .sum()
}

fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

/// Every way to interleave `n` x-values with `m` y-values, as bit masks over
/// the sorted positions.
fn arrangements(n: usize, m: usize) -> Vec<u32> {
    (0u32..1 << (n + m)).filter(|s| s.count_ones() as usize == n).collect()
}

fn u_of(mask: u32, len: usize) -> usize {
    // pairs (x, y) with x above y
    let mut ys_below = 0;
    let mut u = 0;
    for pos in 0..len {
        if mask >> pos & 1 == 1 {
            u += ys_below;
        } else {
            ys_below += 1;
        }
    }
    u
}

#[test]
fn criterion_2_oracle_equivalence() {
    let t = Instant::now();
    let mut mi_err = 0.0f64;
    for seed in 0..50u64 {
        let a = random_image(8, 8, seed);
        let b = random_image(8, 8, seed + 500);
        for bins in [4, 8, 32] {
            mi_err = mi_err.max((hmi_hard(&a, &b, bins).unwrap() - brute_mi(&a, &b, bins)).abs());
        }
    }

    let mut dice_ok = true;
    let mut rng = prng(77);
    for _ in 0..50 {
        let density = rng.gen::<f64>();
        let a: Vec<bool> = (0..64).map(|_| rng.gen::<f64>() < density).collect();
        let b: Vec<bool> = (0..64).map(|_| rng.gen::<f64>() < density).collect();
        let got = dice(&BinaryMask::new(8, 8, a.clone()).unwrap(), &BinaryMask::new(8, 8, b.clone()).unwrap()).unwrap();
        dice_ok &= got == brute_dice(&a, &b);
    }

    let mut mw_err = 0.0f64;
    let mut mw_cases = 0;
    let mut u_ok = true;
    for n in 1..=6 {
        for m in 1..=6 {
            let all = arrangements(n, m);
            let us: Vec<usize> = all.iter().map(|&s| u_of(s, n + m)).collect();
            let total = us.len() as f64;
            for (&s, &u) in all.iter().zip(&us) {
                let lower = us.iter().filter(|&&v| v <= u).count() as f64 / total;
                let upper = us.iter().filter(|&&v| v >= u).count() as f64 / total;
                let p = (2.0 * lower.min(upper)).min(1.0);
                let (x, y): (Vec<f64>, Vec<f64>) = {
                    let pos = 0..(n + m);
                    let x = pos.clone().filter(|&k| s >> k & 1 == 1).map(|k| k as f64 * 1.5 - 2.0).collect();
                    let y = pos.filter(|&k| s >> k & 1 == 0).map(|k| k as f64 * 1.5 - 2.0).collect();
                    (x, y)
                };
                let r = mann_whitney_u(&x, &y).unwrap();
                u_ok &= r.exact && r.u == u as f64;
                mw_err = mw_err.max((r.p - p).abs());
                mw_cases += 1;
            }
        }
    }
    let (fast, time) = within(t, Duration::from_secs(30));
    let ok = mi_err < 1e-12 && dice_ok && u_ok && mw_err < 1e-9 && fast;
    verdict(
        2,
        "oracle equivalence",
        ok,
        format!("MI max err {mi_err:.1e}, dice exact {dice_ok}, Mann-Whitney {mw_cases} cases U exact {u_ok} p err {mw_err:.1e}; {time}"),
    )
}

// ------------------------------------------------------------- augmentation

#[test]
fn criterion_3_augmentation_contract() {
    let t = Instant::now();
    let table = LevelTable::default();
    let img = random_image(64, 48, 3);
    let mut bound_ok = true;
    let mut worst_ratio = 0.0f64;
    for k in 0..100u64 {
        let level = Level::ALL[k as usize % 3];
        let p = sample_deform_params(table.get(level), 1000 + k).unwrap();
        let (_, field) = elastic_deform(&img, &p).unwrap();
        bound_ok &= field.max_abs() <= p.alpha;
        worst_ratio = worst_ratio.max(field.max_abs() / p.alpha);
    }

    let zero = DeformParams { sigma: 6.0, alpha: 0.0, filter_size: 21, seed: 9 };
    let (same, zf) = elastic_deform(&img, &zero).unwrap();
    let identity_ok = same == img && zf.max_abs() == 0.0;

    let p = sample_deform_params(table.get(Level::High), 42).unwrap();
    let bytes = || {
        let (im, f) = elastic_deform(&img, &p).unwrap();
        let mut b: Vec<u8> = im.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        b.extend(f.to_ddf_bytes());
        b
    };
    let det_ok = bytes() == bytes();
    let (fast, time) = within(t, Duration::from_secs(30));
    verdict(
        3,
        "augmentation contract",
        bound_ok && identity_ok && det_ok && fast,
        format!("bound {bound_ok} (max |phi|/alpha {worst_ratio:.3}), alpha=0 identity {identity_ok}, deterministic {det_ok}; {time}"),
    );
}

// -------------------------------------------------------- direct registration

const TRANSLATION_PAIRS: u64 = 10;
const INTERIOR_MARGIN: usize = 16;

struct DirectRun {
    shifts: Vec<(f64, f64)>,
    before: Vec<f64>,
    after: Vec<f64>,
    fields: Vec<Vec<u8>>,
    logs: Vec<String>,
    seconds: f64,
}

impl DirectRun {
    fn same_outputs(&self, other: &Self) -> bool {
        self.shifts == other.shifts
            && self.before == other.before
            && self.after == other.after
            && self.fields == other.fields
            && self.logs == other.logs
    }
}

fn interior_mean(f: &DisplacementField) -> (f64, f64) {
    let (w, h) = f.dims();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in INTERIOR_MARGIN..h - INTERIOR_MARGIN {
        for x in INTERIOR_MARGIN..w - INTERIOR_MARGIN {
            sx += f.dx[y * w + x];
            sy += f.dy[y * w + x];
            n += 1.0;
        }
    }
    (sx / n, sy / n)
}

fn direct_run() -> DirectRun {
    let t = Instant::now();
    let cfg = DirectConfig::default();
    let translations: Vec<PairRecord> = (0..TRANSLATION_PAIRS).map(|s| translated_pair(128, 96, 3.0, s).unwrap()).collect();
    let bench = generate_benchmark_set(&BenchmarkConfig { seed: 11, ..Default::default() }).unwrap();
    let pairs: Vec<&PairRecord> = translations.iter().chain(bench.iter().map(|e| &e.record)).collect();
    let results: Vec<_> = pairs
        .par_iter()
        .map(|p| register_direct(&p.fixed, &p.moving, &cfg).unwrap())
        .collect();
    let (tr, bm) = results.split_at(translations.len());
    let mut run = DirectRun {
        shifts: tr.iter().map(|r| interior_mean(&r.field)).collect(),
        before: Vec::new(),
        after: Vec::new(),
        fields: results.iter().map(|r| r.field.to_ddf_bytes()).collect(),
        logs: results
            .iter()
            .map(|r| r.log.iter().map(|i| format!("{},{},{:e}\n", i.stage, i.iteration, i.loss)).collect())
            .collect(),
        seconds: 0.0,
    };
    for (e, r) in bench.iter().zip(bm) {
        let truth = e.record.truth_field.as_ref().unwrap();
        let zero = DisplacementField::constant(128, 96, 0.0, 0.0).unwrap();
        run.before.push(endpoint_error(&zero, truth, None).unwrap().median);
        run.after.push(endpoint_error(&r.field, truth, None).unwrap().median);
    }
    run.seconds = t.elapsed().as_secs_f64();
    run
}

fn first_direct() -> &'static DirectRun {
    static RUN: OnceLock<DirectRun> = OnceLock::new();
    RUN.get_or_init(direct_run)
}

#[test]
fn criterion_4_direct_registration_recovery() {
    let run = first_direct();
    let worst_shift = run
        .shifts
        .iter()
        .map(|&(x, y)| ((x - 3.0).powi(2) + y * y).sqrt())
        .fold(0.0f64, f64::max);
    let (b, a) = (median(&run.before), median(&run.after));
    let ratio = a / b;
    let fast = run.seconds < 600.0;
    verdict(
        4,
        "direct-registration recovery",
        worst_shift <= 1.0 && ratio <= 0.5 && fast,
        format!(
            "worst interior shift error {worst_shift:.3} px over {TRANSLATION_PAIRS} pairs; median EPE {b:.3} -> {a:.3} px (ratio {ratio:.3}); {:.1}s of 600s",
            run.seconds
        ),
    );
}

// ------------------------------------------------------- scaled experiments

const EXP_SIZE: (usize, usize) = (64, 48);
const EXP_SPLIT: (usize, usize, usize) = (120, 30, 40);

fn experiment_data() -> (Vec<PairRecord>, Vec<PairRecord>, Vec<PairRecord>) {
    let (a, b, c) = EXP_SPLIT;
    let cfg = BenchmarkConfig {
        n: a + b + c,
        width: EXP_SIZE.0,
        height: EXP_SIZE.1,
        seed: 21,
        ..Default::default()
    };
    let records: Vec<PairRecord> = generate_benchmark_set(&cfg).unwrap().into_iter().map(|e| e.record).collect();
    split_dataset(&records, EXP_SPLIT, 21).unwrap()
}

fn experiment_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 30,
        steps_per_epoch: EXP_SPLIT.0 / 8,
        batch_size: 8,
        lr: 0.001,
        split: EXP_SPLIT,
        seed: 21,
        ..TrainConfig::default()
    }
}

struct Experiment {
    report: EvalReport,
    log: TrainLog,
    checkpoint: Vec<u8>,
    seconds: f64,
}

impl Experiment {
    fn fingerprint(&self) -> (String, String, Vec<u8>, String) {
        (
            self.report.to_csv().unwrap(),
            self.report.to_json().unwrap(),
            self.checkpoint.clone(),
            self.log.to_csv_without_timing(),
        )
    }
}

fn run_experiment(mode: Mode) -> Experiment {
    let t = Instant::now();
    let (tr, va, te) = experiment_data();
    let cfg = experiment_config(mode);
    let out = train(&tr, &va, &cfg, None).unwrap();
    let fields: Vec<DisplacementField> = te
        .par_iter()
        .map(|p| register_with_model(&out.params, &p.fixed, &p.moving).unwrap())
        .collect();
    let report = evaluate_pairs(&te, &fields, &cfg.eval()).unwrap();
    Experiment {
        report,
        checkpoint: out.checkpoint().to_bytes(),
        log: out.log,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn first_unsupervised() -> &'static Experiment {
    static RUN: OnceLock<Experiment> = OnceLock::new();
    RUN.get_or_init(|| run_experiment(Mode::Unsupervised))
}

fn first_supervised() -> &'static Experiment {
    static RUN: OnceLock<Experiment> = OnceLock::new();
    RUN.get_or_init(|| run_experiment(Mode::Supervised))
}

fn medians(r: &EvalReport, metric: &str) -> (f64, f64) {
    let get = |c: String| r.summary_of(&c).unwrap().median;
    (get(format!("{metric}_before")), get(format!("{metric}_after")))
}

#[test]
fn criterion_5_unsupervised_experiment() {
    let exp = first_unsupervised();
    let (d0, d1) = medians(&exp.report, "dice");
    let (m0, m1) = medians(&exp.report, "mi");
    let p = exp.report.test_of("dice").unwrap().p;
    let ok = d1 - d0 >= 0.05 && m1 > m0 && p <= 0.05 && exp.seconds < 900.0;
    verdict(
        5,
        "unsupervised experiment",
        ok,
        format!(
            "median Dice {d0:.4} -> {d1:.4} (+{:.4}), median MI {m0:.4} -> {m1:.4}, Mann-Whitney p {p:.2e}; {:.1}s of 900s",
            d1 - d0,
            exp.seconds
        ),
    );
}

#[test]
fn criterion_6_supervised_experiment() {
    let sup = first_supervised();
    let uns = first_unsupervised();
    let (d0, d1) = medians(&sup.report, "dice");
    let (_, du) = medians(&uns.report, "dice");
    let ok = d1 - d0 >= 0.03 && du >= d1 && sup.seconds < 900.0;
    verdict(
        6,
        "supervised experiment",
        ok,
        format!(
            "median Dice {d0:.4} -> {d1:.4} (+{:.4}); unsupervised {du:.4} vs supervised {d1:.4}; {:.1}s of 900s",
            d1 - d0,
            sup.seconds
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let direct_same = direct_run().same_outputs(first_direct());
    let uns_same = run_experiment(Mode::Unsupervised).fingerprint() == first_unsupervised().fingerprint();
    let sup_same = run_experiment(Mode::Supervised).fingerprint() == first_supervised().fingerprint();
    verdict(
        7,
        "determinism",
        direct_same && uns_same && sup_same,
        format!("direct fields and logs {direct_same}, unsupervised {uns_same}, supervised {sup_same}"),
    );
}

// ------------------------------------------------------------------ epoch 0

#[test]
fn criterion_8_epoch_zero_consistency() {
    let cfg = BenchmarkConfig { n: 16, width: 64, height: 48, seed: 5, ..Default::default() };
    let records: Vec<PairRecord> = generate_benchmark_set(&cfg).unwrap().into_iter().map(|e| e.record).collect();
    let (tr, va, _) = split_dataset(&records, (8, 8, 0), 5).unwrap();
    let mut worst = 0.0f64;
    for mode in [Mode::Unsupervised, Mode::Supervised] {
        let tc = TrainConfig { epochs: 0, split: (8, 8, 0), ..experiment_config(mode) };
        let out = train(&tr, &va, &tc, None).unwrap();
        let row = &out.log.records[0];
        let zeros: Vec<DisplacementField> = va.iter().map(|_| DisplacementField::constant(64, 48, 0.0, 0.0).unwrap()).collect();
        let report = evaluate_pairs(&va, &zeros, &tc.eval()).unwrap();
        let (d, _) = medians(&report, "dice");
        let (m, _) = medians(&report, "mi");
        worst = worst.max((row.val_dice_median - d).abs()).max((row.val_mi_median - m).abs());
    }
    // the baseline must also be what a direct recomputation gives
    let direct: Vec<f64> = va
        .iter()
        .map(|p| {
            let a = binarize(&p.fixed, Binarize::Otsu);
            let b = binarize(&p.moving, Binarize::Otsu);
            dice(&a, &b).unwrap()
        })
        .collect();
    let zeros: Vec<DisplacementField> = va.iter().map(|_| DisplacementField::constant(64, 48, 0.0, 0.0).unwrap()).collect();
    let report = evaluate_pairs(&va, &zeros, &EvalConfig::default()).unwrap();
    worst = worst.max((median(&direct) - medians(&report, "dice").0).abs());
    verdict(8, "epoch-0 consistency", worst <= 1e-12, format!("max deviation {worst:.1e}"));
}

