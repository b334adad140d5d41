use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::CheckReport;
use crate::grade::{Grade, NUM_GRADES};
use crate::losses::{
    combined_loss, fcn_loss, focal_loss, ranking_loss, weighted_cross_entropy, AlphaWeights, ClassWeights,
    CombinedLossConfig, FcnLossMode, RankingVariant,
};
use crate::models::{
    cbam_backward, cbam_forward, ranking_head_backward, ranking_head_forward, CbamParams, FcnConfig,
    FcnHeadParams, Mode, Parameters, PromptBank, ScoreMode,
};
use crate::rng;
use crate::tensor::gradcheck::{central_difference_at, relative_error};
use crate::tensor::{
    adaptive_avg_pool_1x1, adaptive_avg_pool_1x1_backward, batchnorm2d, batchnorm2d_backward, conv2d,
    conv2d_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward, mul_broadcast,
    mul_broadcast_backward, relu, relu_backward, sigmoid, sigmoid_backward, BatchNormConfig, BnMode,
    RunningStats, Tensor,
};

/// Central-difference step used throughout the suite.
pub const GRADIENT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Some gradients vanish
/// identically (a conv bias feeding train-mode batch norm), where a pure
/// relative error would compare two rounding residues.
pub const ABS_FLOOR: f64 = 1e-6;
/// Coordinates probed per tensor; smaller tensors are probed exhaustively.
const PROBES: usize = 16;

const LAYER_TOL: f64 = 1e-4;
const HEAD_TOL: f64 = 1e-3;

type Named = BTreeMap<String, Tensor>;

fn named(items: Vec<(&str, Tensor)>) -> Named {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Compare `analytic[name]` with central differences of `f` around `at`
/// for every tensor named in `analytic`.
fn check(
    report: &mut CheckReport,
    seed: u64,
    at: &Named,
    analytic: &Named,
    f: &dyn Fn(&Named) -> f64,
    r: &mut ChaCha8Rng,
) {
    for (name, grad) in analytic {
        let base = &at[name];
        if base.shape() != grad.shape() {
            report.fail(format!("seed {seed}: {name} gradient shape {:?} != {:?}", grad.shape(), base.shape()));
            continue;
        }
        let coords: Vec<usize> = if base.len() <= PROBES {
            (0..base.len()).collect()
        } else {
            let mut c = sample(r, base.len(), PROBES).into_vec();
            c.sort_unstable();
            c
        };
        let numeric = central_difference_at(
            |v| {
                let mut m = at.clone();
                m.insert(name.clone(), Tensor::new(base.shape().to_vec(), v.to_vec()).expect("same shape"));
                f(&m)
            },
            base.data(),
            &coords,
            GRADIENT_STEP,
        );
        let picked: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
        let err = floored_relative_error(&picked, &numeric);
        report.record(err, || format!("seed {seed}: d/d{name}"));
    }
}

/// `max|a - n| / max(|a|_inf, |n|_inf, ABS_FLOOR)`.
fn floored_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(ABS_FLOOR, f64::max);
    if scale > ABS_FLOOR {
        return relative_error(analytic, numeric);
    }
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Values bounded away from zero so ReLU's kink is never straddled.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(r, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn grades(r: &mut ChaCha8Rng, n: usize) -> Vec<Grade> {
    (0..n).map(|_| Grade::from_index(r.random_range(0..NUM_GRADES)).expect("< 5")).collect()
}

fn weights(r: &mut ChaCha8Rng) -> ClassWeights {
    ClassWeights::new(std::array::from_fn(|_| r.random_range(0.2..3.0))).expect("positive")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b).expect("same shape")
}

fn linear_case(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let (n, d, m) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..7));
    let at = named(vec![("input", randn(r, &[n, d])), ("weight", randn(r, &[d, m])), ("bias", randn(r, &[m]))]);
    let proj = randn(r, &[n, m]);
    let f = |p: &Named| dot(&linear(&p["input"], &p["weight"], &p["bias"]).unwrap(), &proj);
    let g = linear_backward(&at["input"], &at["weight"], &proj).unwrap();
    let mut an = g.d_params;
    an.insert("input".into(), g.d_input.unwrap());
    check(rep, seed, &at, &an, &f, r);
}

fn conv_case(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..3);
    let padding = r.random_range(0..2);
    let (h, w) = (r.random_range(k..7), r.random_range(k..7));
    let at = named(vec![
        ("input", randn(r, &[n, ci, h, w])),
        ("weight", randn(r, &[co, ci, k, k])),
        ("bias", randn(r, &[co])),
    ]);
    let out_shape = conv2d(&at["input"], &at["weight"], &at["bias"], stride, padding).unwrap().shape().to_vec();
    let proj = randn(r, &out_shape);
    let f = |p: &Named| dot(&conv2d(&p["input"], &p["weight"], &p["bias"], stride, padding).unwrap(), &proj);
    let g = conv2d_backward(&at["input"], &at["weight"], stride, padding, &proj).unwrap();
    let mut an = g.d_params;
    an.insert("input".into(), g.d_input.unwrap());
    check(rep, seed, &at, &an, &f, r);
}

fn batchnorm_case(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng, train: bool) {
    let (n, c, h, w) = (r.random_range(2..4), r.random_range(1..4), r.random_range(2..4), r.random_range(2..4));
    let at = named(vec![
        ("input", randn(r, &[n, c, h, w])),
        ("gamma", randn(r, &[c])),
        ("beta", randn(r, &[c])),
    ]);
    let running = RunningStats {
        mean: (0..c).map(|_| r.random_range(-1.0..1.0)).collect(),
        var: (0..c).map(|_| r.random_range(0.3..2.0)).collect(),
    };
    let mode = || if train { BnMode::Train } else { BnMode::Eval(&running) };
    let cfg = BatchNormConfig::default();
    let proj = randn(r, &[n, c, h, w]);
    let f = |p: &Named| dot(&batchnorm2d(&p["input"], &p["gamma"], &p["beta"], mode(), cfg).unwrap().output, &proj);
    let out = batchnorm2d(&at["input"], &at["gamma"], &at["beta"], mode(), cfg).unwrap();
    let g = batchnorm2d_backward(&out.cache, &proj).unwrap();
    let mut an = g.d_params;
    an.insert("input".into(), g.d_input.unwrap());
    check(rep, seed, &at, &an, &f, r);
}

fn pointwise_cases(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let shape = [r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
    let proj = randn(r, &shape);

    let at = named(vec![("input", away_from_zero(r, &shape))]);
    let f = |p: &Named| dot(&relu(&p["input"]), &proj);
    let an = named(vec![("input", relu_backward(&at["input"], &proj).unwrap())]);
    check(rep, seed, &at, &an, &f, r);

    let at = named(vec![("input", randn(r, &shape))]);
    let f = |p: &Named| dot(&sigmoid(&p["input"]), &proj);
    let an = named(vec![("input", sigmoid_backward(&sigmoid(&at["input"]), &proj).unwrap())]);
    check(rep, seed, &at, &an, &f, r);

    let [n, c, h, w] = shape;
    for gate_shape in [[n, c, 1, 1], [n, 1, h, w]] {
        let at = named(vec![("input", randn(r, &shape)), ("gate", randn(r, &gate_shape))]);
        let f = |p: &Named| dot(&mul_broadcast(&p["input"], &p["gate"]).unwrap(), &proj);
        let (dx, dg) = mul_broadcast_backward(&at["input"], &at["gate"], &proj).unwrap();
        let an = named(vec![("input", dx), ("gate", dg)]);
        check(rep, seed, &at, &an, &f, r);
    }

    let at = named(vec![("input", randn(r, &shape))]);
    let proj1 = randn(r, &[n, c, 1, 1]);
    let f = |p: &Named| dot(&adaptive_avg_pool_1x1(&p["input"]).unwrap(), &proj1);
    let an = named(vec![("input", adaptive_avg_pool_1x1_backward(&shape, &proj1).unwrap())]);
    check(rep, seed, &at, &an, &f, r);

    let proj2 = randn(r, &[n, c]);
    let f = |p: &Named| dot(&global_avg_pool(&p["input"]).unwrap(), &proj2);
    let an = named(vec![("input", global_avg_pool_backward(&shape, &proj2).unwrap())]);
    check(rep, seed, &at, &an, &f, r);
}

fn cbam_case(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let (c, red) = [(2, 1), (2, 2), (4, 2), (4, 4), (6, 3)][r.random_range(0..5)];
    let (n, h, w) = (r.random_range(1..3), r.random_range(2..6), r.random_range(2..6));
    let params = CbamParams::init(c, red, r).unwrap();
    let mut at: Named = params.tensors().into_iter().map(|(k, t)| (k.to_string(), t.clone())).collect();
    at.insert("input".into(), randn(r, &[n, c, h, w]));
    let rebuild = |p: &Named| {
        let mut q = params.clone();
        for (k, t) in q.tensors_mut() {
            *t = p[k].clone();
        }
        q
    };
    let proj = randn(r, &[n, c, h, w]);
    let f = |p: &Named| dot(&cbam_forward(&p["input"], &rebuild(p)).unwrap().0, &proj);
    let (_, cache) = cbam_forward(&at["input"], &params).unwrap();
    let g = cbam_backward(&params, &cache, &proj).unwrap();
    let mut an = g.d_params;
    an.insert("input".into(), g.d_input.unwrap());
    check(rep, seed, &at, &an, &f, r);
}

fn ranking_head_case(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let (n, d) = (r.random_range(1..5), r.random_range(2..9));
    let temperature = r.random_range(0.05..1.0);
    for mode in [ScoreMode::Cosine, ScoreMode::InnerProduct] {
        let x = randn(r, &[n, d]);
        let at = named(vec![("prompts", randn(r, &[NUM_GRADES, d]))]);
        let bank = |p: &Named| PromptBank::new(p["prompts"].clone(), temperature).unwrap();
        let proj = randn(r, &[n, NUM_GRADES]);
        let f = |p: &Named| dot(ranking_head_forward(&x, &bank(p), mode).unwrap().0.values(), &proj);
        let b = bank(&at);
        let (_, cache) = ranking_head_forward(&x, &b, mode).unwrap();
        let an = named(vec![("prompts", ranking_head_backward(&b, &cache, &proj, mode).unwrap())]);
        check(rep, seed, &at, &an, &f, r);
    }
}

fn fcn_head_case(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let config = FcnConfig {
        in_channels: 4,
        widths: vec![4, 4, 2],
        kernel_size: 3,
        reduction: 2,
        cbam_after: vec![true; 3],
        batchnorm: BatchNormConfig::default(),
    };
    let head = FcnHeadParams::init(config, r).unwrap();
    let (n, h, w) = (r.random_range(2..4), r.random_range(3..5), r.random_range(3..5));
    let mut at = Named::new();
    head.visit(&mut |k, t| {
        at.insert(k.to_string(), t.clone());
    });
    at.insert("input".into(), randn(r, &[n, 4, h, w]));
    let targets = grades(r, n);
    let wts = weights(r);
    let gamma = r.random_range(0.0..3.0);
    let mode = [FcnLossMode::WeightedFocal, FcnLossMode::Sum][r.random_range(0..2)];
    let rebuild = |p: &Named| {
        let mut q = head.clone();
        q.visit_mut(&mut |k, t| *t = p[k].clone());
        q
    };
    let f = |p: &Named| {
        let fw = rebuild(p).forward(&p["input"], Mode::Train).unwrap();
        fcn_loss(fw.logits.values(), &targets, gamma, &wts, mode).unwrap().value
    };
    let fw = head.forward(&at["input"], Mode::Train).unwrap();
    let loss = fcn_loss(fw.logits.values(), &targets, gamma, &wts, mode).unwrap();
    let an = head.backward(&fw.cache, &loss.d_logits).unwrap();
    if an.len() != at.len() {
        rep.fail(format!("seed {seed}: backward returned {} tensors, expected {}", an.len(), at.len()));
    }
    check(rep, seed, &at, &an, &f, r);
}

fn loss_cases(rep: &mut CheckReport, seed: u64, r: &mut ChaCha8Rng) {
    let n = r.random_range(1..7);
    let targets = grades(r, n);
    let wts = weights(r);
    let at = named(vec![("logits", randn(r, &[n, NUM_GRADES]).scaled(2.0))]);
    let gamma = r.random_range(0.0..3.0);
    let margin = r.random_range(0.0..0.5);
    let cfg = CombinedLossConfig {
        alpha: r.random_range(0.0..=1.0),
        gamma: r.random_range(0.0..2.0),
        margin,
        score_scale: r.random_range(0.05..2.0),
        variant: [RankingVariant::Unimodal, RankingVariant::Monotone][r.random_range(0..2)],
        alpha_weights: [AlphaWeights::CrossEntropy, AlphaWeights::Ranking][r.random_range(0..2)],
    };
    type LossFn<'a> = Box<dyn Fn(&Tensor) -> crate::losses::LossValue + 'a>;
    let cases: Vec<LossFn<'_>> = vec![
        Box::new(|z| weighted_cross_entropy(z, &targets, &wts).unwrap()),
        Box::new(|z| focal_loss(z, &targets, gamma, &wts).unwrap()),
        Box::new(|z| ranking_loss(z, &targets, margin, RankingVariant::Unimodal).unwrap()),
        Box::new(|z| ranking_loss(z, &targets, margin, RankingVariant::Monotone).unwrap()),
        Box::new(|z| combined_loss(z, &targets, &wts, &cfg).unwrap()),
        Box::new(|z| fcn_loss(z, &targets, gamma, &wts, FcnLossMode::WeightedFocal).unwrap()),
        Box::new(|z| fcn_loss(z, &targets, gamma, &wts, FcnLossMode::Sum).unwrap()),
    ];
    for loss in &cases {
        let f = |p: &Named| loss(&p["logits"]).value;
        let an = named(vec![("logits", loss(&at["logits"]).d_logits)]);
        check(rep, seed, &at, &an, &f, r);
    }
}

/// Finite-difference check of every backward pass over `seeds`.
///
/// Layers and losses use tolerance 1e-4; the full FCN head (three conv
/// blocks with batch norm and CBAM, classifier and loss) uses 1e-3.
pub fn gradient_suite(seeds: Range<u64>) -> Vec<CheckReport> {
    let mut reports = vec![
        CheckReport::new("linear", LAYER_TOL),
        CheckReport::new("conv2d", LAYER_TOL),
        CheckReport::new("batchnorm2d (train)", LAYER_TOL),
        CheckReport::new("batchnorm2d (eval)", LAYER_TOL),
        CheckReport::new("pointwise/pooling", LAYER_TOL),
        CheckReport::new("cbam", LAYER_TOL),
        CheckReport::new("ranking head", LAYER_TOL),
        CheckReport::new("losses", LAYER_TOL),
        CheckReport::new("fcn head", HEAD_TOL),
    ];
    for seed in seeds {
        let r = |case: u64| rng::stream(seed, &[0x96ad, case]);
        linear_case(&mut reports[0], seed, &mut r(0));
        conv_case(&mut reports[1], seed, &mut r(1));
        batchnorm_case(&mut reports[2], seed, &mut r(2), true);
        batchnorm_case(&mut reports[3], seed, &mut r(3), false);
        pointwise_cases(&mut reports[4], seed, &mut r(4));
        cbam_case(&mut reports[5], seed, &mut r(5));
        ranking_head_case(&mut reports[6], seed, &mut r(6));
        loss_cases(&mut reports[7], seed, &mut r(7));
        fcn_head_case(&mut reports[8], seed, &mut r(8));
    }
    reports
}
