//! Acceptance suite. Each test prints one `[acceptance] criterion N ...
//! PASS|FAIL` line; the heavy synthetic-training test covers criteria 4-7
//! from two shared run matrices (headline + resolution ablation).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use pylon_core::data::{
    split, generate_synthetic, BlobKind, SynthClass, SyntheticConfig,
};
use pylon_core::equivariance::{equivariance_error, shift, ShiftMode};
use pylon_core::metrics::{auroc, iou_ior, minmax_binarize, point_hit, BBox, ClassScores};
use pylon_core::models::{
    cam_extract, EncoderConfig, Model, PylonConfig, VariantKind, ALL_VARIANTS,
};
use pylon_core::tensor::graph::{Graph, NodeId};
use pylon_core::tensor::ops::{
    conv2d, global_avg_pool, global_max_pool, group_norm, pointwise_activation, Activation,
    EdgeMode, PadMode,
};
use pylon_core::tensor::{finite_difference_gradient, Tensor4};
use pylon_core::training::{
    evaluate_loss, fit, mean_std, InMemoryDataset, PlateauState, TrainConfig,
};
use pylon_core::Result;

/// Collect named boolean checks, print the one-line verdict, then assert.
struct Criterion {
    number: u32,
    name: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(number: u32, name: &'static str) -> Self {
        Criterion { number, name, checks: Vec::new() }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.checks.push((what.into(), ok));
    }

    fn finish(self) {
        let pass = self.checks.iter().all(|c| c.1);
        println!(
            "[acceptance] criterion {} ({}): {} ({} checks)",
            self.number,
            self.name,
            if pass { "PASS" } else { "FAIL" },
            self.checks.len()
        );
        for (what, ok) in &self.checks {
            if !ok {
                println!("  failed: {what}");
            }
        }
        assert!(pass, "criterion {} ({}) failed", self.number, self.name);
    }
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient suite

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

/// Gradient of `bce(build(inputs), targets)` w.r.t. every input tensor,
/// checked against central differences. Routing the scalar through the BCE
/// head exercises the same tape the training loop uses.
fn fd_case(
    crit: &mut Criterion,
    label: &str,
    inputs: &[Tensor4],
    rng: &mut ChaCha20Rng,
    build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) {
    let forward = |xs: &[Tensor4]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| g.param_leaf(x.clone(), i))
            .collect();
        let y = build(&mut g, &leaves).expect("forward build");
        (g, leaves, y)
    };

    let (mut g, _, y) = forward(inputs);
    let y_shape = g.value(y).shape();
    let mut targets = Tensor4::zeros(y_shape.0, y_shape.1, y_shape.2, y_shape.3);
    for v in &mut targets.data {
        *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    }

    let loss = g.bce_loss(y, targets.clone()).expect("loss");
    let mut grads = g.backward(loss).expect("backward");
    let analytic: BTreeMap<usize, Tensor4> = g.param_grads(&mut grads).into_iter().collect();

    for (k, x) in inputs.iter().enumerate() {
        let mut f = |probe: &Tensor4| -> f64 {
            let mut xs: Vec<Tensor4> = inputs.to_vec();
            xs[k] = probe.clone();
            let (mut g, _, y) = forward(&xs);
            let loss = g.bce_loss(y, targets.clone()).expect("loss");
            g.value(loss).data[0]
        };
        let fd = finite_difference_gradient(&mut f, x, FD_H).expect("fd");
        let a = analytic
            .get(&k)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        let denom = fd.max_abs().max(a.max_abs()).max(1e-8);
        let rel = a.max_abs_diff(&fd) / denom;
        crit.check(format!("{label} input {k}: rel err {rel:.2e}"), rel < FD_TOL);
    }
}

/// Uniform values in (-1, 1) kept a margin away from 0 so ReLU kinks and
/// near-ties cannot flip under the probe step.
fn margin_tensor(rng: &mut ChaCha20Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let mut t = Tensor4::zeros(n, c, h, w);
    for v in &mut t.data {
        let x: f64 = rng.gen_range(0.05..1.0);
        *v = if rng.gen_bool(0.5) { x } else { -x };
    }
    t
}

/// All-distinct values with pairwise gaps far above the probe step, so max
/// pools keep their argmax under finite differencing.
fn separated_tensor(rng: &mut ChaCha20Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    use rand::seq::SliceRandom;
    let len = n * c * h * w;
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(rng);
    let mut t = Tensor4::zeros(n, c, h, w);
    for (v, r) in t.data.iter_mut().zip(ranks) {
        *v = r as f64 * 0.01 + rng.gen_range(-0.002..0.002);
    }
    t
}

fn small_shape(rng: &mut ChaCha20Rng) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(1..3),
        rng.gen_range(1..4),
        rng.gen_range(2..7),
        rng.gen_range(2..7),
    )
}

#[test]
fn criterion_1_gradient_suite() {
    let mut crit = Criterion::new(1, "finite-difference gradients");
    let rng = &mut ChaCha20Rng::seed_from_u64(11);

    // conv2d: gradients w.r.t. input, weight and bias over strides,
    // paddings and both padding modes.
    for i in 0..20 {
        let c_in = rng.gen_range(1..3);
        let c_out = rng.gen_range(1..4);
        let k = [1, 3, 5][i % 3];
        let stride = 1 + i % 2;
        let padding = k / 2;
        let pad_mode = if i % 4 < 2 { PadMode::Zeros } else { PadMode::Circular };
        let s = rng.gen_range(k.max(4)..9);
        let n = rng.gen_range(1..3);
        let x = margin_tensor(rng, n, c_in, s, s);
        let w = margin_tensor(rng, c_out, c_in, k, k);
        let b = margin_tensor(rng, 1, c_out, 1, 1);
        fd_case(
            &mut crit,
            &format!("conv2d k{k} s{stride} {pad_mode:?}"),
            &[x, w, b],
            rng,
            &move |g, l| g.conv2d(l[0], l[1], Some(l[2]), stride, padding, pad_mode),
        );
    }

    // batch norm (train mode): input, gamma, beta.
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let n = n.max(2);
        let x = margin_tensor(rng, n, c, h, w);
        let gamma = margin_tensor(rng, 1, c, 1, 1);
        let beta = margin_tensor(rng, 1, c, 1, 1);
        fd_case(&mut crit, "batch_norm_train", &[x, gamma, beta], rng, &|g, l| {
            Ok(g.batch_norm_train(l[0], l[1], l[2], 1e-5)?.0)
        });
    }

    // batch norm (eval mode): input, gamma, beta against fixed running stats.
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        let gamma = margin_tensor(rng, 1, c, 1, 1);
        let beta = margin_tensor(rng, 1, c, 1, 1);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
        fd_case(&mut crit, "batch_norm_eval", &[x, gamma, beta], rng, &move |g, l| {
            g.batch_norm_eval(l[0], l[1], l[2], &mean, &var, 1e-5)
        });
    }

    // group norm: input, gamma, beta across group counts.
    for i in 0..20 {
        let groups = [1, 2, 4][i % 3];
        let c = groups * rng.gen_range(1..3);
        let (n, h, w) = (rng.gen_range(1..3), rng.gen_range(2..6), rng.gen_range(2..6));
        let x = margin_tensor(rng, n, c, h, w);
        let gamma = margin_tensor(rng, 1, c, 1, 1);
        let beta = margin_tensor(rng, 1, c, 1, 1);
        fd_case(&mut crit, "group_norm", &[x, gamma, beta], rng, &move |g, l| {
            g.group_norm(l[0], groups, l[1], l[2], 1e-5)
        });
    }

    // pointwise activations.
    for i in 0..20 {
        let kind = if i % 2 == 0 { Activation::Relu } else { Activation::Sigmoid };
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        fd_case(&mut crit, &format!("{kind:?}"), &[x], rng, &move |g, l| {
            Ok(g.activation(l[0], kind))
        });
    }

    // 2x2 max pool and global pools.
    for _ in 0..20 {
        let (n, c, _, _) = small_shape(rng);
        let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
        let x = separated_tensor(rng, n, c, h, w);
        fd_case(&mut crit, "max_pool2d", &[x], rng, &|g, l| g.max_pool2d(l[0]));
    }
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let x = separated_tensor(rng, n, c, h, w);
        fd_case(&mut crit, "global_max_pool", &[x], rng, &|g, l| {
            Ok(g.global_max_pool(l[0]))
        });
    }
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        fd_case(&mut crit, "global_avg_pool", &[x], rng, &|g, l| {
            Ok(g.global_avg_pool(l[0]))
        });
    }

    // bilinear 2x upsampling under both edge modes.
    for i in 0..20 {
        let edge = if i % 2 == 0 { EdgeMode::Clamp } else { EdgeMode::Wrap };
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        fd_case(&mut crit, &format!("bilinear_upsample {edge:?}"), &[x], rng, &move |g, l| {
            g.bilinear_upsample(l[0], 2 * h, 2 * w, edge)
        });
    }

    // elementwise / broadcast arithmetic.
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let a = margin_tensor(rng, n, c, h, w);
        let b = margin_tensor(rng, n, c, h, w);
        fd_case(&mut crit, "add", &[a, b], rng, &|g, l| g.add(l[0], l[1]));
    }
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let a = margin_tensor(rng, n, c, h, w);
        let b = margin_tensor(rng, n, c, h, w);
        fd_case(&mut crit, "mul", &[a, b], rng, &|g, l| g.mul(l[0], l[1]));
    }
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        let s = margin_tensor(rng, n, c, 1, 1);
        fd_case(&mut crit, "mul_channel", &[x, s], rng, &|g, l| g.mul_channel(l[0], l[1]));
    }
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        let s = margin_tensor(rng, n, c, 1, 1);
        fd_case(&mut crit, "add_channel", &[x, s], rng, &|g, l| g.add_channel(l[0], l[1]));
    }

    // the BCE head itself, with nothing in front of it.
    for _ in 0..20 {
        let (n, c, h, w) = small_shape(rng);
        let x = margin_tensor(rng, n, c, h, w);
        fd_case(&mut crit, "bce_with_logits", &[x], rng, &|_, l| Ok(l[0]));
    }

    crit.finish();
}

// ---------------------------------------------------------------------------
// criterion 2: equivariance suite

#[test]
fn criterion_2_equivariance_suite() {
    let mut crit = Criterion::new(2, "shift equivariance");
    let rng = &mut ChaCha20Rng::seed_from_u64(22);

    // Individual operations under circular shifts.
    for i in 0..6 {
        let x = Tensor4::random(1, 2, 16, 16, rng);
        let w = Tensor4::random(3, 2, 3, 3, rng);
        let stride = 1 + i % 2;
        let mut f = |t: &Tensor4| conv2d(t, &w, None, stride, 1, PadMode::Circular);
        let err = equivariance_error(&mut f, &x, 4, 2, ShiftMode::Circular, stride, 0).unwrap();
        crit.check(format!("conv circular stride {stride}: {err:.2e}"), err < 1e-5);
    }
    {
        let x = Tensor4::random(1, 3, 12, 12, rng);
        let mut f = |t: &Tensor4| Ok(pointwise_activation(t, Activation::Relu));
        let err = equivariance_error(&mut f, &x, 3, 5, ShiftMode::Circular, 1, 0).unwrap();
        crit.check(format!("relu: {err:.2e}"), err < 1e-5);
    }
    {
        let x = Tensor4::random(1, 4, 12, 12, rng);
        let gamma = vec![1.3, 0.7, 1.0, 0.9];
        let beta = vec![0.1, -0.2, 0.0, 0.3];
        let mut f = |t: &Tensor4| Ok(group_norm(t, 2, &gamma, &beta, 1e-5)?.0);
        let err = equivariance_error(&mut f, &x, 5, 1, ShiftMode::Circular, 1, 0).unwrap();
        crit.check(format!("group_norm: {err:.2e}"), err < 1e-5);
    }
    {
        let x = Tensor4::random(1, 3, 12, 12, rng);
        let gamma = vec![1.1, 0.8, 1.0];
        let beta = vec![0.0, 0.2, -0.1];
        let mean = vec![0.1, -0.3, 0.05];
        let var = vec![0.9, 1.4, 0.6];
        let mut f = |t: &Tensor4| {
            pylon_core::tensor::ops::batch_norm_eval(t, &gamma, &beta, &mean, &var, 1e-5)
        };
        let err = equivariance_error(&mut f, &x, 2, 7, ShiftMode::Circular, 1, 0).unwrap();
        crit.check(format!("batch_norm_eval: {err:.2e}"), err < 1e-5);
    }

    // Global pools are exactly shift-invariant. Dyadic-grid values make
    // every accumulation order exact, so the comparison can be bitwise.
    for _ in 0..5 {
        let mut x = Tensor4::zeros(2, 3, 8, 8);
        for v in &mut x.data {
            *v = rng.gen_range(0..2048) as f64 / 1024.0;
        }
        let moved = shift(&x, 3, 5, ShiftMode::Circular).unwrap();
        let max_same = global_max_pool(&x).0.data == global_max_pool(&moved).0.data;
        let avg_same = global_avg_pool(&x).data == global_avg_pool(&moved).data;
        crit.check("global_max_pool bit-exact invariance".to_string(), max_same);
        crit.check("global_avg_pool bit-exact invariance".to_string(), avg_same);
    }

    // Full circular-padded PYLON: the heatmap must follow input shifts.
    let enc = EncoderConfig { in_channels: 1, stage_channels: [8, 16, 24, 32], input_size: 64 };
    let pcfg = PylonConfig { n_classes: 2, decoder_channels: 32, ..Default::default() };
    let model =
        Model::build_with_pad(VariantKind::Pylon, enc, pcfg, 7, PadMode::Circular).unwrap();
    let x = Tensor4::random(1, 1, 64, 64, rng);
    let stride = model.output_stride();
    let mut f = |t: &Tensor4| Ok(model.infer(t)?.heatmap);
    for (dy, dx) in [(32, 0), (0, 32), (32, 32)] {
        let err =
            equivariance_error(&mut f, &x, dy, dx, ShiftMode::Circular, stride, 0).unwrap();
        crit.check(format!("pylon circular heatmap shift ({dy},{dx}): {err:.2e}"), err < 1e-3);
    }

    crit.finish();
}

// ---------------------------------------------------------------------------
// criterion 3: metric oracles

#[test]
fn criterion_3_metric_oracles() {
    let mut crit = Criterion::new(3, "metric oracles");
    let rng = &mut ChaCha20Rng::seed_from_u64(33);

    let mut worst_iou = 0.0f64;
    let mut all_masks_ok = true;
    for _ in 0..1000 {
        let h = rng.gen_range(3..11);
        let w = rng.gen_range(3..11);
        let mut cam = Tensor4::zeros(1, 1, h, w);
        for v in &mut cam.data {
            // Coarse grid to provoke ties in both binarization and argmax.
            *v = rng.gen_range(0..7) as f64 / 6.0;
        }
        let boxes: Vec<BBox> = (0..rng.gen_range(1..4))
            .map(|_| {
                let bw = rng.gen_range(1..=w);
                let bh = rng.gen_range(1..=h);
                BBox {
                    x: rng.gen_range(0..=w - bw),
                    y: rng.gen_range(0..=h - bh),
                    w: bw,
                    h: bh,
                }
            })
            .collect();

        // Oracle mask: threshold at half of the min-max range, everything
        // selected when the map is flat.
        let lo = cam.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cam.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mask = minmax_binarize(&cam).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            let want = if hi > lo { (cam.data[i] - lo) / (hi - lo) >= 0.5 } else { true };
            all_masks_ok &= m == want;
        }

        // Oracle IoU / IoR by raw pixel counting.
        let in_gt = |r: usize, c: usize| boxes.iter().any(|b| b.contains(r, c));
        let (mut inter, mut union, mut pred) = (0usize, 0usize, 0usize);
        for r in 0..h {
            for c in 0..w {
                let p = mask[r * w + c];
                let g = in_gt(r, c);
                inter += (p && g) as usize;
                union += (p || g) as usize;
                pred += p as usize;
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (iou, ior) = iou_ior(&mask, h, w, &boxes).unwrap();
        worst_iou = worst_iou
            .max((iou - ratio(inter, union)).abs())
            .max((ior - ratio(inter, pred)).abs());

        // Oracle point hit: first row-major strict maximum.
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in cam.data.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        let want_hit = in_gt(best.0 / w, best.0 % w);
        all_masks_ok &= point_hit(&cam, &boxes).unwrap() == want_hit;
    }
    crit.check("minmax_binarize + point_hit match oracles on 1000 instances", all_masks_ok);
    crit.check(format!("iou/ior max |diff| {worst_iou:.2e}"), worst_iou == 0.0);

    // AUROC against the O(P*N) pair-counting oracle, with heavy ties.
    let mut worst_auroc = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(4..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..9) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        // Force both classes to be present.
        labels[0] = true;
        labels[1] = false;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sp, _) in scores.iter().zip(&labels).filter(|(_, &l)| l) {
            for (sn, _) in scores.iter().zip(&labels).filter(|(_, &l)| !l) {
                pairs += 1.0;
                wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        let got = auroc(&scores, &labels).unwrap();
        worst_auroc = worst_auroc.max((got - wins / pairs).abs());
    }
    crit.check(format!("auroc max |diff| {worst_auroc:.2e} on 1000 instances"), worst_auroc < 1e-12);

    crit.finish();
}

// ---------------------------------------------------------------------------
// criteria 4-7: synthetic training matrix (shared runs)

const MATRIX_SEEDS: [u64; 3] = [0, 1, 2];

fn synth_classes(small_area: (f64, f64)) -> Vec<SynthClass> {
    vec![
        SynthClass {
            name: "big".into(),
            area_range: (0.12, 0.20),
            kind: BlobKind::Disk,
            intensity_range: (0.25, 0.45),
            prevalence: 0.5,
        },
        SynthClass {
            name: "small".into(),
            area_range: small_area,
            kind: BlobKind::Disk,
            intensity_range: (0.4, 0.5),
            prevalence: 0.5,
        },
    ]
}

/// Dataset for the headline comparison and the GAP/norm ablations: a large
/// easy-to-localize class plus a small bright class that needs a
/// fine-resolution, shift-equivariant decoder to pin down.
fn matrix_synth_config() -> SyntheticConfig {
    SyntheticConfig {
        n_images: 2600,
        image_size: 64,
        classes: synth_classes((0.013, 0.022)),
        distractors: None,
        noise_std: 0.05,
        seed: 42,
    }
}

/// Dataset for the resolution ablation: higher resolution and no
/// distractors, with small blobs sized so the stride-8 decoder resolves
/// them comfortably while the stride-16 decoder only partially does —
/// isolating heatmap resolution as the only varying factor.
fn resolution_synth_config() -> SyntheticConfig {
    SyntheticConfig {
        n_images: 1300,
        image_size: 128,
        classes: synth_classes((0.012, 0.019)),
        distractors: None,
        noise_std: 0.05,
        seed: 42,
    }
}

struct RunResult {
    small_point_acc: f64,
    macro_auroc: f64,
}

fn train_and_eval(
    variant: VariantKind,
    seed: u64,
    data: &MatrixData,
) -> RunResult {
    let MatrixData { train, val, test, test_instances, input_size } = data;
    let input_size = *input_size;
    let enc =
        EncoderConfig { in_channels: 1, stage_channels: [8, 16, 24, 32], input_size };
    let pcfg = PylonConfig { n_classes: 2, decoder_channels: 32, ..Default::default() };
    let mut model = Model::build(variant, enc, pcfg, seed).unwrap();
    let cfg = TrainConfig {
        lr0: 5e-4,
        batch_size: 32,
        max_epochs: 30,
        seed,
        ..Default::default()
    };
    fit(&mut model, train, val, &cfg, None).unwrap();

    let mut scores = vec![ClassScores::default(); 2];
    let mut hits = 0usize;
    let mut n_instances = 0usize;
    for i in 0..test.len() {
        let mut x = Tensor4::zeros(1, 1, input_size, input_size);
        x.data.copy_from_slice(&test.images[i].data);
        let out = model.infer(&x).unwrap();
        for ci in 0..2 {
            scores[ci].scores.push(out.logits.at(0, ci, 0, 0));
            scores[ci].labels.push(test.labels[i][ci] > 0.5);
        }
        let (img_idx, boxes) = &test_instances[i];
        assert_eq!(*img_idx, i);
        if !boxes.is_empty() {
            let cam = cam_extract(&out, 1, (input_size, input_size)).unwrap();
            n_instances += 1;
            hits += point_hit(&cam, boxes).unwrap() as usize;
        }
    }
    let macro_auroc = (0..2)
        .map(|ci| auroc(&scores[ci].scores, &scores[ci].labels).unwrap())
        .sum::<f64>()
        / 2.0;
    RunResult { small_point_acc: hits as f64 / n_instances as f64, macro_auroc }
}

struct MatrixData {
    train: InMemoryDataset,
    val: InMemoryDataset,
    test: InMemoryDataset,
    /// Ground-truth small-class boxes per test image, in dataset order.
    test_instances: Vec<(usize, Vec<BBox>)>,
    input_size: usize,
}

/// Generate a synthetic set, re-partition it 10:1:2, and load the splits.
fn load_matrix_data(cfg: &SyntheticConfig, dir: &std::path::Path) -> MatrixData {
    use pylon_core::data::Split;
    let size = cfg.image_size;
    let manifest = generate_synthetic(cfg, dir).unwrap();
    let manifest = split(&manifest, [10.0 / 13.0, 1.0 / 13.0, 2.0 / 13.0], 42).unwrap();
    let train = InMemoryDataset::from_manifest(&manifest, dir, Split::Train, size).unwrap();
    let val = InMemoryDataset::from_manifest(&manifest, dir, Split::Val, size).unwrap();
    let test = InMemoryDataset::from_manifest(&manifest, dir, Split::Test, size).unwrap();
    let test_instances = test
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (i, manifest.boxes_for(id, "small").to_vec()))
        .collect();
    MatrixData { train, val, test, test_instances, input_size: size }
}

#[test]
fn criteria_4_to_7_synthetic_ablations() {
    let dir = tempfile::tempdir().unwrap();

    // Part A: 2000 / 200 / 400 at 64x64 with distractors, for the headline
    // comparison and the GAP / normalization ablations.
    let headline = load_matrix_data(&matrix_synth_config(), &dir.path().join("headline"));
    assert_eq!(
        (headline.train.len(), headline.val.len(), headline.test.len()),
        (2000, 200, 400)
    );

    fn sweep(
        variants: &[VariantKind],
        data: &MatrixData,
        key: &str,
        point: &mut BTreeMap<&'static str, Vec<f64>>,
        auc: &mut BTreeMap<&'static str, Vec<f64>>,
    ) {
        for &v in variants {
            for seed in MATRIX_SEEDS {
                let r = train_and_eval(v, seed, data);
                println!(
                    "  run {key}/{} seed {seed}: small point acc {:.3}, macro auroc {:.3}",
                    v.as_str(),
                    r.small_point_acc,
                    r.macro_auroc
                );
                point.entry(v.as_str()).or_default().push(r.small_point_acc);
                auc.entry(v.as_str()).or_default().push(r.macro_auroc);
            }
        }
    }
    let mut point: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut auc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    sweep(
        &[
            VariantKind::Backbone,
            VariantKind::Pylon,
            VariantKind::DecoderGap,
            VariantKind::DecoderGroupNorm,
        ],
        &headline,
        "headline",
        &mut point,
        &mut auc,
    );
    let stats = |m: &BTreeMap<&str, Vec<f64>>, k: &str| mean_std(&m[k]);

    let (py_pt, py_sd) = stats(&point, "pylon");
    let (bb_pt, _) = stats(&point, "backbone");
    let (py_auc, _) = stats(&auc, "pylon");
    let (bb_auc, _) = stats(&auc, "backbone");
    let mut c4 = Criterion::new(4, "synthetic headline");
    c4.check(
        format!("pylon point {py_pt:.3} >= backbone {bb_pt:.3} + 0.15"),
        py_pt >= bb_pt + 0.15,
    );
    c4.check(format!("pylon macro auroc {py_auc:.3} > 0.90"), py_auc > 0.90);
    c4.check(format!("backbone macro auroc {bb_auc:.3} > 0.90"), bb_auc > 0.90);
    c4.check(
        format!("pylon auroc {py_auc:.3} within 0.02 of backbone {bb_auc:.3}"),
        py_auc >= bb_auc - 0.02,
    );
    c4.finish();

    let (gap_pt, gap_sd) = stats(&point, "decoder_gap");
    let mut c5 = Criterion::new(5, "GAP ablation");
    c5.check(
        format!("decoder_gap point mean {gap_pt:.3} <= pylon {py_pt:.3}"),
        gap_pt <= py_pt,
    );
    c5.check(
        format!("decoder_gap point std {gap_sd:.3} >= pylon {py_sd:.3}"),
        gap_sd >= py_sd,
    );
    c5.finish();

    let (gn_pt, _) = stats(&point, "decoder_groupnorm");
    let mut c6 = Criterion::new(6, "norm ablation");
    c6.check(
        format!("decoder_groupnorm point mean {gn_pt:.3} <= pylon {py_pt:.3}"),
        gn_pt <= py_pt,
    );
    c6.finish();

    // Part B: the resolution ablation on its own distractor-free set, so
    // heatmap resolution is the only factor varied across 1/2/3 UP modules.
    let resolution = load_matrix_data(&resolution_synth_config(), &dir.path().join("resolution"));
    let mut rpoint: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut rauc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    sweep(
        &[VariantKind::Pylon1Up, VariantKind::Pylon2Up, VariantKind::Pylon],
        &resolution,
        "resolution",
        &mut rpoint,
        &mut rauc,
    );
    let (up1, _) = stats(&rpoint, "pylon_1up");
    let (up2, _) = stats(&rpoint, "pylon_2up");
    let (up3, _) = stats(&rpoint, "pylon");
    let mut c7 = Criterion::new(7, "resolution ablation");
    c7.check(format!("1up {up1:.3} <= 2up {up2:.3}"), up1 <= up2);
    c7.check(format!("2up {up2:.3} <= 3up {up3:.3}"), up2 <= up3);
    c7.check(
        format!("gain 1->2 ({:.3}) >= gain 2->3 ({:.3}) - 0.05", up2 - up1, up3 - up2),
        up2 - up1 >= (up3 - up2) - 0.05,
    );
    c7.finish();
}

// ---------------------------------------------------------------------------
// criterion 8: structural identities

#[test]
fn criterion_8_structural_identities() {
    let mut crit = Criterion::new(8, "structural identities");
    let rng = &mut ChaCha20Rng::seed_from_u64(88);

    let enc = EncoderConfig { in_channels: 1, stage_channels: [4, 8, 8, 8], input_size: 64 };
    let pcfg = PylonConfig { n_classes: 3, decoder_channels: 16, ..Default::default() };

    // 100 random forwards across all variants: logits must be the bitwise
    // spatial max of the heatmap, and the heatmap the documented size.
    let mut logits_exact = true;
    let mut sizes_ok = true;
    for i in 0..100 {
        let variant = ALL_VARIANTS[i % ALL_VARIANTS.len()];
        let model = Model::build(variant, enc.clone(), pcfg.clone(), i as u64).unwrap();
        let x = Tensor4::random(1, 1, 64, 64, rng);
        let out = model.infer(&x).unwrap();
        for ci in 0..3 {
            let spatial_max = out
                .heatmap
                .plane(0, ci)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            logits_exact &= out.logits.at(0, ci, 0, 0) == spatial_max;
        }
        let expect = match variant {
            VariantKind::Backbone => 64 / 32,
            VariantKind::Pylon1Up => 64 / 32 * 2,
            VariantKind::Pylon2Up => 64 / 32 * 4,
            _ => 64 / 32 * 8,
        };
        sizes_ok &= out.heatmap.h == expect && out.heatmap.w == expect;
    }
    crit.check("logits == spatial max of heatmap on 100 forwards", logits_exact);
    crit.check("heatmap sizes input/32 * 2^n_up", sizes_ok);

    // Checkpoint round-trip reproduces the validation loss bit-exactly.
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for i in 0..12 {
        images.push(Tensor4::random(1, 1, 64, 64, rng));
        labels.push((0..3).map(|_| f64::from(rng.gen_bool(0.5))).collect());
        ids.push(format!("r{i}"));
    }
    let set = InMemoryDataset { images, labels, ids, n_classes: 3 };
    let mut model = Model::build(VariantKind::Pylon, enc, pcfg, 5).unwrap();
    let cfg = TrainConfig { lr0: 1e-3, batch_size: 4, max_epochs: 2, seed: 5, ..Default::default() };
    fit(&mut model, &set, &set, &cfg, None).unwrap();
    let loss_before = evaluate_loss(&model, &set, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let restored = Model::load(&path).unwrap();
    let loss_after = evaluate_loss(&restored, &set, 4).unwrap();
    crit.check(
        format!("checkpoint round-trip val loss {loss_before:e} == {loss_after:e}"),
        loss_before.to_bits() == loss_after.to_bits(),
    );

    crit.finish();
}

// ---------------------------------------------------------------------------
// criterion 10: learning-rate schedule

#[test]
fn criterion_10_lr_schedule() {
    let mut crit = Criterion::new(10, "plateau lr trajectory");
    let cfg = TrainConfig::default();
    let mut plateau = PlateauState::default();
    let mut lr = cfg.lr0;
    let mut ladder = vec![lr];
    // One improving epoch, then a hard plateau until the stop threshold.
    for epoch in 0..100 {
        let val = if epoch == 0 { 1.0 } else { 2.0 };
        let next = plateau.reduce_on_plateau(val, lr, &cfg);
        if next != lr {
            ladder.push(next);
        }
        lr = next;
        if lr < cfg.stop_lr {
            break;
        }
    }
    let expect = [1e-4, 2e-5, 4e-6, 8e-7];
    crit.check(
        format!("ladder {ladder:?} has {} rungs", ladder.len()),
        ladder.len() == expect.len(),
    );
    for (got, want) in ladder.iter().zip(expect) {
        crit.check(
            format!("lr {got:e} ~ {want:e}"),
            (got - want).abs() <= 1e-12 * want,
        );
    }
    crit.check(format!("stopped with lr {lr:e} < {:e}", cfg.stop_lr), lr < cfg.stop_lr);
    crit.finish();
}
