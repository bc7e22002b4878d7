//! Randomised finite-difference suites for every engine op and both losses.

use dubox::encoding::{encode_targets, DetectorId, EncoderConfig, HookGrid, TargetMaps};
use dubox::losses::{crps_cls_loss, iou_loss, smooth_l1_loss, LossConfig};
use dubox::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_graph, numeric_grad, random_box, random_tensor, random_tensor_off_zero, rel_err, Graph};

pub struct SuiteResult {
    pub name: &'static str,
    pub configs: usize,
    pub worst: f64,
}

fn conv_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, usize, usize) {
    let n = rng.gen_range(1..=2);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=3);
    let pad = rng.gen_range(0..k);
    let h = rng.gen_range(k..=7);
    let w = rng.gen_range(k..=7);
    let inputs = vec![
        random_tensor(rng, &[n, cin, h, w], 1.0),
        random_tensor(rng, &[cout, cin, k, k], 1.0),
        random_tensor(rng, &[cout], 1.0),
    ];
    (inputs, stride, pad)
}

fn deconv_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, usize, usize) {
    let n = rng.gen_range(1..=2);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=3);
    let pad = rng.gen_range(0..=1);
    // output extent is input · stride exactly when 1 ≤ k − 2·pad ≤ stride
    let k = 2 * pad + rng.gen_range(1..=stride);
    let h = rng.gen_range(1..=4);
    let w = rng.gen_range(1..=4);
    let inputs = vec![
        random_tensor(rng, &[n, cin, h, w], 1.0),
        random_tensor(rng, &[cin, cout, k, k], 1.0),
        random_tensor(rng, &[cout], 1.0),
    ];
    (inputs, stride, pad)
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)]
}

fn run_case(name: &'static str, configs: usize, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..configs).map(|_| case(&mut rng)).fold(0.0, f64::max);
    SuiteResult { name, configs, worst }
}

/// Worst relative gradient error of each op over `configs` random cases.
pub fn op_suite(configs: usize) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    out.push(run_case("conv2d", configs, 1, |rng| {
        let (inputs, s, p) = conv_case(rng);
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2], s, p);
        check_graph(g, &inputs, rng)
    }));
    out.push(run_case("deconv2d", configs, 2, |rng| {
        let (inputs, s, p) = deconv_case(rng);
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.deconv2d(v[0], v[1], v[2], s, p);
        check_graph(g, &inputs, rng)
    }));
    out.push(run_case("relu", configs, 3, |rng| {
        let shape = random_shape(rng);
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.relu(v[0]);
        check_graph(g, &[random_tensor_off_zero(rng, &shape)], rng)
    }));
    out.push(run_case("sigmoid", configs, 4, |rng| {
        let shape = random_shape(rng);
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.sigmoid(v[0]);
        check_graph(g, &[random_tensor(rng, &shape, 4.0)], rng)
    }));
    out.push(run_case("add", configs, 5, |rng| {
        let shape = random_shape(rng);
        let other = if rng.gen_bool(0.5) { shape.clone() } else { vec![shape[1]] };
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1]);
        check_graph(g, &[random_tensor(rng, &shape, 1.0), random_tensor(rng, &other, 1.0)], rng)
    }));
    out.push(run_case("mul", configs, 6, |rng| {
        let shape = random_shape(rng);
        let other = if rng.gen_bool(0.5) { shape.clone() } else { vec![1, shape[1], 1, 1] };
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1]);
        check_graph(g, &[random_tensor(rng, &shape, 1.0), random_tensor(rng, &other, 1.0)], rng)
    }));
    out.push(run_case("scale", configs, 7, |rng| {
        let shape = random_shape(rng);
        let c = rng.gen_range(-3.0..3.0);
        let g: &Graph = &move |t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], c);
        check_graph(g, &[random_tensor(rng, &shape, 1.0)], rng)
    }));
    out.push(run_case("sum", configs, 8, |rng| {
        let shape = random_shape(rng);
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]);
        check_graph(g, &[random_tensor(rng, &shape, 1.0)], rng)
    }));
    out.push(run_case("composed graph (depth 7)", configs, 9, |rng| {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let side = 2 * rng.gen_range(2..=4);
        let inputs = vec![
            random_tensor(rng, &[n, c, side, side], 1.0),
            random_tensor(rng, &[c, c, 3, 3], 0.7),
            random_tensor(rng, &[c], 0.5),
            random_tensor(rng, &[c, c, 2, 2], 0.7),
            random_tensor(rng, &[c], 0.5),
            random_tensor(rng, &[1, c, 1, 1], 1.0),
        ];
        let g: &Graph = &|t: &mut Tape<f64>, v: &[Var]| {
            let a = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let a = t.sigmoid(a)?;
            let b = t.deconv2d(a, v[3], v[4], 2, 0)?;
            let b = t.mul(b, v[5])?;
            let b = t.add(b, v[0])?;
            let b = t.sigmoid(b)?;
            let b = t.mul(b, v[0])?;
            t.scale(b, 1.5)
        };
        check_graph(g, &inputs, rng)
    }));
    out
}

/// Random targets on a 64×64 image for one detector.
pub fn random_targets(rng: &mut ChaCha8Rng, batch: usize, detector: DetectorId, num_classes: usize) -> Vec<TargetMaps> {
    let grid = HookGrid::new(64, 64, detector).unwrap();
    let cfg = EncoderConfig {
        num_classes,
        ..EncoderConfig::default()
    };
    (0..batch)
        .map(|_| {
            let count = rng.gen_range(1..=3);
            let gts: Vec<_> = (0..count)
                .map(|_| (random_box(rng, 64.0, 64.0, 6.0, 3.0), rng.gen_range(0..num_classes)))
                .collect();
            encode_targets(&gts, &grid, &cfg).unwrap()
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Worst relative error of the closed-form loss gradients.
pub fn loss_suite(configs: usize) -> Vec<SuiteResult> {
    let cfg = LossConfig::default();
    let mut out = Vec::new();
    out.push(run_case("iou loss", configs, 11, |rng| {
        let det = if rng.gen_bool(0.5) { DetectorId::One } else { DetectorId::Two };
        let batch = rng.gen_range(1..=3);
        let targets = random_targets(rng, batch, det, 3);
        let hw = targets[0].grid.hooks();
        let pred = uniform(rng, targets.len() * 4 * hw, 0.02, 0.98);
        let analytic = iou_loss(&pred, &targets, &cfg).unwrap().grad;
        let numeric = numeric_grad(&pred, |p| iou_loss(p, &targets, &cfg).unwrap().loss);
        rel_err(&analytic, &numeric, 1e-6)
    }));
    out.push(run_case("smooth-l1 loss", configs, 12, |rng| {
        let batch = rng.gen_range(1..=3);
        let targets = random_targets(rng, batch, DetectorId::One, 3);
        let hw = targets[0].grid.hooks();
        let pred = uniform(rng, targets.len() * 4 * hw, -1.5, 2.5);
        let analytic = smooth_l1_loss(&pred, &targets).unwrap().grad;
        let numeric = numeric_grad(&pred, |p| smooth_l1_loss(p, &targets).unwrap().loss);
        rel_err(&analytic, &numeric, 1e-6)
    }));
    out.push(run_case("crps classification loss", configs, 13, |rng| {
        let batch = rng.gen_range(1..=3);
        let targets = random_targets(rng, batch, DetectorId::One, 3);
        let hw = targets[0].grid.hooks();
        let cls = uniform(rng, targets.len() * 3 * hw, 0.01, 0.99);
        let ious: Vec<f64> = (0..targets.len() * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
        let analytic = crps_cls_loss(&cls, &targets, &ious, &cfg).unwrap().grad;
        let numeric = numeric_grad(&cls, |p| crps_cls_loss(p, &targets, &ious, &cfg).unwrap().loss);
        rel_err(&analytic, &numeric, 1e-6)
    }));
    out
}
