//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dubox::geometry::BBox;
use dubox::tensor::{Tape, Tensor, Var};
use dubox::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(b)).max(floor)
}

/// Central differences of a scalar function of one flat vector.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Graph under test: builds an output from differentiable leaves.
pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Evaluate `⟨proj, graph(inputs)⟩`.
fn project(graph: &Graph<'_>, inputs: &[Tensor<f64>], proj: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = graph(&mut tape, &vars).expect("graph builds");
    tape.value(out).data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

/// Largest relative error between tape gradients and central differences over
/// every input of `graph`, with the output contracted against a random vector.
pub fn check_graph(graph: &Graph<'_>, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = graph(&mut tape, &vars).expect("graph builds");
    let shape = tape.value(out).shape().to_vec();
    let proj: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, proj.clone()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.gradients(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k], input.numel());
        let numeric = numeric_grad(input.data(), |x| {
            let mut moved = inputs.to_vec();
            moved[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            project(graph, &moved, &proj)
        });
        worst = worst.max(rel_err(&analytic, &numeric, 1e-6));
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
pub fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random image-pixel box inside `w × h` with aspect at most `max_aspect`.
pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64, min_side: f64, max_aspect: f64) -> BBox {
    loop {
        let bw = rng.gen_range(min_side..w * 0.9);
        let bh = rng.gen_range(min_side..h * 0.9);
        if bw / bh > max_aspect || bh / bw > max_aspect {
            continue;
        }
        let x1 = rng.gen_range(0.0..w - bw);
        let y1 = rng.gen_range(0.0..h - bh);
        return BBox::image(x1, y1, x1 + bw, y1 + bh).unwrap();
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dubox")
}

/// Run the binary with a fixed thread cap.
pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("DUBOX_THREADS", "1")
        .output()
        .expect("binary runs")
}

/// Run the binary and require success.
pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "dubox {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Write `cfg` as a config file in `dir`.
pub fn write_config(dir: &Path, cfg: &dubox::pipeline::RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub mod suites;
pub mod criteria;
