//! Fast, self-contained checks shared by the oracle tests and the acceptance
//! harness. Each returns a one-line summary or a description of the first
//! failure.

use std::time::Instant;

use dubox::encoding::{decode_offsets_unclamped, encode_targets, positive_range, DetectorId, EncoderConfig, HookGrid};
use dubox::geometry::{average_precision, iou, nms, BBox, Detection, GroundTruth};
use dubox::losses::{crps_cls_loss, LossConfig, PROB_CLAMP};
use dubox::network::{Model, ModelConfig, ResidualSource};
use dubox::tensor::{sigmoid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_box;
use super::suites::{loss_suite, op_suite, random_targets};

pub type Outcome = Result<String, String>;

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (r, tol) in op_suite(20).into_iter().map(|r| (r, 1e-6)).chain(loss_suite(20).into_iter().map(|r| (r, 1e-5))) {
        if r.worst > tol {
            return Err(format!("{} relative error {:e} over {} configs exceeds {tol:e}", r.name, r.worst, r.configs));
        }
        notes.push(format!("{} {:.1e}", r.name, r.worst));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("suite took {secs:.1} s"));
    }
    Ok(format!("worst errors: {}; {secs:.2} s", notes.join(", ")))
}

/// Every hook of every positive range decodes back to its box.
pub fn encode_decode_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = EncoderConfig::default();
    let (w, h) = (128usize, 128usize);
    let (mut hooks, mut fallback_hooks, mut worst) = (0usize, 0usize, 0.0f64);
    for n in 0..1000 {
        let gt = random_box(&mut rng, w as f64, h as f64, 4.0, 3.0);
        for det in DetectorId::ALL {
            let grid = HookGrid::new(w, h, det).unwrap();
            let maps = encode_targets(&[(gt, 0)], &grid, &cfg).unwrap();
            let range = positive_range(&gt.to_feature(grid.stride).unwrap(), &grid, &cfg).unwrap();
            for &(i, j) in &range.hooks {
                if range.fallback {
                    // the nearest hook may lie outside the box, where the
                    // encoded offsets are clamped to [0, 1]
                    fallback_hooks += 1;
                    if !maps.clamped.contains(&(i, j)) {
                        let got = decode_offsets_unclamped(i, j, maps.offsets_at(i, j), &grid);
                        worst = worst.max(max_abs_diff(got, gt.coords()));
                    }
                    continue;
                }
                hooks += 1;
                if maps.clamped.contains(&(i, j)) {
                    return Err(format!("box {n}: non-fallback hook ({i}, {j}) on detector {} was clamped", det.number()));
                }
                let got = decode_offsets_unclamped(i, j, maps.offsets_at(i, j), &grid);
                let err = max_abs_diff(got, gt.coords());
                if err > 1e-6 {
                    return Err(format!("box {n} hook ({i}, {j}) detector {}: error {err:e} px", det.number()));
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(format!("{hooks} hooks in range (+{fallback_hooks} fallback), 0 failures, worst {worst:.1e} px"))
}

fn max_abs_diff(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn lattice_box(rng: &mut ChaCha8Rng) -> BBox {
    let c = |rng: &mut ChaCha8Rng| rng.gen_range(0..=16) as f64 * 0.5;
    let (a, b, c2, d) = (c(rng), c(rng), c(rng), c(rng));
    BBox::image(a.min(b), c2.min(d), a.max(b), c2.max(d)).unwrap()
}

/// Intersection and union areas by coordinate compression.
pub fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let mut xs = [a.x1, a.x2, b.x1, b.x2];
    let mut ys = [a.y1, a.y2, b.y1, b.y2];
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let inside = |bx: &BBox, x: f64, y: f64| x > bx.x1 && x < bx.x2 && y > bx.y1 && y < bx.y2;
    let (mut inter, mut union) = (0.0, 0.0);
    for xi in 0..3 {
        for yi in 0..3 {
            let cell = (xs[xi + 1] - xs[xi]) * (ys[yi + 1] - ys[yi]);
            if cell <= 0.0 {
                continue;
            }
            let (mx, my) = ((xs[xi] + xs[xi + 1]) / 2.0, (ys[yi] + ys[yi + 1]) / 2.0);
            let (ia, ib) = (inside(a, mx, my), inside(b, mx, my));
            if ia && ib {
                inter += cell;
            }
            if ia || ib {
                union += cell;
            }
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn random_dets(rng: &mut ChaCha8Rng, classes: usize) -> Vec<Detection> {
    let n = rng.gen_range(0..=5);
    (0..n)
        .map(|_| {
            let mut b = lattice_box(rng);
            if b.area() == 0.0 {
                b = BBox::image(b.x1, b.y1, b.x1 + 1.0, b.y1 + 1.0).unwrap();
            }
            Detection::new(b, rng.gen_range(0..classes), rng.gen_range(0.0..1.0), 1).unwrap()
        })
        .collect()
}

/// Greedy NMS specified as a fixed point: a detection survives iff no
/// surviving, better-ranked detection of its class overlaps it at or above
/// the threshold. Found by enumerating every subset.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let better = |a: &Detection, b: &Detection| a.score > b.score;
    for mask in 0u32..(1 << dets.len()) {
        let kept = |k: usize| mask & (1 << k) != 0;
        let consistent = (0..dets.len()).all(|k| {
            let blocked = (0..dets.len()).any(|m| {
                kept(m) && m != k && dets[m].class_id == dets[k].class_id && better(&dets[m], &dets[k]) && brute_iou(&dets[m].bbox, &dets[k].bbox) >= thr
            });
            kept(k) != blocked
        });
        if consistent {
            let mut out: Vec<Detection> = (0..dets.len()).filter(|&k| kept(k)).map(|k| dets[k]).collect();
            out.sort_by(|a, b| b.score.total_cmp(&a.score));
            return out;
        }
    }
    unreachable!("greedy suppression always has a fixed point")
}

/// All-point AP, recomputing the greedy matching from scratch for every
/// prefix of the ranking.
pub fn brute_map(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        let cgts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let tp_of_prefix = |k: usize| {
            let mut used = vec![false; cgts.len()];
            let mut tp = 0;
            for d in &ranked[..k] {
                let best = (0..cgts.len())
                    .filter(|&g| !used[g] && brute_iou(&d.bbox, &cgts[g].bbox) >= thr)
                    .max_by(|&x, &y| brute_iou(&d.bbox, &cgts[x].bbox).total_cmp(&brute_iou(&d.bbox, &cgts[y].bbox)).then(y.cmp(&x)));
                if let Some(g) = best {
                    used[g] = true;
                    tp += 1;
                }
            }
            tp
        };
        let g = cgts.len() as f64;
        let pr: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = tp_of_prefix(k) as f64;
                (tp / g, tp / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        for k in 0..pr.len() {
            let prev = if k == 0 { 0.0 } else { pr[k - 1].0 };
            let envelope = pr[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (pr[k].0 - prev) * envelope;
        }
        total += ap;
    }
    total / classes.len() as f64
}

pub fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for n in 0..500 {
        let (a, b) = (lattice_box(&mut rng), lattice_box(&mut rng));
        let err = (iou(&a, &b).unwrap() - brute_iou(&a, &b)).abs();
        if err > 1e-9 {
            return Err(format!("iou instance {n}: error {err:e}"));
        }
        worst = worst.max(err);
    }
    for n in 0..500 {
        let dets = random_dets(&mut rng, 2);
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let got = nms(&dets, thr).unwrap();
        if got != brute_nms(&dets, thr) {
            return Err(format!("nms instance {n} differs at threshold {thr}"));
        }
    }
    for n in 0..500 {
        let dets = random_dets(&mut rng, 2);
        let gts: Vec<GroundTruth> = (0..rng.gen_range(1..=5))
            .map(|_| {
                let mut b = lattice_box(&mut rng);
                if b.area() == 0.0 {
                    b = BBox::image(b.x1, b.y1, b.x1 + 1.0, b.y1 + 1.0).unwrap();
                }
                GroundTruth { bbox: b, class_id: rng.gen_range(0..2) }
            })
            .collect();
        let got = average_precision(&dets, &gts, 0.5).unwrap().map;
        let want = brute_map(&dets, &gts, 0.5);
        if (got - want).abs() > 1e-12 {
            return Err(format!("AP instance {n}: {got} vs oracle {want}"));
        }
    }
    Ok(format!("500 instances each; worst IoU error {worst:.1e}"))
}

fn neg_loss(p: f64) -> f64 {
    -(1.0 - p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).ln()
}

fn pos_loss(p: f64, t: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

/// Gate membership and mined negatives against a sort-based oracle.
pub fn gate_and_ohem() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LossConfig::default();
    let c = 3;
    let (mut total_pos, mut total_mined) = (0usize, 0usize);
    for n in 0..200 {
        let batch = rng.gen_range(1..=3);
        let det = if rng.gen_bool(0.5) { DetectorId::One } else { DetectorId::Two };
        let targets = random_targets(&mut rng, batch, det, c);
        let hw = targets[0].grid.hooks();
        let cls: Vec<f64> = (0..batch * c * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
        // include values sitting exactly on the gate
        let ious: Vec<f64> = (0..batch * hw)
            .map(|_| if rng.gen_bool(0.1) { 0.5 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let out = crps_cls_loss(&cls, &targets, &ious, &cfg).unwrap();

        let mut gate = Vec::new();
        let mut negatives = Vec::new();
        for (b, t) in targets.iter().enumerate() {
            for k in 0..hw {
                let flat = b * hw + k;
                if t.positive[k] {
                    if ious[flat] > 0.5 {
                        gate.push(flat);
                    }
                } else {
                    let l: f64 = (0..c).map(|ch| neg_loss(cls[b * c * hw + ch * hw + k])).sum();
                    negatives.push((flat, l));
                }
            }
        }
        negatives.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let keep = (3 * gate.len()).min(negatives.len());
        let mined: Vec<usize> = negatives[..keep].iter().map(|x| x.0).collect();

        let mut want_loss = 0.0;
        for &flat in &gate {
            let (b, k) = (flat / hw, flat % hw);
            for ch in 0..c {
                want_loss += pos_loss(cls[b * c * hw + ch * hw + k], targets[b].cls[ch * hw + k]);
            }
        }
        want_loss += negatives[..keep].iter().map(|x| x.1).sum::<f64>();
        want_loss /= (gate.len() + keep).max(1) as f64;

        let mut touched: Vec<usize> = (0..batch * hw)
            .filter(|&flat| {
                let (b, k) = (flat / hw, flat % hw);
                (0..c).any(|ch| out.grad[b * c * hw + ch * hw + k] != 0.0)
            })
            .collect();
        let mut expected: Vec<usize> = gate.iter().chain(&mined).copied().collect();
        touched.sort_unstable();
        expected.sort_unstable();
        if out.positives != gate.len() || out.mined_negatives != keep {
            return Err(format!("instance {n}: N {} kept {} vs oracle {} {keep}", out.positives, out.mined_negatives, gate.len()));
        }
        if touched != expected {
            return Err(format!("instance {n}: hooks receiving gradient differ from gate ∪ mined"));
        }
        if (out.loss - want_loss).abs() > 1e-12 * want_loss.max(1.0) {
            return Err(format!("instance {n}: loss {} vs oracle {want_loss}", out.loss));
        }
        total_pos += gate.len();
        total_mined += keep;
    }
    Ok(format!("200 instances, {total_pos} gated positives, {total_mined} mined negatives"))
}

/// Radius cap, per-detector divisors and the large-object regression mask.
pub fn redundancy_rules() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig::default();
    let (mut capped, mut masked) = (0usize, 0usize);
    for n in 0..500 {
        // large canvases are needed for the detector-1 cap to bind
        let (w, h) = (32 * rng.gen_range(4..=16), 32 * rng.gen_range(4..=16));
        let gt = random_box(&mut rng, w as f64, h as f64, 4.0, 3.0);
        for det in DetectorId::ALL {
            let grid = HookGrid::new(w, h, det).unwrap();
            let f = gt.to_feature(grid.stride).unwrap();
            let range = positive_range(&f, &grid, &cfg).unwrap();
            let diag = (f.width().powi(2) + f.height().powi(2)).sqrt();
            let want = match det {
                DetectorId::One => (diag / 10.0).min(3.0),
                DetectorId::Two => diag / 9.0,
            };
            if (range.radius - want).abs() > 1e-12 {
                return Err(format!("box {n} detector {}: radius {} vs {want}", det.number(), range.radius));
            }
            if det == DetectorId::One && diag / 10.0 > 3.0 {
                capped += 1;
            }
            let maps = encode_targets(&[(gt, 0)], &grid, &cfg).unwrap();
            let large = gt.area() / (w * h) as f64 > 0.3;
            for k in 0..grid.hooks() {
                if !maps.positive[k] {
                    if maps.bbox_weight[k] {
                        return Err(format!("box {n}: regression weight off the positive mask"));
                    }
                    continue;
                }
                let want_weight = !(det == DetectorId::One && large);
                if maps.bbox_weight[k] != want_weight {
                    return Err(format!("box {n} detector {}: bbox_weight {} (area fraction {:.3})", det.number(), maps.bbox_weight[k], gt.area() / (w * h) as f64));
                }
                if !want_weight {
                    masked += 1;
                }
            }
        }
    }
    if capped == 0 || masked == 0 {
        return Err("random boxes never reached the radius cap or the area threshold".into());
    }
    Ok(format!("500 boxes; {capped} hit the detector-1 cap, {masked} hooks masked for large objects"))
}

/// Recomposed `sigmoid(bridged + residual)` equals the returned box map.
pub fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0usize;
    for (pass, source) in [ResidualSource::High, ResidualSource::High, ResidualSource::Low, ResidualSource::High, ResidualSource::Low].into_iter().enumerate() {
        let cfg = ModelConfig {
            seed: pass as u64,
            residual_source: source,
            ..ModelConfig::default()
        };
        let model: Model<f32> = Model::new(cfg).unwrap();
        let n = 2;
        let data: Vec<f32> = (0..n * 3 * 128 * 128).map(|_| rng.gen_range(0.0..1.0)).collect();
        let images = Tensor::new(vec![n, 3, 128, 128], data).unwrap();
        let [_, d2] = model.forward(&images, 1).unwrap();
        for (k, &got) in d2.bbox.data().iter().enumerate() {
            let want = sigmoid(d2.bridged_base.data()[k] + d2.raw_residual.data()[k]);
            if got.to_bits() != want.to_bits() {
                return Err(format!("pass {pass}: element {k} {got} vs recomposed {want}"));
            }
            checked += 1;
        }
    }
    Ok(format!("5 forward passes, {checked} elements bit-identical"))
}
