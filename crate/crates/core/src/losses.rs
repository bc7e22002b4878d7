//! Box regression and quality-gated classification losses.
//!
//! All functions take batch-major prediction slices (`[N, 4, h, w]` for box
//! offsets, `[N, C, h, w]` for class probabilities) together with one
//! [`TargetMaps`] per image, and return the loss value with its gradient with
//! respect to the prediction slice. Everything is pooled over the batch and
//! normalised by hook counts.

use serde::{Deserialize, Serialize};

use crate::encoding::TargetMaps;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxLoss {
    Iou,
    SmoothL1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// IoU gate threshold for classification positives.
    pub epsilon: f64,
    pub lambda_bbox: f64,
    pub lambda_cls: f64,
    /// Negatives kept per gate-passing positive.
    pub ohem_ratio: usize,
    pub iou_floor: f64,
    pub box_loss: BoxLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.5,
            lambda_bbox: 1.0,
            lambda_cls: 1.0,
            ohem_ratio: 3,
            iou_floor: 1e-6,
            box_loss: BoxLoss::Iou,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("loss.epsilon", "must lie in (0, 1)"));
        }
        if self.ohem_ratio < 1 {
            return Err(Error::config("loss.ohem_ratio", "must be at least 1"));
        }
        if !(self.iou_floor > 0.0 && self.iou_floor < 1.0) {
            return Err(Error::config("loss.iou_floor", "must lie in (0, 1)"));
        }
        for (key, v) in [("lambda_bbox", self.lambda_bbox), ("lambda_cls", self.lambda_cls)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{key}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Probability clamp used inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct BoxLossOutput {
    pub loss: f64,
    /// Hooks that entered the mean.
    pub contributing: usize,
    /// `[N, h, w]`; IoU of prediction and target at positive hooks, 0 elsewhere.
    pub per_hook_iou: Vec<f64>,
    /// Gradient of `loss` w.r.t. the prediction slice.
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsLossOutput {
    pub loss: f64,
    /// Gate-passing positives.
    pub positives: usize,
    pub mined_negatives: usize,
    pub gated_out: usize,
    pub grad: Vec<f64>,
}

fn check_batch(pred_len: usize, channels: usize, targets: &[TargetMaps], what: &str) -> Result<usize> {
    let Some(first) = targets.first() else {
        return Err(Error::shape(format!("{what}: empty batch")));
    };
    let hw = first.grid.hooks();
    if targets.iter().any(|t| t.grid != first.grid) {
        return Err(Error::shape(format!("{what}: targets on different grids")));
    }
    if pred_len != targets.len() * channels * hw {
        return Err(Error::shape(format!(
            "{what}: prediction has {pred_len} values, expected {} x {channels} x {hw}",
            targets.len()
        )));
    }
    Ok(hw)
}

/// IoU of two boxes sharing the hook point, given as offsets scaled by
/// `(fw, fw, fh, fh)`, together with `∂IoU/∂p`.
fn hook_iou(p: [f64; 4], t: [f64; 4], fw: f64, fh: f64) -> (f64, [f64; 4]) {
    let pw = (p[0] + p[1]) * fw;
    let ph = (p[2] + p[3]) * fh;
    let tw = (t[0] + t[1]) * fw;
    let th = (t[2] + t[3]) * fh;
    let iw = (p[0].min(t[0]) + p[1].min(t[1])) * fw;
    let ih = (p[2].min(t[2]) + p[3].min(t[3])) * fh;
    let inter = iw * ih;
    let union = pw * ph + tw * th - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    // ∂I/∂p and ∂U/∂p = ∂A_p/∂p − ∂I/∂p
    let di = [
        if p[0] < t[0] { fw * ih } else { 0.0 },
        if p[1] < t[1] { fw * ih } else { 0.0 },
        if p[2] < t[2] { fh * iw } else { 0.0 },
        if p[3] < t[3] { fh * iw } else { 0.0 },
    ];
    let da = [fw * ph, fw * ph, fh * pw, fh * pw];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        g[k] = (di[k] * union - inter * du) / (union * union);
    }
    (iou, g)
}

fn hook_offsets(pred: &[f64], base: usize, hw: usize, k: usize) -> [f64; 4] {
    [pred[base + k], pred[base + hw + k], pred[base + 2 * hw + k], pred[base + 3 * hw + k]]
}

/// Per-hook IoU at every positive hook (regardless of regression weight).
pub fn per_hook_iou(pred: &[f64], targets: &[TargetMaps]) -> Result<Vec<f64>> {
    let hw = check_batch(pred.len(), 4, targets, "per_hook_iou")?;
    let mut out = vec![0.0; targets.len() * hw];
    for (n, t) in targets.iter().enumerate() {
        let (fw, fh) = (t.grid.map_w as f64, t.grid.map_h as f64);
        for k in (0..hw).filter(|&k| t.positive[k]) {
            let (i, j) = (k % t.grid.map_w, k / t.grid.map_w);
            let p = hook_offsets(pred, n * 4 * hw, hw, k);
            out[n * hw + k] = hook_iou(p, t.offsets_at(i, j), fw, fh).0;
        }
    }
    Ok(out)
}

/// Mean of `−ln(max(IoU, floor))` over positive hooks with regression weight.
pub fn iou_loss(pred: &[f64], targets: &[TargetMaps], cfg: &LossConfig) -> Result<BoxLossOutput> {
    let hw = check_batch(pred.len(), 4, targets, "iou_loss")?;
    let mut per_hook = vec![0.0; targets.len() * hw];
    let mut grad = vec![0.0; pred.len()];
    let mut sum = 0.0;
    let mut count = 0usize;
    for (n, t) in targets.iter().enumerate() {
        let (fw, fh) = (t.grid.map_w as f64, t.grid.map_h as f64);
        let base = n * 4 * hw;
        for k in (0..hw).filter(|&k| t.positive[k]) {
            let (i, j) = (k % t.grid.map_w, k / t.grid.map_w);
            let p = hook_offsets(pred, base, hw, k);
            let (iou, g) = hook_iou(p, t.offsets_at(i, j), fw, fh);
            per_hook[n * hw + k] = iou;
            if !t.bbox_weight[k] {
                continue;
            }
            count += 1;
            if iou >= cfg.iou_floor {
                sum -= iou.ln();
                for (c, gc) in g.iter().enumerate() {
                    grad[base + c * hw + k] = -gc / iou;
                }
            } else {
                sum -= cfg.iou_floor.ln();
            }
        }
    }
    let denom = count.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= denom);
    Ok(BoxLossOutput {
        loss: sum / denom,
        contributing: count,
        per_hook_iou: per_hook,
        grad,
    })
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Elementwise smooth-L1 on the four offset channels, summed per hook and
/// averaged over positive hooks with regression weight.
pub fn smooth_l1_loss(pred: &[f64], targets: &[TargetMaps]) -> Result<BoxLossOutput> {
    let hw = check_batch(pred.len(), 4, targets, "smooth_l1_loss")?;
    let mut grad = vec![0.0; pred.len()];
    let mut sum = 0.0;
    let mut count = 0usize;
    for (n, t) in targets.iter().enumerate() {
        let base = n * 4 * hw;
        for k in (0..hw).filter(|&k| t.positive[k] && t.bbox_weight[k]) {
            let (i, j) = (k % t.grid.map_w, k / t.grid.map_w);
            let target = t.offsets_at(i, j);
            count += 1;
            for (c, tc) in target.iter().enumerate() {
                let idx = base + c * hw + k;
                let (v, g) = smooth_l1(pred[idx] - tc);
                sum += v;
                grad[idx] = g;
            }
        }
    }
    let denom = count.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= denom);
    Ok(BoxLossOutput {
        loss: sum / denom,
        contributing: count,
        per_hook_iou: per_hook_iou(pred, targets)?,
        grad,
    })
}

/// Binary cross-entropy of one probability and its derivative. The clamp is
/// passed straight through so saturated predictions keep a finite gradient.
fn bce(p: f64, t: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
    (loss, (pc - t) / (pc * (1.0 - pc)))
}

/// Indices of the `k` largest losses; ties broken by lower index.
pub fn top_k_negatives(losses: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Quality-gated classification loss with hard negative mining.
///
/// A positive hook contributes iff its IoU exceeds `epsilon`; other positives
/// are ignored. Negatives are hooks outside every positive range, of which the
/// `ohem_ratio · N` hardest are kept.
pub fn crps_cls_loss(pred_cls: &[f64], targets: &[TargetMaps], per_hook_iou: &[f64], cfg: &LossConfig) -> Result<ClsLossOutput> {
    let c = targets.first().map_or(0, |t| t.num_classes);
    let hw = check_batch(pred_cls.len(), c, targets, "crps_cls_loss")?;
    if per_hook_iou.len() != targets.len() * hw {
        return Err(Error::shape(format!(
            "crps_cls_loss: per-hook IoU has {} values, expected {}",
            per_hook_iou.len(),
            targets.len() * hw
        )));
    }
    let mut grad = vec![0.0; pred_cls.len()];
    let mut sum = 0.0;
    let mut positives = 0usize;
    let mut gated_out = 0usize;
    let mut negatives = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        let base = n * c * hw;
        for k in 0..hw {
            if t.positive[k] {
                if per_hook_iou[n * hw + k] > cfg.epsilon {
                    positives += 1;
                    for ch in 0..c {
                        let idx = base + ch * hw + k;
                        let (l, g) = bce(pred_cls[idx], t.cls[ch * hw + k]);
                        sum += l;
                        grad[idx] = g;
                    }
                } else {
                    gated_out += 1;
                }
            } else {
                let l: f64 = (0..c).map(|ch| bce(pred_cls[base + ch * hw + k], 0.0).0).sum();
                negatives.push((n * hw + k, l));
            }
        }
    }
    let keep = (cfg.ohem_ratio * positives).min(negatives.len());
    let kept = top_k_negatives(&negatives, keep);
    for &nk in &kept {
        let (n, k) = (nk / hw, nk % hw);
        for ch in 0..c {
            let idx = n * c * hw + ch * hw + k;
            let (l, g) = bce(pred_cls[idx], 0.0);
            sum += l;
            grad[idx] = g;
        }
    }
    let denom = (positives + kept.len()).max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= denom);
    Ok(ClsLossOutput {
        loss: sum / denom,
        positives,
        mined_negatives: kept.len(),
        gated_out,
        grad,
    })
}

/// `Σ_b λ_bbox·bbox_b + λ_cls·cls_b`.
pub fn total_loss(per_detector: [(f64, f64); 2], cfg: &LossConfig) -> f64 {
    per_detector
        .iter()
        .map(|(b, c)| cfg.lambda_bbox * b + cfg.lambda_cls * c)
        .sum()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectorLoss {
    pub bbox_loss: f64,
    pub cls_loss: f64,
    /// Gate-passing positive hooks.
    pub positives: usize,
    pub mined_negatives: usize,
    pub gated_out: usize,
    /// `[N, h, w]` diagnostic map.
    pub per_hook_iou: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub detectors: [DetectorLoss; 2],
}

impl LossBreakdown {
    /// `iter,total,d1_bbox,d1_cls,d2_bbox,d2_cls,N1,N2,gated1,gated2` row.
    pub fn csv_row(&self, iter: usize) -> String {
        let [a, b] = &self.detectors;
        format!(
            "{iter},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.total, a.bbox_loss, a.cls_loss, b.bbox_loss, b.cls_loss, a.positives, b.positives, a.gated_out, b.gated_out
        )
    }
}

pub const CSV_HEADER: &str = "iter,total,d1_bbox,d1_cls,d2_bbox,d2_cls,N1,N2,gated1,gated2";

/// Prediction variables of one detector on a tape: post-sigmoid class
/// probabilities `[N, C, h, w]` and box offsets `[N, 4, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub cls: Var,
    pub bbox: Var,
}

fn to_f64<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Element>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// Record the two-detector objective on `tape` and return the scalar loss.
pub fn record_loss<T: Element>(
    tape: &mut Tape<T>,
    detectors: [DetectorVars; 2],
    targets: [&[TargetMaps]; 2],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (b, (vars, tg)) in detectors.iter().zip(targets).enumerate() {
        let bbox = to_f64(tape.value(vars.bbox).data());
        let cls = to_f64(tape.value(vars.cls).data());
        let box_out = match cfg.box_loss {
            BoxLoss::Iou => iou_loss(&bbox, tg, cfg)?,
            BoxLoss::SmoothL1 => smooth_l1_loss(&bbox, tg)?,
        };
        let cls_out = crps_cls_loss(&cls, tg, &box_out.per_hook_iou, cfg)?;
        let scaled = |g: &[f64], s: f64| -> Vec<T> { from_f64(&g.iter().map(|v| v * s).collect::<Vec<_>>()) };
        let term = tape.scalar_fn(
            T::of(cfg.lambda_bbox * box_out.loss + cfg.lambda_cls * cls_out.loss),
            vec![vars.bbox, vars.cls],
            vec![scaled(&box_out.grad, cfg.lambda_bbox), scaled(&cls_out.grad, cfg.lambda_cls)],
        )?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        breakdown.detectors[b] = DetectorLoss {
            bbox_loss: box_out.loss,
            cls_loss: cls_out.loss,
            positives: cls_out.positives,
            mined_negatives: cls_out.mined_negatives,
            gated_out: cls_out.gated_out,
            per_hook_iou: box_out.per_hook_iou,
        };
    }
    let [a, b] = &breakdown.detectors;
    breakdown.total = total_loss([(a.bbox_loss, a.cls_loss), (b.bbox_loss, b.cls_loss)], cfg);
    if !breakdown.total.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {}", breakdown.total)));
    }
    Ok((total.expect("two detectors"), breakdown))
}
