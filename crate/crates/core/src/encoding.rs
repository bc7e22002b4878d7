//! Hook-based target encoding.
//!
//! Every integer location `(i, j)` of an output map is a *hook*. A ground-truth
//! box owns the hooks inside a disk around its centre (the positive range);
//! each owned hook regresses the four distances from itself to the box edges,
//! normalised by the map extent so that targets live in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorId {
    One,
    Two,
}

impl DetectorId {
    pub const ALL: [DetectorId; 2] = [DetectorId::One, DetectorId::Two];

    pub fn stride(self) -> u32 {
        match self {
            DetectorId::One => 8,
            DetectorId::Two => 32,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            DetectorId::One => 1,
            DetectorId::Two => 2,
        }
    }

    pub fn index(self) -> usize {
        self.number() as usize - 1
    }
}

/// Output map geometry of one detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HookGrid {
    pub map_w: usize,
    pub map_h: usize,
    pub stride: u32,
    pub detector: DetectorId,
}

impl HookGrid {
    pub fn new(image_w: usize, image_h: usize, detector: DetectorId) -> Result<Self> {
        let s = detector.stride() as usize;
        if image_w == 0 || image_h == 0 || !image_w.is_multiple_of(s) || !image_h.is_multiple_of(s) {
            return Err(Error::shape(format!(
                "image {image_w}x{image_h} is not divisible by stride {s}"
            )));
        }
        Ok(HookGrid {
            map_w: image_w / s,
            map_h: image_h / s,
            stride: s as u32,
            detector,
        })
    }

    pub fn image_w(&self) -> usize {
        self.map_w * self.stride as usize
    }

    pub fn image_h(&self) -> usize {
        self.map_h * self.stride as usize
    }

    pub fn hooks(&self) -> usize {
        self.map_w * self.map_h
    }

    pub fn unit(&self) -> Unit {
        Unit::Feature {
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Radius divisor for detector 1.
    pub p1: f64,
    /// Radius divisor for detector 2.
    pub p2: f64,
    pub r_cap_detector1: f64,
    pub large_area_threshold: f64,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            p1: 10.0,
            p2: 9.0,
            r_cap_detector1: 3.0,
            large_area_threshold: 0.3,
            num_classes: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("encoder.{key}"), msg));
        if !(self.p1 > 0.0) {
            return bad("p1", "must be positive");
        }
        if !(self.p2 > 0.0) {
            return bad("p2", "must be positive");
        }
        if !(self.r_cap_detector1 > 0.0) {
            return bad("r_cap_detector1", "must be positive");
        }
        if !(self.large_area_threshold > 0.0 && self.large_area_threshold <= 1.0) {
            return bad("large_area_threshold", "must lie in (0, 1]");
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive");
        }
        Ok(())
    }

    fn divisor(&self, detector: DetectorId) -> f64 {
        match detector {
            DetectorId::One => self.p1,
            DetectorId::Two => self.p2,
        }
    }
}

/// Positive range of one ground truth on one detector.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveRange {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Hooks `(i, j)` in `i`-major order.
    pub hooks: Vec<(usize, usize)>,
    /// True when the disk held no hook and the nearest one was substituted.
    pub fallback: bool,
}

/// Hooks within `diag / p` (capped on detector 1) of the box centre.
pub fn positive_range(gt: &BBox, grid: &HookGrid, cfg: &EncoderConfig) -> Result<PositiveRange> {
    if gt.unit != grid.unit() {
        return Err(Error::contract(format!(
            "positive_range: box unit {:?} does not match grid {:?}",
            gt.unit,
            grid.unit()
        )));
    }
    const SLACK: f64 = 1e-9;
    if gt.x1 < -SLACK || gt.y1 < -SLACK || gt.x2 > grid.map_w as f64 + SLACK || gt.y2 > grid.map_h as f64 + SLACK {
        return Err(Error::contract(format!(
            "box ({}, {}, {}, {}) outside {}x{} map",
            gt.x1, gt.y1, gt.x2, gt.y2, grid.map_w, grid.map_h
        )));
    }
    let diag_sq = gt.width().powi(2) + gt.height().powi(2);
    if diag_sq <= 0.0 {
        return Err(Error::degenerate(format!(
            "zero-diagonal box ({}, {}, {}, {})",
            gt.x1, gt.y1, gt.x2, gt.y2
        )));
    }
    let p = cfg.divisor(grid.detector);
    // squared radius kept exact: sqrt-then-square would lose boundary hooks
    let mut r_sq = diag_sq / (p * p);
    if grid.detector == DetectorId::One {
        r_sq = r_sq.min(cfg.r_cap_detector1 * cfg.r_cap_detector1);
    }
    let (cx, cy) = gt.center();
    let dist_sq = |i: usize, j: usize| (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
    let mut hooks = Vec::new();
    for i in 0..grid.map_w {
        for j in 0..grid.map_h {
            if dist_sq(i, j) <= r_sq {
                hooks.push((i, j));
            }
        }
    }
    let fallback = hooks.is_empty();
    if fallback {
        let mut best = (0usize, 0usize);
        for i in 0..grid.map_w {
            for j in 0..grid.map_h {
                if dist_sq(i, j) < dist_sq(best.0, best.1) {
                    best = (i, j);
                }
            }
        }
        hooks.push(best);
    }
    Ok(PositiveRange {
        cx,
        cy,
        radius: r_sq.sqrt(),
        hooks,
        fallback,
    })
}

/// Dense per-detector training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub grid: HookGrid,
    pub num_classes: usize,
    /// `[C, map_h, map_w]`, one-hot at positive hooks.
    pub cls: Vec<f64>,
    /// `[4, map_h, map_w]` in channel order Δw1, Δw2, Δh1, Δh2.
    pub offsets: Vec<f64>,
    /// `[map_h, map_w]`.
    pub positive: Vec<bool>,
    /// `[map_h, map_w]`; regression weight, never set off the positive mask.
    pub bbox_weight: Vec<bool>,
    /// `[map_h, map_w]`; index into `gts` of the owning ground truth.
    pub owner: Vec<Option<usize>>,
    /// Ground truth in feature units with class ids.
    pub gts: Vec<(BBox, usize)>,
    /// Hooks where a raw offset fell outside `[0, 1]` and was clamped.
    pub clamped: Vec<(usize, usize)>,
}

impl TargetMaps {
    pub fn empty(grid: HookGrid, num_classes: usize) -> Self {
        let hw = grid.hooks();
        TargetMaps {
            grid,
            num_classes,
            cls: vec![0.0; num_classes * hw],
            offsets: vec![0.0; 4 * hw],
            positive: vec![false; hw],
            bbox_weight: vec![false; hw],
            owner: vec![None; hw],
            gts: Vec::new(),
            clamped: Vec::new(),
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.grid.map_w + i
    }

    pub fn offsets_at(&self, i: usize, j: usize) -> [f64; 4] {
        let hw = self.grid.hooks();
        let k = self.index(i, j);
        [self.offsets[k], self.offsets[hw + k], self.offsets[2 * hw + k], self.offsets[3 * hw + k]]
    }

    pub fn class_at(&self, i: usize, j: usize) -> Option<usize> {
        let hw = self.grid.hooks();
        let k = self.index(i, j);
        (0..self.num_classes).find(|&c| self.cls[c * hw + k] > 0.5)
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    /// Positive hooks `(i, j)` in row-major order.
    pub fn positive_hooks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.grid.map_w;
        self.positive
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(move |(k, _)| (k % w, k / w))
    }

    /// Human-readable listing of every ground truth's hooks, offsets and masks.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let g = &self.grid;
        let _ = writeln!(
            out,
            "detector {} stride {} map {}x{} positives {}",
            g.detector.number(),
            g.stride,
            g.map_w,
            g.map_h,
            self.num_positive()
        );
        for (gi, (bx, class)) in self.gts.iter().enumerate() {
            let _ = writeln!(
                out,
                "  gt {gi} class {class} feature box ({:.4}, {:.4}, {:.4}, {:.4})",
                bx.x1, bx.y1, bx.x2, bx.y2
            );
            for j in 0..g.map_h {
                for i in 0..g.map_w {
                    let k = self.index(i, j);
                    if self.owner[k] != Some(gi) {
                        continue;
                    }
                    let o = self.offsets_at(i, j);
                    let _ = writeln!(
                        out,
                        "    hook ({i}, {j}) offsets [{:.6}, {:.6}, {:.6}, {:.6}] bbox_weight {}{}",
                        o[0],
                        o[1],
                        o[2],
                        o[3],
                        self.bbox_weight[k] as u8,
                        if self.clamped.contains(&(i, j)) { " clamped" } else { "" }
                    );
                }
            }
        }
        let _ = writeln!(out, "  positive mask:");
        for j in 0..g.map_h {
            let row: String = (0..g.map_w)
                .map(|i| if self.positive[self.index(i, j)] { '#' } else { '.' })
                .collect();
            let _ = writeln!(out, "    {row}");
        }
        let _ = writeln!(out, "  bbox weight mask:");
        for j in 0..g.map_h {
            let row: String = (0..g.map_w)
                .map(|i| if self.bbox_weight[self.index(i, j)] { '#' } else { '.' })
                .collect();
            let _ = writeln!(out, "    {row}");
        }
        out
    }
}

/// Build target maps for one image on one detector.
///
/// Where positive ranges overlap, the ground truth with the smaller area owns
/// the hook (equal areas: the earlier box).
pub fn encode_targets(gts: &[(BBox, usize)], grid: &HookGrid, cfg: &EncoderConfig) -> Result<TargetMaps> {
    let mut maps = TargetMaps::empty(*grid, cfg.num_classes);
    let image_area = (grid.image_w() * grid.image_h()) as f64;
    let mut feature = Vec::with_capacity(gts.len());
    for (bx, class) in gts {
        if *class >= cfg.num_classes {
            return Err(Error::contract(format!(
                "class id {class} not below num_classes {}",
                cfg.num_classes
            )));
        }
        feature.push((bx.to_feature(grid.stride)?, *class));
    }
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[b].0.area().total_cmp(&gts[a].0.area()).then(b.cmp(&a)));

    let hw = grid.hooks();
    let (fw, fh) = (grid.map_w as f64, grid.map_h as f64);
    for gi in order {
        let (fbox, class) = feature[gi];
        let range = positive_range(&fbox, grid, cfg)?;
        let ignore_regression =
            grid.detector == DetectorId::One && gts[gi].0.area() / image_area > cfg.large_area_threshold;
        for (i, j) in range.hooks {
            let k = maps.index(i, j);
            for c in 0..cfg.num_classes {
                maps.cls[c * hw + k] = 0.0;
            }
            maps.cls[class * hw + k] = 1.0;
            maps.positive[k] = true;
            maps.bbox_weight[k] = !ignore_regression;
            maps.owner[k] = Some(gi);
            let (fi, fj) = (i as f64, j as f64);
            let raw = [
                (fi - fbox.x1) / fw,
                (fbox.x2 - fi) / fw,
                (fj - fbox.y1) / fh,
                (fbox.y2 - fj) / fh,
            ];
            let mut clamped = false;
            for (ch, v) in raw.into_iter().enumerate() {
                let c = v.clamp(0.0, 1.0);
                clamped |= c != v;
                maps.offsets[ch * hw + k] = c;
            }
            maps.clamped.retain(|&h| h != (i, j));
            if clamped {
                maps.clamped.push((i, j));
            }
        }
    }
    maps.gts = feature;
    Ok(maps)
}

/// Box described by normalised offsets at a hook, in feature units, unclamped.
pub fn offsets_to_feature_box(i: usize, j: usize, offsets: [f64; 4], grid: &HookGrid) -> [f64; 4] {
    let (fw, fh) = (grid.map_w as f64, grid.map_h as f64);
    let (fi, fj) = (i as f64, j as f64);
    [
        fi - offsets[0] * fw,
        fj - offsets[2] * fh,
        fi + offsets[1] * fw,
        fj + offsets[3] * fh,
    ]
}

/// Image-pixel box before clamping to image bounds.
pub fn decode_offsets_unclamped(i: usize, j: usize, offsets: [f64; 4], grid: &HookGrid) -> [f64; 4] {
    let s = grid.stride as f64;
    offsets_to_feature_box(i, j, offsets, grid).map(|v| v * s)
}

/// Decode a hook's offsets into an image-pixel box clamped to the image.
pub fn decode_offsets(i: usize, j: usize, offsets: [f64; 4], grid: &HookGrid) -> Result<BBox> {
    if let Some(v) = offsets.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("offset {v} outside [0, 1]")));
    }
    let [x1, y1, x2, y2] = decode_offsets_unclamped(i, j, offsets, grid);
    let (w, h) = (grid.image_w() as f64, grid.image_h() as f64);
    let (x1, x2) = (x1.clamp(0.0, w), x2.clamp(0.0, w));
    let (y1, y2) = (y1.clamp(0.0, h), y2.clamp(0.0, h));
    if x1 >= x2 || y1 >= y2 {
        return Err(Error::degenerate(format!(
            "hook ({i}, {j}) decodes to empty box ({x1}, {y1}, {x2}, {y2})"
        )));
    }
    BBox::image(x1, y1, x2, y2)
}

/// Class-keyed index of records, one entry per object occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchBalanceTable {
    pub table: BTreeMap<usize, Vec<usize>>,
}

impl BatchBalanceTable {
    pub fn from_class_lists(lists: &[Vec<usize>]) -> Result<Self> {
        if lists.is_empty() {
            return Err(Error::contract("batch balance table over an empty dataset"));
        }
        let mut table: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, classes) in lists.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::contract(format!("record {idx} has no ground truth")));
            }
            for &c in classes {
                table.entry(c).or_default().push(idx);
            }
        }
        Ok(BatchBalanceTable { table })
    }

    /// Draw a class uniformly, then a record uniformly from that class's list.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let k = rng.gen_range(0..self.table.len());
        let (&class, records) = self.table.iter().nth(k).expect("k below table size");
        (class, records[rng.gen_range(0..records.len())])
    }
}

pub fn batch_balance_table(dataset: &[DatasetRecord]) -> Result<BatchBalanceTable> {
    let lists: Vec<Vec<usize>> = dataset
        .iter()
        .map(|r| r.gts.iter().map(|(_, c)| *c).collect())
        .collect();
    BatchBalanceTable::from_class_lists(&lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid16() -> HookGrid {
        HookGrid::new(128, 128, DetectorId::One).unwrap()
    }

    fn fbox(x1: f64, y1: f64, x2: f64, y2: f64, stride: u32) -> BBox {
        BBox::new(x1, y1, x2, y2, Unit::Feature { stride }).unwrap()
    }

    #[test]
    fn range_of_ten_unit_box() {
        let grid = grid16();
        let r = positive_range(&fbox(0.0, 0.0, 10.0, 10.0, 8), &grid, &EncoderConfig::default()).unwrap();
        assert!((r.radius - 200f64.sqrt() / 10.0).abs() < 1e-12);
        let mut expected = Vec::new();
        for i in 4..=6 {
            for j in 4..=6 {
                expected.push((i, j));
            }
        }
        assert_eq!(r.hooks, expected);
        assert!(!r.fallback);
    }

    #[test]
    fn detector_one_radius_capped() {
        let grid = HookGrid::new(512, 512, DetectorId::One).unwrap();
        let r = positive_range(&fbox(0.0, 0.0, 40.0, 40.0, 8), &grid, &EncoderConfig::default()).unwrap();
        assert_eq!(r.radius, 3.0);
        let grid2 = HookGrid::new(2048, 2048, DetectorId::Two).unwrap();
        let r2 = positive_range(&fbox(0.0, 0.0, 40.0, 40.0, 32), &grid2, &EncoderConfig::default()).unwrap();
        assert!((r2.radius - 3200f64.sqrt() / 9.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        let err = positive_range(&fbox(2.0, 2.0, 2.0, 2.0, 8), &grid16(), &EncoderConfig::default());
        assert!(matches!(err, Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn small_box_targets_and_decode() {
        let grid = grid16();
        let gt = BBox::image(16.0, 24.0, 40.0, 56.0).unwrap();
        let maps = encode_targets(&[(gt, 2)], &grid, &EncoderConfig::default()).unwrap();
        // r = 0.5 reaches exactly the two hooks straddling the centre (3.5, 5)
        assert_eq!(maps.positive_hooks().collect::<Vec<_>>(), vec![(3, 5), (4, 5)]);
        let o = maps.offsets_at(3, 5);
        assert_eq!(o, [1.0 / 16.0, 2.0 / 16.0, 2.0 / 16.0, 2.0 / 16.0]);
        assert_eq!(maps.class_at(3, 5), Some(2));
        let back = decode_offsets(3, 5, o, &grid).unwrap();
        assert_eq!(back.coords(), [16.0, 24.0, 40.0, 56.0]);
    }

    #[test]
    fn fallback_picks_nearest_hook() {
        let grid = grid16();
        // feature box (2.1, 3.1)-(2.6, 3.4): r ≈ 0.058, no hook inside
        let gt = BBox::image(16.8, 24.8, 20.8, 27.2).unwrap();
        let maps = encode_targets(&[(gt, 0)], &grid, &EncoderConfig::default()).unwrap();
        assert_eq!(maps.positive_hooks().collect::<Vec<_>>(), vec![(2, 3)]);
        // hook (2, 3) lies left/above the box; negative offsets clamp to 0
        assert_eq!(maps.clamped, vec![(2, 3)]);
        let o = maps.offsets_at(2, 3);
        assert_eq!(o[0], 0.0);
        assert_eq!(o[2], 0.0);
    }

    #[test]
    fn large_object_ignored_by_detector_one_regression() {
        let gt = BBox::image(0.0, 0.0, 89.6, 89.6).unwrap(); // 0.49 of 128x128
        let cfg = EncoderConfig::default();
        let d1 = encode_targets(&[(gt, 0)], &grid16(), &cfg).unwrap();
        assert!(d1.num_positive() > 0);
        assert!(d1.positive_hooks().all(|(i, j)| !d1.bbox_weight[d1.index(i, j)]));
        let grid2 = HookGrid::new(128, 128, DetectorId::Two).unwrap();
        let d2 = encode_targets(&[(gt, 0)], &grid2, &cfg).unwrap();
        assert!(d2.positive_hooks().all(|(i, j)| d2.bbox_weight[d2.index(i, j)]));
    }

    #[test]
    fn no_ground_truth_gives_zero_maps() {
        let maps = encode_targets(&[], &grid16(), &EncoderConfig::default()).unwrap();
        assert_eq!(maps, TargetMaps::empty(grid16(), 3));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let gt = BBox::image(0.0, 0.0, 20.0, 20.0).unwrap();
        let err = encode_targets(&[(gt, 3)], &grid16(), &EncoderConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn smaller_box_owns_overlap() {
        let big = BBox::image(0.0, 0.0, 100.0, 100.0).unwrap();
        let small = BBox::image(30.0, 30.0, 70.0, 70.0).unwrap();
        let maps = encode_targets(&[(big, 0), (small, 1)], &grid16(), &EncoderConfig::default()).unwrap();
        let k = maps.index(6, 6);
        assert_eq!(maps.owner[k], Some(1));
        assert_eq!(maps.class_at(6, 6), Some(1));
        let hw = maps.grid.hooks();
        assert_eq!(maps.cls[k], 0.0);
        assert_eq!(maps.cls[hw + k], 1.0);
    }

    #[test]
    fn zero_offsets_are_degenerate() {
        let grid = grid16();
        assert!(matches!(decode_offsets(3, 4, [0.0; 4], &grid), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn balance_table_counts_occurrences() {
        let t = BatchBalanceTable::from_class_lists(&[vec![0, 1, 1]]).unwrap();
        assert_eq!(t.table[&0], vec![0]);
        assert_eq!(t.table[&1], vec![0, 0]);
        assert!(BatchBalanceTable::from_class_lists(&[]).is_err());
        assert!(BatchBalanceTable::from_class_lists(&[vec![]]).is_err());
    }

    #[test]
    fn balance_sampling_skips_absent_class() {
        let t = BatchBalanceTable::from_class_lists(&[vec![0], vec![2, 2], vec![0, 2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            assert_ne!(t.sample(&mut rng).0, 1);
        }
    }

    #[test]
    fn balance_sampling_uniform_over_classes() {
        let t = BatchBalanceTable::from_class_lists(&[vec![0, 0, 0], vec![1], vec![1, 1]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let zeros = (0..draws).filter(|_| t.sample(&mut rng).0 == 0).count();
        let freq = zeros as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.03, "class-0 frequency {freq}");
    }
}
