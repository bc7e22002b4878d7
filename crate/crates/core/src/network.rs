//! The dual-detector network.
//!
//! ```text
//! image ─ backbone (stride-2 3×3 convs, strides 2..64)
//!   s8 ⊕ up(s16)  → refine → V1 ─ τ1 → logits1 ─ sigmoid → bbox1
//!                              └─ cls head → sigmoid → cls1
//!   s32 ⊕ up(s64) → refine → V2 ─ τ2 ─┐
//!                    logits1 ─ bridge ─┴─ + → sigmoid → bbox2
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::DetectorId;
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Where detector 2's residual term is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualSource {
    /// τ₂ on the high-level feature V₂.
    High,
    /// τ on the low-level feature V₁, brought to stride 32 by a stride-4 conv.
    Low,
}

impl ResidualSource {
    fn as_str(self) -> &'static str {
        match self {
            ResidualSource::High => "high",
            ResidualSource::Low => "low",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub head_channels: usize,
    /// Output channels of the stride-2 stages at strides 2, 4, ..., 64.
    pub backbone_channels: Vec<usize>,
    /// Extra stride-1 3×3 conv + ReLU layers appended to each stage.
    pub stage_depth: Vec<usize>,
    pub input_h: usize,
    pub input_w: usize,
    pub seed: u64,
    pub residual_source: ResidualSource,
    /// Initial probability of the box offsets (bias of the box heads).
    pub bbox_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            head_channels: 64,
            backbone_channels: vec![16, 32, 64, 64, 64, 64],
            stage_depth: vec![0, 1, 1, 1, 1, 0],
            input_h: 128,
            input_w: 128,
            seed: 1,
            residual_source: ResidualSource::High,
            bbox_prior: 0.5,
        }
    }
}

pub const STAGES: usize = 6;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        if self.head_channels < 8 {
            return Err(Error::config("model.head_channels", "must be at least 8"));
        }
        if self.backbone_channels.len() != STAGES || self.backbone_channels.contains(&0) {
            return Err(Error::config("model.backbone_channels", "need six positive entries (strides 2..64)"));
        }
        if self.stage_depth.len() != STAGES {
            return Err(Error::config("model.stage_depth", "need six entries (strides 2..64)"));
        }
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(64) || !self.input_w.is_multiple_of(64) {
            return Err(Error::config("model.input_h", "input size must be a positive multiple of 64"));
        }
        if !(self.bbox_prior > 0.0 && self.bbox_prior < 1.0) {
            return Err(Error::config("model.bbox_prior", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Architecture as ordered `key=value` pairs.
    pub fn to_header(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("num_classes".into(), self.num_classes.to_string()),
            ("head_channels".into(), self.head_channels.to_string()),
            ("backbone_channels".into(), list(&self.backbone_channels)),
            ("stage_depth".into(), list(&self.stage_depth)),
            ("input_h".into(), self.input_h.to_string()),
            ("input_w".into(), self.input_w.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("residual_source".into(), self.residual_source.as_str().into()),
            ("bbox_prior".into(), format!("{:?}", self.bbox_prior)),
        ]
    }

    pub fn from_header(header: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::contract(format!("checkpoint header lacks `{key}`")))
        };
        let bad = |key: &str, v: &str| Error::contract(format!("checkpoint header `{key}={v}` is invalid"));
        let num = |key: &str| -> Result<usize> {
            let v = get(key)?;
            v.parse().map_err(|_| bad(key, v))
        };
        let list = |key: &str| -> Result<Vec<usize>> {
            let v = get(key)?;
            v.split(',').map(|s| s.parse().map_err(|_| bad(key, v))).collect()
        };
        let residual_source = match get("residual_source")? {
            "high" => ResidualSource::High,
            "low" => ResidualSource::Low,
            v => return Err(bad("residual_source", v)),
        };
        let seed = get("seed")?;
        let prior = get("bbox_prior")?;
        let cfg = ModelConfig {
            num_classes: num("num_classes")?,
            head_channels: num("head_channels")?,
            backbone_channels: list("backbone_channels")?,
            stage_depth: list("stage_depth")?,
            input_h: num("input_h")?,
            input_w: num("input_w")?,
            seed: seed.parse().map_err(|_| bad("seed", seed))?,
            residual_source,
            bbox_prior: prior.parse().map_err(|_| bad("bbox_prior", prior))?,
        };
        cfg.validate().map_err(|e| Error::contract(format!("checkpoint architecture: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    transposed: bool,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let w = self
            .store
            .add_fan_in_uniform(format!("{name}.w"), [cout, cin, k, k], cin * k * k, &mut self.rng);
        let b = self.store.add_zeros(format!("{name}.b"), &[cout]);
        Conv {
            w,
            b,
            stride,
            pad,
            transposed: false,
        }
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self
            .store
            .add_fan_in_uniform(format!("{name}.w"), [cin, cout, 1, 1], cin, &mut self.rng);
        let b = self.store.add_zeros(format!("{name}.b"), &[cout]);
        Conv {
            w,
            b,
            stride: 2,
            pad: 0,
            transposed: true,
        }
    }
}

impl Conv {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        if self.transposed {
            tape.deconv2d(x, w, b, self.stride, self.pad)
        } else {
            tape.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// Attention weights `γ = sigmoid(deconv(relu(conv(V))))`, applied as `V ⊙ γ`.
#[derive(Clone, Copy, Debug)]
struct Refine {
    down: Conv,
    up: Conv,
}

#[derive(Clone, Copy, Debug)]
struct Bridge {
    first: Conv,
    second: Conv,
}

#[derive(Clone, Debug)]
struct Fusion {
    fine: Conv,
    coarse: Conv,
    up: Conv,
    refine: Refine,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    stages: Vec<Vec<Conv>>,
    fusion: [Fusion; 2],
    cls_heads: [Conv; 2],
    bbox_heads: [Conv; 2],
    bridge: Bridge,
}

/// Outputs of one detector. Logit-space tensors are kept so the residual
/// composition can be checked from the outside.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput<T> {
    pub detector: DetectorId,
    /// `[N, C, h, w]`, post-sigmoid.
    pub cls: Tensor<T>,
    /// `[N, 4, h, w]`, post-sigmoid offsets.
    pub bbox: Tensor<T>,
    /// Head output `τ(V)` in logit space.
    pub raw_residual: Tensor<T>,
    /// Bridged detector-1 logits; zero for detector 1.
    pub bridged_base: Tensor<T>,
}

/// Tape handles of one detector's outputs.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVars {
    pub cls: Var,
    pub bbox: Var,
    pub raw_residual: Var,
    pub bridged_base: Option<Var>,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = 3;
        for (s, (&ch, &depth)) in cfg.backbone_channels.iter().zip(&cfg.stage_depth).enumerate() {
            let mut layers = vec![b.conv(&format!("backbone.{s}.0"), cin, ch, 3, 2, 1)];
            for d in 0..depth {
                layers.push(b.conv(&format!("backbone.{s}.{}", d + 1), ch, ch, 3, 1, 1));
            }
            stages.push(layers);
            cin = ch;
        }
        let c = cfg.head_channels;
        let chans = &cfg.backbone_channels;
        let mut fusion_for = |name: &str, fine: usize, coarse: usize| Fusion {
            fine: b.conv(&format!("{name}.fine"), chans[fine], c, 1, 1, 0),
            coarse: b.conv(&format!("{name}.coarse"), chans[coarse], c, 1, 1, 0),
            up: b.deconv(&format!("{name}.up"), c, c),
            refine: Refine {
                down: b.conv(&format!("{name}.refine.down"), c, c, 1, 2, 0),
                up: b.deconv(&format!("{name}.refine.up"), c, c),
            },
        };
        // stage index k has stride 2^(k+1)
        let fusion = [fusion_for("fuse1", 2, 3), fusion_for("fuse2", 4, 5)];
        let cls_heads = [
            b.conv("det1.cls", c, cfg.num_classes, 3, 1, 1),
            b.conv("det2.cls", c, cfg.num_classes, 3, 1, 1),
        ];
        let bbox_heads = [
            b.conv("det1.bbox", c, 4, 3, 1, 1),
            match cfg.residual_source {
                ResidualSource::High => b.conv("det2.bbox", c, 4, 3, 1, 1),
                ResidualSource::Low => b.conv("det2.bbox", c, 4, 3, 4, 1),
            },
        ];
        let bridge = Bridge {
            first: b.conv("bridge.0", 4, 4 * c, 1, 2, 0),
            second: b.conv("bridge.1", 4 * c, 4, 1, 2, 0),
        };
        let prior = (cfg.bbox_prior / (1.0 - cfg.bbox_prior)).ln();
        for head in &bbox_heads {
            let bias = &mut store.get_mut(head.b).value;
            bias.data_mut().iter_mut().for_each(|v| *v = T::of(prior));
        }
        Ok(Model {
            cfg,
            store,
            stages,
            fusion,
            cls_heads,
            bbox_heads,
            bridge,
        })
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stages: self.stages.clone(),
            fusion: self.fusion.clone(),
            cls_heads: self.cls_heads,
            bbox_heads: self.bbox_heads,
            bridge: self.bridge,
        }
    }

    fn refine(&self, tape: &mut Tape<T>, r: &Refine, v: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(v).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("refine: odd spatial extent {h}x{w}")));
        }
        let down = r.down.apply(tape, &self.store, v)?;
        let down = tape.relu(down)?;
        let up = r.up.apply(tape, &self.store, down)?;
        let gamma = tape.sigmoid(up)?;
        tape.mul(v, gamma)
    }

    /// Refine module of detector `b` (0 or 1) applied to an arbitrary feature.
    pub fn refine_on(&self, tape: &mut Tape<T>, b: usize, feature: Var) -> Result<Var> {
        self.refine(tape, &self.fusion[b].refine, feature)
    }

    /// Learned stride-4 map from detector-1 logits to detector-2's grid.
    pub fn bbox_bridge(&self, tape: &mut Tape<T>, low_logits: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(low_logits).dims4()?;
        if c != 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("bbox_bridge: input [_, {c}, {h}, {w}] needs 4 channels and extents divisible by 4")));
        }
        let x = self.bridge.first.apply(tape, &self.store, low_logits)?;
        let x = tape.relu(x)?;
        self.bridge.second.apply(tape, &self.store, x)
    }

    fn fuse(&self, tape: &mut Tape<T>, f: &Fusion, fine: Var, coarse: Var) -> Result<Var> {
        let a = f.fine.apply(tape, &self.store, fine)?;
        let c = f.coarse.apply(tape, &self.store, coarse)?;
        let up = f.up.apply(tape, &self.store, c)?;
        let sum = tape.add(a, up)?;
        let v = tape.relu(sum)?;
        self.refine(tape, &f.refine, v)
    }

    /// Record the forward pass of `images` (`[N, 3, H, W]`) on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape<T>, images: Var) -> Result<[DetectorVars; 2]> {
        let (_, ch, h, w) = tape.value(images).dims4()?;
        if ch != 3 || h % 64 != 0 || w % 64 != 0 {
            return Err(Error::shape(format!("forward: input [_, {ch}, {h}, {w}] needs 3 channels and extents divisible by 64")));
        }
        let mut feats = Vec::with_capacity(STAGES);
        let mut x = images;
        for stage in &self.stages {
            for layer in stage {
                x = layer.apply(tape, &self.store, x)?;
                x = tape.relu(x)?;
            }
            feats.push(x);
        }
        let v1 = self.fuse(tape, &self.fusion[0], feats[2], feats[3])?;
        let v2 = self.fuse(tape, &self.fusion[1], feats[4], feats[5])?;

        let cls1 = self.cls_heads[0].apply(tape, &self.store, v1)?;
        let cls1 = tape.sigmoid(cls1)?;
        let logits1 = self.bbox_heads[0].apply(tape, &self.store, v1)?;
        let bbox1 = tape.sigmoid(logits1)?;

        let cls2 = self.cls_heads[1].apply(tape, &self.store, v2)?;
        let cls2 = tape.sigmoid(cls2)?;
        let residual_input = match self.cfg.residual_source {
            ResidualSource::High => v2,
            ResidualSource::Low => v1,
        };
        let tau2 = self.bbox_heads[1].apply(tape, &self.store, residual_input)?;
        let bridged = self.bbox_bridge(tape, logits1)?;
        let logits2 = tape.add(bridged, tau2)?;
        let bbox2 = tape.sigmoid(logits2)?;
        Ok([
            DetectorVars {
                cls: cls1,
                bbox: bbox1,
                raw_residual: logits1,
                bridged_base: None,
            },
            DetectorVars {
                cls: cls2,
                bbox: bbox2,
                raw_residual: tau2,
                bridged_base: Some(bridged),
            },
        ])
    }

    /// Inference forward pass.
    pub fn forward(&self, images: &Tensor<T>, threads: usize) -> Result<[DetectorOutput<T>; 2]> {
        let mut tape = Tape::inference().with_threads(threads);
        let x = tape.constant(images.clone());
        let vars = self.forward_vars(&mut tape, x)?;
        Ok([0, 1].map(|b| collect(&tape, vars[b], DetectorId::ALL[b])))
    }
}

/// Copy a detector's outputs off the tape.
pub fn collect<T: Element>(tape: &Tape<T>, v: DetectorVars, detector: DetectorId) -> DetectorOutput<T> {
    let residual = tape.value(v.raw_residual).clone();
    let bridged_base = match v.bridged_base {
        Some(b) => tape.value(b).clone(),
        None => Tensor::zeros(residual.shape()),
    };
    DetectorOutput {
        detector,
        cls: tape.value(v.cls).clone(),
        bbox: tape.value(v.bbox).clone(),
        raw_residual: residual,
        bridged_base,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            head_channels: 8,
            backbone_channels: vec![4, 4, 8, 8, 8, 8],
            stage_depth: vec![0; 6],
            input_h: 64,
            input_w: 64,
            ..ModelConfig::default()
        }
    }

    fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * h * w).map(|_| rng.gen::<f32>()).collect();
        Tensor::new(vec![n, 3, h, w], data).unwrap()
    }

    #[test]
    fn output_shapes_follow_strides() {
        let model = Model::<f32>::new(ModelConfig::default()).unwrap();
        let [d1, d2] = model.forward(&random_images(1, 128, 128, 1), 1).unwrap();
        assert_eq!(d1.cls.shape(), &[1, 3, 16, 16]);
        assert_eq!(d1.bbox.shape(), &[1, 4, 16, 16]);
        assert_eq!(d2.cls.shape(), &[1, 3, 4, 4]);
        assert_eq!(d2.bbox.shape(), &[1, 4, 4, 4]);
        for d in [&d1, &d2] {
            assert!(d.cls.data().iter().chain(d.bbox.data()).all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(d1.bridged_base.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_composition_is_exact() {
        let model = Model::<f32>::new(tiny()).unwrap();
        let [_, d2] = model.forward(&random_images(2, 64, 64, 3), 1).unwrap();
        for ((&b, &r), &out) in d2.bridged_base.data().iter().zip(d2.raw_residual.data()).zip(d2.bbox.data()) {
            assert_eq!(crate::tensor::sigmoid(b + r).to_bits(), out.to_bits());
        }
    }

    #[test]
    fn refine_with_zero_parameters_halves() {
        let mut model = Model::<f64>::new(tiny()).unwrap();
        let r = model.fusion[0].refine;
        for id in [r.down.w, r.down.b, r.up.w, r.up.b] {
            model.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let v = Tensor::<f64>::from_f64(vec![1, 8, 4, 6], &(0..192).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let x = tape.constant(v.clone());
        let out = model.refine_on(&mut tape, 0, x).unwrap();
        assert_eq!(tape.value(out).shape(), v.shape());
        for (a, b) in tape.value(out).data().iter().zip(v.data()) {
            assert_eq!(*a, b / 2.0);
        }
        let odd = tape.constant(Tensor::zeros(&[1, 8, 3, 4]));
        assert!(matches!(model.refine_on(&mut tape, 0, odd), Err(Error::Shape(_))));
    }

    #[test]
    fn bridge_shapes_and_zero_parameters() {
        let mut model = Model::<f32>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_images(1, 16, 16, 2).reshape(vec![1, 3, 16, 16]).unwrap());
        assert!(model.bbox_bridge(&mut tape, x).is_err());
        let x = tape.constant(Tensor::full(&[1, 4, 16, 16], 0.7));
        let out = model.bbox_bridge(&mut tape, x).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4, 4, 4]);
        for conv in [model.bridge.first, model.bridge.second] {
            model.store.get_mut(conv.w).value.data_mut().fill(0.0);
        }
        let out = model.bbox_bridge(&mut tape, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_bridge_gives_independent_detector() {
        let mut model = Model::<f32>::new(tiny()).unwrap();
        {
            let conv = model.bridge.second;
            model.store.get_mut(conv.w).value.data_mut().fill(0.0);
        }
        let [_, d2] = model.forward(&random_images(1, 64, 64, 4), 1).unwrap();
        for (&r, &out) in d2.raw_residual.data().iter().zip(d2.bbox.data()) {
            assert_eq!(crate::tensor::sigmoid(r), out);
        }
    }

    #[test]
    fn low_residual_source_has_matching_shapes() {
        let cfg = ModelConfig {
            residual_source: ResidualSource::Low,
            ..tiny()
        };
        let model = Model::<f32>::new(cfg).unwrap();
        let [_, d2] = model.forward(&random_images(1, 64, 64, 5), 1).unwrap();
        assert_eq!(d2.bbox.shape(), &[1, 4, 2, 2]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let model = Model::<f32>::new(tiny()).unwrap();
        assert!(matches!(model.forward(&random_images(1, 96, 64, 1), 1), Err(Error::Shape(_))));
        let mut cfg = tiny();
        cfg.input_w = 100;
        assert!(matches!(Model::<f32>::new(cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn header_roundtrip() {
        let cfg = ModelConfig {
            residual_source: ResidualSource::Low,
            bbox_prior: 0.15,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_header(&cfg.to_header()).unwrap(), cfg);
        let mut header = cfg.to_header();
        header.retain(|(k, _)| k != "seed");
        assert!(matches!(ModelConfig::from_header(&header), Err(Error::Contract(_))));
    }

    #[test]
    fn seeded_forward_is_deterministic() {
        let img = random_images(2, 64, 64, 9);
        let a = Model::<f32>::new(tiny()).unwrap().forward(&img, 1).unwrap();
        let b = Model::<f32>::new(tiny()).unwrap().forward(&img, 2).unwrap();
        assert_eq!(a, b);
    }
}
