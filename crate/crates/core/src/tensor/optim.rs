use rand::Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its momentum state.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub momentum: Vec<T>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let momentum = vec![T::zero(); value.numel()];
        self.params.push(Parameter {
            name: name.into(),
            value,
            momentum,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform fan-in scaled weight, `U(±√(6 / fan_in))`: the ReLU-gain form
    /// of Xavier scaling, which keeps activation variance steady through the
    /// unnormalised ReLU stack.
    pub fn add_fan_in_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: [usize; 4], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape matches buffer");
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    momentum: p.momentum.iter().map(|&m| U::of(m.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `f64::INFINITY` disables clipping.
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One momentum SGD update.
///
/// Gradients are first rescaled so their global L2 norm is at most `clip`,
/// then `v ← momentum·v + (g + weight_decay·w)` and `w ← w − lr·v`.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, cfg: &SgdConfig) -> Result<SgdReport> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::contract(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(cfg.clip > 0.0) {
        return Err(Error::contract(format!("clip must be positive, got {}", cfg.clip)));
    }
    let mut sq = 0.0f64;
    for p in store.iter() {
        let g = p.value.grad().ok_or_else(|| {
            Error::contract(format!("parameter `{}` has no gradient", p.name))
        })?;
        sq += g.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::numeric(format!("gradient norm is {grad_norm}")));
    }
    let clip_scale = if grad_norm > cfg.clip {
        cfg.clip / grad_norm
    } else {
        1.0
    };
    let (scale, mom, wd, lr) = (
        T::of(clip_scale),
        T::of(cfg.momentum),
        T::of(cfg.weight_decay),
        T::of(cfg.lr),
    );
    for p in store.iter_mut() {
        let grad: Vec<T> = p.value.grad().expect("checked above").to_vec();
        let values = p.value.data_mut();
        for ((w, v), g) in values.iter_mut().zip(p.momentum.iter_mut()).zip(grad) {
            *v = mom * *v + (g * scale + wd * *w);
            *w = *w - lr * *v;
        }
        p.value.ensure_finite(&p.name)?;
    }
    Ok(SgdReport {
        grad_norm,
        clip_scale,
    })
}
