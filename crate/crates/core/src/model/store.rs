use std::collections::BTreeMap;

use super::ModelConfig;
use crate::error::{Result, ScnError};
use crate::pyramid::ConvParams;
use crate::resample::bicubic_upscale_kernel;
use crate::tensor::{Element, Fill, Tensor};

/// Named parameters, iterated in lexicographic path order.
#[derive(Clone, Debug)]
pub struct WeightStore<T: Element = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for WeightStore<T> {
    fn default() -> Self {
        WeightStore {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Element> WeightStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| ScnError::config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `{prefix}.weight` with `{prefix}.bias` when present.
    pub fn conv(&self, prefix: &str) -> Result<ConvParams<T>> {
        let weight = self.get(&format!("{prefix}.weight"))?.clone();
        let bias = self.entries.get(&format!("{prefix}.bias")).cloned();
        Ok(ConvParams::new(weight, bias))
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy whose tensors are fresh leaves that record gradients.
    pub fn requiring_grad(&self) -> Self {
        WeightStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.requiring_grad())).collect(),
        }
    }

    /// Accumulated gradients by name; parameters the loss never reached get zeros.
    pub fn gradients(&self) -> BTreeMap<String, Vec<T>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| vec![T::zero(); v.numel()])))
            .collect()
    }

    /// Same names, same dims and bit-identical values.
    pub fn bit_eq(&self, other: &WeightStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.dims() == b.dims()
                    && a.data().iter().zip(b.data()).all(|(x, y)| {
                        x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits)
                    })
            })
    }
}

/// Sum of element counts over every parameter tensor.
pub fn param_count<T: Element>(store: &WeightStore<T>) -> usize {
    store.entries.values().map(Tensor::numel).sum()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-tensor seed, independent of how many other tensors exist.
pub(crate) fn tensor_seed(seed: u64, name: &str) -> u64 {
    crate::seed::mix(seed, name_hash(name))
}

/// He-normal weight `(c_out, c_in, k, k)` and, when requested, a zero bias.
pub(crate) fn init_conv(
    store: &mut WeightStore<f32>,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    ksize: usize,
    bias: bool,
    seed: u64,
) -> Result<()> {
    let name = format!("{prefix}.weight");
    let fill = Fill::HeNormal {
        fan_in: c_in * ksize * ksize,
        seed: tensor_seed(seed, &name),
    };
    store.insert(name, Tensor::create([c_out, c_in, ksize, ksize], fill)?);
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros([c_out, 1, 1, 1]));
    }
    Ok(())
}

/// The output conv starts at zero and the super-resolution skip conv starts
/// as a bicubic upscaler, so a fresh model is an interpolator and the body
/// learns a correction from there.
pub(super) fn init_head_and_tail(cfg: &ModelConfig, seed: u64, store: &mut WeightStore<f32>) -> Result<()> {
    let c = cfg.in_channels;
    init_conv(store, "head", cfg.width, c, 3, true, seed)?;
    let out = c * cfg.task.factor() * cfg.task.factor();
    store.insert("tail.weight", Tensor::zeros([out, cfg.width, 3, 3]));
    store.insert("tail.bias", Tensor::zeros([out, 1, 1, 1]));
    if cfg.task.is_sr() {
        store.insert("skip.weight", bicubic_upscale_kernel(c, cfg.task.factor())?);
        store.insert("skip.bias", Tensor::zeros([out, 1, 1, 1]));
    }
    Ok(())
}
