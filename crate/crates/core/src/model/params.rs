//! Model configuration and the flat parameter store.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::envcore::{token_width, Suite};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::store::TensorBlob;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Feed-forward width; 4 x d_model by default.
    pub d_ff: usize,
    pub dropout: f64,
    pub action_count: usize,
    pub token_width: usize,
}

impl ModelConfig {
    /// The reference architecture: 3 layers, 4 heads, 512 wide.
    pub fn for_suite(suite: Suite) -> Self {
        Self::sized(suite, 3, 4, 512)
    }

    pub fn sized(suite: Suite, layers: usize, heads: usize, d_model: usize) -> Self {
        ModelConfig {
            layers,
            heads,
            d_model,
            d_ff: 4 * d_model,
            dropout: 0.0,
            action_count: suite.action_count(),
            token_width: token_width(suite),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid("d_model must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Weight matrices get N(0, 0.02); biases zero; layer-norm gains one.
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zero,
    One,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every named tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_fc: Slot,
    pub b_fc: Slot,
    pub w_proj: Slot,
    pub b_proj: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub w_in: Slot,
    pub b_in: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
    pub total: usize,
    names: Vec<(String, Slot)>,
}

struct Alloc {
    next: usize,
    names: Vec<(String, Slot)>,
}

impl Alloc {
    fn slot(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        let s = Slot {
            offset: self.next,
            rows,
            cols,
            init,
        };
        self.next += rows * cols;
        self.names.push((name, s));
        s
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut al = Alloc {
            next: 0,
            names: Vec::new(),
        };
        let w_in = al.slot("embed.w".into(), d, cfg.token_width, Init::Normal);
        let b_in = al.slot("embed.b".into(), 1, d, Init::Zero);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerSlots {
                    ln1_g: al.slot(format!("{p}.ln1.g"), 1, d, Init::One),
                    ln1_b: al.slot(format!("{p}.ln1.b"), 1, d, Init::Zero),
                    w_qkv: al.slot(format!("{p}.attn.w_qkv"), 3 * d, d, Init::Normal),
                    b_qkv: al.slot(format!("{p}.attn.b_qkv"), 1, 3 * d, Init::Zero),
                    w_o: al.slot(format!("{p}.attn.w_o"), d, d, Init::Normal),
                    b_o: al.slot(format!("{p}.attn.b_o"), 1, d, Init::Zero),
                    ln2_g: al.slot(format!("{p}.ln2.g"), 1, d, Init::One),
                    ln2_b: al.slot(format!("{p}.ln2.b"), 1, d, Init::Zero),
                    w_fc: al.slot(format!("{p}.mlp.w_fc"), cfg.d_ff, d, Init::Normal),
                    b_fc: al.slot(format!("{p}.mlp.b_fc"), 1, cfg.d_ff, Init::Zero),
                    w_proj: al.slot(format!("{p}.mlp.w_proj"), d, cfg.d_ff, Init::Normal),
                    b_proj: al.slot(format!("{p}.mlp.b_proj"), 1, d, Init::Zero),
                }
            })
            .collect();
        let lnf_g = al.slot("ln_f.g".into(), 1, d, Init::One);
        let lnf_b = al.slot("ln_f.b".into(), 1, d, Init::Zero);
        let w_out = al.slot("head.w".into(), cfg.action_count, d, Init::Normal);
        let b_out = al.slot("head.b".into(), 1, cfg.action_count, Init::Zero);
        ParamLayout {
            w_in,
            b_in,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: al.next,
            names: al.names,
        }
    }

    pub fn named(&self) -> &[(String, Slot)] {
        &self.names
    }

    /// Name of the parameter group owning flat index `i`.
    pub fn group_of(&self, i: usize) -> Option<&str> {
        self.names
            .iter()
            .find(|(_, s)| s.range().contains(&i))
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = ParamLayout::new(config);
        let data = vec![T::zero(); layout.total];
        ModelParams {
            config: config.clone(),
            layout,
            data,
        }
    }

    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        for (_, slot) in p.layout.named().to_vec() {
            for v in &mut p.data[slot.range()] {
                *v = match slot.init {
                    Init::Normal => T::lit(normal.sample(rng)),
                    Init::Zero => T::zero(),
                    Init::One => T::one(),
                };
            }
        }
        Ok(p)
    }

    pub fn slice(&self, s: Slot) -> &[T] {
        &self.data[s.range()]
    }

    pub fn slice_mut(&mut self, s: Slot) -> &mut [T] {
        &mut self.data[s.range()]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl ModelParams<f32> {
    pub fn to_blob(&self, prefix: &str, blob: &mut TensorBlob) {
        for (name, slot) in self.layout.named() {
            blob.insert(
                format!("{prefix}{name}"),
                vec![slot.rows, slot.cols],
                self.data[slot.range()].to_vec(),
            );
        }
    }

    pub fn from_blob(config: &ModelConfig, prefix: &str, blob: &TensorBlob) -> Result<Self> {
        let mut p = Self::zeros(config);
        let mut entries: BTreeMap<&str, Slot> = BTreeMap::new();
        for (name, slot) in p.layout.named() {
            entries.insert(name.as_str(), *slot);
        }
        for (name, slot) in entries {
            let t = blob.get(&format!("{prefix}{name}"))?;
            if t.shape != [slot.rows, slot.cols] {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape,
                    [slot.rows, slot.cols]
                )));
            }
            p.data[slot.range()].copy_from_slice(&t.data);
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn param_count_is_pure_function_of_config() {
        let c = ModelConfig::for_suite(Suite::Gridworld);
        let d = 512;
        let per_layer = 2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + 4 * d * d + 4 * d + 4 * d * d + d;
        let expected = d * 26 + d + 3 * per_layer + 2 * d + 5 * d + 5;
        assert_eq!(c.param_count(), expected);
        assert_eq!(c.param_count(), ModelConfig::for_suite(Suite::Gridworld).param_count());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::sized(Suite::Tree, 1, 3, 8);
        assert!(c.validate().is_err());
        c.heads = 2;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn init_and_blob_roundtrip() {
        let c = ModelConfig::sized(Suite::Tree, 2, 2, 8);
        let p = ModelParams::<f32>::init(&c, &mut substream(0, "init", 0)).unwrap();
        assert!(p.all_finite());
        assert!(p.slice(p.layout.layers[0].ln1_g).iter().all(|&v| v == 1.0));
        assert!(p.slice(p.layout.b_out).iter().all(|&v| v == 0.0));
        let mut blob = TensorBlob::default();
        p.to_blob("", &mut blob);
        let back = ModelParams::from_blob(&c, "", &TensorBlob::from_bytes(&blob.to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back.data, p.data);
    }
}
