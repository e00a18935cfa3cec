//! Generator, patch discriminator and frozen feature extractor.
//!
//! Networks run one sample at a time on `C×H×W` tensors. Parameters live in a
//! [`ParamSet`]; a forward pass is recorded on an autograd [`Graph`] through a
//! [`Builder`], which turns each parameter into a named leaf on first use.

mod discriminator;
mod extractor;
mod ffc;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use discriminator::{discriminator_forward, DiscConfig, DiscPass, Discriminator};
pub use extractor::{Extractor, ExtractorPass, EXTRACTOR_SEED, EXTRACTOR_WIDTHS};
pub use ffc::{
    ffc_block, generator_forward, init_params, spectral_transform, spectral_transform_tensor,
    FfcConfig, Generator, GeneratorPass,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    /// Per-channel spatial normalization with learned affine.
    Instance,
    /// [`NormKind::Instance`] inside the residual FFC blocks only; the stem,
    /// downsampling and upsampling stages use biases instead, so per-image
    /// color statistics reach the output through the residual skips.
    InstanceTrunk,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Named parameter tensors plus the seed they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingComponent(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingComponent(format!("parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            seed: self.seed,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }
}

/// Rng for one named tensor: independent of every other tensor's draw.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(crc32fast::hash(name.as_bytes())));
    rng
}

/// He-normal conv weight with `fan_in = shape[1]·kh·kw` (or `shape[0]·kh·kw`
/// for transposed layouts).
pub(crate) fn kaiming(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::normal(shape, std, &mut tensor_rng(seed, name))
}

pub(crate) fn add_norm(p: &mut ParamSet, prefix: &str, channels: usize) -> Result<()> {
    p.insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0))?;
    p.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))
}

/// Records a forward pass, creating one graph leaf per parameter on first use.
pub struct Builder<'a> {
    pub graph: Graph,
    params: &'a ParamSet,
    leaves: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Builder<'a> {
    /// `trainable = false` records parameters as constants.
    pub fn new(params: &'a ParamSet, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            leaves: HashMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?;
        let v = if self.trainable {
            self.graph.param(name, t)
        } else {
            self.graph.constant(t.clone())
        };
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Like [`Builder::param`] but `None` when the set has no such tensor.
    pub fn optional_param(&mut self, name: &str) -> Result<Option<Var>> {
        if self.params.contains(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn norm(&mut self, x: Var, prefix: &str, kind: NormKind) -> Result<Var> {
        match kind {
            NormKind::Instance | NormKind::InstanceTrunk => {
                let g = self.param(&format!("{prefix}.gamma"))?;
                let b = self.param(&format!("{prefix}.beta"))?;
                self.graph.instance_norm(x, g, b)
            }
            NormKind::None => Ok(x),
        }
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.graph.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

pub(crate) fn check_layout(reference: &ParamSet, params: &ParamSet) -> Result<()> {
    if reference.len() != params.len() {
        return Err(Error::Invariant(format!(
            "expected {} parameter tensors, found {}",
            reference.len(),
            params.len()
        )));
    }
    for (name, t) in reference.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Shape {
                expected: t.shape().to_vec(),
                actual: got.shape().to_vec(),
            });
        }
    }
    Ok(())
}
