//! Four-stage patch discriminator without normalization.
//!
//! Stages at widths `b, 2b, 4b, 4b` (3×3 conv + leaky ReLU; the first three
//! stride 2), then a 3×3 conv to one logit channel at 1/8 resolution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_layout, kaiming, Builder, ParamSet};
use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::losses::Critic;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;
const STAGES: [(usize, usize); 4] = [(1, 2), (2, 2), (4, 2), (4, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub base_width: usize,
    pub leaky_slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            leaky_slope: 0.2,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub params: ParamSet,
}

pub struct DiscPass {
    pub graph: Graph,
    pub input: Var,
    pub logits: Var,
    pub features: Vec<Var>,
    /// Pre-activation value of every leaky ReLU, in stage order.
    pub pre_activations: Vec<Var>,
}

fn init(config: &DiscConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut p = ParamSet::new(seed);
    let mut cin = 3;
    for (i, &(mult, _)) in STAGES.iter().enumerate() {
        let cout = config.base_width * mult;
        let w = format!("d.s{i}.w");
        p.insert(&w, kaiming(&[cout, cin, 3, 3], cin * 9, seed, &w))?;
        p.insert(&format!("d.s{i}.b"), Tensor::zeros(&[cout]))?;
        cin = cout;
    }
    p.insert("d.out.w", kaiming(&[1, cin, 3, 3], cin * 9, seed, "d.out.w"))?;
    p.insert("d.out.b", Tensor::zeros(&[1]))?;
    Ok(p)
}

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init(&config, seed)?,
            config,
        })
    }

    pub fn from_params(config: DiscConfig, params: ParamSet) -> Result<Self> {
        check_layout(&init(&config, params.seed())?, &params)?;
        Ok(Self { config, params })
    }

    pub fn trace(&self, x: &Tensor, trainable: bool) -> Result<DiscPass> {
        let (c, h, w) = x.dims3()?;
        if c != 3 || h < MIN_SIZE || w < MIN_SIZE || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Dimension(format!(
                "discriminator needs 3×H×W with H, W ≥ {MIN_SIZE} and divisible by 8, got {c}×{h}×{w}"
            )));
        }
        let mut b = Builder::new(&self.params, trainable);
        let input = b.graph.input(x.clone());
        let mut h = input;
        let mut features = Vec::with_capacity(STAGES.len());
        let mut pre_activations = Vec::with_capacity(STAGES.len());
        for (i, &(_, stride)) in STAGES.iter().enumerate() {
            let wt = b.param(&format!("d.s{i}.w"))?;
            let bias = b.param(&format!("d.s{i}.b"))?;
            let z = b.graph.conv2d(h, wt, Some(bias), ConvGeom::new(stride, 1, 1))?;
            pre_activations.push(z);
            h = b.graph.leaky_relu(z, self.config.leaky_slope);
            features.push(h);
        }
        let wt = b.param("d.out.w")?;
        let bias = b.param("d.out.b")?;
        let logits = b.graph.conv2d(h, wt, Some(bias), ConvGeom::same(3))?;
        Ok(DiscPass {
            graph: b.into_graph(),
            input,
            logits,
            features,
            pre_activations,
        })
    }

    /// `v · ∇ₓ Σ D(x)` as a differentiable function of the parameters: the
    /// forward tangent of `v` through bias-free convs gated by the (fixed)
    /// leaky-ReLU slopes at `x`.
    pub fn trace_directional(&self, x: &Tensor, v: &Tensor) -> Result<(Graph, Var)> {
        x.ensure_same_shape(v)?;
        let primal = self.trace(x, false)?;
        let slope = self.config.leaky_slope;
        let mut b = Builder::new(&self.params, true);
        let mut t = b.graph.constant(v.clone());
        for (i, &(_, stride)) in STAGES.iter().enumerate() {
            let wt = b.param(&format!("d.s{i}.w"))?;
            let z = b.graph.conv2d(t, wt, None, ConvGeom::new(stride, 1, 1))?;
            let gate = primal.graph.value(primal.pre_activations[i]).map(|p| if p > 0.0 { 1.0 } else { slope });
            t = b.graph.mul_const(z, gate)?;
        }
        let wt = b.param("d.out.w")?;
        let z = b.graph.conv2d(t, wt, None, ConvGeom::same(3))?;
        let h = b.graph.sum(z);
        Ok((b.into_graph(), h))
    }
}

impl Critic for Discriminator {
    fn score_and_input_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let pass = self.trace(x, false)?;
        let logits = pass.graph.value(pass.logits);
        let grads = pass.graph.backward(&[(pass.logits, Tensor::full(logits.shape(), 1.0))])?;
        let g = grads
            .get(pass.input)
            .cloned()
            .ok_or_else(|| Error::Invariant("no gradient reached the discriminator input".into()))?;
        Ok((logits.sum(), g))
    }

    fn directional_param_grads(&self, x: &Tensor, v: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let (graph, h) = self.trace_directional(x, v)?;
        let mut grads = graph.backward(&[(h, Tensor::full(&[1], 1.0))])?.into_named();
        // Biases drop out of the input gradient entirely.
        for (name, t) in self.params.iter() {
            grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
        }
        Ok(grads)
    }
}

/// `(logits, features)` of one image.
pub fn discriminator_forward(x: &Tensor, d: &Discriminator) -> Result<(Tensor, Vec<Tensor>)> {
    let pass = d.trace(x, false)?;
    let feats = pass.features.iter().map(|&f| pass.graph.value(f).clone()).collect();
    Ok((pass.graph.value(pass.logits).clone(), feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_coords};
    use crate::losses::gradient_penalty;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Discriminator {
        Discriminator::new(
            DiscConfig {
                base_width: 4,
                ..DiscConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn shapes() {
        let d = Discriminator::new(DiscConfig::default(), 1).unwrap();
        let x = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let (logits, feats) = discriminator_forward(&x, &d).unwrap();
        assert_eq!(logits.shape(), &[1, 8, 8]);
        assert_eq!(feats.len(), 4);
        assert_eq!(feats[3].shape(), &[64, 8, 8]);
        assert!(discriminator_forward(&Tensor::zeros(&[3, 16, 16]), &d).is_err());
        assert!(DiscConfig { leaky_slope: 1.5, ..DiscConfig::default() }.validate().is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let d = small();
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let (_, g) = d.score_and_input_grad(&x).unwrap();
        let coords: Vec<usize> = (0..40).map(|k| k * 73 % x.len()).collect();
        let rep = grad_check_coords(|p| Ok(d.score_and_input_grad(p)?.0), &g, &x, 1e-6, 1e-5, &coords).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn penalty_matches_finite_difference_norm() {
        let d = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let pen = gradient_penalty(&d, std::slice::from_ref(&x)).unwrap();
        // Full finite-difference estimate of ∇ₓ Σ D.
        let mut fd = Tensor::zeros(x.shape());
        let h = 1e-6;
        let mut probe = x.clone();
        for i in 0..x.len() {
            let o = probe.data()[i];
            probe.data_mut()[i] = o + h;
            let fp = d.score_and_input_grad(&probe).unwrap().0;
            probe.data_mut()[i] = o - h;
            let fm = d.score_and_input_grad(&probe).unwrap().0;
            probe.data_mut()[i] = o;
            fd.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        let norm2 = fd.data().iter().map(|v| v * v).sum::<f64>();
        assert!((pen.value - norm2).abs() / norm2 < 1e-4, "{} vs {norm2}", pen.value);
    }

    #[test]
    fn penalty_parameter_gradients() {
        let d = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let pen = gradient_penalty(&d, &batch).unwrap();
        for (name, t) in d.params.iter() {
            let coords: Vec<usize> = (0..3).map(|_| rng.random_range(0..t.len())).collect();
            let f = |v: &Tensor| -> Result<f64> {
                let mut p = d.params.clone();
                *p.get_mut(name)? = v.clone();
                Ok(gradient_penalty(&Discriminator::from_params(d.config, p)?, &batch)?.value)
            };
            let rep = grad_check_coords(f, &pen.grads[name], t, 1e-6, 1e-4, &coords).unwrap();
            assert!(rep.passed || rep.max_abs_err < 1e-9, "{name}: {rep:?}");
        }
    }

    #[test]
    fn logit_gradients_reach_every_parameter() {
        let d = small();
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let pass = d.trace(&x, true).unwrap();
        let probe = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let grads = pass.graph.backward(&[(pass.logits, probe.clone())]).unwrap().into_named();
        let b = &d.params.get("d.out.b").unwrap();
        let rep = grad_check(
            |v| {
                let mut p = d.params.clone();
                *p.get_mut("d.out.b")? = v.clone();
                let (l, _) = discriminator_forward(&x, &Discriminator::from_params(d.config, p)?)?;
                Ok((l.dot(&probe)?, grads["d.out.b"].clone()))
            },
            b,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed);
        assert_eq!(grads.len(), d.params.len());
    }
}
