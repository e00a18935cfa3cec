//! Frozen feature extractor for the perceptual loss and proxy-FID.
//!
//! Four bias-free 3×3 conv + ReLU stages at widths 16/32/64/64: the first two
//! stride 2, the last two dilated by 2 and 4 to widen the receptive field.

use super::{kaiming, Builder, ParamSet};
use crate::autograd::{Graph, Var};
use crate::conv::{conv2d, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;
pub const EXTRACTOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];
const GEOMS: [ConvGeom; 4] = [
    ConvGeom::new(2, 1, 1),
    ConvGeom::new(2, 1, 1),
    ConvGeom::new(1, 2, 2),
    ConvGeom::new(1, 4, 4),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    params: ParamSet,
}

pub struct ExtractorPass {
    pub graph: Graph,
    pub input: Var,
    pub stage_outputs: Vec<Var>,
}

fn name(i: usize) -> String {
    format!("e.s{i}.w")
}

impl Default for Extractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

impl Extractor {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamSet::new(seed);
        let mut cin = 3;
        for (i, &cout) in EXTRACTOR_WIDTHS.iter().enumerate() {
            let n = name(i);
            params
                .insert(&n, kaiming(&[cout, cin, 3, 3], cin * 9, seed, &n))
                .expect("stage names are unique");
            cin = cout;
        }
        Self { params }
    }

    /// Same architecture with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            params: self.params.map(|_, t| t.scale(factor)),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn check(x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        if c != 3 || h < 4 || w < 4 {
            return Err(Error::Dimension(format!(
                "extractor expects 3×H×W with H, W ≥ 4, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Stage outputs, computed without recording a graph.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Self::check(x)?;
        let mut out = Vec::with_capacity(GEOMS.len());
        let mut h = x.clone();
        for (i, &geom) in GEOMS.iter().enumerate() {
            h = conv2d(&h, self.params.get(&name(i))?, None, geom)?.map(|v| v.max(0.0));
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Records the pass with `x` as a differentiable input and frozen weights.
    pub fn trace(&self, x: &Tensor) -> Result<ExtractorPass> {
        Self::check(x)?;
        let mut b = Builder::new(&self.params, false);
        let input = b.graph.input(x.clone());
        let mut h = input;
        let mut stage_outputs = Vec::with_capacity(GEOMS.len());
        for (i, &geom) in GEOMS.iter().enumerate() {
            let w = b.param(&name(i))?;
            let z = b.graph.conv2d(h, w, None, geom)?;
            h = b.graph.relu(z);
            stage_outputs.push(h);
        }
        Ok(ExtractorPass {
            graph: b.into_graph(),
            input,
            stage_outputs,
        })
    }

    /// Global average of the last stage: one 64-dim vector per image.
    pub fn pooled(&self, x: &Tensor) -> Result<Vec<f64>> {
        let feats = self.features(x)?;
        let last = feats.last().expect("four stages");
        let (c, _, _) = last.dims3()?;
        Ok((0..c)
            .map(|ch| {
                let p = last.channel(ch);
                p.iter().sum::<f64>() / p.len() as f64
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::losses::perceptual;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
            Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn fixed_and_frozen() {
        let e = Extractor::default();
        assert_eq!(e, Extractor::default());
        let f = e.features(&pair(1).0).unwrap();
        let shapes: Vec<&[usize]> = f.iter().map(Tensor::shape).collect();
        assert_eq!(shapes, vec![&[16, 8, 8][..], &[32, 4, 4], &[64, 4, 4], &[64, 4, 4]]);
        assert_eq!(e.pooled(&pair(1).0).unwrap().len(), 64);
        assert!(e.features(&Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn perceptual_cases() {
        let e = Extractor::default();
        let (x, y) = pair(2);
        assert_eq!(perceptual(&x, &x, &e).unwrap().value, 0.0);
        assert_eq!(perceptual(&x, &y, &e.scaled(0.0)).unwrap().value, 0.0);
        let fx = e.features(&x).unwrap();
        let fy = e.features(&y).unwrap();
        let oracle = fx
            .iter()
            .zip(&fy)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
            .sum::<f64>()
            / 4.0;
        assert!((perceptual(&x, &y, &e).unwrap().value - oracle).abs() < 1e-12);
        assert!(perceptual(&Tensor::zeros(&[1, 16, 16]), &Tensor::zeros(&[1, 16, 16]), &e).is_err());
    }

    #[test]
    fn perceptual_gradient() {
        let e = Extractor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let rep = grad_check(
            |p| {
                let l = perceptual(&x, p, &e)?;
                Ok((l.value, l.grads["xhat"].clone()))
            },
            &y,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
