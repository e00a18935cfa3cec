//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse from one or more seeded outputs. Leaves created
//! with [`Graph::param`] are reported by name so optimizers can pick them up.

use std::collections::BTreeMap;

use crate::conv::{self, ConvGeom, ConvTransposeGeom};
use crate::error::{Error, Result};
use crate::fft::{self, ComplexGrid};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTransposeGeom,
    },
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Rfft2(Var),
    Irfft2 {
        x: Var,
        width: usize,
    },
    Sum(Var),
    DotConst(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf (no gradient is propagated into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An unnamed leaf whose gradient is wanted.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let value = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTransposeGeom,
    ) -> Result<Var> {
        let value =
            conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a tensor treated as a constant.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    /// Per-channel normalization over the spatial grid with affine `gamma`, `beta` (each `[C]`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let (c, h, w) = xt.dims3()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::Dimension(format!(
                "norm affine length {}/{} does not match {c} channels",
                g.len(),
                b.len()
            )));
        }
        let n = (h * w) as f64;
        let mut normalized = xt.clone();
        let mut value = xt.clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = xt.channel(ch);
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            let (gc, bc) = (g.data()[ch], b.data()[ch]);
            for (nv, (yv, &xv)) in normalized
                .channel_mut(ch)
                .iter_mut()
                .zip(value.channel_mut(ch).iter_mut().zip(plane))
            {
                *nv = (xv - mean) * inv;
                *yv = gc * *nv + bc;
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.needs(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Dimension(format!(
                    "cannot concat {ph}×{pw} with {h}×{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[channels, h, w], data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if start + len > c || len == 0 {
            return Err(Error::Dimension(format!(
                "channel slice {start}..{} out of {c}",
                start + len
            )));
        }
        let data = self.value(x).data()[start * h * w..(start + len) * h * w].to_vec();
        let value = Tensor::from_vec(&[len, h, w], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Channel-wise half-spectrum FFT: `C×H×W → 2C×H×(W/2+1)` with channel
    /// `2c` holding the real part and `2c+1` the imaginary part of channel `c`.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = fft::half_width(w);
        let mut out = Tensor::zeros(&[2 * c, h, hw]);
        for ch in 0..c {
            let g = fft::rfft2(self.value(x).channel(ch), h, w)?;
            out.channel_mut(2 * ch).copy_from_slice(g.re());
            out.channel_mut(2 * ch + 1).copy_from_slice(g.im());
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Rfft2(x), rg))
    }

    /// Inverse of [`Graph::rfft2`] back to `C×H×width`.
    pub fn irfft2(&mut self, x: Var, width: usize) -> Result<Var> {
        let (c2, h, hw) = self.value(x).dims3()?;
        if c2 % 2 != 0 || hw != fft::half_width(width) {
            return Err(Error::Dimension(format!(
                "irfft2 input {c2}×{h}×{hw} is not a stacked half spectrum of width {width}"
            )));
        }
        let c = c2 / 2;
        let mut out = Tensor::zeros(&[c, h, width]);
        for ch in 0..c {
            let t = self.value(x);
            let grid = ComplexGrid::new(
                h,
                hw,
                t.channel(2 * ch).to_vec(),
                t.channel(2 * ch + 1).to_vec(),
            )?;
            out.channel_mut(ch).copy_from_slice(&fft::irfft2(&grid, width)?);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Irfft2 { x, width }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::full(&[1], self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// `Σ a·c` with `c` constant.
    pub fn dot_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let value = Tensor::full(&[1], self.value(a).dot(&c)?);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::DotConst(a, c), rg))
    }

    /// Propagates the seeded output gradients back through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            self.value(*v).ensure_same_shape(g)?;
            accumulate(&mut grads, *v, g.clone())?;
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut named = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (&node.name, g) {
                named
                    .entry(name.clone())
                    .and_modify(|acc: &mut Tensor| acc.add_assign(g).expect("same param shape"))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients { grads, named })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), g, *geom, self.rg(*x))?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx)?;
                }
                accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    accumulate(grads, *b, db)?;
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.rg(*x),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx)?;
                }
                accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::MulConst(a, c) => accumulate(grads, *a, g.zip_map(c, |x, y| x * y)?)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (c, h, w) = normalized.dims3()?;
                let n = (h * w) as f64;
                let gam = self.value(*gamma);
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let gy = g.channel(ch);
                    let xh = normalized.channel(ch);
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    dgamma.data_mut()[ch] = sum_gx;
                    dbeta.data_mut()[ch] = sum_g;
                    let k = gam.data()[ch] * inv_std[ch] / n;
                    for ((d, &gv), &xv) in dx.channel_mut(ch).iter_mut().zip(gy).zip(xh) {
                        *d = k * (n * gv - sum_g - xv * sum_gx);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gamma, dgamma)?;
                accumulate(grads, *beta, dbeta)?;
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *a, d)?;
            }
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                accumulate(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                accumulate(grads, *a, d)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    let piece = Tensor::from_vec(&shape, g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    if self.rg(p) {
                        accumulate(grads, p, piece)?;
                    }
                }
            }
            Op::Slice { x, start } => {
                let src = self.value(*x);
                let (_, h, w) = src.dims3()?;
                let mut d = Tensor::zeros(src.shape());
                let off = start * h * w;
                d.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, d)?;
            }
            Op::Rfft2(x) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = fft::half_width(w);
                let mut d = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let grid = ComplexGrid::new(
                        h,
                        hw,
                        g.channel(2 * ch).to_vec(),
                        g.channel(2 * ch + 1).to_vec(),
                    )?;
                    d.channel_mut(ch).copy_from_slice(&fft::rfft2_adjoint(&grid, w)?);
                }
                accumulate(grads, *x, d)?;
            }
            Op::Irfft2 { x, width } => {
                let (c, h, _) = g.dims3()?;
                let mut d = Tensor::zeros(self.value(*x).shape());
                for ch in 0..c {
                    let adj = fft::irfft2_adjoint(g.channel(ch), h, *width)?;
                    d.channel_mut(2 * ch).copy_from_slice(adj.re());
                    d.channel_mut(2 * ch + 1).copy_from_slice(adj.im());
                }
                accumulate(grads, *x, d)?;
            }
            Op::Sum(a) => {
                let d = Tensor::full(self.value(*a).shape(), g.data()[0]);
                accumulate(grads, *a, d)?;
            }
            Op::DotConst(a, c) => accumulate(grads, *a, c.scale(g.data()[0]))?,
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a node, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of named parameter leaves.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar head `Σ c·f(x)` for checking one op at a time.
    fn check_op(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let out = build(&mut g, v).unwrap();
            Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut rng)
        };
        let f = |t: &Tensor| -> Result<(f64, Tensor)> {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let out = build(&mut g, v)?;
            let head = g.dot_const(out, probe.clone())?;
            let grads = g.backward(&[(head, Tensor::full(&[1], 1.0))])?;
            Ok((g.value(head).data()[0], grads.get(v).unwrap().clone()))
        };
        let r = grad_check(f, x, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_and_transpose_gradients() {
        let k = random(&[3, 2, 3, 3], 1);
        let b = random(&[3], 2);
        check_op(&random(&[2, 6, 6], 3), |g, x| {
            let w = g.param("w", &k);
            let bb = g.param("b", &b);
            g.conv2d(x, w, Some(bb), ConvGeom::new(2, 1, 1))
        });
        let kt = random(&[2, 3, 3, 3], 4);
        check_op(&random(&[2, 4, 4], 5), |g, x| {
            let w = g.param("w", &kt);
            g.conv_transpose2d(
                x,
                w,
                None,
                ConvTransposeGeom {
                    stride: 2,
                    padding: 1,
                    output_padding: 1,
                },
            )
        });
    }

    #[test]
    fn weight_gradients_through_conv() {
        let x = random(&[2, 5, 5], 6);
        let probe = random(&[3, 5, 5], 7);
        let f = |k: &Tensor| -> Result<(f64, Tensor)> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w = g.param("w", k);
            let y = g.conv2d(xv, w, None, ConvGeom::new(1, 2, 2))?;
            let y = g.leaky_relu(y, 0.2);
            let head = g.dot_const(y, probe.clone())?;
            let grads = g.backward(&[(head, Tensor::full(&[1], 1.0))])?;
            Ok((g.value(head).data()[0], grads.named()["w"].clone()))
        };
        assert!(grad_check(f, &random(&[3, 2, 3, 3], 8), 1e-5, 1e-6).unwrap().passed);
    }

    #[test]
    fn norm_and_activation_gradients() {
        let gamma = random(&[3], 10);
        let beta = random(&[3], 11);
        check_op(&random(&[3, 4, 5], 12), |g, x| {
            let ga = g.param("g", &gamma);
            let be = g.param("b", &beta);
            let y = g.instance_norm(x, ga, be)?;
            Ok(g.sigmoid(y))
        });
        check_op(&random(&[2, 3, 3], 13), |g, x| {
            let y = g.relu(x);
            let z = g.scale(x, 0.5);
            g.add(y, z)
        });
    }

    #[test]
    fn spectral_gradients() {
        check_op(&random(&[2, 4, 8], 14), |g, x| {
            let f = g.rfft2(x)?;
            let f = g.mul_const(f, random(&[4, 4, 5], 15))?;
            g.irfft2(f, 8)
        });
    }

    #[test]
    fn concat_and_slice_gradients() {
        check_op(&random(&[3, 3, 3], 16), |g, x| {
            let a = g.slice_channels(x, 0, 1)?;
            let b = g.slice_channels(x, 1, 2)?;
            let s = g.sigmoid(b);
            g.concat_channels(&[s, a])
        });
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::full(&[2], 3.0));
        let q = g.param("p", &Tensor::full(&[2], 3.0));
        let s = g.add(p, q).unwrap();
        let head = g.sum(s);
        let grads = g.backward(&[(head, Tensor::full(&[1], 1.0))]).unwrap();
        assert_eq!(grads.named()["p"].data(), &[2.0, 2.0]);
    }
}
