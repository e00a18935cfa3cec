//! Fast-Fourier-convolution inpainting generator.
//!
//! Layout (widths for `base_width = b`, `n_down = n`, `C = b·2ⁿ`):
//!
//! | stage      | op                                              | out channels |
//! |------------|-------------------------------------------------|--------------|
//! | input      | `[x⊙(1−M), M]`                                  | 4            |
//! | stem       | 3×3 conv + stage norm + act                     | b            |
//! | down i     | 3×3 stride-2 conv + stage norm + act            | b·2^(i+1)    |
//! | residual r | two FFC layers + skip, split `C·ratio`          | C            |
//! | up i       | 3×3 stride-2 transposed conv + stage norm + act | C/2^(i+1)    |
//! | head       | 3×3 conv + sigmoid                              | 3            |
//!
//! The residual FFC layers normalize unless `norm` is [`NormKind::None`];
//! the stem, down and up stages normalize only under [`NormKind::Instance`]
//! and otherwise carry a conv bias.

use serde::{Deserialize, Serialize};

use super::{add_norm, check_layout, kaiming, Activation, Builder, NormKind, ParamSet};
use crate::autograd::{Graph, Var};
use crate::conv::{ConvGeom, ConvTransposeGeom};
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::Tensor;

const DOWN: ConvGeom = ConvGeom::new(2, 1, 1);
const UP: ConvTransposeGeom = ConvTransposeGeom {
    stride: 2,
    padding: 1,
    output_padding: 1,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfcConfig {
    pub base_width: usize,
    /// Fraction of channels routed through the spectral (global) branch.
    pub global_ratio: f64,
    pub n_down: usize,
    pub n_residual: usize,
    pub n_up: usize,
    pub norm: NormKind,
    pub activation: Activation,
}

impl Default for FfcConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            global_ratio: 0.5,
            n_down: 3,
            n_residual: 3,
            n_up: 3,
            norm: NormKind::InstanceTrunk,
            activation: Activation::Relu,
        }
    }
}

impl FfcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be ≥ 1".into()));
        }
        if self.n_down != self.n_up {
            return Err(Error::Config(format!(
                "n_down ({}) must equal n_up ({})",
                self.n_down, self.n_up
            )));
        }
        if !(self.global_ratio > 0.0 && self.global_ratio < 1.0) {
            return Err(Error::Config(format!(
                "global_ratio must lie in (0, 1), got {}",
                self.global_ratio
            )));
        }
        for i in 0..=self.n_down {
            let width = self.base_width << i;
            let g = width as f64 * self.global_ratio;
            if (g - g.round()).abs() > 1e-9 || g.round() < 1.0 || g.round() as usize >= width {
                return Err(Error::Config(format!(
                    "width {width} × ratio {} does not give a whole, non-empty global split",
                    self.global_ratio
                )));
            }
        }
        Ok(())
    }

    /// Channels at the residual bottleneck.
    pub fn bottleneck(&self) -> usize {
        self.base_width << self.n_down
    }

    /// Normalization inside the residual FFC blocks.
    pub fn trunk_norm(&self) -> NormKind {
        match self.norm {
            NormKind::None => NormKind::None,
            NormKind::Instance | NormKind::InstanceTrunk => NormKind::Instance,
        }
    }

    /// Normalization of the stem, downsampling and upsampling stages.
    pub fn stage_norm(&self) -> NormKind {
        match self.norm {
            NormKind::Instance => NormKind::Instance,
            NormKind::InstanceTrunk | NormKind::None => NormKind::None,
        }
    }

    /// `(local, global)` channel counts at the bottleneck.
    pub fn split(&self) -> (usize, usize) {
        let c = self.bottleneck();
        let g = (c as f64 * self.global_ratio).round() as usize;
        (c - g, g)
    }
}

fn add_ffc_layer(
    p: &mut ParamSet,
    prefix: &str,
    (cl, cg): (usize, usize),
    norm: NormKind,
    seed: u64,
) -> Result<()> {
    let mut conv = |name: &str, cout: usize, cin: usize| -> Result<()> {
        if cout == 0 || cin == 0 {
            return Ok(());
        }
        let n = format!("{prefix}.{name}.w");
        p.insert(&n, kaiming(&[cout, cin, 3, 3], cin * 9, seed, &n))
    };
    conv("ll", cl, cl)?;
    conv("gl", cl, cg)?;
    conv("lg", cg, cl)?;
    let normed = norm != NormKind::None;
    if cl > 0 && normed {
        add_norm(p, &format!("{prefix}.norm_l"), cl)?;
    }
    if cg > 0 {
        let n = format!("{prefix}.st.w");
        p.insert(&n, kaiming(&[2 * cg, 2 * cg, 1, 1], 2 * cg, seed, &n))?;
        if normed {
            add_norm(p, &format!("{prefix}.st"), 2 * cg)?;
            add_norm(p, &format!("{prefix}.norm_g"), cg)?;
        } else {
            p.insert(&format!("{prefix}.st.b"), Tensor::zeros(&[2 * cg]))?;
        }
    }
    Ok(())
}

/// Deterministic fan-in-scaled initialization of every generator tensor.
pub fn init_params(config: &FfcConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut p = ParamSet::new(seed);
    let b = config.base_width;
    let conv = |p: &mut ParamSet, name: &str, shape: [usize; 4], fan_in: usize| -> Result<()> {
        let w = format!("{name}.w");
        p.insert(&w, kaiming(&shape, fan_in, seed, &w))?;
        if config.stage_norm() == NormKind::Instance && name != "g.out" {
            return Ok(());
        }
        let bias_len = if name.contains(".up") { shape[1] } else { shape[0] };
        p.insert(&format!("{name}.b"), Tensor::zeros(&[bias_len]))
    };
    conv(&mut p, "g.stem", [b, 4, 3, 3], 4 * 9)?;
    if config.stage_norm() == NormKind::Instance {
        add_norm(&mut p, "g.stem", b)?;
    }
    for i in 0..config.n_down {
        let c = b << i;
        conv(&mut p, &format!("g.down{i}"), [2 * c, c, 3, 3], c * 9)?;
        if config.stage_norm() == NormKind::Instance {
            add_norm(&mut p, &format!("g.down{i}"), 2 * c)?;
        }
    }
    let (cl, cg) = config.split();
    for r in 0..config.n_residual {
        for l in 0..2 {
            add_ffc_layer(&mut p, &format!("g.res{r}.{l}"), (cl, cg), config.trunk_norm(), seed)?;
        }
    }
    for i in 0..config.n_up {
        let cin = config.bottleneck() >> i;
        // Transposed layout is Cin×Cout×K×K; each input pixel fans into Cout·K²/stride² taps.
        conv(&mut p, &format!("g.up{i}"), [cin, cin / 2, 3, 3], cin * 9 / 4)?;
        if config.stage_norm() == NormKind::Instance {
            add_norm(&mut p, &format!("g.up{i}"), cin / 2)?;
        }
    }
    conv(&mut p, "g.out", [3, b, 3, 3], b * 9)?;
    Ok(p)
}

fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

/// Global path: `irfft2(act(norm(conv1×1(rfft2(x)))))` with real and
/// imaginary parts stacked as channels. Parameters under `{prefix}.st`.
pub fn spectral_transform(b: &mut Builder, x: Var, prefix: &str, config: &FfcConfig) -> Result<Var> {
    let (_, h, w) = b.graph.value(x).dims3()?;
    if !is_pow2(h) || !is_pow2(w) {
        return Err(Error::Dimension(format!(
            "spectral transform needs power-of-two dims, got {h}×{w}"
        )));
    }
    let f = b.graph.rfft2(x)?;
    let wt = b.param(&format!("{prefix}.st.w"))?;
    let bias = b.optional_param(&format!("{prefix}.st.b"))?;
    let y = b.graph.conv2d(f, wt, bias, ConvGeom::same(1))?;
    let y = b.norm(y, &format!("{prefix}.st"), config.trunk_norm())?;
    let y = b.activate(y, config.activation);
    b.graph.irfft2(y, w)
}

/// Tensor-in, tensor-out form of [`spectral_transform`].
pub fn spectral_transform_tensor(
    x: &Tensor,
    params: &ParamSet,
    prefix: &str,
    config: &FfcConfig,
) -> Result<Tensor> {
    let mut b = Builder::new(params, false);
    let v = b.graph.constant(x.clone());
    let y = spectral_transform(&mut b, v, prefix, config)?;
    Ok(b.graph.value(y).clone())
}

fn add_opt(g: &mut Graph, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, None) => a,
        (None, b) => b,
    })
}

/// One FFC layer: local→local, global→local and local→global 3×3 convs plus
/// the global→global spectral path, summed per branch, then norm + act.
/// An absent branch (zero channels) is passed as `None`.
pub fn ffc_block(
    b: &mut Builder,
    xl: Option<Var>,
    xg: Option<Var>,
    prefix: &str,
    config: &FfcConfig,
) -> Result<(Option<Var>, Option<Var>)> {
    let same = ConvGeom::same(3);
    let conv = |b: &mut Builder, x: Option<Var>, name: &str| -> Result<Option<Var>> {
        match x {
            Some(x) => {
                let w = b.param(&format!("{prefix}.{name}.w"))?;
                Ok(Some(b.graph.conv2d(x, w, None, same)?))
            }
            None => Ok(None),
        }
    };
    let mut yl = None;
    let mut yg = None;
    if xl.is_some() {
        let ll = conv(b, xl, "ll")?;
        let gl = conv(b, xg, "gl")?;
        yl = add_opt(&mut b.graph, ll, gl)?;
    }
    if let Some(g) = xg {
        let lg = conv(b, xl, "lg")?;
        let gg = spectral_transform(b, g, prefix, config)?;
        yg = add_opt(&mut b.graph, lg, Some(gg))?;
    }
    let finish = |b: &mut Builder, y: Option<Var>, norm: &str| -> Result<Option<Var>> {
        match y {
            Some(y) => {
                let y = b.norm(y, &format!("{prefix}.{norm}"), config.trunk_norm())?;
                Ok(Some(b.activate(y, config.activation)))
            }
            None => Ok(None),
        }
    };
    let yl = finish(b, yl, "norm_l")?;
    let yg = finish(b, yg, "norm_g")?;
    Ok((yl, yg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: FfcConfig,
    pub params: ParamSet,
}

pub struct GeneratorPass {
    pub graph: Graph,
    pub output: Var,
}

impl Generator {
    pub fn new(config: FfcConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&config, seed)?,
            config,
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: FfcConfig, params: ParamSet) -> Result<Self> {
        let reference = init_params(&config, params.seed())?;
        check_layout(&reference, &params)?;
        Ok(Self { config, params })
    }

    pub fn check_input(&self, x: &Tensor, m: &Mask) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        if c != 3 {
            return Err(Error::Dimension(format!("generator expects 3 channels, got {c}")));
        }
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape {
                expected: vec![h, w],
                actual: vec![m.height(), m.width()],
            });
        }
        let f = 1 << self.config.n_down;
        if h % f != 0 || w % f != 0 || !is_pow2(h / f) || !is_pow2(w / f) {
            return Err(Error::Dimension(format!(
                "{h}×{w} is not divisible by {f} into a power-of-two bottleneck"
            )));
        }
        Ok(())
    }

    /// Records a forward pass; `trainable` makes parameters gradient leaves.
    pub fn trace(&self, x: &Tensor, m: &Mask, trainable: bool) -> Result<GeneratorPass> {
        self.check_input(x, m)?;
        let cfg = &self.config;
        let (_, h, w) = x.dims3()?;
        let plane = h * w;
        let mut input = Tensor::zeros(&[4, h, w]);
        let keep = m.keep_weights();
        for c in 0..3 {
            for (k, (o, &v)) in input.channel_mut(c).iter_mut().zip(x.channel(c)).enumerate() {
                *o = v * keep[k];
            }
        }
        for (o, &bit) in input.channel_mut(3).iter_mut().zip(m.bits()) {
            *o = f64::from(bit);
        }
        debug_assert_eq!(input.len(), 4 * plane);

        let mut b = Builder::new(&self.params, trainable);
        let mut x = b.graph.constant(input);
        let stage = |b: &mut Builder, x: Var, name: &str, geom: ConvGeom| -> Result<Var> {
            let wt = b.param(&format!("{name}.w"))?;
            let bias = b.optional_param(&format!("{name}.b"))?;
            let y = b.graph.conv2d(x, wt, bias, geom)?;
            let y = b.norm(y, name, cfg.stage_norm())?;
            Ok(b.activate(y, cfg.activation))
        };
        x = stage(&mut b, x, "g.stem", ConvGeom::same(3))?;
        for i in 0..cfg.n_down {
            x = stage(&mut b, x, &format!("g.down{i}"), DOWN)?;
        }
        let (cl, cg) = cfg.split();
        let mut xl = b.graph.slice_channels(x, 0, cl)?;
        let mut xg = b.graph.slice_channels(x, cl, cg)?;
        for r in 0..cfg.n_residual {
            let (al, ag) = ffc_block(&mut b, Some(xl), Some(xg), &format!("g.res{r}.0"), cfg)?;
            let (bl, bg) = ffc_block(&mut b, al, ag, &format!("g.res{r}.1"), cfg)?;
            xl = b.graph.add(xl, bl.expect("local branch present"))?;
            xg = b.graph.add(xg, bg.expect("global branch present"))?;
        }
        x = b.graph.concat_channels(&[xl, xg])?;
        for i in 0..cfg.n_up {
            let name = format!("g.up{i}");
            let wt = b.param(&format!("{name}.w"))?;
            let bias = b.optional_param(&format!("{name}.b"))?;
            let y = b.graph.conv_transpose2d(x, wt, bias, UP)?;
            let y = b.norm(y, &name, cfg.stage_norm())?;
            x = b.activate(y, cfg.activation);
        }
        let wt = b.param("g.out.w")?;
        let bias = b.param("g.out.b")?;
        let y = b.graph.conv2d(x, wt, Some(bias), ConvGeom::same(3))?;
        let output = b.graph.sigmoid(y);
        Ok(GeneratorPass {
            graph: b.into_graph(),
            output,
        })
    }

    pub fn forward(&self, x: &Tensor, m: &Mask) -> Result<Tensor> {
        let pass = self.trace(x, m, false)?;
        Ok(pass.graph.value(pass.output).clone())
    }
}

/// `x̂ = G([x⊙(1−M), M])`, 3 channels in `[0, 1]`.
pub fn generator_forward(x: &Tensor, m: &Mask, generator: &Generator) -> Result<Tensor> {
    generator.forward(x, m)
}
