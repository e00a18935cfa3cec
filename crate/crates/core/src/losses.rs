//! Spatial-domain inpainting losses with analytic gradients.
//!
//! Every loss returns a [`LossValue`]: the scalar plus gradients keyed by
//! input name (`"xhat"`, `"d_fake"`, ...). Pixel losses use mean reduction
//! over contributing elements; total variation is a plain sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::model::Extractor;
use crate::tensor::Tensor;

/// Lower clamp applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda_adv: f64,
    pub lambda_pl: f64,
    pub lambda_fm: f64,
    /// Gradient-penalty weight.
    pub lambda_p: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Focal exponent of the frequency weights.
    pub alpha_ffl: f64,
    /// Total-variation exponent.
    pub beta_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda_adv: 10.0,
            lambda_pl: 100.0,
            lambda_fm: 30.0,
            lambda_p: 0.001,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            alpha_ffl: 1.0,
            beta_tv: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda_adv,
            self.lambda_pl,
            self.lambda_fm,
            self.lambda_p,
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.alpha_ffl,
            self.beta_tv,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl LossValue {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, name: &str, grad: Tensor) -> Self {
        self.grads.insert(name.to_string(), grad);
        self
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// `Σ wᵢ·Lᵢ` with gradients combined key-by-key.
    pub fn weighted_sum(terms: &[(f64, &LossValue)]) -> Result<LossValue> {
        let mut out = LossValue::new(0.0);
        for (w, term) in terms {
            out.value += w * term.value;
            for (name, g) in &term.grads {
                match out.grads.get_mut(name) {
                    Some(acc) => acc.axpy(*w, g)?,
                    None => {
                        out.grads.insert(name.clone(), g.scale(*w));
                    }
                }
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        for (name, g) in &self.grads {
            g.ensure_finite(&format!("gradient {name}"))?;
        }
        Ok(())
    }
}

fn check_mask(image: &Tensor, m: &Mask) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if (m.height(), m.width()) != (h, w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            actual: vec![m.height(), m.width()],
        });
    }
    Ok((c, h, w))
}

/// Mean absolute error over channels × known pixels.
pub fn l1_masked(x: &Tensor, xhat: &Tensor, m: &Mask) -> Result<LossValue> {
    x.ensure_same_shape(xhat)?;
    let (c, h, w) = check_mask(x, m)?;
    let plane = h * w;
    let keep = m.keep_weights();
    let count = (c as f64 * keep.iter().sum::<f64>()).max(1.0);
    let mut value = 0.0;
    let mut grad = Tensor::zeros(x.shape());
    for idx in 0..c * plane {
        let k = keep[idx % plane];
        if k == 0.0 {
            continue;
        }
        let d = x.data()[idx] - xhat.data()[idx];
        value += d.abs();
        grad.data_mut()[idx] = -d.signum() / count * (d != 0.0) as u8 as f64;
    }
    Ok(LossValue::new(value / count).with_grad("xhat", grad))
}

/// Mean over extractor stages of the mean squared feature difference.
pub fn perceptual(x: &Tensor, xhat: &Tensor, extractor: &Extractor) -> Result<LossValue> {
    x.ensure_same_shape(xhat)?;
    let real = extractor.features(x)?;
    let pass = extractor.trace(xhat)?;
    let stages = real.len() as f64;
    let mut value = 0.0;
    let mut seeds = Vec::with_capacity(real.len());
    for (r, &var) in real.iter().zip(&pass.stage_outputs) {
        let f = pass.graph.value(var);
        let n = f.len() as f64;
        let diff = f.zip_map(r, |a, b| a - b)?;
        value += diff.data().iter().map(|d| d * d).sum::<f64>() / n / stages;
        seeds.push((var, diff.scale(2.0 / (n * stages))));
    }
    let grads = pass.graph.backward(&seeds)?;
    let g = grads
        .get(pass.input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(xhat.shape()));
    Ok(LossValue::new(value).with_grad("xhat", g))
}

/// `ln σ(z)` clamped at `ln LOG_FLOOR`, and its derivative.
fn log_sigmoid(z: f64) -> (f64, f64) {
    let s = sigmoid(z);
    if s < LOG_FLOOR {
        (LOG_FLOOR.ln(), 0.0)
    } else {
        let v = if z >= 0.0 { -(-z).exp().ln_1p() } else { z - z.exp().ln_1p() };
        (v, 1.0 - s)
    }
}

/// `ln(1 − σ(z))` clamped, and its derivative.
fn log_one_minus_sigmoid(z: f64) -> (f64, f64) {
    let (v, d) = log_sigmoid(-z);
    (v, -d)
}

/// Discriminator loss where only hole cells of a fake map count as fake:
/// `−mean ln σ(d_real) − mean[ln σ(d_fake)·(1−M)] − mean[ln(1−σ(d_fake))·M]`.
pub fn adversarial_d(d_real: &Tensor, d_fake: &Tensor, m_logit: &Mask) -> Result<LossValue> {
    d_real.ensure_same_shape(d_fake)?;
    check_mask(d_fake, m_logit)?;
    let n_real = d_real.len() as f64;
    let n_fake = d_fake.len() as f64;
    let plane = m_logit.bits().len();
    let mut value = 0.0;
    let mut g_real = Tensor::zeros(d_real.shape());
    for (g, &z) in g_real.data_mut().iter_mut().zip(d_real.data()) {
        let (v, d) = log_sigmoid(z);
        value -= v / n_real;
        *g = -d / n_real;
    }
    let mut g_fake = Tensor::zeros(d_fake.shape());
    for (idx, (g, &z)) in g_fake.data_mut().iter_mut().zip(d_fake.data()).enumerate() {
        let (v, d) = if m_logit.bits()[idx % plane] == 1 {
            log_one_minus_sigmoid(z)
        } else {
            log_sigmoid(z)
        };
        value -= v / n_fake;
        *g = -d / n_fake;
    }
    Ok(LossValue::new(value)
        .with_grad("d_real", g_real)
        .with_grad("d_fake", g_fake))
}

/// Non-saturating generator loss `−mean ln σ(d_fake)`.
pub fn adversarial_g(d_fake: &Tensor) -> Result<LossValue> {
    let n = d_fake.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(d_fake.shape());
    for (g, &z) in grad.data_mut().iter_mut().zip(d_fake.data()) {
        let (v, d) = log_sigmoid(z);
        value -= v / n;
        *g = -d / n;
    }
    let out = LossValue::new(value).with_grad("d_fake", grad);
    out.ensure_finite()?;
    Ok(out)
}

/// A scalar-valued function of an image that can report its input gradient.
pub trait Critic {
    /// `(Σ D(x), ∇ₓ Σ D(x))`.
    fn score_and_input_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    /// Gradients w.r.t. the critic's parameters of `v · ∇ₓ D(x)` with `v`
    /// held fixed. Parameter-free critics return an empty map.
    fn directional_param_grads(&self, _x: &Tensor, _v: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        Ok(BTreeMap::new())
    }
}

impl<F> Critic for F
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    fn score_and_input_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self(x)
    }
}

/// R1 penalty `mean_b ‖∇ₓ D(x_b)‖²` at real samples. Parameter gradients use
/// `∇_θ ‖g‖² = 2 ∇_θ (v·g)|_{v=g}`.
pub fn gradient_penalty<C: Critic + ?Sized>(critic: &C, batch: &[Tensor]) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Evaluation("gradient penalty needs at least one sample".into()));
    }
    let n = batch.len() as f64;
    let mut out = LossValue::new(0.0);
    for x in batch {
        let (_, g) = critic.score_and_input_grad(x)?;
        g.ensure_finite("critic input gradient")?;
        out.value += g.data().iter().map(|v| v * v).sum::<f64>() / n;
        for (name, pg) in critic.directional_param_grads(x, &g)? {
            match out.grads.get_mut(&name) {
                Some(acc) => acc.axpy(2.0 / n, &pg)?,
                None => {
                    out.grads.insert(name, pg.scale(2.0 / n));
                }
            }
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Mean over layers of mean `|f_real − f_fake|`; gradients go to the fake
/// features only, keyed `"fake.{layer}"`.
pub fn feature_match(feats_real: &[Tensor], feats_fake: &[Tensor]) -> Result<LossValue> {
    if feats_real.len() != feats_fake.len() || feats_real.is_empty() {
        return Err(Error::Dimension(format!(
            "feature lists differ in length: {} vs {}",
            feats_real.len(),
            feats_fake.len()
        )));
    }
    let layers = feats_real.len() as f64;
    let mut out = LossValue::new(0.0);
    for (i, (r, f)) in feats_real.iter().zip(feats_fake).enumerate() {
        r.ensure_same_shape(f)?;
        let n = f.len() as f64;
        let mut grad = Tensor::zeros(f.shape());
        for ((g, &rv), &fv) in grad.data_mut().iter_mut().zip(r.data()).zip(f.data()) {
            let d = rv - fv;
            out.value += d.abs() / (n * layers);
            *g = if d == 0.0 { 0.0 } else { -d.signum() / (n * layers) };
        }
        out.grads.insert(format!("fake.{i}"), grad);
    }
    Ok(out)
}

/// `Σ_c Σ_{i,j} ((x_{i,j+1}−x_{i,j})² + (x_{i+1,j}−x_{i,j})²)^{β/2}` with
/// forward differences; a difference that would leave the image is zero.
pub fn tv(xhat: &Tensor, beta: f64) -> Result<LossValue> {
    let (c, h, w) = xhat.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "total variation needs spatial dims ≥ 2, got {h}×{w}"
        )));
    }
    let mut value = 0.0;
    let mut grad = Tensor::zeros(xhat.shape());
    for ch in 0..c {
        let x = xhat.channel(ch);
        let g = grad.channel_mut(ch);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let dx = if j + 1 < w { x[p + 1] - x[p] } else { 0.0 };
                let dy = if i + 1 < h { x[p + w] - x[p] } else { 0.0 };
                let s = dx * dx + dy * dy;
                if s == 0.0 {
                    continue;
                }
                value += s.powf(beta / 2.0);
                // d/ds s^{β/2} = (β/2) s^{β/2 − 1}; ds/d(dx) = 2dx
                let k = beta * s.powf(beta / 2.0 - 1.0);
                if j + 1 < w {
                    g[p + 1] += k * dx;
                    g[p] -= k * dx;
                }
                if i + 1 < h {
                    g[p + w] += k * dy;
                    g[p] -= k * dy;
                }
            }
        }
    }
    Ok(LossValue::new(value).with_grad("xhat", grad))
}

/// Generator-side components of the baseline objective.
#[derive(Debug, Clone)]
pub struct LamaComponents {
    pub l1: Option<LossValue>,
    pub adversarial: Option<LossValue>,
    pub perceptual: Option<LossValue>,
    pub feature_match: Option<LossValue>,
}

fn require<'a>(v: &'a Option<LossValue>, name: &str) -> Result<&'a LossValue> {
    v.as_ref().ok_or_else(|| Error::MissingComponent(name.to_string()))
}

/// `λ₁·L1 + λ_adv·L_adv + λ_PL·L_PL + λ_fm·L_fm`.
pub fn lama_total(components: &LamaComponents, weights: &LossWeights) -> Result<LossValue> {
    LossValue::weighted_sum(&[
        (weights.lambda1, require(&components.l1, "l1")?),
        (weights.lambda_adv, require(&components.adversarial, "adversarial")?),
        (weights.lambda_pl, require(&components.perceptual, "perceptual")?),
        (weights.lambda_fm, require(&components.feature_match, "feature_match")?),
    ])
}

/// `α₁·L_TV + α₂·L_FFL + α₃·L_LaMa`.
pub fn joint_total(
    lama: Option<&LossValue>,
    tv: Option<&LossValue>,
    ffl: Option<&LossValue>,
    weights: &LossWeights,
) -> Result<LossValue> {
    let lama = lama.ok_or_else(|| Error::MissingComponent("lama".into()))?;
    let tv = tv.ok_or_else(|| Error::MissingComponent("tv".into()))?;
    let ffl = ffl.ok_or_else(|| Error::MissingComponent("ffl".into()))?;
    LossValue::weighted_sum(&[
        (weights.alpha1, tv),
        (weights.alpha2, ffl),
        (weights.alpha3, lama),
    ])
}
