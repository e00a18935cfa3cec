//! Focal frequency loss, spectrum visualization and spectral artifact scores.
//!
//! All transforms use the unnormalized forward DFT per channel.

use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift, ifft2_complex, ComplexGrid};
use crate::losses::LossValue;
use crate::tensor::Tensor;

/// Peak threshold of [`ripple_score`], relative to the median non-DC magnitude.
pub const RIPPLE_PEAK_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FocalWeightGrid {
    pub height: usize,
    pub width: usize,
    pub w: Vec<f64>,
}

/// `w(u,v) = |F_r(u,v) − F_f(u,v)|^α`, treated as a constant by [`ffl`].
pub fn focal_weight(fr: &ComplexGrid, ff: &ComplexGrid, alpha: f64) -> Result<FocalWeightGrid> {
    if (fr.height(), fr.width()) != (ff.height(), ff.width()) {
        return Err(Error::Shape {
            expected: vec![fr.height(), fr.width()],
            actual: vec![ff.height(), ff.width()],
        });
    }
    let w = fr
        .re()
        .iter()
        .zip(fr.im())
        .zip(ff.re().iter().zip(ff.im()))
        .map(|((ar, ai), (br, bi))| {
            let m = (ar - br).hypot(ai - bi);
            if m == 0.0 {
                0.0
            } else {
                m.powf(alpha)
            }
        })
        .collect();
    Ok(FocalWeightGrid {
        height: fr.height(),
        width: fr.width(),
        w,
    })
}

/// Per-channel focal weights of `xhat` against `x`.
pub fn focal_weights(x: &Tensor, xhat: &Tensor, alpha: f64) -> Result<Vec<FocalWeightGrid>> {
    x.ensure_same_shape(xhat)?;
    let (c, h, w) = x.dims3()?;
    (0..c)
        .map(|ch| focal_weight(&fft2(x.channel(ch), h, w)?, &fft2(xhat.channel(ch), h, w)?, alpha))
        .collect()
}

/// Focal frequency loss averaged over channels:
/// `(1/C) Σ_c (1/MN) Σ_{u,v} w(u,v)·|F_r(u,v) − F_f(u,v)|²`.
/// The gradient w.r.t. `xhat` (key `"xhat"`) holds `w` fixed.
pub fn ffl(x: &Tensor, xhat: &Tensor, alpha: f64) -> Result<LossValue> {
    ffl_with_weights(x, xhat, &focal_weights(x, xhat, alpha)?)
}

/// The focal frequency objective with externally supplied weights, one
/// grid per channel.
pub fn ffl_with_weights(x: &Tensor, xhat: &Tensor, weights: &[FocalWeightGrid]) -> Result<LossValue> {
    x.ensure_same_shape(xhat)?;
    let (c, h, w) = x.dims3()?;
    if weights.len() != c || weights.iter().any(|g| (g.height, g.width) != (h, w)) {
        return Err(Error::Dimension(format!("need {c} weight grids of {h}×{w}")));
    }
    let mn = (h * w) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(xhat.shape());
    for (ch, weights) in weights.iter().enumerate() {
        let fr = fft2(x.channel(ch), h, w)?;
        let ff = fft2(xhat.channel(ch), h, w)?;
        let mut wre = vec![0.0; h * w];
        let mut wim = vec![0.0; h * w];
        for k in 0..h * w {
            let dr = fr.re()[k] - ff.re()[k];
            let di = fr.im()[k] - ff.im()[k];
            let wk = weights.w[k];
            value += wk * (dr * dr + di * di) / (mn * c as f64);
            wre[k] = wk * dr;
            wim[k] = wk * di;
        }
        // ∂/∂x̂ of (1/MN)Σ w|F(x − x̂)|² is −2·Re[ifft2(wΔ)].
        let back = ifft2_complex(&ComplexGrid::new(h, w, wre, wim)?)?;
        for (g, &r) in grad.channel_mut(ch).iter_mut().zip(back.re()) {
            *g = -2.0 * r / c as f64;
        }
    }
    let out = LossValue::new(value).with_grad("xhat", grad);
    out.ensure_finite()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpectrumImage {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.values.clone())
            .expect("spectrum dims are non-zero")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// Channel-averaged `ln(1 + |F|)` with DC moved to `(H/2, W/2)`, unnormalized.
pub fn log_magnitude(x: &Tensor) -> Result<SpectrumImage> {
    let (c, h, w) = x.dims3()?;
    let mut acc = vec![0.0; h * w];
    for ch in 0..c {
        let f = fft2(x.channel(ch), h, w)?;
        for (a, (re, im)) in acc.iter_mut().zip(f.re().iter().zip(f.im())) {
            *a += re.hypot(*im).ln_1p() / c as f64;
        }
    }
    Ok(SpectrumImage {
        height: h,
        width: w,
        values: fftshift(&acc, h, w),
    })
}

/// [`log_magnitude`] min–max normalized to `[0, 1]`; a flat map becomes zeros.
pub fn spectrum_image(x: &Tensor) -> Result<SpectrumImage> {
    let mut s = log_magnitude(x)?;
    let lo = s.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut s.values {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    Ok(s)
}

/// Per-bin spectral energy `Σ_c |F_c(u,v)|²`.
fn energy(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = x.dims3()?;
    let mut e = vec![0.0; h * w];
    for ch in 0..c {
        for (a, p) in e.iter_mut().zip(fft2(x.channel(ch), h, w)?.norm_sqr()) {
            *a += p;
        }
    }
    Ok((h, w, e))
}

/// Fraction of non-DC spectral energy in the Nyquist row or column.
pub fn checkerboard_score(x: &Tensor) -> Result<f64> {
    let (_, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "checkerboard score needs even dims, got {h}×{w}"
        )));
    }
    let (h, w, e) = energy(x)?;
    let mut total = 0.0;
    let mut nyquist = 0.0;
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let p = e[u * w + v];
            total += p;
            if u == h / 2 || v == w / 2 {
                nyquist += p;
            }
        }
    }
    Ok(if total > 0.0 { nyquist / total } else { 0.0 })
}

/// Fraction of non-DC energy held by isolated spectral peaks: bins whose
/// magnitude exceeds [`RIPPLE_PEAK_FACTOR`] × the median non-DC magnitude.
pub fn ripple_score(x: &Tensor) -> Result<f64> {
    let (_, _, e) = energy(x)?;
    let non_dc = &e[1..];
    let total: f64 = non_dc.iter().sum();
    if non_dc.is_empty() || total <= 0.0 {
        return Ok(0.0);
    }
    let mut mags: Vec<f64> = non_dc.iter().map(|p| p.sqrt()).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let median = if n % 2 == 1 {
        mags[n / 2]
    } else {
        0.5 * (mags[n / 2 - 1] + mags[n / 2])
    };
    let threshold = RIPPLE_PEAK_FACTOR * median;
    let peaks: f64 = non_dc.iter().filter(|p| p.sqrt() > threshold).sum();
    Ok(peaks / total)
}
