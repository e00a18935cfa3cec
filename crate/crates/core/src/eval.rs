//! Image metrics, compositing, and the per-mask-type evaluation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{checkerboard_score, ripple_score};
use crate::masks::{generate, Mask, MaskPolicy, MaskType};
use crate::model::{Extractor, Generator};
use crate::tensor::Tensor;
use crate::train::{load_generator, TrainConfig};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const EIGEN_MAX_ITER: usize = 10_000;

/// `x⊙(1−M) + x̂⊙M`.
pub fn composite(x: &Tensor, xhat: &Tensor, m: &Mask) -> Result<Tensor> {
    x.ensure_same_shape(xhat)?;
    let (c, h, w) = x.dims3()?;
    if (m.height(), m.width()) != (h, w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            actual: vec![m.height(), m.width()],
        });
    }
    let bits = m.bits();
    let mut out = x.clone();
    for ch in 0..c {
        let src = xhat.channel(ch);
        for ((o, &s), &b) in out.channel_mut(ch).iter_mut().zip(src).zip(bits) {
            if b == 1 {
                *o = s;
            }
        }
    }
    Ok(out)
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64)
}

/// `10·log10(1/MSE)` for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let e = mse(a, b)?;
    if e <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, valid positions only),
/// averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ch in 0..c {
        let (x, y) = (a.channel(ch), b.channel(ch));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let mxx = filter_valid(&prod(&|p, _| p * p), h, w, &g);
        let myy = filter_valid(&prod(&|_, q| q * q), h, w, &g);
        let mxy = filter_valid(&prod(&|p, q| p * q), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

fn mean_cov(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (samples.len(), samples[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu.transpose(), cov)
}

fn symmetric_eigenvalues(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, f64::EPSILON, EIGEN_MAX_ITER).ok_or(Error::EigenNonConvergent)
}

fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = symmetric_eigenvalues(m)?;
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let d = real.first().or(fake.first()).map_or(0, Vec::len);
    for set in [real, fake] {
        if set.len() < d + 1 || set.is_empty() {
            return Err(Error::TooFewSamples {
                needed: d + 1,
                got: set.len(),
            });
        }
        if set.iter().any(|v| v.len() != d) {
            return Err(Error::Dimension("feature vectors differ in length".into()));
        }
    }
    let (mr, sr) = mean_cov(real);
    let (mf, sf) = mean_cov(fake);
    let root_r = sqrt_psd(sr.clone())?;
    let inner = &root_r * &sf * &root_r;
    let cross: f64 = symmetric_eigenvalues(inner)?
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let diff = (mr - mf).norm_squared();
    let value = diff + sr.trace() + sf.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Fréchet distance over the frozen extractor's pooled features.
pub fn proxy_fid(extractor: &Extractor, real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    let feats = |set: &[Tensor]| set.iter().map(|t| extractor.pooled(t)).collect::<Result<Vec<_>>>();
    frechet_distance(&feats(real)?, &feats(fake)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean |composite − x| over all pixels and channels.
    L1,
    Psnr,
    Ssim,
    ProxyFid,
    /// Checkerboard score of the raw prediction.
    RawCheckerboard,
    /// Ripple score of the raw prediction.
    RawRipple,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::L1,
        Metric::Psnr,
        Metric::Ssim,
        Metric::ProxyFid,
        Metric::RawCheckerboard,
        Metric::RawRipple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::ProxyFid => "proxy_fid",
            Metric::RawCheckerboard => "raw_checkerboard",
            Metric::RawRipple => "raw_ripple",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == key || m.name().trim_start_matches("raw_") == key || (key == "fid" && *m == Metric::ProxyFid))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub policy: MaskPolicy,
    pub seed: u64,
    pub metrics: Vec<Metric>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            policy: MaskPolicy::GeneralMask,
            seed: 0,
            metrics: vec![Metric::L1, Metric::Psnr, Metric::Ssim, Metric::RawCheckerboard, Metric::RawRipple],
        }
    }
}

/// Mask seed for validation image `index` under `kind`; one per (image, type).
pub fn validation_mask_seed(seed: u64, index: usize, kind: MaskType) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let skip = MaskType::ALL.iter().position(|&t| t == kind).unwrap_or(0);
    for _ in 0..skip {
        rng.random::<u64>();
    }
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mask_type: MaskType,
    /// Items scored successfully.
    pub count: usize,
    pub failed: usize,
    /// Mean of each metric over successful items; `None` when the metric
    /// needs more samples than were available.
    pub means: BTreeMap<String, Option<f64>>,
    /// This value minus the baseline report's value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub deltas: BTreeMap<String, Option<f64>>,
}

impl EvalRow {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.means.get(metric.name()).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: String,
    pub policy: MaskPolicy,
    pub seed: u64,
    pub images: usize,
    pub metrics: Vec<Metric>,
    pub rows: Vec<EvalRow>,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

pub const REPORT_HEADER: &str =
    "composite metrics on x*(1-M) + xhat*M; raw_* on xhat; proxy_fid is a proxy (frozen random extractor, not Inception)";

impl EvalReport {
    pub fn row(&self, kind: MaskType) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.mask_type == kind)
    }

    /// Adds `self − baseline` for every metric present in both.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        for row in &mut self.rows {
            let Some(base) = baseline.row(row.mask_type) else {
                continue;
            };
            row.deltas = row
                .means
                .iter()
                .filter_map(|(k, v)| {
                    let b = base.means.get(k)?;
                    Some((k.clone(), v.zip(*b).map(|(a, b)| a - b)))
                })
                .collect();
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invariant(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("eval report: {e}"),
        })
    }

    /// Aligned table: one row per mask type, one column per metric.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.header);
        let _ = writeln!(
            out,
            "# policy {} seed {} images {} failures {}",
            self.policy.name(),
            self.seed,
            self.images,
            self.failures
        );
        let has_delta = self.rows.iter().any(|r| !r.deltas.is_empty());
        let mut head = format!("{:<16} {:>5}", "mask_type", "n");
        for m in &self.metrics {
            let _ = write!(head, " {:>16}", m.name());
            if has_delta {
                let _ = write!(head, " {:>12}", "delta");
            }
        }
        let _ = writeln!(out, "{head}");
        for r in &self.rows {
            let _ = write!(out, "{:<16} {:>5}", r.mask_type.name(), r.count);
            for m in &self.metrics {
                let cell = |v: Option<&Option<f64>>| match v.copied().flatten() {
                    Some(v) => format!("{v:.6}"),
                    None => "n/a".into(),
                };
                let _ = write!(out, " {:>16}", cell(r.means.get(m.name())));
                if has_delta {
                    let _ = write!(out, " {:>12}", cell(r.deltas.get(m.name())));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, json_path: &Path, table_path: &Path) -> Result<()> {
        crate::io::write_atomic(json_path, self.to_json()?.as_bytes())?;
        crate::io::write_atomic(table_path, self.to_table().as_bytes())
    }
}

struct Item {
    x: Tensor,
    xhat: Tensor,
    comp: Tensor,
}

fn score(item: &Item, metric: Metric) -> Result<f64> {
    let v = match metric {
        Metric::L1 => mean_abs_error(&item.comp, &item.x)?,
        Metric::Psnr => psnr(&item.comp, &item.x)?,
        Metric::Ssim => ssim(&item.comp, &item.x)?,
        Metric::RawCheckerboard => checkerboard_score(&item.xhat)?,
        Metric::RawRipple => ripple_score(&item.xhat)?,
        Metric::ProxyFid => unreachable!("set-level metric"),
    };
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{} value", metric.name())));
    }
    Ok(v)
}

/// Scores `generator` on every (image, mask type) pair of the policy.
pub fn evaluate_generator(generator: &Generator, images: &[Tensor], options: &EvalOptions) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Evaluation("no validation images".into()));
    }
    let extractor = Extractor::default();
    let mut rows = Vec::new();
    let mut failure_messages = Vec::new();
    for &kind in options.policy.types() {
        let mut sums: BTreeMap<Metric, f64> = BTreeMap::new();
        let (mut count, mut failed) = (0, 0);
        let (mut reals, mut fakes) = (Vec::new(), Vec::new());
        for (i, x) in images.iter().enumerate() {
            let result = (|| -> Result<(Vec<(Metric, f64)>, Tensor)> {
                let (_, h, w) = x.dims3()?;
                let m = generate(kind, h, w, validation_mask_seed(options.seed, i, kind))?;
                let xhat = generator.forward(x, &m)?;
                let comp = composite(x, &xhat, &m)?;
                let item = Item { x: x.clone(), xhat, comp };
                let scores = options
                    .metrics
                    .iter()
                    .filter(|&&m| m != Metric::ProxyFid)
                    .map(|&m| score(&item, m).map(|v| (m, v)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((scores, item.comp))
            })();
            match result {
                Ok((scores, comp)) => {
                    count += 1;
                    for (m, v) in scores {
                        *sums.entry(m).or_default() += v;
                    }
                    reals.push(x.clone());
                    fakes.push(comp);
                }
                Err(e) => {
                    failed += 1;
                    failure_messages.push(format!("{kind} image {i}: {e}"));
                }
            }
        }
        let mut means = BTreeMap::new();
        for &m in &options.metrics {
            let v = if m == Metric::ProxyFid {
                match proxy_fid(&extractor, &reals, &fakes) {
                    Ok(v) => Some(v),
                    Err(Error::TooFewSamples { .. }) => None,
                    Err(e) => {
                        failure_messages.push(format!("{kind} proxy_fid: {e}"));
                        None
                    }
                }
            } else if count > 0 {
                Some(sums.get(&m).copied().unwrap_or(0.0) / count as f64)
            } else {
                None
            };
            means.insert(m.name().to_string(), v);
        }
        rows.push(EvalRow {
            mask_type: kind,
            count,
            failed,
            means,
            deltas: BTreeMap::new(),
        });
    }
    Ok(EvalReport {
        header: REPORT_HEADER.into(),
        policy: options.policy,
        seed: options.seed,
        images: images.len(),
        metrics: options.metrics.clone(),
        failures: rows.iter().map(|r| r.failed).sum(),
        failure_messages,
        rows,
        config: None,
    })
}

/// Loads the generator stored in `checkpoint` and evaluates it.
pub fn evaluate(checkpoint: &Path, images: &[Tensor], options: &EvalOptions) -> Result<EvalReport> {
    let (manifest, generator) = load_generator(checkpoint)?;
    let mut report = evaluate_generator(&generator, images, options)?;
    report.config = Some(manifest.config);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FfcConfig;
    use nalgebra::Cholesky;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn composite_cases() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let xh = Tensor::from_vec(&[1, 2, 2], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        assert_eq!(composite(&x, &xh, &Mask::filled(2, 2, false)).unwrap(), x);
        assert_eq!(composite(&x, &xh, &Mask::filled(2, 2, true)).unwrap(), xh);
        let m = Mask::raw(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(composite(&x, &xh, &m).unwrap().data(), &[0.9, 0.2, 0.3, 0.6]);
        assert!(composite(&x, &xh, &Mask::filled(3, 2, true)).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = rand_image(&[3, 8, 8], 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-10);
        let c = rand_image(&[3, 8, 8], 2);
        let e: f64 = a.data().iter().zip(c.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 192.0;
        assert!((psnr(&a, &c).unwrap() - (-10.0 * e.log10())).abs() < 1e-10);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
    }

    /// Direct per-window SSIM with a 2D Gaussian kernel.
    fn ssim_direct(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = a.dims3().unwrap();
        let mut k = [[0.0f64; 11]; 11];
        let mut ks = 0.0;
        for (u, row) in k.iter_mut().enumerate() {
            for (v, cell) in row.iter_mut().enumerate() {
                let d2 = (u as f64 - 5.0).powi(2) + (v as f64 - 5.0).powi(2);
                *cell = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                ks += *cell;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        for ch in 0..c {
            let (x, y) = (a.channel(ch), b.channel(ch));
            let mut acc = 0.0;
            let mut n = 0;
            for i in 0..=h - 11 {
                for j in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..11 {
                        for v in 0..11 {
                            let g = k[u][v] / ks;
                            let p = x[(i + u) * w + j + v];
                            let q = y[(i + u) * w + j + v];
                            mx += g * p;
                            my += g * q;
                            sxx += g * p * p;
                            syy += g * q * q;
                            sxy += g * p * q;
                        }
                    }
                    let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / c as f64
    }

    #[test]
    fn ssim_cases() {
        let a = rand_image(&[3, 16, 16], 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = a.map(|v| 1.0 - v);
        let s = ssim(&a, &neg).unwrap();
        assert!((-1.0..1.0).contains(&s), "{s}");
        let b = rand_image(&[3, 16, 16], 4);
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-8);
        assert!(ssim(&Tensor::zeros(&[1, 10, 16]), &Tensor::zeros(&[1, 10, 16])).is_err());
    }

    /// `n` samples with sample mean exactly `mu` and sample covariance exactly
    /// `q·diag(d)·qᵀ`.
    fn exact_cloud(n: usize, mu: &[f64], q: &DMatrix<f64>, d: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let dim = mu.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: DMatrix<f64> = DMatrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng));
        let zm = z.row_mean();
        let zc = DMatrix::from_fn(n, dim, |i, j| z[(i, j)] - zm[j]);
        let cov = zc.transpose() * &zc / (n as f64 - 1.0);
        let l = Cholesky::new(cov).unwrap().l();
        let white = (l.solve_lower_triangular(&zc.transpose()).unwrap()).transpose();
        let a = q * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(dim, d.iter().map(|v| v.sqrt())));
        let x = white * a.transpose();
        (0..n).map(|i| (0..dim).map(|j| x[(i, j)] + mu[j]).collect()).collect()
    }

    fn random_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
        m.qr().q()
    }

    #[test]
    fn frechet_matches_gaussian_closed_form() {
        let dim = 64;
        let q = random_rotation(dim, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dr: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..2.0)).collect();
        let df: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..2.0)).collect();
        let mr: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mf: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let real = exact_cloud(200, &mr, &q, &dr, 7);
        let fake = exact_cloud(150, &mf, &q, &df, 8);
        let expected: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            + dr.iter().zip(&df).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum::<f64>();
        let got = frechet_distance(&real, &fake).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert!(frechet_distance(&real, &real).unwrap().abs() < 1e-6);
    }

    #[test]
    fn frechet_far_clouds_are_mean_dominated() {
        let dim = 8;
        let q = random_rotation(dim, 9);
        let d = vec![0.5; dim];
        let mr = vec![0.0; dim];
        let mf = vec![100.0; dim];
        let real = exact_cloud(40, &mr, &q, &d, 10);
        let fake = exact_cloud(40, &mf, &q, &d, 11);
        let got = frechet_distance(&real, &fake).unwrap();
        assert!((got - 80_000.0).abs() < 1e-6 * 80_000.0, "{got}");
    }

    #[test]
    fn frechet_errors_and_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        let other: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        assert!(matches!(
            frechet_distance(&set[..4], &other),
            Err(Error::TooFewSamples { needed: 5, got: 4 })
        ));
        let mut rev = other.clone();
        rev.reverse();
        let a = frechet_distance(&set, &other).unwrap();
        assert!((a - frechet_distance(&set, &rev).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn evaluate_is_deterministic_with_seven_rows() {
        let cfg = FfcConfig {
            base_width: 4,
            n_residual: 1,
            ..FfcConfig::default()
        };
        let g = Generator::new(cfg, 1).unwrap();
        let images: Vec<Tensor> = (0..2).map(|i| rand_image(&[3, 32, 32], 20 + i)).collect();
        let opts = EvalOptions {
            metrics: Metric::ALL.to_vec(),
            ..EvalOptions::default()
        };
        let r1 = evaluate_generator(&g, &images, &opts).unwrap();
        let r2 = evaluate_generator(&g, &images, &opts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.rows.len(), 7);
        assert_eq!(r1.failures, 0);
        for row in &r1.rows {
            assert_eq!(row.count, 2);
            assert_eq!(row.mean(Metric::ProxyFid), None);
            assert!(row.mean(Metric::L1).unwrap().is_finite());
        }
        let table = r1.to_table();
        assert!(table.contains("proxy"));
        assert_eq!(EvalReport::from_json(&r1.to_json().unwrap()).unwrap(), r1);
        let d = r1.clone().with_baseline(&r2);
        assert_eq!(d.rows[0].deltas["l1"], Some(0.0));
        assert!(d.to_table().contains("delta"));
    }

    #[test]
    fn failed_items_are_counted() {
        let cfg = FfcConfig {
            base_width: 4,
            n_residual: 1,
            ..FfcConfig::default()
        };
        let g = Generator::new(cfg, 1).unwrap();
        let images = vec![rand_image(&[3, 32, 32], 1), rand_image(&[3, 24, 24], 2)];
        let r = evaluate_generator(&g, &images, &EvalOptions::default()).unwrap();
        assert_eq!(r.failures, 7);
        assert!(r.rows.iter().all(|row| row.count == 1 && row.failed == 1));
    }

    #[test]
    fn metric_names_parse() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert_eq!("fid".parse::<Metric>().unwrap(), Metric::ProxyFid);
        assert_eq!("ripple".parse::<Metric>().unwrap(), Metric::RawRipple);
        assert!("lpips".parse::<Metric>().is_err());
    }
}
