//! Hole masks: the seven general degradation types, the two baseline
//! free-form types, policies over them, and PBM/PGM file I/O.
//!
//! A mask value of 1 marks a hole (pixel to be synthesized), 0 a known pixel.
//! Generation is a pure function of `(type, height, width, seed)`: attempt
//! `a` draws from ChaCha8 stream `a` of the seed, and a draw that is
//! degenerate or outside its type's coverage range is retried on the next
//! stream, up to [`MAX_ATTEMPTS`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 16;
pub const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    /// A validated mask: binary and containing both holes and known pixels.
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        let mask = Self::raw(height, width, bits)?;
        let ones = mask.count_ones();
        if ones == 0 || ones == mask.bits.len() {
            return Err(Error::Invariant(format!(
                "degenerate mask: {ones} of {} pixels masked",
                mask.bits.len()
            )));
        }
        Ok(mask)
    }

    /// A binary grid without the non-degeneracy requirement. Loss and
    /// compositing code accepts these (e.g. all-zero masks in tests).
    pub fn raw(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Invariant(format!("non-binary mask value {v}")));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    /// `1×H×W` tensor with 1.0 on holes.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("mask dims are non-zero")
    }

    /// Per-pixel `1 − M` as floats.
    pub fn keep_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| 1.0 - b as f64).collect()
    }

    /// Max-pooling by `factor`: a cell is a hole if any covered pixel is.
    pub fn max_pool(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "mask {}×{} not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut bits = vec![0u8; h * w];
        for i in 0..self.height {
            for j in 0..self.width {
                if self.get(i, j) {
                    bits[(i / factor) * w + j / factor] = 1;
                }
            }
        }
        Mask::raw(h, w, bits)
    }
}

pub fn coverage(mask: &Mask) -> f64 {
    mask.coverage()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskType {
    Completion,
    Expand,
    EveryNLines,
    NearestNeighbor,
    ThinStrokes,
    MediumStrokes,
    ThickStrokes,
    LamaPolygonal,
    LamaRectangle,
}

impl MaskType {
    pub const ALL: [MaskType; 9] = [
        MaskType::Completion,
        MaskType::Expand,
        MaskType::EveryNLines,
        MaskType::NearestNeighbor,
        MaskType::ThinStrokes,
        MaskType::MediumStrokes,
        MaskType::ThickStrokes,
        MaskType::LamaPolygonal,
        MaskType::LamaRectangle,
    ];

    pub const GENERAL: [MaskType; 7] = [
        MaskType::Completion,
        MaskType::Expand,
        MaskType::EveryNLines,
        MaskType::NearestNeighbor,
        MaskType::ThinStrokes,
        MaskType::MediumStrokes,
        MaskType::ThickStrokes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskType::Completion => "Completion",
            MaskType::Expand => "Expand",
            MaskType::EveryNLines => "EveryNLines",
            MaskType::NearestNeighbor => "NearestNeighbor",
            MaskType::ThinStrokes => "ThinStrokes",
            MaskType::MediumStrokes => "MediumStrokes",
            MaskType::ThickStrokes => "ThickStrokes",
            MaskType::LamaPolygonal => "LamaPolygonal",
            MaskType::LamaRectangle => "LamaRectangle",
        }
    }

    /// Accepted coverage interval (inclusive) for generated masks.
    pub fn coverage_range(self) -> (f64, f64) {
        match self {
            MaskType::Completion => (0.4, 0.6),
            MaskType::Expand => (0.5, 0.75),
            MaskType::EveryNLines => (1.0 / 8.0, 7.0 / 8.0),
            MaskType::NearestNeighbor => (0.70, 0.99),
            MaskType::ThinStrokes => (0.01, 0.15),
            MaskType::MediumStrokes => (0.03, 0.35),
            MaskType::ThickStrokes => (0.10, 0.60),
            MaskType::LamaPolygonal | MaskType::LamaRectangle => (0.0, 1.0),
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        MaskType::ALL
            .into_iter()
            .find(|t| t.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown mask type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    LamaMask,
    LamaPlusMask,
    GeneralMask,
}

impl MaskPolicy {
    pub fn types(self) -> &'static [MaskType] {
        match self {
            MaskPolicy::LamaMask => &[MaskType::LamaPolygonal, MaskType::LamaRectangle],
            MaskPolicy::LamaPlusMask => &[
                MaskType::LamaPolygonal,
                MaskType::LamaRectangle,
                MaskType::NearestNeighbor,
                MaskType::EveryNLines,
            ],
            MaskPolicy::GeneralMask => &MaskType::GENERAL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskPolicy::LamaMask => "lama-mask",
            MaskPolicy::LamaPlusMask => "lama-plus-mask",
            MaskPolicy::GeneralMask => "general-mask",
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "lama" | "lama-mask" => Ok(MaskPolicy::LamaMask),
            "lama-plus" | "lama-plus-mask" => Ok(MaskPolicy::LamaPlusMask),
            "general" | "general-mask" => Ok(MaskPolicy::GeneralMask),
            _ => Err(Error::Config(format!("unknown mask policy {s:?}"))),
        }
    }
}

/// Uniform draw from the policy's type set.
pub fn sample_type<R: Rng + ?Sized>(policy: MaskPolicy, rng: &mut R) -> MaskType {
    let types = policy.types();
    types[rng.random_range(0..types.len())]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawnMask {
    pub kind: MaskType,
    pub seed: u64,
    pub mask: Mask,
}

/// `count` square masks from one stream seeded by `seed`: per item, the type
/// (drawn from `policy` unless `fixed`) then the mask seed.
pub fn generate_set(
    policy: MaskPolicy,
    fixed: Option<MaskType>,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<DrawnMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let kind = fixed.unwrap_or_else(|| sample_type(policy, &mut rng));
            let seed = rng.random();
            Ok(DrawnMask {
                kind,
                seed,
                mask: generate(kind, size, size, seed)?,
            })
        })
        .collect()
}

pub fn generate(kind: MaskType, height: usize, width: usize, seed: u64) -> Result<Mask> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Dimension(format!(
            "mask must be at least {MIN_SIDE}×{MIN_SIDE}, got {height}×{width}"
        )));
    }
    let (lo, hi) = kind.coverage_range();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let bits = draw(kind, height, width, &mut rng);
        let Ok(mask) = Mask::new(height, width, bits) else {
            continue;
        };
        let cov = mask.coverage();
        if cov >= lo - 1e-12 && cov <= hi + 1e-12 {
            return Ok(mask);
        }
    }
    Err(Error::Invariant(format!(
        "{kind} mask {height}×{width} seed {seed}: no valid draw in {MAX_ATTEMPTS} attempts"
    )))
}

fn draw(kind: MaskType, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let scale = h.min(w) as f64 / 256.0;
    match kind {
        MaskType::Completion => {
            let side = match rng.random_range(0..4) {
                0 => Side::Top,
                1 => Side::Bottom,
                2 => Side::Left,
                _ => Side::Right,
            };
            let dim = if matches!(side, Side::Top | Side::Bottom) { h } else { w };
            let f: f64 = rng.random_range(0.4..=0.6);
            let lo = (0.4 * dim as f64).ceil() as usize;
            let hi = (0.6 * dim as f64).floor() as usize;
            let len = ((f * dim as f64).round() as usize).clamp(lo, hi);
            completion_band(h, w, side, len)
        }
        MaskType::Expand => {
            let area: f64 = rng.random_range(0.25..=0.5);
            let aspect: f64 = rng.random_range(0.75..=1.33);
            let kh = ((h as f64 * (area / aspect).sqrt()).round() as usize).clamp(1, h - 2);
            let kw = ((w as f64 * (area * aspect).sqrt()).round() as usize).clamp(1, w - 2);
            expand_frame(h, w, kh, kw)
        }
        MaskType::EveryNLines => {
            let orientation = if rng.random_bool(0.5) {
                Orientation::Rows
            } else {
                Orientation::Cols
            };
            let period = [2, 4, 8][rng.random_range(0..3)];
            let thickness = rng.random_range(1..period);
            let offset = rng.random_range(0..period);
            every_n_lines(h, w, orientation, period, thickness, offset)
        }
        MaskType::NearestNeighbor => {
            let stride = [2, 4, 8][rng.random_range(0..3)];
            nearest_neighbor(h, w, stride)
        }
        MaskType::ThinStrokes => strokes(h, w, (1.0 * scale, 3.0 * scale), rng),
        MaskType::MediumStrokes => strokes(h, w, (4.0 * scale, 8.0 * scale), rng),
        MaskType::ThickStrokes => strokes(h, w, (9.0 * scale, 18.0 * scale), rng),
        MaskType::LamaPolygonal => {
            let mut canvas = Canvas::new(h, w);
            let chains = rng.random_range(1..=4);
            for _ in 0..chains {
                let width_px: f64 = rng.random_range(10.0..=50.0) * scale;
                let vertices = rng.random_range(2..=8);
                let path = random_walk(h, w, vertices, (0.05, 0.25), rng);
                canvas.polyline(&path, (width_px / 2.0).max(0.5));
            }
            canvas.bits
        }
        MaskType::LamaRectangle => {
            let mut bits = vec![0u8; h * w];
            let count = rng.random_range(1..=3);
            for _ in 0..count {
                let rh = ((rng.random_range(0.1..=0.5) * h as f64).round() as usize).max(1);
                let rw = ((rng.random_range(0.1..=0.5) * w as f64).round() as usize).max(1);
                let top = rng.random_range(0..=h - rh);
                let left = rng.random_range(0..=w - rw);
                for i in top..top + rh {
                    bits[i * w + left..i * w + left + rw].fill(1);
                }
            }
            bits
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

/// Full-width band of `len` rows (or columns) starting at `side`.
pub fn completion_band(h: usize, w: usize, side: Side, len: usize) -> Vec<u8> {
    let mut bits = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let hole = match side {
                Side::Top => i < len,
                Side::Bottom => i >= h - len.min(h),
                Side::Left => j < len,
                Side::Right => j >= w - len.min(w),
            };
            bits[i * w + j] = hole as u8;
        }
    }
    bits
}

/// Everything outside a centered `keep_h×keep_w` rectangle is a hole.
pub fn expand_frame(h: usize, w: usize, keep_h: usize, keep_w: usize) -> Vec<u8> {
    let top = (h - keep_h) / 2;
    let left = (w - keep_w) / 2;
    let mut bits = vec![1u8; h * w];
    for i in top..top + keep_h {
        bits[i * w + left..i * w + left + keep_w].fill(0);
    }
    bits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Rows,
    Cols,
}

/// Line `ℓ` is a hole iff `((ℓ − offset) mod period) < thickness`.
pub fn every_n_lines(
    h: usize,
    w: usize,
    orientation: Orientation,
    period: usize,
    thickness: usize,
    offset: usize,
) -> Vec<u8> {
    let hole = |l: usize| ((l + period - offset % period) % period) < thickness;
    let mut bits = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let l = match orientation {
                Orientation::Rows => i,
                Orientation::Cols => j,
            };
            bits[i * w + j] = hole(l) as u8;
        }
    }
    bits
}

/// Keeps only the top-left pixel of every `stride×stride` block.
pub fn nearest_neighbor(h: usize, w: usize, stride: usize) -> Vec<u8> {
    let mut bits = vec![1u8; h * w];
    for i in (0..h).step_by(stride) {
        for j in (0..w).step_by(stride) {
            bits[i * w + j] = 0;
        }
    }
    bits
}

fn strokes(h: usize, w: usize, radius: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut canvas = Canvas::new(h, w);
    let count = rng.random_range(1..=6);
    for _ in 0..count {
        let r = rng.random_range(radius.0..=radius.1).max(0.5);
        let vertices = rng.random_range(4..=12);
        let path = random_walk(h, w, vertices, (0.04, 0.12), rng);
        canvas.polyline(&path, r);
    }
    canvas.bits
}

/// Bounded random walk in continuous pixel coordinates `(x, y)`.
fn random_walk(
    h: usize,
    w: usize,
    vertices: usize,
    step: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let side = h.min(w) as f64;
    let mut x = rng.random_range(0.0..w as f64);
    let mut y = rng.random_range(0.0..h as f64);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut path = vec![(x, y)];
    for _ in 1..vertices {
        angle += rng.random_range(-1.2..1.2);
        let len = rng.random_range(step.0..step.1) * side;
        x = (x + len * angle.cos()).clamp(0.0, w as f64);
        y = (y + len * angle.sin()).clamp(0.0, h as f64);
        path.push((x, y));
    }
    path
}

struct Canvas {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![0u8; h * w],
        }
    }

    /// Marks pixel centers within `r` of any segment of `path`.
    fn polyline(&mut self, path: &[(f64, f64)], r: f64) {
        for seg in path.windows(2) {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            let i_lo = ((y0.min(y1) - r - 0.5).floor().max(0.0)) as usize;
            let i_hi = ((y0.max(y1) + r).ceil() as usize).min(self.h);
            let j_lo = ((x0.min(x1) - r - 0.5).floor().max(0.0)) as usize;
            let j_hi = ((x0.max(x1) + r).ceil() as usize).min(self.w);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            for i in i_lo..i_hi {
                for j in j_lo..j_hi {
                    let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                    let t = if len2 > 0.0 {
                        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (cx, cy) = (x0 + t * dx - px, y0 + t * dy - py);
                    if cx * cx + cy * cy <= r * r {
                        self.bits[i * self.w + j] = 1;
                    }
                }
            }
        }
    }
}

/// Raw PBM (`P4`) bytes; a set bit marks a hole.
pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let mut out = format!(
        "P4\n# hole mask: 1=masked 0=keep\n{} {}\n",
        mask.width, mask.height
    )
    .into_bytes();
    let row_bytes = mask.width.div_ceil(8);
    for i in 0..mask.height {
        let mut row = vec![0u8; row_bytes];
        for j in 0..mask.width {
            if mask.get(i, j) {
                row[j / 8] |= 0x80 >> (j % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

/// Parses `P4`/`P1` bitmaps (1 = hole) and `P5` graymaps (maxval = hole, 0 = keep).
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let mut p = crate::io::PnmHeaderParser::new(bytes);
    let magic = p.magic()?;
    let width = p.number("width")?;
    let height = p.number("height")?;
    let bits = match magic {
        b'4' => {
            p.single_whitespace()?;
            let row_bytes = width.div_ceil(8);
            let data = p.take(row_bytes * height, "bitmap data")?;
            let mut bits = Vec::with_capacity(width * height);
            for row in data.chunks_exact(row_bytes) {
                for j in 0..width {
                    bits.push((row[j / 8] >> (7 - j % 8)) & 1);
                }
            }
            bits
        }
        b'1' => {
            let mut bits = Vec::with_capacity(width * height);
            while bits.len() < width * height {
                let (offset, c) = p.next_non_space("bitmap digit")?;
                match c {
                    b'0' | b'1' => bits.push(c - b'0'),
                    _ => {
                        return Err(Error::Parse {
                            offset,
                            message: format!("expected 0 or 1, found {:?}", c as char),
                        })
                    }
                }
            }
            bits
        }
        b'5' => {
            let maxval = p.number("maxval")?;
            if maxval == 0 || maxval > 255 {
                return Err(Error::Parse {
                    offset: p.offset(),
                    message: format!("unsupported maxval {maxval}"),
                });
            }
            p.single_whitespace()?;
            let start = p.offset();
            let data = p.take(width * height, "graymap data")?;
            let mut bits = Vec::with_capacity(width * height);
            for (k, &v) in data.iter().enumerate() {
                match v as usize {
                    0 => bits.push(0),
                    m if m == maxval => bits.push(1),
                    _ => {
                        return Err(Error::Parse {
                            offset: start + k,
                            message: format!("mask pixel {v} is neither 0 nor {maxval}"),
                        })
                    }
                }
            }
            bits
        }
        other => {
            return Err(Error::Parse {
                offset: 1,
                message: format!("unsupported mask format P{}", other as char),
            })
        }
    };
    Mask::new(height, width, bits)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pbm(mask)).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}
