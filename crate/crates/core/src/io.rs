//! Netpbm image I/O and directory ingestion.
//!
//! Images load as `3×H×W` tensors in `[0,1]`. Supported inputs: `P6`/`P3`
//! pixmaps and `P5`/`P2` graymaps (gray is replicated to three channels).

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Byte-offset-aware tokenizer for Netpbm headers.
pub(crate) struct PnmHeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmHeaderParser<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// Reads `P<digit>` and returns the digit byte.
    pub(crate) fn magic(&mut self) -> Result<u8> {
        match self.bytes {
            [b'P', d, ..] if d.is_ascii_digit() => {
                self.pos = 2;
                Ok(*d)
            }
            _ => Err(self.err(0, "missing Netpbm magic number")),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    pub(crate) fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value: usize = text
            .parse()
            .map_err(|_| self.err(start, format!("{what} out of range")))?;
        if value == 0 && what != "sample" {
            return Err(self.err(start, format!("{what} must be positive")));
        }
        Ok(value)
    }

    pub(crate) fn single_whitespace(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(self.pos, "expected whitespace before raster data")),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn next_non_space(&mut self, what: &str) -> Result<(usize, u8)> {
        self.skip_space_and_comments();
        match self.bytes.get(self.pos) {
            Some(&c) => {
                self.pos += 1;
                Ok((self.pos - 1, c))
            }
            None => Err(self.err(self.pos, format!("unexpected end of file reading {what}"))),
        }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut p = PnmHeaderParser::new(bytes);
    let magic = p.magic()?;
    let channels = match magic {
        b'2' | b'5' => 1,
        b'3' | b'6' => 3,
        other => {
            return Err(Error::Parse {
                offset: 1,
                message: format!("unsupported image format P{}", other as char),
            })
        }
    };
    let width = p.number("width")?;
    let height = p.number("height")?;
    let maxval = p.number("maxval")?;
    if maxval > 65535 {
        return Err(Error::Parse {
            offset: p.offset(),
            message: format!("maxval {maxval} too large"),
        });
    }
    let n = width * height * channels;
    let samples: Vec<usize> = if magic == b'5' || magic == b'6' {
        p.single_whitespace()?;
        if maxval < 256 {
            p.take(n, "raster")?.iter().map(|&b| b as usize).collect()
        } else {
            p.take(2 * n, "raster")?
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
                .collect()
        }
    } else {
        (0..n).map(|_| p.number("sample")).collect::<Result<_>>()?
    };
    if let Some(pos) = samples.iter().position(|&s| s > maxval) {
        return Err(Error::Parse {
            offset: p.offset(),
            message: format!("sample {pos} exceeds maxval {maxval}"),
        });
    }
    let scale = 1.0 / maxval as f64;
    let mut out = Tensor::zeros(&[3, height, width]);
    let plane = height * width;
    for idx in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { idx } else { idx * 3 + c };
            out.data_mut()[c * plane + idx] = samples[src] as f64 * scale;
        }
    }
    Ok(out)
}

/// 8-bit binary PPM of a `3×H×W` (or `1×H×W`, written as PGM) tensor in `[0,1]`.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let plane = h * w;
    match c {
        1 => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(image.data().iter().map(|&v| quant(v)));
            Ok(out)
        }
        3 => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            for idx in 0..plane {
                for ch in 0..3 {
                    out.push(quant(image.data()[ch * plane + idx]));
                }
            }
            Ok(out)
        }
        _ => Err(Error::Dimension(format!("cannot encode {c}-channel image"))),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_image(image)?).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary sibling then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn center_crop_square(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let side = h.min(w);
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    let mut out = Tensor::zeros(&[c, side, side]);
    for ch in 0..c {
        let src = image.channel(ch);
        let dst = out.channel_mut(ch);
        for i in 0..side {
            dst[i * side..(i + 1) * side]
                .copy_from_slice(&src[(top + i) * w + left..(top + i) * w + left + side]);
        }
    }
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize target must be non-empty".into()));
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = image.channel(ch);
        let dst = out.channel_mut(ch);
        for i in 0..out_h {
            let (i0, i1, fy) = coord(i, h, out_h);
            for j in 0..out_w {
                let (j0, j1, fx) = coord(j, w, out_w);
                let top = src[i0 * w + j0] * (1.0 - fx) + src[i0 * w + j1] * fx;
                let bottom = src[i1 * w + j0] * (1.0 - fx) + src[i1 * w + j1] * fx;
                dst[i * out_w + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct IngestedImages {
    pub train: Vec<(String, Tensor)>,
    pub val: Vec<(String, Tensor)>,
    pub skipped: Vec<(String, String)>,
}

fn is_image_name(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}

/// Decodes every Netpbm file in `dir`, center-crops to a square, resizes to
/// `resolution`, and splits into train/val. The split orders files by a
/// CRC-32 of their name and assigns the first `round(n·train_ratio)` to
/// training, so it depends only on the set of file names.
pub fn ingest_images(dir: &Path, resolution: usize, train_ratio: f64) -> Result<IngestedImages> {
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::Config(format!("train ratio {train_ratio} outside [0,1]")));
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_name(p))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no .ppm/.pgm/.pnm images in {}",
            dir.display()
        )));
    }
    let mut decoded = Vec::new();
    let mut skipped = Vec::new();
    for path in names {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = load_image(&path)
            .and_then(|img| center_crop_square(&img))
            .and_then(|img| resize_bilinear(&img, resolution, resolution));
        match image {
            Ok(img) => decoded.push((name, img)),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push((name, e.to_string()));
            }
        }
    }
    let mut order: Vec<usize> = (0..decoded.len()).collect();
    order.sort_by_key(|&i| (crc32fast::hash(decoded[i].0.as_bytes()), decoded[i].0.clone()));
    let n_train = (decoded.len() as f64 * train_ratio).round() as usize;
    let mut is_train = vec![false; decoded.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, val): (Vec<_>, Vec<_>) = decoded
        .into_iter()
        .zip(is_train)
        .partition(|(_, t)| *t);
    Ok(IngestedImages {
        train: train.into_iter().map(|(x, _)| x).collect(),
        val: val.into_iter().map(|(x, _)| x).collect(),
        skipped,
    })
}
