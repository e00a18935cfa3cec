//! Two-dimensional discrete Fourier transforms.
//!
//! Convention: the forward transform is unnormalized,
//! `G(u,v) = Σ x(a,b)·exp(−2πi(ua/M + vb/N))`, and the inverse carries the
//! `1/(MN)` factor. Power-of-two lengths use an iterative radix-2 kernel;
//! other lengths fall back to a direct O(n²) DFT per axis.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Imaginary residue above which `ifft2` refuses a spectrum as non-real.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if re.len() != height * width || im.len() != height * width {
            return Err(Error::Dimension(format!(
                "complex grid {height}×{width} needs {} re/im values, got {}/{}",
                height * width,
                re.len(),
                im.len()
            )));
        }
        Ok(Self {
            height,
            width,
            re,
            im,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        let i = u * self.width + v;
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, u: usize, v: usize, value: Complex64) {
        let i = u * self.width + v;
        self.re[i] = value.re;
        self.im[i] = value.im;
    }

    pub fn norm_sqr(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect()
    }

    fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    fn from_complex(height: usize, width: usize, values: &[Complex64]) -> Self {
        Self {
            height,
            width,
            re: values.iter().map(|c| c.re).collect(),
            im: values.iter().map(|c| c.im).collect(),
        }
    }

    /// Largest violation of `G(u,v) = conj(G(−u mod M, −v mod N))`.
    pub fn symmetry_residue(&self) -> f64 {
        let (m, n) = (self.height, self.width);
        let mut worst = 0.0f64;
        for u in 0..m {
            for v in 0..n {
                let a = self.get(u, v);
                let b = self.get((m - u) % m, (n - v) % n).conj();
                worst = worst.max((a - b).norm());
            }
        }
        worst
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "empty grid {height}×{width}"
        )));
    }
    Ok(())
}

/// Forward 2D DFT of a real `height×width` grid (row-major).
pub fn fft2(input: &[f64], height: usize, width: usize) -> Result<ComplexGrid> {
    check_dims(height, width)?;
    if input.len() != height * width {
        return Err(Error::Dimension(format!(
            "grid {height}×{width} needs {} values, got {}",
            height * width,
            input.len()
        )));
    }
    let mut buf: Vec<Complex64> = input.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform_2d(&mut buf, height, width, Direction::Forward);
    Ok(ComplexGrid::from_complex(height, width, &buf))
}

/// Inverse 2D DFT with `1/(MN)` normalization. The input must be the
/// spectrum of a real signal; imaginary output residue above
/// [`SYMMETRY_TOLERANCE`] is an error.
pub fn ifft2(input: &ComplexGrid) -> Result<Vec<f64>> {
    let out = ifft2_complex(input)?;
    let residue = out.im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residue > SYMMETRY_TOLERANCE {
        return Err(Error::Symmetry { residue });
    }
    Ok(out.re)
}

/// Forward 2D DFT of a complex grid.
pub fn fft2_complex(input: &ComplexGrid) -> Result<ComplexGrid> {
    check_dims(input.height, input.width)?;
    let mut buf = input.to_complex();
    transform_2d(&mut buf, input.height, input.width, Direction::Forward);
    Ok(ComplexGrid::from_complex(input.height, input.width, &buf))
}

/// Inverse 2D DFT (normalized) of a complex grid, keeping the imaginary part.
pub fn ifft2_complex(input: &ComplexGrid) -> Result<ComplexGrid> {
    check_dims(input.height, input.width)?;
    let mut buf = input.to_complex();
    transform_2d(&mut buf, input.height, input.width, Direction::Inverse);
    let scale = 1.0 / (input.height * input.width) as f64;
    for c in &mut buf {
        *c *= scale;
    }
    Ok(ComplexGrid::from_complex(input.height, input.width, &buf))
}

/// Width of the half spectrum kept by [`rfft2`].
pub fn half_width(width: usize) -> usize {
    width / 2 + 1
}

/// Half-spectrum forward transform: bins `v = 0..=N/2` of [`fft2`].
pub fn rfft2(input: &[f64], height: usize, width: usize) -> Result<ComplexGrid> {
    let full = fft2(input, height, width)?;
    let hw = half_width(width);
    let mut out = ComplexGrid::zeros(height, hw);
    for u in 0..height {
        for v in 0..hw {
            out.set(u, v, full.get(u, v));
        }
    }
    Ok(out)
}

/// Weight of half-spectrum column `v` when expanding to the full spectrum.
pub fn half_column_weight(v: usize, width: usize) -> f64 {
    if v == 0 || (width % 2 == 0 && v == width / 2) {
        1.0
    } else {
        2.0
    }
}

/// Real inverse of a half spectrum: `y = (1/MN) Σ_u Σ_{v≤N/2} c_v Re[Y e^{iθ}]`
/// with `c_v` from [`half_column_weight`]. Linear in `(Re Y, Im Y)` for any
/// input and the exact inverse of [`rfft2`] on real signals.
pub fn irfft2(input: &ComplexGrid, width: usize) -> Result<Vec<f64>> {
    let height = input.height;
    if input.width != half_width(width) {
        return Err(Error::Dimension(format!(
            "half spectrum width {} does not match output width {width}",
            input.width
        )));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); height * width];
    for u in 0..height {
        for v in 0..input.width {
            buf[u * width + v] = input.get(u, v) * half_column_weight(v, width);
        }
    }
    transform_2d(&mut buf, height, width, Direction::Inverse);
    let scale = 1.0 / (height * width) as f64;
    Ok(buf.iter().map(|c| c.re * scale).collect())
}

/// Adjoint of [`rfft2`] viewed as a real-linear map `x ↦ (Re G, Im G)`.
pub fn rfft2_adjoint(grad: &ComplexGrid, width: usize) -> Result<Vec<f64>> {
    let height = grad.height;
    let mut buf = vec![Complex64::new(0.0, 0.0); height * width];
    for u in 0..height {
        for v in 0..grad.width {
            buf[u * width + v] = grad.get(u, v);
        }
    }
    transform_2d(&mut buf, height, width, Direction::Inverse);
    Ok(buf.iter().map(|c| c.re).collect())
}

/// Adjoint of [`irfft2`] viewed as a real-linear map `(Re Y, Im Y) ↦ y`.
pub fn irfft2_adjoint(grad: &[f64], height: usize, width: usize) -> Result<ComplexGrid> {
    let full = fft2(grad, height, width)?;
    let hw = half_width(width);
    let scale = 1.0 / (height * width) as f64;
    let mut out = ComplexGrid::zeros(height, hw);
    for u in 0..height {
        for v in 0..hw {
            out.set(u, v, full.get(u, v) * (half_column_weight(v, width) * scale));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

fn transform_2d(buf: &mut [Complex64], height: usize, width: usize, dir: Direction) {
    let row_plan = Plan::new(width, dir);
    for row in buf.chunks_exact_mut(width) {
        row_plan.run(row);
    }
    let col_plan = Plan::new(height, dir);
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for v in 0..width {
        for u in 0..height {
            col[u] = buf[u * width + v];
        }
        col_plan.run(&mut col);
        for u in 0..height {
            buf[u * width + v] = col[u];
        }
    }
}

/// Precomputed twiddles for one transform length.
struct Plan {
    len: usize,
    twiddles: Vec<Complex64>,
    radix2: bool,
}

impl Plan {
    fn new(len: usize, dir: Direction) -> Self {
        let sign = match dir {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        };
        let twiddles = (0..len)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / len as f64))
            .collect();
        Self {
            len,
            twiddles,
            radix2: len.is_power_of_two(),
        }
    }

    fn run(&self, data: &mut [Complex64]) {
        if self.len <= 1 {
            return;
        }
        if self.radix2 {
            self.radix2(data);
        } else {
            self.direct(data);
        }
    }

    fn radix2(&self, data: &mut [Complex64]) {
        let n = self.len;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                data.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let t = self.twiddles[k * stride] * data[start + k + half];
                    let a = data[start + k];
                    data[start + k] = a + t;
                    data[start + k + half] = a - t;
                }
            }
            size *= 2;
        }
    }

    fn direct(&self, data: &mut [Complex64]) {
        let n = self.len;
        let input = data.to_vec();
        for (k, out) in data.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, x) in input.iter().enumerate() {
                acc += x * self.twiddles[(k * j) % n];
            }
            *out = acc;
        }
    }
}

/// Moves the DC bin of a row-major `height×width` grid to the center.
pub fn fftshift(grid: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for u in 0..height {
        for v in 0..width {
            let su = (u + height / 2) % height;
            let sv = (v + width / 2) % width;
            out[su * width + sv] = grid[u * width + v];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(M²N²) reference transform, written independently of the kernels above.
    fn brute_dft(x: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; m * n];
        let mut im = vec![0.0; m * n];
        for u in 0..m {
            for v in 0..n {
                for a in 0..m {
                    for b in 0..n {
                        let theta = -2.0
                            * PI
                            * ((u * a) as f64 / m as f64 + (v * b) as f64 / n as f64);
                        re[u * n + v] += x[a * n + b] * theta.cos();
                        im[u * n + v] += x[a * n + b] * theta.sin();
                    }
                }
            }
        }
        (re, im)
    }

    fn random_grid(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_grid_is_dc_only() {
        let g = fft2(&[0.3; 12], 3, 4).unwrap();
        assert!((g.get(0, 0).re - 0.3 * 12.0).abs() < 1e-12);
        for i in 1..12 {
            assert!(g.re()[i].abs() < 1e-12 && g.im()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_is_identity() {
        let g = fft2(&[2.5], 1, 1).unwrap();
        assert_eq!(g.get(0, 0), Complex64::new(2.5, 0.0));
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(matches!(fft2(&[], 0, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn matches_brute_force_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, n) in [(4, 4), (8, 4), (3, 5), (6, 8)] {
            let x = random_grid(&mut rng, m * n);
            let g = fft2(&x, m, n).unwrap();
            let (re, im) = brute_dft(&x, m, n);
            for i in 0..m * n {
                assert!((g.re()[i] - re[i]).abs() < 1e-10, "{m}x{n} re {i}");
                assert!((g.im()[i] - im[i]).abs() < 1e-10, "{m}x{n} im {i}");
            }
        }
    }

    #[test]
    fn inverse_roundtrip_and_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_grid(&mut rng, 64);
        let back = ifft2(&fft2(&x, 8, 8).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert_eq!(ifft2(&ComplexGrid::zeros(4, 4)).unwrap(), vec![0.0; 16]);
        let mut dc = ComplexGrid::zeros(4, 8);
        dc.set(0, 0, Complex64::new(32.0, 0.0));
        assert!(ifft2(&dc).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut g = ComplexGrid::zeros(4, 4);
        g.set(0, 1, Complex64::new(1.0, 0.0));
        assert!(matches!(ifft2(&g), Err(Error::Symmetry { .. })));
    }

    #[test]
    fn real_input_is_conjugate_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_grid(&mut rng, 30);
        assert!(fft2(&x, 5, 6).unwrap().symmetry_residue() < 1e-12);
    }

    #[test]
    fn half_spectrum_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (m, n) in [(8, 8), (4, 16), (2, 2), (1, 4)] {
            let x = random_grid(&mut rng, m * n);
            let y = irfft2(&rfft2(&x, m, n).unwrap(), n).unwrap();
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_spectrum_adjoints_satisfy_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (4, 8);
        let hw = half_width(n);
        let x = random_grid(&mut rng, m * n);
        let gr = random_grid(&mut rng, m * hw);
        let gi = random_grid(&mut rng, m * hw);
        let g = ComplexGrid::new(m, hw, gr.clone(), gi.clone()).unwrap();

        // <rfft x, g> = <x, rfft^T g>
        let fx = rfft2(&x, m, n).unwrap();
        let lhs: f64 = fx.re().iter().zip(&gr).map(|(a, b)| a * b).sum::<f64>()
            + fx.im().iter().zip(&gi).map(|(a, b)| a * b).sum::<f64>();
        let adj = rfft2_adjoint(&g, n).unwrap();
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        // <irfft g, x> = <g, irfft^T x>
        let y = irfft2(&g, n).unwrap();
        let lhs: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
        let adj = irfft2_adjoint(&x, m, n).unwrap();
        let rhs: f64 = adj.re().iter().zip(&gr).map(|(a, b)| a * b).sum::<f64>()
            + adj.im().iter().zip(&gi).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn shift_centers_dc() {
        let mut g = vec![0.0; 16];
        g[0] = 1.0;
        let s = fftshift(&g, 4, 4);
        assert_eq!(s[2 * 4 + 2], 1.0);
    }
}
