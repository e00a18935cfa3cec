//! Deterministic fixtures shared by the benchmarks.

use inpaint_core::masks::generate;
use inpaint_core::{Mask, MaskType, Tensor};

/// Smooth-plus-texture `3×side×side` image in `[0, 1]`, fixed by `seed`.
pub fn image(side: usize, seed: u64) -> Tensor {
    let phase = seed as f64 * 0.731;
    Tensor::from_fn(&[3, side, side], |k| {
        let (c, i, j) = (k / (side * side), (k / side) % side, k % side);
        let (y, x) = (i as f64 / side as f64, j as f64 / side as f64);
        let v = 0.5 + 0.3 * (6.0 * x + 4.0 * y + phase + c as f64).sin() + 0.15 * (37.0 * x * y + phase).cos();
        v.clamp(0.0, 1.0)
    })
}

/// Medium-stroke hole mask.
pub fn mask(side: usize, seed: u64) -> Mask {
    generate(MaskType::MediumStrokes, side, side, seed).expect("side ≥ 16")
}

/// `cout×cin×k×k` kernel with small deterministic weights.
pub fn kernel(cout: usize, cin: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[cout, cin, k, k], |i| ((i * 7919) % 101) as f64 / 101.0 - 0.5)
}
