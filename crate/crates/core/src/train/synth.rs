//! Procedural training images with strongly structured spectra.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthClass {
    Checkerboard,
    Grating,
    Blobs,
    Voronoi,
    Gradient,
}

impl SynthClass {
    pub const ALL: [SynthClass; 5] = [
        SynthClass::Checkerboard,
        SynthClass::Grating,
        SynthClass::Blobs,
        SynthClass::Voronoi,
        SynthClass::Gradient,
    ];
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn paint(res: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Tensor {
    let mut t = Tensor::zeros(&[3, res, res]);
    for i in 0..res {
        for j in 0..res {
            let c = f(i, j);
            for (ch, v) in c.iter().enumerate() {
                t.channel_mut(ch)[i * res + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    t
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// One image of `class`, drawn from `rng`.
pub fn synth_image<R: Rng>(class: SynthClass, res: usize, rng: &mut R) -> Tensor {
    match class {
        SynthClass::Checkerboard => {
            let cell = rng.random_range(2..=(res / 4).max(2));
            let (a, b) = (color(rng), color(rng));
            let (oi, oj) = (rng.random_range(0..cell), rng.random_range(0..cell));
            paint(res, |i, j| if ((i + oi) / cell + (j + oj) / cell) % 2 == 0 { a } else { b })
        }
        SynthClass::Grating => {
            let theta = rng.random_range(0.0..PI);
            let cycles = rng.random_range(1.0..(res as f64 / 6.0).max(1.5));
            let phase = rng.random_range(0.0..2.0 * PI);
            let (a, b) = (color(rng), color(rng));
            let (s, c) = theta.sin_cos();
            paint(res, |i, j| {
                let u = (c * j as f64 + s * i as f64) / res as f64;
                mix(a, b, 0.5 + 0.5 * (2.0 * PI * cycles * u + phase).sin())
            })
        }
        SynthClass::Blobs => {
            let bg = color(rng);
            let n = rng.random_range(1..=5);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n)
                .map(|_| {
                    let sigma = rng.random_range(res as f64 / 16.0..res as f64 / 4.0);
                    (
                        rng.random_range(0.0..res as f64),
                        rng.random_range(0.0..res as f64),
                        sigma,
                        color(rng),
                    )
                })
                .collect();
            paint(res, |i, j| {
                let mut c = bg;
                for &(ci, cj, sigma, col) in &blobs {
                    let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    c = mix(c, col, (-d2 / (2.0 * sigma * sigma)).exp());
                }
                c
            })
        }
        SynthClass::Voronoi => {
            let n = rng.random_range(4..=12);
            let sites: Vec<(f64, f64, [f64; 3])> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.0..res as f64),
                        rng.random_range(0.0..res as f64),
                        color(rng),
                    )
                })
                .collect();
            paint(res, |i, j| {
                let d = |s: &(f64, f64, [f64; 3])| (i as f64 - s.0).powi(2) + (j as f64 - s.1).powi(2);
                sites
                    .iter()
                    .min_by(|a, b| d(a).total_cmp(&d(b)))
                    .map(|s| s.2)
                    .unwrap_or([0.5; 3])
            })
        }
        SynthClass::Gradient => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let (a, b) = (color(rng), color(rng));
            let (s, c) = theta.sin_cos();
            let half = (res as f64 - 1.0) / 2.0;
            let span = half * (s.abs() + c.abs());
            paint(res, |i, j| {
                let u = (c * (j as f64 - half) + s * (i as f64 - half)) / span.max(1.0);
                mix(a, b, 0.5 + 0.5 * u)
            })
        }
    }
}

/// Class and image `index` of the collection seeded by `seed`.
pub fn synth_item(index: usize, res: usize, seed: u64) -> (SynthClass, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let class = SynthClass::ALL[rng.random_range(0..SynthClass::ALL.len())];
    (class, synth_image(class, res, &mut rng))
}

/// `n` deterministic images; each depends only on `(index, resolution, seed)`.
pub fn synth_dataset(n: usize, resolution: usize, seed: u64) -> Vec<Tensor> {
    (0..n).map(|i| synth_item(i, resolution, seed).1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_dataset(20, 32, 4);
        assert_eq!(a, synth_dataset(20, 32, 4));
        assert_ne!(a, synth_dataset(20, 32, 5));
        for t in &a {
            assert_eq!(t.shape(), &[3, 32, 32]);
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(synth_dataset(5, 32, 4)[..], a[..5]);
    }

    #[test]
    fn class_mix_is_uniform() {
        let n = 10_000;
        let mut counts: HashMap<SynthClass, usize> = HashMap::new();
        for i in 0..n {
            *counts.entry(synth_item(i, 8, 9).0).or_default() += 1;
        }
        for class in SynthClass::ALL {
            let f = counts[&class] as f64 / n as f64;
            assert!((f - 0.2).abs() <= 0.02, "{class:?}: {f}");
        }
    }

    #[test]
    fn every_class_is_non_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for class in SynthClass::ALL {
            let t = synth_image(class, 32, &mut rng);
            let (lo, hi) = t.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(hi - lo > 1e-3, "{class:?}");
        }
    }
}
