//! Registry of finite-difference gradient checks over every loss, both
//! composite objectives, the penalty's parameter gradients and the generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::frequency::{ffl, ffl_with_weights, focal_weights};
use crate::gradcheck::{grad_check, grad_check_coords, GradReport};
use crate::losses::{
    adversarial_d, adversarial_g, feature_match, gradient_penalty, l1_masked, perceptual, tv, LossWeights,
};
use crate::masks::{generate, Mask, MaskType};
use crate::model::{DiscConfig, Discriminator, Extractor, FfcConfig, Generator, ParamSet};
use crate::tensor::Tensor;
use crate::train::{generator_objective, LossMode};

pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(f64) -> Result<GradReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradOutcome {
    pub name: String,
    pub tolerance: f64,
    pub report: Option<GradReport>,
    pub error: Option<String>,
}

impl GradOutcome {
    pub fn passed(&self) -> bool {
        self.report.as_ref().is_some_and(|r| r.passed)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(side: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[3, side, side], 0.0, 1.0, &mut rng(seed))
}

fn mask(side: usize, seed: u64) -> Result<Mask> {
    generate(MaskType::MediumStrokes, side.max(16), side.max(16), seed).and_then(|m| {
        let big = m.width();
        let bits = (0..side * side).map(|k| m.bits()[(k / side) * big + k % side]).collect();
        Mask::raw(side, side, bits)
    })
}

fn sample_coords(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n.min(len)).map(|_| r.random_range(0..len)).collect()
}

fn small_disc() -> Result<Discriminator> {
    Discriminator::new(
        DiscConfig {
            base_width: 4,
            ..DiscConfig::default()
        },
        31,
    )
}

fn small_gen() -> Result<Generator> {
    Generator::new(
        FfcConfig {
            base_width: 4,
            n_residual: 1,
            ..FfcConfig::default()
        },
        41,
    )
}

/// Moves biases off their zero initialization so no ReLU input of the
/// checked point sits exactly on the kink (dead upstream units otherwise
/// leave pre-activations at exactly the bias).
pub(crate) fn jitter_biases(params: &ParamSet, scale: f64) -> ParamSet {
    params.map(|name, t| {
        if name.ends_with(".b") {
            let seed = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
            Tensor::uniform(t.shape(), -scale, scale, &mut rng(seed))
        } else {
            t.clone()
        }
    })
}

fn check_l1(tol: f64) -> Result<GradReport> {
    let (x, xh, m) = (image(8, 1), image(8, 2), mask(8, 3)?);
    grad_check(
        |p| {
            let l = l1_masked(&x, p, &m)?;
            Ok((l.value, l.grads["xhat"].clone()))
        },
        &xh,
        1e-4,
        tol,
    )
}

fn logits(seed: u64) -> Tensor {
    Tensor::uniform(&[1, 8, 8], -3.0, 3.0, &mut rng(seed))
}

fn check_adv_d(tol: f64) -> Result<GradReport> {
    let (real, fake, m) = (logits(4), logits(5), mask(8, 6)?);
    let a = grad_check(
        |p| {
            let l = adversarial_d(&real, p, &m)?;
            Ok((l.value, l.grads["d_fake"].clone()))
        },
        &fake,
        1e-4,
        tol,
    )?;
    let b = grad_check(
        |p| {
            let l = adversarial_d(p, &fake, &m)?;
            Ok((l.value, l.grads["d_real"].clone()))
        },
        &real,
        1e-4,
        tol,
    )?;
    Ok(worse(a, b))
}

fn worse(a: GradReport, b: GradReport) -> GradReport {
    let passed = a.passed && b.passed;
    let mut out = if a.max_rel_err >= b.max_rel_err { a.clone() } else { b.clone() };
    out.max_abs_err = a.max_abs_err.max(b.max_abs_err);
    out.passed = passed;
    out
}

fn check_adv_g(tol: f64) -> Result<GradReport> {
    grad_check(
        |p| {
            let l = adversarial_g(p)?;
            Ok((l.value, l.grads["d_fake"].clone()))
        },
        &logits(7),
        1e-4,
        tol,
    )
}

fn check_perceptual(tol: f64) -> Result<GradReport> {
    let (x, xh) = (image(16, 8), image(16, 9));
    let e = Extractor::default();
    grad_check(
        |p| {
            let l = perceptual(&x, p, &e)?;
            Ok((l.value, l.grads["xhat"].clone()))
        },
        &xh,
        1e-4,
        tol,
    )
}

fn check_feature_match(tol: f64) -> Result<GradReport> {
    let mut r = rng(10);
    let real: Vec<Tensor> = (0..3).map(|i| Tensor::uniform(&[2, 8 >> i, 8 >> i], -1.0, 1.0, &mut r)).collect();
    let fake: Vec<Tensor> = real.iter().map(|t| Tensor::uniform(t.shape(), -1.0, 1.0, &mut r)).collect();
    let mut worst: Option<GradReport> = None;
    for i in 0..fake.len() {
        let rep = grad_check(
            |p| {
                let mut f = fake.clone();
                f[i] = p.clone();
                let l = feature_match(&real, &f)?;
                Ok((l.value, l.grads[&format!("fake.{i}")].clone()))
            },
            &fake[i],
            1e-4,
            tol,
        )?;
        worst = Some(match worst {
            Some(w) => worse(w, rep),
            None => rep,
        });
    }
    Ok(worst.expect("three levels"))
}

fn check_tv(tol: f64) -> Result<GradReport> {
    let xh = image(8, 11);
    let mut worst: Option<GradReport> = None;
    for beta in [2.0, 1.5] {
        let rep = grad_check(
            |p| {
                let l = tv(p, beta)?;
                Ok((l.value, l.grads["xhat"].clone()))
            },
            &xh,
            1e-5,
            tol,
        )?;
        worst = Some(match worst {
            Some(w) => worse(w, rep),
            None => rep,
        });
    }
    Ok(worst.expect("two exponents"))
}

fn check_ffl(tol: f64) -> Result<GradReport> {
    let (x, xh) = (image(8, 12), image(8, 13));
    let frozen = focal_weights(&x, &xh, 1.0)?;
    let analytic = ffl(&x, &xh, 1.0)?.grads["xhat"].clone();
    grad_check(
        |p| Ok((ffl_with_weights(&x, p, &frozen)?.value, analytic.clone())),
        &xh,
        1e-4,
        tol,
    )
}

fn check_penalty(tol: f64) -> Result<GradReport> {
    let d = small_disc()?;
    let batch = vec![image(32, 14), image(32, 15)];
    let pen = gradient_penalty(&d, &batch)?;
    let mut worst: Option<GradReport> = None;
    for (k, (name, t)) in d.params.iter().enumerate() {
        // Biases do not reach the input gradient of a piecewise-linear net.
        if name.ends_with(".b") {
            if pen.grads[name].data().iter().any(|&v| v != 0.0) {
                return Err(crate::Error::Invariant(format!("{name}: bias gradient of R1 must be 0")));
            }
            continue;
        }
        let coords = sample_coords(t.len(), 4, 100 + k as u64);
        let f = |v: &Tensor| -> Result<f64> {
            let mut p = d.params.clone();
            *p.get_mut(name)? = v.clone();
            Ok(gradient_penalty(&Discriminator::from_params(d.config, p)?, &batch)?.value)
        };
        let rep = grad_check_coords(f, &pen.grads[name], t, 1e-5, tol, &coords)?;
        worst = Some(match worst {
            Some(w) => worse(w, rep),
            None => rep,
        });
    }
    Ok(worst.expect("discriminator has weights"))
}

fn check_composite(mode: LossMode, tol: f64) -> Result<GradReport> {
    let (x, xh, m) = (image(32, 16), image(32, 17), generate(MaskType::ThickStrokes, 32, 32, 18)?);
    let d = small_disc()?;
    let e = Extractor::default();
    let w = LossWeights::default();
    let obj = generator_objective(&x, &m, &xh, &d, &e, &w, mode)?;
    let frozen = focal_weights(&x, &xh, w.alpha_ffl)?;
    let f = |p: &Tensor| -> Result<f64> {
        let o = generator_objective(&x, &m, p, &d, &e, &w, mode)?;
        Ok(match mode {
            LossMode::Lama => o.value,
            LossMode::Joint => {
                o.value - w.alpha2 * ffl(&x, p, w.alpha_ffl)?.value + w.alpha2 * ffl_with_weights(&x, p, &frozen)?.value
            }
        })
    };
    let coords = sample_coords(xh.len(), 48, 19);
    grad_check_coords(f, &obj.grad, &xh, 1e-4, tol, &coords)
}

fn check_lama_total(tol: f64) -> Result<GradReport> {
    check_composite(LossMode::Lama, tol)
}

fn check_joint_total(tol: f64) -> Result<GradReport> {
    check_composite(LossMode::Joint, tol)
}

fn check_generator(tol: f64) -> Result<GradReport> {
    let g = small_gen()?;
    let g = Generator::from_params(g.config, jitter_biases(&g.params, 0.1))?;
    let (x, m) = (image(16, 20), mask(16, 21)?);
    let m = Mask::new(16, 16, m.bits().to_vec())?;
    let probe = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng(22));
    let pass = g.trace(&x, &m, true)?;
    let grads = pass.graph.backward(&[(pass.output, probe.clone())])?.into_named();
    let mut worst: Option<GradReport> = None;
    for (k, (name, t)) in g.params.iter().enumerate() {
        let coords = sample_coords(t.len(), 3, 200 + k as u64);
        let f = |v: &Tensor| -> Result<f64> {
            let mut p = g.params.clone();
            *p.get_mut(name)? = v.clone();
            Generator::from_params(g.config, p)?.forward(&x, &m)?.dot(&probe)
        };
        let rep = grad_check_coords(f, &grads[name], t, 1e-6, tol, &coords)?;
        worst = Some(match worst {
            Some(w) => worse(w, rep),
            None => rep,
        });
    }
    Ok(worst.expect("generator has parameters"))
}

/// Every registered check with its pass tolerance (relative error).
pub fn registry() -> Vec<GradCase> {
    let loss = |name, run| GradCase {
        name,
        tolerance: LOSS_TOLERANCE,
        run,
    };
    vec![
        loss("l1_masked", check_l1),
        loss("adversarial_d", check_adv_d),
        loss("adversarial_g", check_adv_g),
        loss("perceptual", check_perceptual),
        loss("feature_match", check_feature_match),
        loss("tv", check_tv),
        loss("ffl", check_ffl),
        loss("gradient_penalty", check_penalty),
        loss("lama_total", check_lama_total),
        loss("joint_total", check_joint_total),
        GradCase {
            name: "generator",
            tolerance: MODEL_TOLERANCE,
            run: check_generator,
        },
    ]
}

pub fn run_case(case: &GradCase) -> GradOutcome {
    let (report, error) = match (case.run)(case.tolerance) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    GradOutcome {
        name: case.name.to_string(),
        tolerance: case.tolerance,
        report,
        error,
    }
}

pub fn run_all() -> Vec<GradOutcome> {
    registry().iter().map(run_case).collect()
}
