//! Adversarial training loop: one discriminator step then one generator
//! step per batch, with NDJSON metrics and resumable checkpoints.

mod adam;
pub mod checkpoint;
mod synth;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::ffl;
use crate::io::ingest_images;
use crate::losses::{
    adversarial_d, adversarial_g, feature_match, gradient_penalty, joint_total, l1_masked,
    lama_total, perceptual, tv, LamaComponents, LossValue, LossWeights,
};
use crate::masks::{generate, sample_type, Mask, MaskPolicy, MaskType};
use crate::model::{DiscConfig, Discriminator, Extractor, FfcConfig, Generator, GeneratorPass, ParamSet};
use crate::tensor::Tensor;

pub use adam::{adam_update, Adam, AdamConfig, AdamState};
pub use checkpoint::{CheckpointManifest, RngState, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use synth::{synth_dataset, synth_image, synth_item, SynthClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// `λ₁L1 + λ_adv L_adv + λ_PL L_PL + λ_fm L_fm`.
    #[serde(rename = "lama")]
    Lama,
    /// `α₁L_TV + α₂L_FFL + α₃L_LaMa`.
    #[serde(rename = "glama")]
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub resolution: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    pub mask_policy: MaskPolicy,
    pub loss_mode: LossMode,
    /// Seeds model initialization and batch/mask sampling.
    pub seed: u64,
    pub data_source: DataSource,
    pub data_dir: Option<PathBuf>,
    /// Seeds the synthetic collection.
    pub data_seed: u64,
    /// Number of synthetic training images.
    pub dataset_size: usize,
    /// Number of synthetic validation images.
    pub val_size: usize,
    /// Train share of a directory split.
    pub train_ratio: f64,
    /// 0 disables periodic checkpoints (initial and final are always written).
    pub checkpoint_every: u64,
    pub generator: FfcConfig,
    pub discriminator: DiscConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            batch_size: 4,
            steps: 2000,
            lr_g: 0.001,
            lr_d: 0.0001,
            weights: LossWeights::default(),
            mask_policy: MaskPolicy::GeneralMask,
            loss_mode: LossMode::Joint,
            seed: 0,
            data_source: DataSource::Synthetic,
            data_dir: None,
            data_seed: 0,
            dataset_size: 256,
            val_size: 8,
            train_ratio: 0.95,
            checkpoint_every: 500,
            generator: FfcConfig::default(),
            discriminator: DiscConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad(format!("learning rates must be positive: {} / {}", self.lr_g, self.lr_d));
        }
        if self.resolution < 32 || !self.resolution.is_power_of_two() {
            return bad(format!("resolution must be a power of two ≥ 32, got {}", self.resolution));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.data_source == DataSource::Directory && self.data_dir.is_none() {
            return bad("data_source = directory needs data_dir".into());
        }
        if self.data_source == DataSource::Synthetic && self.dataset_size == 0 {
            return bad("dataset_size must be ≥ 1".into());
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
}

pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match config.data_source {
        DataSource::Synthetic => {
            let n = config.dataset_size;
            let all = synth_dataset(n + config.val_size, config.resolution, config.data_seed);
            let (train, val) = all.split_at(n);
            Ok(Dataset {
                train: train.to_vec(),
                val: val.to_vec(),
            })
        }
        DataSource::Directory => {
            let dir = config
                .data_dir
                .as_ref()
                .ok_or_else(|| Error::Config("missing data_dir".into()))?;
            let got = ingest_images(dir, config.resolution, config.train_ratio)?;
            for (name, why) in &got.skipped {
                warn!("skipped {name}: {why}");
            }
            if got.train.is_empty() {
                return Err(Error::Config(format!("no training images in {}", dir.display())));
            }
            Ok(Dataset {
                train: got.train.into_iter().map(|(_, t)| t).collect(),
                val: got.val.into_iter().map(|(_, t)| t).collect(),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub types: Vec<MaskType>,
}

/// Mask type and generation seed for one batch item.
pub fn draw_mask_spec<R: Rng + ?Sized>(policy: MaskPolicy, rng: &mut R) -> (MaskType, u64) {
    let kind = sample_type(policy, rng);
    (kind, rng.random())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DMetrics {
    pub adversarial: f64,
    pub r1: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GMetrics {
    /// Unweighted per-term values averaged over the batch.
    pub terms: BTreeMap<String, f64>,
    /// Weight applied to each term in the total.
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub d: DMetrics,
    pub g: GMetrics,
    pub mask_types: Vec<MaskType>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: Extractor,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub data: Dataset,
    rng: ChaCha8Rng,
    step: u64,
}

fn add_scaled(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, s: f64) -> Result<()> {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.axpy(s, &g)?,
            None => {
                acc.insert(k, g.scale(s));
            }
        }
    }
    Ok(())
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Parse {
        offset: 0,
        message: format!("invalid rng state {s:?}"),
    };
    if s.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let data = load_dataset(&config)?;
        Self::with_dataset(config, data)
    }

    pub fn with_dataset(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        for t in data.train.iter().chain(&data.val) {
            if t.shape() != [3, config.resolution, config.resolution] {
                return Err(Error::Shape {
                    expected: vec![3, config.resolution, config.resolution],
                    actual: t.shape().to_vec(),
                });
            }
        }
        let generator = Generator::new(config.generator, config.seed)?;
        let discriminator = Discriminator::new(config.discriminator, config.seed.wrapping_add(1))?;
        let opt_g = Adam::new(&generator.params, config.lr_g, config.adam);
        let opt_d = Adam::new(&discriminator.params, config.lr_d, config.adam);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e5f_726e);
        Ok(Self {
            config,
            generator,
            discriminator,
            extractor: Extractor::default(),
            opt_g,
            opt_d,
            data,
            rng,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        let res = self.config.resolution;
        let mut batch = Batch {
            images: Vec::with_capacity(self.config.batch_size),
            masks: Vec::with_capacity(self.config.batch_size),
            types: Vec::with_capacity(self.config.batch_size),
        };
        for _ in 0..self.config.batch_size {
            let idx = self.rng.random_range(0..self.data.train.len());
            let (kind, seed) = draw_mask_spec(self.config.mask_policy, &mut self.rng);
            batch.images.push(self.data.train[idx].clone());
            batch.masks.push(generate(kind, res, res, seed)?);
            batch.types.push(kind);
        }
        Ok(batch)
    }

    /// Generator passes for a batch, recorded with trainable parameters.
    pub fn generate(&self, batch: &Batch) -> Result<Vec<GeneratorPass>> {
        batch
            .images
            .iter()
            .zip(&batch.masks)
            .map(|(x, m)| self.generator.trace(x, m, true))
            .collect()
    }

    /// One discriminator update on `L_D + λ_P·L_P` with `fakes` detached.
    pub fn train_step_d(&mut self, batch: &Batch, fakes: &[Tensor]) -> Result<DMetrics> {
        let n = batch.images.len() as f64;
        let mut grads = BTreeMap::new();
        let mut adversarial = 0.0;
        for ((x, m), fake) in batch.images.iter().zip(&batch.masks).zip(fakes) {
            let real = self.discriminator.trace(x, true)?;
            let fake = self.discriminator.trace(fake, true)?;
            let logits = real.graph.value(real.logits);
            let factor = x.shape()[1] / logits.shape()[1];
            let adv = adversarial_d(logits, fake.graph.value(fake.logits), &m.max_pool(factor)?)?;
            adversarial += adv.value / n;
            let gr = real.graph.backward(&[(real.logits, adv.grads["d_real"].clone())])?;
            let gf = fake.graph.backward(&[(fake.logits, adv.grads["d_fake"].clone())])?;
            add_scaled(&mut grads, gr.into_named(), 1.0 / n)?;
            add_scaled(&mut grads, gf.into_named(), 1.0 / n)?;
        }
        let lambda_p = self.config.weights.lambda_p;
        let mut r1 = 0.0;
        if lambda_p > 0.0 {
            let pen = gradient_penalty(&self.discriminator, &batch.images)?;
            r1 = pen.value;
            add_scaled(&mut grads, pen.grads, lambda_p)?;
        }
        let metrics = DMetrics {
            adversarial,
            r1,
            total: adversarial + lambda_p * r1,
        };
        if !metrics.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss at step {}: {metrics:?}",
                self.step + 1
            )));
        }
        self.opt_d.step(&mut self.discriminator.params, &grads)?;
        Ok(metrics)
    }

    /// One generator update on the configured objective; the discriminator
    /// only provides gradients.
    pub fn train_step_g(&mut self, batch: &Batch, passes: Vec<GeneratorPass>) -> Result<GMetrics> {
        let n = batch.images.len() as f64;
        let w = self.config.weights;
        let mode = self.config.loss_mode;
        let mut grads = BTreeMap::new();
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for ((x, m), pass) in batch.images.iter().zip(&batch.masks).zip(passes) {
            let obj = generator_objective(x, m, pass.graph.value(pass.output), &self.discriminator, &self.extractor, &w, mode)?;
            for (k, v) in &obj.terms {
                *terms.entry(k.clone()).or_default() += v / n;
            }
            total += obj.value / n;
            let gg = pass.graph.backward(&[(pass.output, obj.grad.scale(1.0 / n))])?;
            add_scaled(&mut grads, gg.into_named(), 1.0)?;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "generator loss at step {}: {terms:?}",
                self.step + 1
            )));
        }
        self.opt_g.step(&mut self.generator.params, &grads)?;
        Ok(GMetrics {
            weights: term_weights(mode, &w),
            terms,
            total,
        })
    }

    /// Samples a batch, then one D step and one G step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.sample_batch()?;
        let passes = self.generate(&batch)?;
        let fakes: Vec<Tensor> = passes.iter().map(|p| p.graph.value(p.output).clone()).collect();
        let g_before = cfg!(debug_assertions).then(|| self.generator.params.clone());
        let d = self.train_step_d(&batch, &fakes)?;
        if let Some(before) = g_before {
            assert_eq!(before, self.generator.params, "discriminator step touched the generator");
        }
        let d_before = cfg!(debug_assertions).then(|| self.discriminator.params.clone());
        let g = self.train_step_g(&batch, passes)?;
        if let Some(before) = d_before {
            assert_eq!(before, self.discriminator.params, "generator step touched the discriminator");
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            d,
            g,
            mask_types: batch.types,
        })
    }

    fn manifest(&self) -> CheckpointManifest {
        let t = |o: &Adam| o.states.values().next().map_or(0, |s| s.t);
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            generator_seed: self.generator.params.seed(),
            discriminator_seed: self.discriminator.params.seed(),
            adam_steps_g: t(&self.opt_g),
            adam_steps_d: t(&self.opt_d),
            rng: rng_state(&self.rng),
            tensors: Vec::new(),
            blob_len: 0,
            crc32: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, params, opt) in [
            ("g", &self.generator.params, &self.opt_g),
            ("d", &self.discriminator.params, &self.opt_d),
        ] {
            for (name, t) in params.iter() {
                let s = &opt.states[name];
                tensors.push((format!("{prefix}/param/{name}"), t));
                tensors.push((format!("{prefix}/adam_m/{name}"), &s.m));
                tensors.push((format!("{prefix}/adam_v/{name}"), &s.v));
            }
        }
        checkpoint::write(path, self.manifest(), &tensors)
    }

    /// Restores a trainer exactly; the dataset is rebuilt from the config.
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, _) = checkpoint::read(path)?;
        let data = load_dataset(&manifest.config)?;
        Self::load_with_dataset(path, data)
    }

    pub fn load_with_dataset(path: &Path, data: Dataset) -> Result<Self> {
        let (m, mut tensors) = checkpoint::read(path)?;
        let mut trainer = Self::with_dataset(m.config.clone(), data)?;
        let mut take = |key: String| {
            tensors
                .remove(&key)
                .ok_or_else(|| Error::MissingComponent(format!("checkpoint tensor {key}")))
        };
        let mut restore = |prefix: &str, seed: u64, reference: &ParamSet, opt: &mut Adam, steps: u64| -> Result<ParamSet> {
            let mut params = ParamSet::new(seed);
            for name in reference.names() {
                params.insert(name, take(format!("{prefix}/param/{name}"))?)?;
                let state = AdamState {
                    m: take(format!("{prefix}/adam_m/{name}"))?,
                    v: take(format!("{prefix}/adam_v/{name}"))?,
                    t: steps,
                };
                opt.states.insert(name.clone(), state);
            }
            Ok(params)
        };
        let gp = restore("g", m.generator_seed, &trainer.generator.params, &mut trainer.opt_g, m.adam_steps_g)?;
        let dp = restore("d", m.discriminator_seed, &trainer.discriminator.params, &mut trainer.opt_d, m.adam_steps_d)?;
        if !tensors.is_empty() {
            return Err(Error::Invariant(format!(
                "checkpoint has unknown tensors: {:?}",
                tensors.keys().collect::<Vec<_>>()
            )));
        }
        trainer.generator = Generator::from_params(m.config.generator, gp)?;
        trainer.discriminator = Discriminator::from_params(m.config.discriminator, dp)?;
        trainer.rng = restore_rng(&m.rng)?;
        trainer.step = m.step;
        Ok(trainer)
    }

    /// Trains until `until_step`, appending one JSON record per step to
    /// `metrics` and checkpointing into `out_dir`.
    pub fn run(&mut self, until_step: u64, out_dir: &Path, metrics: &mut impl Write) -> Result<PathBuf> {
        let every = self.config.checkpoint_every;
        while self.step < until_step {
            let record = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    let diag = serde_json::json!({"step": self.step + 1, "error": e.to_string()});
                    writeln!(metrics, "{diag}").map_err(|e| Error::io(out_dir, e))?;
                    metrics.flush().map_err(|e| Error::io(out_dir, e))?;
                    return Err(e);
                }
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Invariant(format!("metrics serialization: {e}")))?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(out_dir, e))?;
            if record.step % 100 == 0 {
                info!("step {} g_total {:.5} d_total {:.5}", record.step, record.g.total, record.d.total);
            }
            if every > 0 && self.step % every == 0 && self.step < until_step {
                self.save(&checkpoint_path(out_dir, self.step))?;
            }
        }
        metrics.flush().map_err(|e| Error::io(out_dir, e))?;
        let last = checkpoint_path(out_dir, self.step);
        self.save(&last)?;
        Ok(last)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorObjective {
    pub value: f64,
    /// Total derivative w.r.t. the generator output, including the paths
    /// through the (frozen) discriminator.
    pub grad: Tensor,
    /// Unweighted value of every term.
    pub terms: BTreeMap<String, f64>,
}

/// Generator objective for one sample: `lama_total` or `joint_total` of the
/// prediction `xhat` against `x`.
pub fn generator_objective(
    x: &Tensor,
    m: &Mask,
    xhat: &Tensor,
    discriminator: &Discriminator,
    extractor: &Extractor,
    w: &LossWeights,
    mode: LossMode,
) -> Result<GeneratorObjective> {
    let dp = discriminator.trace(xhat, false)?;
    let (_, real_feats) = crate::model::discriminator_forward(x, discriminator)?;
    let fake_feats: Vec<Tensor> = dp.features.iter().map(|&f| dp.graph.value(f).clone()).collect();
    let comps = LamaComponents {
        l1: Some(l1_masked(x, xhat, m)?),
        adversarial: Some(adversarial_g(dp.graph.value(dp.logits))?),
        perceptual: Some(perceptual(x, xhat, extractor)?),
        feature_match: Some(feature_match(&real_feats, &fake_feats)?),
    };
    let mut terms = BTreeMap::new();
    for (k, v) in [
        ("l1", &comps.l1),
        ("adv_g", &comps.adversarial),
        ("pl", &comps.perceptual),
        ("fm", &comps.feature_match),
    ] {
        terms.insert(k.to_string(), v.as_ref().map_or(0.0, |l| l.value));
    }
    let lama = lama_total(&comps, w)?;
    let objective: LossValue = match mode {
        LossMode::Lama => lama,
        LossMode::Joint => {
            let tv_loss = tv(xhat, w.beta_tv)?;
            let ffl_loss = ffl(x, xhat, w.alpha_ffl)?;
            terms.insert("tv".into(), tv_loss.value);
            terms.insert("ffl".into(), ffl_loss.value);
            joint_total(Some(&lama), Some(&tv_loss), Some(&ffl_loss), w)?
        }
    };
    let mut seeds = vec![(dp.logits, objective.grads["d_fake"].clone())];
    for (i, &f) in dp.features.iter().enumerate() {
        seeds.push((f, objective.grads[&format!("fake.{i}")].clone()));
    }
    let through_d = dp.graph.backward(&seeds)?;
    let mut grad = objective.grads["xhat"].clone();
    if let Some(g) = through_d.get(dp.input) {
        grad.add_assign(g)?;
    }
    Ok(GeneratorObjective {
        value: objective.value,
        grad,
        terms,
    })
}

/// Weight multiplying each recorded term in the total objective.
pub fn term_weights(mode: LossMode, w: &LossWeights) -> BTreeMap<String, f64> {
    let scale = match mode {
        LossMode::Lama => 1.0,
        LossMode::Joint => w.alpha3,
    };
    let mut out: BTreeMap<String, f64> = [
        ("l1", w.lambda1 * scale),
        ("adv_g", w.lambda_adv * scale),
        ("pl", w.lambda_pl * scale),
        ("fm", w.lambda_fm * scale),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    if mode == LossMode::Joint {
        out.insert("tv".into(), w.alpha1);
        out.insert("ffl".into(), w.alpha2);
    }
    out
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:07}.ckpt"))
}

pub const METRICS_FILE: &str = "metrics.ndjson";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Fresh run: writes the step-0 checkpoint, then trains `config.steps` steps.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone())?;
    run_trainer(trainer, config.steps, out_dir, false)
}

/// Continues from a checkpoint until `until_step`, appending to the metrics log.
pub fn resume_training(checkpoint: &Path, until_step: u64, out_dir: &Path) -> Result<TrainOutcome> {
    run_trainer(Trainer::load(checkpoint)?, until_step, out_dir, true)
}

pub fn run_trainer(mut trainer: Trainer, until_step: u64, out_dir: &Path, append: bool) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file: File = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if trainer.step() == 0 {
        trainer.save(&checkpoint_path(out_dir, 0))?;
    }
    let mut writer = BufWriter::new(file);
    let final_checkpoint = trainer.run(until_step, out_dir, &mut writer)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics: metrics_path,
    })
}

/// Generator and config stored in a checkpoint.
pub fn load_generator(path: &Path) -> Result<(CheckpointManifest, Generator)> {
    let (manifest, mut tensors) = checkpoint::read(path)?;
    let mut params = ParamSet::new(manifest.generator_seed);
    let reference = crate::model::init_params(&manifest.config.generator, manifest.generator_seed)?;
    for name in reference.names() {
        let key = format!("g/param/{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::MissingComponent(format!("checkpoint tensor {key}")))?;
        params.insert(name, t)?;
    }
    let g = Generator::from_params(manifest.config.generator, params)?;
    Ok((manifest, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            resolution: 32,
            batch_size: 2,
            steps: 3,
            dataset_size: 6,
            val_size: 2,
            checkpoint_every: 2,
            generator: FfcConfig {
                base_width: 4,
                n_residual: 1,
                ..FfcConfig::default()
            },
            discriminator: DiscConfig {
                base_width: 4,
                ..DiscConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_toml_roundtrip_and_validation() {
        let c = tiny();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        let partial = TrainConfig::from_toml("steps = 7\nloss_mode = \"lama\"\nmask_policy = \"lama-mask\"\n").unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.loss_mode, LossMode::Lama);
        assert_eq!(partial.mask_policy, MaskPolicy::LamaMask);
        assert_eq!((partial.lr_g, partial.lr_d), (0.001, 0.0001));
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("resolution = 48").is_err());
        assert!(TrainConfig::from_toml("lr_g = 0.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }

    #[test]
    fn joint_breakdown_has_exactly_six_terms() {
        let mut t = Trainer::new(tiny()).unwrap();
        let r = t.train_step().unwrap();
        let keys: Vec<&str> = r.g.terms.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["adv_g", "ffl", "fm", "l1", "pl", "tv"]);
        assert_eq!(r.g.weights["l1"], 10.0);
        assert_eq!(r.g.weights["pl"], 100.0);
        assert_eq!(r.g.weights["tv"], 1.0);
        let sum: f64 = r.g.terms.iter().map(|(k, v)| v * r.g.weights[k]).sum();
        assert!((sum - r.g.total).abs() < 1e-9 * r.g.total.abs().max(1.0));
    }

    #[test]
    fn steps_are_isolated() {
        let mut t = Trainer::new(tiny()).unwrap();
        let batch = t.sample_batch().unwrap();
        let passes = t.generate(&batch).unwrap();
        let fakes: Vec<Tensor> = passes.iter().map(|p| p.graph.value(p.output).clone()).collect();
        let g0 = t.generator.params.clone();
        let d0 = t.discriminator.params.clone();
        t.train_step_d(&batch, &fakes).unwrap();
        assert_eq!(t.generator.params, g0);
        assert_ne!(t.discriminator.params, d0);
        let d1 = t.discriminator.params.clone();
        t.train_step_g(&batch, passes).unwrap();
        assert_eq!(t.discriminator.params, d1);
        assert_ne!(t.generator.params, g0);
    }

    #[test]
    fn first_d_loss_is_near_balanced_value() {
        let mut cfg = tiny();
        cfg.weights.lambda_p = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let batch = t.sample_batch().unwrap();
        let fakes: Vec<Tensor> = t.generate(&batch).unwrap().iter().map(|p| p.graph.value(p.output).clone()).collect();
        let d = t.train_step_d(&batch, &fakes).unwrap();
        // Balanced labels at near-zero logits: ln 2 per real and per fake cell.
        assert!((d.adversarial - 2.0 * std::f64::consts::LN_2).abs() < 0.35, "{d:?}");
        assert_eq!(d.r1, 0.0);
    }

    #[test]
    fn discriminator_learns_separable_toy() {
        let mut t = Trainer::new(tiny()).unwrap();
        let fakes = vec![Tensor::full(&[3, 32, 32], 0.5); 2];
        let g0 = t.generator.params.clone();
        let batch = t.sample_batch().unwrap();
        let losses: Vec<f64> = (0..200).map(|_| t.train_step_d(&batch, &fakes).unwrap().total).collect();
        assert_eq!(t.generator.params, g0);
        let smoothed: Vec<f64> = losses.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
        for w in smoothed.windows(2) {
            assert!(w[1] < w[0], "{smoothed:?}");
        }
    }

    #[test]
    fn l1_only_overfits_single_image() {
        let mut cfg = tiny();
        cfg.batch_size = 1;
        cfg.dataset_size = 1;
        cfg.weights = LossWeights {
            lambda_adv: 0.0,
            lambda_pl: 0.0,
            lambda_fm: 0.0,
            lambda_p: 0.0,
            ..LossWeights::default()
        };
        cfg.loss_mode = LossMode::Lama;
        cfg.generator = FfcConfig::default();
        let mut t = Trainer::new(cfg).unwrap();
        let x = t.data.train[0].clone();
        let m = generate(MaskType::MediumStrokes, 32, 32, 11).unwrap();
        let probe = |t: &Trainer| l1_masked(&x, &t.generator.forward(&x, &m).unwrap(), &m).unwrap().value;
        let before = probe(&t);
        for _ in 0..500 {
            let r = t.train_step().unwrap();
            assert_eq!(r.g.weights["adv_g"], 0.0);
        }
        let after = probe(&t);
        assert!(after <= 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn mask_policy_histogram_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut counts: BTreeMap<MaskType, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(draw_mask_spec(MaskPolicy::GeneralMask, &mut rng).0).or_default() += 1;
        }
        assert_eq!(counts.len(), 7);
        for (k, c) in counts {
            assert!((c as f64 / n as f64 - 1.0 / 7.0).abs() <= 0.02, "{k:?}: {c}");
        }
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.steps = 0;
        let out = run_training(&cfg, dir.path()).unwrap();
        assert_eq!(out.final_checkpoint, checkpoint_path(dir.path(), 0));
        let ckpts: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
            .collect();
        assert_eq!(ckpts.len(), 1);
        assert_eq!(std::fs::read_to_string(&out.metrics).unwrap(), "");
    }

    #[test]
    fn save_load_is_exact_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.steps = 4;
        let full = run_training(&cfg, &dir.path().join("full")).unwrap();
        let again = run_training(&cfg, &dir.path().join("again")).unwrap();
        let log = std::fs::read_to_string(&full.metrics).unwrap();
        assert_eq!(log, std::fs::read_to_string(&again.metrics).unwrap());
        assert_eq!(log.lines().count(), 4);

        let half = dir.path().join("half");
        let mut c2 = cfg.clone();
        c2.steps = 2;
        let first = run_training(&c2, &half).unwrap();
        let t = Trainer::load(&first.final_checkpoint).unwrap();
        t.save(&dir.path().join("copy.ckpt")).unwrap();
        assert_eq!(
            std::fs::read(&first.final_checkpoint).unwrap(),
            std::fs::read(dir.path().join("copy.ckpt")).unwrap()
        );
        resume_training(&first.final_checkpoint, 4, &half).unwrap();
        assert_eq!(std::fs::read_to_string(half.join(METRICS_FILE)).unwrap(), log);
        let (_, g_full) = load_generator(&full.final_checkpoint).unwrap();
        let (_, g_half) = load_generator(&checkpoint_path(&half, 4)).unwrap();
        assert_eq!(g_full, g_half);
    }
}
