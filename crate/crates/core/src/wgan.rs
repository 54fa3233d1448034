//! Wasserstein GAN for spectrogram augmentation.
//!
//! The generator maps uniform latent vectors to `1 x rows x cols` images in
//! `[0, 1]`; the critic is a small conv trunk with a linear scalar head.
//! Training alternates critic and generator updates with weight clipping and
//! records a real-vs-fake accuracy probe after every epoch.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{critic_spec, sigmoid, upsampler_spec, Batch, Network, OptimizerConfig, Optimizer, Shape};
use crate::sonogen::{DatasetManifest, Split};
use crate::spg;

pub const LATENT_DIM: usize = 100;

pub const GENERATOR_FILE: &str = "generator.nnp";
pub const CRITIC_FILE: &str = "critic.nnp";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    Wasserstein,
    /// Logistic critic with the non-saturating generator loss.
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Alternation {
    /// `critic_steps` critic updates before every generator update.
    PerBatch,
    /// Whole epochs of critic-only updates followed by generator-only epochs.
    PerEpoch {
        critic_epochs: usize,
        generator_epochs: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WganConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_steps: usize,
    /// Critic weights are clamped to `[-clip, clip]` after each update.
    pub clip: Option<f64>,
    pub loss: GanLoss,
    pub alternation: Alternation,
    pub critic_optimizer: OptimizerConfig,
    pub generator_optimizer: OptimizerConfig,
    pub latent_dim: usize,
    pub generator_channels: usize,
    pub critic_widths: (usize, usize),
    #[serde(default)]
    pub seed: u64,
}

impl Default for WganConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            critic_steps: 5,
            clip: Some(0.01),
            loss: GanLoss::Wasserstein,
            alternation: Alternation::PerBatch,
            critic_optimizer: OptimizerConfig::rmsprop(5e-5),
            generator_optimizer: OptimizerConfig::rmsprop(5e-5),
            latent_dim: LATENT_DIM,
            generator_channels: 32,
            critic_widths: (16, 32),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WganEpoch {
    pub epoch: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
    /// Real-vs-fake accuracy of the critic at the end of the epoch.
    pub probe: f64,
    /// Largest critic weight magnitude seen after any update this epoch.
    pub critic_max_abs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WganHistory {
    pub epochs: Vec<WganEpoch>,
    pub critic_updates: usize,
    pub generator_updates: usize,
}

impl WganHistory {
    /// Mean probe over the last `n` epochs (fewer if the run was shorter).
    pub fn probe_tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.epochs[self.epochs.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.probe).sum::<f64>() / tail.len() as f64)
    }

    pub fn max_critic_abs(&self) -> f64 {
        self.epochs.iter().map(|e| e.critic_max_abs).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GanBundle {
    pub generator: Network,
    pub critic: Network,
    pub history: WganHistory,
}

impl GanBundle {
    pub fn latent_dim(&self) -> usize {
        self.generator.input_shape().len()
    }

    pub fn image_shape(&self) -> Shape {
        self.generator.output_shape()
    }

    pub fn generate(&self, latents: ArrayView2<f64>) -> Result<Batch> {
        self.generator.predict(latents)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator.save(&dir.join(GENERATOR_FILE))?;
        self.critic.save(&dir.join(CRITIC_FILE))?;
        let path = dir.join(HISTORY_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self.history)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let generator = Network::load(&dir.join(GENERATOR_FILE))?;
        let critic = Network::load(&dir.join(CRITIC_FILE))?;
        let path = dir.join(HISTORY_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let history = serde_json::from_slice(&bytes)?;
        if generator.output_shape() != critic.input_shape() {
            return Err(Error::shape(critic.input_shape(), generator.output_shape()));
        }
        Ok(Self {
            generator,
            critic,
            history,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(critic_loss, generator_loss)` for critic scores on real and generated
/// samples. Minimising the critic loss widens the real/fake score gap.
///
/// # Panics
/// If either slice is empty.
pub fn wasserstein_losses(real_scores: &[f64], fake_scores: &[f64]) -> (f64, f64) {
    assert!(
        !real_scores.is_empty() && !fake_scores.is_empty(),
        "score arrays must be non-empty"
    );
    let fake = mean(fake_scores);
    (fake - mean(real_scores), -fake)
}

/// Fraction of samples on the correct side of the midpoint between the mean
/// real and mean fake scores. Reals count when strictly above the midpoint,
/// fakes when strictly below. Scores sitting exactly on it count as misses.
pub fn probe_scores(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.len() != fake_scores.len() {
        return Err(Error::shape(real_scores.len(), fake_scores.len()));
    }
    if real_scores.is_empty() {
        return Err(Error::InvalidParam("empty probe batch".into()));
    }
    let threshold = 0.5 * (mean(real_scores) + mean(fake_scores));
    let hits = real_scores.iter().filter(|&&s| s > threshold).count()
        + fake_scores.iter().filter(|&&s| s < threshold).count();
    Ok(hits as f64 / (2 * real_scores.len()) as f64)
}

fn critic_scores(critic: &Network, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(critic.predict(x)?.column(0).to_vec())
}

/// Scores equal-sized real and generated batches with the bundle's critic
/// and applies [`probe_scores`].
pub fn accuracy_probe(bundle: &GanBundle, real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<f64> {
    if real.nrows() != fake.nrows() {
        return Err(Error::shape(real.nrows(), fake.nrows()));
    }
    probe_scores(&critic_scores(&bundle.critic, real)?, &critic_scores(&bundle.critic, fake)?)
}

/// `count x dim` latent vectors drawn uniformly from `[-1, 1)`.
pub fn latents(count: usize, dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((count, dim), || rng.random_range(-1.0..1.0))
}

/// Deterministic draws from the generator as `rows x cols` grids, rounded
/// to `f32` precision like every stored spectrogram.
pub fn sample_synthetic(bundle: &GanBundle, count: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = latents(count, bundle.latent_dim(), &mut rng);
    let out = bundle.generate(z.view())?;
    let shape = bundle.image_shape();
    out.outer_iter()
        .map(|row| {
            let img = row
                .to_owned()
                .into_shape_with_order((shape.height, shape.width))
                .map_err(|e| Error::InvalidParam(e.to_string()))?;
            Ok(spg::quantize(&img))
        })
        .collect()
}

/// Output gradient and loss for the critic on a stacked `[real; fake]`
/// batch.
fn critic_objective(loss: GanLoss, scores: &[f64], n_real: usize) -> (f64, Batch) {
    let n_fake = scores.len() - n_real;
    let (real, fake) = scores.split_at(n_real);
    let mut g = Array2::zeros((scores.len(), 1));
    match loss {
        GanLoss::Wasserstein => {
            for i in 0..scores.len() {
                g[[i, 0]] = if i < n_real { -1.0 / n_real as f64 } else { 1.0 / n_fake as f64 };
            }
            (wasserstein_losses(real, fake).0, g)
        }
        GanLoss::Bce => {
            let mut value = 0.0;
            for (i, &z) in scores.iter().enumerate() {
                let (target, n) = if i < n_real { (1.0, n_real) } else { (0.0, n_fake) };
                value += softplus(if target == 1.0 { -z } else { z }) / n as f64;
                g[[i, 0]] = (sigmoid(z) - target) / n as f64;
            }
            (value, g)
        }
    }
}

fn generator_objective(loss: GanLoss, scores: &[f64]) -> (f64, Batch) {
    let n = scores.len() as f64;
    match loss {
        GanLoss::Wasserstein => (wasserstein_losses(scores, scores).1, Array2::from_elem((scores.len(), 1), -1.0 / n)),
        GanLoss::Bce => {
            let value = scores.iter().map(|&z| softplus(-z)).sum::<f64>() / n;
            let g = Array2::from_shape_fn((scores.len(), 1), |(i, _)| (sigmoid(scores[i]) - 1.0) / n);
            (value, g)
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Trainer<'a> {
    reals: ArrayView2<'a, f64>,
    config: &'a WganConfig,
    generator: Network,
    critic: Network,
    gen_opt: Optimizer,
    critic_opt: Optimizer,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer<'_> {
    /// Next `batch_size` real rows from a reshuffled-on-exhaustion order.
    fn next_real_batch(&mut self) -> Array2<f64> {
        let n = self.config.batch_size.min(self.order.len());
        if self.cursor + n > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + n];
        self.cursor += n;
        self.reals.select(Axis(0), idx)
    }

    fn critic_step(&mut self) -> Result<(f64, f64)> {
        let real = self.next_real_batch();
        let z = latents(real.nrows(), self.config.latent_dim, &mut self.rng);
        let fake = self.generator.predict(z.view())?;
        let x = concatenate(Axis(0), &[real.view(), fake.view()]).expect("matching widths");
        let trace = self.critic.forward(x.view())?;
        let scores = trace.output().column(0).to_vec();
        let (value, g) = critic_objective(self.config.loss, &scores, real.nrows());
        let grads = self.critic.param_gradients(&trace, self.critic.spec.layers.len(), g);
        self.critic_opt.step(&mut self.critic.params, &grads);
        if let Some(c) = self.config.clip {
            for w in self.critic.params.values_mut() {
                *w = w.clamp(-c, c);
            }
        }
        Ok((value, self.critic.params.max_abs()))
    }

    fn generator_step(&mut self) -> Result<f64> {
        let z = latents(self.config.batch_size, self.config.latent_dim, &mut self.rng);
        let g_trace = self.generator.forward(z.view())?;
        let c_trace = self.critic.forward(g_trace.output().view())?;
        let scores = c_trace.output().column(0).to_vec();
        let (value, g) = generator_objective(self.config.loss, &scores);
        let (_, dx) = self.critic.backward(&c_trace, self.critic.spec.layers.len(), g, false);
        let grads = self.generator.param_gradients(&g_trace, self.generator.spec.layers.len(), dx);
        self.gen_opt.step(&mut self.generator.params, &grads);
        Ok(value)
    }

    fn probe(&self, probe_latents: &Array2<f64>) -> Result<f64> {
        let fake = self.generator.predict(probe_latents.view())?;
        probe_scores(&critic_scores(&self.critic, self.reals)?, &critic_scores(&self.critic, fake.view())?)
    }
}

/// Trains a generator/critic pair on the rows of `reals` (one class, images
/// flattened to `image` shape). Deterministic in `config.seed`.
pub fn train_wgan(reals: ArrayView2<f64>, image: Shape, config: &WganConfig) -> Result<GanBundle> {
    if config.batch_size == 0 || config.latent_dim == 0 || config.critic_steps == 0 {
        return Err(Error::InvalidParam("batch size, latent dim and critic steps must be positive".into()));
    }
    if reals.nrows() < config.batch_size {
        return Err(Error::InvalidParam(format!(
            "need at least {} real samples, got {}",
            config.batch_size,
            reals.nrows()
        )));
    }
    if reals.ncols() != image.len() || image.channels != 1 {
        return Err(Error::shape(image, reals.ncols()));
    }
    if let Alternation::PerEpoch {
        critic_epochs,
        generator_epochs,
    } = config.alternation
    {
        if critic_epochs == 0 || generator_epochs == 0 {
            return Err(Error::InvalidParam("alternation phases must be at least one epoch".into()));
        }
    }
    let gen_spec = upsampler_spec(config.latent_dim, image.height, image.width, config.generator_channels)?;
    let critic_spec = critic_spec(image, config.critic_widths);
    let generator = Network::new(gen_spec, config.seed)?;
    let critic = Network::new(critic_spec, config.seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a_6a_6a);
    let probe_latents = latents(reals.nrows(), config.latent_dim, &mut rng);
    let mut t = Trainer {
        reals,
        config,
        gen_opt: Optimizer::new(config.generator_optimizer, &generator.params),
        critic_opt: Optimizer::new(config.critic_optimizer, &critic.params),
        generator,
        critic,
        rng,
        order: (0..reals.nrows()).collect(),
        cursor: usize::MAX / 2,
    };
    if let Some(c) = config.clip {
        for w in t.critic.params.values_mut() {
            *w = w.clamp(-c, c);
        }
    }
    let batches_per_epoch = reals.nrows().div_ceil(config.batch_size);
    let mut history = WganHistory::default();

    for epoch in 1..=config.epochs {
        let (critic_phase, generator_phase) = match config.alternation {
            Alternation::PerBatch => (true, true),
            Alternation::PerEpoch {
                critic_epochs,
                generator_epochs,
            } => {
                let c = (epoch - 1) % (critic_epochs + generator_epochs) < critic_epochs;
                (c, !c)
            }
        };
        let critic_steps = match config.alternation {
            Alternation::PerBatch => config.critic_steps,
            Alternation::PerEpoch { .. } => 1,
        };
        let mut stats = WganEpoch {
            epoch,
            critic_max_abs: t.critic.params.max_abs(),
            ..WganEpoch::default()
        };
        let (mut c_sum, mut c_n, mut g_sum, mut g_n) = (0.0, 0usize, 0.0, 0usize);
        let step = (|| -> Result<()> {
            for _ in 0..batches_per_epoch {
                if critic_phase {
                    for _ in 0..critic_steps {
                        let (value, max_abs) = t.critic_step()?;
                        c_sum += value;
                        c_n += 1;
                        stats.critic_max_abs = stats.critic_max_abs.max(max_abs);
                    }
                }
                if generator_phase {
                    g_sum += t.generator_step()?;
                    g_n += 1;
                }
            }
            Ok(())
        })();
        let diverged = match step {
            Err(Error::NonFiniteLoss) => true,
            Err(e) => return Err(e),
            Ok(()) => !(c_sum.is_finite() && g_sum.is_finite() && t.critic.params.is_finite() && t.generator.params.is_finite()),
        };
        if diverged {
            return Err(Error::GanDivergence {
                epoch,
                history: Box::new(history),
            });
        }
        history.critic_updates += c_n;
        history.generator_updates += g_n;
        stats.critic_loss = if c_n > 0 { c_sum / c_n as f64 } else { f64::NAN };
        stats.generator_loss = if g_n > 0 { g_sum / g_n as f64 } else { f64::NAN };
        stats.probe = t.probe(&probe_latents)?;
        log::debug!(
            "wgan epoch {epoch}: critic {:.5} generator {:.5} probe {:.3}",
            stats.critic_loss,
            stats.generator_loss,
            stats.probe
        );
        history.epochs.push(stats);
    }
    let mut generator = t.generator;
    let mut critic = t.critic;
    generator.params.quantize_f32();
    critic.params.quantize_f32();
    for (net, seed) in [(&mut generator, config.seed), (&mut critic, config.seed.wrapping_add(1))] {
        net.params.meta.seed = seed;
        net.params.meta.epochs = config.epochs;
    }
    Ok(GanBundle {
        generator,
        critic,
        history,
    })
}

/// Trains on the train-split images of one class of a stored corpus.
pub fn train_wgan_class(manifest: &DatasetManifest, dir: &Path, class_id: usize, config: &WganConfig) -> Result<GanBundle> {
    let data = manifest.load_split(dir, Split::Train)?;
    let index = manifest.class_index(class_id)?;
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == index).collect();
    let reals = data.x.select(Axis(0), &rows);
    let image = Shape::new(1, manifest.layout.rows, manifest.layout.cols);
    train_wgan(reals.view(), image, config)
}

/// Flattened view of a list of grids, one row per grid.
pub fn stack_images(images: &[Array2<f64>]) -> Result<Array2<f64>> {
    let Some(first) = images.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let mut out = Array2::zeros((images.len(), first.len()));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != first.dim() {
            return Err(Error::shape(format!("{:?}", first.dim()), format!("{:?}", img.dim())));
        }
        for (dst, src) in out.row_mut(i).iter_mut().zip(img.iter()) {
            *dst = *src;
        }
    }
    Ok(out)
}
