//! Pretraining on the captioned corpus and single-image fine-tuning.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Provenance};
use crate::denoiser::{ArchConfig, Denoiser, TrainSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::schedule::NoiseSchedule;
use crate::text_cond::{EmbeddingTable, TokenSeq, Vocabulary};
use crate::util::rng_stream;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Leaves everything untouched if any
/// gradient entry is non-finite.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!("{} parameters", params.len()), format!("{} gradients", grads.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability of replacing the caption with the null condition.
    pub cond_dropout: f64,
    /// Steps after which a checkpoint is emitted (ascending).
    pub emission_steps: Vec<usize>,
    /// Rescale the joint gradient to this global L2 norm when exceeded.
    pub grad_clip: Option<f64>,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl TrainConfig {
    /// Single-image fine-tuning defaults: batch 4, lr 1e-3, gradient clip 1.0, emission at
    /// 16/32/64/128 steps.
    pub fn finetune() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            steps: 128,
            cond_dropout: 0.0,
            emission_steps: vec![16, 32, 64, 128],
            grad_clip: Some(1.0),
            cosine_decay: false,
            schedule: NoiseSchedule::default(),
            seed: 0,
        }
    }

    pub fn pretrain() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            steps: 5000,
            cond_dropout: 0.1,
            emission_steps: Vec::new(),
            grad_clip: Some(1.0),
            cosine_decay: true,
            schedule: NoiseSchedule::default(),
            seed: 0,
        }
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_decay {
            return self.lr;
        }
        let progress = (step - 1) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch size and step count must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.emission_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("emission steps must be strictly ascending".into()));
        }
        if let Some(&last) = self.emission_steps.last() {
            if last > self.steps {
                return Err(Error::Config(format!(
                    "emission step {last} is beyond the {} training steps",
                    self.steps
                )));
            }
        }
        if self.emission_steps.first() == Some(&0) {
            return Err(Error::Config("emission steps start at 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    /// One checkpoint per emission step.
    pub snapshots: Vec<Checkpoint>,
    /// `(step, loss)` for every optimisation step, 1-based.
    pub losses: Vec<(usize, f64)>,
}

fn clip(grads: &mut [&mut [f64]], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
}

fn draw_sample(x: &Image, cond: crate::text_cond::CondVector, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let t = cfg.schedule.training_time(rng.random::<f64>());
    let eps = Image::randn(x.height(), x.width(), rng);
    let z = cfg.schedule.noise_image(x, &eps, t)?;
    Ok(TrainSample { z, t, cond, eps })
}

/// Train a fresh denoiser and embedding table on `(image, caption)` pairs.
pub fn pretrain(
    images: &[&Image],
    captions: &[&str],
    arch: ArchConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::Argument(format!(
            "pretraining needs matching non-empty image/caption lists ({} vs {})",
            images.len(),
            captions.len()
        )));
    }
    let vocab = Vocabulary::default();
    let tokens = captions.iter().map(|c| vocab.tokenize(c)).collect::<Result<Vec<TokenSeq>>>()?;
    let mut net = Denoiser::new(arch, cfg.seed)?;
    let mut table = EmbeddingTable::random(vocab.size(), arch.cond_dim, cfg.seed);
    let mut net_state = AdamState::new(net.num_params());
    let mut table_state = AdamState::new(table.as_slice().len());
    let mut rng = rng_stream(cfg.seed, 0x9e7);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let empty = TokenSeq::empty();

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut seqs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..images.len());
            let seq = if rng.random::<f64>() < cfg.cond_dropout { &empty } else { &tokens[i] };
            batch.push(draw_sample(images[i], table.encode(seq)?, cfg, &mut rng)?);
            seqs.push(seq);
        }
        let mut lg = net.loss_and_grad(&batch)?;
        if !lg.loss.is_finite() {
            return Err(Error::Training { step, loss: lg.loss });
        }
        let mut table_grad = vec![0.0; table.as_slice().len()];
        for (seq, g) in seqs.iter().zip(&lg.cond_grads) {
            table.accumulate_grad(seq, g, &mut table_grad);
        }
        if let Some(max) = cfg.grad_clip {
            clip(&mut [&mut lg.grad, &mut table_grad], max);
        }
        let lr = cfg.lr_at(step);
        optimizer_step(net.params_mut(), &lg.grad, &mut net_state, lr)
            .map_err(|_| Error::Training { step, loss: lg.loss })?;
        optimizer_step(table.as_mut_slice(), &table_grad, &mut table_state, lr)
            .map_err(|_| Error::Training { step, loss: lg.loss })?;
        losses.push((step, lg.loss));
        progress(step, lg.loss);
        if cfg.emission_steps.contains(&step) {
            snapshots.push(Checkpoint {
                denoiser: net.clone(),
                embeddings: table.clone(),
                vocab: vocab.clone(),
                step: step as u64,
                provenance: Provenance::Pretrain,
            });
        }
    }
    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            denoiser: net,
            embeddings: table,
            vocab,
            step: cfg.steps as u64,
            provenance: Provenance::Pretrain,
        },
        snapshots,
        losses,
    })
}

/// Fine-tuning request: bind `rare` to `image` in a copy of `base`.
#[derive(Debug, Clone)]
pub struct FinetuneJob<'a> {
    pub base: &'a Checkpoint,
    pub image: &'a Image,
    pub rare: TokenSeq,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    /// One checkpoint per emission step, ascending.
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<(usize, f64)>,
}

/// Fine-tune on a single `(image, rare condition)` pair. Every step draws
/// `batch_size` independent `(t, ε)` for the same pair; the embedding table
/// is never updated.
pub fn finetune(job: &FinetuneJob<'_>) -> Result<FinetuneOutput> {
    let cfg = &job.config;
    cfg.validate()?;
    let arch = *job.base.denoiser.arch();
    if job.image.shape() != (arch.resolution, arch.resolution) {
        return Err(Error::shape(
            format!("{0}x{0}x3", arch.resolution),
            format!("{}x{}x3", job.image.height(), job.image.width()),
        ));
    }
    let rare_range = job.base.vocab.rare_range();
    if job.rare.is_empty() || !job.rare.ids().iter().all(|id| rare_range.contains(id)) {
        return Err(Error::Config("fine-tuning condition must consist of rare-range tokens".into()));
    }
    let cond = job.base.embeddings.encode(&job.rare)?;
    let hash = job.image.content_hash();
    let mut net = job.base.denoiser.clone();
    let mut state = AdamState::new(net.num_params());
    let mut rng = rng_stream(cfg.seed, 0xf1e);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| draw_sample(job.image, cond.clone(), cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut lg = net.loss_and_grad(&batch)?;
        if !lg.loss.is_finite() {
            return Err(Error::Training { step, loss: lg.loss });
        }
        if let Some(max) = cfg.grad_clip {
            clip(&mut [&mut lg.grad], max);
        }
        optimizer_step(net.params_mut(), &lg.grad, &mut state, cfg.lr_at(step))
            .map_err(|_| Error::Training { step, loss: lg.loss })?;
        losses.push((step, lg.loss));
        if cfg.emission_steps.contains(&step) {
            checkpoints.push(Checkpoint {
                denoiser: net.clone(),
                embeddings: job.base.embeddings.clone(),
                vocab: job.base.vocab.clone(),
                step: step as u64,
                provenance: Provenance::Finetune {
                    base_image_hash: hash.clone(),
                    steps: step as u64,
                },
            });
        }
    }
    Ok(FinetuneOutput { checkpoints, losses })
}

/// Mean denoising loss of `net` on fixed `(t, ε)` probes of one image.
pub fn probe_loss(net: &Denoiser, image: &Image, cond: &crate::text_cond::CondVector, probes: &[(f64, Image)], schedule: &NoiseSchedule) -> Result<f64> {
    let batch = probes
        .iter()
        .map(|(t, eps)| {
            Ok(TrainSample {
                z: schedule.noise_image(image, eps, *t)?,
                t: *t,
                cond: cond.clone(),
                eps: eps.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(net.loss_and_grad(&batch)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.5, -1.0, 2.0];
        let orig = p.clone();
        let mut s = AdamState::new(3);
        optimizer_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = vec![0.0; 4];
        let g = [3.0, -0.001, 250.0, -7.5];
        let mut s = AdamState::new(4);
        optimizer_step(&mut p, &g, &mut s, 0.01).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert_eq!(pi.signum(), -gi.signum());
            assert!((pi.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_converges() {
        // Scalar simulation of f(p) = p², grad 2p.
        let mut p = [1.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            optimizer_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        assert!(p[0].abs() < 0.1, "{}", p[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        let err = optimizer_step(&mut p, &[0.1, f64::NAN], &mut s, 0.1);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::finetune();
        assert!(c.validate().is_ok());
        c.emission_steps = vec![16, 256];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::finetune();
        c.emission_steps = vec![32, 16];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.cond_dropout = 1.5;
        assert!(c.validate().is_err());
    }
}
