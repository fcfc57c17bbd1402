//! The training loop: a plain BiGAN warm-up, then alternating discriminator
//! and encoder/generator updates with the triplet term switched on.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tbigan_nn::{Adam, AdamConfig, NetParams, Tensor, Trace};

use crate::checkpoint::{self, PayloadReader, PayloadWriter};
use crate::datasets::{DatasetSplit, LabeledIndex};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport};
use crate::models::{sample_prior, ArchitectureConfig, DiscriminatorParams, EncoderTrace, LatentCode, ModelParams, Networks};
use crate::sampler::{self, HardNegatives, TripletBatch, TripletIndices};

const INIT_STREAM: u64 = 0;
const PRIOR_STREAM: u64 = 1;
const TRIPLET_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Encoding chunk size for full-set passes outside the optimizer loop.
const ENCODE_CHUNK: usize = 256;

/// Which of the three compared models a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    /// Encoder trained with the triplet loss on labeled data only.
    Triplet,
    /// Plain BiGAN, no triplet term.
    Bigan,
    TripletBigan,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::Triplet, ModelTag::Bigan, ModelTag::TripletBigan];
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Self::Triplet),
            "bigan" => Ok(Self::Bigan),
            "triplet-bigan" => Ok(Self::TripletBigan),
            other => Err(Error::Usage(format!(
                "unknown model `{other}`, expected triplet, bigan or triplet-bigan"
            ))),
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Triplet => "triplet",
            Self::Bigan => "bigan",
            Self::TripletBigan => "triplet-bigan",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelTag,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_per_class: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub hard_negatives: bool,
    pub checkpoint_every: usize,
    /// Number of fixed labeled triplets scored after every epoch.
    pub eval_triplets: usize,
    /// Write `wall_time_s = 0` so metric logs are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelTag::TripletBigan,
            lambda: 1.0,
            warmup_epochs: 10,
            total_epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_per_class: 100,
            latent_dim: 64,
            seed: 0,
            hard_negatives: false,
            checkpoint_every: 10,
            eval_triplets: 1000,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Usage(format!("{field}: {why}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be a finite value >= 0, got {}", self.lambda));
        }
        if self.model == ModelTag::Bigan && self.lambda != 0.0 {
            return bad("lambda", format!("the bigan model has no triplet term, got lambda = {}", self.lambda));
        }
        if self.total_epochs == 0 {
            return bad("total_epochs", "must be positive".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return bad(
                "warmup_epochs",
                format!("{} exceeds total_epochs = {}", self.warmup_epochs, self.total_epochs),
            );
        }
        for (field, v) in [("batch_size", self.batch_size), ("n_per_class", self.n_per_class), ("latent_dim", self.latent_dim), ("checkpoint_every", self.checkpoint_every)] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        for (field, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(field, format!("must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", format!("must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Triplet weight in force during `epoch` (0-based).
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.model {
            ModelTag::Bigan => 0.0,
            ModelTag::TripletBigan if epoch < self.warmup_epochs => 0.0,
            _ => self.lambda,
        }
    }

    /// Whether triplet batches are drawn during `epoch`.
    pub fn uses_triplets_at(&self, epoch: usize) -> bool {
        match self.model {
            ModelTag::Bigan => false,
            ModelTag::Triplet => true,
            ModelTag::TripletBigan => epoch >= self.warmup_epochs,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub l_d: Option<f64>,
    pub l_eg: Option<f64>,
    pub l_t: Option<f64>,
    pub l_teg: Option<f64>,
    pub d_plus_mean: f64,
    pub d_minus_mean: f64,
    pub triplet_accuracy: f64,
    pub wall_time_s: f64,
}

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> std::result::Result<ChaCha8Rng, String> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|e| e.to_string())?);
        Ok(rng)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Independent random streams, so that turning the triplet term on or off
/// never shifts the draws of the adversarial part.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub prior: ChaCha8Rng,
    pub triplet: ChaCha8Rng,
    pub data: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            prior: stream(seed, PRIOR_STREAM),
            triplet: stream(seed, TRIPLET_STREAM),
            data: stream(seed, DATA_STREAM),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt_encoder: Adam,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub rng: RngStreams,
    pub history: Vec<EpochRecord>,
}

/// Prior draws and reparametrization noise for one adversarial pass.
#[derive(Clone, Debug)]
pub struct AdversarialNoise {
    pub z: Tensor,
    pub eps: Tensor,
}

impl AdversarialNoise {
    pub fn sample(batch: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let z = sample_prior(batch, m, rng);
        let eps = sample_prior(batch, m, rng);
        Self { z, eps }
    }
}

/// Reparametrization noise for the anchor, positive and negative passes.
#[derive(Clone, Debug)]
pub struct TripletNoise {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

impl TripletNoise {
    pub fn sample(batch: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            anchor: sample_prior(batch, m, rng),
            positive: sample_prior(batch, m, rng),
            negative: sample_prior(batch, m, rng),
        }
    }
}

/// Train-mode generator and encoder passes shared by both adversarial losses.
pub struct AdversarialForward {
    pub fake_images: Tensor,
    generator_trace: Trace,
    pub code: LatentCode,
    encoder_trace: EncoderTrace,
    z: Tensor,
}

pub fn adversarial_forward(nets: &Networks, p: &ModelParams, x: &Tensor, noise: &AdversarialNoise) -> Result<AdversarialForward> {
    let (fake_images, generator_trace) = nets.generate_traced(p, &noise.z)?;
    let (code, encoder_trace) = nets.encode_traced(p, x, &noise.eps)?;
    Ok(AdversarialForward {
        fake_images,
        generator_trace,
        code,
        encoder_trace,
        z: noise.z.clone(),
    })
}

/// Discriminator loss and its gradient in the discriminator parameters.
pub fn discriminator_objective(
    nets: &Networks,
    p: &ModelParams,
    x: &Tensor,
    fwd: &AdversarialForward,
) -> Result<(f64, DiscriminatorParams)> {
    let (d_real, real) = nets.discriminate_traced(p, x, &fwd.code.z)?;
    let (d_fake, fake) = nets.discriminate_traced(p, &fwd.fake_images, &fwd.z)?;
    let (loss, g_real, g_fake) = losses::discriminator_loss_grad(&d_real, &d_fake)?;
    let mut grads = p.discriminator.zeros_like();
    nets.discriminate_backward(p, &real, &g_real, &mut grads)?;
    nets.discriminate_backward(p, &fake, &g_fake, &mut grads)?;
    Ok((loss, grads))
}

/// Encoder-generator loss with gradients `(encoder, generator)`.
pub fn encoder_generator_objective(
    nets: &Networks,
    p: &ModelParams,
    x: &Tensor,
    fwd: &AdversarialForward,
) -> Result<(f64, NetParams, NetParams)> {
    let (d_real, real) = nets.discriminate_traced(p, x, &fwd.code.z)?;
    let (d_fake, fake) = nets.discriminate_traced(p, &fwd.fake_images, &fwd.z)?;
    let (loss, g_real, g_fake) = losses::encoder_generator_loss_grad(&d_real, &d_fake)?;
    let mut scratch = p.discriminator.zeros_like();
    let (_, g_code) = nets.discriminate_backward(p, &real, &g_real, &mut scratch)?;
    let (g_image, _) = nets.discriminate_backward(p, &fake, &g_fake, &mut scratch)?;
    let mut g_enc = p.encoder.zeros_like();
    let mut g_gen = p.generator.zeros_like();
    nets.encode_backward(p, &fwd.encoder_trace, &g_code, &mut g_enc)?;
    nets.generate_backward(p, &fwd.generator_trace, &g_image, &mut g_gen)?;
    Ok((loss, g_enc, g_gen))
}

pub struct TripletObjective {
    pub loss: f64,
    pub encoder_grad: NetParams,
    pub d_plus: Vec<f64>,
    pub d_minus: Vec<f64>,
    anchor_trace: EncoderTrace,
}

/// Triplet loss over three train-mode encoder passes, with its encoder gradient.
pub fn triplet_objective(nets: &Networks, p: &ModelParams, batch: &TripletBatch, noise: &TripletNoise) -> Result<TripletObjective> {
    let (a, ta) = nets.encode_traced(p, &batch.anchor, &noise.anchor)?;
    let (pos, tp) = nets.encode_traced(p, &batch.positive, &noise.positive)?;
    let (neg, tn) = nets.encode_traced(p, &batch.negative, &noise.negative)?;
    let g = losses::triplet_loss_grad(&a.z, &pos.z, &neg.z)?;
    let mut encoder_grad = p.encoder.zeros_like();
    nets.encode_backward(p, &ta, &g.anchor, &mut encoder_grad)?;
    nets.encode_backward(p, &tp, &g.positive, &mut encoder_grad)?;
    nets.encode_backward(p, &tn, &g.negative, &mut encoder_grad)?;
    Ok(TripletObjective {
        loss: g.loss,
        encoder_grad,
        d_plus: g.d_plus,
        d_minus: g.d_minus,
        anchor_trace: ta,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Where [`Trainer::fit`] writes metrics and checkpoints.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Stored verbatim in every checkpoint so a run can be resumed from it alone.
    pub experiment: &'a str,
}

pub struct Trainer {
    nets: Networks,
    config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(arch: &ArchitectureConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if arch.latent_dim != config.latent_dim {
            return Err(Error::Usage(format!(
                "latent_dim: architecture has m = {}, training config m = {}",
                arch.latent_dim, config.latent_dim
            )));
        }
        let nets = Networks::new(arch)?;
        let params = nets.init_params(&mut stream(config.seed, INIT_STREAM));
        let adam = config.adam();
        let state = TrainState {
            opt_encoder: Adam::new(adam, &params.encoder.trainable()),
            opt_generator: Adam::new(adam, &params.generator.trainable()),
            opt_discriminator: Adam::new(adam, &params.discriminator.trainable()),
            params,
            epoch: 0,
            global_step: 0,
            rng: RngStreams::new(config.seed),
            history: Vec::new(),
        };
        Ok(Self { nets, config, state })
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Extend the epoch budget of a resumed run.
    pub fn set_total_epochs(&mut self, total: usize) -> Result<()> {
        let mut c = self.config.clone();
        c.total_epochs = total;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    fn numeric(&self, term: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical {
                term: term.into(),
                step: self.state.global_step,
            })
        }
    }

    /// One iteration: a discriminator update, then a joint encoder/generator
    /// update on `l_eg + lambda * l_t`. `triplet` is only used when given;
    /// its weight is the lambda of the current epoch. In triplet-only runs
    /// `x` is ignored and only the encoder moves.
    pub fn train_step(&mut self, x: &Tensor, triplet: Option<&TripletBatch>) -> Result<LossReport> {
        if self.config.model == ModelTag::Triplet {
            let t = triplet.ok_or_else(|| Error::Contract("triplet-only training needs a triplet batch".into()))?;
            return self.triplet_step(t);
        }
        let lambda = self.config.lambda_at(self.state.epoch);
        let m = self.nets.latent_dim();
        let n = x.dim(0);
        let noise = AdversarialNoise::sample(n, m, &mut self.state.rng.prior);
        let nets = &self.nets;
        let fwd = adversarial_forward(nets, &self.state.params, x, &noise)?;

        let (l_d, g_d) = discriminator_objective(nets, &self.state.params, x, &fwd)?;
        self.numeric("l_d", l_d)?;
        let st = &mut self.state;
        st.opt_discriminator.update(st.params.discriminator.trainable_mut(), g_d.trainable());

        // G and E are unchanged, so their traces are still exact; D is re-run
        // with its new parameters.
        let (l_eg, mut g_enc, g_gen) = encoder_generator_objective(nets, &self.state.params, x, &fwd)?;
        self.numeric("l_eg", l_eg)?;

        let mut report = LossReport {
            l_d: Some(l_d),
            l_eg: Some(l_eg),
            ..Default::default()
        };
        if let Some(t) = triplet {
            let tn = TripletNoise::sample(t.len(), m, &mut self.state.rng.triplet);
            let obj = triplet_objective(nets, &self.state.params, t, &tn)?;
            self.numeric("l_t", obj.loss)?;
            if lambda != 0.0 {
                g_enc.add_scaled(&obj.encoder_grad, lambda);
            }
            report.l_t = Some(obj.loss);
            report.l_teg = Some(self.numeric("l_teg", losses::combined_loss(l_eg, obj.loss, lambda)?)?);
            report.d_plus_mean = Some(mean(&obj.d_plus));
            report.d_minus_mean = Some(mean(&obj.d_minus));
        }

        let st = &mut self.state;
        st.opt_generator.update(st.params.generator.trainable_mut(), g_gen.trainable());
        st.opt_encoder.update(st.params.encoder.trainable_mut(), g_enc.trainable());
        nets.commit_generator_stats(&mut st.params, &fwd.generator_trace);
        nets.commit_encoder_stats(&mut st.params, &fwd.encoder_trace);
        self.finish_step(report)
    }

    fn triplet_step(&mut self, t: &TripletBatch) -> Result<LossReport> {
        let tn = TripletNoise::sample(t.len(), self.nets.latent_dim(), &mut self.state.rng.triplet);
        let obj = triplet_objective(&self.nets, &self.state.params, t, &tn)?;
        self.numeric("l_t", obj.loss)?;
        let st = &mut self.state;
        st.opt_encoder.update(st.params.encoder.trainable_mut(), obj.encoder_grad.trainable());
        self.nets.commit_encoder_stats(&mut st.params, &obj.anchor_trace);
        self.finish_step(LossReport {
            l_t: Some(obj.loss),
            d_plus_mean: Some(mean(&obj.d_plus)),
            d_minus_mean: Some(mean(&obj.d_minus)),
            ..Default::default()
        })
    }

    fn finish_step(&mut self, report: LossReport) -> Result<LossReport> {
        if !self.state.params.all_finite() {
            return Err(Error::Numerical {
                term: "parameters".into(),
                step: self.state.global_step,
            });
        }
        self.state.global_step += 1;
        Ok(report)
    }

    /// Runs the remaining epochs of the budget. With `out`, appends one
    /// line per epoch to `metrics.jsonl` and writes checkpoints.
    pub fn fit(&mut self, split: &DatasetSplit, index: &LabeledIndex, out: Option<&RunOutput>) -> Result<()> {
        if split.image_shape() != self.nets.arch().image_shape {
            return Err(Error::Usage(format!(
                "dataset images are {:?}, the architecture expects {:?}",
                split.image_shape(),
                self.nets.arch().image_shape
            )));
        }
        let train = &split.train;
        if self.config.batch_size > train.len() {
            return Err(Error::Usage(format!(
                "batch_size: {} exceeds the {} training images",
                self.config.batch_size,
                train.len()
            )));
        }
        let labeled = index.images(train);
        let slot_of: HashMap<usize, usize> = index.entries().iter().enumerate().map(|(s, &(i, _))| (i, s)).collect();
        let probe = sampler::sample_triplet_indices(
            index,
            self.config.eval_triplets.max(1),
            &mut stream(self.config.seed, EVAL_STREAM),
        )?;

        let metrics = match out {
            Some(o) => Some(open_metrics(o.dir, self.state.epoch)?),
            None => None,
        };
        let mut metrics = metrics;

        while self.state.epoch < self.config.total_epochs {
            let started = Instant::now();
            let epoch = self.state.epoch;
            let triplets = self.config.uses_triplets_at(epoch);
            let hard = if triplets && self.config.hard_negatives {
                let codes = self.nets.encode_set(&self.state.params, &labeled, ENCODE_CHUNK)?;
                Some(HardNegatives::from_codes(index, &codes)?)
            } else {
                None
            };
            let batches = sampler::epoch_batches(train.len(), self.config.batch_size, &mut self.state.rng.data)?;
            let mut reports = Vec::with_capacity(batches.len());
            for idx in &batches {
                let x = train.batch(idx);
                let t = if triplets {
                    let rng = &mut self.state.rng.triplet;
                    let ti = match &hard {
                        Some(h) => sampler::sample_hard_negative_indices(index, h, idx.len(), rng)?,
                        None => sampler::sample_triplet_indices(index, idx.len(), rng)?,
                    };
                    Some(ti.gather(train))
                } else {
                    None
                };
                reports.push(self.train_step(&x, t.as_ref())?);
            }
            let losses = LossReport::mean(&reports);
            let codes = self.nets.encode_set(&self.state.params, &labeled, ENCODE_CHUNK)?;
            let (acc, dp, dm) = probe_triplets(&codes, &probe, &slot_of);
            self.state.epoch += 1;
            let record = EpochRecord {
                epoch: self.state.epoch,
                l_d: losses.l_d,
                l_eg: losses.l_eg,
                l_t: losses.l_t,
                l_teg: losses.l_teg,
                d_plus_mean: dp,
                d_minus_mean: dm,
                triplet_accuracy: acc,
                wall_time_s: if self.config.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
            };
            log::info!(
                "epoch {}/{}: l_d {} l_eg {} l_t {} triplet accuracy {:.4}",
                record.epoch,
                self.config.total_epochs,
                fmt_opt(record.l_d),
                fmt_opt(record.l_eg),
                fmt_opt(record.l_t),
                record.triplet_accuracy
            );
            self.state.history.push(record.clone());
            if let (Some(f), Some(o)) = (metrics.as_mut(), out) {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(format!("append to {}", metrics_path(o.dir).display()), e))?;
                f.flush().map_err(|e| Error::io("flush metrics", e))?;
                let done = self.state.epoch == self.config.total_epochs;
                if done || self.state.epoch % self.config.checkpoint_every == 0 {
                    self.write_checkpoints(o)?;
                }
            }
        }
        Ok(())
    }

    fn write_checkpoints(&self, out: &RunOutput) -> Result<()> {
        let dir = out.dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let path = dir.join(format!("epoch_{:04}.ckpt", self.state.epoch));
        self.save(&path, out.experiment)?;
        self.save(&dir.join("latest.ckpt"), out.experiment)
    }

    /// Writes a checkpoint holding the architecture, the training config,
    /// the full state and `experiment`.
    pub fn save(&self, path: &Path, experiment: &str) -> Result<()> {
        let s = &self.state;
        let header = Header {
            arch: self.nets.arch().clone(),
            config: self.config.clone(),
            epoch: s.epoch,
            global_step: s.global_step,
            rng: [RngState::of(&s.rng.prior), RngState::of(&s.rng.triplet), RngState::of(&s.rng.data)],
            adam_steps: [s.opt_encoder.step, s.opt_generator.step, s.opt_discriminator.step],
            history: s.history.clone(),
            experiment: experiment.to_string(),
        };
        let mut w = PayloadWriter::new();
        w.str(&serde_json::to_string(&header).expect("header serializes"));
        let p = &s.params;
        for net in [&p.encoder, &p.generator, &p.discriminator.image, &p.discriminator.code, &p.discriminator.joint] {
            w.arrays(net.trainable().into_iter());
            w.arrays(net.buffers().into_iter());
        }
        for opt in [&s.opt_encoder, &s.opt_generator, &s.opt_discriminator] {
            w.arrays(opt.first_moment.iter().map(Vec::as_slice));
            w.arrays(opt.second_moment.iter().map(Vec::as_slice));
        }
        checkpoint::write_container(path, &w.finish())
    }

    /// Restores a trainer from a checkpoint; also returns the stored
    /// experiment text.
    pub fn resume(path: &Path) -> Result<(Self, String)> {
        let payload = checkpoint::read_container(path)?;
        let mut r = PayloadReader::new(&payload, path);
        let corrupt = |reason: String| Error::Integrity {
            path: path.to_path_buf(),
            reason,
        };
        let header: Header = serde_json::from_str(r.str()?).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut t = Trainer::new(&header.arch, header.config.clone())?;
        let s = &mut t.state;
        {
            let p = &mut s.params;
            let d = &mut p.discriminator;
            for (name, net) in [
                ("encoder", &mut p.encoder),
                ("generator", &mut p.generator),
                ("image discriminator", &mut d.image),
                ("code discriminator", &mut d.code),
                ("joint discriminator", &mut d.joint),
            ] {
                r.arrays_into(net.trainable_mut(), name)?;
                r.arrays_into(net.buffers_mut(), name)?;
            }
        }
        for (opt, step) in [&mut s.opt_encoder, &mut s.opt_generator, &mut s.opt_discriminator].into_iter().zip(header.adam_steps) {
            opt.step = step;
            r.arrays_into(opt.first_moment.iter_mut().map(Vec::as_mut_slice).collect(), "optimizer")?;
            r.arrays_into(opt.second_moment.iter_mut().map(Vec::as_mut_slice).collect(), "optimizer")?;
        }
        r.finish()?;
        let [prior, triplet, data] = &header.rng;
        s.rng = RngStreams {
            prior: prior.restore().map_err(corrupt)?,
            triplet: triplet.restore().map_err(corrupt)?,
            data: data.restore().map_err(corrupt)?,
        };
        s.epoch = header.epoch;
        s.global_step = header.global_step;
        s.history = header.history;
        Ok((t, header.experiment))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureConfig,
    config: TrainConfig,
    epoch: usize,
    global_step: u64,
    rng: [RngState; 3],
    adam_steps: [u64; 3],
    history: Vec<EpochRecord>,
    experiment: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

/// Opens `metrics.jsonl` for appending, keeping only the first `epochs` lines.
fn open_metrics(dir: &Path, epochs: usize) -> Result<fs::File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let path = metrics_path(dir);
    let kept = if epochs == 0 {
        String::new()
    } else {
        let text = fs::read_to_string(&path).unwrap_or_default();
        text.lines().take(epochs).map(|l| format!("{l}\n")).collect()
    };
    fs::write(&path, kept).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))
}

/// Accuracy (`d+ < d-`) and mean distances of fixed triplets on deterministic codes.
fn probe_triplets(codes: &Tensor, probe: &TripletIndices, slot_of: &HashMap<usize, usize>) -> (f64, f64, f64) {
    let n = probe.len() as f64;
    let (mut hits, mut sp, mut sm) = (0usize, 0.0, 0.0);
    for i in 0..probe.len() {
        let a = codes.row(slot_of[&probe.anchor[i]]);
        let dp = sampler::euclidean(a, codes.row(slot_of[&probe.positive[i]]));
        let dm = sampler::euclidean(a, codes.row(slot_of[&probe.negative[i]]));
        hits += usize::from(dp < dm);
        sp += dp;
        sm += dm;
    }
    (hits as f64 / n, sp / n, sm / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{select_labeled_subset, synthetic_shapes};

    fn tiny_config(model: ModelTag, lambda: f64) -> TrainConfig {
        TrainConfig {
            model,
            lambda,
            warmup_epochs: 0,
            total_epochs: 2,
            batch_size: 8,
            learning_rate: 2e-4,
            n_per_class: 4,
            latent_dim: 8,
            seed: 3,
            checkpoint_every: 1,
            eval_triplets: 50,
            deterministic: true,
            ..Default::default()
        }
    }

    fn data() -> (DatasetSplit, LabeledIndex) {
        let split = synthetic_shapes(3, 12, 16, 1).unwrap();
        let index = select_labeled_subset(&split, 4, 2).unwrap();
        (split, index)
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut c = tiny_config(ModelTag::Bigan, 0.5);
        assert!(matches!(c.validate(), Err(Error::Usage(m)) if m.starts_with("lambda")));
        c.lambda = 0.0;
        c.warmup_epochs = 5;
        assert!(matches!(c.validate(), Err(Error::Usage(m)) if m.starts_with("warmup_epochs")));
        c.warmup_epochs = 0;
        c.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Usage(m)) if m.starts_with("batch_size")));
        assert_eq!("triplet-bigan".parse::<ModelTag>().unwrap(), ModelTag::TripletBigan);
        assert!("gan".parse::<ModelTag>().is_err());
    }

    #[test]
    fn lambda_schedule() {
        let mut c = tiny_config(ModelTag::TripletBigan, 0.7);
        c.warmup_epochs = 2;
        c.total_epochs = 4;
        assert_eq!(c.lambda_at(1), 0.0);
        assert_eq!(c.lambda_at(2), 0.7);
        assert!(!c.uses_triplets_at(1) && c.uses_triplets_at(2));
        c.model = ModelTag::Triplet;
        assert!(c.uses_triplets_at(0));
    }

    #[test]
    fn updates_touch_only_their_owners() {
        let (split, index) = data();
        let mut t = Trainer::new(&ArchitectureConfig::tiny(8), tiny_config(ModelTag::TripletBigan, 1.0)).unwrap();
        let before = t.state.params.clone();
        let x = split.train.batch(&[0, 1, 2, 3]);
        let nets = t.networks().clone();
        let noise = AdversarialNoise::sample(4, 8, &mut t.state.rng.prior.clone());
        let fwd = adversarial_forward(&nets, &before, &x, &noise).unwrap();
        let (_, g_d) = discriminator_objective(&nets, &before, &x, &fwd).unwrap();
        assert!(g_d.trainable().iter().any(|s| s.iter().any(|&v| v != 0.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tb = sampler::sample_triplet_batch(&index, &split.train, 4, &mut rng).unwrap();
        t.train_step(&x, Some(&tb)).unwrap();
        assert_ne!(t.state.params.discriminator, before.discriminator);
        assert_ne!(t.state.params.generator.trainable(), before.generator.trainable());
        assert_ne!(t.state.params.encoder.trainable(), before.encoder.trainable());

        let mut tr = Trainer::new(&ArchitectureConfig::tiny(8), tiny_config(ModelTag::Triplet, 1.0)).unwrap();
        let before = tr.state.params.clone();
        let r = tr.train_step(&x, Some(&tb)).unwrap();
        assert!(r.l_d.is_none() && r.l_t.is_some());
        assert_eq!(tr.state.params.discriminator, before.discriminator);
        assert_eq!(tr.state.params.generator, before.generator);
        assert_ne!(tr.state.params.encoder, before.encoder);
        assert!(tr.train_step(&x, None).is_err());
    }

    #[test]
    fn fit_writes_metrics_and_resumes_exactly() {
        let (split, index) = data();
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchitectureConfig::tiny(8);
        let mut c = tiny_config(ModelTag::TripletBigan, 1.0);
        c.warmup_epochs = 1;
        c.total_epochs = 3;
        c.hard_negatives = true;
        let out = RunOutput {
            dir: dir.path(),
            experiment: "note=1",
        };
        let mut full = Trainer::new(&arch, c.clone()).unwrap();
        full.fit(&split, &index, Some(&out)).unwrap();
        let log = fs::read_to_string(metrics_path(dir.path())).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.lines().next().unwrap().contains("\"l_t\":null"));
        assert!(full.state.history.iter().all(|r| r.l_d.unwrap().is_finite()));

        let (mut resumed, experiment) = Trainer::resume(&dir.path().join("checkpoints/epoch_0001.ckpt")).unwrap();
        assert_eq!(experiment, "note=1");
        assert_eq!(resumed.state.epoch, 1);
        resumed.fit(&split, &index, Some(&out)).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(fs::read_to_string(metrics_path(dir.path())).unwrap(), log);
    }
}
