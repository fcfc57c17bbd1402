//! Encoder, generator and the three-part discriminator.
//!
//! All networks are stacks of (transposed) convolutions over
//! `[batch, channels, h, w]` tensors. Latent codes travel as `[batch, m]`
//! and are viewed as `[batch, m, 1, 1]` where a network needs an image.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tbigan_nn::{Activation, ConvGeometry, LayerKind, LayerSpec, Mode, NetParams, Sequential, Tensor, Trace};

use crate::datasets::ImageSet;
use crate::error::{Error, Result};

/// Bound applied to the encoder's log-variance head before exponentiation.
pub const LOGVAR_LIMIT: f64 = 10.0;

pub const ENCODER_LAYERS: usize = 7;
pub const GENERATOR_LAYERS: usize = 7;
pub const IMAGE_DISCRIMINATOR_LAYERS: usize = 5;
pub const CODE_DISCRIMINATOR_LAYERS: usize = 2;
pub const JOINT_DISCRIMINATOR_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

const fn layer(out_channels: usize, kernel: usize, stride: usize) -> ConvLayer {
    ConvLayer {
        out_channels,
        kernel,
        stride,
        padding: 0,
    }
}

impl ConvLayer {
    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.padding)
    }
}

/// Named topologies. `Standard` is the 32x32 ALI-style stack, `Tiny` a
/// 16x16 variant with the same layer counts for fast runs and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Tiny,
    Standard,
}

impl Preset {
    pub fn image_size(self) -> usize {
        match self {
            Preset::Tiny => 16,
            Preset::Standard => 32,
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            Preset::Tiny => 8,
            Preset::Standard => 32,
        }
    }

    pub fn for_image_size(size: usize) -> Option<Self> {
        match size {
            16 => Some(Preset::Tiny),
            32 => Some(Preset::Standard),
            _ => None,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "standard" => Ok(Preset::Standard),
            _ => Err(Error::Usage(format!("unknown architecture preset {s:?} (tiny or standard)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Standard => "standard",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub latent_dim: usize,
    pub image_shape: [usize; 3],
    pub encoder: Vec<ConvLayer>,
    pub generator: Vec<ConvLayer>,
    pub image_discriminator: Vec<ConvLayer>,
    pub code_discriminator: Vec<ConvLayer>,
    pub joint_discriminator: Vec<ConvLayer>,
    pub leaky_slope: f64,
}

impl ArchitectureConfig {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.02;

    pub fn preset(preset: Preset, width: usize, latent_dim: usize, channels: usize) -> Self {
        let w = width;
        let m = latent_dim;
        let (encoder, generator, image_discriminator) = match preset {
            Preset::Tiny => (
                // 16 -> 14 -> 6 -> 4 -> 1
                vec![
                    layer(w, 3, 1),
                    layer(2 * w, 4, 2),
                    layer(4 * w, 3, 1),
                    layer(8 * w, 4, 2),
                    layer(8 * w, 1, 1),
                    layer(8 * w, 1, 1),
                    layer(2 * m, 1, 1),
                ],
                // 1 -> 4 -> 6 -> 14 -> 16
                vec![
                    layer(8 * w, 4, 1),
                    layer(4 * w, 3, 1),
                    layer(2 * w, 4, 2),
                    layer(w, 3, 1),
                    layer(w, 1, 1),
                    layer(w, 1, 1),
                    layer(channels, 1, 1),
                ],
                vec![
                    layer(w, 3, 1),
                    layer(2 * w, 4, 2),
                    layer(4 * w, 3, 1),
                    layer(8 * w, 4, 2),
                    layer(8 * w, 1, 1),
                ],
            ),
            Preset::Standard => (
                // 32 -> 28 -> 13 -> 10 -> 4 -> 1
                vec![
                    layer(w, 5, 1),
                    layer(2 * w, 4, 2),
                    layer(4 * w, 4, 1),
                    layer(8 * w, 4, 2),
                    layer(16 * w, 4, 1),
                    layer(16 * w, 1, 1),
                    layer(2 * m, 1, 1),
                ],
                // 1 -> 4 -> 10 -> 13 -> 28 -> 32
                vec![
                    layer(8 * w, 4, 1),
                    layer(4 * w, 4, 2),
                    layer(2 * w, 4, 1),
                    layer(w, 4, 2),
                    layer(w, 5, 1),
                    layer(w, 1, 1),
                    layer(channels, 1, 1),
                ],
                vec![
                    layer(w, 5, 1),
                    layer(2 * w, 4, 2),
                    layer(4 * w, 4, 1),
                    layer(8 * w, 4, 2),
                    layer(16 * w, 4, 1),
                ],
            ),
        };
        let code_width = match preset {
            Preset::Tiny => 8 * w,
            Preset::Standard => 16 * w,
        };
        let size = preset.image_size();
        Self {
            latent_dim,
            image_shape: [channels, size, size],
            encoder,
            generator,
            image_discriminator,
            code_discriminator: vec![layer(code_width, 1, 1), layer(code_width, 1, 1)],
            joint_discriminator: vec![layer(2 * code_width, 1, 1), layer(2 * code_width, 1, 1), layer(1, 1, 1)],
            leaky_slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }

    /// 16x16 RGB, width 8.
    pub fn tiny(latent_dim: usize) -> Self {
        Self::preset(Preset::Tiny, Preset::Tiny.default_width(), latent_dim, 3)
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoder.iter().map(|l| l.out_channels).collect()
    }

    pub fn generator_channels(&self) -> Vec<usize> {
        self.generator.iter().map(|l| l.out_channels).collect()
    }

    pub fn dx_channels(&self) -> Vec<usize> {
        self.image_discriminator.iter().map(|l| l.out_channels).collect()
    }

    pub fn dz_channels(&self) -> Vec<usize> {
        self.code_discriminator.iter().map(|l| l.out_channels).collect()
    }

    pub fn dxz_channels(&self) -> Vec<usize> {
        self.joint_discriminator.iter().map(|l| l.out_channels).collect()
    }
}

fn specs(layers: &[ConvLayer], kind: LayerKind, norm: impl Fn(usize) -> bool, act: impl Fn(usize) -> Activation) -> Vec<LayerSpec> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSpec {
            kind,
            out_channels: l.out_channels,
            geometry: l.geometry(),
            batch_norm: norm(i),
            activation: act(i),
        })
        .collect()
}

/// Parameters of the three discriminator networks.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub image: NetParams,
    pub code: NetParams,
    pub joint: NetParams,
}

impl DiscriminatorParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.zeros_like(),
            code: self.code.zeros_like(),
            joint: self.joint.zeros_like(),
        }
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut v = self.image.trainable();
        v.extend(self.code.trainable());
        v.extend(self.joint.trainable());
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.image.trainable_mut();
        v.extend(self.code.trainable_mut());
        v.extend(self.joint.trainable_mut());
        v
    }

    pub fn all_finite(&self) -> bool {
        self.image.all_finite() && self.code.all_finite() && self.joint.all_finite()
    }
}

/// θ_E, θ_G and θ_D together.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: NetParams,
    pub generator: NetParams,
    pub discriminator: DiscriminatorParams,
}

impl ModelParams {
    pub fn all_finite(&self) -> bool {
        self.encoder.all_finite() && self.generator.all_finite() && self.discriminator.all_finite()
    }
}

/// Per-example latent codes with their reparametrization statistics, all `[batch, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl LatentCode {
    pub fn batch(&self) -> usize {
        self.z.dim(0)
    }

    pub fn width(&self) -> usize {
        self.z.dim(1)
    }
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: f64, logvar: f64, eps: f64) -> f64 {
    mu + (0.5 * logvar).exp() * eps
}

/// Whether the encoder samples (`Train`, batch normalization on batch
/// statistics) or returns the mean code (`Deterministic`, running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Deterministic,
}

pub struct EncoderTrace {
    net: Trace,
    eps: Tensor,
    logvar_raw: Vec<f64>,
}

pub struct DiscriminatorTrace {
    image: Trace,
    code: Trace,
    joint: Trace,
    image_feat: [usize; 3],
    code_feat: [usize; 3],
    probs: Vec<f64>,
}

/// i.i.d. standard normal `[batch, m]`.
pub fn sample_prior<R: Rng + ?Sized>(batch: usize, m: usize, rng: &mut R) -> Tensor {
    let data = (0..batch * m).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(&[batch, m], data).expect("prior shape")
}

/// The five networks of a Triplet BiGAN, built from one [`ArchitectureConfig`].
#[derive(Clone, Debug)]
pub struct Networks {
    arch: ArchitectureConfig,
    encoder: Sequential,
    generator: Sequential,
    image_disc: Sequential,
    code_disc: Sequential,
    joint_disc: Sequential,
}

impl Networks {
    pub fn new(arch: &ArchitectureConfig) -> Result<Self> {
        let bad = |msg: String| Error::Usage(format!("architecture: {msg}"));
        let counts = [
            ("encoder", arch.encoder.len(), ENCODER_LAYERS),
            ("generator", arch.generator.len(), GENERATOR_LAYERS),
            ("image discriminator", arch.image_discriminator.len(), IMAGE_DISCRIMINATOR_LAYERS),
            ("code discriminator", arch.code_discriminator.len(), CODE_DISCRIMINATOR_LAYERS),
            ("joint discriminator", arch.joint_discriminator.len(), JOINT_DISCRIMINATOR_LAYERS),
        ];
        for (name, got, want) in counts {
            if got != want {
                return Err(bad(format!("{name} needs {want} layers, got {got}")));
            }
        }
        let m = arch.latent_dim;
        if m == 0 {
            return Err(bad("latent dimension must be positive".into()));
        }
        if !(arch.leaky_slope > 0.0 && arch.leaky_slope < 1.0) {
            return Err(bad(format!("leaky slope {} outside (0, 1)", arch.leaky_slope)));
        }
        let [c, _, _] = arch.image_shape;
        if arch.encoder[ENCODER_LAYERS - 1].out_channels != 2 * m {
            return Err(bad(format!("encoder must end in 2m = {} channels", 2 * m)));
        }
        if arch.generator[GENERATOR_LAYERS - 1].out_channels != c {
            return Err(bad(format!("generator must end in {c} image channels")));
        }
        if arch.joint_discriminator[JOINT_DISCRIMINATOR_LAYERS - 1].out_channels != 1 {
            return Err(bad("joint discriminator must end in one channel".into()));
        }
        let leaky = Activation::LeakyRelu(arch.leaky_slope);
        let wrap = |r: tbigan_nn::error::Result<Sequential>, name: &str| r.map_err(|e| bad(format!("{name}: {e}")));

        let encoder = wrap(
            Sequential::new(
                arch.image_shape,
                &specs(&arch.encoder, LayerKind::Conv, |i| i + 1 < ENCODER_LAYERS, |i| {
                    if i + 1 < ENCODER_LAYERS {
                        leaky
                    } else {
                        Activation::Identity
                    }
                }),
            ),
            "encoder",
        )?;
        if encoder.output_shape() != [2 * m, 1, 1] {
            return Err(bad(format!("encoder output {:?} is not [2m, 1, 1]", encoder.output_shape())));
        }
        let generator = wrap(
            Sequential::new(
                [m, 1, 1],
                &specs(&arch.generator, LayerKind::ConvTranspose, |i| i + 1 < GENERATOR_LAYERS, |i| {
                    if i + 1 < GENERATOR_LAYERS {
                        leaky
                    } else {
                        Activation::Sigmoid
                    }
                }),
            ),
            "generator",
        )?;
        if generator.output_shape() != arch.image_shape {
            return Err(bad(format!(
                "generator output {:?} differs from image shape {:?}",
                generator.output_shape(),
                arch.image_shape
            )));
        }
        let image_disc = wrap(
            Sequential::new(arch.image_shape, &specs(&arch.image_discriminator, LayerKind::Conv, |_| false, |_| leaky)),
            "image discriminator",
        )?;
        let code_disc = wrap(
            Sequential::new([m, 1, 1], &specs(&arch.code_discriminator, LayerKind::Conv, |_| false, |_| leaky)),
            "code discriminator",
        )?;
        let joint_in: usize =
            image_disc.output_shape().iter().product::<usize>() + code_disc.output_shape().iter().product::<usize>();
        let joint_disc = wrap(
            Sequential::new(
                [joint_in, 1, 1],
                &specs(&arch.joint_discriminator, LayerKind::Conv, |_| false, |i| {
                    if i + 1 < JOINT_DISCRIMINATOR_LAYERS {
                        leaky
                    } else {
                        Activation::Sigmoid
                    }
                }),
            ),
            "joint discriminator",
        )?;
        if joint_disc.output_shape() != [1, 1, 1] {
            return Err(bad("joint discriminator must produce one value per example".into()));
        }
        Ok(Self {
            arch: arch.clone(),
            encoder,
            generator,
            image_disc,
            code_disc,
            joint_disc,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn encoder_net(&self) -> &Sequential {
        &self.encoder
    }

    pub fn generator_net(&self) -> &Sequential {
        &self.generator
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        ModelParams {
            encoder: self.encoder.init_params(rng),
            generator: self.generator.init_params(rng),
            discriminator: DiscriminatorParams {
                image: self.image_disc.init_params(rng),
                code: self.code_disc.init_params(rng),
                joint: self.joint_disc.init_params(rng),
            },
        }
    }

    /// Encode with explicit reparametrization noise `eps` (`[batch, m]`),
    /// in train mode, keeping what [`Networks::encode_backward`] needs.
    pub fn encode_traced(&self, p: &ModelParams, images: &Tensor, eps: &Tensor) -> Result<(LatentCode, EncoderTrace)> {
        let n = images.shape().first().copied().unwrap_or(0);
        let m = self.latent_dim();
        if eps.shape() != [n, m] {
            return Err(Error::Contract(format!("noise shape {:?}, expected [{n}, {m}]", eps.shape())));
        }
        let (out, net) = self.encoder.forward(&p.encoder, images, Mode::Train)?;
        let (mu, logvar_raw) = split_heads(&out, m);
        let logvar: Vec<f64> = logvar_raw.iter().map(|v| v.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)).collect();
        let z: Vec<f64> = (0..n * m).map(|i| reparameterize(mu[i], logvar[i], eps.data()[i])).collect();
        let code = LatentCode {
            z: Tensor::from_vec(&[n, m], z)?,
            mu: Tensor::from_vec(&[n, m], mu)?,
            logvar: Tensor::from_vec(&[n, m], logvar)?,
        };
        Ok((
            code,
            EncoderTrace {
                net,
                eps: eps.clone(),
                logvar_raw,
            },
        ))
    }

    pub fn encode<R: Rng + ?Sized>(&self, p: &ModelParams, images: &Tensor, mode: EncodeMode, rng: &mut R) -> Result<LatentCode> {
        match mode {
            EncodeMode::Train => {
                let n = images.shape().first().copied().unwrap_or(0);
                let eps = sample_prior(n, self.latent_dim(), rng);
                Ok(self.encode_traced(p, images, &eps)?.0)
            }
            EncodeMode::Deterministic => self.encode_deterministic(p, images),
        }
    }

    /// `z = mu`, batch normalization from running statistics.
    pub fn encode_deterministic(&self, p: &ModelParams, images: &Tensor) -> Result<LatentCode> {
        let m = self.latent_dim();
        let out = self.encoder.infer(&p.encoder, images, Mode::Eval)?;
        let n = out.dim(0);
        let (mu, logvar) = split_heads(&out, m);
        let logvar = logvar.iter().map(|v| v.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)).collect();
        let mu = Tensor::from_vec(&[n, m], mu)?;
        Ok(LatentCode {
            z: mu.clone(),
            mu,
            logvar: Tensor::from_vec(&[n, m], logvar)?,
        })
    }

    /// Deterministic codes (`mu`) for every image of `set`, encoded in
    /// chunks of `batch_size`. Row order follows the set.
    pub fn encode_set(&self, p: &ModelParams, set: &ImageSet, batch_size: usize) -> Result<Tensor> {
        let m = self.latent_dim();
        let batch_size = batch_size.max(1);
        let mut data = Vec::with_capacity(set.len() * m);
        let all: Vec<usize> = (0..set.len()).collect();
        for chunk in all.chunks(batch_size) {
            data.extend_from_slice(self.encode_deterministic(p, &set.batch(chunk))?.mu.data());
        }
        Ok(Tensor::from_vec(&[set.len(), m], data)?)
    }

    /// Backpropagate `grad_z` (`[batch, m]`) through sampling and the encoder.
    /// Returns the gradient with respect to the input images.
    pub fn encode_backward(&self, p: &ModelParams, trace: &EncoderTrace, grad_z: &Tensor, grads: &mut NetParams) -> Result<Tensor> {
        let m = self.latent_dim();
        let n = trace.eps.dim(0);
        if grad_z.shape() != [n, m] {
            return Err(Error::Contract(format!("code gradient {:?}, expected [{n}, {m}]", grad_z.shape())));
        }
        let mut g = vec![0.0; n * 2 * m];
        for b in 0..n {
            for j in 0..m {
                let i = b * m + j;
                let gz = grad_z.data()[i];
                g[b * 2 * m + j] = gz;
                let raw = trace.logvar_raw[i];
                if raw > -LOGVAR_LIMIT && raw < LOGVAR_LIMIT {
                    g[b * 2 * m + m + j] = gz * trace.eps.data()[i] * 0.5 * (0.5 * raw).exp();
                }
            }
        }
        let g = Tensor::from_vec(&[n, 2 * m, 1, 1], g)?;
        Ok(self.encoder.backward(&p.encoder, &trace.net, &g, grads)?)
    }

    pub fn commit_encoder_stats(&self, p: &mut ModelParams, trace: &EncoderTrace) {
        self.encoder.commit_running_stats(&mut p.encoder, &trace.net);
    }

    fn code_image(&self, codes: &Tensor) -> Result<Tensor> {
        let m = self.latent_dim();
        match codes.shape() {
            [n, w] if *w == m => Ok(codes.clone().reshape(&[*n, m, 1, 1])?),
            s => Err(Error::Contract(format!("codes have shape {s:?}, expected [batch, {m}]"))),
        }
    }

    pub fn generate(&self, p: &ModelParams, codes: &Tensor, mode: EncodeMode) -> Result<Tensor> {
        let mode = match mode {
            EncodeMode::Train => Mode::Train,
            EncodeMode::Deterministic => Mode::Eval,
        };
        Ok(self.generator.infer(&p.generator, &self.code_image(codes)?, mode)?)
    }

    /// Train-mode generation keeping the trace.
    pub fn generate_traced(&self, p: &ModelParams, codes: &Tensor) -> Result<(Tensor, Trace)> {
        Ok(self.generator.forward(&p.generator, &self.code_image(codes)?, Mode::Train)?)
    }

    /// Returns the gradient with respect to the codes, `[batch, m]`.
    pub fn generate_backward(&self, p: &ModelParams, trace: &Trace, grad_images: &Tensor, grads: &mut NetParams) -> Result<Tensor> {
        let g = self.generator.backward(&p.generator, trace, grad_images, grads)?;
        let n = g.dim(0);
        Ok(g.reshape(&[n, self.latent_dim()])?)
    }

    pub fn commit_generator_stats(&self, p: &mut ModelParams, trace: &Trace) {
        self.generator.commit_running_stats(&mut p.generator, trace);
    }

    /// `D_xz(concat(D_x(x), D_z(z)))`, one probability per example.
    pub fn discriminate(&self, p: &ModelParams, images: &Tensor, codes: &Tensor) -> Result<Vec<f64>> {
        Ok(self.discriminate_traced(p, images, codes)?.0)
    }

    pub fn discriminate_traced(&self, p: &ModelParams, images: &Tensor, codes: &Tensor) -> Result<(Vec<f64>, DiscriminatorTrace)> {
        let n = images.shape().first().copied().unwrap_or(0);
        if codes.shape().first() != Some(&n) {
            return Err(Error::Contract(format!(
                "{n} images but codes of shape {:?}",
                codes.shape()
            )));
        }
        let d = &p.discriminator;
        let (u, image) = self.image_disc.forward(&d.image, images, Mode::Train)?;
        let (v, code) = self.code_disc.forward(&d.code, &self.code_image(codes)?, Mode::Train)?;
        let (ul, vl) = (u.row_len(), v.row_len());
        let mut joint_in = Vec::with_capacity(n * (ul + vl));
        for b in 0..n {
            joint_in.extend_from_slice(u.row(b));
            joint_in.extend_from_slice(v.row(b));
        }
        let joint_in = Tensor::from_vec(&[n, ul + vl, 1, 1], joint_in)?;
        let (out, joint) = self.joint_disc.forward(&d.joint, &joint_in, Mode::Train)?;
        let probs = out.into_data();
        let to3 = |t: &Tensor| [t.dim(1), t.dim(2), t.dim(3)];
        Ok((
            probs.clone(),
            DiscriminatorTrace {
                image,
                code,
                joint,
                image_feat: to3(&u),
                code_feat: to3(&v),
                probs,
            },
        ))
    }

    /// Returns `(grad_images, grad_codes)`; parameter gradients accumulate into `grads`.
    pub fn discriminate_backward(
        &self,
        p: &ModelParams,
        trace: &DiscriminatorTrace,
        grad_probs: &[f64],
        grads: &mut DiscriminatorParams,
    ) -> Result<(Tensor, Tensor)> {
        let n = trace.probs.len();
        if grad_probs.len() != n {
            return Err(Error::Contract(format!("{} probability gradients for {n} examples", grad_probs.len())));
        }
        let d = &p.discriminator;
        let g = Tensor::from_vec(&[n, 1, 1, 1], grad_probs.to_vec())?;
        let gj = self.joint_disc.backward(&d.joint, &trace.joint, &g, &mut grads.joint)?;
        let ul: usize = trace.image_feat.iter().product();
        let vl: usize = trace.code_feat.iter().product();
        let mut gu = Vec::with_capacity(n * ul);
        let mut gv = Vec::with_capacity(n * vl);
        for b in 0..n {
            let row = gj.row(b);
            gu.extend_from_slice(&row[..ul]);
            gv.extend_from_slice(&row[ul..]);
        }
        let [a, h, w] = trace.image_feat;
        let gu = Tensor::from_vec(&[n, a, h, w], gu)?;
        let [a, h, w] = trace.code_feat;
        let gv = Tensor::from_vec(&[n, a, h, w], gv)?;
        let gx = self.image_disc.backward(&d.image, &trace.image, &gu, &mut grads.image)?;
        let gz = self.code_disc.backward(&d.code, &trace.code, &gv, &mut grads.code)?;
        let gz = gz.reshape(&[n, self.latent_dim()])?;
        Ok((gx, gz))
    }
}

fn split_heads(out: &Tensor, m: usize) -> (Vec<f64>, Vec<f64>) {
    let n = out.dim(0);
    let mut mu = Vec::with_capacity(n * m);
    let mut logvar = Vec::with_capacity(n * m);
    for b in 0..n {
        let row = out.row(b);
        mu.extend_from_slice(&row[..m]);
        logvar.extend_from_slice(&row[m..2 * m]);
    }
    (mu, logvar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize) -> (Networks, ModelParams, ChaCha8Rng) {
        let nets = Networks::new(&ArchitectureConfig::tiny(m)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = nets.init_params(&mut rng);
        (nets, p, rng)
    }

    fn images(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(&[n, 3, 16, 16], (0..n * 768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layer_counts_match_the_architecture() {
        for preset in [Preset::Tiny, Preset::Standard] {
            let arch = ArchitectureConfig::preset(preset, 4, 16, 3);
            assert_eq!(arch.encoder_channels().len(), 7);
            assert_eq!(arch.generator_channels().len(), 7);
            assert_eq!(arch.dx_channels().len(), 5);
            assert_eq!(arch.dz_channels().len(), 2);
            assert_eq!(arch.dxz_channels().len(), 3);
            Networks::new(&arch).unwrap();
        }
    }

    #[test]
    fn shapes_hold_for_supported_latent_sizes() {
        for m in [16, 32, 64, 128, 256] {
            let nets = Networks::new(&ArchitectureConfig::preset(Preset::Tiny, 2, m, 3)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let p = nets.init_params(&mut rng);
            let x = images(2, &mut rng);
            let code = nets.encode(&p, &x, EncodeMode::Train, &mut rng).unwrap();
            assert_eq!(code.z.shape(), &[2, m]);
            let back = nets.generate(&p, &code.z, EncodeMode::Train).unwrap();
            assert_eq!(back.shape(), x.shape());
            assert_eq!(nets.encode_deterministic(&p, &back).unwrap().z.shape(), &[2, m]);
        }
    }

    #[test]
    fn bad_architectures_are_rejected() {
        let mut arch = ArchitectureConfig::tiny(8);
        arch.encoder.pop();
        assert!(Networks::new(&arch).is_err());
        let mut arch = ArchitectureConfig::tiny(8);
        arch.encoder[6].out_channels = 9;
        assert!(Networks::new(&arch).is_err());
        let mut arch = ArchitectureConfig::tiny(8);
        arch.leaky_slope = 1.5;
        assert!(Networks::new(&arch).is_err());
    }

    #[test]
    fn deterministic_encoding_is_pure() {
        let (nets, p, mut rng) = setup(8);
        let x = images(4, &mut rng);
        let a = nets.encode(&p, &x, EncodeMode::Deterministic, &mut rng).unwrap();
        let b = nets.encode(&p, &x, EncodeMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.z, a.mu);
    }

    #[test]
    fn train_encoding_shape_and_sampling() {
        let (nets, p, mut rng) = setup(8);
        let x = images(4, &mut rng);
        let eps = sample_prior(4, 8, &mut rng);
        let (code, _) = nets.encode_traced(&p, &x, &eps).unwrap();
        assert_eq!(code.z.shape(), &[4, 8]);
        for i in 0..32 {
            let want = code.mu.data()[i] + (0.5 * code.logvar.data()[i]).exp() * eps.data()[i];
            assert_eq!(code.z.data()[i], want);
        }
        assert!(nets.encode_traced(&p, &x, &sample_prior(3, 8, &mut rng)).is_err());
    }

    #[test]
    fn vanishing_variance_recovers_the_mean() {
        for (mu, eps) in [(0.3, 1.7), (-2.0, -0.4), (0.0, 3.0)] {
            assert!((reparameterize(mu, -80.0, eps) - mu).abs() < 1e-15);
        }
    }

    #[test]
    fn generated_pixels_are_strictly_inside_the_unit_interval() {
        let (nets, p, mut rng) = setup(8);
        let z = sample_prior(8, 8, &mut rng);
        let x = nets.generate(&p, &z, EncodeMode::Train).unwrap();
        assert_eq!(x.dim(0), 8);
        assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = Tensor::zeros(&[1, 8]);
        let a = nets.generate(&p, &zero, EncodeMode::Deterministic).unwrap();
        assert!(a.all_finite());
        assert_eq!(a, nets.generate(&p, &zero, EncodeMode::Deterministic).unwrap());
        assert!(nets.generate(&p, &Tensor::zeros(&[1, 7]), EncodeMode::Train).is_err());
    }

    #[test]
    fn discriminator_is_per_example() {
        let (nets, p, mut rng) = setup(8);
        let x = images(4, &mut rng);
        let z = sample_prior(4, 8, &mut rng);
        let probs = nets.discriminate(&p, &x, &z).unwrap();
        assert!(probs.iter().all(|&v| v > 0.0 && v < 1.0));
        let perm = [2, 0, 3, 1];
        let permuted = nets.discriminate(&p, &x.select_rows(&perm), &z.select_rows(&perm)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(permuted[k], probs[i]);
        }
        let swapped = nets.discriminate(&p, &x, &z.select_rows(&[1, 0, 2, 3])).unwrap();
        assert_ne!(swapped[0], probs[0]);
        assert!(nets.discriminate(&p, &x, &sample_prior(3, 8, &mut rng)).is_err());
    }

    #[test]
    fn prior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let z = sample_prior(n, 1, &mut rng);
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
        let a = sample_prior(4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_prior(4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
