//! A chain of conv / transposed-conv blocks, each optionally followed by
//! batch normalization and a pointwise activation.

use rand::Rng;

use crate::activation::Activation;
use crate::conv::{self, ConvGeometry};
use crate::error::{NnError, Result};
use crate::norm::{self, NormParams, NormTrace};
use crate::tensor::Tensor;

pub use crate::norm::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub batch_norm: bool,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
struct Resolved {
    spec: LayerSpec,
    in_channels: usize,
    out_hw: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    input: [usize; 3],
    layers: Vec<Resolved>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `[out, in, k, k]` for convolutions, `[in, out, k, k]` for transposed ones.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub norm: Option<NormParams>,
}

/// Parameters (and normalization buffers) of one [`Sequential`].
///
/// The same type doubles as a gradient accumulator; in that role the
/// running-statistics buffers are unused.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

struct LayerTrace {
    input: Tensor,
    cols: Vec<f64>,
    norm: Option<NormTrace>,
    output: Tensor,
}

/// Everything a backward pass needs from one forward call.
pub struct Trace {
    layers: Vec<LayerTrace>,
}

impl Sequential {
    pub fn new(input: [usize; 3], specs: &[LayerSpec]) -> Result<Self> {
        let [mut c, mut h, mut w] = input;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnError::Config(format!("empty input shape {input:?}")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if spec.out_channels == 0 {
                return Err(NnError::Config(format!("layer {i}: zero output channels")));
            }
            let g = spec.geometry;
            let (oh, ow) = match spec.kind {
                LayerKind::Conv => (g.conv_out(h), g.conv_out(w)),
                LayerKind::ConvTranspose => (g.transposed_out(h), g.transposed_out(w)),
            };
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(NnError::Config(format!(
                    "layer {i}: geometry {g:?} does not fit a {h}x{w} input"
                )));
            };
            if oh == 0 || ow == 0 {
                return Err(NnError::Config(format!("layer {i}: empty output")));
            }
            layers.push(Resolved {
                spec: spec.clone(),
                in_channels: c,
                out_hw: (oh, ow),
            });
            c = spec.out_channels;
            h = oh;
            w = ow;
        }
        Ok(Self { input, layers })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn output_shape(&self) -> [usize; 3] {
        match self.layers.last() {
            Some(l) => [l.spec.out_channels, l.out_hw.0, l.out_hw.1],
            None => self.input,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases, unit/zero normalization.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> NetParams {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let k = l.spec.geometry.kernel;
                let (ic, oc) = (l.in_channels, l.spec.out_channels);
                let (shape, fan_in) = match l.spec.kind {
                    LayerKind::Conv => ([oc, ic, k, k], ic * k * k),
                    LayerKind::ConvTranspose => ([ic, oc, k, k], oc * k * k),
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..oc).map(|_| rng.random_range(-bound..bound)).collect();
                LayerParams {
                    weight: Tensor::from_vec(&shape, w).expect("shape"),
                    bias,
                    norm: l.spec.batch_norm.then(|| NormParams::new(oc)),
                }
            })
            .collect();
        NetParams { layers }
    }

    fn check_params(&self, p: &NetParams) -> Result<()> {
        if p.layers.len() != self.layers.len() {
            return Err(NnError::Shape(format!(
                "network has {} layers, parameters have {}",
                self.layers.len(),
                p.layers.len()
            )));
        }
        for (i, (l, lp)) in self.layers.iter().zip(&p.layers).enumerate() {
            let k = l.spec.geometry.kernel;
            let (ic, oc) = (l.in_channels, l.spec.out_channels);
            let want = match l.spec.kind {
                LayerKind::Conv => [oc, ic, k, k],
                LayerKind::ConvTranspose => [ic, oc, k, k],
            };
            if lp.weight.shape() != want
                || lp.bias.len() != oc
                || lp.norm.is_some() != l.spec.batch_norm
                || lp.norm.as_ref().is_some_and(|n| n.gamma.len() != oc)
            {
                return Err(NnError::Shape(format!("layer {i}: parameter shapes disagree with the layer")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, p: &NetParams, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        self.check_params(p)?;
        let want = self.input;
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(NnError::Shape(format!(
                "expected input [batch, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (l, lp) in self.layers.iter().zip(&p.layers) {
            let g = l.spec.geometry;
            let (pre, cols) = match l.spec.kind {
                LayerKind::Conv => {
                    let out = conv::conv2d_forward(&cur, &lp.weight, &lp.bias, g)?;
                    (out.output, out.cols)
                }
                LayerKind::ConvTranspose => (
                    conv::conv_transpose2d_forward(&cur, &lp.weight, &lp.bias, g)?,
                    Vec::new(),
                ),
            };
            let (normed, norm_trace) = match &lp.norm {
                Some(np) => {
                    let (y, t) = norm::forward(&pre, np, mode);
                    (y, Some(t))
                }
                None => (pre, None),
            };
            let act = l.spec.activation;
            let output = match act {
                Activation::Identity => normed,
                _ => normed.map(|v| act.apply(v)),
            };
            let input = std::mem::replace(&mut cur, output.clone());
            traces.push(LayerTrace {
                // conv backward only needs the input's shape once `cols` is kept
                input: if l.spec.kind == LayerKind::Conv {
                    Tensor::zeros(&[input.dim(0), 0, input.dim(2), input.dim(3)])
                } else {
                    input
                },
                cols,
                norm: norm_trace,
                output,
            });
        }
        Ok((cur, Trace { layers: traces }))
    }

    /// Forward pass that keeps no trace.
    pub fn infer(&self, p: &NetParams, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward(p, x, mode).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, p: &NetParams, trace: &Trace, grad_out: &Tensor, grads: &mut NetParams) -> Result<Tensor> {
        self.check_params(p)?;
        if trace.layers.len() != self.layers.len() {
            return Err(NnError::Shape("trace does not belong to this network".into()));
        }
        let mut g = grad_out.clone();
        for ((l, lp), (lt, lg)) in self
            .layers
            .iter()
            .zip(&p.layers)
            .zip(trace.layers.iter().zip(grads.layers.iter_mut()))
            .rev()
        {
            if g.shape() != lt.output.shape() {
                return Err(NnError::Shape(format!(
                    "gradient {:?} does not match layer output {:?}",
                    g.shape(),
                    lt.output.shape()
                )));
            }
            let act = l.spec.activation;
            if act != Activation::Identity {
                for (gv, &y) in g.data_mut().iter_mut().zip(lt.output.data()) {
                    *gv *= act.derivative_from_output(y);
                }
            }
            if let (Some(nt), Some(np)) = (&lt.norm, &lp.norm) {
                let ng = lg.norm.as_mut().expect("gradient buffers mirror parameters");
                g = norm::backward(nt, np, &g, &mut ng.gamma, &mut ng.beta);
            }
            let g_ = l.spec.geometry;
            g = match l.spec.kind {
                LayerKind::Conv => {
                    let s = lt.input.shape();
                    let shape = [s[0], l.in_channels, s[2], s[3]];
                    conv::conv2d_backward(&shape, &lt.cols, &lp.weight, &g, g_, lg.weight.data_mut(), &mut lg.bias)?
                }
                LayerKind::ConvTranspose => {
                    conv::conv_transpose2d_backward(&lt.input, &lp.weight, &g, g_, lg.weight.data_mut(), &mut lg.bias)?
                }
            };
        }
        Ok(g)
    }

    /// Fold the batch statistics recorded in `trace` into the running estimates.
    pub fn commit_running_stats(&self, p: &mut NetParams, trace: &Trace) {
        for (lp, lt) in p.layers.iter_mut().zip(&trace.layers) {
            if let (Some(np), Some(nt)) = (lp.norm.as_mut(), lt.norm.as_ref()) {
                norm::commit_running_stats(np, nt);
            }
        }
    }
}

impl NetParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: vec![0.0; l.bias.len()],
                    norm: l.norm.as_ref().map(NormParams::zeros_like),
                })
                .collect(),
        }
    }

    /// Trainable slices in a fixed order: per layer weight, bias, gamma, beta.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(&l.bias[..]);
            if let Some(n) = &l.norm {
                out.push(&n.gamma[..]);
                out.push(&n.beta[..]);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias[..]);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma[..]);
                out.push(&mut n.beta[..]);
            }
        }
        out
    }

    /// Running-statistics buffers in a fixed order: per layer mean, var.
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| l.norm.as_ref())
            .flat_map(|n| [&n.running_mean[..], &n.running_var[..]])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.norm.as_mut())
            .flat_map(|n| [&mut n.running_mean[..], &mut n.running_var[..]])
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    /// Flat-index access across [`NetParams::trainable`] (used by gradient checks).
    pub fn trainable_at_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for s in self.trainable_mut() {
            if index < s.len() {
                return Some(&mut s[index]);
            }
            index -= s.len();
        }
        None
    }

    pub fn trainable_at(&self, mut index: usize) -> Option<f64> {
        for s in self.trainable() {
            if index < s.len() {
                return Some(s[index]);
            }
            index -= s.len();
        }
        None
    }

    /// `self += scale * other`, elementwise over trainable slices.
    pub fn add_scaled(&mut self, other: &NetParams, scale: f64) {
        for (a, b) in self.trainable_mut().into_iter().zip(other.trainable()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.trainable()
            .iter()
            .chain(self.buffers().iter())
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                kind: LayerKind::Conv,
                out_channels: 4,
                geometry: ConvGeometry::new(3, 1, 0),
                batch_norm: true,
                activation: Activation::LeakyRelu(0.1),
            },
            LayerSpec {
                kind: LayerKind::ConvTranspose,
                out_channels: 2,
                geometry: ConvGeometry::new(2, 2, 0),
                batch_norm: false,
                activation: Activation::Sigmoid,
            },
        ]
    }

    #[test]
    fn shapes_propagate() {
        let net = Sequential::new([3, 6, 6], &specs()).unwrap();
        assert_eq!(net.output_shape(), [2, 8, 8]);
        assert!(Sequential::new([3, 2, 2], &specs()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Sequential::new([3, 6, 6], &specs()).unwrap();
        let p = net.init_params(&mut rng);
        let x = Tensor::from_vec(&[3, 3, 6, 6], (0..324).map(|i| ((i * 37 % 101) as f64) / 101.0).collect()).unwrap();
        let probe: Vec<f64> = (0..3 * 2 * 64).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
        let f = |p: &NetParams| -> f64 {
            net.infer(p, &x, Mode::Train).unwrap().data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (y, trace) = net.forward(&p, &x, Mode::Train).unwrap();
        let mut grads = p.zeros_like();
        net.backward(&p, &trace, &Tensor::from_vec(y.shape(), probe.clone()).unwrap(), &mut grads)
            .unwrap();
        let total = p.num_trainable();
        let h = 1e-6;
        for idx in (0..total).step_by(7) {
            let mut pp = p.clone();
            *pp.trainable_at_mut(idx).unwrap() += h;
            let mut pm = p.clone();
            *pm.trainable_at_mut(idx).unwrap() -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            let an = grads.trainable_at(idx).unwrap();
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Sequential::new([3, 6, 6], &specs()).unwrap();
        let p = net.init_params(&mut rng);
        let x = Tensor::from_vec(&[4, 3, 6, 6], (0..432).map(|i| ((i * 17 % 23) as f64) / 23.0).collect()).unwrap();
        let full = net.infer(&p, &x, Mode::Eval).unwrap();
        for i in 0..4 {
            let one = net.infer(&p, &x.select_rows(&[i]), Mode::Eval).unwrap();
            assert_eq!(one.data(), full.row(i));
        }
    }
}
