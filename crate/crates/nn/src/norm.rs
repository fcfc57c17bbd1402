//! Per-channel batch normalization over `[batch, channels, h, w]`.

use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;

/// Whether normalization uses batch statistics or the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormTrace {
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

fn dims(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2..].iter().product())
}

pub fn forward(x: &Tensor, p: &NormParams, mode: Mode) -> (Tensor, NormTrace) {
    let (n, c, l) = dims(x);
    let m = (n * l) as f64;
    let xs = x.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xs[(b * c + ch) * l..(b * c + ch + 1) * l].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += xs[(b * c + ch) * l..(b * c + ch + 1) * l]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            (mean, var)
        }
        Mode::Eval => (p.running_mean.clone(), p.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
    let mut xhat = vec![0.0; xs.len()];
    let mut y = vec![0.0; xs.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
            for i in r {
                let h = (xs[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = p.gamma[ch] * h + p.beta[ch];
            }
        }
    }
    let unbiased = if m > 1.0 {
        var.iter().map(|v| v * m / (m - 1.0)).collect()
    } else {
        var.clone()
    };
    let y = Tensor::from_vec(x.shape(), y).expect("same shape");
    (
        y,
        NormTrace {
            mode,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: unbiased,
        },
    )
}

/// Accumulates `dgamma`/`dbeta` and returns the input gradient.
pub fn backward(
    trace: &NormTrace,
    p: &NormParams,
    grad_out: &Tensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let (n, c, l) = dims(grad_out);
    let m = (n * l) as f64;
    let gy = grad_out.data();
    let mut dx = vec![0.0; gy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                sum_dy += gy[i];
                sum_dy_xhat += gy[i] * trace.xhat[i];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let scale = p.gamma[ch] * trace.inv_std[ch];
        for b in 0..n {
            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                dx[i] = match trace.mode {
                    Mode::Train => scale * (gy[i] - sum_dy / m - trace.xhat[i] * sum_dy_xhat / m),
                    Mode::Eval => scale * gy[i],
                };
            }
        }
    }
    Tensor::from_vec(grad_out.shape(), dx).expect("same shape")
}

/// Fold a train-mode pass's batch statistics into the running estimates.
pub fn commit_running_stats(p: &mut NormParams, trace: &NormTrace) {
    if trace.mode != Mode::Train {
        return;
    }
    for ch in 0..p.gamma.len() {
        p.running_mean[ch] = (1.0 - MOMENTUM) * p.running_mean[ch] + MOMENTUM * trace.batch_mean[ch];
        p.running_var[ch] = (1.0 - MOMENTUM) * p.running_var[ch] + MOMENTUM * trace.batch_var[ch];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let x = Tensor::from_vec(&[2, 2, 1, 2], vec![1., 2., 10., 20., 3., 4., 30., 40.]).unwrap();
        let p = NormParams::new(2);
        let (y, _) = forward(&x, &p, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 2 + ch) * 2..(b * 2 + ch + 1) * 2].to_vec())
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = Tensor::from_vec(&[3, 2, 1, 2], vec![0.3, -1.2, 2.0, 0.5, 0.1, 0.9, -0.4, 1.7, 0.0, 0.2, 1.1, -2.0]).unwrap();
        let probe: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let mut p = NormParams::new(2);
        p.gamma = vec![1.5, 0.7];
        p.beta = vec![0.1, -0.3];
        let f = |x: &Tensor, p: &NormParams| -> f64 {
            forward(x, p, Mode::Train).0.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = forward(&x, &p, Mode::Train);
        let g = Tensor::from_vec(x.shape(), probe.clone()).unwrap();
        let mut dgamma = vec![0.0; 2];
        let mut dbeta = vec![0.0; 2];
        let dx = backward(&trace, &p, &g, &mut dgamma, &mut dbeta);
        let h = 1e-6;
        for i in 0..12 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &p) - f(&xm, &p)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx.data()[i]);
        }
        let mut pp = p.clone();
        pp.gamma[1] += h;
        let mut pm = p.clone();
        pm.gamma[1] -= h;
        assert!(((f(&x, &pp) - f(&x, &pm)) / (2.0 * h) - dgamma[1]).abs() < 1e-7);
    }

    #[test]
    fn running_stats_update_only_on_commit() {
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut p = NormParams::new(1);
        let (_, trace) = forward(&x, &p, Mode::Train);
        assert_eq!(p.running_mean, vec![0.0]);
        commit_running_stats(&mut p, &trace);
        assert!((p.running_mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((p.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
