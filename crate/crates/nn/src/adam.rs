#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one instance per parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Adam {
    /// Zero moments shaped like `params` (a list of trainable slices).
    pub fn new(config: AdamConfig, params: &[&[f64]]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One descent step; `params` and `grads` list slices in the same order
    /// as at construction.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter list changed shape");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequential::{LayerParams, NetParams};
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> NetParams {
        NetParams {
            layers: vec![LayerParams {
                weight: Tensor::from_vec(&[1, 1, 1, 1], vec![v]).unwrap(),
                bias: vec![0.0],
                norm: None,
            }],
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p.trainable());
        let g = scalar(3.0);
        adam.update(p.trainable_mut(), g.trainable());
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.layers[0].weight.data()[0] - (1.0 - 1e-4)).abs() < 1e-12);
        assert_eq!(p.layers[0].bias[0], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = scalar(5.0);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &p.trainable(),
        );
        for _ in 0..500 {
            let x = p.layers[0].weight.data()[0];
            let g = scalar(2.0 * (x - 2.0));
            adam.update(p.trainable_mut(), g.trainable());
        }
        assert!((p.layers[0].weight.data()[0] - 2.0).abs() < 1e-2);
    }
}
