//! Scalar objectives in descent form, with their input gradients.
//!
//! The adversarial losses are the negated BiGAN value terms, so minimizing
//! the discriminator loss maximizes the value for `D` while minimizing the
//! encoder-generator loss drives the opposite side of the game.

use serde::{Deserialize, Serialize};
use tbigan_nn::Tensor;

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-step (or per-epoch averaged) loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d: Option<f64>,
    pub l_eg: Option<f64>,
    pub l_t: Option<f64>,
    pub l_teg: Option<f64>,
    pub d_plus_mean: Option<f64>,
    pub d_minus_mean: Option<f64>,
}

impl LossReport {
    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_d", self.l_d),
            ("l_eg", self.l_eg),
            ("l_t", self.l_t),
            ("l_teg", self.l_teg),
            ("d_plus_mean", self.d_plus_mean),
            ("d_minus_mean", self.d_minus_mean),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
        .map(|(n, _)| n)
    }

    /// Field-wise mean, skipping absent values.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        fn avg(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let vals: Vec<f64> = it.flatten().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
        LossReport {
            l_d: avg(reports.iter().map(|r| r.l_d)),
            l_eg: avg(reports.iter().map(|r| r.l_eg)),
            l_t: avg(reports.iter().map(|r| r.l_t)),
            l_teg: avg(reports.iter().map(|r| r.l_teg)),
            d_plus_mean: avg(reports.iter().map(|r| r.d_plus_mean)),
            d_minus_mean: avg(reports.iter().map(|r| r.d_minus_mean)),
        }
    }
}

fn check_codes(anchor: &Tensor, other: &Tensor, what: &str) -> Result<()> {
    if anchor.shape().len() != 2 || anchor.shape() != other.shape() {
        return Err(Error::Contract(format!(
            "{what} codes {:?} not aligned with anchor codes {:?}",
            other.shape(),
            anchor.shape()
        )));
    }
    Ok(())
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean anchor-positive and anchor-negative distances per triple.
pub fn triplet_distances(anchor: &Tensor, positive: &Tensor, negative: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_codes(anchor, positive, "positive")?;
    check_codes(anchor, negative, "negative")?;
    let n = anchor.dim(0);
    let d_plus = (0..n).map(|i| row_distance(anchor.row(i), positive.row(i))).collect();
    let d_minus = (0..n).map(|i| row_distance(anchor.row(i), negative.row(i))).collect();
    Ok((d_plus, d_minus))
}

/// `exp(d-) / (exp(d+) + exp(d-))`, shifted by the larger distance.
pub fn triplet_probability(d_plus: f64, d_minus: f64) -> Result<f64> {
    if !(d_plus >= 0.0 && d_minus >= 0.0) {
        return Err(Error::Contract(format!(
            "distances must be non-negative, got d+ = {d_plus}, d- = {d_minus}"
        )));
    }
    let top = d_plus.max(d_minus);
    let (ep, em) = ((d_plus - top).exp(), (d_minus - top).exp());
    Ok(em / (ep + em))
}

/// `-log p_T = log(1 + exp(d+ - d-))`, evaluated without overflow.
fn neg_log_triplet_probability(d_plus: f64, d_minus: f64) -> f64 {
    let t = d_plus - d_minus;
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn logistic(t: f64) -> f64 {
    tbigan_nn::activation::sigmoid(t)
}

/// Batch mean of `-log p_T` from precomputed distances.
pub fn triplet_loss_from_distances(d_plus: &[f64], d_minus: &[f64]) -> Result<f64> {
    if d_plus.len() != d_minus.len() || d_plus.is_empty() {
        return Err(Error::Contract("triplet loss needs equally many, non-zero distances".into()));
    }
    let mut total = 0.0;
    for (&p, &m) in d_plus.iter().zip(d_minus) {
        triplet_probability(p, m)?;
        total += neg_log_triplet_probability(p, m);
    }
    Ok(total / d_plus.len() as f64)
}

pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor) -> Result<f64> {
    let (p, m) = triplet_distances(anchor, positive, negative)?;
    triplet_loss_from_distances(&p, &m)
}

/// Triplet loss together with its gradients with respect to the three code batches.
pub struct TripletLossGrad {
    pub loss: f64,
    pub d_plus: Vec<f64>,
    pub d_minus: Vec<f64>,
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

pub fn triplet_loss_grad(anchor: &Tensor, positive: &Tensor, negative: &Tensor) -> Result<TripletLossGrad> {
    let (d_plus, d_minus) = triplet_distances(anchor, positive, negative)?;
    let loss = triplet_loss_from_distances(&d_plus, &d_minus)?;
    let n = anchor.dim(0);
    let scale = 1.0 / n as f64;
    let mut ga = Tensor::zeros(anchor.shape());
    let mut gp = Tensor::zeros(anchor.shape());
    let mut gn = Tensor::zeros(anchor.shape());
    let w = anchor.row_len();
    for i in 0..n {
        // dL/dd+ = s, dL/dd- = -s with s = logistic(d+ - d-)
        let s = logistic(d_plus[i] - d_minus[i]) * scale;
        let (a, p, q) = (anchor.row(i), positive.row(i), negative.row(i));
        for j in 0..w {
            let mut g_a = 0.0;
            if d_plus[i] > 0.0 {
                let t = s * (a[j] - p[j]) / d_plus[i];
                g_a += t;
                gp.data_mut()[i * w + j] = -t;
            }
            if d_minus[i] > 0.0 {
                let t = -s * (a[j] - q[j]) / d_minus[i];
                g_a += t;
                gn.data_mut()[i * w + j] = -t;
            }
            ga.data_mut()[i * w + j] = g_a;
        }
    }
    Ok(TripletLossGrad {
        loss,
        d_plus,
        d_minus,
        anchor: ga,
        positive: gp,
        negative: gn,
    })
}

fn check_probs(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Contract(format!("{what}: empty batch")));
    }
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("{what}: probability {bad} outside [0, 1]")));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-mean log(a) - mean log(1 - b)` and its gradients in `a` and `b`.
fn log_pair(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let la = -a.iter().map(|&p| clamp(p).ln()).sum::<f64>() / na;
    let lb = -b.iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / nb;
    let inside = |p: f64| p > PROB_EPS && p < 1.0 - PROB_EPS;
    let ga = a.iter().map(|&p| if inside(p) { -1.0 / (p * na) } else { 0.0 }).collect();
    let gb = b.iter().map(|&p| if inside(p) { 1.0 / ((1.0 - p) * nb) } else { 0.0 }).collect();
    (la + lb, ga, gb)
}

/// Discriminator loss `-mean log D(x, E(x)) - mean log(1 - D(G(z), z))`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(discriminator_loss_grad(d_real, d_fake)?.0)
}

/// Returns `(loss, dloss/dd_real, dloss/dd_fake)`.
pub fn discriminator_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_probs(d_real, "d_real")?;
    check_probs(d_fake, "d_fake")?;
    Ok(log_pair(d_real, d_fake))
}

/// Encoder-generator loss `-mean log D(G(z), z) - mean log(1 - D(x, E(x)))`.
pub fn encoder_generator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(encoder_generator_loss_grad(d_real, d_fake)?.0)
}

/// Returns `(loss, dloss/dd_real, dloss/dd_fake)`.
pub fn encoder_generator_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_probs(d_real, "d_real")?;
    check_probs(d_fake, "d_fake")?;
    let (loss, g_fake, g_real) = log_pair(d_fake, d_real);
    Ok((loss, g_real, g_fake))
}

/// `l_eg + lambda * l_t`.
pub fn combined_loss(l_eg: f64, l_t: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(l_eg);
    }
    Ok(l_eg + lambda * l_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codes(rows: &[&[f64]]) -> Tensor {
        let w = rows[0].len();
        Tensor::from_vec(&[rows.len(), w], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn distances() {
        let a = codes(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let n = codes(&[&[3.0, 4.0], &[1.0, 1.0]]);
        let (dp, dm) = triplet_distances(&a, &a, &n).unwrap();
        assert_eq!(dp, vec![0.0, 0.0]);
        assert_eq!(dm, vec![5.0, 0.0]);
        let (swapped, _) = triplet_distances(&n, &a, &a).unwrap();
        assert_eq!(swapped, dm);
        assert!(triplet_distances(&a, &codes(&[&[0.0, 0.0, 0.0]]), &n).is_err());
    }

    #[test]
    fn probability_values() {
        assert_eq!(triplet_probability(1.3, 1.3).unwrap(), 0.5);
        assert!((triplet_probability(1.0, 2.0).unwrap() - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((triplet_probability(1.0, 2.0).unwrap() - 0.7310586).abs() < 1e-7);
        let far = triplet_probability(0.0, 50.0).unwrap();
        assert!(far.is_finite() && (far - 1.0).abs() < 1e-15);
        assert!(triplet_probability(1e6, 0.0).unwrap() >= 0.0);
        assert!(triplet_probability(-1.0, 0.0).is_err());
        assert!(triplet_probability(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn loss_values() {
        assert!((triplet_loss_from_distances(&[2.0, 0.5], &[2.0, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((triplet_loss_from_distances(&[1.0], &[2.0]).unwrap() - 0.313262).abs() < 1e-6);
        let lo = triplet_loss_from_distances(&[1.0, 1.0], &[2.0, 3.0]).unwrap();
        let hi = triplet_loss_from_distances(&[1.0, 1.0], &[2.0, 2.5]).unwrap();
        assert!(lo < hi);
        assert!(triplet_loss_from_distances(&[1e4], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn adversarial_loss_values() {
        let half = [0.5, 0.5, 0.5];
        assert!((discriminator_loss(&half, &half).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((encoder_generator_loss(&half, &half).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((discriminator_loss(&[0.9], &[0.1]).unwrap() - 0.210721).abs() < 1e-6);
        assert!(discriminator_loss(&[1.0], &[0.0]).unwrap() < 1e-6);
        assert!(encoder_generator_loss(&[0.0], &[1.0]).unwrap() < 1e-6);
        let sum = discriminator_loss(&half, &half).unwrap() + encoder_generator_loss(&half, &half).unwrap();
        assert!((sum - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(discriminator_loss(&[1.5], &[0.5]).is_err());
        assert!(encoder_generator_loss(&[0.5], &[-0.1]).is_err());
        // clamping keeps saturated outputs finite
        assert!(discriminator_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn combined_values() {
        assert_eq!(combined_loss(1.25, 9.0, 0.0).unwrap(), 1.25);
        assert_eq!(combined_loss(1.0, 0.5, 1.0).unwrap(), 1.5);
        assert!((combined_loss(1.386294, 0.693147, 2.0).unwrap() - 2.772588).abs() < 1e-9);
        assert!(combined_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        let real = vec![0.3, 0.8, 0.55];
        let fake = vec![0.2, 0.6, 0.45];
        let h = 1e-7;
        for (f, g) in [
            (discriminator_loss as fn(&[f64], &[f64]) -> Result<f64>, discriminator_loss_grad as fn(&[f64], &[f64]) -> _),
            (encoder_generator_loss, encoder_generator_loss_grad),
        ] {
            let (_, gr, gf) = g(&real, &fake).unwrap();
            for i in 0..3 {
                let (mut rp, mut rm) = (real.clone(), real.clone());
                rp[i] += h;
                rm[i] -= h;
                let fd = (f(&rp, &fake).unwrap() - f(&rm, &fake).unwrap()) / (2.0 * h);
                assert!((fd - gr[i]).abs() < 1e-6);
                let (mut fp, mut fm) = (fake.clone(), fake.clone());
                fp[i] += h;
                fm[i] -= h;
                let fd = (f(&real, &fp).unwrap() - f(&real, &fm).unwrap()) / (2.0 * h);
                assert!((fd - gf[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn triplet_gradient_matches_central_differences() {
        let a = codes(&[&[0.1, -0.4, 0.7], &[1.0, 0.2, -0.3]]);
        let p = codes(&[&[0.3, -0.1, 0.2], &[0.6, 0.9, -0.1]]);
        let n = codes(&[&[-0.5, 0.4, 0.9], &[1.2, 0.1, 0.4]]);
        let g = triplet_loss_grad(&a, &p, &n).unwrap();
        let h = 1e-6;
        for (which, analytic) in [(0, &g.anchor), (1, &g.positive), (2, &g.negative)] {
            for i in 0..6 {
                let bump = |delta: f64| {
                    let mut t = [a.clone(), p.clone(), n.clone()];
                    t[which].data_mut()[i] += delta;
                    triplet_loss(&t[0], &t[1], &t[2]).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = analytic.data()[i];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()), "{which}/{i}: {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn probability_in_unit_interval_and_monotone(dp in 0.0f64..15.0, dm in 0.0f64..15.0, bump in 0.01f64..5.0) {
            let p = triplet_probability(dp, dm).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!(triplet_probability(dp + bump, dm).unwrap() < p);
            prop_assert!(triplet_probability(dp, dm + bump).unwrap() > p);
        }

        #[test]
        fn stable_probability_matches_naive_form(dp in 0.0f64..30.0, dm in 0.0f64..30.0) {
            let naive = dm.exp() / (dp.exp() + dm.exp());
            prop_assert!((triplet_probability(dp, dm).unwrap() - naive).abs() < 1e-12);
        }

        #[test]
        fn losses_ignore_batch_order(
            probs in proptest::collection::vec((0.01f64..0.99, 0.01f64..0.99, 0.0f64..5.0, 0.0f64..5.0), 2..12),
            rot in 1usize..11,
        ) {
            let real: Vec<f64> = probs.iter().map(|t| t.0).collect();
            let fake: Vec<f64> = probs.iter().map(|t| t.1).collect();
            let dp: Vec<f64> = probs.iter().map(|t| t.2).collect();
            let dm: Vec<f64> = probs.iter().map(|t| t.3).collect();
            let k = rot % probs.len();
            let r = |v: &Vec<f64>| { let mut v = v.clone(); v.rotate_left(k); v };
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
            prop_assert!(close(discriminator_loss(&real, &fake).unwrap(), discriminator_loss(&r(&real), &r(&fake)).unwrap()));
            prop_assert!(close(encoder_generator_loss(&real, &fake).unwrap(), encoder_generator_loss(&r(&real), &r(&fake)).unwrap()));
            prop_assert!(close(triplet_loss_from_distances(&dp, &dm).unwrap(), triplet_loss_from_distances(&r(&dp), &r(&dm)).unwrap()));
        }
    }
}
