//! Soft Dice, the pseudo-label objective, and its variational extension with
//! a closed-form Gaussian KL term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::{PriorSpec, PseudoLabelBatch, ThresholdPosterior};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub kl: f64,
    pub alpha_effective: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(supervised: f64, unsupervised: f64, kl: f64, alpha_effective: f64) -> Self {
        LossBreakdown {
            supervised,
            unsupervised,
            kl,
            alpha_effective,
            total: supervised + alpha_effective * unsupervised + kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.supervised, self.unsupervised, self.kl, self.alpha_effective, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Gradients of a [`LossBreakdown::total`] with respect to its inputs.
#[derive(Clone, Debug)]
pub struct LossGradients<T> {
    pub d_labelled: Tensor<T>,
    pub d_unlabelled: Option<Tensor<T>>,
    pub d_mean: f64,
    pub d_log_variance: f64,
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.ensure_same_shape(b, "dice")?;
    if a.batch() == 0 {
        return Err(Error::shape("dice", "empty batch"));
    }
    Ok(())
}

/// Per-item `(2 sum(ab) + eps) / (sum(a) + sum(b) + eps)`, averaged over the batch.
pub fn soft_dice<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.batch();
    let mut total = 0.0;
    for i in 0..n {
        let (mut inter, mut sum) = (0.0, 0.0);
        for (x, y) in a.item(i).iter().zip(b.item(i)) {
            let (x, y) = (x.as_f64(), y.as_f64());
            inter += x * y;
            sum += x + y;
        }
        total += (2.0 * inter + eps) / (sum + eps);
    }
    Ok(total / n as f64)
}

pub fn dice_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(1.0 - soft_dice(a, b, eps)?)
}

/// `1 - soft_dice(a, b)` and its gradient with respect to `a`.
pub fn dice_loss_with_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    check_pair(a, b)?;
    let n = a.batch();
    let mut grad = Tensor::zeros(a.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (mut inter, mut sum) = (0.0, 0.0);
        for (x, y) in a.item(i).iter().zip(b.item(i)) {
            let (x, y) = (x.as_f64(), y.as_f64());
            inter += x * y;
            sum += x + y;
        }
        let num = 2.0 * inter + eps;
        let den = sum + eps;
        total += num / den;
        // d(num/den)/da_j = (2 b_j den - num) / den^2; the loss negates and averages.
        let scale = -1.0 / (n as f64 * den * den);
        for (g, y) in grad.item_mut(i).iter_mut().zip(b.item(i)) {
            *g = T::from_f64(scale * (2.0 * y.as_f64() * den - num));
        }
    }
    Ok((1.0 - total / n as f64, grad))
}

/// `KL(N(mean, sigma) || N(prior.mean, prior.std))`.
pub fn kl_gaussian(posterior: &ThresholdPosterior, prior: &PriorSpec) -> f64 {
    let var = posterior.log_variance.exp();
    prior.std.ln() - 0.5 * posterior.log_variance
        + (var + (posterior.mean - prior.mean).powi(2)) / (2.0 * prior.std * prior.std)
        - 0.5
}

/// Partial derivatives of [`kl_gaussian`] with respect to `(mean, log_variance)`.
pub fn kl_gaussian_grad(posterior: &ThresholdPosterior, prior: &PriorSpec) -> (f64, f64) {
    let pv = prior.std * prior.std;
    (
        (posterior.mean - prior.mean) / pv,
        -0.5 + posterior.log_variance.exp() / (2.0 * pv),
    )
}

fn check_pseudo<T>(pseudo: &PseudoLabelBatch<T>) -> Result<()> {
    if !pseudo.detached {
        return Err(Error::invalid("pseudo labels", "mask must be detached"));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("{alpha} must be a finite non-negative number")));
    }
    Ok(())
}

fn check_labelled<T: Scalar>(pred: &Tensor<T>) -> Result<()> {
    if pred.batch() == 0 {
        return Err(Error::InsufficientData(
            "the supervised term needs a labelled batch".into(),
        ));
    }
    Ok(())
}

/// Dice loss on labelled data only.
pub fn supervised_loss_with_grad<T: Scalar>(
    pred_labelled: &Tensor<T>,
    y_labelled: &Tensor<T>,
) -> Result<(LossBreakdown, LossGradients<T>)> {
    check_labelled(pred_labelled)?;
    let (sup, d_labelled) = dice_loss_with_grad(pred_labelled, y_labelled, DICE_EPS)?;
    Ok((
        LossBreakdown::assemble(sup, 0.0, 0.0, 0.0),
        LossGradients {
            d_labelled,
            d_unlabelled: None,
            d_mean: 0.0,
            d_log_variance: 0.0,
        },
    ))
}

/// `dice(labelled) + alpha * dice(unlabelled, pseudo-labels)`.
pub fn segpl_loss<T: Scalar>(
    pred_labelled: &Tensor<T>,
    y_labelled: &Tensor<T>,
    pred_unlabelled: &Tensor<T>,
    pseudo: &PseudoLabelBatch<T>,
    alpha_effective: f64,
) -> Result<LossBreakdown> {
    segpl_loss_with_grad(pred_labelled, y_labelled, pred_unlabelled, pseudo, alpha_effective).map(|(l, _)| l)
}

pub fn segpl_loss_with_grad<T: Scalar>(
    pred_labelled: &Tensor<T>,
    y_labelled: &Tensor<T>,
    pred_unlabelled: &Tensor<T>,
    pseudo: &PseudoLabelBatch<T>,
    alpha_effective: f64,
) -> Result<(LossBreakdown, LossGradients<T>)> {
    check_labelled(pred_labelled)?;
    check_pseudo(pseudo)?;
    check_alpha(alpha_effective)?;
    let (sup, d_labelled) = dice_loss_with_grad(pred_labelled, y_labelled, DICE_EPS)?;
    let (unsup, mut d_unlabelled) = dice_loss_with_grad(pred_unlabelled, &pseudo.mask, DICE_EPS)?;
    let a = T::from_f64(alpha_effective);
    for g in d_unlabelled.data_mut() {
        *g *= a;
    }
    Ok((
        LossBreakdown::assemble(sup, unsup, 0.0, alpha_effective),
        LossGradients {
            d_labelled,
            d_unlabelled: Some(d_unlabelled),
            d_mean: 0.0,
            d_log_variance: 0.0,
        },
    ))
}

/// The pseudo-label objective plus `KL(posterior || prior)`.
#[allow(clippy::too_many_arguments)]
pub fn segpl_vi_loss<T: Scalar>(
    pred_labelled: &Tensor<T>,
    y_labelled: &Tensor<T>,
    pred_unlabelled: &Tensor<T>,
    pseudo: &PseudoLabelBatch<T>,
    posterior: &ThresholdPosterior,
    prior: &PriorSpec,
    alpha_effective: f64,
) -> Result<LossBreakdown> {
    segpl_vi_loss_with_grad(pred_labelled, y_labelled, pred_unlabelled, pseudo, posterior, prior, alpha_effective, 1.0)
        .map(|(l, _)| l)
}

/// As [`segpl_vi_loss`] with the KL term scaled by `kl_weight`; the reported
/// `kl` field is the weighted value so `total` stays the plain sum.
#[allow(clippy::too_many_arguments)]
pub fn segpl_vi_loss_with_grad<T: Scalar>(
    pred_labelled: &Tensor<T>,
    y_labelled: &Tensor<T>,
    pred_unlabelled: &Tensor<T>,
    pseudo: &PseudoLabelBatch<T>,
    posterior: &ThresholdPosterior,
    prior: &PriorSpec,
    alpha_effective: f64,
    kl_weight: f64,
) -> Result<(LossBreakdown, LossGradients<T>)> {
    if !posterior.is_finite() {
        return Err(Error::invalid("threshold posterior", format!("{posterior:?}")));
    }
    prior.validate()?;
    let (base, mut grads) =
        segpl_loss_with_grad(pred_labelled, y_labelled, pred_unlabelled, pseudo, alpha_effective)?;
    let kl = kl_weight * kl_gaussian(posterior, prior);
    let (dm, dl) = kl_gaussian_grad(posterior, prior);
    grads.d_mean = kl_weight * dm;
    grads.d_log_variance = kl_weight * dl;
    Ok((
        LossBreakdown::assemble(base.supervised, base.unsupervised, kl, alpha_effective),
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::binarize_fixed;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(vals: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, 1, vals.len()], vals).unwrap()
    }

    #[test]
    fn dice_examples() {
        let m = flat(vec![1., 0., 1., 1.]);
        assert_eq!(soft_dice(&m, &m, DICE_EPS).unwrap(), 1.0);
        let z = flat(vec![0.; 4]);
        assert_eq!(soft_dice(&z, &z, DICE_EPS).unwrap(), 1.0);
        let d = soft_dice(&flat(vec![1., 0.]), &flat(vec![0., 1.]), DICE_EPS).unwrap();
        assert!((d - DICE_EPS / (2.0 + DICE_EPS)).abs() < 1e-20);
        assert!((dice_loss(&flat(vec![1., 0.]), &flat(vec![0., 1.]), DICE_EPS).unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(dice_loss(&m, &m, DICE_EPS).unwrap(), 0.0);
        assert!(soft_dice(&flat(vec![1., 0.]), &flat(vec![1., 0., 0.]), DICE_EPS).is_err());
    }

    #[test]
    fn half_prediction_against_full_target() {
        // Direct evaluation: 1 - (N + eps) / (1.5 N + eps).
        let n = 64.0;
        let want = 1.0 - (n + DICE_EPS) / (1.5 * n + DICE_EPS);
        let got = dice_loss(&flat(vec![0.5; 64]), &flat(vec![1.0; 64]), DICE_EPS).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let prior = PriorSpec::new(0.9, 0.1).unwrap();
        assert!(kl_gaussian(&ThresholdPosterior::from(prior), &prior).abs() < 1e-12);
        let p = ThresholdPosterior::new(0.5, 2.0 * 0.1f64.ln());
        assert!((kl_gaussian(&p, &prior) - 8.0).abs() < 1e-12);
        let p = ThresholdPosterior::new(0.9, 2.0 * 0.2f64.ln());
        let want = 0.1f64.ln() - 0.2f64.ln() + 0.04 / 0.02 - 0.5;
        assert!((kl_gaussian(&p, &prior) - want).abs() < 1e-12);
        assert!((want - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_monotone_in_mean_gap() {
        let prior = PriorSpec::new(0.4, 0.1).unwrap();
        let mut last = -1.0;
        for k in 0..50 {
            let p = ThresholdPosterior::new(0.4 + 0.01 * k as f64, 2.0 * 0.1f64.ln());
            let kl = kl_gaussian(&p, &prior);
            assert!(kl > last);
            last = kl;
        }
    }

    #[test]
    fn segpl_examples() {
        let y = Tensor::from_vec([1, 1, 1, 2, 2], vec![1., 0., 1., 0.]).unwrap();
        let pred_l = Tensor::from_vec([1, 1, 1, 2, 2], vec![0.8, 0.3, 0.6, 0.1]).unwrap();
        let pred_u = Tensor::from_vec([2, 1, 1, 2, 2], vec![0.9, 0.2, 0.7, 0.4, 0.1, 0.6, 0.3, 0.95]).unwrap();
        let pseudo = binarize_fixed(&pred_u, 0.5).unwrap();
        let l = segpl_loss(&pred_l, &y, &pred_u, &pseudo, 0.0).unwrap();
        assert_eq!(l.total, l.supervised);
        assert!(l.unsupervised > 0.0);
        assert_eq!(l.kl, 0.0);

        let perfect_u = pseudo.mask.clone();
        let l = segpl_loss(&y, &y, &perfect_u, &binarize_fixed(&perfect_u, 0.5).unwrap(), 1.0).unwrap();
        assert_eq!(l.total, 0.0);

        let empty = Tensor::<f64>::zeros([0, 1, 1, 2, 2]);
        assert!(matches!(
            segpl_loss(&empty, &empty, &pred_u, &pseudo, 1.0),
            Err(Error::InsufficientData(_))
        ));
        let mut attached = pseudo.clone();
        attached.detached = false;
        assert!(segpl_loss(&pred_l, &y, &pred_u, &attached, 1.0).is_err());
    }

    #[test]
    fn vi_loss_reduces_to_segpl_at_prior() {
        let y = Tensor::from_vec([1, 1, 1, 1, 3], vec![1., 0., 1.]).unwrap();
        let p = Tensor::from_vec([1, 1, 1, 1, 3], vec![0.7, 0.2, 0.4]).unwrap();
        let pseudo = binarize_fixed(&p, 0.5).unwrap();
        let prior = PriorSpec::new(0.5, 0.1).unwrap();
        let a = segpl_loss(&p, &y, &p, &pseudo, 0.3).unwrap();
        let b = segpl_vi_loss(&p, &y, &p, &pseudo, &ThresholdPosterior::from(prior), &prior, 0.3).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        let perfect = segpl_vi_loss(&y, &y, &y, &binarize_fixed(&y, 0.5).unwrap(), &ThresholdPosterior::from(prior), &prior, 1.0).unwrap();
        assert!(perfect.total.abs() < 1e-12);
    }

    #[test]
    fn mask_path_carries_no_gradient() {
        // The unsupervised term as a function of the probabilities that
        // produced the mask, with the prediction argument held fixed.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fixed_pred = Tensor::from_vec([1, 1, 1, 4, 4], (0..16).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let source = Tensor::from_vec([1, 1, 1, 4, 4], (0..16).map(|_| rng.gen_range(0.05f64..0.95)).collect()).unwrap();
        let f = |s: &Tensor<f64>| dice_loss(&fixed_pred, &binarize_fixed(s, 0.5).unwrap().mask, DICE_EPS).unwrap();
        let h = 1e-7;
        for idx in 0..16 {
            if (source.data()[idx] - 0.5).abs() < 2.0 * h {
                continue;
            }
            let mut p = source.clone();
            p.data_mut()[idx] += h;
            let mut m = source.clone();
            m.data_mut()[idx] -= h;
            assert_eq!((f(&p) - f(&m)) / (2.0 * h), 0.0);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let prior = PriorSpec::new(0.9, 0.1).unwrap();
        let p = ThresholdPosterior::new(0.6, -3.1);
        let (dm, dl) = kl_gaussian_grad(&p, &prior);
        let h = 1e-6;
        let f = |m, l| kl_gaussian(&ThresholdPosterior::new(m, l), &prior);
        assert!(((f(0.6 + h, -3.1) - f(0.6 - h, -3.1)) / (2.0 * h) - dm).abs() < 1e-5);
        assert!(((f(0.6, -3.1 + h) - f(0.6, -3.1 - h)) / (2.0 * h) - dl).abs() < 1e-6);
    }

    #[test]
    fn dice_gradient_matches_finite_differences_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let a = Tensor::from_vec([2, 1, 1, 8, 8], (0..128).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap();
            let b = Tensor::from_vec([2, 1, 1, 8, 8], (0..128).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
            let (_, g) = dice_loss_with_grad(&a, &b, DICE_EPS).unwrap();
            let h = 1e-6;
            for _ in 0..5 {
                let idx = rng.gen_range(0..128);
                let mut p = a.clone();
                p.data_mut()[idx] += h;
                let mut m = a.clone();
                m.data_mut()[idx] -= h;
                let fd = (dice_loss(&p, &b, DICE_EPS).unwrap() - dice_loss(&m, &b, DICE_EPS).unwrap()) / (2.0 * h);
                let rel = (fd - g.data()[idx]).abs() / fd.abs().max(g.data()[idx].abs()).max(1e-12);
                assert!(rel < 1e-4, "rel err {rel}");
            }
        }
    }

    proptest! {
        #[test]
        fn kl_non_negative(m in -1.0f64..2.0, lv in -12.0f64..3.0, pm in 0.01f64..0.99, ps in 0.01f64..1.0) {
            let kl = kl_gaussian(&ThresholdPosterior::new(m, lv), &PriorSpec::new(pm, ps).unwrap());
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn dice_symmetric_and_bounded(
            a in prop::collection::vec(0.0f64..=1.0, 12),
            b in prop::collection::vec(0.0f64..=1.0, 12),
        ) {
            let a = Tensor::from_vec([1, 1, 1, 3, 4], a).unwrap();
            let b = Tensor::from_vec([1, 1, 1, 3, 4], b).unwrap();
            let ab = soft_dice(&a, &b, DICE_EPS).unwrap();
            let ba = soft_dice(&b, &a, DICE_EPS).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ab > 0.0 && ab <= 1.0 + 1e-15);
        }
    }
}
