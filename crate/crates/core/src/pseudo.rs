//! Pseudo-label generation: fixed-threshold binarisation and the learned
//! Gaussian posterior over the threshold with reparameterised sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_average_pool, global_average_pool_backward, join, relu_backward, relu_inplace, Conv,
    GroupNorm, Module, NormCache, Param,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const THRESHOLD_MIN: f64 = 0.01;
pub const THRESHOLD_MAX: f64 = 0.99;

/// Gaussian prior `N(mean, std)` over the pseudo-label threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl PriorSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        let p = PriorSpec { mean, std };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean > 0.0 && self.mean < 1.0) {
            return Err(Error::invalid("prior mean", format!("{} not in (0, 1)", self.mean)));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::invalid("prior std", format!("{} must be positive", self.std)));
        }
        Ok(())
    }
}

/// Approximate posterior `N(mean, exp(log_variance))` over the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPosterior {
    pub mean: f64,
    pub log_variance: f64,
}

impl ThresholdPosterior {
    pub fn new(mean: f64, log_variance: f64) -> Self {
        ThresholdPosterior { mean, log_variance }
    }

    pub fn std(&self) -> f64 {
        (0.5 * self.log_variance).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.log_variance.is_finite()
    }
}

impl From<PriorSpec> for ThresholdPosterior {
    fn from(p: PriorSpec) -> Self {
        ThresholdPosterior::new(p.mean, 2.0 * p.std.ln())
    }
}

/// Binary pseudo-labels. The mask is plain data: no gradient reaches the
/// probabilities it was computed from.
#[derive(Clone, Debug)]
pub struct PseudoLabelBatch<T> {
    pub mask: Tensor<T>,
    pub threshold_used: f64,
    pub detached: bool,
}

/// `mask = 1` where the probability strictly exceeds `threshold`.
pub fn binarize_fixed<T: Scalar>(probabilities: &Tensor<T>, threshold: f64) -> Result<PseudoLabelBatch<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} not in (0, 1)")));
    }
    if let Some(bad) = probabilities
        .data()
        .iter()
        .find(|p| !p.is_finite() || **p < T::zero() || **p > T::one())
    {
        return Err(Error::invalid("probabilities", format!("value {bad:?} outside [0, 1]")));
    }
    let t = T::from_f64(threshold);
    let mask = probabilities.map(|p| if p > t { T::one() } else { T::zero() });
    Ok(PseudoLabelBatch {
        mask,
        threshold_used: threshold,
        detached: true,
    })
}

/// Reparameterised threshold `clamp(mean + noise * std, 0.01, 0.99)`.
pub fn sample_threshold(posterior: &ThresholdPosterior, noise: f64) -> Result<f64> {
    Ok(sample_threshold_with_grad(posterior, noise)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSample {
    pub value: f64,
    /// dT / d mean; zero where the clamp is active.
    pub d_mean: f64,
    /// dT / d log_variance; zero where the clamp is active.
    pub d_log_variance: f64,
    pub clamped: bool,
}

pub fn sample_threshold_with_grad(posterior: &ThresholdPosterior, noise: f64) -> Result<ThresholdSample> {
    if !posterior.is_finite() || !noise.is_finite() {
        return Err(Error::invalid(
            "threshold posterior",
            format!("non-finite input: {posterior:?}, noise {noise}"),
        ));
    }
    let std = posterior.std();
    let raw = posterior.mean + noise * std;
    let value = raw.clamp(THRESHOLD_MIN, THRESHOLD_MAX);
    let clamped = value != raw;
    Ok(ThresholdSample {
        value,
        d_mean: if clamped { 0.0 } else { 1.0 },
        d_log_variance: if clamped { 0.0 } else { 0.5 * noise * std },
        clamped,
    })
}

/// Draws one standard-normal value for [`sample_threshold`].
pub fn standard_noise(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Binarises with a threshold drawn from `posterior`; the same scalar is
/// applied to every channel.
pub fn make_pseudo_labels_vi<T: Scalar>(
    probabilities: &Tensor<T>,
    posterior: &ThresholdPosterior,
    noise: f64,
) -> Result<PseudoLabelBatch<T>> {
    let t = sample_threshold(posterior, noise)?;
    binarize_fixed(probabilities, t)
}

/// Which backbone activation feeds the threshold head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    #[default]
    Bottleneck,
    Logits,
}

pub const HEAD_HIDDEN: usize = 16;

/// Maps backbone features of an unlabelled batch to one threshold posterior:
/// global average pool (over batch and space), 3x3 conv, ReLU, group norm,
/// then parallel 1x1 convs for the mean and the log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorHead<T> {
    conv: Conv<T>,
    norm: GroupNorm<T>,
    mean: Conv<T>,
    log_variance: Conv<T>,
    input: HeadInput,
}

pub struct HeadTape<T> {
    input_shape: [usize; 5],
    pooled: Tensor<T>,
    hidden: Tensor<T>,
    norm: NormCache<T>,
    normed: Tensor<T>,
}

impl<T: Scalar> PosteriorHead<T> {
    /// The output convs start at zero weight with biases at the prior, so the
    /// initial posterior equals the prior for every input.
    pub fn new(
        in_channels: usize,
        spatial_rank: usize,
        input: HeadInput,
        prior: &PriorSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = if spatial_rank == 3 { [3, 3, 3] } else { [1, 3, 3] };
        let mut mean = Conv::new(HEAD_HIDDEN, 1, [1, 1, 1], rng);
        let mut log_variance = Conv::new(HEAD_HIDDEN, 1, [1, 1, 1], rng);
        let start = ThresholdPosterior::from(*prior);
        mean.weight.data.fill(T::zero());
        mean.bias.data[0] = T::from_f64(start.mean);
        log_variance.weight.data.fill(T::zero());
        log_variance.bias.data[0] = T::from_f64(start.log_variance);
        PosteriorHead {
            conv: Conv::new(in_channels, HEAD_HIDDEN, kernel, rng),
            norm: GroupNorm::new(HEAD_HIDDEN),
            mean,
            log_variance,
            input,
        }
    }

    pub fn input(&self) -> HeadInput {
        self.input
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<ThresholdPosterior> {
        self.forward_with_tape(features).map(|(p, _)| p)
    }

    pub fn forward_with_tape(&self, features: &Tensor<T>) -> Result<(ThresholdPosterior, HeadTape<T>)> {
        if features.batch() == 0 {
            return Err(Error::InsufficientData(
                "threshold head needs a non-empty unlabelled batch".into(),
            ));
        }
        if features.channels() != self.in_channels() {
            return Err(Error::shape(
                "threshold head",
                format!("{} feature channels, head expects {}", features.channels(), self.in_channels()),
            ));
        }
        let pooled = global_average_pool(features);
        let mut hidden = self.conv.forward(&pooled);
        relu_inplace(&mut hidden);
        let (normed, norm) = self.norm.forward(&hidden);
        let mean = self.mean.forward(&normed).data()[0].as_f64();
        let log_variance = self.log_variance.forward(&normed).data()[0].as_f64();
        let posterior = ThresholdPosterior::new(mean, log_variance);
        if !posterior.is_finite() {
            return Err(Error::invalid("threshold posterior", format!("{posterior:?}")));
        }
        Ok((
            posterior,
            HeadTape {
                input_shape: features.shape(),
                pooled,
                hidden,
                norm,
                normed,
            },
        ))
    }

    /// Returns the gradient with respect to the input features.
    pub fn backward(&self, tape: &HeadTape<T>, d_mean: f64, d_log_variance: f64, mut grads: Option<&mut Self>) -> Tensor<T> {
        let scalar = |v: f64| Tensor::from_vec([1, 1, 1, 1, 1], vec![T::from_f64(v)]).expect("1 value");
        let d_normed_a = self
            .mean
            .backward(&tape.normed, &scalar(d_mean), grads.as_deref_mut().map(|g| &mut g.mean), true)
            .expect("input gradient requested");
        let d_normed_b = self
            .log_variance
            .backward(
                &tape.normed,
                &scalar(d_log_variance),
                grads.as_deref_mut().map(|g| &mut g.log_variance),
                true,
            )
            .expect("input gradient requested");
        let d_normed = d_normed_a.zip_map(&d_normed_b, |a, b| a + b).expect("same shape");
        let mut d_hidden = self.norm.backward(&tape.norm, &d_normed, grads.as_deref_mut().map(|g| &mut g.norm));
        relu_backward(&tape.hidden, &mut d_hidden);
        let d_pooled = self
            .conv
            .backward(&tape.pooled, &d_hidden, grads.map(|g| &mut g.conv), true)
            .expect("input gradient requested");
        global_average_pool_backward(&d_pooled, tape.input_shape)
    }
}

impl<T: Scalar> Module<T> for PosteriorHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.mean.visit(&join(prefix, "mean"), f);
        self.log_variance.visit(&join(prefix, "log_variance"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.mean.visit_mut(&join(prefix, "mean"), f);
        self.log_variance.visit_mut(&join(prefix, "log_variance"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, 2, vals.len() / 2], vals.to_vec()).unwrap()
    }

    #[test]
    fn strict_threshold() {
        let out = binarize_fixed(&t2(&[0.7, 0.4, 0.5, 0.9]), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(out.mask.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(out.detached);
        assert_eq!(DEFAULT_THRESHOLD, 0.5);
    }

    #[test]
    fn zero_probabilities_give_empty_mask() {
        for t in [0.01, 0.3, 0.99] {
            let out = binarize_fixed(&t2(&[0.0; 4]), t).unwrap();
            assert!(out.mask.data().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn rejects_non_finite_probabilities() {
        assert!(binarize_fixed(&t2(&[0.1, f64::NAN, 0.2, 0.3]), 0.5).is_err());
        assert!(binarize_fixed(&t2(&[0.1, 0.2, 0.2, 0.3]), 1.0).is_err());
    }

    #[test]
    fn sampling_examples() {
        let p = ThresholdPosterior::new(0.42, -3.0);
        assert_eq!(sample_threshold(&p, 0.0).unwrap(), 0.42);
        // 0.9 + 1 * exp(0.5 * ln 0.01) = 1.0, clamped to the upper bound.
        let p = ThresholdPosterior::new(0.9, 0.01f64.ln());
        let s = sample_threshold_with_grad(&p, 1.0).unwrap();
        assert!((0.9 + 1.0 * p.std() - 1.0).abs() < 1e-12);
        assert_eq!(s.value, 0.99);
        assert!(s.clamped);
        assert_eq!(s.d_mean, 0.0);
        assert!(sample_threshold(&ThresholdPosterior::new(f64::NAN, 0.0), 0.0).is_err());
    }

    #[test]
    fn degenerate_posterior_acts_as_fixed_threshold() {
        let probs = t2(&[0.2, 0.51, 0.49, 0.8]);
        let p = ThresholdPosterior::new(0.5, -20.0);
        let fixed = binarize_fixed(&probs, 0.5).unwrap();
        for noise in [-2.0, 0.3, 1.7] {
            let vi = make_pseudo_labels_vi(&probs, &p, noise).unwrap();
            assert_eq!(vi.mask, fixed.mask);
        }
    }

    #[test]
    fn one_threshold_for_all_channels() {
        let probs = Tensor::from_vec([1, 4, 1, 1, 2], vec![0.3, 0.45, 0.39, 0.41, 0.9, 0.1, 0.4, 0.5]).unwrap();
        let p = ThresholdPosterior::new(0.4, -30.0);
        let out = make_pseudo_labels_vi(&probs, &p, 0.0).unwrap();
        assert_eq!(out.threshold_used, 0.4);
        assert_eq!(out.mask.data(), &[0., 1., 0., 1., 1., 0., 0., 1.]);
    }

    #[test]
    fn high_mean_with_zero_noise_masks_nothing_below_it() {
        let probs = t2(&[0.9, 0.1, 0.85, 0.3]);
        let out = make_pseudo_labels_vi(&probs, &ThresholdPosterior::new(0.9, -2.0), 0.0).unwrap();
        assert!(out.mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn reparameterised_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = ThresholdPosterior::new(rng.gen_range(0.3..0.7), rng.gen_range(-6.0..-3.0));
            let noise: f64 = rng.gen_range(-2.0..2.0);
            let s = sample_threshold_with_grad(&p, noise).unwrap();
            assert!(!s.clamped);
            let h = 1e-6;
            let f = |m: f64, lv: f64| sample_threshold(&ThresholdPosterior::new(m, lv), noise).unwrap();
            let dm = (f(p.mean + h, p.log_variance) - f(p.mean - h, p.log_variance)) / (2.0 * h);
            let dl = (f(p.mean, p.log_variance + h) - f(p.mean, p.log_variance - h)) / (2.0 * h);
            assert!((dm - 1.0).abs() < 1e-6);
            assert!((dl - s.d_log_variance).abs() <= 1e-6 * s.d_log_variance.abs().max(1e-3));
            assert!((s.d_log_variance - 0.5 * noise * p.std()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_head_gives_standard_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = PosteriorHead::<f64>::new(8, 2, HeadInput::Bottleneck, &PriorSpec::new(0.9, 0.1).unwrap(), &mut rng);
        let feats = Tensor::full([3, 8, 1, 4, 4], 0.25);
        let start = head.forward(&feats).unwrap();
        assert!((start.mean - 0.9).abs() < 1e-12);
        assert!((start.std() - 0.1).abs() < 1e-12);
        head.fill_zero();
        let p = head.forward(&feats).unwrap();
        assert_eq!(p, ThresholdPosterior::new(0.0, 0.0));
    }

    #[test]
    fn head_is_feature_conditioned_and_batch_pooled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = PosteriorHead::<f64>::new(4, 2, HeadInput::Bottleneck, &PriorSpec::new(0.5, 0.1).unwrap(), &mut rng);
        head.visit_mut("", &mut |_, p| {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        });
        let a = Tensor::from_vec([2, 4, 1, 2, 2], (0..32).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let b = Tensor::from_vec([2, 4, 1, 2, 2], (0..32).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        assert_ne!(head.forward(&a).unwrap(), head.forward(&b).unwrap());
        assert!(head.forward(&Tensor::zeros([0, 4, 1, 2, 2])).is_err());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut head = PosteriorHead::<f64>::new(4, 2, HeadInput::Bottleneck, &PriorSpec::new(0.5, 0.1).unwrap(), &mut rng);
        head.visit_mut("", &mut |_, p| {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        });
        let x = Tensor::from_vec([2, 4, 1, 2, 2], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let objective = |h: &PosteriorHead<f64>, x: &Tensor<f64>| {
            let p = h.forward(x).unwrap();
            1.3 * p.mean - 0.7 * p.log_variance
        };
        let (_, tape) = head.forward_with_tape(&x).unwrap();
        let mut grads = head.zeros_like();
        let dx = head.backward(&tape, 1.3, -0.7, Some(&mut grads));
        let h = 1e-6;
        for idx in [0, 9, 31] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&head, &xp) - objective(&head, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-6, "{fd} vs {}", dx.data()[idx]);
        }
        let g = grads.named_params();
        let mut i = 0;
        head.clone().visit_mut("", &mut |name, _| {
            let (gname, gp) = &g[i];
            assert_eq!(&name, gname);
            let mut plus = head.clone();
            let mut minus = head.clone();
            plus.visit_mut("", &mut |n, p| if n == name { p.data[0] += h });
            minus.visit_mut("", &mut |n, p| if n == name { p.data[0] -= h });
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            assert!((fd - gp.data[0]).abs() < 1e-6, "{name}: {fd} vs {}", gp.data[0]);
            i += 1;
        });
    }

    proptest! {
        #[test]
        fn binarize_monotone_in_threshold(
            probs in prop::collection::vec(0.0f64..=1.0, 16),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let x = Tensor::from_vec([1, 1, 1, 4, 4], probs).unwrap();
            let m_lo = binarize_fixed(&x, lo).unwrap().mask;
            let m_hi = binarize_fixed(&x, hi).unwrap().mask;
            for (a, b) in m_hi.data().iter().zip(m_lo.data()) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn samples_stay_in_bounds(mean in -5.0f64..5.0, lv in -20.0f64..5.0, noise in -10.0f64..10.0) {
            let t = sample_threshold(&ThresholdPosterior::new(mean, lv), noise).unwrap();
            prop_assert!((THRESHOLD_MIN..=THRESHOLD_MAX).contains(&t));
        }
    }
}
