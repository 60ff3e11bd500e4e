//! IoU and Brier metrics, Monte-Carlo threshold inference, and the two
//! robustness probes: intensity-shift mix-up and FGSM.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{ood_corrupt, CorruptionConfig, IntensityRange, Sample};
use crate::error::{Error, Result};
use crate::losses::{dice_loss, dice_loss_with_grad, DICE_EPS};
use crate::nn::sigmoid_backward;
use crate::pseudo::{binarize_fixed, sample_threshold, standard_noise, HeadInput, PosteriorHead, DEFAULT_THRESHOLD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MC_SAMPLES: usize = 5;
/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 8;

fn check_binary<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<()> {
    match t.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        Some(v) => Err(Error::invalid(what, format!("non-binary value {v:?}"))),
        None => Ok(()),
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, with an empty union scoring 1.
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.ensure_same_shape(gt, "iou")?;
    check_binary(pred, "iou prediction")?;
    check_binary(gt, "iou ground truth")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p == T::one(), *g == T::one());
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean squared difference between probabilities and binary targets.
pub fn brier<T: Scalar>(probabilities: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    probabilities.ensure_same_shape(gt, "brier")?;
    if probabilities.is_empty() {
        return Err(Error::shape("brier", "empty input"));
    }
    let s: f64 = probabilities
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, y)| (p.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / probabilities.len() as f64)
}

/// Hard label per pixel: `p > 0.5` for one channel, argmax across channels
/// otherwise.
fn class_map<T: Scalar>(item: &[T], channels: usize, plane: usize) -> Vec<usize> {
    if channels == 1 {
        let t = T::from_f64(DEFAULT_THRESHOLD);
        return item.iter().map(|&p| (p > t) as usize).collect();
    }
    (0..plane)
        .map(|i| {
            (0..channels)
                .max_by(|&a, &b| {
                    item[a * plane + i]
                        .partial_cmp(&item[b * plane + i])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                })
                .expect("channels > 0")
        })
        .collect()
}

/// IoU of item `n`, per class and macro-averaged. With one output channel the
/// single foreground class is scored.
pub fn image_iou<T: Scalar>(probabilities: &Tensor<T>, gt: &Tensor<T>, n: usize) -> Result<(Vec<f64>, f64)> {
    probabilities.ensure_same_shape(gt, "image_iou")?;
    check_binary(gt, "iou ground truth")?;
    let (c, plane) = (probabilities.channels(), probabilities.plane());
    let pred = class_map(probabilities.item(n), c, plane);
    let truth = class_map(gt.item(n), c, plane);
    let classes: Vec<usize> = if c == 1 { vec![1] } else { (0..c).collect() };
    let per_class: Vec<f64> = classes
        .iter()
        .map(|&k| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (p, g) in pred.iter().zip(&truth) {
                inter += (*p == k && *g == k) as usize;
                union += (*p == k || *g == k) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok((per_class, mean))
}

fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images = Tensor::cat_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let masks = samples
        .iter()
        .map(|s| s.mask.as_ref().ok_or_else(|| Error::InsufficientData(format!("sample {} has no mask", s.id))))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, Tensor::cat_batch(&masks)?))
}

/// Macro IoU of every sample, thresholding the raw probabilities.
pub fn per_image_iou(model: &Backbone<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    per_image_iou_with(model, samples, |_, x| Ok(x.clone()))
}

/// As [`per_image_iou`] after mapping each chunk's images through `perturb`
/// (given the chunk index).
fn per_image_iou_with(
    model: &Backbone<f32>,
    samples: &[Sample],
    mut perturb: impl FnMut(usize, &Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let (images, masks) = stack(&chunk.iter().collect::<Vec<_>>())?;
        let probs = model.forward(&perturb(ci, &images)?)?.probabilities;
        for n in 0..chunk.len() {
            out.push(image_iou(&probs, &masks, n)?.1);
        }
    }
    Ok(out)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Output of [`mc_predict`].
#[derive(Clone, Debug)]
pub struct McPrediction {
    /// Fraction of samples voting foreground, per pixel.
    pub mean: Tensor<f32>,
    pub masks: Vec<Tensor<f32>>,
    pub thresholds: Vec<f64>,
}

/// One forward pass, then one binarisation per supplied noise value.
pub fn mc_predict_with_noise(
    model: &Backbone<f32>,
    head: Option<&PosteriorHead<f32>>,
    images: &Tensor<f32>,
    noises: &[f64],
) -> Result<McPrediction> {
    let head = head.ok_or_else(|| Error::invalid("threshold head", "Monte-Carlo prediction needs a trained head"))?;
    if noises.is_empty() {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    let out = model.forward(images)?;
    let features = match head.input() {
        HeadInput::Bottleneck => &out.bottleneck_features,
        HeadInput::Logits => &out.logits,
    };
    let posterior = head.forward(features)?;
    let mut thresholds = Vec::with_capacity(noises.len());
    let mut masks = Vec::with_capacity(noises.len());
    let mut sum = vec![0f32; out.probabilities.len()];
    for &z in noises {
        let t = sample_threshold(&posterior, z)?;
        let m = binarize_fixed(&out.probabilities, t)?.mask;
        for (s, v) in sum.iter_mut().zip(m.data()) {
            *s += v;
        }
        thresholds.push(t);
        masks.push(m);
    }
    let k = noises.len() as f32;
    let mean = Tensor::from_vec(out.probabilities.shape(), sum.into_iter().map(|s| s / k).collect())?;
    Ok(McPrediction { mean, masks, thresholds })
}

pub fn mc_predict(
    model: &Backbone<f32>,
    head: Option<&PosteriorHead<f32>>,
    images: &Tensor<f32>,
    n_samples: usize,
    seed: u64,
) -> Result<McPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises: Vec<f64> = (0..n_samples).map(|_| standard_noise(&mut rng)).collect();
    mc_predict_with_noise(model, head, images, &noises)
}

/// Gradient of the batch Dice loss with respect to the input images.
pub fn dice_input_gradient(model: &Backbone<f32>, images: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
    let (out, tape) = model.forward_with_tape(images)?;
    let (loss, d_prob) = dice_loss_with_grad(&out.probabilities, gt, DICE_EPS)?;
    let d_logits = sigmoid_backward(&out.probabilities, &d_prob);
    let dx = model
        .backward(&tape, &d_logits, None, None, true)
        .expect("input gradient requested");
    Ok((loss, dx))
}

/// `clip(x + eps * sign(grad))`; a zero gradient leaves the pixel alone.
pub fn fgsm_step(images: &Tensor<f32>, input_grad: &Tensor<f32>, eps: f64, range: IntensityRange) -> Result<Tensor<f32>> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid("epsilon", format!("{eps} must be non-negative")));
    }
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let (lo, hi, e) = (range.lo as f32, range.hi as f32, eps as f32);
    images.zip_map(input_grad, |x, g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        (x + e * s).clamp(lo, hi)
    })
}

/// White-box FGSM against the Dice loss with ground-truth masks.
pub fn fgsm_attack(
    model: &Backbone<f32>,
    images: &Tensor<f32>,
    gt: &Tensor<f32>,
    eps: f64,
    range: IntensityRange,
) -> Result<Tensor<f32>> {
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let (_, grad) = dice_input_gradient(model, images, gt)?;
    fgsm_step(images, &grad, eps, range)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    /// Mean per-image Dice loss on the perturbed inputs.
    pub mean_dice_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image_iou: Vec<f64>,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub brier: f64,
    /// Zero when Brier was computed on raw probabilities.
    pub mc_samples: usize,
    pub gamma_table: Vec<SweepRow>,
    pub epsilon_table: Vec<SweepRow>,
}

#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub gammas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub corruption: CorruptionConfig,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            epsilons: vec![0.0, 2e-3, 5e-3, 1e-2],
            corruption: CorruptionConfig::default(),
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

fn sorted(keys: &[f64], what: &'static str) -> Result<Vec<f64>> {
    if keys.iter().any(|k| !k.is_finite()) {
        return Err(Error::invalid(what, "non-finite sweep value"));
    }
    let mut k = keys.to_vec();
    k.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    k.dedup();
    Ok(k)
}

fn per_image_dice(model: &Backbone<f32>, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<Vec<f64>> {
    let probs = model.forward(images)?.probabilities;
    (0..images.batch())
        .map(|n| dice_loss(&probs.slice_batch(n, n + 1), &masks.slice_batch(n, n + 1), DICE_EPS))
        .collect()
}

/// Clean metrics plus IoU under each mix-up strength and each FGSM budget.
/// Zero entries reuse the untouched inputs, so they reproduce clean IoU.
pub fn robustness_sweep(
    model: &Backbone<f32>,
    head: Option<&PosteriorHead<f32>>,
    test: &[Sample],
    settings: &SweepSettings,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let per_image = per_image_iou(model, test)?;
    let (mean_iou, std_iou) = mean_std(&per_image);

    let mut sq = 0.0;
    let mut count = 0usize;
    for (ci, chunk) in test.chunks(EVAL_CHUNK).enumerate() {
        let (images, masks) = stack(&chunk.iter().collect::<Vec<_>>())?;
        let p = match head {
            Some(h) if settings.mc_samples > 0 => {
                mc_predict(model, Some(h), &images, settings.mc_samples, settings.seed.wrapping_add(ci as u64))?.mean
            }
            _ => model.forward(&images)?.probabilities,
        };
        sq += brier(&p, &masks)? * p.len() as f64;
        count += p.len();
    }
    let mc_samples = if head.is_some() { settings.mc_samples } else { 0 };

    let range = settings.corruption.intensity_range;
    let mut gamma_table = Vec::new();
    for g in sorted(&settings.gammas, "gamma list")? {
        let mut dice = Vec::new();
        let ious = per_image_iou_with(model, test, |ci, x| {
            let y = ood_corrupt(x, g, &settings.corruption, settings.seed.wrapping_add(ci as u64))?;
            let chunk: Vec<&Sample> = test.chunks(EVAL_CHUNK).nth(ci).expect("chunk").iter().collect();
            dice.extend(per_image_dice(model, &y, &stack(&chunk)?.1)?);
            Ok(y)
        })?;
        let (m, s) = mean_std(&ious);
        gamma_table.push(SweepRow {
            key: g,
            mean_iou: m,
            std_iou: s,
            mean_dice_loss: mean_std(&dice).0,
        });
    }
    let mut epsilon_table = Vec::new();
    for e in sorted(&settings.epsilons, "epsilon list")? {
        let mut dice = Vec::new();
        let ious = per_image_iou_with(model, test, |ci, x| {
            let chunk: Vec<&Sample> = test.chunks(EVAL_CHUNK).nth(ci).expect("chunk").iter().collect();
            let masks = stack(&chunk)?.1;
            let y = fgsm_attack(model, x, &masks, e, range)?;
            dice.extend(per_image_dice(model, &y, &masks)?);
            Ok(y)
        })?;
        let (m, s) = mean_std(&ious);
        epsilon_table.push(SweepRow {
            key: e,
            mean_iou: m,
            std_iou: s,
            mean_dice_loss: mean_std(&dice).0,
        });
    }
    Ok(EvalReport {
        per_image_iou: per_image,
        mean_iou,
        std_iou,
        brier: sq / count as f64,
        mc_samples,
        gamma_table,
        epsilon_table,
    })
}

impl EvalReport {
    /// One row per clean summary and sweep entry:
    /// `table,key,mean_iou,std_iou,mean_dice_loss,brier`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["table", "key", "mean_iou", "std_iou", "mean_dice_loss", "brier"])?;
        w.write_record([
            "clean".to_string(),
            String::new(),
            self.mean_iou.to_string(),
            self.std_iou.to_string(),
            String::new(),
            self.brier.to_string(),
        ])?;
        for (name, table) in [("gamma", &self.gamma_table), ("epsilon", &self.epsilon_table)] {
            for r in table {
                w.write_record([
                    name.to_string(),
                    r.key.to_string(),
                    r.mean_iou.to_string(),
                    r.std_iou.to_string(),
                    r.mean_dice_loss.to_string(),
                    String::new(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_per_image_csv(&self, path: &Path, ids: &[usize]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "iou"])?;
        for (id, v) in ids.iter().zip(&self.per_image_iou) {
            w.write_record([id.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::pseudo::PriorSpec;
    use rand::Rng;

    fn mask(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec([1, 1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let g = mask(&[1., 1., 0., 0.]);
        assert_eq!(iou(&g, &g).unwrap(), 1.0);
        assert_eq!(iou(&mask(&[0., 0., 1., 1.]), &g).unwrap(), 0.0);
        assert_eq!(iou(&mask(&[1., 0., 0., 0.]), &g).unwrap(), 0.5);
        assert_eq!(iou(&mask(&[0.; 4]), &mask(&[0.; 4])).unwrap(), 1.0);
        assert!(iou(&mask(&[0.5, 0., 0., 0.]), &g).is_err());
    }

    #[test]
    fn iou_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f32> = (0..64).map(|_| rng.gen_bool(0.4) as u8 as f32).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen_bool(0.4) as u8 as f32).collect();
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..64).collect();
            p.shuffle(&mut rng);
            p
        };
        let pa: Vec<f32> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<f32> = perm.iter().map(|&i| b[i]).collect();
        assert_eq!(iou(&mask(&a), &mask(&b)).unwrap(), iou(&mask(&pa), &mask(&pb)).unwrap());
    }

    #[test]
    fn brier_examples_and_symmetry() {
        let y = mask(&[1., 0., 1., 0.]);
        assert_eq!(brier(&y, &y).unwrap(), 0.0);
        assert_eq!(brier(&mask(&[0.5; 4]), &y).unwrap(), 0.25);
        let f64s = |v: &[f64]| Tensor::from_vec([1, 1, 1, 1, v.len()], v.to_vec()).unwrap();
        let (p, y) = (f64s(&[0.1, 0.7, 0.4, 0.95]), f64s(&[1., 0., 1., 0.]));
        let flip = |t: &Tensor<f64>| t.map(|v| 1.0 - v);
        assert!((brier(&p, &y).unwrap() - brier(&flip(&p), &flip(&y)).unwrap()).abs() < 1e-12);
        assert!(brier(&p, &f64s(&[0.; 3])).is_err());
    }

    #[test]
    fn multiclass_iou_uses_argmax() {
        // Two pixels, three classes. Pixel 0 predicted class 2 (truth 2),
        // pixel 1 predicted class 0 (truth 1).
        let p = Tensor::from_vec([1, 3, 1, 1, 2], vec![0.1, 0.9, 0.2, 0.3, 0.8, 0.1]).unwrap();
        let y = Tensor::from_vec([1, 3, 1, 1, 2], vec![0., 0., 0., 1., 1., 0.]).unwrap();
        let (per, mean) = image_iou(&p, &y, 0).unwrap();
        assert_eq!(per, vec![0.0, 0.0, 1.0]);
        assert!((mean - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fgsm_step_follows_sign_and_budget() {
        let x = mask(&[0.5, 0.5, 0.999, 0.0]);
        let g = mask(&[2.0, -0.1, 1.0, 0.0]);
        let y = fgsm_step(&x, &g, 0.01, IntensityRange::default()).unwrap();
        assert_eq!(y.data(), &[0.51, 0.49, 1.0, 0.0]);
        assert_eq!(fgsm_step(&x, &g, 0.0, IntensityRange::default()).unwrap(), x);
    }

    #[test]
    fn one_pixel_fgsm_direction_matches_hand_gradient() {
        // p = sigmoid(w x + b), target 1: the Dice loss falls as p rises, so
        // dL/dx has the sign of -w and FGSM moves x against w.
        for w in [-1.5f64, 2.0] {
            let (x0, b) = (0.3f64, 0.1);
            let p = 1.0 / (1.0 + (-(w * x0 + b)).exp());
            let loss = |p: f64| 1.0 - (2.0 * p + DICE_EPS) / (p + 1.0 + DICE_EPS);
            let h = 1e-6;
            let dldp = (loss(p + h) - loss(p - h)) / (2.0 * h);
            let dldx = dldp * p * (1.0 - p) * w;
            let adv = fgsm_step(&mask(&[x0 as f32]), &mask(&[dldx as f32]), 0.05, IntensityRange::default()).unwrap();
            assert_eq!((adv.data()[0] as f64 - x0).signum(), -w.signum());
        }
    }

    fn tiny_model(seed: u64) -> Backbone<f32> {
        let cfg = BackboneConfig {
            base_width: 4,
            depth: 2,
            ..Default::default()
        };
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|id| Sample {
                id,
                image: Tensor::from_vec([1, 1, 1, 8, 8], (0..64).map(|_| rng.gen::<f32>()).collect()).unwrap(),
                mask: Some(Tensor::from_vec([1, 1, 1, 8, 8], (0..64).map(|_| rng.gen_bool(0.3) as u8 as f32).collect()).unwrap()),
            })
            .collect()
    }

    #[test]
    fn fgsm_increases_loss_to_first_order() {
        let model = tiny_model(2);
        let s = random_samples(3, 1);
        let (x, y) = stack(&s.iter().collect::<Vec<_>>()).unwrap();
        let (l0, _) = dice_input_gradient(&model, &x, &y).unwrap();
        let adv = fgsm_attack(&model, &x, &y, 1e-3, IntensityRange::default()).unwrap();
        let l1 = dice_loss(&model.forward(&adv).unwrap().probabilities, &y, DICE_EPS).unwrap();
        assert!(l1 > l0, "{l1} <= {l0}");
        let diff = adv.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(diff <= 1e-3 + 1e-7);
    }

    #[test]
    fn sweep_zero_rows_equal_clean_and_rows_are_sorted() {
        let model = tiny_model(3);
        let test = random_samples(10, 2);
        let settings = SweepSettings {
            gammas: vec![0.5, 0.0],
            epsilons: vec![1e-2, 0.0, 2e-3],
            ..Default::default()
        };
        let r = robustness_sweep(&model, None, &test, &settings).unwrap();
        assert_eq!(r.gamma_table.len() + r.epsilon_table.len(), 5);
        assert_eq!(r.gamma_table[0].key, 0.0);
        assert_eq!(r.gamma_table[0].mean_iou.to_bits(), r.mean_iou.to_bits());
        assert_eq!(r.epsilon_table[0].mean_iou.to_bits(), r.mean_iou.to_bits());
        assert!(r.epsilon_table.windows(2).all(|w| w[0].key < w[1].key));
        assert!(r.per_image_iou.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.mc_samples, 0);
    }

    #[test]
    fn mc_predict_votes() {
        let model = tiny_model(4);
        let s = random_samples(2, 3);
        let (x, _) = stack(&s.iter().collect::<Vec<_>>()).unwrap();
        let cfg = model.config().clone();
        let prior = PriorSpec::new(0.5, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = PosteriorHead::new(cfg.bottleneck_channels(), 2, HeadInput::Bottleneck, &prior, &mut rng);
        assert!(mc_predict(&model, None, &x, 5, 0).is_err());

        let single = mc_predict_with_noise(&model, Some(&head), &x, &[0.0]).unwrap();
        assert!((single.thresholds[0] - 0.5).abs() < 1e-6);
        let at_mu = binarize_fixed(&model.forward(&x).unwrap().probabilities, single.thresholds[0]).unwrap();
        assert_eq!(single.masks[0], at_mu.mask);

        let mc = mc_predict(&model, Some(&head), &x, DEFAULT_MC_SAMPLES, 9).unwrap();
        assert_eq!(mc.masks.len(), 5);
        for (i, m) in mc.mean.data().iter().enumerate() {
            let votes: f32 = mc.masks.iter().map(|k| k.data()[i]).sum();
            assert_eq!(*m, votes / 5.0);
            assert!((0.0..=1.0).contains(m));
        }

        // A collapsed posterior yields identical samples.
        let collapsed = PriorSpec::new(0.5, 1e-12).unwrap();
        let head = PosteriorHead::new(cfg.bottleneck_channels(), 2, HeadInput::Bottleneck, &collapsed, &mut rng);
        let mc = mc_predict(&model, Some(&head), &x, 5, 1).unwrap();
        assert!(mc.masks.windows(2).all(|w| w[0] == w[1]));
    }
}
