//! The variational threshold: reparameterised sampling, the Gaussian KL to
//! the prior, and pseudo-labels drawn at a sampled threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segpl::losses::kl_gaussian;
use segpl::pseudo::{binarize_fixed, make_pseudo_labels_vi, sample_threshold, standard_noise, PriorSpec, ThresholdPosterior};
use segpl::Tensor;

fn main() -> segpl::Result<()> {
    let prior = PriorSpec::new(0.9, 0.1)?;
    let posterior = ThresholdPosterior::new(0.8, (0.05f64).powi(2).ln());
    println!("KL(posterior || prior) = {:.4}", kl_gaussian(&posterior, &prior));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| sample_threshold(&posterior, standard_noise(&mut rng)))
        .collect::<segpl::Result<_>>()?;
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let std = (draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    println!("10k sampled thresholds: mean {mean:.4}, std {std:.4}");

    let probs = Tensor::from_vec([1, 1, 1, 1, 6], vec![0.2f32, 0.55, 0.75, 0.82, 0.9, 0.97])?;
    println!("fixed T=0.5 mask  {:?}", binarize_fixed(&probs, 0.5)?.mask.data());
    for _ in 0..3 {
        let pl = make_pseudo_labels_vi(&probs, &posterior, standard_noise(&mut rng))?;
        println!("sampled T={:.3} mask {:?}", pl.threshold_used, pl.mask.data());
    }
    Ok(())
}
