//! Soft and hard EM on a two-component 1-D Gaussian mixture; the soft run
//! never lowers the log-likelihood and its bound is tight after each E-step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segpl::em::{random_init, run_em, EmMode, MixtureParams};

fn main() -> segpl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = MixtureParams::new([0.3, 0.7], [-1.0, 2.0], [0.5, 1.0])?;
    let data = truth.sample(1000, &mut rng);
    let init = random_init(&data, &mut rng);
    for (name, mode) in [("soft", EmMode::Soft), ("hard", EmMode::Hard { threshold: 0.5 })] {
        let trace = run_em(&data, &init, mode, 40)?;
        println!(
            "{name}: loglik {:.2} -> {:.2}, decreases {}, max bound gap {:.2e}, converged at {:?}",
            trace.iterations[0].log_likelihood,
            trace.iterations.last().expect("40 iterations").log_likelihood,
            trace.log_likelihood_decreases(1e-9),
            trace.max_bound_gap(),
            trace.converged_at(1e-8)
        );
        println!("      means {:.3?} weights {:.3?}", trace.final_params.means, trace.final_params.weights);
    }
    Ok(())
}
