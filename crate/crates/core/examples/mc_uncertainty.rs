//! Monte-Carlo threshold sampling from a SegPL-VI model: per-pixel vote
//! maps and the Brier score of the vote mean.

use segpl::data::{generate_synthetic, split, ImageBatch};
use segpl::eval::{brier, mc_predict, DEFAULT_MC_SAMPLES};
use segpl::presets::{desk_config, desk_synthetic, DESK_SPLIT};
use segpl::trainer::{fit, Mode, TrainConfig};

fn main() -> segpl::Result<()> {
    let (l, u, v, t) = DESK_SPLIT;
    let data = split(generate_synthetic(&desk_synthetic(2))?, l, u, v, t, 2)?;
    let config = TrainConfig {
        steps: 150,
        ..desk_config(Mode::SegplVi, 2)
    };
    let dir = tempfile::tempdir()?;
    let trained = fit(&config, &data, dir.path())?;
    let batch = ImageBatch::stack(&data.test[..8])?;
    let mc = mc_predict(&trained.state.model, trained.state.head.as_ref(), &batch.images, DEFAULT_MC_SAMPLES, 0)?;
    let thresholds: Vec<String> = mc.thresholds.iter().map(|t| format!("{t:.3}")).collect();
    println!("sampled thresholds {}", thresholds.join(", "));
    let uncertain = mc.mean.data().iter().filter(|&&p| p > 0.0 && p < 1.0).count();
    println!("{uncertain} of {} pixels have split votes", mc.mean.len());
    let gt = batch.masks.expect("test samples are labelled");
    println!("Brier of the vote mean: {:.4}", brier(&mc.mean, &gt)?);
    Ok(())
}
