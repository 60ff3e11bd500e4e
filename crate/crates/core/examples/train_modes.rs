//! Train supervised, SegPL and SegPL-VI on the same split and compare test IoU.
//!
//!     cargo run --release --example train_modes -- [steps]

use segpl::data::{generate_synthetic, split};
use segpl::eval::{mean_std, per_image_iou};
use segpl::presets::{desk_config, desk_synthetic, DESK_SPLIT};
use segpl::trainer::{fit, load_checkpoint, Mode, TrainConfig};

fn main() -> segpl::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let (l, u, v, t) = DESK_SPLIT;
    let data = split(generate_synthetic(&desk_synthetic(0))?, l, u, v, t, 0)?;
    let root = tempfile::tempdir()?;
    for mode in Mode::ALL {
        let config = TrainConfig {
            steps,
            eval_every: steps / 4,
            ..desk_config(mode, 0)
        };
        let out = fit(&config, &data, &root.path().join(mode.as_str()))?;
        let (best, _) = load_checkpoint(&out.best_checkpoint)?;
        let (m, s) = mean_std(&per_image_iou(&best.model, &data.test)?);
        let last = out.history.last().expect("steps >= 1");
        println!(
            "{mode:<10} test IoU {:5.1} ± {:4.1}  final loss {:.3}  sampled T {}",
            100.0 * m,
            100.0 * s,
            last.loss_total,
            last.sampled_t.map_or("-".into(), |t| format!("{t:.3}"))
        );
    }
    Ok(())
}
