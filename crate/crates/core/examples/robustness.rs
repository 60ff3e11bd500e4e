//! Train SegPL briefly, then sweep intensity-shift mix-up and FGSM budgets.
//!
//!     cargo run --release --example robustness -- [out_dir]

use segpl::data::{generate_synthetic, split};
use segpl::eval::{robustness_sweep, SweepSettings};
use segpl::plot::sweep_plots;
use segpl::presets::{desk_config, desk_synthetic, DESK_SPLIT};
use segpl::trainer::{fit, Mode, TrainConfig};

fn main() -> segpl::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "robustness-out".into()));
    let (l, u, v, t) = DESK_SPLIT;
    let data = split(generate_synthetic(&desk_synthetic(1))?, l, u, v, t, 1)?;
    let config = TrainConfig {
        steps: 200,
        ..desk_config(Mode::Segpl, 1)
    };
    let trained = fit(&config, &data, &out)?;
    let report = robustness_sweep(&trained.state.model, None, &data.test, &SweepSettings::default())?;
    println!("clean IoU {:.3}, Brier {:.4}", report.mean_iou, report.brier);
    for r in &report.gamma_table {
        println!("gamma   {:<6} IoU {:.3}", r.key, r.mean_iou);
    }
    for r in &report.epsilon_table {
        println!("epsilon {:<6} IoU {:.3}  dice loss {:.4}", r.key, r.mean_iou, r.mean_dice_loss);
    }
    report.write_csv(&out.join("sweep.csv"))?;
    for p in sweep_plots(&out, &report)? {
        println!("plot {}", p.display());
    }
    Ok(())
}
