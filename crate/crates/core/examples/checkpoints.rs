//! Save a training state, restore it, and continue bit-identically.

use segpl::data::{generate_synthetic, split, BatchSource, BatchStream, SyntheticSpec};
use segpl::trainer::{load_checkpoint, save_checkpoint, train_step, DataShape, Mode, TrainConfig, TrainState};

fn main() -> segpl::Result<()> {
    let spec = SyntheticSpec {
        image_size: vec![16, 16],
        num_images: 20,
        ..Default::default()
    };
    let data = split(generate_synthetic(&spec)?, 2, 10, 4, 4, 0)?;
    let config = TrainConfig {
        mode: Mode::SegplVi,
        base_width: 4,
        depth: 2,
        steps: 10,
        ..Default::default()
    };
    let mut state = TrainState::new(&config, DataShape::of(&data.labelled[0])?)?;
    let mut stream = BatchStream::new(&data, config.labelled_bs, config.ratio, 0)?;
    for _ in 0..3 {
        let (l, u) = (stream.labelled_batch()?, stream.unlabelled_batch()?);
        train_step(&mut state, &l, Some(&u), &config)?;
    }
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&path, &state, &config)?;
    let (mut restored, _) = load_checkpoint(&path)?;
    assert_eq!(restored, state);

    let (l, u) = (stream.labelled_batch()?, stream.unlabelled_batch()?);
    let a = train_step(&mut state, &l, Some(&u), &config)?;
    let b = train_step(&mut restored, &l, Some(&u), &config)?;
    assert_eq!(a, b);
    println!(
        "checkpoint at step 3 ({} bytes) resumes identically: loss {:.5}, sampled T {:.4}",
        std::fs::metadata(&path)?.len(),
        a.loss.total,
        a.sampled_threshold.unwrap_or(f64::NAN)
    );
    Ok(())
}
