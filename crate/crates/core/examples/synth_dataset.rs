//! Render the synthetic shape task, split it and write it to disk.
//!
//!     cargo run --release --example synth_dataset -- /tmp/shapes

use segpl::data::{generate_synthetic, load_dataset, save_dataset, split};
use segpl::presets::{desk_synthetic, DESK_SPLIT};

fn main() -> segpl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes-dataset".into());
    let spec = desk_synthetic(7);
    let samples = generate_synthetic(&spec)?;
    let fractions: Vec<f32> = samples
        .iter()
        .map(|s| {
            let m = s.mask.as_ref().expect("synthetic samples are labelled");
            m.data().iter().sum::<f32>() / m.len() as f32
        })
        .collect();
    let (lo, hi) = fractions.iter().fold((1f32, 0f32), |(a, b), &f| (a.min(f), b.max(f)));
    println!("{} images of {:?}, foreground fraction {lo:.3}..{hi:.3}", samples.len(), spec.image_size);

    let (l, u, v, t) = DESK_SPLIT;
    let s = split(samples, l, u, v, t, spec.seed)?;
    let manifest = save_dataset(out.as_ref(), &s, Some(&spec))?;
    println!("labelled ids {:?}", manifest.splits.labelled);

    let (back, _, _) = load_dataset(out.as_ref())?;
    assert_eq!(back, s);
    println!("wrote and re-read {out}");
    Ok(())
}
