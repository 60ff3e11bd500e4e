//! Write a small volume directory in the `.arr` container and load aligned
//! random crops from it.

use segpl::data::{load_volume_dir, write_array};

fn main() -> segpl::Result<()> {
    let dir = tempfile::tempdir()?;
    for sub in ["images", "masks"] {
        std::fs::create_dir(dir.path().join(sub))?;
    }
    let shape = [20usize, 24, 24];
    let n: usize = shape.iter().product();
    for case in ["case_a", "case_b"] {
        let image: Vec<f32> = (0..n).map(|i| (i % 97) as f32 / 97.0).collect();
        let mask: Vec<f32> = image.iter().map(|&v| (v > 0.5) as u8 as f32).collect();
        write_array(&dir.path().join("images").join(format!("{case}.arr")), &shape, &image)?;
        write_array(&dir.path().join("masks").join(format!("{case}.arr")), &shape, &mask)?;
    }
    let crops = load_volume_dir(dir.path(), &[8, 16, 16], 42)?;
    for c in &crops {
        let m = c.mask.as_ref().expect("volume crops carry masks");
        let aligned = c.image.data().iter().zip(m.data()).all(|(x, y)| (*x > 0.5) == (*y == 1.0));
        println!("crop {:?}, mask aligned: {aligned}", c.image.shape());
    }
    Ok(())
}
