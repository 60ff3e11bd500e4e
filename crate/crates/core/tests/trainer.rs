use std::fs;

use segpl::data::{generate_synthetic, split, BatchSource, BatchStream, DatasetSplit, ImageBatch, SyntheticSpec};
use segpl::trainer::{fit_with_source, load_checkpoint, read_metrics, DataShape, Mode, TrainConfig, METRICS_FILE};
use segpl::{Error, Result};

fn tiny_split() -> DatasetSplit {
    let spec = SyntheticSpec {
        image_size: vec![16, 16],
        num_images: 20,
        ..Default::default()
    };
    split(generate_synthetic(&spec).unwrap(), 2, 10, 4, 4, 1).unwrap()
}

fn tiny_config(mode: Mode, steps: usize) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        ratio: 3,
        base_width: 4,
        depth: 2,
        eval_every: 2,
        ..Default::default()
    }
}

/// Wraps a real stream and records every request made by the trainer.
struct Counting<'a> {
    inner: BatchStream<'a>,
    labelled_sizes: Vec<usize>,
    unlabelled_sizes: Vec<usize>,
    poison_at: Option<usize>,
}

impl<'a> Counting<'a> {
    fn new(s: &'a DatasetSplit, c: &TrainConfig) -> Self {
        Counting {
            inner: BatchStream::new(s, c.labelled_bs, c.ratio, c.seed).unwrap(),
            labelled_sizes: Vec::new(),
            unlabelled_sizes: Vec::new(),
            poison_at: None,
        }
    }
}

impl BatchSource for Counting<'_> {
    fn labelled_batch(&mut self) -> Result<ImageBatch> {
        let mut b = self.inner.labelled_batch()?;
        self.labelled_sizes.push(b.images.batch());
        if self.poison_at == Some(self.labelled_sizes.len()) {
            b.images.data_mut()[0] = f32::NAN;
        }
        Ok(b)
    }

    fn unlabelled_batch(&mut self) -> Result<ImageBatch> {
        let b = self.inner.unlabelled_batch()?;
        self.unlabelled_sizes.push(b.images.batch());
        Ok(b)
    }
}

#[test]
fn supervised_fit_never_reads_unlabelled_images() {
    let s = tiny_split();
    let c = tiny_config(Mode::Supervised, 5);
    let mut src = Counting::new(&s, &c);
    let dir = tempfile::tempdir().unwrap();
    fit_with_source(&c, DataShape::of(&s.labelled[0]).unwrap(), &mut src, &s.validation, dir.path()).unwrap();
    assert_eq!(src.labelled_sizes, vec![2; 5]);
    assert!(src.unlabelled_sizes.is_empty());
}

#[test]
fn semi_supervised_fits_draw_ratio_sized_unlabelled_batches() {
    let s = tiny_split();
    for mode in [Mode::Segpl, Mode::SegplVi] {
        let c = tiny_config(mode, 3);
        let mut src = Counting::new(&s, &c);
        let dir = tempfile::tempdir().unwrap();
        fit_with_source(&c, DataShape::of(&s.labelled[0]).unwrap(), &mut src, &s.validation, dir.path()).unwrap();
        assert_eq!(src.labelled_sizes, vec![2; 3]);
        assert_eq!(src.unlabelled_sizes, vec![6; 3]);
    }
}

#[test]
fn divergence_aborts_but_keeps_completed_rows() {
    let s = tiny_split();
    let c = tiny_config(Mode::Segpl, 6);
    let mut src = Counting::new(&s, &c);
    src.poison_at = Some(4);
    let dir = tempfile::tempdir().unwrap();
    let err = fit_with_source(&c, DataShape::of(&s.labelled[0]).unwrap(), &mut src, &s.validation, dir.path())
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 4, .. }), "{err}");
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(dir.path().join("diagnostic.json").exists());
}

#[test]
fn checkpoint_from_another_format_version_is_refused() {
    let s = tiny_split();
    let c = tiny_config(Mode::SegplVi, 2);
    let mut src = Counting::new(&s, &c);
    let dir = tempfile::tempdir().unwrap();
    let out =
        fit_with_source(&c, DataShape::of(&s.labelled[0]).unwrap(), &mut src, &s.validation, dir.path()).unwrap();
    let (restored, restored_config) = load_checkpoint(&out.final_checkpoint).unwrap();
    assert_eq!(restored, out.state);
    assert_eq!(restored_config, c);

    // Same-length edit of the header metadata keeps the file well formed.
    let bytes = fs::read(&out.final_checkpoint).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let needle = "\"version\":\"1\"";
    assert!(text.contains(needle));
    let at = text.find(needle).unwrap() + needle.len() - 2;
    let mut edited = bytes.clone();
    edited[at] = b'9';
    let path = dir.path().join("future.ckpt");
    fs::write(&path, edited).unwrap();
    match load_checkpoint(&path) {
        Err(Error::VersionMismatch { expected, found }) => {
            assert_eq!(expected, "1");
            assert_eq!(found, "9");
        }
        other => panic!("expected a version mismatch, got {other:?}"),
    }
}
