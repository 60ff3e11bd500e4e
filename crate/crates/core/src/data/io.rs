use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `.arr` layout: magic, u32 version, u32 ndim, ndim × u64 dims, then
/// contiguous little-endian f32 values in row-major order.
pub const ARRAY_MAGIC: [u8; 4] = *b"SARR";
const ARRAY_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn write_array(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape("write_array", format!("{shape:?} does not hold {} values", data.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&ARRAY_MAGIC)?;
    w.write_u32::<LittleEndian>(ARRAY_VERSION)?;
    w.write_u32::<LittleEndian>(shape.len() as u32)?;
    for &d in shape {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "truncated header"))?;
    if magic != ARRAY_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != ARRAY_VERSION {
        return Err(Error::VersionMismatch {
            expected: ARRAY_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(format_err(path, format!("implausible rank {ndim}")));
    }
    let shape = (0..ndim)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| format_err(path, format!("expected {n} values")))?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(format_err(path, "trailing bytes after values"));
    }
    Ok((shape, data))
}

/// Reads a `[H, W]`, `[D, H, W]` or `[C, D, H, W]` array as a one-item tensor.
fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let (shape, data) = read_array(path)?;
    let s = match shape[..] {
        [h, w] => [1, 1, 1, h, w],
        [d, h, w] => [1, 1, d, h, w],
        [c, d, h, w] => [1, c, d, h, w],
        _ => return Err(format_err(path, format!("unsupported array rank {}", shape.len()))),
    };
    Tensor::from_vec(s, data)
}

fn list_arrays(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "arr") {
            let stem = path.file_stem().expect("has extension").to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

fn crop(t: &Tensor<f32>, offset: [usize; 3], size: [usize; 3]) -> Tensor<f32> {
    let [_, c, d, h, w] = t.shape();
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in offset[0]..offset[0] + size[0] {
            for y in offset[1]..offset[1] + size[1] {
                let row = ((ch * d + z) * h + y) * w;
                out.extend_from_slice(&t.data()[row + offset[2]..row + offset[2] + size[2]]);
            }
        }
    }
    Tensor::from_vec([1, c, size[0], size[1], size[2]], out).expect("sized above")
}

/// Loads `images/*.arr` paired by file name with `masks/*.arr` and takes one
/// random crop per pair; the same offsets apply to image and mask.
pub fn load_volume_dir(path: &Path, crop_size: &[usize], seed: u64) -> Result<Vec<Sample>> {
    let size = match crop_size[..] {
        [h, w] => [1, h, w],
        [d, h, w] => [d, h, w],
        _ => return Err(Error::invalid("crop", "expected 2 or 3 spatial dims")),
    };
    let images = list_arrays(&path.join("images"))?;
    let masks = list_arrays(&path.join("masks"))?;
    if let Some(name) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::invalid("volume dir", format!("image {name}.arr has no mask")));
    }
    if let Some(name) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::invalid("volume dir", format!("mask {name}.arr has no image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len());
    for (id, (name, ipath)) in images.iter().enumerate() {
        let image = read_volume(ipath)?;
        let mask = read_volume(&masks[name])?;
        let sp = image.spatial();
        if mask.spatial() != sp {
            return Err(Error::shape(
                "load_volume_dir",
                format!("{name}: image spatial {sp:?} vs mask {:?}", mask.spatial()),
            ));
        }
        if (0..3).any(|a| size[a] > sp[a] || size[a] == 0) {
            return Err(Error::invalid("crop", format!("{size:?} does not fit volume {name} of {sp:?}")));
        }
        let offset: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=sp[a] - size[a]));
        out.push(Sample {
            id,
            image: crop(&image, offset, size),
            mask: Some(crop(&mask, offset, size)),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMembership {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// `[C, D, H, W]` of every image.
    pub image_shape: [usize; 4],
    pub mask_channels: usize,
    pub splits: SplitMembership,
}

fn file_name(id: usize) -> String {
    format!("{id:06}.arr")
}

fn item_shape(t: &Tensor<f32>) -> [usize; 4] {
    let [_, c, d, h, w] = t.shape();
    [c, d, h, w]
}

/// Writes every pool to `dir`. Unlabelled samples carry no mask, so only
/// their images are stored.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, spec: Option<&SyntheticSpec>) -> Result<DatasetManifest> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let first = split
        .labelled
        .first()
        .ok_or_else(|| Error::InsufficientData("labelled pool is empty".into()))?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        image_shape: item_shape(&first.image),
        mask_channels: first.mask.as_ref().map_or(1, |m| m.channels()),
        splits: split.membership(),
    };
    for s in split.labelled.iter().chain(&split.unlabelled).chain(&split.validation).chain(&split.test) {
        write_array(&images.join(file_name(s.id)), &item_shape(&s.image), s.image.data())?;
        if let Some(m) = &s.mask {
            write_array(&masks.join(file_name(s.id)), &item_shape(m), m.data())?;
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(spec) = spec {
        fs::write(dir.join("synthetic.json"), serde_json::to_string_pretty(spec)?)?;
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetManifest, Option<SyntheticSpec>)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_FORMAT_VERSION.to_string(),
            found: manifest.format_version.to_string(),
        });
    }
    let load = |ids: &[usize], with_mask: bool| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&id| {
                let image = read_volume(&dir.join("images").join(file_name(id)))?;
                let mask = if with_mask {
                    Some(read_volume(&dir.join("masks").join(file_name(id)))?)
                } else {
                    None
                };
                Ok(Sample { id, image, mask })
            })
            .collect()
    };
    let m = &manifest.splits;
    let split = DatasetSplit {
        labelled: load(&m.labelled, true)?,
        unlabelled: load(&m.unlabelled, false)?,
        validation: load(&m.validation, true)?,
        test: load(&m.test, true)?,
    };
    let spec_path = dir.join("synthetic.json");
    let spec = if spec_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(spec_path)?)?)
    } else {
        None
    };
    Ok((split, manifest, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split};

    fn ramp(shape: &[usize]) -> Vec<f32> {
        (0..shape.iter().product::<usize>()).map(|i| i as f32).collect()
    }

    #[test]
    fn array_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.arr");
        write_array(&p, &[2, 3, 4], &ramp(&[2, 3, 4])).unwrap();
        assert_eq!(read_array(&p).unwrap(), (vec![2, 3, 4], ramp(&[2, 3, 4])));
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_array(&p), Err(Error::Format { .. })));
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(read_array(&p), Err(Error::Format { .. })));
        assert!(matches!(read_array(&dir.path().join("x.arr")), Err(Error::MissingFile(_))));
    }

    fn volume_dir(shape: &[usize]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["images", "masks"] {
            fs::create_dir(dir.path().join(sub)).unwrap();
            write_array(&dir.path().join(sub).join("case.arr"), shape, &ramp(shape)).unwrap();
        }
        dir
    }

    #[test]
    fn crops_are_aligned_and_seeded() {
        let dir = volume_dir(&[10, 12, 14]);
        let a = load_volume_dir(dir.path(), &[4, 5, 6], 3).unwrap();
        let b = load_volume_dir(dir.path(), &[4, 5, 6], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].image.shape(), [1, 1, 4, 5, 6]);
        assert_eq!(Some(&a[0].image), a[0].mask.as_ref());
        // Consecutive ramp values inside a row prove the crop is contiguous.
        let d = a[0].image.data();
        assert_eq!(d[1] - d[0], 1.0);
    }

    #[test]
    fn full_crop_is_identity() {
        let dir = volume_dir(&[3, 4, 5]);
        let s = load_volume_dir(dir.path(), &[3, 4, 5], 0).unwrap();
        assert_eq!(s[0].image.data(), &ramp(&[3, 4, 5])[..]);
        assert!(load_volume_dir(dir.path(), &[4, 4, 5], 0).is_err());
    }

    #[test]
    fn unpaired_files_rejected() {
        let dir = volume_dir(&[2, 2]);
        write_array(&dir.path().join("images").join("extra.arr"), &[2, 2], &[0.0; 4]).unwrap();
        assert!(load_volume_dir(dir.path(), &[2, 2], 0).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let spec = SyntheticSpec {
            image_size: vec![16, 16],
            num_images: 12,
            ..Default::default()
        };
        let s = split(generate_synthetic(&spec).unwrap(), 2, 4, 3, 3, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &s, Some(&spec)).unwrap();
        let (back, manifest, spec_back) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(manifest.image_shape, [1, 1, 16, 16]);
        assert_eq!(spec_back, Some(spec));
    }
}
