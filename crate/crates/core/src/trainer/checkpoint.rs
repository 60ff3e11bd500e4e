use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::{TrainConfig, TrainState};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::pseudo::PosteriorHead;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "segpl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn collect<M: Module<f32>>(prefix: &str, module: &M, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
    module.visit(prefix, &mut |name, p| out.push((name, p.shape.clone(), bytes(p))));
}

fn bytes(p: &Param<f32>) -> Vec<u8> {
    let mut b = Vec::with_capacity(p.data.len() * 4);
    for &v in &p.data {
        v.write_le(&mut b);
    }
    b
}

fn collect_moments(prefix: &str, names: &[String], m: &Moments<f32>, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
    for (i, name) in names.iter().enumerate() {
        out.push((format!("{prefix}.m.{name}"), m.m[i].shape.clone(), bytes(&m.m[i])));
        out.push((format!("{prefix}.v.{name}"), m.v[i].shape.clone(), bytes(&m.v[i])));
    }
}

fn names<M: Module<f32>>(module: &M) -> Vec<String> {
    module.named_params().into_iter().map(|(n, _)| n).collect()
}

/// Writes model, head, optimizer moments and RNG position; the
/// configuration travels in the header metadata.
pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let mut tensors = Vec::new();
    collect("model", &state.model, &mut tensors);
    collect_moments("adam.model", &names(&state.model), &state.optimizer.groups[0], &mut tensors);
    if let Some(head) = &state.head {
        collect("head", head, &mut tensors);
        collect_moments("adam.head", &names(head), &state.optimizer.groups[1], &mut tensors);
    }
    let views = tensors
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b)?)))
        .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| fmt_err(path, e.to_string()))?;

    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert("step".to_string(), state.step.to_string());
    meta.insert("best_val_iou".to_string(), state.best_val_iou.to_string());
    meta.insert("adam_t".to_string(), state.optimizer.t.to_string());
    meta.insert("adam".to_string(), serde_json::to_string(&state.optimizer.config)?);
    meta.insert("rng_seed".to_string(), seed);
    meta.insert("rng_stream".to_string(), state.rng.get_stream().to_string());
    meta.insert("rng_word_pos".to_string(), state.rng.get_word_pos().to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("backbone".to_string(), serde_json::to_string(state.model.config())?);
    if let Some(head) = &state.head {
        meta.insert("head_in_channels".to_string(), head.in_channels().to_string());
    }
    let buf = safetensors::serialize(views, &Some(meta)).map_err(|e| fmt_err(path, e.to_string()))?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn restore<M: Module<f32>>(path: &Path, st: &SafeTensors, prefix: &str, module: &mut M) -> Result<()> {
    let mut failure = None;
    module.visit_mut(prefix, &mut |name, p| {
        if failure.is_some() {
            return;
        }
        failure = read_into(path, st, &name, p).err();
    });
    failure.map_or(Ok(()), Err)
}

fn read_into(path: &Path, st: &SafeTensors, name: &str, p: &mut Param<f32>) -> Result<()> {
    let view = st
        .tensor(name)
        .map_err(|_| fmt_err(path, format!("missing tensor {name}")))?;
    if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
        return Err(fmt_err(
            path,
            format!("{name}: stored {:?} {:?}, expected F32 {:?}", view.dtype(), view.shape(), p.shape),
        ));
    }
    for (v, chunk) in p.data.iter_mut().zip(view.data().chunks_exact(4)) {
        *v = f32::read_le(chunk);
    }
    Ok(())
}

fn restore_moments<M: Module<f32>>(path: &Path, st: &SafeTensors, prefix: &str, module: &M) -> Result<Moments<f32>> {
    let mut m = Moments::for_module(module);
    for (i, name) in names(module).iter().enumerate() {
        read_into(path, st, &format!("{prefix}.m.{name}"), &mut m.m[i])?;
        read_into(path, st, &format!("{prefix}.v.{name}"), &mut m.v[i])?;
    }
    Ok(m)
}

fn meta<'a>(path: &Path, m: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| fmt_err(path, format!("metadata key {key} missing")))
}

fn parse<T: std::str::FromStr>(path: &Path, m: &HashMap<String, String>, key: &str) -> Result<T> {
    meta(path, m, key)?
        .parse()
        .map_err(|_| fmt_err(path, format!("metadata key {key} is malformed")))
}

/// Restores a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let buf = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| fmt_err(path, e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| fmt_err(path, e.to_string()))?;
    let m = header
        .metadata()
        .as_ref()
        .ok_or_else(|| fmt_err(path, "no metadata header"))?;
    if meta(path, m, "format")? != CHECKPOINT_FORMAT {
        return Err(fmt_err(path, "not a segpl checkpoint"));
    }
    let version: u32 = parse(path, m, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let config: TrainConfig = serde_json::from_str(meta(path, m, "config")?)?;
    let backbone: BackboneConfig = serde_json::from_str(meta(path, m, "backbone")?)?;
    let adam_config: AdamConfig = serde_json::from_str(meta(path, m, "adam")?)?;

    // Structure comes from the configs; every value is then overwritten.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut model = Backbone::new(backbone.clone(), &mut scratch)?;
    restore(path, &st, "model", &mut model)?;
    let mut optimizer = Adam::new(adam_config)?;
    optimizer.t = parse(path, m, "adam_t")?;
    optimizer.groups.push(restore_moments(path, &st, "adam.model", &model)?);
    let head = match m.get("head_in_channels") {
        Some(c) => {
            let c: usize = c.parse().map_err(|_| fmt_err(path, "head_in_channels is malformed"))?;
            let mut head =
                PosteriorHead::new(c, backbone.spatial_rank, config.head_input, &config.prior(), &mut scratch);
            restore(path, &st, "head", &mut head)?;
            optimizer.groups.push(restore_moments(path, &st, "adam.head", &head)?);
            Some(head)
        }
        None => None,
    };

    let seed_hex = meta(path, m, "rng_seed")?;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 {
        return Err(fmt_err(path, "rng_seed must be 64 hex digits"));
    }
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| fmt_err(path, "rng_seed is not hex"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse(path, m, "rng_stream")?);
    rng.set_word_pos(parse(path, m, "rng_word_pos")?);

    let state = TrainState {
        step: parse(path, m, "step")?,
        model,
        head,
        optimizer,
        rng,
        best_val_iou: parse(path, m, "best_val_iou")?,
    };
    Ok((state, config))
}

/// As [`load_checkpoint`], failing when the stored configuration differs
/// from `expected` in any field that shapes the network.
pub fn load_checkpoint_expecting(path: &Path, expected: &TrainConfig) -> Result<(TrainState, TrainConfig)> {
    let (state, config) = load_checkpoint(path)?;
    let arch = |c: &TrainConfig| (c.mode, c.base_width, c.depth, c.head_input);
    if arch(&config) != arch(expected) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has mode {} width {} depth {} head {:?}; expected mode {} width {} depth {} head {:?}",
            config.mode,
            config.base_width,
            config.depth,
            config.head_input,
            expected.mode,
            expected.base_width,
            expected.depth,
            expected.head_input
        )));
    }
    Ok((state, config))
}
