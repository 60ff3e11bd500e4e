//! The training loop: one concatenated forward pass per step, pseudo-labels
//! from the unlabelled slice, one Adam update on the total loss.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{alpha_schedule, Mode, TrainConfig};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{BatchSource, BatchStream, DatasetSplit, ImageBatch, Sample};
use crate::error::{Error, Result};
use crate::eval::{mean_std, per_image_iou};
use crate::losses::{segpl_loss_with_grad, segpl_vi_loss_with_grad, supervised_loss_with_grad, LossBreakdown};
use crate::nn::{sigmoid_backward, Module};
use crate::optim::{Adam, AdamConfig};
use crate::pseudo::{binarize_fixed, sample_threshold, standard_noise, HeadInput, PosteriorHead, ThresholdPosterior, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer updates.
    pub step: usize,
    pub model: Backbone<f32>,
    /// Present in `segpl_vi` mode only.
    pub head: Option<PosteriorHead<f32>>,
    /// Group 0 tracks the model, group 1 the head.
    pub optimizer: Adam<f32>,
    /// Drives threshold noise.
    pub rng: ChaCha8Rng,
    pub best_val_iou: f64,
}

/// Channel counts and rank of the data a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_rank: usize,
}

impl DataShape {
    pub fn of(sample: &Sample) -> Result<Self> {
        let mask = sample
            .mask
            .as_ref()
            .ok_or_else(|| Error::InsufficientData(format!("sample {} has no mask", sample.id)))?;
        Ok(DataShape {
            in_channels: sample.image.channels(),
            out_channels: mask.channels(),
            spatial_rank: if sample.image.spatial()[0] > 1 { 3 } else { 2 },
        })
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig, shape: DataShape) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bb = config.backbone(shape.in_channels, shape.out_channels, shape.spatial_rank);
        let model = Backbone::new(bb.clone(), &mut rng)?;
        let mut optimizer = Adam::new(AdamConfig::with_lr(config.lr))?;
        optimizer.add_group(&model);
        let head = (config.mode == Mode::SegplVi).then(|| {
            let in_ch = match config.head_input {
                HeadInput::Bottleneck => bb.bottleneck_channels(),
                HeadInput::Logits => bb.out_channels,
            };
            PosteriorHead::new(in_ch, shape.spatial_rank, config.head_input, &config.prior(), &mut rng)
        });
        if let Some(h) = &head {
            optimizer.add_group(h);
        }
        Ok(TrainState {
            step: 0,
            model,
            head,
            optimizer,
            rng,
            best_val_iou: f64::NEG_INFINITY,
        })
    }

    /// Current threshold posterior on `images`, if a head exists.
    pub fn posterior(&self, images: &Tensor<f32>) -> Result<Option<ThresholdPosterior>> {
        let Some(head) = &self.head else { return Ok(None) };
        let out = self.model.forward(images)?;
        let features = match head.input() {
            HeadInput::Bottleneck => &out.bottleneck_features,
            HeadInput::Logits => &out.logits,
        };
        head.forward(features).map(Some)
    }
}

/// What one optimizer step produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub sampled_threshold: Option<f64>,
    pub posterior: Option<ThresholdPosterior>,
}

fn masks_of(batch: &ImageBatch) -> Result<&Tensor<f32>> {
    batch
        .masks
        .as_ref()
        .ok_or_else(|| Error::InsufficientData("labelled batch carries no masks".into()))
}

/// One update of `state`. `unlabelled` is ignored in supervised mode and
/// required otherwise.
pub fn train_step(
    state: &mut TrainState,
    labelled: &ImageBatch,
    unlabelled: Option<&ImageBatch>,
    config: &TrainConfig,
) -> Result<StepReport> {
    let y = masks_of(labelled)?;
    let n_l = labelled.len();
    let alpha_eff = alpha_schedule(state.step, config.steps, config.alpha, config.warmup_fraction);
    let mut model_grads = state.model.zeros_like();
    let mut head_grads = state.head.as_ref().map(Module::zeros_like);

    let report = match config.mode {
        Mode::Supervised => {
            let (out, tape) = state.model.forward_with_tape(&labelled.images)?;
            let (loss, g) = supervised_loss_with_grad(&out.probabilities, y)?;
            check_finite(state.step + 1, &loss, None)?;
            let d_logits = sigmoid_backward(&out.probabilities, &g.d_labelled);
            state.model.backward(&tape, &d_logits, None, Some(&mut model_grads), false);
            StepReport {
                loss,
                sampled_threshold: None,
                posterior: None,
            }
        }
        Mode::Segpl | Mode::SegplVi => {
            let u = unlabelled
                .ok_or_else(|| Error::InsufficientData(format!("{} mode needs an unlabelled batch", config.mode)))?;
            let images = Tensor::cat_batch(&[&labelled.images, &u.images])?;
            let total = images.batch();
            let (out, tape) = state.model.forward_with_tape(&images)?;
            let p_l = out.probabilities.slice_batch(0, n_l);
            let p_u = out.probabilities.slice_batch(n_l, total);

            let mut d_bottleneck = None;
            let mut d_logits_extra = None;
            let (loss, grads, sampled, posterior) = if config.mode == Mode::Segpl {
                let pseudo = binarize_fixed(&p_u, DEFAULT_THRESHOLD)?;
                let (loss, g) = segpl_loss_with_grad(&p_l, y, &p_u, &pseudo, alpha_eff)?;
                (loss, g, None, None)
            } else {
                let head = state.head.as_ref().ok_or_else(|| Error::invalid("threshold head", "missing"))?;
                let features = match head.input() {
                    HeadInput::Bottleneck => out.bottleneck_features.slice_batch(n_l, total),
                    HeadInput::Logits => out.logits.slice_batch(n_l, total),
                };
                let (posterior, head_tape) = head.forward_with_tape(&features)?;
                let t = sample_threshold(&posterior, standard_noise(&mut state.rng))?;
                let pseudo = binarize_fixed(&p_u, t)?;
                let (loss, g) = segpl_vi_loss_with_grad(
                    &p_l,
                    y,
                    &p_u,
                    &pseudo,
                    &posterior,
                    &config.prior(),
                    alpha_eff,
                    config.kl_weight,
                )?;
                check_finite(state.step + 1, &loss, Some(t))?;
                let d_features = head.backward(&head_tape, g.d_mean, g.d_log_variance, head_grads.as_mut());
                // Pad with zeros for the labelled slice, which the head never saw.
                let full_shape = match head.input() {
                    HeadInput::Bottleneck => out.bottleneck_features.shape(),
                    HeadInput::Logits => out.logits.shape(),
                };
                let mut padded = Tensor::zeros(full_shape);
                let off = n_l * padded.item_len();
                padded.data_mut()[off..].copy_from_slice(d_features.data());
                match head.input() {
                    HeadInput::Bottleneck => d_bottleneck = Some(padded),
                    HeadInput::Logits => d_logits_extra = Some(padded),
                }
                (loss, g, Some(t), Some(posterior))
            };
            check_finite(state.step + 1, &loss, sampled)?;
            let d_u = grads.d_unlabelled.expect("pseudo-label loss yields an unlabelled gradient");
            let d_prob = Tensor::cat_batch(&[&grads.d_labelled, &d_u])?;
            let mut d_logits = sigmoid_backward(&out.probabilities, &d_prob);
            if let Some(extra) = d_logits_extra {
                for (a, b) in d_logits.data_mut().iter_mut().zip(extra.data()) {
                    *a += *b;
                }
            }
            state
                .model
                .backward(&tape, &d_logits, d_bottleneck.as_ref(), Some(&mut model_grads), false);
            StepReport {
                loss,
                sampled_threshold: sampled,
                posterior,
            }
        }
    };

    state.optimizer.begin_step();
    state.optimizer.apply(0, &mut state.model, &model_grads);
    if let (Some(head), Some(g)) = (state.head.as_mut(), head_grads.as_ref()) {
        state.optimizer.apply(1, head, g);
    }
    state.step += 1;
    Ok(report)
}

fn check_finite(step: usize, loss: &LossBreakdown, t: Option<f64>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        step,
        detail: format!(
            "total {} supervised {} unsupervised {} kl {} alpha {} sampled_T {}",
            loss.total,
            loss.supervised,
            loss.unsupervised,
            loss.kl,
            loss.alpha_effective,
            t.map_or("n/a".to_string(), |t| t.to_string())
        ),
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_kl: f64,
    pub alpha_eff: f64,
    #[serde(rename = "sampled_T")]
    pub sampled_t: Option<f64>,
    pub val_iou: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricsRow {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        MetricsRow {
            wall_time_s: 0.0,
            ..self.clone()
        } == MetricsRow {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub history: Vec<MetricsRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains on `split` and writes metrics and checkpoints into `out_dir`.
pub fn fit(config: &TrainConfig, split: &DatasetSplit, out_dir: &Path) -> Result<FitOutcome> {
    config.validate()?;
    let first = split
        .labelled
        .first()
        .ok_or_else(|| Error::InsufficientData("labelled pool is empty".into()))?;
    let shape = DataShape::of(first)?;
    let mut stream = BatchStream::new(split, config.labelled_bs, config.ratio, config.seed)?;
    fit_with_source(config, shape, &mut stream, &split.validation, out_dir)
}

/// As [`fit`] with an arbitrary batch source. Supervised mode never asks the
/// source for unlabelled data.
pub fn fit_with_source(
    config: &TrainConfig,
    shape: DataShape,
    source: &mut dyn BatchSource,
    validation: &[Sample],
    out_dir: &Path,
) -> Result<FitOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let best_checkpoint = out_dir.join(BEST_CHECKPOINT);
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    let mut writer = csv::Writer::from_path(&metrics_path)?;
    let mut state = TrainState::new(config, shape)?;
    let mut history = Vec::with_capacity(config.steps);
    let start = Instant::now();

    for _ in 0..config.steps {
        let labelled = source.labelled_batch()?;
        let unlabelled = if config.mode.uses_unlabelled() {
            Some(source.unlabelled_batch()?)
        } else {
            None
        };
        let report = match train_step(&mut state, &labelled, unlabelled.as_ref(), config) {
            Ok(r) => r,
            Err(e) => {
                writer.flush()?;
                if let Error::NonFinite { step, detail } = &e {
                    let dump = serde_json::json!({ "step": step, "detail": detail });
                    fs::write(out_dir.join("diagnostic.json"), serde_json::to_string_pretty(&dump)?)?;
                }
                return Err(e);
            }
        };
        let due = state.step == config.steps || (config.eval_every > 0 && state.step % config.eval_every == 0);
        let val_iou = if due && !validation.is_empty() {
            let v = mean_std(&per_image_iou(&state.model, validation)?).0;
            if v > state.best_val_iou {
                state.best_val_iou = v;
                save_checkpoint(&best_checkpoint, &state, config)?;
            }
            Some(v)
        } else {
            None
        };
        let row = MetricsRow {
            step: state.step,
            loss_total: report.loss.total,
            loss_sup: report.loss.supervised,
            loss_unsup: report.loss.unsupervised,
            loss_kl: report.loss.kl,
            alpha_eff: report.loss.alpha_effective,
            sampled_t: report.sampled_threshold,
            val_iou,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        writer.serialize(&row)?;
        writer.flush()?;
        history.push(row);
    }
    save_checkpoint(&final_checkpoint, &state, config)?;
    if !best_checkpoint.exists() {
        save_checkpoint(&best_checkpoint, &state, config)?;
    }
    Ok(FitOutcome {
        state,
        metrics_path,
        best_checkpoint,
        final_checkpoint,
        history,
    })
}
