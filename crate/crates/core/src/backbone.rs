//! Encoder-decoder segmentation network with per-channel sigmoid outputs.
//!
//! Each stage is `(3x3 conv -> group norm -> ReLU) x 2`. The encoder halves
//! resolution with 2x max pooling; the decoder applies a 3x3 conv at the
//! coarse resolution, upsamples by nearest neighbour and concatenates the
//! matching encoder skip before its stage. A final 1x1 conv gives logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, max_pool2, max_pool2_backward, relu_backward, relu_inplace, sigmoid, upsample_nearest2,
    upsample_nearest2_backward, Conv, GroupNorm, Module, NormCache, Param, PoolCache,
};
use crate::scalar::Scalar;
use crate::tensor::{cat_channels, split_channels, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// 2 for slices, 3 for volumes.
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels in the first encoder stage; doubles at every down-sampling.
    pub base_width: usize,
    /// Number of down-samplings.
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            spatial_rank: 2,
            in_channels: 1,
            out_channels: 1,
            base_width: 8,
            depth: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.spatial_rank, 2 | 3) {
            return Err(Error::invalid("spatial_rank", format!("{} (expected 2 or 3)", self.spatial_rank)));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_width", self.base_width),
            ("depth", self.depth),
        ] {
            if v == 0 {
                return Err(Error::invalid("backbone config", format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Channels at encoder level `level` (level `depth` is the bottleneck).
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width_at(self.depth)
    }

    fn kernel3(&self) -> [usize; 3] {
        if self.spatial_rank == 3 {
            [3, 3, 3]
        } else {
            [1, 3, 3]
        }
    }

    fn is_volumetric(&self) -> bool {
        self.spatial_rank == 3
    }

    /// Checks a `[batch, channels, depth, height, width]` input shape.
    pub fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        let [n, c, d, h, w] = shape;
        if n == 0 {
            return Err(Error::shape("backbone input", "empty batch"));
        }
        if c != self.in_channels {
            return Err(Error::shape(
                "backbone input",
                format!("channel dimension is {c}, config expects {}", self.in_channels),
            ));
        }
        let factor = 1usize << self.depth;
        let mut dims = vec![("height", h), ("width", w)];
        if self.is_volumetric() {
            dims.insert(0, ("depth", d));
        } else if d != 1 {
            return Err(Error::shape(
                "backbone input",
                format!("depth dimension is {d}, a 2-D backbone expects 1"),
            ));
        }
        for (name, v) in dims {
            if v == 0 || v % factor != 0 {
                return Err(Error::shape(
                    "backbone input",
                    format!("{name} dimension {v} is not divisible by 2^depth = {factor}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    pub probabilities: Tensor<T>,
    pub logits: Tensor<T>,
    pub bottleneck_features: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock<T> {
    conv: Conv<T>,
    norm: GroupNorm<T>,
}

struct BlockCache<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    output: Tensor<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(cin: usize, cout: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv::new(cin, cout, kernel, rng),
            norm: GroupNorm::new(cout),
        }
    }

    fn forward(&self, x: Tensor<T>) -> BlockCache<T> {
        let y = self.conv.forward(&x);
        let (mut z, norm) = self.norm.forward(&y);
        relu_inplace(&mut z);
        BlockCache { input: x, norm, output: z }
    }

    fn backward(&self, cache: &BlockCache<T>, mut dy: Tensor<T>, grads: Option<&mut Self>, need_input_grad: bool) -> Option<Tensor<T>> {
        relu_backward(&cache.output, &mut dy);
        let (gconv, gnorm) = match grads {
            Some(g) => (Some(&mut g.conv), Some(&mut g.norm)),
            None => (None, None),
        };
        let dz = self.norm.backward(&cache.norm, &dy, gnorm);
        self.conv.backward(&cache.input, &dz, gconv, need_input_grad)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage<T> {
    first: ConvBlock<T>,
    second: ConvBlock<T>,
}

struct StageCache<T> {
    first: BlockCache<T>,
    second: BlockCache<T>,
}

impl<T> StageCache<T> {
    fn output(&self) -> &Tensor<T> {
        &self.second.output
    }
}

impl<T: Scalar> Stage<T> {
    fn new(cin: usize, cout: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        Stage {
            first: ConvBlock::new(cin, cout, kernel, rng),
            second: ConvBlock::new(cout, cout, kernel, rng),
        }
    }

    fn forward(&self, x: Tensor<T>) -> StageCache<T> {
        let first = self.first.forward(x);
        let second = self.second.forward(first.output.clone());
        StageCache { first, second }
    }

    fn backward(&self, cache: &StageCache<T>, dy: Tensor<T>, grads: Option<&mut Self>, need_input_grad: bool) -> Option<Tensor<T>> {
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.first), Some(&mut g.second)),
            None => (None, None),
        };
        let d_mid = self
            .second
            .backward(&cache.second, dy, g2, true)
            .expect("input gradient requested");
        self.first.backward(&cache.first, d_mid, g1, need_input_grad)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.first.visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    encoder: Vec<Stage<T>>,
    up: Vec<Conv<T>>,
    decoder: Vec<Stage<T>>,
    head: Conv<T>,
}

/// Activations retained by [`Backbone::forward_with_tape`] for the backward pass.
pub struct BackboneTape<T> {
    encoder: Vec<StageCache<T>>,
    pools: Vec<PoolCache>,
    decoder: Vec<Option<StageCache<T>>>,
    head_input: Tensor<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k3 = config.kernel3();
        let encoder = (0..=config.depth)
            .map(|level| {
                let cin = if level == 0 { config.in_channels } else { config.width_at(level - 1) };
                Stage::new(cin, config.width_at(level), k3, rng)
            })
            .collect();
        let up = (0..config.depth)
            .map(|level| Conv::new(config.width_at(level + 1), config.width_at(level), k3, rng))
            .collect();
        let decoder = (0..config.depth)
            .map(|level| Stage::new(2 * config.width_at(level), config.width_at(level), k3, rng))
            .collect();
        let head = Conv::new(config.base_width, config.out_channels, [1, 1, 1], rng);
        Ok(Backbone {
            config,
            encoder,
            up,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardResult<T>> {
        self.forward_with_tape(images).map(|(r, _)| r)
    }

    pub fn forward_with_tape(&self, images: &Tensor<T>) -> Result<(ForwardResult<T>, BackboneTape<T>)> {
        self.config.check_input(images.shape())?;
        let depth = self.config.depth;
        let vol = self.config.is_volumetric();
        let mut encoder: Vec<StageCache<T>> = Vec::with_capacity(depth + 1);
        let mut pools = Vec::with_capacity(depth);
        for (level, stage) in self.encoder.iter().enumerate() {
            let input = if level == 0 {
                images.clone()
            } else {
                let (p, cache) = max_pool2(encoder[level - 1].output(), vol);
                pools.push(cache);
                p
            };
            encoder.push(stage.forward(input));
        }
        let bottleneck_features = encoder[depth].output().clone();
        let mut decoder: Vec<Option<StageCache<T>>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let coarse = if level + 1 == depth {
                &bottleneck_features
            } else {
                decoder[level + 1].as_ref().expect("coarser level computed").output()
            };
            let up = upsample_nearest2(&self.up[level].forward(coarse), vol);
            let merged = cat_channels(encoder[level].output(), &up);
            decoder[level] = Some(self.decoder[level].forward(merged));
        }
        let head_input = decoder[0].as_ref().expect("finest level computed").output().clone();
        let logits = self.head.forward(&head_input);
        let probabilities = logits.map(sigmoid);
        Ok((
            ForwardResult {
                probabilities,
                logits,
                bottleneck_features,
            },
            BackboneTape {
                encoder,
                pools,
                decoder,
                head_input,
            },
        ))
    }

    /// Back-propagates `d_logits` (and an optional gradient arriving at the
    /// bottleneck features) through the network.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned when `need_input_grad` is set.
    pub fn backward(
        &self,
        tape: &BackboneTape<T>,
        d_logits: &Tensor<T>,
        d_bottleneck: Option<&Tensor<T>>,
        mut grads: Option<&mut Self>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let depth = self.config.depth;
        let vol = self.config.is_volumetric();
        let mut d_cur = self
            .head
            .backward(&tape.head_input, d_logits, grads.as_deref_mut().map(|g| &mut g.head), true)
            .expect("input gradient requested");
        let mut d_skips = Vec::with_capacity(depth);
        for level in 0..depth {
            let cache = tape.decoder[level].as_ref().expect("decoder cache");
            let d_merged = self.decoder[level]
                .backward(cache, d_cur, grads.as_deref_mut().map(|g| &mut g.decoder[level]), true)
                .expect("input gradient requested");
            let (d_skip, d_up) = split_channels(&d_merged, self.config.width_at(level));
            d_skips.push(d_skip);
            let d_up = upsample_nearest2_backward(&d_up, vol);
            let coarse = if level + 1 == depth {
                tape.encoder[depth].output()
            } else {
                tape.decoder[level + 1].as_ref().expect("decoder cache").output()
            };
            d_cur = self.up[level]
                .backward(coarse, &d_up, grads.as_deref_mut().map(|g| &mut g.up[level]), true)
                .expect("input gradient requested");
        }
        if let Some(extra) = d_bottleneck {
            for (a, b) in d_cur.data_mut().iter_mut().zip(extra.data()) {
                *a += *b;
            }
        }
        for level in (0..=depth).rev() {
            let want_input = level > 0 || need_input_grad;
            let d_in = self.encoder[level].backward(
                &tape.encoder[level],
                d_cur,
                grads.as_deref_mut().map(|g| &mut g.encoder[level]),
                want_input,
            );
            if level == 0 {
                return d_in;
            }
            let mut d_prev = max_pool2_backward(&tape.pools[level - 1], &d_in.expect("input gradient requested"));
            for (a, b) in d_prev.data_mut().iter_mut().zip(d_skips[level - 1].data()) {
                *a += *b;
            }
            d_cur = d_prev;
        }
        unreachable!("encoder loop returns at level 0")
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (i, s) in self.encoder.iter().enumerate() {
            s.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, c) in self.up.iter().enumerate() {
            c.visit(&join(prefix, &format!("up.{i}")), f);
        }
        for (i, s) in self.decoder.iter().enumerate() {
            s.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, s) in self.encoder.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("up.{i}")), f);
        }
        for (i, s) in self.decoder.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
