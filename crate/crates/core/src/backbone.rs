//! Six-scale residual classifier network.
//!
//! Scale 1 runs at full input resolution; each of scales 2–6 halves the
//! resolution in its first block. The outputs of all six scales form a
//! [`FeaturePyramid`]. The default widths and block counts are
//! `[50, 75, 125, 200, 320, 450]` channels and `[1, 1, 2, 4, 4, 4]` blocks.

use sha2::{Digest, Sha256};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{global_avg_pool, BatchNorm2d, Conv2d, Ctx, Linear, ResidualBlock};
use crate::tensor::{ops, ParamStore, Real, Tape, Tensor, Var};

pub const NUM_SCALES: usize = 6;
/// Total downsampling factor of the coarsest scale.
pub const INPUT_MULTIPLE: usize = 1 << (NUM_SCALES - 1);

pub const DEFAULT_CHANNELS: [usize; NUM_SCALES] = [50, 75, 125, 200, 320, 450];
pub const DEFAULT_BLOCKS: [usize; NUM_SCALES] = [1, 1, 2, 4, 4, 4];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    /// 1-based scale index.
    pub scale_index: usize,
    pub num_blocks: usize,
    pub channels: usize,
}

impl ScaleSpec {
    pub fn output_divisor(&self) -> usize {
        1 << (self.scale_index - 1)
    }
}

/// Full description of the network graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub scales: Vec<ScaleSpec>,
    pub num_classes: usize,
    pub head_blocks_per_scale: usize,
    pub merge_kernel: usize,
    pub aux_supervision: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::from_widths(DEFAULT_CHANNELS, DEFAULT_BLOCKS, 19)
    }
}

impl NetworkSpec {
    pub fn from_widths(channels: [usize; NUM_SCALES], blocks: [usize; NUM_SCALES], num_classes: usize) -> Self {
        Self {
            scales: (0..NUM_SCALES)
                .map(|i| ScaleSpec { scale_index: i + 1, num_blocks: blocks[i], channels: channels[i] })
                .collect(),
            num_classes,
            head_blocks_per_scale: 2,
            merge_kernel: 3,
            aux_supervision: false,
        }
    }

    /// Gradient-check network: channels `[4, 6, 8, 10, 12, 14]`.
    pub fn tiny(num_classes: usize) -> Self {
        Self::from_widths([4, 6, 8, 10, 12, 14], DEFAULT_BLOCKS, num_classes)
    }

    /// Desk-scale training network: channels `[8, 12, 16, 24, 32, 48]`, one head block per scale.
    pub fn desk(num_classes: usize) -> Self {
        Self { head_blocks_per_scale: 1, ..Self::from_widths([8, 12, 16, 24, 32, 48], DEFAULT_BLOCKS, num_classes) }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.channels).collect()
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.num_blocks).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != NUM_SCALES {
            return Err(invalid!("network needs exactly {NUM_SCALES} scales, got {}", self.scales.len()));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.scale_index != i + 1 {
                return Err(invalid!("scale {} listed at position {}", s.scale_index, i + 1));
            }
            if s.num_blocks == 0 || s.channels == 0 {
                return Err(invalid!("scale {} needs at least one block and one channel", s.scale_index));
            }
        }
        if self.scales.windows(2).any(|w| w[1].channels <= w[0].channels) {
            return Err(invalid!("channels must be strictly increasing, got {:?}", self.channels()));
        }
        if self.num_classes == 0 {
            return Err(invalid!("num_classes must be positive"));
        }
        if self.head_blocks_per_scale == 0 {
            return Err(invalid!("head_blocks_per_scale must be positive"));
        }
        if !matches!(self.merge_kernel, 1 | 3) {
            return Err(invalid!("merge_kernel must be 1 or 3, got {}", self.merge_kernel));
        }
        Ok(())
    }

    /// SHA-256 of the structural fields (everything that determines parameter shapes).
    pub fn digest(&self) -> [u8; 32] {
        let canon = format!(
            "blocks={:?};channels={:?};classes={};head_blocks={};merge_kernel={}",
            self.blocks(),
            self.channels(),
            self.num_classes,
            self.head_blocks_per_scale,
            self.merge_kernel
        );
        Sha256::digest(canon.as_bytes()).into()
    }
}

/// Checks an image batch `[N, 3, H, W]` with `H` and `W` multiples of 32.
pub fn validate_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(shape_err!("expected an image batch [N, 3, H, W], got {shape:?}"));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(invalid!(
            "input size {h}x{w} is not divisible by {INPUT_MULTIPLE}: height and width must be multiples of {INPUT_MULTIPLE}"
        ));
    }
    Ok(())
}

/// Feature maps of scales 1..=6, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    /// Residual blocks per scale; the first block of scales 2–6 has stride 2.
    pub scales: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let ch = spec.channels();
        let stem = Conv2d::same(store, "backbone.stem", 3, ch[0], 3, false, seed);
        let stem_bn = BatchNorm2d::new(store, "backbone.stem_bn", ch[0]);
        let mut prev = ch[0];
        let mut scales = Vec::with_capacity(NUM_SCALES);
        for (s, scale) in spec.scales.iter().enumerate() {
            let blocks = (0..scale.num_blocks)
                .map(|i| {
                    let stride = if i == 0 && s > 0 { 2 } else { 1 };
                    let cin = if i == 0 { prev } else { scale.channels };
                    ResidualBlock::new(store, &format!("backbone.s{}.b{i}", s + 1), cin, scale.channels, stride, seed)
                })
                .collect();
            scales.push(blocks);
            prev = scale.channels;
        }
        Ok(Self { stem, stem_bn, scales })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<FeaturePyramid> {
        validate_input(cx.tape.shape(x))?;
        let h = self.stem.forward(cx, x)?;
        let h = self.stem_bn.forward(cx, h)?;
        let mut h = ops::relu(cx.tape, h);
        let mut maps = Vec::with_capacity(NUM_SCALES);
        for blocks in &self.scales {
            for block in blocks {
                h = block.forward(cx, h)?;
            }
            maps.push(h);
        }
        Ok(FeaturePyramid { maps })
    }
}

/// Backbone with its own parameters.
#[derive(Clone, Debug)]
pub struct BackboneModel<T: Real = f32> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
}

impl<T: Real> BackboneModel<T> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, spec, seed)?;
        Ok(Self { spec: spec.clone(), store, backbone })
    }

    /// Evaluation-mode pyramid as standalone tensors.
    pub fn pyramid(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let p = self.backbone.forward(&mut Ctx::eval(&mut tape, &self.store), x)?;
        Ok(p.maps.iter().map(|&m| tape.tensor(m)).collect())
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}

/// Backbone plus global-average-pool and linear classifier, used for classification pretraining.
#[derive(Clone, Debug)]
pub struct Classifier<T: Real = f32> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Linear,
}

impl<T: Real> Classifier<T> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, spec, seed)?;
        let top = spec.scales[NUM_SCALES - 1].channels;
        let head = Linear::new(&mut store, "cls_head", top, spec.num_classes, seed);
        Ok(Self { spec: spec.clone(), store, backbone, head })
    }

    /// Logits `[N, K]` recorded on the context's tape.
    pub fn forward_ctx(backbone: &Backbone, head: &Linear, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pyramid = backbone.forward(cx, x)?;
        let pooled = global_avg_pool(cx.tape, pyramid.maps[NUM_SCALES - 1])?;
        head.forward(cx, pooled)
    }

    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut cx = Ctx::train(tape, &mut self.store);
        Self::forward_ctx(&self.backbone, &self.head, &mut cx, x)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut cx = Ctx::eval(tape, &self.store);
        Self::forward_ctx(&self.backbone, &self.head, &mut cx, x)
    }

    /// Evaluation-mode logits `[N, K]`.
    pub fn classify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let y = self.forward_eval(&mut tape, x)?;
        Ok(tape.tensor(y))
    }

    /// Arg-max class per image, ties to the lowest index.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.classify(images)?;
        let k = self.spec.num_classes;
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}
