//! Merge modules, two-stage bottom-up propagation and the full segmentation network.

use crate::backbone::{Backbone, FeaturePyramid, NetworkSpec, NUM_SCALES};
use crate::data::LabelMap;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{bilinear_resize, concat_channels, BatchNorm2d, Conv2d, Ctx, ResidualBlock};
use crate::tensor::{ops, ParamStore, Real, Tape, Tensor, Var};

/// Upsample the coarser map to the finer one, concatenate `[low, high]`, then convolve.
///
/// Feature merges follow the convolution with batch norm and ReLU; logit merges are a
/// plain convolution with bias.
#[derive(Clone, Debug)]
pub struct MergeModule {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub low_channels: usize,
    pub high_channels: usize,
    pub out_channels: usize,
}

impl MergeModule {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        low: usize,
        high: usize,
        out: usize,
        kernel: usize,
        normalized: bool,
        seed: u64,
    ) -> Self {
        let conv = Conv2d::same(store, &format!("{name}.conv"), low + high, out, kernel, !normalized, seed);
        let bn = normalized.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), out));
        Self { conv, bn, low_channels: low, high_channels: high, out_channels: out }
    }

    pub fn features<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        low: usize,
        high: usize,
        out: usize,
        kernel: usize,
        seed: u64,
    ) -> Self {
        Self::build(store, name, low, high, out, kernel, true, seed)
    }

    pub fn logits<T: Real>(store: &mut ParamStore<T>, name: &str, classes: usize, kernel: usize, seed: u64) -> Self {
        Self::build(store, name, classes, classes, classes, kernel, false, seed)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, low: Var, high: Var) -> Result<Var> {
        let (ls, hs) = (cx.tape.shape(low).to_vec(), cx.tape.shape(high).to_vec());
        if ls.len() != 4 || hs.len() != 4 {
            return Err(shape_err!("merge expects rank-4 maps, got {ls:?} and {hs:?}"));
        }
        if ls[0] != hs[0] {
            return Err(shape_err!("merge batch mismatch: {} vs {}", ls[0], hs[0]));
        }
        if ls[1] != self.low_channels || hs[1] != self.high_channels {
            return Err(shape_err!(
                "merge built for {}+{} channels, got {}+{}",
                self.low_channels,
                self.high_channels,
                ls[1],
                hs[1]
            ));
        }
        let up = if ls[2..] == hs[2..] { low } else { bilinear_resize(cx.tape, low, hs[2], hs[3])? };
        let cat = concat_channels(cx.tape, up, high)?;
        let y = self.conv.forward(cx, cat)?;
        match &self.bn {
            Some(bn) => {
                let y = bn.forward(cx, y)?;
                Ok(ops::relu(cx.tape, y))
            }
            None => Ok(y),
        }
    }
}

/// Bottom-up propagation over `maps` ordered finest first.
///
/// Merges the two coarsest maps, then folds in each finer map in turn. Returns the
/// merged maps coarse to fine; the last one has the finest resolution.
pub fn bottom_up_with<F>(maps: &[Var], mut merge: F) -> Result<Vec<Var>>
where
    F: FnMut(usize, Var, Var) -> Result<Var>,
{
    if maps.len() < 2 {
        return Err(invalid!("bottom-up propagation needs at least 2 maps, got {}", maps.len()));
    }
    let mut out = Vec::with_capacity(maps.len() - 1);
    let mut low = maps[maps.len() - 1];
    for i in (0..maps.len() - 1).rev() {
        low = merge(i, low, maps[i])?;
        out.push(low);
    }
    Ok(out)
}

/// [`bottom_up_with`] using `merges[i]` to fold in `maps[i]`.
pub fn bottom_up_propagate<T: Real>(cx: &mut Ctx<'_, T>, maps: &[Var], merges: &[MergeModule]) -> Result<Vec<Var>> {
    if merges.len() + 1 != maps.len() {
        return Err(invalid!("{} maps need {} merges, got {}", maps.len(), maps.len().saturating_sub(1), merges.len()));
    }
    bottom_up_with(maps, |i, low, high| merges[i].forward(cx, low, high))
}

/// Residual refinement of one scale followed by a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct RefineBranch {
    pub blocks: Vec<ResidualBlock>,
    pub classifier: Conv2d,
}

impl RefineBranch {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        blocks: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        let blocks =
            (0..blocks).map(|i| ResidualBlock::new(store, &format!("{name}.b{i}"), channels, channels, 1, seed)).collect();
        let classifier = Conv2d::new(store, &format!("{name}.cls"), channels, classes, 1, 1, 0, true, seed);
        Self { blocks, classifier }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(cx, h)?;
        }
        self.classifier.forward(cx, h)
    }
}

/// Both propagation stages with the per-scale refinement in between.
///
/// `stage1[i]`, `refine[i]` and `stage2[i]` belong to scale `i + 1`.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub stage1: Vec<MergeModule>,
    pub refine: Vec<RefineBranch>,
    pub stage2: Vec<MergeModule>,
}

/// Network outputs: the fused full-resolution logits and the six per-scale logit maps, coarse to fine.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub final_logits: Var,
    pub scale_logits: Vec<Var>,
}

impl SegHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &NetworkSpec, seed: u64) -> Self {
        let ch = spec.channels();
        let k = spec.num_classes;
        let stage1 = (0..NUM_SCALES - 1)
            .map(|i| {
                MergeModule::features(store, &format!("head.merge1.s{}", i + 1), ch[i + 1], ch[i], ch[i], spec.merge_kernel, seed)
            })
            .collect();
        let refine = (0..NUM_SCALES)
            .map(|i| RefineBranch::new(store, &format!("head.refine.s{}", i + 1), ch[i], spec.head_blocks_per_scale, k, seed))
            .collect();
        let stage2 = (0..NUM_SCALES - 1)
            .map(|i| MergeModule::logits(store, &format!("head.merge2.s{}", i + 1), k, spec.merge_kernel, seed))
            .collect();
        Self { stage1, refine, stage2 }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, pyramid: &FeaturePyramid) -> Result<SegOutput> {
        let maps = &pyramid.maps;
        // coarse to fine: m5..m1
        let merged = bottom_up_propagate(cx, maps, &self.stage1)?;
        let mut per_scale = vec![maps[NUM_SCALES - 1]];
        per_scale.extend(merged);
        let mut scale_logits = Vec::with_capacity(NUM_SCALES);
        for (j, &f) in per_scale.iter().enumerate() {
            scale_logits.push(self.refine[NUM_SCALES - 1 - j].forward(cx, f)?);
        }
        let fine_first: Vec<Var> = scale_logits.iter().rev().copied().collect();
        let fused = bottom_up_propagate(cx, &fine_first, &self.stage2)?;
        Ok(SegOutput { final_logits: *fused.last().expect("five merges"), scale_logits })
    }
}

/// Backbone plus segmentation head with its own parameters.
#[derive(Clone, Debug)]
pub struct SegNet<T: Real = f32> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: SegHead,
}

impl<T: Real> SegNet<T> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.num_classes >= crate::data::IGNORE as usize {
            return Err(invalid!("segmentation supports at most 254 classes, got {}", spec.num_classes));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, spec, seed)?;
        let head = SegHead::new(&mut store, spec, seed);
        Ok(Self { spec: spec.clone(), store, backbone, head })
    }

    pub fn forward_ctx(backbone: &Backbone, head: &SegHead, cx: &mut Ctx<'_, T>, x: Var) -> Result<SegOutput> {
        let pyramid = backbone.forward(cx, x)?;
        head.forward(cx, &pyramid)
    }

    /// Forward pass with batch statistics; updates batch-norm running statistics.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: Var) -> Result<SegOutput> {
        let mut cx = Ctx::train(tape, &mut self.store);
        Self::forward_ctx(&self.backbone, &self.head, &mut cx, x)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<SegOutput> {
        let mut cx = Ctx::eval(tape, &self.store);
        Self::forward_ctx(&self.backbone, &self.head, &mut cx, x)
    }

    /// Evaluation-mode final logits `[N, K, H, W]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.forward_eval(&mut tape, x)?;
        Ok(tape.tensor(out.final_logits))
    }

    /// Per-pixel arg-max label maps, one per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<LabelMap>> {
        argmax_channels(&self.logits(images)?)
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}

/// Channel arg-max of `[N, C, H, W]` scores; ties go to the lowest class index.
pub fn argmax_channels<T: Real>(scores: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let s = scores.shape();
    if s.len() != 4 || s[1] == 0 || s[1] > 255 {
        return Err(shape_err!("expected [N, C, H, W] scores with 1..=255 channels, got {s:?}"));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    Ok(scores
        .data()
        .chunks_exact(c * plane)
        .map(|img| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if img[ch * plane + p] > img[best * plane + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::from_vec(h, w, data).expect("argmax label size")
        })
        .collect())
}
