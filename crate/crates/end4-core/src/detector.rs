//! Feature backbone, scale-aware pyramid fusion, and the binary classifier.
//!
//! Both the original image and its one-step reconstruction pass through one
//! shared convolutional backbone. The two feature maps then go through two
//! serial pyramid layers (windowed multi-head self-attention, dilated
//! residual conv blocks, learned positional encoding) whose window and
//! dilation sizes differ, get stacked along the token axis, self-attended,
//! and fused by bidirectional multi-head cross-attention. A single fully
//! connected layer on the pooled fused vector emits the forgery probability.
//!
//! Two baseline fusion paths (plain concatenation of pooled features and the
//! pooled absolute difference) are selectable for ablations.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, LayerNorm, Linear, MultiHeadAttention, ParamBuilder, ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Spfm,
    Concatenation,
    AbsoluteDifference,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Stem output channels; doubles per stage up to `out_channels`.
    pub width: usize,
    /// Stride-2 stages after the stride-2 stem.
    pub stages: usize,
    /// Channels at the feature tap.
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            width: 32,
            stages: 4,
            out_channels: 256,
        }
    }
}

impl BackboneConfig {
    /// Stages such that `input_side` maps to an 8x8 feature map.
    pub fn for_input_side(input_side: usize, width: usize, out_channels: usize) -> Result<Self> {
        let mut stride = input_side / 8;
        if stride * 8 != input_side || !stride.is_power_of_two() || stride < 2 {
            return Err(Error::InvalidParameter(format!(
                "input side {input_side} cannot map to an 8x8 feature map by stride-2 stages"
            )));
        }
        let mut stages = 0;
        while stride > 2 {
            stride /= 2;
            stages += 1;
        }
        Ok(BackboneConfig {
            width,
            stages,
            out_channels,
        })
    }

    pub fn total_stride(&self) -> usize {
        1 << (self.stages + 1)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpfmConfig {
    /// Scale parameters of the two pyramid layers: window side is `2*size`,
    /// conv dilation is `size`.
    pub sizes: [usize; 2],
    pub heads: usize,
    pub fusion_mode: FusionMode,
}

impl Default for SpfmConfig {
    fn default() -> Self {
        SpfmConfig {
            sizes: [2, 4],
            heads: 4,
            fusion_mode: FusionMode::Spfm,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub input_side: usize,
    pub backbone: BackboneConfig,
    pub spfm: SpfmConfig,
}

impl DetectorConfig {
    pub fn for_input_side(input_side: usize) -> Result<Self> {
        Ok(DetectorConfig {
            input_side,
            backbone: BackboneConfig::for_input_side(input_side, 32, 256)?,
            spfm: SpfmConfig::default(),
        })
    }

    pub fn feature_side(&self) -> usize {
        self.input_side / self.backbone.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.backbone.out_channels;
        if self.backbone.width == 0 || c == 0 {
            return Err(Error::InvalidParameter("backbone widths must be positive".into()));
        }
        if c % 8 != 0 {
            return Err(Error::InvalidParameter(
                "feature channels must be a multiple of 8".into(),
            ));
        }
        if self.input_side % self.backbone.total_stride() != 0 {
            return Err(Error::InvalidParameter(format!(
                "input side {} not divisible by backbone stride {}",
                self.input_side,
                self.backbone.total_stride()
            )));
        }
        let fs = self.feature_side();
        if c % self.spfm.heads != 0 {
            return Err(Error::InvalidParameter(
                "attention heads must divide feature channels".into(),
            ));
        }
        for size in self.spfm.sizes {
            let win = 2 * size;
            if win == 0 || fs % win != 0 {
                return Err(Error::InvalidParameter(format!(
                    "window side {win} must divide the {fs}x{fs} feature map"
                )));
            }
        }
        Ok(())
    }

    /// Length of the fused feature vector fed to the classifier.
    pub fn fused_len(&self) -> usize {
        match self.spfm.fusion_mode {
            FusionMode::Spfm | FusionMode::Concatenation => 2 * self.backbone.out_channels,
            FusionMode::AbsoluteDifference => self.backbone.out_channels,
        }
    }
}

/// Residual conv block without time conditioning, used by the backbone.
struct ResConvBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResConvBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        ResConvBlock {
            norm1: GroupNorm::new(pb, &format!("{name}.norm1"), channels, groups_for(channels)),
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), channels, channels, 3, 1, 1, 1),
            norm2: GroupNorm::new(pb, &format!("{name}.norm2"), channels, groups_for(channels)),
            conv2: Conv2d::new_zero(pb, &format!("{name}.conv2"), channels, channels, 3, 1, 1, 1),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let h = self.norm1.forward(tape, params, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, params, h);
        let h = self.norm2.forward(tape, params, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, params, h);
        tape.add(x, h)
    }
}

fn groups_for(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else {
        1
    }
}

struct BackboneStage {
    down: Conv2d,
    norm: GroupNorm,
    res: ResConvBlock,
}

/// Strided residual CNN shared by both input streams.
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<BackboneStage>,
    proj: Conv2d,
    proj_norm: GroupNorm,
}

impl Backbone {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        config: BackboneConfig,
    ) -> Self {
        let stem = Conv2d::new(pb, &format!("{prefix}.stem"), 3, config.width, 3, 2, 1, 1);
        let stem_norm = GroupNorm::new(
            pb,
            &format!("{prefix}.stem_norm"),
            config.width,
            groups_for(config.width),
        );
        let mut stages = Vec::new();
        let mut c = config.width;
        for i in 0..config.stages {
            let c_next = (2 * c).min(config.out_channels);
            stages.push(BackboneStage {
                down: Conv2d::new(pb, &format!("{prefix}.stage{i}.down"), c, c_next, 3, 2, 1, 1),
                norm: GroupNorm::new(
                    pb,
                    &format!("{prefix}.stage{i}.norm"),
                    c_next,
                    groups_for(c_next),
                ),
                res: ResConvBlock::new(pb, &format!("{prefix}.stage{i}.res"), c_next),
            });
            c = c_next;
        }
        let proj = Conv2d::new(pb, &format!("{prefix}.proj"), c, config.out_channels, 1, 1, 0, 1);
        let proj_norm = GroupNorm::new(
            pb,
            &format!("{prefix}.proj_norm"),
            config.out_channels,
            groups_for(config.out_channels),
        );
        Backbone {
            config,
            stem,
            stem_norm,
            stages,
            proj,
            proj_norm,
        }
    }

    /// `[3, S, S]` -> `[out_channels, S/stride, S/stride]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, image: Var) -> Var {
        let mut h = self.stem.forward(tape, params, image);
        h = self.stem_norm.forward(tape, params, h);
        h = tape.silu(h);
        for stage in &self.stages {
            h = stage.down.forward(tape, params, h);
            h = stage.norm.forward(tape, params, h);
            h = tape.silu(h);
            h = stage.res.forward(tape, params, h);
        }
        h = self.proj.forward(tape, params, h);
        h = self.proj_norm.forward(tape, params, h);
        tape.silu(h)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }
}

/// Dilated residual conv block inside a pyramid layer.
struct DilatedBlock {
    norm: GroupNorm,
    conv: Conv2d,
}

impl DilatedBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, dilation: usize) -> Self {
        DilatedBlock {
            norm: GroupNorm::new(pb, &format!("{name}.norm"), channels, groups_for(channels)),
            conv: Conv2d::new_zero(
                pb,
                &format!("{name}.conv"),
                channels,
                channels,
                3,
                1,
                dilation,
                dilation,
            ),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let h = self.norm.forward(tape, params, x);
        let h = tape.silu(h);
        let h = self.conv.forward(tape, params, h);
        tape.add(x, h)
    }
}

/// One scale-aware pyramid layer: windowed multi-head self-attention over
/// non-overlapping `(2*size) x (2*size)` windows, two dilated residual conv
/// blocks (dilation = `size`), then a learned positional encoding.
pub struct PyramidLayer {
    pub size: usize,
    ln: LayerNorm,
    attn: MultiHeadAttention,
    block1: DilatedBlock,
    block2: DilatedBlock,
    pos: ParamId,
    channels: usize,
    feat_side: usize,
}

impl PyramidLayer {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        channels: usize,
        feat_side: usize,
        size: usize,
        heads: usize,
    ) -> Self {
        PyramidLayer {
            size,
            ln: LayerNorm::new(pb, &format!("{prefix}.ln"), channels),
            attn: MultiHeadAttention::new(pb, &format!("{prefix}.attn"), channels, heads, true),
            block1: DilatedBlock::new(pb, &format!("{prefix}.block1"), channels, size),
            block2: DilatedBlock::new(pb, &format!("{prefix}.block2"), channels, size),
            pos: pb.normal(&format!("{prefix}.pos"), &[channels, feat_side, feat_side], 0.02),
            channels,
            feat_side,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, feat: Var) -> Var {
        let sh = tape.shape(feat);
        assert_eq!(sh, vec![self.channels, self.feat_side, self.feat_side]);
        let win = 2 * self.size;
        let per_axis = self.feat_side / win;

        // Windowed residual attention: each window attends only to itself.
        let mut pieces = Vec::new();
        for by in 0..per_axis {
            for bx in 0..per_axis {
                let boxed = tape.slice_spatial(feat, by * win, bx * win, win, win);
                let flat = tape.reshape(boxed, &[self.channels, win * win]);
                let tokens = tape.transpose(flat);
                let normed = self.ln.forward(tape, params, tokens);
                let attended = self.attn.forward(tape, params, normed, normed);
                let tokens = tape.add(tokens, attended);
                let flat = tape.transpose(tokens);
                let spatial = tape.reshape(flat, &[self.channels, win, win]);
                pieces.push(tape.pad_spatial(
                    spatial,
                    by * win,
                    bx * win,
                    self.feat_side,
                    self.feat_side,
                ));
            }
        }
        let mut h = pieces[0];
        for p in &pieces[1..] {
            h = tape.add(h, *p);
        }

        let h = self.block1.forward(tape, params, h);
        let h = self.block2.forward(tape, params, h);
        let pos = tape.param(params, self.pos);
        tape.add(h, pos)
    }
}

/// Stack two same-shape feature maps into a token sequence `[2*H*W, C]`.
pub fn stack_scales<T: Real>(tape: &mut Tape<T>, f1: Var, f2: Var) -> Var {
    let s1 = tape.shape(f1);
    let s2 = tape.shape(f2);
    assert_eq!(s1, s2, "stacked feature maps must share a shape");
    let t1 = to_tokens(tape, f1);
    let t2 = to_tokens(tape, f2);
    tape.concat(&[t1, t2], 0)
}

/// `[C, H, W]` -> `[H*W, C]` token matrix.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, feat: Var) -> Var {
    let sh = tape.shape(feat);
    let flat = tape.reshape(feat, &[sh[0], sh[1] * sh[2]]);
    tape.transpose(flat)
}

/// Inverse of `stack_scales`; test support for the round-trip property.
pub fn unstack_scales<T: Real>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> (Var, Var) {
    let sh = tape.shape(tokens);
    let half = sh[0] / 2;
    let c = sh[1];
    let first = tape.slice(tokens, 0, 0, half);
    let second = tape.slice(tokens, 0, half, half);
    let f1 = tape.transpose(first);
    let f1 = tape.reshape(f1, &[c, h, w]);
    let f2 = tape.transpose(second);
    let f2 = tape.reshape(f2, &[c, h, w]);
    (f1, f2)
}

/// Residual pre-norm self-attention over the stacked tokens.
pub struct SelfAttend {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl SelfAttend {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, prefix: &str, channels: usize, heads: usize) -> Self {
        SelfAttend {
            ln: LayerNorm::new(pb, &format!("{prefix}.ln"), channels),
            attn: MultiHeadAttention::new(pb, &format!("{prefix}.attn"), channels, heads, true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, tokens: Var) -> Var {
        let normed = self.ln.forward(tape, params, tokens);
        let attended = self.attn.forward(tape, params, normed, normed);
        tape.add(tokens, attended)
    }

    /// Per-head attention matrices, for row-stochasticity checks.
    pub fn attention_probs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        tokens: Var,
    ) -> Vec<Var> {
        let normed = self.ln.forward(tape, params, tokens);
        self.attn
            .forward_with_probs(tape, params, normed, normed)
            .1
    }
}

/// Pre-norm multi-head cross-attention; queries from the first argument,
/// keys/values from the second. One weight set serves both directions.
pub struct CrossAttend {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossAttend {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, prefix: &str, channels: usize, heads: usize) -> Self {
        CrossAttend {
            ln_q: LayerNorm::new(pb, &format!("{prefix}.ln_q"), channels),
            ln_kv: LayerNorm::new(pb, &format!("{prefix}.ln_kv"), channels),
            attn: MultiHeadAttention::new(pb, &format!("{prefix}.attn"), channels, heads, false),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, q: Var, kv: Var) -> Var {
        let qn = self.ln_q.forward(tape, params, q);
        let kvn = self.ln_kv.forward(tape, params, kv);
        self.attn.forward(tape, params, qn, kvn)
    }
}

/// The full detection head over one shared backbone.
pub struct Detector {
    pub config: DetectorConfig,
    backbone: Backbone,
    l1: PyramidLayer,
    l2: PyramidLayer,
    self_attn: SelfAttend,
    cross: CrossAttend,
    classifier: Linear,
}

impl Detector {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        config: DetectorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.backbone.out_channels;
        let fs = config.feature_side();
        let heads = config.spfm.heads;
        let backbone = Backbone::build(pb, &format!("{prefix}.backbone"), config.backbone);
        let l1 = PyramidLayer::build(pb, &format!("{prefix}.l1"), c, fs, config.spfm.sizes[0], heads);
        let l2 = PyramidLayer::build(pb, &format!("{prefix}.l2"), c, fs, config.spfm.sizes[1], heads);
        let self_attn = SelfAttend::build(pb, &format!("{prefix}.self"), c, heads);
        let cross = CrossAttend::build(pb, &format!("{prefix}.cross"), c, heads);
        let classifier = Linear::new(pb, &format!("{prefix}.cls"), config.fused_len(), 1);
        Ok(Detector {
            config,
            backbone,
            l1,
            l2,
            self_attn,
            cross,
            classifier,
        })
    }

    /// Backbone features for one image stream.
    pub fn extract_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        image: Var,
    ) -> Var {
        let sh = tape.shape(image);
        assert_eq!(
            sh,
            vec![3, self.config.input_side, self.config.input_side],
            "detector input side mismatch"
        );
        self.backbone.forward(tape, params, image)
    }

    /// Fuse the two feature maps into the classifier input vector.
    pub fn cross_fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        feat: Var,
        feat_hat: Var,
    ) -> Var {
        match self.config.spfm.fusion_mode {
            FusionMode::Spfm => {
                let a1 = self.l1.forward(tape, params, feat);
                let a2 = self.l2.forward(tape, params, a1);
                let b1 = self.l1.forward(tape, params, feat_hat);
                let b2 = self.l2.forward(tape, params, b1);
                let tok_x = stack_scales(tape, a1, a2);
                let tok_xh = stack_scales(tape, b1, b2);
                let xs = self.self_attn.forward(tape, params, tok_x);
                let xhs = self.self_attn.forward(tape, params, tok_xh);
                let fwd = self.cross.forward(tape, params, xs, xhs);
                let rev = self.cross.forward(tape, params, xhs, xs);
                let pooled_fwd = tape.mean_axis0(fwd);
                let pooled_rev = tape.mean_axis0(rev);
                tape.concat(&[pooled_fwd, pooled_rev], 0)
            }
            FusionMode::Concatenation => {
                let pa = pool_spatial(tape, feat);
                let pb = pool_spatial(tape, feat_hat);
                tape.concat(&[pa, pb], 0)
            }
            FusionMode::AbsoluteDifference => {
                let diff = tape.sub(feat, feat_hat);
                let diff = tape.abs(diff);
                pool_spatial(tape, diff)
            }
        }
    }

    /// Single fully connected layer plus sigmoid on the fused vector.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, fused: Var) -> Var {
        let len = tape.shape(fused)[0];
        assert_eq!(len, self.config.fused_len(), "fused vector length mismatch");
        let row = tape.reshape(fused, &[1, len]);
        let logit = self.classifier.forward(tape, params, row);
        let prob = tape.sigmoid(logit);
        tape.reshape(prob, &[1])
    }

    /// Full head: images to (probability, fused feature vector).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x0: Var,
        x0_hat: Var,
    ) -> (Var, Var) {
        let feat = self.extract_features(tape, params, x0);
        let feat_hat = self.extract_features(tape, params, x0_hat);
        let fused = self.cross_fuse(tape, params, feat, feat_hat);
        (self.classify(tape, params, fused), fused)
    }

    pub fn pyramid_l1(&self) -> &PyramidLayer {
        &self.l1
    }

    pub fn pyramid_l2(&self) -> &PyramidLayer {
        &self.l2
    }

    pub fn self_attend(&self) -> &SelfAttend {
        &self.self_attn
    }

    pub fn cross_attend(&self) -> &CrossAttend {
        &self.cross
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }
}

/// Mean over the spatial axes: `[C, H, W]` -> `[C]`.
pub fn pool_spatial<T: Real>(tape: &mut Tape<T>, feat: Var) -> Var {
    let tokens = to_tokens(tape, feat);
    tape.mean_axis0(tokens)
}
