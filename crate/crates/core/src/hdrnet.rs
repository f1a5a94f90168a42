//! Step 2: the dual-decoder HDR network.
//!
//! Three frame encoders (after aligning the short and long frames to the
//! mid frame) feed two decoders: the frozen Step-1 decoder, driven by
//! quantized bottleneck features, and a trainable fidelity decoder, driven by
//! merged quarter-resolution features. Fidelity-decoder stages absorb merged
//! frame context and Step-1 decoder features through residual fusing.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{AdamW, Conv2d, Optimizer, ParamsAdamW, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, batch_tensor, ensure_divisible, load_olc, VqModel, DOWNSAMPLE};
use crate::checkpoint::{self, incompatible, require_file};
use crate::codebook::{straight_through, InputClass};
use crate::datasets::{ExposureStack, PatchSampler, Scene};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::{
    conv, l1, leaky, tonemap_unit, zero_conv, DeformConv2d, ParamStore, PerceptualConfig, PerceptualExtractor,
    ResBlock,
};
use crate::radiometry::{gamma_normalize, DEFAULT_GAMMA, DEFAULT_MU};

pub const WEIGHTS_FILE: &str = "hdr.safetensors";
pub const STEP1_DIR: &str = "step1";
pub const KIND: &str = "hdr";

/// How per-frame features are combined into the context passed to the
/// fidelity decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Reference-frame features only (plain skip connection).
    Reference,
    Sum,
    /// 1×1 convolution over the concatenated frame features.
    Concat,
    /// Frame-selective merging with across-frame channel attention.
    #[default]
    Fsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdrArchConfig {
    pub base_channels: usize,
    pub offset_groups: usize,
    /// One encoder for all three frames instead of one per frame.
    pub shared_encoders: bool,
    pub use_pa: bool,
    pub merge: MergeMode,
    pub use_dvq: bool,
    pub use_rf: bool,
}

impl Default for HdrArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            offset_groups: 8,
            shared_encoders: false,
            use_pa: true,
            merge: MergeMode::Fsm,
            use_dvq: true,
            use_rf: true,
        }
    }
}

impl HdrArchConfig {
    /// Component switches for the rows of the ablation table: 1 baseline,
    /// 2 +PA, 3 +PA+sum, 4 +PA+concat, 5 +PA+FSM, 6 +D_VQ, 7 +RF (full model).
    pub fn ablation(self, row: u8) -> Result<Self> {
        let (use_pa, merge, use_dvq, use_rf) = match row {
            1 => (false, MergeMode::Reference, false, false),
            2 => (true, MergeMode::Reference, false, false),
            3 => (true, MergeMode::Sum, false, false),
            4 => (true, MergeMode::Concat, false, false),
            5 => (true, MergeMode::Fsm, false, false),
            6 => (true, MergeMode::Fsm, true, false),
            7 => (true, MergeMode::Fsm, true, true),
            _ => return Err(invalid(format!("ablation row {row} is not in 1..=7"))),
        };
        Ok(Self {
            use_pa,
            merge,
            use_dvq,
            use_rf,
            ..self
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(invalid("base channel count must be positive"));
        }
        if self.use_pa && (self.offset_groups == 0 || self.base_channels % self.offset_groups != 0) {
            return Err(invalid(format!(
                "{} channels cannot be split into {} offset groups",
                self.base_channels, self.offset_groups
            )));
        }
        Ok(())
    }
}

/// Per-frame network input `[L, L^γ / t]` as `6×H×W` tensors.
pub fn build_inputs(stack: &ExposureStack, gamma: f64, dtype: DType, device: &Device) -> Result<[Tensor; 3]> {
    let mut out = Vec::with_capacity(3);
    for frame in stack.frames() {
        let ldr = frame.image().to_tensor(dtype, device)?;
        let hdr = gamma_normalize(frame, gamma)?.image().to_tensor(dtype, device)?;
        out.push(Tensor::cat(&[ldr, hdr], 0)?);
    }
    Ok(out.try_into().expect("three frames"))
}

/// Batched frame tensors: three `B×6×H×W` tensors.
pub fn input_tensors(stacks: &[&ExposureStack], gamma: f64, dtype: DType, device: &Device) -> Result<[Tensor; 3]> {
    let mut per_frame: [Vec<Tensor>; 3] = Default::default();
    for stack in stacks {
        for (i, t) in build_inputs(stack, gamma, dtype, device)?.into_iter().enumerate() {
            per_frame[i].push(t);
        }
    }
    let [a, b, c] = per_frame;
    Ok([Tensor::stack(&a, 0)?, Tensor::stack(&b, 0)?, Tensor::stack(&c, 0)?])
}

fn ensure_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Two-branch selective kernel: 3×3 and 5×5 responses weighted by a softmax
/// computed from their pooled sum.
#[derive(Debug, Clone)]
struct SelectiveKernel {
    b3: Conv2d,
    b5: Conv2d,
    squeeze: Conv2d,
    select: [Conv2d; 2],
}

impl SelectiveKernel {
    fn new(vb: VarBuilder, c_in: usize, c: usize) -> Result<Self> {
        Ok(Self {
            b3: conv(vb.pp("b3"), c_in, c, 3, 1)?,
            b5: conv(vb.pp("b5"), c_in, c, 5, 1)?,
            squeeze: conv(vb.pp("squeeze"), c, c, 1, 1)?,
            select: [conv(vb.pp("select0"), c, c, 1, 1)?, conv(vb.pp("select1"), c, c, 1, 1)?],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = leaky(&self.b3.forward(x)?)?;
        let b = leaky(&self.b5.forward(x)?)?;
        let pooled = (&a + &b)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let s = leaky(&self.squeeze.forward(&pooled)?)?;
        let logits = Tensor::stack(&[self.select[0].forward(&s)?, self.select[1].forward(&s)?], 0)?;
        let wts = candle_nn::ops::softmax(&logits, 0)?;
        let out = (a.broadcast_mul(&wts.get(0)?)? + b.broadcast_mul(&wts.get(1)?)?)?;
        Ok(out)
    }
}

/// Aligns a non-reference feature map to the reference with a deformable
/// branch and a spatial-attention branch, both driven by a shared offset
/// feature.
#[derive(Debug, Clone)]
pub struct AlignmentUnit {
    offset_feature: SelectiveKernel,
    offsets: Conv2d,
    deform: DeformConv2d,
    attention: Conv2d,
    fuse: Conv2d,
}

impl AlignmentUnit {
    pub fn new(vb: VarBuilder, channels: usize, offset_groups: usize) -> Result<Self> {
        let deform = DeformConv2d::new(vb.pp("deform"), channels, channels, offset_groups)?;
        Ok(Self {
            offset_feature: SelectiveKernel::new(vb.pp("offset_feature"), 2 * channels, channels)?,
            offsets: zero_conv(vb.pp("offsets"), channels, deform.offset_channels(), 3)?,
            deform,
            attention: conv(vb.pp("attention"), channels, channels, 3, 1)?,
            fuse: conv(vb.pp("fuse"), 2 * channels, channels, 1, 1)?,
        })
    }

    /// Returns the aligned features along with the deformable and attention
    /// branch outputs.
    pub fn forward_parts(&self, non_ref: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        ensure_same(non_ref, reference, "alignment inputs")?;
        let f_o = self.offset_feature.forward(&Tensor::cat(&[non_ref, reference], 1)?)?;
        let f_d = self.deform.forward(non_ref, &self.offsets.forward(&f_o)?)?;
        let mask = candle_nn::ops::sigmoid(&self.attention.forward(&f_o)?)?;
        let f_s = (non_ref * mask)?;
        let out = self.fuse.forward(&Tensor::cat(&[&f_d, &f_s], 1)?)?;
        Ok((out, f_d, f_s))
    }

    pub fn forward(&self, non_ref: &Tensor, reference: &Tensor) -> Result<Tensor> {
        Ok(self.forward_parts(non_ref, reference)?.0)
    }

    pub fn deform(&self) -> &DeformConv2d {
        &self.deform
    }
}

/// Frame-selective merge: `U = Σ_i F_i ⊙ v_i` with `v` a softmax across
/// frames for every channel.
#[derive(Debug, Clone)]
pub struct MergeUnit {
    squeeze: Conv2d,
    branches: [Conv2d; 3],
}

impl MergeUnit {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            squeeze: conv(vb.pp("squeeze"), channels, channels, 1, 1)?,
            branches: [0, 1, 2].map(|i| conv(vb.pp(format!("frame{i}")), channels, channels, 1, 1).expect("1x1 conv")),
        })
    }

    /// Builds a unit from explicit layers (all 1×1 convolutions).
    pub fn from_parts(squeeze: Conv2d, branches: [Conv2d; 3]) -> Self {
        Self { squeeze, branches }
    }

    /// Merged context and the `3×B×C×1×1` attention weights.
    pub fn forward_with_weights(&self, frames: [&Tensor; 3]) -> Result<(Tensor, Tensor)> {
        ensure_same(frames[0], frames[1], "merge inputs")?;
        ensure_same(frames[0], frames[2], "merge inputs")?;
        let sum = ((frames[0] + frames[1])? + frames[2])?;
        let v = leaky(&self.squeeze.forward(&sum.mean_keepdim(2)?.mean_keepdim(3)?)?)?;
        let logits: Vec<Tensor> = self.branches.iter().map(|b| b.forward(&v)).collect::<candle_core::Result<_>>()?;
        let weights = candle_nn::ops::softmax(&Tensor::stack(&logits, 0)?, 0)?;
        let mut u = frames[0].broadcast_mul(&weights.get(0)?)?;
        for i in 1..3 {
            u = (u + frames[i].broadcast_mul(&weights.get(i)?)?)?;
        }
        Ok((u, weights))
    }

    pub fn forward(&self, frames: [&Tensor; 3]) -> Result<Tensor> {
        Ok(self.forward_with_weights(frames)?.0)
    }
}

/// Residual fusing: `F' = (γ ⊙ F + β) + F` with `γ, β` predicted from the
/// guidance features. The heads start at zero, so a fresh unit is the
/// identity on `F`.
#[derive(Debug, Clone)]
pub struct FuseUnit {
    conv_in: Conv2d,
    res: ResBlock,
    gamma: Conv2d,
    beta: Conv2d,
}

impl FuseUnit {
    pub fn new(vb: VarBuilder, guide_channels: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            conv_in: conv(vb.pp("conv_in"), guide_channels, channels, 3, 1)?,
            res: ResBlock::new(vb.pp("res"), channels)?,
            gamma: zero_conv(vb.pp("gamma"), channels, channels, 3)?,
            beta: zero_conv(vb.pp("beta"), channels, channels, 3)?,
        })
    }

    /// `(γ, β)` for the concatenated guidance.
    pub fn affine(&self, guide: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.res.forward(&self.conv_in.forward(guide)?)?;
        let h = leaky(&h)?;
        Ok((self.gamma.forward(&h)?, self.beta.forward(&h)?))
    }

    pub fn forward(&self, f: &Tensor, guide: &Tensor) -> Result<Tensor> {
        let (g, b) = self.affine(guide)?;
        apply_affine(f, &g, &b)
    }
}

/// `(γ ⊙ F + β) + F`
pub fn apply_affine(f: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    ensure_same(f, gamma, "affine scale")?;
    ensure_same(f, beta, "affine shift")?;
    Ok((((f * gamma)? + beta)? + f)?)
}

#[derive(Debug, Clone)]
struct FrameEncoder {
    stages: Vec<(Conv2d, ResBlock)>,
}

impl FrameEncoder {
    fn new(vb: VarBuilder, c: usize) -> Result<Self> {
        let widths = [c, 2 * c, 4 * c, 8 * c];
        let mut stages = Vec::new();
        for i in 0..3 {
            let vb = vb.pp(format!("down{i}"));
            stages.push((conv(vb.pp("conv"), widths[i], widths[i + 1], 3, 2)?, ResBlock::new(vb.pp("res"), widths[i + 1])?));
        }
        Ok(Self { stages })
    }

    /// Features at H/2, H/4 and H/8.
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(3);
        for (down, res) in &self.stages {
            h = res.forward(&leaky(&down.forward(&h)?)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum Merger {
    Reference,
    Sum,
    Concat(Conv2d),
    Fsm(MergeUnit),
}

impl Merger {
    fn new(vb: VarBuilder, mode: MergeMode, c: usize) -> Result<Self> {
        Ok(match mode {
            MergeMode::Reference => Self::Reference,
            MergeMode::Sum => Self::Sum,
            MergeMode::Concat => Self::Concat(conv(vb, 3 * c, c, 1, 1)?),
            MergeMode::Fsm => Self::Fsm(MergeUnit::new(vb, c)?),
        })
    }

    fn forward(&self, f: [&Tensor; 3]) -> Result<Tensor> {
        Ok(match self {
            Self::Reference => f[1].clone(),
            Self::Sum => ((f[0] + f[1])? + f[2])?,
            Self::Concat(c) => c.forward(&Tensor::cat(&f, 1)?)?,
            Self::Fsm(m) => m.forward(f)?,
        })
    }
}

/// How one fidelity-decoder stage absorbs its guidance.
#[derive(Debug, Clone)]
enum StageFusion {
    Residual(FuseUnit),
    /// `F + Conv1×1(guide)`
    Additive(Conv2d),
}

impl StageFusion {
    fn forward(&self, f: &Tensor, guide: &Tensor) -> Result<Tensor> {
        match self {
            Self::Residual(u) => u.forward(f, guide),
            Self::Additive(c) => Ok((f + c.forward(guide)?)?),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    conv: Conv2d,
    res: ResBlock,
    merge: Merger,
    vq_proj: Option<Conv2d>,
    fusion: StageFusion,
}

/// Everything the forward pass produces.
#[derive(Debug, Clone)]
pub struct HdrOutput {
    /// Linear prediction in `[0, 1]`.
    pub hdr: Tensor,
    /// Tone-mapped prediction (the sigmoid output).
    pub tone: Tensor,
    /// Pre-quantization bottleneck for the Step-1 decoder, when enabled.
    pub z_vq: Option<Tensor>,
    /// Code indices chosen for `z_vq` (full codebook).
    pub indices: Vec<u32>,
}

/// Frozen pieces reused from Step 1.
#[derive(Debug, Clone)]
pub struct FrozenVq {
    pub model: VqModel,
    pub store: ParamStore,
    pub manifest: autoencoder::OlcManifest,
}

impl FrozenVq {
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let (model, store, manifest) = load_olc(dir, true, device)?;
        Ok(Self { model, store, manifest })
    }

    /// SHA-256 over the frozen decoder/encoder weights and the codebook.
    pub fn checksum(&self) -> Result<String> {
        let cb = self.model.codebook_var().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut bytes = self.store.checksum()?.into_bytes();
        for v in cb {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        use sha2::{Digest, Sha256};
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }

    /// Ground-truth latent: the Step-1 encoding of `hdr`, quantized against
    /// the full codebook. Carries no gradient.
    pub fn target_latent(&self, hdr: &Tensor) -> Result<Tensor> {
        let z = self.model.encode(hdr)?.detach();
        let q = self.model.frozen_codebook()?.quantize(&z, &[InputClass::Hdr])?;
        Ok(q.quantized.detach())
    }
}

#[derive(Debug, Clone)]
pub struct HdrModel {
    arch: HdrArchConfig,
    frame_in: Vec<Conv2d>,
    align: Option<[AlignmentUnit; 2]>,
    post_align: Vec<Conv2d>,
    encoders: Vec<FrameEncoder>,
    z_m: Conv2d,
    z_vq: Option<(Conv2d, Conv2d)>,
    dec_in: (Conv2d, ResBlock),
    stages: Vec<DecoderStage>,
    conv_out: Conv2d,
    vq: Option<FrozenVq>,
    mu: f64,
}

impl HdrModel {
    /// `vq` is required when the Step-1 decoder branch is enabled.
    pub fn new(vb: VarBuilder, arch: &HdrArchConfig, vq: Option<FrozenVq>, mu: f64) -> Result<Self> {
        arch.validate()?;
        let c = arch.base_channels;
        let vq = if arch.use_dvq {
            Some(vq.ok_or_else(|| invalid("the Step-1 decoder branch needs a Step-1 checkpoint"))?)
        } else {
            None
        };
        let n_frames = if arch.shared_encoders { 1 } else { 3 };
        let frame_in = (0..n_frames)
            .map(|i| conv(vb.pp(format!("frame_in{i}")), 6, c, 3, 1))
            .collect::<Result<_>>()?;
        let align = if arch.use_pa {
            Some([
                AlignmentUnit::new(vb.pp("align_short"), c, arch.offset_groups)?,
                AlignmentUnit::new(vb.pp("align_long"), c, arch.offset_groups)?,
            ])
        } else {
            None
        };
        // Reference frame always gets a plain conv; non-reference frames get
        // one too when alignment is disabled.
        let post_align = (0..if arch.use_pa { 1 } else { 3 })
            .map(|i| conv(vb.pp(format!("post_align{i}")), c, c, 3, 1))
            .collect::<Result<_>>()?;
        let encoders = (0..n_frames)
            .map(|i| FrameEncoder::new(vb.pp(format!("encoder{i}")), c))
            .collect::<Result<_>>()?;

        let z_m = conv(vb.pp("z_m"), 12 * c, 4 * c, 3, 1)?;
        let z_vq = match &vq {
            Some(v) => Some((
                conv(vb.pp("z_vq.conv"), 24 * c, 8 * c, 3, 1)?,
                conv(vb.pp("z_vq.proj"), 8 * c, v.model.arch.code_dim, 1, 1)?,
            )),
            None => None,
        };
        let vq_channels = vq
            .as_ref()
            .map(|v| autoencoder::VqDecoder::feature_channels(&v.model.arch));

        let dec_in = (conv(vb.pp("dec_in"), 4 * c, 4 * c, 3, 1)?, ResBlock::new(vb.pp("dec_in_res"), 4 * c)?);
        let widths = [4 * c, 2 * c, c];
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let vb = vb.pp(format!("stage{i}"));
            let c_in = if i == 0 { 4 * c } else { widths[i - 1] };
            // Step-1 decoder features at H/4, H/2 and H.
            let vq_proj = match vq_channels {
                Some(ch) => Some(conv(vb.pp("vq_proj"), ch[i + 1], w, 1, 1)?),
                None => None,
            };
            let guide = if vq_proj.is_some() { 2 * w } else { w };
            let fusion = if arch.use_rf {
                StageFusion::Residual(FuseUnit::new(vb.pp("rf"), guide, w)?)
            } else {
                StageFusion::Additive(conv(vb.pp("skip"), guide, w, 1, 1)?)
            };
            stages.push(DecoderStage {
                conv: conv(vb.pp("conv"), c_in, w, 3, 1)?,
                res: ResBlock::new(vb.pp("res"), w)?,
                merge: Merger::new(vb.pp("merge"), arch.merge, w)?,
                vq_proj,
                fusion,
            });
        }
        Ok(Self {
            arch: arch.clone(),
            frame_in,
            align,
            post_align,
            encoders,
            z_m,
            z_vq,
            dec_in,
            stages,
            conv_out: conv(vb.pp("conv_out"), c, 3, 3, 1)?,
            vq,
            mu,
        })
    }

    pub fn arch(&self) -> &HdrArchConfig {
        &self.arch
    }

    pub fn frozen(&self) -> Option<&FrozenVq> {
        self.vq.as_ref()
    }

    fn per_frame<'a, T>(&self, items: &'a [T], i: usize) -> &'a T {
        if items.len() == 1 {
            &items[0]
        } else {
            &items[i]
        }
    }

    /// Forward pass on three `B×6×H×W` frame tensors (short, mid, long).
    pub fn forward(&self, frames: &[Tensor; 3]) -> Result<HdrOutput> {
        let (_, ch, h, w) = frames[1].dims4()?;
        if ch != 6 {
            return Err(Error::ShapeMismatch(format!("frame input has {ch} channels, expected 6")));
        }
        ensure_divisible(h, w)?;
        for f in frames {
            ensure_same(f, &frames[1], "frame inputs")?;
        }
        let f: Vec<Tensor> = (0..3)
            .map(|i| Ok(leaky(&self.per_frame(&self.frame_in, i).forward(&frames[i])?)?))
            .collect::<Result<_>>()?;
        let aligned: Vec<Tensor> = match &self.align {
            Some([short, long]) => vec![
                short.forward(&f[0], &f[1])?,
                self.post_align[0].forward(&f[1])?,
                long.forward(&f[2], &f[1])?,
            ],
            None => (0..3)
                .map(|i| Ok(self.post_align[i].forward(&f[i])?))
                .collect::<Result<_>>()?,
        };
        // scales[s][i]: frame i at H, H/2, H/4, H/8.
        let mut scales: Vec<Vec<Tensor>> = vec![aligned.clone(), vec![], vec![], vec![]];
        for (i, a) in aligned.iter().enumerate() {
            for (s, feat) in self.per_frame(&self.encoders, i).forward(a)?.into_iter().enumerate() {
                scales[s + 1].push(feat);
            }
        }
        let at = |s: usize| -> [&Tensor; 3] { [&scales[s][0], &scales[s][1], &scales[s][2]] };

        let z_m = leaky(&self.z_m.forward(&Tensor::cat(&at(2), 1)?)?)?;
        let (z_vq, indices, vq_feats) = match (&self.z_vq, &self.vq) {
            (Some((c1, c2)), Some(vq)) => {
                let z = c2.forward(&leaky(&c1.forward(&Tensor::cat(&at(3), 1)?)?)?)?;
                let q = vq.model.frozen_codebook()?.quantize(&z, &[InputClass::Hdr])?;
                let z_st = straight_through(&z, &q.quantized)?;
                let dec = vq.model.decode(&z_st)?;
                (Some(z), q.indices, Some(dec.features))
            }
            _ => (None, Vec::new(), None),
        };

        let mut x = self.dec_in.1.forward(&leaky(&self.dec_in.0.forward(&z_m)?)?)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = x.dims4()?;
                x = x.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
            x = stage.res.forward(&leaky(&stage.conv.forward(&x)?)?)?;
            // Decoder stage i runs at H/4, H/2, H, i.e. encoder scale 2 - i.
            let u = stage.merge.forward(at(2 - i))?;
            let guide = match (&stage.vq_proj, &vq_feats) {
                (Some(p), Some(feats)) => Tensor::cat(&[u, p.forward(&feats[i + 1])?], 1)?,
                _ => u,
            };
            x = stage.fusion.forward(&x, &guide)?;
        }
        let tone = candle_nn::ops::sigmoid(&self.conv_out.forward(&leaky(&x)?)?)?;
        let hdr = crate::nn::inverse_mu_law(&tone, self.mu)?;
        Ok(HdrOutput {
            hdr,
            tone,
            z_vq,
            indices,
        })
    }

    /// Prediction for a whole stack. Inputs larger than `tile` on either
    /// side are processed in overlapping tiles blended linearly.
    pub fn predict(&self, stack: &ExposureStack, gamma: f64, tile: usize, overlap: usize) -> Result<Image> {
        let (h, w) = stack.dims();
        ensure_divisible(h, w)?;
        let device = self.device();
        let run = |y: usize, x: usize, th: usize, tw: usize| -> Result<Image> {
            let crop = stack.crop(y, x, th, tw)?;
            let frames = input_tensors(&[&crop], gamma, DType::F32, &device)?;
            let out = self.forward(&frames)?;
            Image::from_tensor(&out.hdr.detach())
        };
        if h <= tile && w <= tile {
            return run(0, 0, h, w);
        }
        let tile = (tile / DOWNSAMPLE).max(1) * DOWNSAMPLE;
        let ys = tile_starts(h, tile, overlap);
        let xs = tile_starts(w, tile, overlap);
        let (th, tw) = (tile.min(h), tile.min(w));
        let mut acc = vec![0f64; h * w * 3];
        let mut wsum = vec![0f64; h * w];
        for &y in &ys {
            for &x in &xs {
                let pred = run(y, x, th, tw)?;
                for dy in 0..th {
                    let wy = ramp(dy, th, y > 0, y + th < h, overlap);
                    for dx in 0..tw {
                        let wx = ramp(dx, tw, x > 0, x + tw < w, overlap);
                        let wt = wy * wx;
                        let p = (y + dy) * w + (x + dx);
                        wsum[p] += wt;
                        for c in 0..3 {
                            acc[p * 3 + c] += wt * pred.get(dy, dx, c) as f64;
                        }
                    }
                }
            }
        }
        let data = acc
            .iter()
            .enumerate()
            .map(|(i, v)| (v / wsum[i / 3]) as f32)
            .collect();
        Image::new(h, w, data)
    }

    fn device(&self) -> Device {
        self.conv_out.weight().device().clone()
    }
}

/// Tile origins covering `len` with at least `overlap` shared pixels; the
/// last tile is flush with the end.
pub fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile.saturating_sub(overlap).max(DOWNSAMPLE) / DOWNSAMPLE * DOWNSAMPLE;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Blend weight along one axis: ramps up over `overlap` pixels at interior
/// edges, flat elsewhere.
fn ramp(i: usize, len: usize, ramp_start: bool, ramp_end: bool, overlap: usize) -> f64 {
    let o = overlap.max(1) as f64;
    let mut wgt: f64 = 1.0;
    if ramp_start {
        wgt = wgt.min((i as f64 + 1.0) / (o + 1.0));
    }
    if ramp_end {
        wgt = wgt.min((len - i) as f64 / (o + 1.0));
    }
    wgt
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdrLossWeights {
    pub per: f64,
    pub map: f64,
}

impl Default for HdrLossWeights {
    fn default() -> Self {
        Self { per: 0.1, map: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct HdrLosses {
    pub rec: Tensor,
    pub per: Tensor,
    pub map: Tensor,
    pub total: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HdrLossValues {
    pub rec: f64,
    pub per: f64,
    pub map: f64,
    pub total: f64,
}

impl HdrLosses {
    pub fn values(&self) -> Result<HdrLossValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(HdrLossValues {
            rec: f(&self.rec)?,
            per: f(&self.per)?,
            map: f(&self.map)?,
            total: f(&self.total)?,
        })
    }
}

/// `mean((z_vq − z_gt)²)` with no gradient into `z_gt`.
pub fn mapping_loss(z_vq: &Tensor, z_gt: &Tensor) -> Result<Tensor> {
    ensure_same(z_vq, z_gt, "mapping loss")?;
    Ok((z_vq - z_gt.detach())?.sqr()?.mean_all()?)
}

/// Step-2 objective `L_rec + λ_per L_per + λ_map L_map`; the mapping term is
/// zero when there is no latent pair.
pub fn hdr_losses(
    prediction: &Tensor,
    target: &Tensor,
    latents: Option<(&Tensor, &Tensor)>,
    perceptual: &PerceptualExtractor,
    weights: &HdrLossWeights,
    mu: f64,
) -> Result<HdrLosses> {
    let tp = tonemap_unit(prediction, mu)?;
    let tt = tonemap_unit(target, mu)?;
    let rec = l1(&tt, &tp)?;
    let zero = Tensor::zeros((), rec.dtype(), rec.device())?;
    let per = if weights.per > 0.0 {
        perceptual.loss(&tt, &tp)?
    } else {
        zero.clone()
    };
    let map = match latents {
        Some((z_vq, z_gt)) => mapping_loss(z_vq, z_gt)?,
        None => zero,
    };
    let total = ((&rec + (&per * weights.per)?)? + (&map * weights.map)?)?;
    Ok(HdrLosses { rec, per, map, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdrTrainConfig {
    pub arch: HdrArchConfig,
    pub weights: HdrLossWeights,
    pub lr: f64,
    pub mu: f64,
    pub gamma: f64,
    pub patch_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub steps: usize,
    pub seed: u64,
    pub perceptual: PerceptualConfig,
    pub eval_every: usize,
    pub eval_patches: usize,
    pub target_psnr: Option<f64>,
    /// Code dimension the Step-1 checkpoint must have.
    pub code_dim: Option<usize>,
}

impl Default for HdrTrainConfig {
    fn default() -> Self {
        Self {
            arch: HdrArchConfig::default(),
            weights: HdrLossWeights::default(),
            lr: 1e-4,
            mu: DEFAULT_MU,
            gamma: DEFAULT_GAMMA,
            patch_size: 256,
            stride: 64,
            batch_size: 4,
            augment: true,
            steps: 100_000,
            seed: 0,
            perceptual: PerceptualConfig::default(),
            eval_every: 0,
            eval_patches: 16,
            target_psnr: None,
            code_dim: None,
        }
    }
}

impl HdrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.weights.per >= 0.0 && self.weights.map >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.lr > 0.0 && self.mu > 0.0 && self.gamma > 0.0) {
            return Err(invalid("learning rate, mu and gamma must be positive"));
        }
        ensure_divisible(self.patch_size, self.patch_size)?;
        if self.batch_size == 0 || self.stride == 0 {
            return Err(invalid("batch size and stride must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdrStepReport {
    pub step: usize,
    pub losses: HdrLossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdrManifest {
    pub kind: String,
    pub format_version: u32,
    pub downsample: usize,
    pub step: usize,
    pub seed: u64,
    pub config: HdrTrainConfig,
    pub train_psnr_mu: Option<f64>,
    pub weights_checksum: String,
    pub frozen_checksum: Option<String>,
}

pub struct HdrTrainer {
    cfg: HdrTrainConfig,
    model: HdrModel,
    store: ParamStore,
    perceptual: PerceptualExtractor,
    opt: AdamW,
    sampler: PatchSampler,
    eval_set: Vec<Scene>,
    step: usize,
    last_psnr: Option<f64>,
    step1_dir: Option<std::path::PathBuf>,
    device: Device,
}

/// Loads the Step-1 checkpoint and checks it against the Step-2 config.
pub fn load_step1(cfg: &HdrTrainConfig, dir: &Path, device: &Device) -> Result<FrozenVq> {
    let vq = FrozenVq::load(dir, device)?;
    if let Some(n_z) = cfg.code_dim {
        if vq.model.arch.code_dim != n_z {
            return Err(incompatible(
                dir,
                format!("code dimension {} (config expects {n_z})", vq.model.arch.code_dim),
            ));
        }
    }
    Ok(vq)
}

impl HdrTrainer {
    pub fn new(cfg: HdrTrainConfig, scenes: Vec<Scene>, step1: Option<&Path>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vq = match step1 {
            Some(dir) => Some(load_step1(&cfg, dir, device)?),
            None => None,
        };
        if cfg.arch.use_dvq && vq.is_none() {
            return Err(invalid("a Step-1 checkpoint is required when the Step-1 decoder branch is enabled"));
        }
        let store = ParamStore::new(cfg.seed);
        let model = HdrModel::new(store.var_builder(DType::F32, device), &cfg.arch, vq, cfg.mu)?;
        let perceptual = PerceptualExtractor::new(&cfg.perceptual, DType::F32, device)?;
        let opt = AdamW::new(
            store.vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let sampler = PatchSampler::new(scenes, cfg.patch_size, cfg.stride, cfg.augment, cfg.seed)?;
        let eval_set = (0..sampler.len().min(cfg.eval_patches))
            .map(|i| sampler.patch(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            model,
            store,
            perceptual,
            opt,
            sampler,
            eval_set,
            step: 0,
            last_psnr: None,
            step1_dir: step1.map(Path::to_path_buf),
            device: device.clone(),
        })
    }

    pub fn model(&self) -> &HdrModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &HdrTrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn last_psnr(&self) -> Option<f64> {
        self.last_psnr
    }

    pub fn step(&mut self) -> Result<HdrStepReport> {
        let patches = self.sampler.batch(self.step, self.cfg.batch_size)?;
        let stacks: Vec<&ExposureStack> = patches.iter().map(|p| &p.stack).collect();
        let frames = input_tensors(&stacks, self.cfg.gamma, DType::F32, &self.device)?;
        let gts: Vec<Image> = patches
            .iter()
            .map(|p| Ok(p.ground_truth()?.image().clone()))
            .collect::<Result<_>>()?;
        let target = batch_tensor(&gts, DType::F32, &self.device)?;
        let out = self.model.forward(&frames)?;
        let z_gt = match (&out.z_vq, self.model.frozen()) {
            (Some(_), Some(vq)) => Some(vq.target_latent(&target)?),
            _ => None,
        };
        let latents = out.z_vq.as_ref().zip(z_gt.as_ref());
        let losses = hdr_losses(&out.hdr, &target, latents, &self.perceptual, &self.cfg.weights, self.cfg.mu)?;
        let values = losses.values()?;
        if ![values.rec, values.per, values.map, values.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                classes: vec![],
                breakdown: format!("{values:?}"),
            });
        }
        self.opt.step(&losses.total.backward()?)?;
        self.step += 1;
        Ok(HdrStepReport {
            step: self.step,
            losses: values,
        })
    }

    pub fn evaluate(&mut self) -> Result<f64> {
        let p = evaluate_patches(&self.model, &self.eval_set, self.cfg.gamma, self.cfg.mu)?;
        self.last_psnr = Some(p);
        Ok(p)
    }

    pub fn train(&mut self, mut on_step: impl FnMut(&HdrStepReport, Option<f64>)) -> Result<usize> {
        while self.step < self.cfg.steps {
            let report = self.step()?;
            let mut psnr = None;
            if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                psnr = Some(self.evaluate()?);
            }
            on_step(&report, psnr);
            if let (Some(p), Some(t)) = (psnr, self.cfg.target_psnr) {
                if p >= t {
                    break;
                }
            }
        }
        Ok(self.step)
    }

    /// Writes the trainable weights plus a copy of the Step-1 checkpoint, so
    /// the directory is self-contained.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = HdrManifest {
            kind: KIND.into(),
            format_version: checkpoint::FORMAT_VERSION,
            downsample: DOWNSAMPLE,
            step: self.step,
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            train_psnr_mu: self.last_psnr,
            weights_checksum: self.store.checksum()?,
            frozen_checksum: self.model.frozen().map(FrozenVq::checksum).transpose()?,
        };
        checkpoint::write_atomically(dir, |tmp| {
            self.store.save(&tmp.join(WEIGHTS_FILE))?;
            if let Some(src) = &self.step1_dir {
                copy_dir(src, &tmp.join(STEP1_DIR))?;
            }
            checkpoint::write_manifest(tmp, &manifest)
        })
    }
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            fs::copy(entry.path(), dst.join(entry.file_name()))?;
        }
    }
    Ok(())
}

/// Mean PSNR-μ of predictions over `patches`.
pub fn evaluate_patches(model: &HdrModel, patches: &[Scene], gamma: f64, mu: f64) -> Result<f64> {
    let device = model.device();
    let mut total = 0.0;
    for chunk in patches.chunks(8) {
        let stacks: Vec<&ExposureStack> = chunk.iter().map(|p| &p.stack).collect();
        let frames = input_tensors(&stacks, gamma, DType::F32, &device)?;
        let gts: Vec<Image> = chunk
            .iter()
            .map(|p| Ok(p.ground_truth()?.image().clone()))
            .collect::<Result<_>>()?;
        let target = batch_tensor(&gts, DType::F32, &device)?;
        let out = model.forward(&frames)?;
        total += autoencoder::batch_psnr_mu(&target, &out.hdr.detach(), mu)? * chunk.len() as f64;
    }
    Ok(total / patches.len().max(1) as f64)
}

/// Loads a Step-2 checkpoint (with its embedded Step-1 copy).
pub fn load_hdr(dir: &Path, device: &Device) -> Result<(HdrModel, ParamStore, HdrManifest)> {
    let manifest: HdrManifest = checkpoint::read_manifest(dir)?;
    if manifest.kind != KIND {
        return Err(incompatible(dir, format!("expected a `{KIND}` checkpoint, found `{}`", manifest.kind)));
    }
    if manifest.downsample != DOWNSAMPLE {
        return Err(incompatible(dir, format!("downsample factor {}", manifest.downsample)));
    }
    let vq = if manifest.config.arch.use_dvq {
        Some(load_step1(&manifest.config, &dir.join(STEP1_DIR), device)?)
    } else {
        None
    };
    let store = ParamStore::new(manifest.seed);
    let model = HdrModel::new(store.var_builder(DType::F32, device), &manifest.config.arch, vq, manifest.config.mu)?;
    store.load(&require_file(dir, WEIGHTS_FILE)?)?;
    Ok((model, store, manifest))
}

pub fn train_hdr(
    cfg: HdrTrainConfig,
    scenes: Vec<Scene>,
    step1: Option<&Path>,
    out: &Path,
    device: &Device,
) -> Result<HdrTrainer> {
    let log_every = (cfg.steps / 20).max(1);
    let mut trainer = HdrTrainer::new(cfg, scenes, step1, device)?;
    trainer.train(|r, psnr| {
        if r.step % log_every == 0 || psnr.is_some() {
            log::info!(
                "hdr step {} total {:.5} rec {:.5} map {:.5}{}",
                r.step,
                r.losses.total,
                r.losses.rec,
                r.losses.map,
                psnr.map(|p| format!(" psnr-mu {p:.2}")).unwrap_or_default()
            );
        }
    })?;
    if trainer.last_psnr().is_none() {
        trainer.evaluate()?;
    }
    trainer.save(out)?;
    Ok(trainer)
}
