//! Step 1: the VQ autoencoder trained with the overlapped codebook.
//!
//! Images enter the encoder in the tone-mapped domain (`τ` of the clamped
//! linear input) and the decoder emits a tone-mapped image through a sigmoid,
//! which is mapped back to linear radiance with `τ⁻¹`.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{AdamW, Conv2d, Conv2dConfig, Optimizer, ParamsAdamW, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, incompatible, require_file};
use crate::codebook::{
    usage_histogram, CodebookMode, InputClass, OverlappedCodebook, QuantizationResult, DEFAULT_COMMITMENT,
};
use crate::datasets::{PatchSampler, Scene};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::{conv, l1, leaky, tonemap_unit, ParamStore, PerceptualConfig, PerceptualExtractor, ResBlock};
use crate::radiometry::{gamma_normalize, DEFAULT_GAMMA, DEFAULT_MU};

/// Spatial reduction between an image and its latent grid.
pub const DOWNSAMPLE: usize = 8;
pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
pub const KIND: &str = "olc";

/// Shape of the autoencoder and its codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqArchConfig {
    /// Width of the first stage; later stages use 2×, 4× and 8× this.
    pub base_channels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub discriminator_channels: usize,
}

impl Default for VqArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            codebook_size: crate::codebook::DEFAULT_CODEBOOK_SIZE,
            code_dim: 256,
            discriminator_channels: 64,
        }
    }
}

impl VqArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.code_dim == 0 || self.discriminator_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.codebook_size == 0 || self.codebook_size % 4 != 0 {
            return Err(invalid(format!(
                "codebook size {} must be a positive multiple of 4",
                self.codebook_size
            )));
        }
        Ok(())
    }

    fn widths(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

pub fn ensure_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(invalid(format!(
            "image size {h}x{w} is not a positive multiple of {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct VqEncoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    conv_out: Conv2d,
}

impl VqEncoder {
    pub fn new(vb: VarBuilder, arch: &VqArchConfig) -> Result<Self> {
        let w = arch.widths();
        let mut stages = Vec::new();
        for i in 0..3 {
            let vb = vb.pp(format!("down{i}"));
            stages.push((ResBlock::new(vb.pp("res"), w[i])?, conv(vb.pp("conv"), w[i], w[i + 1], 3, 2)?));
        }
        Ok(Self {
            conv_in: conv(vb.pp("conv_in"), 3, w[0], 3, 1)?,
            stages,
            mid: ResBlock::new(vb.pp("mid"), w[3])?,
            conv_out: conv(vb.pp("conv_out"), w[3], arch.code_dim, 1, 1)?,
        })
    }

    /// `B×3×H×W` tone-mapped image to `B×n_z×H/8×W/8`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        ensure_divisible(h, w)?;
        let mut h = self.conv_in.forward(x)?;
        for (res, down) in &self.stages {
            h = down.forward(&res.forward(&h)?)?;
        }
        let h = self.mid.forward(&h)?;
        Ok(self.conv_out.forward(&leaky(&h)?)?)
    }
}

/// Decoder result: the tone-mapped image, its linear version, and the
/// intermediate feature maps at H/8, H/4, H/2 and H.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub tone: Tensor,
    pub linear: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct VqDecoder {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<(Conv2d, ResBlock)>,
    conv_out: Conv2d,
    mu: f64,
}

impl VqDecoder {
    pub fn new(vb: VarBuilder, arch: &VqArchConfig, mu: f64) -> Result<Self> {
        let w = arch.widths();
        let mut stages = Vec::new();
        for i in 0..3 {
            let vb = vb.pp(format!("up{i}"));
            let (c_in, c_out) = (w[3 - i], w[2 - i]);
            stages.push((conv(vb.pp("conv"), c_in, c_out, 3, 1)?, ResBlock::new(vb.pp("res"), c_out)?));
        }
        Ok(Self {
            conv_in: conv(vb.pp("conv_in"), arch.code_dim, w[3], 3, 1)?,
            mid: ResBlock::new(vb.pp("mid"), w[3])?,
            stages,
            conv_out: conv(vb.pp("conv_out"), w[0], 3, 3, 1)?,
            mu,
        })
    }

    /// Channel counts of the feature maps returned by [`Self::forward`].
    pub fn feature_channels(arch: &VqArchConfig) -> [usize; 4] {
        let w = arch.widths();
        [w[3], w[2], w[1], w[0]]
    }

    pub fn forward(&self, z: &Tensor) -> Result<DecoderOutput> {
        let mut h = self.mid.forward(&self.conv_in.forward(z)?)?;
        let mut features = vec![h.clone()];
        for (c, res) in &self.stages {
            let (_, _, hh, ww) = h.dims4()?;
            h = res.forward(&c.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?)?;
            features.push(h.clone());
        }
        let tone = candle_nn::ops::sigmoid(&self.conv_out.forward(&leaky(&h)?)?)?;
        let linear = crate::nn::inverse_mu_law(&tone, self.mu)?;
        Ok(DecoderOutput { tone, linear, features })
    }
}

/// Patch discriminator on tone-mapped images.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        let down = |c_in, c_out, name: &str| -> Result<Conv2d> {
            let cfg = Conv2dConfig {
                padding: 1,
                stride: 2,
                ..Default::default()
            };
            Ok(candle_nn::conv2d(c_in, c_out, 4, cfg, vb.pp(name))?)
        };
        Ok(Self {
            layers: vec![down(3, channels, "conv0")?, down(channels, 2 * channels, "conv1")?],
            head: conv(vb.pp("head"), 2 * channels, 1, 3, 1)?,
        })
    }

    /// Real-valued score map at 1/4 resolution.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = leaky(&l.forward(&h)?)?;
        }
        Ok(self.head.forward(&h)?)
    }
}

/// Hinge objective for the discriminator.
pub fn discriminator_hinge(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let f = fake.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// Encoder, decoder and codebook.
#[derive(Debug, Clone)]
pub struct VqModel {
    pub arch: VqArchConfig,
    pub encoder: VqEncoder,
    pub decoder: VqDecoder,
    codebook: Var,
    mode: CodebookMode,
    mu: f64,
}

impl VqModel {
    /// Builds the networks in `store`. The codebook variable is owned by the
    /// caller so it can be optimized (or frozen) independently.
    pub fn new(
        store: &ParamStore,
        arch: &VqArchConfig,
        codebook: Var,
        mode: CodebookMode,
        mu: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        arch.validate()?;
        let (k, n_z) = codebook.dims2()?;
        if (k, n_z) != (arch.codebook_size, arch.code_dim) {
            return Err(Error::ShapeMismatch(format!(
                "codebook is {k}x{n_z}, architecture expects {}x{}",
                arch.codebook_size, arch.code_dim
            )));
        }
        let vb = store.var_builder(dtype, device);
        Ok(Self {
            arch: arch.clone(),
            encoder: VqEncoder::new(vb.pp("encoder"), arch)?,
            decoder: VqDecoder::new(vb.pp("decoder"), arch, mu)?,
            codebook,
            mode,
            mu,
        })
    }

    pub fn codebook_var(&self) -> &Var {
        &self.codebook
    }

    pub fn mode(&self) -> CodebookMode {
        self.mode
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn codebook(&self) -> Result<OverlappedCodebook> {
        OverlappedCodebook::new(self.codebook.as_tensor().clone(), self.mode)
    }

    /// Same weights with the codebook detached from the graph.
    pub fn frozen_codebook(&self) -> Result<OverlappedCodebook> {
        OverlappedCodebook::new(self.codebook.as_tensor().detach(), self.mode)
    }

    /// Linear `B×3×H×W` image to pre-quantization latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(&tonemap_unit(x, self.mu)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<DecoderOutput> {
        self.decoder.forward(z)
    }

    /// Encode, quantize within each sample's window, pass gradients straight
    /// through, decode.
    pub fn reconstruct(&self, x: &Tensor, classes: &[InputClass]) -> Result<(DecoderOutput, Tensor, QuantizationResult)> {
        let z = self.encode(x)?;
        let q = self.codebook()?.quantize(&z, classes)?;
        let z_st = crate::codebook::straight_through(&z, &q.quantized)?;
        Ok((self.decode(&z_st)?, z, q))
    }

    /// Indices chosen for every latent position of each image.
    pub fn code_indices(&self, images: &[Image], class: InputClass) -> Result<Vec<Vec<u32>>> {
        let cb = self.frozen_codebook()?;
        images
            .iter()
            .map(|im| {
                let x = im.to_tensor(self.codebook.dtype(), self.codebook.device())?.unsqueeze(0)?;
                Ok(cb.quantize(&self.encode(&x)?.detach(), &[class])?.indices)
            })
            .collect()
    }

    /// K-bin histogram of codes used to represent `images` under `class`.
    pub fn usage(&self, images: &[Image], class: InputClass) -> Result<Vec<u64>> {
        let idx = self.code_indices(images, class)?;
        usage_histogram(idx.iter().map(Vec::as_slice), self.arch.codebook_size)
    }
}

/// Network input for class `eta`: a gamma-normalized LDR frame expressed in
/// ground-truth units, or the ground truth itself.
pub fn sample_input(scene: &Scene, eta: InputClass, gamma: f64) -> Result<Image> {
    match eta.frame_index() {
        None => Ok(scene.ground_truth()?.image().clone()),
        Some(i) => {
            let h = gamma_normalize(&scene.stack.frames()[i], gamma)?;
            let s = scene.radiance_scale;
            Ok(h.map(|v| (v as f64 / s) as f32))
        }
    }
}

/// Uniform draw from the four input classes.
pub fn sample_class(rng: &mut impl Rng) -> InputClass {
    InputClass::ALL[rng.random_range(0..4)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OlcLossWeights {
    pub rec: f64,
    pub per: f64,
    pub vq: f64,
    pub adv: f64,
}

impl Default for OlcLossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            per: 0.1,
            vq: 1.0,
            adv: 0.1,
        }
    }
}

/// Individual loss terms and their weighted sum (all scalar tensors).
#[derive(Debug, Clone)]
pub struct OlcLosses {
    pub rec: Tensor,
    pub per: Tensor,
    pub vq: Tensor,
    pub adv: Tensor,
    pub total: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OlcLossValues {
    pub rec: f64,
    pub per: f64,
    pub vq: f64,
    pub adv: f64,
    pub total: f64,
}

impl OlcLosses {
    pub fn values(&self) -> Result<OlcLossValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(OlcLossValues {
            rec: f(&self.rec)?,
            per: f(&self.per)?,
            vq: f(&self.vq)?,
            adv: f(&self.adv)?,
            total: f(&self.total)?,
        })
    }
}

impl OlcLossValues {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.per, self.vq, self.adv, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L1` between tone-mapped images, both clamped to `[0, 1]` first.
pub fn tone_l1(x: &Tensor, x_hat: &Tensor, mu: f64) -> Result<Tensor> {
    l1(&tonemap_unit(x, mu)?, &tonemap_unit(x_hat, mu)?)
}

/// Step-1 objective. `adv_weight` is the effective adversarial weight for the
/// current step; the generator term is `−mean(D(τ(X̂)))`.
#[allow(clippy::too_many_arguments)]
pub fn olc_losses(
    x: &Tensor,
    x_hat: &Tensor,
    quantization: &QuantizationResult,
    perceptual: &PerceptualExtractor,
    disc: Option<&Discriminator>,
    weights: &OlcLossWeights,
    adv_weight: f64,
    beta: f64,
    mu: f64,
) -> Result<OlcLosses> {
    let tx = tonemap_unit(x, mu)?;
    let tx_hat = tonemap_unit(x_hat, mu)?;
    let rec = l1(&tx, &tx_hat)?;
    let zero = Tensor::zeros((), rec.dtype(), rec.device())?;
    let per = if weights.per > 0.0 {
        perceptual.loss(&tx, &tx_hat)?
    } else {
        zero.clone()
    };
    let vq = quantization.vq_loss(beta)?;
    let adv = match disc {
        Some(d) if adv_weight > 0.0 => d.forward(&tx_hat)?.mean_all()?.neg()?,
        _ => zero,
    };
    let total = ((&rec * weights.rec)? + (&per * weights.per)?)?;
    let total = ((total + (&vq * weights.vq)?)? + (&adv * adv_weight)?)?;
    Ok(OlcLosses {
        rec,
        per,
        vq,
        adv,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OlcTrainConfig {
    pub arch: VqArchConfig,
    pub codebook_mode: CodebookMode,
    pub weights: OlcLossWeights,
    /// Steps before the adversarial term and discriminator updates start.
    pub adv_warmup: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta: f64,
    pub mu: f64,
    pub gamma: f64,
    pub patch_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub steps: usize,
    pub seed: u64,
    pub perceptual: PerceptualConfig,
    /// Evaluate train-set reconstruction every this many steps (0 disables).
    pub eval_every: usize,
    /// Number of fixed training patches used for evaluation.
    pub eval_patches: usize,
    /// Stop as soon as the evaluated PSNR-μ reaches this value.
    pub target_psnr: Option<f64>,
}

impl Default for OlcTrainConfig {
    fn default() -> Self {
        Self {
            arch: VqArchConfig::default(),
            codebook_mode: CodebookMode::Overlapped,
            weights: OlcLossWeights::default(),
            adv_warmup: 1000,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            beta: DEFAULT_COMMITMENT,
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
        }
    }
}

impl OlcTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let w = &self.weights;
        if [w.rec, w.per, w.vq, w.adv, self.beta].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.mu > 0.0 && self.gamma > 0.0) {
            return Err(invalid("mu and gamma must be positive"));
        }
        ensure_divisible(self.patch_size, self.patch_size)?;
        if self.batch_size == 0 || self.stride == 0 {
            return Err(invalid("batch size and stride must be positive"));
        }
        Ok(())
    }
}

/// One optimization step's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlcStepReport {
    pub step: usize,
    pub classes: Vec<u8>,
    pub losses: OlcLossValues,
    pub discriminator: Option<f64>,
}

/// Stacks images into a `B×3×H×W` tensor.
pub fn batch_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let t: Vec<Tensor> = images.iter().map(|im| im.to_tensor(dtype, device)).collect::<Result<_>>()?;
    Ok(Tensor::stack(&t, 0)?)
}

/// Mean over the batch of per-image PSNR between tone-mapped images.
pub fn batch_psnr_mu(x: &Tensor, x_hat: &Tensor, mu: f64) -> Result<f64> {
    let d = (tonemap_unit(x, mu)? - tonemap_unit(x_hat, mu)?)?.sqr()?;
    let mse = d.flatten_from(1)?.mean(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let psnr: Vec<f64> = mse
        .iter()
        .map(|&m| if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
        .collect();
    Ok(psnr.iter().sum::<f64>() / psnr.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlcManifest {
    pub kind: String,
    pub format_version: u32,
    pub downsample: usize,
    pub step: usize,
    pub seed: u64,
    pub config: OlcTrainConfig,
    pub train_psnr_mu: Option<f64>,
    pub generator_checksum: String,
}

pub struct OlcTrainer {
    cfg: OlcTrainConfig,
    model: VqModel,
    generator: ParamStore,
    disc_store: ParamStore,
    discriminator: Discriminator,
    perceptual: PerceptualExtractor,
    gen_opt: AdamW,
    disc_opt: AdamW,
    sampler: PatchSampler,
    eval_set: Vec<Scene>,
    step: usize,
    last_psnr: Option<f64>,
    dtype: DType,
    device: Device,
}

impl OlcTrainer {
    pub fn new(cfg: OlcTrainConfig, scenes: Vec<Scene>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = DType::F32;
        let generator = ParamStore::new(cfg.seed);
        let codebook = OverlappedCodebook::init_var(
            cfg.arch.codebook_size,
            cfg.arch.code_dim,
            cfg.seed ^ 0xc0de,
            dtype,
            device,
        )?;
        let model = VqModel::new(&generator, &cfg.arch, codebook, cfg.codebook_mode, cfg.mu, dtype, device)?;
        let disc_store = ParamStore::new(cfg.seed.wrapping_add(1));
        let discriminator = Discriminator::new(
            disc_store.var_builder(dtype, device).pp("discriminator"),
            cfg.arch.discriminator_channels,
        )?;
        let perceptual = PerceptualExtractor::new(&cfg.perceptual, dtype, device)?;

        let mut gen_vars = generator.vars();
        gen_vars.push(model.codebook_var().clone());
        let adam = |lr| ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let gen_opt = AdamW::new(gen_vars, adam(cfg.lr_generator))?;
        let disc_opt = AdamW::new(disc_store.vars(), adam(cfg.lr_discriminator))?;

        let sampler = PatchSampler::new(scenes, cfg.patch_size, cfg.stride, cfg.augment, cfg.seed)?;
        let eval_set = (0..sampler.len().min(cfg.eval_patches))
            .map(|i| sampler.patch(i))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            model,
            generator,
            disc_store,
            discriminator,
            perceptual,
            gen_opt,
            disc_opt,
            sampler,
            eval_set,
            step: 0,
            last_psnr: None,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &OlcTrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &VqModel {
        &self.model
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.generator
    }

    pub fn discriminator_store(&self) -> &ParamStore {
        &self.disc_store
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn last_psnr(&self) -> Option<f64> {
        self.last_psnr
    }

    fn adv_weight(&self) -> f64 {
        if self.cfg.weights.adv > 0.0 && self.step >= self.cfg.adv_warmup {
            self.cfg.weights.adv
        } else {
            0.0
        }
    }

    /// One generator update (and one discriminator update once the
    /// adversarial term is active).
    pub fn step(&mut self) -> Result<OlcStepReport> {
        let patches = self.sampler.batch(self.step, self.cfg.batch_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xe7a ^ (self.step as u64).rotate_left(17));
        let classes: Vec<InputClass> = patches.iter().map(|_| sample_class(&mut rng)).collect();
        let inputs: Vec<Image> = patches
            .iter()
            .zip(&classes)
            .map(|(p, &c)| sample_input(p, c, self.cfg.gamma))
            .collect::<Result<_>>()?;
        let x = batch_tensor(&inputs, self.dtype, &self.device)?;

        let (out, _, q) = self.model.reconstruct(&x, &classes)?;
        let adv_weight = self.adv_weight();
        let disc = (adv_weight > 0.0).then_some(&self.discriminator);
        let losses = olc_losses(
            &x,
            &out.linear,
            &q,
            &self.perceptual,
            disc,
            &self.cfg.weights,
            adv_weight,
            self.cfg.beta,
            self.cfg.mu,
        )?;
        let values = losses.values()?;
        let class_ids: Vec<u8> = classes.iter().map(|c| c.eta()).collect();
        if !values.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                classes: class_ids,
                breakdown: format!("{values:?}"),
            });
        }
        let grads = losses.total.backward()?;
        self.gen_opt.step(&grads)?;

        let mut disc_loss = None;
        if adv_weight > 0.0 {
            let real = self.discriminator.forward(&tonemap_unit(&x, self.cfg.mu)?)?;
            let fake = self.discriminator.forward(&out.tone.detach())?;
            let l = discriminator_hinge(&real, &fake)?;
            let v = l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    classes: class_ids,
                    breakdown: format!("discriminator hinge {v}"),
                });
            }
            self.disc_opt.step(&l.backward()?)?;
            disc_loss = Some(v);
        }
        self.step += 1;
        Ok(OlcStepReport {
            step: self.step,
            classes: class_ids,
            losses: values,
            discriminator: disc_loss,
        })
    }

    /// Mean PSNR-μ of reconstructions over the evaluation patches and all four
    /// input classes.
    pub fn evaluate(&mut self) -> Result<f64> {
        let p = evaluate_reconstruction(&self.model, &self.eval_set, self.cfg.gamma)?;
        self.last_psnr = Some(p);
        Ok(p)
    }

    /// Runs until `steps` or until the PSNR target is reached. `on_step` sees
    /// every report; returns the number of steps taken.
    pub fn train(&mut self, mut on_step: impl FnMut(&OlcStepReport, Option<f64>)) -> Result<usize> {
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

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = OlcManifest {
            kind: KIND.into(),
            format_version: checkpoint::FORMAT_VERSION,
            downsample: DOWNSAMPLE,
            step: self.step,
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            train_psnr_mu: self.last_psnr,
            generator_checksum: self.generator.checksum()?,
        };
        checkpoint::write_atomically(dir, |tmp| {
            self.generator.save(&tmp.join(GENERATOR_FILE))?;
            self.disc_store.save(&tmp.join(DISCRIMINATOR_FILE))?;
            self.model.codebook()?.save(tmp, self.cfg.seed ^ 0xc0de)?;
            checkpoint::write_manifest(tmp, &manifest)
        })
    }
}

/// Mean PSNR-μ over `patches × {short, mid, long, HDR}` (HDR target each time).
pub fn evaluate_reconstruction(model: &VqModel, patches: &[Scene], gamma: f64) -> Result<f64> {
    let dtype = model.codebook_var().dtype();
    let device = model.codebook_var().device().clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for class in InputClass::ALL {
        let inputs: Vec<Image> = patches
            .iter()
            .map(|p| sample_input(p, class, gamma))
            .collect::<Result<_>>()?;
        for chunk in inputs.chunks(8) {
            let x = batch_tensor(chunk, dtype, &device)?;
            let (out, _, _) = model.reconstruct(&x, &[class])?;
            total += batch_psnr_mu(&x, &out.linear.detach(), model.mu())? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}

/// Loads a Step-1 checkpoint. A frozen load hands out detached weights and a
/// detached codebook, for use inside Step 2.
pub fn load_olc(dir: &Path, frozen: bool, device: &Device) -> Result<(VqModel, ParamStore, OlcManifest)> {
    let manifest: OlcManifest = checkpoint::read_manifest(dir)?;
    if manifest.kind != KIND {
        return Err(incompatible(dir, format!("expected a `{KIND}` checkpoint, found `{}`", manifest.kind)));
    }
    if manifest.downsample != DOWNSAMPLE {
        return Err(incompatible(
            dir,
            format!("downsample factor {} (expected {DOWNSAMPLE})", manifest.downsample),
        ));
    }
    let dtype = DType::F32;
    let arch = &manifest.config.arch;
    let (cb, cb_manifest) = OverlappedCodebook::load(dir, manifest.config.codebook_mode, dtype, device)?;
    if (cb_manifest.k, cb_manifest.n_z) != (arch.codebook_size, arch.code_dim) {
        return Err(incompatible(
            dir,
            format!(
                "codebook is {}x{} but the manifest describes {}x{}",
                cb_manifest.k, cb_manifest.n_z, arch.codebook_size, arch.code_dim
            ),
        ));
    }
    let store = if frozen {
        ParamStore::frozen(manifest.seed)
    } else {
        ParamStore::new(manifest.seed)
    };
    let codebook = Var::from_tensor(cb.vectors())?;
    let model = VqModel::new(
        &store,
        arch,
        codebook,
        manifest.config.codebook_mode,
        manifest.config.mu,
        dtype,
        device,
    )?;
    store.load(&require_file(dir, GENERATOR_FILE)?)?;
    Ok((model, store, manifest))
}

/// Train a fresh model and write a checkpoint to `out`.
pub fn train_olc(cfg: OlcTrainConfig, scenes: Vec<Scene>, out: &Path, device: &Device) -> Result<OlcTrainer> {
    let log_every = (cfg.steps / 20).max(1);
    let mut trainer = OlcTrainer::new(cfg, scenes, device)?;
    trainer.train(|r, psnr| {
        if r.step % log_every == 0 || psnr.is_some() {
            log::info!(
                "olc step {} total {:.5} rec {:.5} vq {:.5}{}",
                r.step,
                r.losses.total,
                r.losses.rec,
                r.losses.vq,
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
