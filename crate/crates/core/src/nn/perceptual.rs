//! Frozen feature extractor for the perceptual loss.
//!
//! Two backbones are available: a small seeded random conv stack, which needs
//! no external weights, and the first seven convolutions of VGG16 (through
//! `relu3_3`) loaded from a safetensors file using torchvision parameter
//! names (`features.{0,2,5,7,10,12,14}.{weight,bias}`).

use std::path::PathBuf;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;

const VGG_LAYERS: [(usize, usize, usize); 7] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
];
/// Indices into `VGG_LAYERS` after which features are tapped (relu1_2, relu2_2, relu3_3).
const VGG_TAPS: [usize; 3] = [1, 3, 6];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerceptualConfig {
    /// Random conv stack; each entry is one stage (3×3 conv + ReLU), stages
    /// after the first downsample by 2. Features are tapped after every stage.
    Random { widths: Vec<usize>, seed: u64 },
    Vgg16 { weights: PathBuf },
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self::Random {
            widths: vec![8, 16, 32],
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(Conv2d),
    Pool,
    Tap,
}

#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    stages: Vec<Stage>,
    normalize: Option<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub fn new(config: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        match config {
            PerceptualConfig::Random { widths, seed } => Self::random(widths, *seed, dtype, device),
            PerceptualConfig::Vgg16 { weights } => Self::vgg16(weights, dtype, device),
        }
    }

    fn random(widths: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(invalid("perceptual widths must be non-empty and positive"));
        }
        let store = ParamStore::frozen(seed);
        let vb = store.var_builder(dtype, device);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in widths.iter().enumerate() {
            let cfg = Conv2dConfig {
                padding: 1,
                stride: if i == 0 { 1 } else { 2 },
                ..Default::default()
            };
            stages.push(Stage::Conv(candle_nn::conv2d(c_in, c, 3, cfg, vb.pp(format!("stage{i}")))?));
            stages.push(Stage::Tap);
            c_in = c;
        }
        Ok(Self {
            stages,
            normalize: None,
        })
    }

    fn vgg16(path: &std::path::Path, dtype: DType, device: &Device) -> Result<Self> {
        let stored = candle_core::safetensors::load(path, device)?;
        let incompatible = |reason: String| Error::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut stages = Vec::new();
        for (i, &(index, c_in, c_out)) in VGG_LAYERS.iter().enumerate() {
            let get = |suffix: &str, dims: &[usize]| -> Result<Tensor> {
                let name = format!("features.{index}.{suffix}");
                let t = stored
                    .get(&name)
                    .ok_or_else(|| incompatible(format!("missing `{name}`")))?;
                if t.dims() != dims {
                    return Err(incompatible(format!("`{name}` has shape {:?}, expected {dims:?}", t.dims())));
                }
                Ok(t.to_dtype(dtype)?.detach())
            };
            let w = get("weight", &[c_out, c_in, 3, 3])?;
            let b = get("bias", &[c_out])?;
            stages.push(Stage::Conv(Conv2d::new(w, Some(b), cfg)));
            if VGG_TAPS.contains(&i) {
                stages.push(Stage::Tap);
                if i != VGG_LAYERS.len() - 1 {
                    stages.push(Stage::Pool);
                }
            }
        }
        let mean = Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            stages,
            normalize: Some((mean, std)),
        })
    }

    /// Features at every tap for a `B×3×H×W` batch in `[0, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = match &self.normalize {
            Some((mean, std)) => x.broadcast_sub(mean)?.broadcast_div(std)?,
            None => x.clone(),
        };
        let mut taps = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv(c) => h = c.forward(&h)?.relu()?,
                Stage::Pool => h = h.max_pool2d(2)?,
                Stage::Tap => taps.push(h.clone()),
            }
        }
        Ok(taps)
    }

    /// `Σ_l mean |φ_l(a) − φ_l(b)|`.
    pub fn loss(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for (x, y) in fa.iter().zip(&fb) {
            total = (total + crate::nn::l1(x, y)?)?;
        }
        Ok(total)
    }
}
