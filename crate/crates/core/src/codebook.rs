//! Overlapped codebook: exposure-class index windows, windowed
//! nearest-neighbour quantization, the straight-through pass and the VQ loss.
//!
//! With `K` codes and offset `α = K/4`, the three LDR classes each quantize
//! against a `K/2`-wide window that slides by `α`:
//!
//! ```text
//! short  [0,   2α)
//! mid        [α,   3α)
//! long           [2α,  4α)
//! hdr    [0,             4α)
//! ```
//!
//! Adjacent exposures share `α` codes, short and long share none, and the HDR
//! class sees the whole codebook.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_CODEBOOK_SIZE: usize = 1024;
pub const DEFAULT_COMMITMENT: f64 = 0.25;

pub const BLOB_FILE: &str = "codebook.bin";
pub const MANIFEST_FILE: &str = "codebook.manifest";

/// Which input a feature grid was encoded from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum InputClass {
    Short = 1,
    Mid = 2,
    Long = 3,
    Hdr = 4,
}

impl InputClass {
    pub const ALL: [InputClass; 4] = [Self::Short, Self::Mid, Self::Long, Self::Hdr];
    pub const LDR: [InputClass; 3] = [Self::Short, Self::Mid, Self::Long];

    pub fn new(eta: u8) -> Result<Self> {
        match eta {
            1 => Ok(Self::Short),
            2 => Ok(Self::Mid),
            3 => Ok(Self::Long),
            4 => Ok(Self::Hdr),
            _ => Err(invalid(format!("input class {eta} not in 1..=4"))),
        }
    }

    pub fn eta(self) -> u8 {
        self as u8
    }

    /// Zero-based frame index for LDR classes.
    pub fn frame_index(self) -> Option<usize> {
        match self {
            Self::Hdr => None,
            other => Some(other as usize - 1),
        }
    }
}

impl TryFrom<u8> for InputClass {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<InputClass> for u8 {
    fn from(c: InputClass) -> u8 {
        c.eta()
    }
}

impl fmt::Display for InputClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.eta())
    }
}

fn check_size(k: usize) -> Result<()> {
    if k == 0 || k % 4 != 0 {
        return Err(invalid(format!("codebook size {k} must be a positive multiple of 4")));
    }
    Ok(())
}

/// Index window of class `eta` in a codebook of `k` entries.
pub fn segment_range(eta: InputClass, k: usize) -> Result<Range<usize>> {
    check_size(k)?;
    let alpha = k / 4;
    Ok(match eta {
        InputClass::Hdr => 0..k,
        ldr => {
            let i = ldr.eta() as usize;
            (i - 1) * alpha..(i + 1) * alpha
        }
    })
}

/// `Overlapped` restricts LDR classes to their windows; `Vanilla` lets every
/// class search the full codebook (the ablation baseline).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookMode {
    #[default]
    Overlapped,
    Vanilla,
}

/// Index and squared distance of the nearest code inside `window`. Ties go to
/// the lowest index.
pub fn nearest_code(query: &[f64], codes: &[f64], n_z: usize, window: Range<usize>) -> (usize, f64) {
    let mut best = (window.start, f64::INFINITY);
    for k in window {
        let row = &codes[k * n_z..(k + 1) * n_z];
        let d: f64 = query.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Output of [`OverlappedCodebook::quantize`].
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    /// `B×n_z×h×w`, each position a verbatim codebook row.
    pub quantized: Tensor,
    /// Chosen code per position, ordered `(b, y, x)`.
    pub indices: Vec<u32>,
    /// `(B, h, w)` of the index grid.
    pub grid: (usize, usize, usize),
    /// `mean((sg[z̄] − ẑ)²)`
    pub codebook_loss: Tensor,
    /// `mean((sg[ẑ] − z̄)²)`
    pub commitment_loss: Tensor,
}

impl QuantizationResult {
    pub fn vq_loss(&self, beta: f64) -> Result<Tensor> {
        Ok((&self.codebook_loss + (&self.commitment_loss * beta)?)?)
    }
}

/// The `K×n_z` code matrix plus its windowing mode. `vectors` may be the
/// tensor of a trainable [`Var`]; gradients from [`Self::quantize`] then reach
/// exactly the selected rows.
#[derive(Debug, Clone)]
pub struct OverlappedCodebook {
    vectors: Tensor,
    k: usize,
    n_z: usize,
    mode: CodebookMode,
}

impl OverlappedCodebook {
    pub fn new(vectors: Tensor, mode: CodebookMode) -> Result<Self> {
        let (k, n_z) = vectors.dims2()?;
        check_size(k)?;
        if n_z == 0 {
            return Err(invalid("code dimension must be positive"));
        }
        let host = vectors.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if host.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook rows".into()));
        }
        Ok(Self {
            vectors,
            k,
            n_z,
            mode,
        })
    }

    /// Fresh trainable codes drawn i.i.d. from `U[-1/K, 1/K]`.
    pub fn init_var(k: usize, n_z: usize, seed: u64, dtype: DType, device: &Device) -> Result<Var> {
        check_size(k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / k as f64;
        let data: Vec<f64> = (0..k * n_z).map(|_| rng.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(data, (k, n_z), device)?.to_dtype(dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    /// Window offset `α = K/4`.
    pub fn alpha(&self) -> usize {
        self.k / 4
    }

    pub fn mode(&self) -> CodebookMode {
        self.mode
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn with_mode(&self, mode: CodebookMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn window(&self, class: InputClass) -> Range<usize> {
        match self.mode {
            CodebookMode::Overlapped => {
                segment_range(class, self.k).expect("size validated at construction")
            }
            CodebookMode::Vanilla => 0..self.k,
        }
    }

    /// Quantizes a `B×n_z×h×w` feature map; `classes` holds one class per
    /// batch element, or a single class applied to the whole batch.
    pub fn quantize(&self, features: &Tensor, classes: &[InputClass]) -> Result<QuantizationResult> {
        let (b, c, h, w) = features.dims4()?;
        if c != self.n_z {
            return Err(Error::ShapeMismatch(format!(
                "feature depth {c} does not match code dimension {}",
                self.n_z
            )));
        }
        if !(classes.len() == b || classes.len() == 1) {
            return Err(invalid(format!(
                "{} input classes for a batch of {b}",
                classes.len()
            )));
        }
        let flat = features.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        let host = flat.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if host.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features passed to quantize".into()));
        }
        let codes = self.vectors.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;

        let per_item = h * w;
        let mut indices = Vec::with_capacity(b * per_item);
        for (p, query) in host.chunks_exact(c).enumerate() {
            let class = classes[if classes.len() == 1 { 0 } else { p / per_item }];
            let (k, _) = nearest_code(query, &codes, c, self.window(class));
            indices.push(k as u32);
        }

        let quantized = self.lookup(&indices, (b, h, w))?;
        let codebook_loss = (features.detach() - &quantized)?.sqr()?.mean_all()?;
        let commitment_loss = (quantized.detach() - features)?.sqr()?.mean_all()?;
        Ok(QuantizationResult {
            quantized,
            indices,
            grid: (b, h, w),
            codebook_loss,
            commitment_loss,
        })
    }

    /// Gathers codebook rows into a `B×n_z×h×w` map.
    pub fn lookup(&self, indices: &[u32], grid: (usize, usize, usize)) -> Result<Tensor> {
        let (b, h, w) = grid;
        if indices.len() != b * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} indices for a {b}x{h}x{w} grid",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= self.k) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                k: self.k,
            });
        }
        let idx = Tensor::from_slice(indices, indices.len(), self.vectors.device())?;
        let rows = self.vectors.index_select(&idx, 0)?;
        Ok(rows
            .reshape((b, h, w, self.n_z))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Writes `codebook.bin` (little-endian `f32`, row-major `K×n_z`) and the
    /// `key=value` manifest into `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let rows = self.vectors.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut blob = Vec::with_capacity(rows.len() * 4);
        for v in rows {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(BLOB_FILE), blob)?;
        let manifest = CodebookManifest {
            k: self.k,
            n_z: self.n_z,
            alpha: self.alpha(),
            seed,
        };
        fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
        Ok(())
    }

    /// Reads a codebook written by [`Self::save`].
    pub fn load(dir: &Path, mode: CodebookMode, dtype: DType, device: &Device) -> Result<(Self, CodebookManifest)> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path)?;
        let manifest = CodebookManifest::parse(&text).map_err(|reason| Error::IncompatibleCheckpoint {
            path: manifest_path.clone(),
            reason,
        })?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        if blob.len() != manifest.k * manifest.n_z * 4 {
            return Err(Error::IncompatibleCheckpoint {
                path: dir.join(BLOB_FILE),
                reason: format!(
                    "{} bytes for a {}x{} f32 codebook",
                    blob.len(),
                    manifest.k,
                    manifest.n_z
                ),
            });
        }
        let rows: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(rows, (manifest.k, manifest.n_z), device)?.to_dtype(dtype)?;
        Ok((Self::new(t, mode)?, manifest))
    }
}

/// Sidecar describing a codebook blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodebookManifest {
    pub k: usize,
    pub n_z: usize,
    pub alpha: usize,
    pub seed: u64,
}

impl CodebookManifest {
    pub fn to_text(&self) -> String {
        format!("K={}\nn_z={}\nalpha={}\nseed={}\n", self.k, self.n_z, self.alpha, self.seed)
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let (mut k, mut n_z, mut alpha, mut seed) = (None, None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("malformed manifest line `{line}`"))?;
            let value = value.trim();
            let num = |v: &str| v.parse::<u64>().map_err(|e| format!("{key}: {e}"));
            match key.trim() {
                "K" => k = Some(num(value)? as usize),
                "n_z" => n_z = Some(num(value)? as usize),
                "alpha" => alpha = Some(num(value)? as usize),
                "seed" => seed = Some(num(value)?),
                other => return Err(format!("unknown manifest key `{other}`")),
            }
        }
        let m = Self {
            k: k.ok_or("missing K")?,
            n_z: n_z.ok_or("missing n_z")?,
            alpha: alpha.ok_or("missing alpha")?,
            seed: seed.ok_or("missing seed")?,
        };
        if m.k == 0 || m.k % 4 != 0 || m.alpha * 4 != m.k {
            return Err(format!("inconsistent K={} alpha={}", m.k, m.alpha));
        }
        Ok(m)
    }
}

/// Losses of the VQ objective.
#[derive(Debug, Clone)]
pub struct VqLoss {
    pub codebook: Tensor,
    pub commitment: Tensor,
    pub total: Tensor,
}

/// `‖sg[z̄] − ẑ‖² + β‖sg[ẑ] − z̄‖²`, both terms mean-reduced.
pub fn vq_loss(encoded: &Tensor, quantized: &Tensor, beta: f64) -> Result<VqLoss> {
    if encoded.dims() != quantized.dims() {
        return Err(Error::ShapeMismatch(format!(
            "vq_loss: {:?} vs {:?}",
            encoded.dims(),
            quantized.dims()
        )));
    }
    if !(beta >= 0.0) {
        return Err(invalid(format!("commitment weight must be non-negative, got {beta}")));
    }
    let codebook = (encoded.detach() - quantized)?.sqr()?.mean_all()?;
    let commitment = (quantized.detach() - encoded)?.sqr()?.mean_all()?;
    let total = (&codebook + (&commitment * beta)?)?;
    Ok(VqLoss {
        codebook,
        commitment,
        total,
    })
}

/// Forward value is `quantized`; the backward pass copies the incoming
/// gradient to `encoded` unchanged and sends nothing to `quantized`.
pub fn straight_through(encoded: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if encoded.dims() != quantized.dims() {
        return Err(Error::ShapeMismatch(format!(
            "straight_through: {:?} vs {:?}",
            encoded.dims(),
            quantized.dims()
        )));
    }
    // `z̄ - sg[z̄]` is exactly zero, so the sum reproduces ẑ.
    Ok((quantized.detach() + (encoded - encoded.detach())?)?)
}

/// Per-code usage counts over any number of index arrays.
pub fn usage_histogram<'a, I>(batches: I, k: usize) -> Result<Vec<u64>>
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut counts = vec![0u64; k];
    for batch in batches {
        for &i in batch {
            let slot = counts.get_mut(i as usize).ok_or(Error::IndexOutOfRange {
                index: i as usize,
                k,
            })?;
            *slot += 1;
        }
    }
    Ok(counts)
}

/// Number of codes selected at least once.
pub fn used_code_count(histogram: &[u64]) -> usize {
    histogram.iter().filter(|&&c| c > 0).count()
}
