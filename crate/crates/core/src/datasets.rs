//! Scene ingestion, synthetic exposure brackets, patch extraction and
//! augmentation.
//!
//! On disk a scene is a directory holding `input_1.tif`, `input_2.tif`,
//! `input_3.tif` (short, mid, long), `exposure.txt` with one log2 stop per
//! line, and optionally a ground-truth `gt.hdr` (Radiance RGBE) or `gt.exr`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Dihedral, Image};
use crate::radiometry::{HdrImage, LdrFrame, DEFAULT_GAMMA};

pub const INPUT_FILES: [&str; 3] = ["input_1.tif", "input_2.tif", "input_3.tif"];
pub const EXPOSURE_FILE: &str = "exposure.txt";
pub const HDR_FILE: &str = "gt.hdr";
pub const EXR_FILE: &str = "gt.exr";

/// Three frames ordered short → mid → long; the mid frame is the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureStack {
    frames: [LdrFrame; 3],
    scene_id: String,
}

impl ExposureStack {
    /// 1-based position of the reference frame.
    pub const REFERENCE_INDEX: usize = 2;

    pub fn new(frames: [LdrFrame; 3], scene_id: impl Into<String>) -> Result<Self> {
        let dims = frames[0].image().dims();
        if frames.iter().any(|f| f.image().dims() != dims) {
            return Err(Error::ShapeMismatch("exposure stack frames differ in size".into()));
        }
        let t: Vec<f64> = frames.iter().map(|f| f.exposure_time()).collect();
        if !(t[0] < t[1] && t[1] < t[2]) {
            return Err(invalid(format!("exposure times {t:?} are not strictly increasing")));
        }
        Ok(Self {
            frames,
            scene_id: scene_id.into(),
        })
    }

    pub fn frames(&self) -> &[LdrFrame; 3] {
        &self.frames
    }

    pub fn reference(&self) -> &LdrFrame {
        &self.frames[Self::REFERENCE_INDEX - 1]
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].image().dims()
    }

    pub fn exposure_times(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.frames[i].exposure_time())
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        self.map_images(|im| im.crop(y, x, h, w))
    }

    fn map_images(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Self> {
        let [a, b, c] = &self.frames;
        Ok(Self {
            frames: [
                a.with_image(f(a.image())?),
                b.with_image(f(b.image())?),
                c.with_image(f(c.image())?),
            ],
            scene_id: self.scene_id.clone(),
        })
    }
}

/// An exposure stack with optional unit-peak ground truth.
///
/// `radiance_scale` relates the two: a gamma-normalized frame divided by it is
/// in the units of the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub stack: ExposureStack,
    pub ground_truth: Option<HdrImage>,
    pub radiance_scale: f64,
}

impl Scene {
    pub fn new(stack: ExposureStack, ground_truth: Option<HdrImage>, radiance_scale: f64) -> Result<Self> {
        if let Some(gt) = &ground_truth {
            if gt.dims() != stack.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "ground truth {:?} vs frames {:?}",
                    gt.dims(),
                    stack.dims()
                )));
            }
        }
        if !(radiance_scale > 0.0 && radiance_scale.is_finite()) {
            return Err(invalid(format!("radiance scale must be positive, got {radiance_scale}")));
        }
        Ok(Self {
            stack,
            ground_truth,
            radiance_scale,
        })
    }

    pub fn id(&self) -> &str {
        self.stack.scene_id()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.stack.dims()
    }

    pub fn ground_truth(&self) -> Result<&HdrImage> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| invalid(format!("scene `{}` has no ground truth", self.id())))
    }

    /// Congruent crop of all frames and the ground truth.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            stack: self.stack.map_images(|im| im.crop(y, x, h, w))?,
            ground_truth: match &self.ground_truth {
                Some(gt) => Some(HdrImage::new(gt.crop(y, x, h, w)?)?),
                None => None,
            },
            radiance_scale: self.radiance_scale,
        })
    }

    /// The same dihedral transform applied to every image.
    pub fn transformed(&self, t: Dihedral) -> Self {
        Self {
            stack: self.stack.map_images(|im| Ok(im.dihedral(t))).expect("infallible"),
            ground_truth: self
                .ground_truth
                .as_ref()
                .map(|gt| HdrImage::new(gt.dihedral(t)).expect("transform keeps values")),
            radiance_scale: self.radiance_scale,
        }
    }
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::SceneLoad {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses `exposure.txt`: three log2 stops, strictly increasing. Both ASCII
/// `-` and the Unicode minus sign are accepted.
pub fn parse_stops(text: &str) -> std::result::Result<[f64; 3], String> {
    let stops: Vec<f64> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.replace('\u{2212}', "-")
                .parse::<f64>()
                .map_err(|e| format!("bad stop `{l}`: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    let stops: [f64; 3] = stops
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 3 stops, found {}", v.len()))?;
    if !(stops[0] < stops[1] && stops[1] < stops[2]) {
        return Err(format!("stops {stops:?} are not strictly increasing"));
    }
    Ok(stops)
}

/// Reads an LDR image and scales it to `[0, 1]` by its container bit depth.
pub fn read_ldr(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| load_error(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            img.to_rgb32f().into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
        }
        _ => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    Image::new(h, w, data)
}

/// Writes `[0, 1]` samples as a 16-bit RGB TIFF.
pub fn write_ldr(path: &Path, image: &Image) -> Result<()> {
    let raw: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer sized from image");
    buf.save(path)?;
    Ok(())
}

/// Reads a linear HDR image (Radiance or OpenEXR).
pub fn read_hdr(path: &Path) -> Result<HdrImage> {
    let img = image::open(path).map_err(|e| load_error(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.to_rgb32f().into_raw();
    HdrImage::new(Image::new(h, w, data)?).map_err(|e| load_error(path, e.to_string()))
}

/// Writes a Radiance RGBE file.
pub fn write_hdr(path: &Path, image: &Image) -> Result<()> {
    let pixels: Vec<Rgb<f32>> = image.data().chunks_exact(3).map(|p| Rgb([p[0], p[1], p[2]])).collect();
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    image::codecs::hdr::HdrEncoder::new(file).encode(&pixels, image.width(), image.height())?;
    Ok(())
}

/// Writes an 8-bit μ-law tone-mapped preview (format chosen by extension).
pub fn write_preview(path: &Path, image: &Image, mu: f64) -> Result<()> {
    let peak = image.max_value().max(f32::MIN_POSITIVE);
    let unit = image.map(|v| (v / peak).max(0.0));
    let tone = crate::radiometry::tonemap_image(&unit, crate::radiometry::ToneMapParams::new(mu)?)?;
    let raw: Vec<u8> = tone.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer sized from image");
    buf.save(path)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    if !dir.is_dir() {
        return Err(load_error(dir, "not a directory"));
    }
    let stops_path = dir.join(EXPOSURE_FILE);
    let text = fs::read_to_string(&stops_path).map_err(|e| load_error(&stops_path, e.to_string()))?;
    let stops = parse_stops(&text).map_err(|r| load_error(&stops_path, r))?;
    let mut frames = Vec::with_capacity(3);
    for (name, stop) in INPUT_FILES.iter().zip(stops) {
        let path = dir.join(name);
        if !path.exists() {
            return Err(load_error(&path, "missing input frame"));
        }
        let image = read_ldr(&path)?;
        frames.push(LdrFrame::from_stop(image, stop)?);
    }
    let frames: [LdrFrame; 3] = frames.try_into().expect("three frames");
    let scene_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stack = ExposureStack::new(frames, scene_id).map_err(|e| load_error(dir, e.to_string()))?;

    let gt_path = [HDR_FILE, EXR_FILE].iter().map(|n| dir.join(n)).find(|p| p.exists());
    let (ground_truth, scale) = match gt_path {
        Some(p) => {
            let raw = read_hdr(&p)?;
            if raw.dims() != stack.dims() {
                return Err(load_error(
                    &p,
                    format!("ground truth is {:?} but frames are {:?}", raw.dims(), stack.dims()),
                ));
            }
            let (gt, scale) = raw.peak_normalized();
            (Some(gt), scale)
        }
        None => (None, 1.0),
    };
    Scene::new(stack, ground_truth, scale)
}

/// Writes a scene in the directory layout read by [`load_scene`]. The ground
/// truth is stored in stack units (multiplied back by `radiance_scale`).
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (frame, name) in scene.stack.frames().iter().zip(INPUT_FILES) {
        write_ldr(&dir.join(name), frame.image())?;
    }
    let stops: String = scene.stack.frames().iter().map(|f| format!("{}\n", f.stop())).collect();
    fs::write(dir.join(EXPOSURE_FILE), stops)?;
    if let Some(gt) = &scene.ground_truth {
        let scale = scene.radiance_scale;
        write_hdr(&dir.join(HDR_FILE), &gt.map(|v| (v as f64 * scale) as f32))?;
    }
    Ok(())
}

/// Scene directories directly under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(EXPOSURE_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let dirs = scene_dirs(root)?;
    if dirs.is_empty() {
        return Err(load_error(root, "no scene directories found"));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

/// Parameters of the procedural exposure-bracket generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// log2 exposure biases, short → long.
    pub stops: [f64; 3],
    /// Translation length in pixels applied to the short and long frames, in
    /// a random direction per frame. The ground truth follows the mid frame.
    pub motion: f64,
    /// Target fraction of long-exposure samples clipped at 1. Zero disables
    /// calibration and leaves the radiance field's contrast untouched.
    pub saturation: f64,
    /// Multiplier between unit-peak radiance and sensor exposure. Values
    /// above 1 saturate the brightest parts of the mid frame as well.
    pub exposure_gain: f64,
    /// Standard deviation of additive Gaussian noise on LDR samples.
    pub noise: f64,
    pub gamma: f64,
    /// Round LDR samples to 16-bit code values.
    pub quantize: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            stops: [-2.0, 0.0, 2.0],
            motion: 0.0,
            saturation: 0.1,
            exposure_gain: 1.0,
            noise: 0.0,
            gamma: DEFAULT_GAMMA,
            quantize: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(invalid(format!(
                "synthetic size {}x{} must be positive multiples of 8",
                self.height, self.width
            )));
        }
        let s = self.stops;
        if !(s[0] < s[1] && s[1] < s[2]) {
            return Err(invalid(format!("stops {s:?} are not strictly increasing")));
        }
        if !(0.0..1.0).contains(&self.saturation) {
            return Err(invalid("saturation fraction must lie in [0, 1)"));
        }
        if self.saturation > 0.0 && self.exposure_gain * s[2].exp2() <= 1.0 {
            return Err(invalid("long exposure cannot saturate with this gain"));
        }
        if !(self.exposure_gain > 0.0 && self.noise >= 0.0 && self.motion >= 0.0 && self.gamma > 0.0) {
            return Err(invalid("gain and gamma must be positive; motion and noise non-negative"));
        }
        Ok(())
    }
}

/// Smooth random radiance texture evaluated at continuous coordinates.
struct RadianceField {
    blobs: Vec<([f64; 2], f64, [f64; 3])>,
    waves: Vec<([f64; 2], f64, [f64; 3])>,
    highlights: Vec<([f64; 2], f64)>,
    floor: f64,
}

impl RadianceField {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let size = h.min(w) as f64;
        let color = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.random_range(0.3..1.0));
        let blobs = (0..6)
            .map(|_| {
                let c = [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)];
                (c, rng.random_range(0.1..0.35) * size, color(rng))
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(1.5..5.0) * std::f64::consts::TAU / size;
                let k = [freq * angle.sin(), freq * angle.cos()];
                (k, rng.random_range(0.0..std::f64::consts::TAU), color(rng))
            })
            .collect();
        let highlights = (0..2)
            .map(|_| {
                let c = [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)];
                (c, rng.random_range(0.04..0.08) * size)
            })
            .collect();
        Self {
            blobs,
            waves,
            highlights,
            floor: 0.02,
        }
    }

    fn eval(&self, y: f64, x: f64) -> [f64; 3] {
        let mut v = [self.floor; 3];
        for (c, s, col) in &self.blobs {
            let g = (-((y - c[0]).powi(2) + (x - c[1]).powi(2)) / (2.0 * s * s)).exp();
            for ch in 0..3 {
                v[ch] += 0.5 * g * col[ch];
            }
        }
        for (k, phase, col) in &self.waves {
            let s = 0.5 + 0.5 * (k[0] * y + k[1] * x + phase).sin();
            for ch in 0..3 {
                v[ch] += 0.15 * s * col[ch];
            }
        }
        for (c, s) in &self.highlights {
            let g = (-((y - c[0]).powi(2) + (x - c[1]).powi(2)) / (2.0 * s * s)).exp();
            for ch in v.iter_mut() {
                *ch += 1.5 * g;
            }
        }
        v
    }
}

/// Procedurally generated scene; a pure function of `(cfg, seed)`.
pub fn synth_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = RadianceField::random(&mut rng, h, w);
    let shifts: [[f64; 2]; 3] = [0, 1, 2].map(|i| {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        if i == 1 {
            [0.0, 0.0]
        } else {
            [cfg.motion * angle.sin(), cfg.motion * angle.cos()]
        }
    });

    let sample = |shift: [f64; 2]| -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                out.extend(field.eval(y as f64 + shift[0], x as f64 + shift[1]));
            }
        }
        out
    };
    let base_ref = sample(shifts[1]);
    let peak = base_ref.iter().cloned().fold(f64::MIN, f64::max);

    // Contrast exponent so that the requested share of long-frame samples
    // reaches the clipping point.
    let t_long = cfg.stops[2].exp2();
    let exponent = if cfg.saturation > 0.0 {
        let mut sorted: Vec<f64> = base_ref.iter().map(|v| v / peak).collect();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let pos = ((1.0 - cfg.saturation) * (sorted.len() - 1) as f64).round() as usize;
        let q = sorted[pos].min(1.0 - 1e-9);
        (1.0 / (cfg.exposure_gain * t_long)).ln() / q.ln()
    } else {
        1.0
    };
    let radiance = |v: f64| (v / peak).max(0.0).powf(exponent);

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid deviation");
    let mut frames = Vec::with_capacity(3);
    for (i, &stop) in cfg.stops.iter().enumerate() {
        let base = if i == 1 { base_ref.clone() } else { sample(shifts[i]) };
        let t = stop.exp2();
        let data: Vec<f32> = base
            .iter()
            .map(|&v| {
                let mut l = (radiance(v) * cfg.exposure_gain * t).powf(1.0 / cfg.gamma);
                if cfg.noise > 0.0 {
                    l += noise.sample(&mut rng);
                }
                let l = l.clamp(0.0, 1.0);
                if cfg.quantize {
                    ((l * 65535.0).round() / 65535.0) as f32
                } else {
                    l as f32
                }
            })
            .collect();
        frames.push(LdrFrame::from_stop(Image::new(h, w, data)?, stop)?);
    }
    let gt: Vec<f32> = base_ref.iter().map(|&v| radiance(v) as f32).collect();
    let stack = ExposureStack::new(frames.try_into().expect("three frames"), format!("synth_{seed:04}"))?;
    Scene::new(stack, Some(HdrImage::new(Image::new(h, w, gt)?)?), cfg.exposure_gain)
}

/// Top-left corners of all `size`×`size` patches at the given stride.
pub fn patch_coords(height: usize, width: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return Err(invalid("patch size and stride must be positive"));
    }
    if height < size || width < size {
        return Err(invalid(format!("scene {height}x{width} is smaller than patch size {size}")));
    }
    let ys = (height - size) / stride + 1;
    let xs = (width - size) / stride + 1;
    Ok((0..ys)
        .flat_map(|i| (0..xs).map(move |j| (i * stride, j * stride)))
        .collect())
}

pub fn patchify(scene: &Scene, size: usize, stride: usize) -> Result<Vec<Scene>> {
    let (h, w) = scene.dims();
    patch_coords(h, w, size, stride)?
        .into_iter()
        .map(|(y, x)| scene.crop(y, x, size, size))
        .collect()
}

/// One of the eight flips/rotations, chosen uniformly, applied congruently.
pub fn augment(example: &Scene, rng: &mut impl Rng) -> Scene {
    let t = Dihedral::new(rng.random_range(0..8u8)).expect("index below 8");
    example.transformed(t)
}

/// Deterministic patch batches over a fixed scene set: batch `n` depends only
/// on the seed and `n`, never on how many batches were drawn before.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    scenes: Vec<Scene>,
    index: Vec<(usize, usize, usize)>,
    size: usize,
    augment: bool,
    seed: u64,
}

impl PatchSampler {
    pub fn new(scenes: Vec<Scene>, size: usize, stride: usize, augment: bool, seed: u64) -> Result<Self> {
        let mut index = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            scene.ground_truth()?;
            let (h, w) = scene.dims();
            index.extend(patch_coords(h, w, size, stride)?.into_iter().map(|(y, x)| (s, y, x)));
        }
        if index.is_empty() {
            return Err(invalid("patch sampler needs at least one scene"));
        }
        Ok(Self {
            scenes,
            index,
            size,
            augment,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn patch(&self, i: usize) -> Result<Scene> {
        let (s, y, x) = self.index[i];
        self.scenes[s].crop(y, x, self.size, self.size)
    }

    pub fn batch(&self, n: usize, batch_size: usize) -> Result<Vec<Scene>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..batch_size)
            .map(|_| {
                let p = self.patch(rng.random_range(0..self.index.len()))?;
                Ok(if self.augment { augment(&p, &mut rng) } else { p })
            })
            .collect()
    }
}
