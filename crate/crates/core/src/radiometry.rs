//! Non-learned image math: exposure normalization, triangle-weight fusion,
//! μ-law tone mapping and fidelity metrics.
//!
//! Everything here is a pure function over immutable images. Arithmetic is
//! carried out in `f64` and stored back as `f32`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const DEFAULT_MU: f64 = 5000.0;

/// One low dynamic range capture of a bracket.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrFrame {
    image: Image,
    exposure_time: f64,
    stop: f64,
}

impl LdrFrame {
    /// Builds a frame from its log2 exposure bias; `t = 2^stop` relative to the
    /// reference exposure.
    pub fn from_stop(image: Image, stop: f64) -> Result<Self> {
        if !stop.is_finite() {
            return Err(invalid(format!("exposure stop {stop} is not finite")));
        }
        let exposure_time = stop.exp2();
        Self::validate(&image, exposure_time)?;
        Ok(Self {
            image,
            exposure_time,
            stop,
        })
    }

    pub fn new(image: Image, exposure_time: f64) -> Result<Self> {
        Self::validate(&image, exposure_time)?;
        Ok(Self {
            image,
            exposure_time,
            stop: exposure_time.log2(),
        })
    }

    fn validate(image: &Image, exposure_time: f64) -> Result<()> {
        if !(exposure_time > 0.0 && exposure_time.is_finite()) {
            return Err(invalid(format!(
                "exposure time must be positive, got {exposure_time}"
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("LDR sample {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn exposure_time(&self) -> f64 {
        self.exposure_time
    }

    pub fn stop(&self) -> f64 {
        self.stop
    }

    /// Same exposure, different pixels (used by cropping and augmentation).
    pub fn with_image(&self, image: Image) -> Self {
        Self {
            image,
            exposure_time: self.exposure_time,
            stop: self.stop,
        }
    }
}

/// Linear-radiance image with non-negative finite samples.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage(Image);

impl HdrImage {
    pub fn new(image: Image) -> Result<Self> {
        if let Some(v) = image.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("HDR sample {v} is negative or non-finite")));
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn peak(&self) -> f32 {
        self.0.max_value().max(0.0)
    }

    /// Scales to unit peak; returns the image and the divisor that was used.
    /// An all-zero image is returned unchanged with scale 1.
    pub fn peak_normalized(&self) -> (HdrImage, f64) {
        let peak = self.peak() as f64;
        if peak <= 0.0 {
            return (self.clone(), 1.0);
        }
        let img = self.0.map(|v| (v as f64 / peak) as f32);
        (HdrImage(img), peak)
    }
}

impl Deref for HdrImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

/// Per-pixel blending weights for the short, mid and long exposures.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleWeights {
    pub height: usize,
    pub width: usize,
    pub short: Vec<f32>,
    pub mid: Vec<f32>,
    pub long: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneMapParams {
    pub mu: f64,
}

impl Default for ToneMapParams {
    fn default() -> Self {
        Self { mu: DEFAULT_MU }
    }
}

impl ToneMapParams {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(invalid(format!("tone-map mu must be positive, got {mu}")));
        }
        Ok(Self { mu })
    }
}

/// `Λ_1(x) = max(0, 1 - 2x)`
pub fn lambda_short(x: f64) -> f64 {
    (1.0 - 2.0 * x).max(0.0)
}

/// `Λ_2(x) = 1 - |2x - 1|`
pub fn lambda_mid(x: f64) -> f64 {
    1.0 - (2.0 * x - 1.0).abs()
}

/// `Λ_3(x) = max(0, 2x - 1)`
pub fn lambda_long(x: f64) -> f64 {
    (2.0 * x - 1.0).max(0.0)
}

/// `(α_1, α_2, α_3)` for one reference intensity in `[0, 1]`.
pub fn triangle_weight_triple(x: f64) -> (f64, f64, f64) {
    (1.0 - lambda_short(x), lambda_mid(x), 1.0 - lambda_long(x))
}

/// μ-law compression `log(1 + μx) / log(1 + μ)`.
pub fn mu_law(x: f64, mu: f64) -> f64 {
    (mu * x).ln_1p() / mu.ln_1p()
}

/// Inverse of [`mu_law`].
pub fn inverse_mu_law(y: f64, mu: f64) -> f64 {
    (y * mu.ln_1p()).exp_m1() / mu
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("gamma must be positive, got {gamma}")))
    }
}

/// Maps an LDR frame into the linear domain: `pixels^γ / t`.
pub fn gamma_normalize(frame: &LdrFrame, gamma: f64) -> Result<HdrImage> {
    check_gamma(gamma)?;
    let t = frame.exposure_time();
    let img = frame.image().map(|v| ((v as f64).powf(gamma) / t) as f32);
    Ok(HdrImage(img))
}

/// Re-exposes a linear image: `clip((h·t)^(1/γ), 0, 1)`.
pub fn expose(radiance: &Image, exposure_time: f64, gamma: f64) -> Result<Image> {
    check_gamma(gamma)?;
    if !(exposure_time > 0.0 && exposure_time.is_finite()) {
        return Err(invalid(format!(
            "exposure time must be positive, got {exposure_time}"
        )));
    }
    Ok(radiance.map(|v| {
        let e = (v.max(0.0) as f64 * exposure_time).powf(1.0 / gamma);
        e.min(1.0) as f32
    }))
}

/// Weights from the reference (mid) frame. Each pixel's weight triple is
/// evaluated on the mean of its three channels and shared by all channels.
pub fn triangle_weights(reference: &LdrFrame) -> Result<TriangleWeights> {
    let img = reference.image();
    let n = img.pixel_count();
    let mut w = TriangleWeights {
        height: img.height(),
        width: img.width(),
        short: Vec::with_capacity(n),
        mid: Vec::with_capacity(n),
        long: Vec::with_capacity(n),
    };
    for px in img.data().chunks_exact(Image::CHANNELS) {
        let x = px.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        if !(0.0..=1.0).contains(&x) {
            return Err(invalid(format!("reference intensity {x} outside [0, 1]")));
        }
        let (a1, a2, a3) = triangle_weight_triple(x);
        w.short.push(a1 as f32);
        w.mid.push(a2 as f32);
        w.long.push(a3 as f32);
    }
    Ok(w)
}

/// Triangle-weighted merge of a static three-frame bracket ordered short, mid,
/// long. The weights come from the middle frame.
pub fn fuse_exposures(frames: &[LdrFrame; 3], gamma: f64) -> Result<HdrImage> {
    check_gamma(gamma)?;
    let [s1, s2, s3] = frames;
    s1.image().ensure_same_shape(s2.image(), "fuse_exposures")?;
    s1.image().ensure_same_shape(s3.image(), "fuse_exposures")?;
    let times = [s1.exposure_time(), s2.exposure_time(), s3.exposure_time()];
    if times[0] == times[1] || times[1] == times[2] || times[0] == times[2] {
        return Err(invalid(format!("exposure times must be distinct, got {times:?}")));
    }

    let weights = triangle_weights(s2)?;
    let (h, w) = s2.image().dims();
    let mut out = Vec::with_capacity(h * w * Image::CHANNELS);
    let planes = [s1.image().data(), s2.image().data(), s3.image().data()];
    for p in 0..h * w {
        let alphas = [
            weights.short[p] as f64,
            weights.mid[p] as f64,
            weights.long[p] as f64,
        ];
        let total: f64 = alphas.iter().sum();
        // Λ_1 + Λ_3 ≤ 1 everywhere, so α_1 + α_3 ≥ 1.
        assert!(total > 0.0, "triangle weights sum to zero at pixel {p}");
        for c in 0..Image::CHANNELS {
            let mut acc = 0.0;
            for i in 0..3 {
                let s = planes[i][p * Image::CHANNELS + c] as f64;
                acc += alphas[i] * s.powf(gamma) / times[i];
            }
            out.push((acc / total) as f32);
        }
    }
    Ok(HdrImage(Image::new(h, w, out)?))
}

/// Elementwise μ-law tone map of a unit-range linear image.
pub fn tonemap(h: &HdrImage, params: ToneMapParams) -> Result<Image> {
    tonemap_image(h.image(), params)
}

pub(crate) fn tonemap_image(img: &Image, params: ToneMapParams) -> Result<Image> {
    ToneMapParams::new(params.mu)?;
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!(
            "tone mapping expects samples in [0, 1], found {v}"
        )));
    }
    Ok(img.map(|v| mu_law(v as f64, params.mu) as f32))
}

fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "metric inputs")?;
    let n = a.data().len();
    if n == 0 {
        return Err(invalid("metric on an empty image"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB. Identical images yield `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid(format!("PSNR peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over the three channels, with an 11×11
/// Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03 and unit dynamic range.
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "ssim inputs")?;
    let (h, w) = a.dims();
    if h == 0 || w == 0 {
        return Err(invalid("ssim on an empty image"));
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let kernel = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    for c in 0..Image::CHANNELS {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * 3 + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * 3 + c] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let (mu_a, oh, ow) = filter_valid(&pa, h, w, &kernel);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &kernel);
        let (aa, _, _) = filter_valid(&prod(&pa, &pa), h, w, &kernel);
        let (bb, _, _) = filter_valid(&prod(&pb, &pb), h, w, &kernel);
        let (ab, _, _) = filter_valid(&prod(&pa, &pb), h, w, &kernel);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / Image::CHANNELS as f64)
}

/// PSNR/SSIM in the linear and tone-mapped domains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdrMetrics {
    pub psnr_mu: f64,
    pub psnr_linear: f64,
    pub ssim_mu: f64,
    pub ssim_linear: f64,
}

impl HdrMetrics {
    /// Both images must be unit-range linear HDR.
    pub fn compute(prediction: &Image, ground_truth: &Image, params: ToneMapParams) -> Result<Self> {
        prediction.ensure_same_shape(ground_truth, "metrics")?;
        let tp = tonemap_image(prediction, params)?;
        let tg = tonemap_image(ground_truth, params)?;
        Ok(Self {
            psnr_mu: psnr(&tp, &tg, 1.0)?,
            psnr_linear: psnr(prediction, ground_truth, 1.0)?,
            ssim_mu: ssim(&tp, &tg)?,
            ssim_linear: ssim(prediction, ground_truth)?,
        })
    }
}

/// PSNR between the tone-mapped versions of two unit-range images.
pub fn psnr_mu(prediction: &Image, ground_truth: &Image, params: ToneMapParams) -> Result<f64> {
    let tp = tonemap_image(prediction, params)?;
    let tg = tonemap_image(ground_truth, params)?;
    psnr(&tp, &tg, 1.0)
}

pub(crate) fn ensure_finite(img: &Image, what: &str) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(v: f32, t: f64) -> LdrFrame {
        LdrFrame::new(Image::filled(4, 4, v), t).unwrap()
    }

    fn all_close(img: &Image, v: f64, tol: f64) -> bool {
        img.data().iter().all(|&x| (x as f64 - v).abs() <= tol)
    }

    #[test]
    fn gamma_normalize_examples() {
        assert!(all_close(&gamma_normalize(&frame(1.0, 1.0), 2.2).unwrap(), 1.0, 0.0));
        assert!(all_close(&gamma_normalize(&frame(0.5, 4.0), 2.0).unwrap(), 0.0625, 0.0));
        assert!(all_close(&gamma_normalize(&frame(0.0, 0.3), 1.7).unwrap(), 0.0, 0.0));
    }

    #[test]
    fn gamma_normalize_rejects_bad_gamma() {
        assert!(gamma_normalize(&frame(0.5, 1.0), 0.0).is_err());
        assert!(gamma_normalize(&frame(0.5, 1.0), -2.0).is_err());
    }

    #[test]
    fn frames_reject_bad_exposure_and_range() {
        assert!(LdrFrame::new(Image::zeros(2, 2), 0.0).is_err());
        assert!(LdrFrame::new(Image::zeros(2, 2), -1.0).is_err());
        assert!(LdrFrame::new(Image::filled(2, 2, 1.5), 1.0).is_err());
        let f = LdrFrame::from_stop(Image::zeros(2, 2), -2.0).unwrap();
        assert_eq!(f.exposure_time(), 0.25);
    }

    #[test]
    fn triangle_weight_examples() {
        assert_eq!(triangle_weight_triple(0.5), (1.0, 1.0, 1.0));
        assert_eq!(triangle_weight_triple(0.0), (0.0, 0.0, 1.0));
        assert_eq!(triangle_weight_triple(0.25), (0.5, 0.5, 1.0));
        let w = triangle_weights(&frame(0.25, 1.0)).unwrap();
        assert!(w.short.iter().all(|&a| a == 0.5));
        assert!(w.long.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn triangle_weights_use_channel_mean() {
        let img = Image::from_fn(1, 1, |_, _, c| [0.0, 0.25, 0.5][c]);
        let w = triangle_weights(&LdrFrame::new(img, 1.0).unwrap()).unwrap();
        let (a1, a2, a3) = triangle_weight_triple(0.25);
        assert_eq!((w.short[0], w.mid[0], w.long[0]), (a1 as f32, a2 as f32, a3 as f32));
    }

    #[test]
    fn fuse_single_pixel_hand_example() {
        // H = 0.04, t = (0.25, 1, 4), γ = 2 → S = (0.1, 0.2, 0.4).
        let mk = |v: f32, t| LdrFrame::new(Image::filled(1, 1, v), t).unwrap();
        let frames = [mk(0.1, 0.25), mk(0.2, 1.0), mk(0.4, 4.0)];
        let h = fuse_exposures(&frames, 2.0).unwrap();
        assert!(all_close(&h, 0.04, 1e-8));
    }

    #[test]
    fn fuse_black_frames_is_black() {
        let frames = [frame(0.0, 0.25), frame(0.0, 1.0), frame(0.0, 4.0)];
        assert!(all_close(&fuse_exposures(&frames, 2.2).unwrap(), 0.0, 0.0));
    }

    #[test]
    fn fuse_rejects_shape_mismatch_and_equal_times() {
        let odd = LdrFrame::new(Image::zeros(3, 4), 4.0).unwrap();
        assert!(matches!(
            fuse_exposures(&[frame(0.1, 0.25), frame(0.1, 1.0), odd], 2.2),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(fuse_exposures(&[frame(0.1, 1.0), frame(0.1, 1.0), frame(0.1, 4.0)], 2.2).is_err());
    }

    #[test]
    fn tonemap_examples() {
        let p = ToneMapParams::default();
        assert_eq!(mu_law(0.0, p.mu), 0.0);
        assert_eq!(mu_law(1.0, p.mu), 1.0);
        // log(51)/log(5001), evaluated to 30 digits offline.
        assert!((mu_law(0.01, 5000.0) - 0.461_623_122_661_288).abs() < 1e-12);
        let neg = HdrImage(Image::filled(1, 1, -0.1));
        assert!(tonemap(&neg, p).is_err());
        assert!(ToneMapParams::new(0.0).is_err());
    }

    #[test]
    fn psnr_and_ssim_examples() {
        let a = Image::from_fn(16, 16, |y, x, c| ((y * 16 + x) as f32 / 300.0) + c as f32 * 0.05);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.01);
        assert!((psnr(&a, &b, 1.0).unwrap() - 40.0).abs() < 1e-4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() < 1.0);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn ssim_handles_tiny_images() {
        let a = Image::from_fn(4, 6, |y, x, _| (y + x) as f32 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_bundle_identical() {
        let a = Image::filled(12, 12, 0.3);
        let m = HdrMetrics::compute(&a, &a, ToneMapParams::default()).unwrap();
        assert!(m.psnr_mu.is_infinite() && m.psnr_linear.is_infinite());
        assert!((m.ssim_mu - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tonemap_is_strictly_monotone(x in 0.0f64..1.0, dx in 1e-9f64..1.0) {
            let y = (x + dx).min(1.0);
            prop_assume!(y > x);
            prop_assert!(mu_law(x, DEFAULT_MU) < mu_law(y, DEFAULT_MU));
        }

        #[test]
        fn alpha_short_plus_long_is_one_plus_mid(x in 0.0f64..=1.0) {
            let (a1, a2, a3) = triangle_weight_triple(x);
            prop_assert!((a1 + a3 - (1.0 + a2)).abs() < 1e-12);
            prop_assert!(a1 + a2 + a3 >= 1.0);
        }

        #[test]
        fn renormalization_round_trip(v in 0.0f32..=1.0, stop in -3i32..=3, gamma in 1.0f64..3.0) {
            let f = LdrFrame::from_stop(Image::filled(1, 1, v), stop as f64).unwrap();
            let lin = gamma_normalize(&f, gamma).unwrap();
            let back = expose(&lin, f.exposure_time(), gamma).unwrap();
            prop_assert!((back.data()[0] - v).abs() <= 1e-7);
        }

        #[test]
        fn psnr_invariant_to_channel_permutation(seed in 0u64..1000, perm in 0usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Image::from_fn(6, 5, |_, _, _| rng.random::<f32>());
            let b = Image::from_fn(6, 5, |_, _, _| rng.random::<f32>());
            let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let o = orders[perm];
            let permute = |img: &Image| Image::from_fn(6, 5, |y, x, c| img.get(y, x, o[c]));
            let p = ToneMapParams::default();
            let before = psnr_mu(&a, &b, p).unwrap();
            let after = psnr_mu(&permute(&a), &permute(&b), p).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
