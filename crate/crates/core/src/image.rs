//! Interleaved RGB float image used throughout the crate.
//!
//! Pixels are stored row-major, channel-interleaved (`H×W×3`). Conversion to
//! and from candle tensors uses the `3×H×W` layout the networks expect.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An `H×W×3` image of `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * Self::CHANNELS + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `h×w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {h}x{w} at ({y},{x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * Self::CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * Self::CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * Self::CHANNELS]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Applies one of the eight symmetries of the square.
    pub fn dihedral(&self, t: Dihedral) -> Self {
        let mut out = if t.flips() { self.flip_horizontal() } else { self.clone() };
        for _ in 0..t.quarter_turns() {
            out = out.rotate_cw();
        }
        out
    }

    fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    fn rotate_cw(&self) -> Self {
        // Output is W×H; out(y, x) = in(H-1-x, y).
        Self::from_fn(self.width, self.height, |y, x, c| {
            self.get(self.height - 1 - x, y, c)
        })
    }

    /// `3×H×W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let hw = self.pixel_count();
        let mut planar = vec![0f32; hw * Self::CHANNELS];
        for (i, px) in self.data.chunks_exact(Self::CHANNELS).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                planar[c * hw + i] = v;
            }
        }
        let t = Tensor::from_vec(planar, (Self::CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `3×H×W` or `1×3×H×W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a 3xHxW tensor, got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let planar = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let hw = h * w;
        let mut data = vec![0f32; hw * Self::CHANNELS];
        for i in 0..hw {
            for ch in 0..Self::CHANNELS {
                data[i * Self::CHANNELS + ch] = planar[ch * hw + i];
            }
        }
        Self::new(h, w, data)
    }
}

/// Element of the dihedral group D4: an optional horizontal flip followed by
/// `0..4` clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(index: u8) -> Result<Self> {
        if index < 8 {
            Ok(Self(index))
        } else {
            Err(Error::InvalidArgument(format!("dihedral index {index} not in 0..8")))
        }
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn flips(self) -> bool {
        self.0 & 4 != 0
    }

    pub fn quarter_turns(self) -> u8 {
        self.0 & 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| (y * 100 + x * 10 + c) as f32)
    }

    #[test]
    fn crop_copies_window() {
        let img = ramp(4, 5);
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.dims(), (2, 3));
        assert_eq!(c.get(0, 0, 1), img.get(1, 2, 1));
        assert_eq!(c.get(1, 2, 2), img.get(2, 4, 2));
        assert!(img.crop(3, 0, 2, 2).is_err());
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let img = ramp(3, 4);
        let mut r = img.clone();
        for _ in 0..4 {
            r = r.rotate_cw();
        }
        assert_eq!(r, img);
        assert_eq!(img.rotate_cw().dims(), (4, 3));
    }

    #[test]
    fn dihedral_elements_are_distinct() {
        let img = ramp(3, 3);
        let outs: Vec<Image> = Dihedral::all().map(|t| img.dihedral(t)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(2, 3);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 2, 3]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
