//! Building blocks shared by both networks.

mod deform;
mod params;
mod perceptual;

pub use deform::DeformConv2d;
pub use params::ParamStore;
pub use perceptual::{PerceptualConfig, PerceptualExtractor};

use candle_core::{Module, Tensor};
use candle_nn::{init::Init, Conv2d, Conv2dConfig, VarBuilder};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

/// Square convolution with "same" padding.
pub fn conv(vb: VarBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(c_in, c_out, kernel, cfg, vb)?)
}

/// Convolution whose weight and bias start at exactly zero.
pub fn zero_conv(vb: VarBuilder, c_in: usize, c_out: usize, kernel: usize) -> Result<Conv2d> {
    let w = vb.get_with_hints((c_out, c_in, kernel, kernel), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(c_out, "bias", Init::Const(0.0))?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// `x + conv(leaky(conv(leaky(x))))`
#[derive(Debug, Clone)]
pub struct ResBlock {
    first: Conv2d,
    second: Conv2d,
}

impl ResBlock {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            first: conv(vb.pp("conv1"), channels, channels, 3, 1)?,
            second: conv(vb.pp("conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.first.forward(&leaky(x)?)?;
        let h = self.second.forward(&leaky(&h)?)?;
        Ok((x + h)?)
    }
}

/// Tensor version of [`crate::radiometry::mu_law`].
pub fn mu_law(x: &Tensor, mu: f64) -> Result<Tensor> {
    Ok(((x * mu)? + 1.0)?.log()?.affine(1.0 / mu.ln_1p(), 0.0)?)
}

/// Tensor version of [`crate::radiometry::inverse_mu_law`].
pub fn inverse_mu_law(y: &Tensor, mu: f64) -> Result<Tensor> {
    Ok((y * mu.ln_1p())?.exp()?.affine(1.0 / mu, -1.0 / mu)?)
}

/// Clamp to `[0, 1]`, then μ-law.
pub fn tonemap_unit(x: &Tensor, mu: f64) -> Result<Tensor> {
    mu_law(&x.clamp(0.0, 1.0)?, mu)
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn tensor_mu_law_matches_scalar() {
        let x = Tensor::new(&[0.0f64, 0.01, 0.3, 1.0], &Device::Cpu).unwrap();
        let y = mu_law(&x, 5000.0).unwrap().to_vec1::<f64>().unwrap();
        for (i, &v) in [0.0, 0.01, 0.3, 1.0].iter().enumerate() {
            assert!((y[i] - crate::radiometry::mu_law(v, 5000.0)).abs() < 1e-14);
        }
        let back = inverse_mu_law(&mu_law(&x, 5000.0).unwrap(), 5000.0).unwrap();
        let back = back.to_vec1::<f64>().unwrap();
        for (a, b) in back.iter().zip([0.0, 0.01, 0.3, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_conv_outputs_zero() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        let c = zero_conv(vb, 2, 3, 3).unwrap();
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 4, 4]);
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}
