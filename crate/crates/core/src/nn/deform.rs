//! 3×3 deformable convolution with grouped offsets and bilinear sampling.
//!
//! Offsets have `2·G·9` channels laid out as `[g][tap][dy, dx]`, taps in
//! row-major kernel order. Samples falling outside the input read zero, which
//! makes zero offsets reproduce a padded ordinary convolution.

use candle_core::{DType, IndexOp, Tensor};
use candle_nn::VarBuilder;

use crate::error::{invalid, Error, Result};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone)]
pub struct DeformConv2d {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    offset_groups: usize,
}

impl DeformConv2d {
    pub fn new(vb: VarBuilder, in_channels: usize, out_channels: usize, offset_groups: usize) -> Result<Self> {
        if offset_groups == 0 || in_channels % offset_groups != 0 {
            return Err(invalid(format!(
                "{in_channels} channels cannot be split into {offset_groups} offset groups"
            )));
        }
        // Same parameterization as an ordinary 3×3 convolution.
        let plain = candle_nn::conv2d(in_channels, out_channels, KERNEL, Default::default(), vb)?;
        Ok(Self {
            weight: plain.weight().clone(),
            bias: plain.bias().expect("conv2d has a bias").clone(),
            in_channels,
            out_channels,
            offset_groups,
        })
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.offset_groups * TAPS
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor, offsets: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "deformable conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let expected = [b, self.offset_channels(), h, w];
        if offsets.dims() != expected {
            return Err(Error::ShapeMismatch(format!(
                "offsets {:?}, expected {expected:?}",
                offsets.dims()
            )));
        }
        let g = self.offset_groups;
        let cg = c / g;
        let hw = h * w;
        let dtype = x.dtype();
        let device = x.device();

        // Absolute sampling coordinates, (B, G, 9, HW) each.
        let off = offsets.reshape((b, g, TAPS, 2, hw))?;
        let (base_y, base_x) = base_grid(h, w);
        let base_y = Tensor::from_vec(base_y, (TAPS, hw), device)?.to_dtype(dtype)?;
        let base_x = Tensor::from_vec(base_x, (TAPS, hw), device)?.to_dtype(dtype)?;
        let py = off.i((.., .., .., 0, ..))?.broadcast_add(&base_y)?;
        let px = off.i((.., .., .., 1, ..))?.broadcast_add(&base_x)?;

        let fy = py.detach().floor()?;
        let fx = px.detach().floor()?;
        let wy1 = (&py - &fy)?;
        let wx1 = (&px - &fx)?;
        let wy0 = wy1.affine(-1.0, 1.0)?;
        let wx0 = wx1.affine(-1.0, 1.0)?;

        let fy_host = fy.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let fx_host = fx.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;

        let source = x.reshape((b, c, hw))?;
        let mut columns: Option<Tensor> = None;
        for (dy, wy) in [(0i64, &wy0), (1, &wy1)] {
            for (dx, wx) in [(0i64, &wx0), (1, &wx1)] {
                let (index, mask) = corner_index(&fy_host, &fx_host, dy, dx, h, w, b, g, cg);
                let index = Tensor::from_vec(index, (b, c, TAPS * hw), device)?;
                let mask = Tensor::from_vec(mask, (b, g, TAPS, hw), device)?.to_dtype(dtype)?;
                let weight = (wy * wx)?.mul(&mask)?;
                let weight = weight
                    .unsqueeze(2)?
                    .broadcast_as((b, g, cg, TAPS, hw))?
                    .reshape((b, c, TAPS * hw))?;
                let sampled = source.gather(&index, 2)?.mul(&weight)?;
                columns = Some(match columns {
                    None => sampled,
                    Some(acc) => (acc + sampled)?,
                });
            }
        }
        let columns = columns.expect("four corners").reshape((b, c * TAPS, hw))?;
        let kernel = self.weight.reshape((self.out_channels, c * TAPS))?;
        let out = kernel.broadcast_matmul(&columns)?;
        let out = out.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(out.reshape((b, self.out_channels, h, w))?)
    }
}

/// Integer tap positions `(y + ky - 1, x + kx - 1)` for every output pixel.
fn base_grid(h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ys = Vec::with_capacity(TAPS * h * w);
    let mut xs = Vec::with_capacity(TAPS * h * w);
    for ky in 0..KERNEL {
        for kx in 0..KERNEL {
            for y in 0..h {
                for x in 0..w {
                    ys.push(y as f64 + ky as f64 - 1.0);
                    xs.push(x as f64 + kx as f64 - 1.0);
                }
            }
        }
    }
    (ys, xs)
}

/// Flat source indices (expanded to every channel) and in-bounds mask for one
/// bilinear corner.
#[allow(clippy::too_many_arguments)]
fn corner_index(
    fy: &[f64],
    fx: &[f64],
    dy: i64,
    dx: i64,
    h: usize,
    w: usize,
    b: usize,
    g: usize,
    cg: usize,
) -> (Vec<u32>, Vec<f32>) {
    let per_group = TAPS * h * w;
    let mut mask = Vec::with_capacity(fy.len());
    let mut group_index = Vec::with_capacity(fy.len());
    for (&y, &x) in fy.iter().zip(fx) {
        let yi = y as i64 + dy;
        let xi = x as i64 + dx;
        let inside = yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64;
        mask.push(if inside { 1.0 } else { 0.0 });
        let yc = yi.clamp(0, h as i64 - 1) as usize;
        let xc = xi.clamp(0, w as i64 - 1) as usize;
        group_index.push((yc * w + xc) as u32);
    }
    let mut index = Vec::with_capacity(b * g * cg * per_group);
    for bg in 0..b * g {
        let slice = &group_index[bg * per_group..(bg + 1) * per_group];
        for _ in 0..cg {
            index.extend_from_slice(slice);
        }
    }
    (index, mask)
}
