//! Central finite differences, used to check autograd results.

use candle_core::{DType, Tensor};

use crate::error::Result;

/// `∂f/∂x` at `at` by central differences with step `eps`, evaluated in f64.
pub fn central_difference(f: impl Fn(&Tensor) -> Result<f64>, at: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = at.shape().clone();
    let device = at.device().clone();
    let base = at.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = f(&Tensor::from_slice(&probe, &shape, &device)?)?;
        probe[i] = base[i] - eps;
        let down = f(&Tensor::from_slice(&probe, &shape, &device)?)?;
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(Tensor::from_vec(grad, shape, &device)?)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let b = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    assert_eq!(a.len(), b.len(), "relative_error on tensors of different size");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(&b));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&diff) / scale)
}
