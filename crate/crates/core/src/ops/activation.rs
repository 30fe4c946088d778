//! Pointwise nonlinearities and axis softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn prelu_scalar(x: f32, alpha: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(x, grad_out, |v, g| g * gelu_grad_scalar(v))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(y, grad_out, |s, g| g * s * (1.0 - s))
}

/// PReLU with a single learnable slope shared across channels.
pub fn prelu(x: &Tensor, alpha: f32) -> Tensor {
    x.map(|v| prelu_scalar(v, alpha))
}

/// Returns `(d_input, d_alpha)`.
pub fn prelu_backward(x: &Tensor, alpha: f32, grad_out: &Tensor) -> (Tensor, f32) {
    let mut dalpha = 0.0f64;
    let dx = zip_map(x, grad_out, |v, g| if v >= 0.0 { g } else { alpha * g });
    for (&v, &g) in x.data().iter().zip(grad_out.data()) {
        if v < 0.0 {
            dalpha += (g * v) as f64;
        }
    }
    (dx, dalpha as f32)
}

/// Stride layout for iterating one axis of a rank-4 tensor.
fn axis_layout(shape: [usize; 4], axis: usize) -> (usize, usize, usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (outer, len, inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= 4 {
        return Err(Error::InvalidArgument(format!("softmax: axis {axis} out of range 0..4")));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for k in 0..len {
                let e = ((xd[idx(k)] - m) as f64).exp();
                od[idx(k)] = e as f32;
                z += e;
            }
            for k in 0..len {
                od[idx(k)] = (od[idx(k)] as f64 / z) as f32;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward(y: &Tensor, axis: usize, grad_out: &Tensor) -> Tensor {
    let (outer, len, inner) = axis_layout(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let yd = y.data();
    let gd = grad_out.data();
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| (gd[idx(k)] * yd[idx(k)]) as f64).sum();
            for k in 0..len {
                dd[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot as f32);
            }
        }
    }
    dx
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(prelu_scalar(-2.0, 0.25), -0.5);
        assert_eq!(prelu_scalar(3.0, 0.25), 3.0);
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(3.0) - 3.0).abs() < 0.01);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let x = Tensor::zeros([1, 2, 1, 1]);
        let y = softmax(&x, 1).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let x = Tensor::from_fn([2, 3, 4, 5], |b, c, y, x| ((b + 2 * c + 3 * y + 5 * x) % 7) as f32 - 3.0);
        for axis in 1..4 {
            let y = softmax(&x, axis).unwrap();
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f32 = (0..len).map(|k| y.data()[(o * len + k) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!(softmax(&x, 4).is_err());
    }

    #[test]
    fn sigmoid_range_open_interval() {
        for v in [-20.0f32, -3.0, 0.0, 3.0, 15.0] {
            let s = sigmoid_scalar(v);
            assert!(s > 0.0 && s < 1.0, "{v} -> {s}");
        }
    }
}
