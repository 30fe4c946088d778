//! Channel concatenation/slicing, reflection padding and cropping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, h, w) = a.dims();
    let (bb, cb, hb, wb) = b.dims();
    if ba != bb {
        return Err(Error::shape("concat_channels", "batch", ba, bb));
    }
    if h != hb {
        return Err(Error::shape("concat_channels", "height", h, hb));
    }
    if w != wb {
        return Err(Error::shape("concat_channels", "width", w, wb));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for bi in 0..ba {
        for c in 0..ca {
            data.extend_from_slice(a.plane(bi, c));
        }
        for c in 0..cb {
            data.extend_from_slice(b.plane(bi, c));
        }
    }
    Tensor::new([ba, ca + cb, h, w], data)
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims();
    if len == 0 || start + len > c {
        return Err(Error::InvalidArgument(format!(
            "slice_channels: range {start}..{} outside 0..{c}",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(b * len * h * w);
    for bi in 0..b {
        for ci in start..start + len {
            data.extend_from_slice(x.plane(bi, ci));
        }
    }
    Tensor::new([b, len, h, w], data)
}

/// Scatters a channel-slice gradient back into a zero tensor of the source shape.
pub fn slice_channels_backward(in_shape: [usize; 4], start: usize, grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let (b, len, _, _) = grad_out.dims();
    for bi in 0..b {
        for k in 0..len {
            dx.plane_mut(bi, start + k).copy_from_slice(grad_out.plane(bi, k));
        }
    }
    dx
}

#[inline]
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

/// Reflection-pads the bottom and right edges (`abcd|cb`).
pub fn pad_reflect(x: &Tensor, pad_bottom: usize, pad_right: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims();
    if pad_bottom >= h || pad_right >= w {
        return Err(Error::InvalidArgument(format!(
            "pad_reflect: padding ({pad_bottom}, {pad_right}) too large for {h}x{w} input"
        )));
    }
    Ok(Tensor::from_fn([b, c, h + pad_bottom, w + pad_right], |bi, ci, y, xx| {
        x.at(bi, ci, reflect(y, h), reflect(xx, w))
    }))
}

pub fn pad_reflect_backward(in_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [_, _, h, w] = in_shape;
    let (b, c, hp, wp) = grad_out.dims();
    let mut dx = Tensor::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let d = dx.plane_mut(bi, ci);
            for y in 0..hp {
                for xx in 0..wp {
                    d[reflect(y, h) * w + reflect(xx, w)] += g[y * wp + xx];
                }
            }
        }
    }
    dx
}

/// Keeps the top-left `h x w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, hs, ws) = x.dims();
    if h == 0 || w == 0 || h > hs || w > ws {
        return Err(Error::InvalidArgument(format!("crop: {h}x{w} window outside {hs}x{ws} input")));
    }
    Ok(Tensor::from_fn([b, c, h, w], |bi, ci, y, xx| x.at(bi, ci, y, xx)))
}

pub fn crop_backward(in_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let (b, c, h, w) = grad_out.dims();
    let mut dx = Tensor::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dx.set(bi, ci, y, xx, grad_out.at(bi, ci, y, xx));
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_roundtrip() {
        let a = Tensor::from_fn([2, 2, 3, 3], |b, c, y, x| (b * 100 + c * 10 + y * 3 + x) as f32);
        let b = Tensor::from_fn([2, 3, 3, 3], |b, c, y, x| -((b * 100 + c * 10 + y * 3 + x) as f32));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), [2, 5, 3, 3]);
        assert_eq!(slice_channels(&ab, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&ab, 2, 3).unwrap(), b);
        assert!(slice_channels(&ab, 4, 2).is_err());
    }

    #[test]
    fn reflect_pad_values() {
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(pad_reflect(&x, 1, 0).is_err());
        let y = pad_reflect(&x, 0, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
        assert_eq!(crop(&y, 1, 4).unwrap(), x);
    }
}
