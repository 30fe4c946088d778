//! Spatial resampling: corner-aligned bilinear resize and nearest-neighbour 2x upsampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate sampling: `(lower index, upper index, upper weight)` per output index.
fn sample_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            if out_len == 1 || in_len == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilinear_resize: output size must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    let (b, c, h, w) = x.dims();
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ys = sample_axis(h, out_h);
    let xs = sample_axis(w, out_w);
    let mut out = Tensor::zeros([b, c, out_h, out_w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = src[y0 * w + x0] as f64;
                    let v01 = src[y0 * w + x1] as f64;
                    let v10 = src[y1 * w + x0] as f64;
                    let v11 = src[y1 * w + x1] as f64;
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    dst[oy * out_w + ox] = (top + (bot - top) * fy) as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward(in_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [b, c, h, w] = in_shape;
    let (_, _, out_h, out_w) = grad_out.dims();
    if out_h == h && out_w == w {
        return grad_out.clone();
    }
    let ys = sample_axis(h, out_h);
    let xs = sample_axis(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let mut acc = vec![0.0f64; h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let gv = g[oy * out_w + ox] as f64;
                    acc[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    acc[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    acc[y1 * w + x0] += gv * fy * (1.0 - fx);
                    acc[y1 * w + x1] += gv * fy * fx;
                }
            }
            for (d, a) in dx.plane_mut(bi, ci).iter_mut().zip(acc) {
                *d = a as f32;
            }
        }
    }
    dx
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims();
    Tensor::from_fn([b, c, 2 * h, 2 * w], |bi, ci, y, xx| x.at(bi, ci, y / 2, xx / 2))
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Tensor {
    let (b, c, h2, w2) = grad_out.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let d = dx.plane_mut(bi, ci);
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[(y / 2) * w + xx / 2] += g[y * w2 + xx];
                }
            }
        }
    }
    dx
}
