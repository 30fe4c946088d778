//! Overlapping-tile inference with linear-ramp blending.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tile origins along one axis; the last tile is flush with the far edge.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Blend weight of position `i` inside a tile of length `n` that ramps over `overlap`
/// pixels on each side that borders another tile.
fn ramp(i: usize, n: usize, overlap: usize, ramp_start: bool, ramp_end: bool) -> f32 {
    let mut w = 1.0f32;
    if overlap > 0 {
        let scale = 1.0 / (overlap + 1) as f32;
        if ramp_start && i < overlap {
            w = w.min((i + 1) as f32 * scale);
        }
        if ramp_end && n - 1 - i < overlap {
            w = w.min((n - i) as f32 * scale);
        }
    }
    w
}

/// Runs `f` on overlapping `tile x tile` windows and blends the results.
///
/// Images no larger than one tile go through `f` in a single pass.
pub fn tile_inference(img: &Tensor, tile: usize, overlap: usize, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    if tile <= 2 * overlap {
        return Err(Error::InvalidArgument(format!(
            "tile ({tile}) must exceed twice the overlap ({overlap})"
        )));
    }
    let (b, c, h, w) = img.dims();
    if h <= tile && w <= tile {
        return f(img);
    }
    let ys = tile_starts(h, tile, overlap);
    let xs = tile_starts(w, tile, overlap);
    let mut acc = vec![0.0f64; b * c * h * w];
    let mut wsum = vec![0.0f64; h * w];
    for (yi, &y0) in ys.iter().enumerate() {
        let th = tile.min(h);
        for (xi, &x0) in xs.iter().enumerate() {
            let tw = tile.min(w);
            let window = Tensor::from_fn([b, c, th, tw], |bi, ci, y, x| img.at(bi, ci, y0 + y, x0 + x));
            let out = f(&window)?;
            if out.shape() != window.shape() {
                return Err(Error::Consistency(format!(
                    "tile function changed shape {:?} -> {:?}",
                    window.shape(),
                    out.shape()
                )));
            }
            for y in 0..th {
                let wy = ramp(y, th, overlap, yi > 0, yi + 1 < ys.len());
                for x in 0..tw {
                    let wgt = (wy * ramp(x, tw, overlap, xi > 0, xi + 1 < xs.len())) as f64;
                    let p = (y0 + y) * w + x0 + x;
                    wsum[p] += wgt;
                    for bi in 0..b {
                        for ci in 0..c {
                            acc[(bi * c + ci) * h * w + p] += wgt * out.at(bi, ci, y, x) as f64;
                        }
                    }
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / wsum[i % (h * w)]) as f32)
        .collect();
    Tensor::new([b, c, h, w], data)
}
