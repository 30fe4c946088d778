//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsformer_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    Tensor::new(shape, random_vec(shape.iter().product(), rng)).unwrap()
}

/// O(n^4) 2D DFT; `inverse` applies the `1/(h*w)` factor.
pub fn naive_dft2(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> Vec<(f64, f64)> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let norm = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (c, s) = (ang.cos(), ang.sin());
                    let (a, b) = (re[y * w + x], im[y * w + x]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            out.push((sr * norm, si * norm));
        }
    }
    out
}

/// `M[s] = sum_t q[t + s] * k[t]` with indices wrapping on an `n x n` grid.
pub fn circular_xcorr(q: &[f32], k: &[f32], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for sy in 0..n {
        for sx in 0..n {
            let mut acc = 0.0f64;
            for ty in 0..n {
                for tx in 0..n {
                    acc += q[((ty + sy) % n) * n + (tx + sx) % n] as f64 * k[ty * n + tx] as f64;
                }
            }
            m[sy * n + sx] = acc;
        }
    }
    m
}

/// Zero-padded "same" convolution by nested loops.
///
/// `weight` is `[cout, cin, k, k]`, or `[cin, 1, k, k]` when `depthwise`.
pub fn conv2d_loop(x: &Tensor, weight: &Tensor, bias: &[f32], k: usize, stride: usize, depthwise: bool) -> Tensor {
    let (b, cin, h, w) = x.dims();
    let cout = if depthwise { cin } else { weight.shape()[0] };
    let p = k / 2;
    let ho = (h + 2 * p - k) / stride + 1;
    let wo = (w + 2 * p - k) / stride + 1;
    Tensor::from_fn([b, cout, ho, wo], |bi, co, oy, ox| {
        let mut acc = bias[co] as f64;
        let inputs: Vec<usize> = if depthwise { vec![co] } else { (0..cin).collect() };
        for ci in inputs {
            for dy in 0..k {
                for dx in 0..k {
                    let iy = (oy * stride + dy) as isize - p as isize;
                    let ix = (ox * stride + dx) as isize - p as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let wv = if depthwise { weight.at(co, 0, dy, dx) } else { weight.at(co, ci, dy, dx) };
                    acc += wv as f64 * x.at(bi, ci, iy as usize, ix as usize) as f64;
                }
            }
        }
        acc as f32
    })
}

/// Channel-wise layer norm at each pixel.
pub fn layer_norm_loop(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Tensor {
    let (_, c, _, _) = x.dims();
    Tensor::from_fn(x.shape(), |b, ci, y, xx| {
        let vals: Vec<f64> = (0..c).map(|k| x.at(b, k, y, xx) as f64).collect();
        let mu = vals.iter().sum::<f64>() / c as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
        ((vals[ci] - mu) / (var + eps).sqrt() * gamma[ci] as f64 + beta[ci] as f64) as f32
    })
}

/// Dense attention written without patch grids: for every `p x p` tile of the
/// zero-padded planes, `out = (xcorr(q, k) / p^2) * v`, then cropped.
pub fn dense_attention_loop(q: &Tensor, k: &Tensor, v: &Tensor, p: usize) -> Tensor {
    let (b, c, h, w) = q.dims();
    let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let get = |t: &Tensor, bi, ci, y: usize, x: usize| if y < h && x < w { t.at(bi, ci, y, x) } else { 0.0 };
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for ty in (0..hp).step_by(p) {
                for tx in (0..wp).step_by(p) {
                    let tile = |t: &Tensor| -> Vec<f32> {
                        (0..p * p).map(|i| get(t, bi, ci, ty + i / p, tx + i % p)).collect()
                    };
                    let (qt, kt, vt) = (tile(q), tile(k), tile(v));
                    let m = circular_xcorr(&qt, &kt, p);
                    for i in 0..p * p {
                        let (y, x) = (ty + i / p, tx + i % p);
                        if y < h && x < w {
                            out.set(bi, ci, y, x, (m[i] / (p * p) as f64 * vt[i] as f64) as f32);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k_sorted(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut kept = idx[..k].to_vec();
    kept.sort();
    kept
}

pub fn psnr_loop(a: &[f32], b: &[f32], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Largest eigenvalue of a symmetric matrix by power iteration on a shifted copy.
pub fn power_iteration_max(a: &[f64], n: usize) -> f64 {
    let shift: f64 = a.iter().map(|v| v.abs()).sum::<f64>();
    let mut v = vec![1.0; n];
    v[0] = 1.3;
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let mut nv = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                nv[i] += a[i * n + j] * v[j];
            }
            nv[i] += shift * v[i];
        }
        let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        nv.iter_mut().for_each(|x| *x /= norm);
        lambda = norm - shift;
        v = nv;
    }
    lambda
}

/// Gram `(1/m) Z Z^T` of the standardized matrix, in f64.
pub fn standardized_gram(values: &[f32], m: usize) -> Vec<f64> {
    let n = (m * m) as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z: Vec<f64> = values.iter().map(|&v| (v as f64 - mean) / sd).collect();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            g[i * m + j] = (0..m).map(|k| z[i * m + k] * z[j * m + k]).sum::<f64>() / m as f64;
        }
    }
    g
}
