//! Layer normalization across channels at every spatial location.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Per-pixel statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, NormStats)> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm: epsilon must be positive, got {eps}")));
    }
    let (b, c, h, w) = x.dims();
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c, 1, 1, 1] {
            return Err(Error::InvalidArgument(format!(
                "layer_norm: {name} must have shape [{c}, 1, 1, 1], got {:?}",
                t.shape()
            )));
        }
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut mean = vec![0.0f32; b * hw];
    let mut rstd = vec![0.0f32; b * hw];
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut s = 0.0f64;
            for ci in 0..c {
                s += xd[base + ci * hw + p] as f64;
            }
            let mu = s / c as f64;
            let mut v = 0.0f64;
            for ci in 0..c {
                let d = xd[base + ci * hw + p] as f64 - mu;
                v += d * d;
            }
            let r = 1.0 / (v / c as f64 + eps as f64).sqrt();
            for ci in 0..c {
                let i = base + ci * hw + p;
                let xhat = (xd[i] as f64 - mu) * r;
                od[i] = (xhat * gamma.data()[ci] as f64 + beta.data()[ci] as f64) as f32;
            }
            mean[bi * hw + p] = mu as f32;
            rstd[bi * hw + p] = r as f32;
        }
    }
    Ok((out, NormStats { mean, rstd }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, h, w) = x.dims();
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let xd = x.data();
    let gd = grad_out.data();
    let mut xhat = vec![0.0f64; c];
    let mut dxhat = vec![0.0f64; c];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mu = stats.mean[bi * hw + p] as f64;
            let r = stats.rstd[bi * hw + p] as f64;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for ci in 0..c {
                let i = base + ci * hw + p;
                xhat[ci] = (xd[i] as f64 - mu) * r;
                let g = gd[i] as f64;
                dgamma[ci] += g * xhat[ci];
                dbeta[ci] += g;
                dxhat[ci] = g * gamma.data()[ci] as f64;
                sum_d += dxhat[ci];
                sum_dx += dxhat[ci] * xhat[ci];
            }
            let inv_c = 1.0 / c as f64;
            let dd = dx.data_mut();
            for ci in 0..c {
                dd[base + ci * hw + p] = (r * (dxhat[ci] - inv_c * sum_d - xhat[ci] * inv_c * sum_dx)) as f32;
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new([c, 1, 1, 1], v.into_iter().map(|x| x as f32).collect()).unwrap();
    (dx, to_t(dgamma), to_t(dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize) -> (Tensor, Tensor) {
        (Tensor::full([c, 1, 1, 1], 1.0), Tensor::zeros([c, 1, 1, 1]))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full([1, 4, 3, 3], 5.0);
        let (g, b) = affine(4);
        let (y, _) = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_moments_over_channels() {
        let x = Tensor::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (g, b) = affine(4);
        let (y, _) = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }

    #[test]
    fn matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 5, 3, 4], 2.0, &mut rng);
        let g = Tensor::randn([5, 1, 1, 1], 1.0, &mut rng);
        let b = Tensor::randn([5, 1, 1, 1], 1.0, &mut rng);
        let (y, _) = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        for bi in 0..2 {
            for yy in 0..3 {
                for xx in 0..4 {
                    let vals: Vec<f64> = (0..5).map(|c| x.at(bi, c, yy, xx) as f64).collect();
                    let mu = vals.iter().sum::<f64>() / 5.0;
                    let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0;
                    for c in 0..5 {
                        let want = (vals[c] - mu) / (var + 1e-6).sqrt() * g.data()[c] as f64 + b.data()[c] as f64;
                        assert!((y.at(bi, c, yy, xx) as f64 - want).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::zeros([1, 2, 1, 1]);
        let (g, b) = affine(2);
        assert!(layer_norm(&x, &g, &b, 0.0).is_err());
    }
}
