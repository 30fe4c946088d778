//! Random-matrix trust scoring of attention maps.
//!
//! A map is bilinearly resized to `m x m`, standardized to zero mean and unit
//! variance, and the eigenvalues of its Gram matrix `(1/m) Z Z^T` are compared with
//! the Marchenko-Pastur bulk edge. Maps whose largest eigenvalue stays inside the
//! bulk look like noise and get a trust scalar near or above one half; strongly
//! structured maps push the largest eigenvalue far past the edge and the trust
//! scalar towards zero.

use crate::error::{Error, Result};
use crate::msa::AttentionMap;
use crate::ops::bilinear_resize;
use crate::tensor::Tensor;

/// Upper Marchenko-Pastur edge for a square standardized Gram matrix (unit variance, aspect 1).
pub const MP_EDGE_SQUARE: f64 = 4.0;

const VARIANCE_FLOOR: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrustConfig {
    /// Side of the resized map fed to the eigensolver.
    pub spectral_size: usize,
    /// Sigmoid sharpness.
    pub beta: f32,
    /// Stability threshold for full-eigendecomposition filtering.
    pub fed_tau: f32,
    /// Variance multiplier for iterative stability adjustment.
    pub isa_alpha: f32,
    /// Starting threshold for iterative stability adjustment.
    pub isa_initial_tau: f32,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            spectral_size: 16,
            beta: 1.0,
            fed_tau: 4.0,
            isa_alpha: 4.0,
            isa_initial_tau: 4.0,
        }
    }
}

impl TrustConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spectral_size < 2 {
            return Err(Error::Config(format!(
                "spectral_size must be at least 2, got {}",
                self.spectral_size
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("trust_beta must be positive, got {}", self.beta)));
        }
        if !(self.fed_tau > 0.0) {
            return Err(Error::Config(format!("fed_tau must be positive, got {}", self.fed_tau)));
        }
        if !(self.isa_alpha > 0.0) {
            return Err(Error::Config(format!("isa_alpha must be positive, got {}", self.isa_alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSummary {
    /// Gram eigenvalues, nonnegative and sorted descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    pub mp_edge: f64,
    pub trust: f64,
}

/// Resizes a square-or-rectangular map to `m x m` with corner-aligned bilinear interpolation.
pub fn downsample_map(values: &[f32], h: usize, w: usize, m: usize) -> Result<Vec<f32>> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "downsample_map: map must be at least 2x2, got {h}x{w}"
        )));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("downsample_map: target size must be at least 2, got {m}")));
    }
    let t = Tensor::new([1, 1, h, w], values.to_vec())?;
    Ok(bilinear_resize(&t, m, m)?.into_data())
}

#[inline]
fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(beta * (edge - lambda_max) / edge)`.
pub fn trust_from_lambda(lambda_max: f64, beta: f32) -> f64 {
    sigmoid64(beta as f64 * (MP_EDGE_SQUARE - lambda_max) / MP_EDGE_SQUARE)
}

/// Spectral statistics of an `m x m` map.
pub fn spectral_summary(values: &[f32], rows: usize, cols: usize, beta: f32) -> Result<SpectralSummary> {
    if rows != cols {
        return Err(Error::InvalidArgument(format!(
            "spectral_summary: matrix must be square, got {rows}x{cols}"
        )));
    }
    let m = rows;
    if m < 2 {
        return Err(Error::InvalidArgument(format!("spectral_summary: side must be at least 2, got {m}")));
    }
    if values.len() != m * m {
        return Err(Error::shape("spectral_summary", "entries", m * m, values.len()));
    }
    let n = (m * m) as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;

    let eigenvalues = if var < VARIANCE_FLOOR {
        vec![0.0; m]
    } else {
        let sd = var.sqrt();
        let z: Vec<f64> = values.iter().map(|&v| (v as f64 - mean) / sd).collect();
        let mut gram = vec![0.0f64; m * m];
        for i in 0..m {
            for j in i..m {
                let dot: f64 = (0..m).map(|k| z[i * m + k] * z[j * m + k]).sum::<f64>() / m as f64;
                gram[i * m + j] = dot;
                gram[j * m + i] = dot;
            }
        }
        symmetric_eigenvalues(&gram, m)
            .into_iter()
            .map(|l| l.max(0.0))
            .collect()
    };
    let lambda_max = eigenvalues[0];
    Ok(SpectralSummary {
        trust: trust_from_lambda(lambda_max, beta),
        eigenvalues,
        lambda_max,
        mp_edge: MP_EDGE_SQUARE,
    })
}

/// Trust summary of an attention map, resizing it to at most `spectral_size` per side.
///
/// Maps smaller than `spectral_size` are analysed at their own size rather than upsampled.
pub fn summarize_map(map: &AttentionMap, cfg: &TrustConfig) -> Result<SpectralSummary> {
    let m = cfg.spectral_size.min(map.height()).min(map.width());
    let resized = downsample_map(map.values(), map.height(), map.width(), m)?;
    spectral_summary(&resized, m, m, cfg.beta)
}

/// Eigenvalues of a symmetric `n x n` matrix by cyclic Jacobi rotations, sorted descending.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n, "symmetric_eigenvalues: expected {n}x{n} matrix");
    let mut a = matrix.to_vec();
    let total: f64 = a.iter().map(|v| v * v).sum();
    let tol = total * 1e-24;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// `trust * base_threshold`.
pub fn adjust_threshold(base_threshold: f32, trust: f32) -> f32 {
    trust * base_threshold
}

/// Retains maps whose largest Gram eigenvalue lies strictly below `tau`.
pub fn fed_filter(maps: &[AttentionMap], tau: f32, cfg: &TrustConfig) -> Result<Vec<bool>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("fed_filter: tau must be positive, got {tau}")));
    }
    maps.iter()
        .map(|m| summarize_map(m, cfg).map(|s| s.lambda_max < tau as f64))
        .collect()
}

/// Population variance of the stable eigenvalues times `alpha`, falling back to
/// `previous_tau` when the variance is degenerate.
pub fn isa_threshold(stable_eigenvalues: &[f64], alpha: f32, previous_tau: f64) -> f64 {
    if stable_eigenvalues.len() < 2 {
        return previous_tau;
    }
    let n = stable_eigenvalues.len() as f64;
    let mean = stable_eigenvalues.iter().sum::<f64>() / n;
    let var = stable_eigenvalues.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    if var < VARIANCE_FLOOR {
        previous_tau
    } else {
        alpha as f64 * var
    }
}

/// Iterates the ISA threshold to a fixed point over a set of spectral summaries.
pub fn isa_fixed_point(summaries: &[SpectralSummary], alpha: f32, initial_tau: f64, max_iters: usize) -> f64 {
    let mut tau = initial_tau;
    for _ in 0..max_iters {
        let stable: Vec<f64> = summaries
            .iter()
            .filter(|s| s.lambda_max < tau)
            .flat_map(|s| s.eigenvalues.iter().copied())
            .collect();
        let next = isa_threshold(&stable, alpha, tau);
        if (next - tau).abs() <= 1e-9 * tau.abs().max(1.0) {
            return next;
        }
        tau = next;
    }
    tau
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_closed_form() {
        // zero-sum vector keeps u u^T rank one after mean removal
        let u: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 1.0 + i as f32 * 0.1 } else { -(1.0 + (i - 1) as f32 * 0.1) }).collect();
        assert!(u.iter().sum::<f32>().abs() < 1e-5);
        let m: Vec<f32> = (0..256).map(|k| u[k / 16] * u[k % 16]).collect();
        let s = spectral_summary(&m, 16, 16, 1.0).unwrap();
        assert!((s.lambda_max - 16.0).abs() < 1e-4, "{}", s.lambda_max);
        assert!((s.trust - 0.047_425_873).abs() < 1e-4, "{}", s.trust);
    }

    #[test]
    fn constant_map_forced_branch() {
        let s = spectral_summary(&[3.0; 16], 4, 4, 1.0).unwrap();
        assert_eq!(s.lambda_max, 0.0);
        assert!((s.trust - 0.731_058_6).abs() < 1e-6);
    }

    #[test]
    fn non_square_rejected() {
        assert!(spectral_summary(&[0.0; 6], 2, 3, 1.0).is_err());
    }

    #[test]
    fn eigenvalues_sorted_and_trace_preserved() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let e = symmetric_eigenvalues(&a, 3);
        assert!(e.windows(2).all(|w| w[0] >= w[1]));
        assert!((e.iter().sum::<f64>() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn adjust_threshold_cases() {
        assert!((adjust_threshold(0.8, 0.5) - 0.4).abs() < 1e-7);
        assert!(adjust_threshold(0.8, 0.6) > adjust_threshold(0.8, 0.5));
    }

    #[test]
    fn isa_degenerate_and_closed_form() {
        assert_eq!(isa_threshold(&[1.0, 1.0, 1.0], 2.0, 4.0), 4.0);
        assert_eq!(isa_threshold(&[1.0], 2.0, 4.0), 4.0);
        assert!((isa_threshold(&[0.0, 2.0], 1.0, 4.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_identity_when_sized() {
        let v: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(downsample_map(&v, 4, 4, 4).unwrap(), v);
        assert!(downsample_map(&[1.0], 1, 1, 4).is_err());
    }
}
