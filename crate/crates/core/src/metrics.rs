//! Image quality metrics and FLOP accounting.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Operation counters accumulated during a forward pass.
///
/// Convolutions and attention modulation are counted as multiply-accumulate pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub conv_macs: u64,
    pub fft_butterflies: u64,
    pub attention_mults: u64,
    /// Attention entries zeroed by the mask, hence never multiplied.
    pub attention_skipped: u64,
}

impl FlopLedger {
    /// Work actually performed; skipped entries carry no cost.
    pub fn total(&self) -> u64 {
        self.conv_macs + self.fft_butterflies + self.attention_mults
    }

    pub fn attention_entries(&self) -> u64 {
        self.attention_mults + self.attention_skipped
    }

    pub fn masked_fraction(&self) -> f64 {
        let n = self.attention_entries();
        if n == 0 {
            0.0
        } else {
            self.attention_skipped as f64 / n as f64
        }
    }
}

impl Add for FlopLedger {
    type Output = FlopLedger;

    fn add(self, rhs: FlopLedger) -> FlopLedger {
        FlopLedger {
            conv_macs: self.conv_macs + rhs.conv_macs,
            fft_butterflies: self.fft_butterflies + rhs.fft_butterflies,
            attention_mults: self.attention_mults + rhs.attention_mults,
            attention_skipped: self.attention_skipped + rhs.attention_skipped,
        }
    }
}

impl AddAssign for FlopLedger {
    fn add_assign(&mut self, rhs: FlopLedger) {
        *self = *self + rhs;
    }
}

/// Fractional reductions `1 - sparse/dense` per category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopReduction {
    pub conv: f64,
    pub fft: f64,
    pub attention: f64,
    pub total: f64,
}

fn reduction(sparse: u64, dense: u64) -> f64 {
    if dense == 0 {
        0.0
    } else {
        1.0 - sparse as f64 / dense as f64
    }
}

pub fn flops_report(ledger: &FlopLedger, dense_baseline: &FlopLedger) -> FlopReduction {
    FlopReduction {
        conv: reduction(ledger.conv_macs, dense_baseline.conv_macs),
        fft: reduction(ledger.fft_butterflies, dense_baseline.fft_butterflies),
        attention: reduction(ledger.attention_mults, dense_baseline.attention_mults),
        total: reduction(ledger.total(), dense_baseline.total()),
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr: peak must be positive, got {peak}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SsimWindow {
    /// 11x11 Gaussian, sigma 1.5, evaluated at every valid position.
    Gaussian11,
    /// Non-overlapping uniform 8x8 blocks.
    Block8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: SsimWindow,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: SsimWindow::Gaussian11,
            peak: 1.0,
        }
    }
}

/// BT.601 luma for 3-channel inputs; single-channel inputs pass through.
fn luminance(t: &Tensor, b: usize) -> Result<Vec<f64>> {
    let (_, c, _, _) = t.dims();
    match c {
        1 => Ok(t.plane(b, 0).iter().map(|&v| v as f64).collect()),
        3 => {
            let (r, g, bl) = (t.plane(b, 0), t.plane(b, 1), t.plane(b, 2));
            Ok((0..r.len())
                .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * bl[i] as f64)
                .collect())
        }
        _ => Err(Error::InvalidArgument(format!("ssim: expected 1 or 3 channels, got {c}"))),
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let sigma = 1.5f64;
    let k: Vec<f64> = (0..11)
        .map(|i| {
            let d = i as f64 - 5.0;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Local statistics `(mu_a, mu_b, var_a, var_b, cov)` under the window weights.
fn window_ssim(a: &[f64], b: &[f64], weights: &[(usize, f64)], c1: f64, c2: f64) -> f64 {
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(i, wt) in weights {
        ma += wt * a[i];
        mb += wt * b[i];
        saa += wt * a[i] * a[i];
        sbb += wt * b[i] * b[i];
        sab += wt * a[i] * b[i];
    }
    let va = saa - ma * ma;
    let vb = sbb - mb * mb;
    let cov = sab - ma * mb;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean structural similarity over all windows and batch items.
pub fn ssim(a: &Tensor, b: &Tensor, params: SsimParams) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (batch, _, h, w) = a.dims();
    let side = match params.window {
        SsimWindow::Gaussian11 => 11,
        SsimWindow::Block8 => 8,
    };
    if h < side || w < side {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} smaller than {side}x{side} window"
        )));
    }
    let c1 = (0.01 * params.peak).powi(2);
    let c2 = (0.03 * params.peak).powi(2);
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        let la = luminance(a, bi)?;
        let lb = luminance(b, bi)?;
        let (step, weight_of): (usize, Box<dyn Fn(usize, usize) -> f64>) = match params.window {
            SsimWindow::Gaussian11 => (1, Box::new(|dy, dx| kernel[dy] * kernel[dx])),
            SsimWindow::Block8 => (8, Box::new(|_, _| 1.0 / 64.0)),
        };
        let mut y0 = 0;
        while y0 + side <= h {
            let mut x0 = 0;
            while x0 + side <= w {
                let weights: Vec<(usize, f64)> = (0..side)
                    .flat_map(|dy| (0..side).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| ((y0 + dy) * w + x0 + dx, weight_of(dy, dx)))
                    .collect();
                total += window_ssim(&la, &lb, &weights, c1, c2);
                count += 1;
                x0 += step;
            }
            y0 += step;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::full([1, 3, 4, 4], 100.0);
        let b = Tensor::full([1, 3, 4, 4], 110.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-9);
        assert!((v - 28.13).abs() < 0.01);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_extremes() {
        let a = Tensor::from_fn([1, 3, 16, 16], |_, c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f32 / 10.0);
        assert!((ssim(&a, &a, SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
        let zero = Tensor::zeros([1, 3, 16, 16]);
        let one = Tensor::full([1, 3, 16, 16], 1.0);
        let v = ssim(&zero, &one, SsimParams::default()).unwrap();
        assert!(v.abs() < 0.01, "{v}");
        let block = SsimParams { window: SsimWindow::Block8, peak: 1.0 };
        assert!((ssim(&a, &a, block).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros([1, 1, 10, 20]);
        assert!(ssim(&a, &a, SsimParams::default()).is_err());
    }

    #[test]
    fn ledger_reductions() {
        let dense = FlopLedger { conv_macs: 100, fft_butterflies: 20, attention_mults: 80, attention_skipped: 0 };
        assert_eq!(flops_report(&dense, &dense).total, 0.0);
        let sparse = FlopLedger { attention_mults: 40, attention_skipped: 40, ..dense };
        let r = flops_report(&sparse, &dense);
        assert_eq!(r.attention, 0.5);
        assert_eq!(r.attention, sparse.masked_fraction());
        assert!((r.total - 40.0 / 200.0).abs() < 1e-12);
    }
}
