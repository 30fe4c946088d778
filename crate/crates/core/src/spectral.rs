//! 2D discrete Fourier transforms over power-of-two patches.
//!
//! Iterative radix-2 decimation-in-time with precomputed twiddles and bit-reversal
//! tables. The forward transform is unnormalized; the inverse carries `1/(h*w)`.
//! Butterflies run in `f64` and results are stored as `Complex32`.

use num_complex::{Complex32, Complex64};

use crate::error::{Error, Result};

/// Row-major `h x w` grid of complex values.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexPatch {
    h: usize,
    w: usize,
    data: Vec<Complex32>,
}

impl ComplexPatch {
    pub fn new(h: usize, w: usize, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("ComplexPatch::new", "data length", h * w, data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_real(h: usize, w: usize, values: &[f32]) -> Result<Self> {
        Self::new(h, w, values.iter().map(|&v| Complex32::new(v, 0.0)).collect())
    }

    pub fn filled(h: usize, w: usize, value: Complex32) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> Complex32 {
        self.data[y * self.w + x]
    }

    pub fn re(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.re).collect()
    }

    pub fn max_abs_imag(&self) -> f32 {
        self.data.iter().map(|c| c.im.abs()).fold(0.0, f32::max)
    }
}

/// One-dimensional radix-2 plan.
#[derive(Clone, Debug)]
struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "FFT length must be a power of two, got {n}"
            )));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect();
        Ok(Self { n, twiddles, bitrev })
    }

    fn butterflies(&self) -> u64 {
        (self.n / 2) as u64 * self.n.trailing_zeros() as u64
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let tw = self.twiddles[k * step];
                    let tw = if inverse { tw.conj() } else { tw };
                    let a = buf[start + k];
                    let b = buf[start + k + half] * tw;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Separable 2D plan for `h x w` grids.
#[derive(Clone, Debug)]
pub struct Fft2Plan {
    rows: Radix2,
    cols: Radix2,
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            rows: Radix2::new(w)?,
            cols: Radix2::new(h)?,
        })
    }

    pub fn height(&self) -> usize {
        self.cols.n
    }

    pub fn width(&self) -> usize {
        self.rows.n
    }

    /// Butterfly count of one 2D transform.
    pub fn butterflies(&self) -> u64 {
        self.height() as u64 * self.rows.butterflies() + self.width() as u64 * self.cols.butterflies()
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height(), self.width());
        debug_assert_eq!(buf.len(), h * w);
        for row in buf.chunks_exact_mut(w) {
            self.rows.run(row, inverse);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            self.cols.run(&mut col, inverse);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        if inverse {
            let scale = 1.0 / (h * w) as f64;
            buf.iter_mut().for_each(|v| *v *= scale);
        }
    }

    pub fn forward_in_place(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    pub fn inverse_in_place(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }

    /// Forward transform of a real grid.
    pub fn forward_real(&self, values: &[f32]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        self.forward_in_place(&mut buf);
        buf
    }
}

fn transform(patch: &ComplexPatch, inverse: bool) -> Result<ComplexPatch> {
    let plan = Fft2Plan::new(patch.h, patch.w)?;
    let mut buf: Vec<Complex64> = patch
        .data
        .iter()
        .map(|c| Complex64::new(c.re as f64, c.im as f64))
        .collect();
    plan.run(&mut buf, inverse);
    ComplexPatch::new(
        patch.h,
        patch.w,
        buf.into_iter().map(|c| Complex32::new(c.re as f32, c.im as f32)).collect(),
    )
}

/// Unnormalized forward 2D DFT.
pub fn fft2(patch: &ComplexPatch) -> Result<ComplexPatch> {
    transform(patch, false)
}

/// Inverse 2D DFT with `1/(h*w)` normalization.
pub fn ifft2(spectrum: &ComplexPatch) -> Result<ComplexPatch> {
    transform(spectrum, true)
}

/// Elementwise product `a * b` (or `a * conj(b)`).
pub fn complex_hadamard(a: &ComplexPatch, b: &ComplexPatch, conjugate_b: bool) -> Result<ComplexPatch> {
    if a.h != b.h {
        return Err(Error::shape("complex_hadamard", "height", a.h, b.h));
    }
    if a.w != b.w {
        return Err(Error::shape("complex_hadamard", "width", a.w, b.w));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| if conjugate_b { x * y.conj() } else { x * y })
        .collect();
    ComplexPatch::new(a.h, a.w, data)
}
