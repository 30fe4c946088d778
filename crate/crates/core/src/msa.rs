//! Min-p sparse attention.
//!
//! Q, K and V feature maps are cut into square power-of-two patches. Each (channel,
//! patch) pair yields an attention map `M = real(IFFT(FFT(q) * conj(FFT(k))))`, i.e.
//! the circular cross-correlation of the query patch with the key patch. `M` is
//! sparsified row by row and then modulates the value patch elementwise.

use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::nn::Conv;
use crate::ops::conv::ConvSpec;
use crate::param::ParamStore;

use crate::error::{Error, Result};
use crate::metrics::FlopLedger;
use crate::rmt::{self, SpectralSummary, TrustConfig};
use crate::spectral::Fft2Plan;
use crate::tensor::{Shape, Tensor};

/// Imaginary residue tolerated before an inverse transform is declared inconsistent.
pub const IMAG_RESIDUE_TOL: f64 = 1e-4;
const ISA_MAX_ITERS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// No masking; the reference pipeline for FLOP comparisons.
    Dense,
    MinP,
    MinPTrusted,
    TopK(usize),
    /// Full eigendecomposition filtering: drop patches with `lambda_max >= fed_tau`.
    Fed,
    /// Iterative stability adjustment of the FED threshold.
    Isa,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Dense => "dense",
            Strategy::MinP => "min_p",
            Strategy::MinPTrusted => "min_p_trusted",
            Strategy::TopK(_) => "top_k",
            Strategy::Fed => "fed",
            Strategy::Isa => "isa",
        }
    }

    /// Parses a strategy name; `top_k` takes its `k` from `top_k`.
    pub fn parse(name: &str, top_k: usize) -> Result<Self> {
        Ok(match name {
            "dense" => Strategy::Dense,
            "min_p" => Strategy::MinP,
            "min_p_trusted" => Strategy::MinPTrusted,
            "top_k" => Strategy::TopK(top_k),
            "fed" => Strategy::Fed,
            "isa" => Strategy::Isa,
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityConfig {
    pub p_base: f32,
    pub strategy: Strategy,
    pub trust: TrustConfig,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            p_base: 0.1,
            strategy: Strategy::MinPTrusted,
            trust: TrustConfig::default(),
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_base) {
            return Err(Error::Config(format!("p_base must lie in [0, 1], got {}", self.p_base)));
        }
        if let Strategy::TopK(0) = self.strategy {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        self.trust.validate()
    }
}

/// Identifies a patch inside a patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchIndex {
    pub batch: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

/// A real `h x w` attention map together with the patch it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Vec<f32>,
    h: usize,
    w: usize,
    pub source: Option<PatchIndex>,
}

impl AttentionMap {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape("AttentionMap::new", "entries", h * w, values.len()));
        }
        Ok(Self {
            values,
            h,
            w,
            source: None,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.w..(r + 1) * self.w]
    }

    /// Zeroes every entry whose mask bit is unset.
    pub fn masked(&self, mask: &[bool]) -> AttentionMap {
        let values = self
            .values
            .iter()
            .zip(mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        AttentionMap {
            values,
            h: self.h,
            w: self.w,
            source: self.source,
        }
    }
}

/// Non-overlapping square tiles of a zero-padded feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    origin: Shape,
    patch_size: usize,
    rows: usize,
    cols: usize,
    /// `[batch][channel][row][col][patch_size * patch_size]`
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn origin(&self) -> Shape {
        self.origin
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn patch_count(&self) -> usize {
        self.origin[0] * self.origin[1] * self.rows * self.cols
    }

    fn patch_offset(&self, idx: PatchIndex) -> usize {
        let area = self.patch_size * self.patch_size;
        (((idx.batch * self.origin[1] + idx.channel) * self.rows + idx.row) * self.cols + idx.col) * area
    }

    pub fn patch(&self, idx: PatchIndex) -> &[f32] {
        let o = self.patch_offset(idx);
        &self.data[o..o + self.patch_size * self.patch_size]
    }

    /// Patch indices in storage order.
    pub fn indices(&self) -> impl Iterator<Item = PatchIndex> + '_ {
        let [b, c, _, _] = self.origin;
        let (rows, cols) = (self.rows, self.cols);
        (0..b).flat_map(move |batch| {
            (0..c).flat_map(move |channel| {
                (0..rows).flat_map(move |row| (0..cols).map(move |col| PatchIndex { batch, channel, row, col }))
            })
        })
    }
}

fn check_patch_size(patch_size: usize) -> Result<()> {
    if patch_size == 0 || !patch_size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "attention patch size must be a power of two, got {patch_size}"
        )));
    }
    Ok(())
}

/// Zero-pads right/bottom to a multiple of `patch_size` and tiles the result.
pub fn patchify(x: &Tensor, patch_size: usize) -> Result<PatchGrid> {
    check_patch_size(patch_size)?;
    let (b, c, h, w) = x.dims();
    let rows = h.div_ceil(patch_size);
    let cols = w.div_ceil(patch_size);
    let p = patch_size;
    let mut data = vec![0.0f32; b * c * rows * cols * p * p];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.plane(bi, ci);
            for gy in 0..rows {
                for gx in 0..cols {
                    for py in 0..p {
                        let y = gy * p + py;
                        if y < h {
                            let x0 = gx * p;
                            let n = p.min(w.saturating_sub(x0));
                            data[o + py * p..o + py * p + n].copy_from_slice(&plane[y * w + x0..y * w + x0 + n]);
                        }
                    }
                    o += p * p;
                }
            }
        }
    }
    Ok(PatchGrid {
        origin: x.shape(),
        patch_size,
        rows,
        cols,
        data,
    })
}

/// Reassembles tiles and crops the padding away.
pub fn unpatchify(grid: &PatchGrid) -> Tensor {
    let [b, c, h, w] = grid.origin;
    let p = grid.patch_size;
    let mut out = Tensor::zeros(grid.origin);
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = out.plane_mut(bi, ci);
            for gy in 0..grid.rows {
                for gx in 0..grid.cols {
                    for py in 0..p {
                        let y = gy * p + py;
                        if y < h {
                            let x0 = gx * p;
                            let n = p.min(w.saturating_sub(x0));
                            plane[y * w + x0..y * w + x0 + n].copy_from_slice(&grid.data[o + py * p..o + py * p + n]);
                        }
                    }
                    o += p * p;
                }
            }
        }
    }
    out
}

fn grid_from_parts(origin: Shape, patch_size: usize, data: Vec<f32>) -> PatchGrid {
    PatchGrid {
        origin,
        patch_size,
        rows: origin[2].div_ceil(patch_size),
        cols: origin[3].div_ceil(patch_size),
        data,
    }
}

/// Circular cross-correlation through the frequency domain, with the residue check.
fn correlate(plan: &Fft2Plan, q: &[f32], k: &[f32]) -> Result<Vec<f32>> {
    let qf = plan.forward_real(q);
    let kf = plan.forward_real(k);
    let mut prod: Vec<Complex64> = qf.iter().zip(&kf).map(|(a, b)| a * b.conj()).collect();
    plan.inverse_in_place(&mut prod);
    let residue = prod.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if residue > IMAG_RESIDUE_TOL {
        return Err(Error::Consistency(format!(
            "frequency attention left imaginary residue {residue:e} above {IMAG_RESIDUE_TOL:e}"
        )));
    }
    Ok(prod.iter().map(|c| c.re as f32).collect())
}

/// `M = real(IFFT(FFT(q) * conj(FFT(k))))` for one square patch pair.
pub fn freq_attention(q_patch: &[f32], k_patch: &[f32], size: usize) -> Result<AttentionMap> {
    check_patch_size(size)?;
    if q_patch.len() != size * size {
        return Err(Error::shape("freq_attention", "query patch entries", size * size, q_patch.len()));
    }
    if k_patch.len() != size * size {
        return Err(Error::shape("freq_attention", "key patch entries", size * size, k_patch.len()));
    }
    let plan = Fft2Plan::new(size, size)?;
    AttentionMap::new(size, size, correlate(&plan, q_patch, k_patch)?)
}

/// Per-row Min-p mask. With `trust`, every row threshold is scaled by it.
///
/// Rows whose maximum is not positive pass through unmasked, as does every row at `p_base == 0`.
pub fn min_p_mask(map: &AttentionMap, p_base: f32, trust: Option<f32>) -> Vec<bool> {
    if p_base == 0.0 {
        return vec![true; map.values.len()];
    }
    let mut mask = Vec::with_capacity(map.values.len());
    for r in 0..map.h {
        let row = map.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max <= 0.0 {
            mask.extend(std::iter::repeat_n(true, row.len()));
            continue;
        }
        let mut threshold = p_base * max;
        if let Some(t) = trust {
            threshold = rmt::adjust_threshold(threshold, t);
        }
        mask.extend(row.iter().map(|&v| v >= threshold));
    }
    mask
}

/// Keeps the `k` largest entries per row; ties go to the lower column index.
pub fn top_k_mask(map: &AttentionMap, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > map.w {
        return Err(Error::InvalidArgument(format!(
            "top_k: k must lie in 1..={}, got {k}",
            map.w
        )));
    }
    let mut mask = vec![false; map.values.len()];
    let mut order: Vec<usize> = Vec::with_capacity(map.w);
    for r in 0..map.h {
        let row = map.row(r);
        order.clear();
        order.extend(0..map.w);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &c in &order[..k] {
            mask[r * map.w + c] = true;
        }
    }
    Ok(mask)
}

/// Elementwise modulation of a value patch by a masked map.
///
/// Returns the output patch and the number of multiplies performed (one per retained entry).
pub fn apply_attention(masked: &AttentionMap, mask: &[bool], v_patch: &[f32]) -> Result<(Vec<f32>, u64)> {
    if v_patch.len() != masked.values.len() {
        return Err(Error::shape("apply_attention", "value patch entries", masked.values.len(), v_patch.len()));
    }
    if mask.len() != masked.values.len() {
        return Err(Error::shape("apply_attention", "mask entries", masked.values.len(), mask.len()));
    }
    let mut mults = 0u64;
    let out = masked
        .values
        .iter()
        .zip(mask)
        .zip(v_patch)
        .map(|((&m, &keep), &v)| {
            if keep {
                mults += 1;
                m * v
            } else {
                0.0
            }
        })
        .collect();
    Ok((out, mults))
}

/// Per-patch masks for a whole grid of attention maps under one strategy.
pub fn strategy_masks(maps: &[AttentionMap], cfg: &SparsityConfig) -> Result<Vec<Vec<bool>>> {
    let summaries = |maps: &[AttentionMap]| -> Result<Vec<SpectralSummary>> {
        maps.iter().map(|m| rmt::summarize_map(m, &cfg.trust)).collect()
    };
    match cfg.strategy {
        Strategy::Dense => Ok(maps.iter().map(|m| vec![true; m.values.len()]).collect()),
        Strategy::MinP => Ok(maps.iter().map(|m| min_p_mask(m, cfg.p_base, None)).collect()),
        Strategy::TopK(k) => maps.iter().map(|m| top_k_mask(m, k.min(m.w))).collect(),
        Strategy::MinPTrusted => {
            let sums = summaries(maps)?;
            Ok(maps
                .iter()
                .zip(&sums)
                .map(|(m, s)| min_p_mask(m, cfg.p_base, Some(s.trust as f32)))
                .collect())
        }
        Strategy::Fed | Strategy::Isa => {
            let sums = summaries(maps)?;
            let tau = if cfg.strategy == Strategy::Fed {
                cfg.trust.fed_tau as f64
            } else {
                rmt::isa_fixed_point(&sums, cfg.trust.isa_alpha, cfg.trust.isa_initial_tau as f64, ISA_MAX_ITERS)
            };
            Ok(maps
                .iter()
                .zip(&sums)
                .map(|(m, s)| {
                    if s.lambda_max < tau {
                        min_p_mask(m, cfg.p_base, None)
                    } else {
                        vec![false; m.values.len()]
                    }
                })
                .collect())
        }
    }
}

/// Intermediate state of the fused attention op needed by its adjoint.
#[derive(Clone, Debug)]
pub struct AttentionSaved {
    pub patch_size: usize,
    /// Masked attention maps for every patch, in grid storage order.
    pub masked_maps: Vec<f32>,
    pub mask: Vec<bool>,
}

pub struct AttentionOutput {
    pub output: Tensor,
    pub saved: AttentionSaved,
    pub ledger: FlopLedger,
}

/// Fused frequency-domain sparse attention over same-shaped Q, K, V maps.
///
/// Each patch map is the circular cross-correlation divided by the patch area.
///
/// With `replay_mask` the strategy is bypassed and the given mask is used verbatim.
pub fn sparse_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &SparsityConfig,
    patch_size: usize,
    replay_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    q.check_same_shape(k, "sparse_attention")?;
    q.check_same_shape(v, "sparse_attention")?;
    let qg = patchify(q, patch_size)?;
    let kg = patchify(k, patch_size)?;
    let vg = patchify(v, patch_size)?;
    let plan = Fft2Plan::new(patch_size, patch_size)?;
    let area = patch_size * patch_size;

    let scale = 1.0 / area as f32;
    let mut maps = Vec::with_capacity(qg.patch_count());
    for idx in qg.indices() {
        let mut corr = correlate(&plan, qg.patch(idx), kg.patch(idx))?;
        corr.iter_mut().for_each(|v| *v *= scale);
        let mut map = AttentionMap::new(patch_size, patch_size, corr)?;
        map.source = Some(idx);
        maps.push(map);
    }

    let mask: Vec<bool> = match replay_mask {
        Some(m) => {
            if m.len() != maps.len() * area {
                return Err(Error::Consistency(format!(
                    "replayed attention mask has {} entries, expected {}",
                    m.len(),
                    maps.len() * area
                )));
            }
            m.to_vec()
        }
        None => strategy_masks(&maps, cfg)?.concat(),
    };

    let mut masked_maps = Vec::with_capacity(maps.len() * area);
    let mut out_data = Vec::with_capacity(maps.len() * area);
    let mut mults = 0u64;
    for (i, (map, idx)) in maps.iter().zip(vg.indices()).enumerate() {
        let pm = &mask[i * area..(i + 1) * area];
        let masked = map.masked(pm);
        let (o, n) = apply_attention(&masked, pm, vg.patch(idx))?;
        mults += n;
        masked_maps.extend_from_slice(masked.values());
        out_data.extend(o);
    }

    let total = mask.len() as u64;
    let ledger = FlopLedger {
        conv_macs: 0,
        fft_butterflies: 3 * plan.butterflies() * maps.len() as u64,
        attention_mults: mults,
        attention_skipped: total - mults,
    };
    let output = unpatchify(&grid_from_parts(q.shape(), patch_size, out_data));
    Ok(AttentionOutput {
        output,
        saved: AttentionSaved {
            patch_size,
            masked_maps,
            mask,
        },
        ledger,
    })
}

/// Gradients `(dq, dk, dv)` of the fused attention with the mask held fixed.
///
/// For `out = mask * M * v` with `M[s] = sum_t q[t + s] k[t]`:
/// `dv = mask * M * g`, `dM = mask * v * g`, `dq = IFFT(FFT(dM) * FFT(k))` and
/// `dk = IFFT(FFT(q) * conj(FFT(dM)))`.
pub fn sparse_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    saved: &AttentionSaved,
    grad_out: &Tensor,
    need: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let p = saved.patch_size;
    let area = p * p;
    let plan = Fft2Plan::new(p, p)?;
    let qg = patchify(q, p)?;
    let kg = patchify(k, p)?;
    let vg = patchify(v, p)?;
    let gg = patchify(grad_out, p)?;
    let n = qg.patch_count() * area;
    let mut dq = vec![0.0f32; if need[0] { n } else { 0 }];
    let mut dk = vec![0.0f32; if need[1] { n } else { 0 }];
    let mut dv = vec![0.0f32; if need[2] { n } else { 0 }];

    let scale = 1.0 / area as f64;
    let mut dm = vec![Complex64::new(0.0, 0.0); area];
    for (i, idx) in qg.indices().enumerate() {
        let base = i * area;
        let g = gg.patch(idx);
        let mm = &saved.masked_maps[base..base + area];
        let mk = &saved.mask[base..base + area];
        if need[2] {
            for j in 0..area {
                dv[base + j] = mm[j] * g[j];
            }
        }
        if !(need[0] || need[1]) {
            continue;
        }
        let vp = vg.patch(idx);
        let mut any = false;
        for j in 0..area {
            let val = if mk[j] { vp[j] as f64 * g[j] as f64 * scale } else { 0.0 };
            any |= val != 0.0;
            dm[j] = Complex64::new(val, 0.0);
        }
        if !any {
            continue;
        }
        plan.forward_in_place(&mut dm);
        if need[0] {
            let kf = plan.forward_real(kg.patch(idx));
            let mut buf: Vec<Complex64> = dm.iter().zip(&kf).map(|(a, b)| a * b).collect();
            plan.inverse_in_place(&mut buf);
            for j in 0..area {
                dq[base + j] = buf[j].re as f32;
            }
        }
        if need[1] {
            let qf = plan.forward_real(qg.patch(idx));
            let mut buf: Vec<Complex64> = qf.iter().zip(&dm).map(|(a, b)| a * b.conj()).collect();
            plan.inverse_in_place(&mut buf);
            for j in 0..area {
                dk[base + j] = buf[j].re as f32;
            }
        }
    }
    let shape = q.shape();
    let finish = |data: Vec<f32>, needed: bool| needed.then(|| unpatchify(&grid_from_parts(shape, p, data)));
    Ok([finish(dq, need[0]), finish(dk, need[1]), finish(dv, need[2])])
}

/// Q/K/V projections of one attention block: three independent depthwise 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct Msa {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub patch_size: usize,
}

impl Msa {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        patch_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_patch_size(patch_size)?;
        let mut conv = |part: &str| Conv::new(store, &format!("{name}.{part}"), channels, channels, ConvSpec::DEPTHWISE, rng);
        Ok(Self {
            q: conv("q")?,
            k: conv("k")?,
            v: conv("v")?,
            patch_size,
        })
    }

    pub fn qkv_project(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.q.forward(tape, store, x)?,
            self.k.forward(tape, store, x)?,
            self.v.forward(tape, store, x)?,
        ))
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, cfg: &SparsityConfig) -> Result<Var> {
        let (q, k, v) = self.qkv_project(tape, store, x)?;
        tape.sparse_attention(&q, &k, &v, cfg, self.patch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[f32]]) -> AttentionMap {
        let w = rows[0].len();
        AttentionMap::new(rows.len(), w, rows.concat()).unwrap()
    }

    fn kept(m: &AttentionMap, mask: &[bool]) -> Vec<f32> {
        m.masked(mask).values().to_vec()
    }

    #[test]
    fn min_p_examples() {
        let m = map(&[&[2.0, 1.0, 0.2]]);
        assert_eq!(kept(&m, &min_p_mask(&m, 0.5, None)), vec![2.0, 1.0, 0.0]);
        assert_eq!(kept(&m, &min_p_mask(&m, 0.5, Some(0.5))), vec![2.0, 1.0, 0.0]);
        assert_eq!(kept(&m, &min_p_mask(&m, 0.5, Some(0.9))), vec![2.0, 1.0, 0.0]);
        let m = map(&[&[2.0, 0.8, 0.2]]);
        assert_eq!(kept(&m, &min_p_mask(&m, 0.5, None)), vec![2.0, 0.0, 0.0]);
        assert_eq!(kept(&m, &min_p_mask(&m, 0.5, Some(0.5))), vec![2.0, 0.8, 0.0]);
    }

    #[test]
    fn min_p_zero_base_and_nonpositive_rows() {
        let m = map(&[&[0.3, 0.0, 1.0], &[-1.0, -2.0, -0.5]]);
        assert_eq!(min_p_mask(&m, 0.0, None), vec![true; 6]);
        let equal = map(&[&[0.7, 0.7, 0.7]]);
        assert_eq!(min_p_mask(&equal, 1.0, None), vec![true; 3]);
    }

    #[test]
    fn top_k_examples() {
        let m = map(&[&[3.0, 5.0, 5.0]]);
        assert_eq!(top_k_mask(&m, 1).unwrap(), vec![false, true, false]);
        assert_eq!(top_k_mask(&m, 3).unwrap(), vec![true; 3]);
        assert!(top_k_mask(&m, 0).is_err());
        assert!(top_k_mask(&m, 4).is_err());
    }

    #[test]
    fn autocorrelation_of_impulse() {
        let mut q = vec![0.0f32; 64];
        q[0] = 1.0;
        let m = freq_attention(&q, &q, 8).unwrap();
        assert!((m.values()[0] - 1.0).abs() < 1e-6);
        assert!(m.values()[1..].iter().all(|v| v.abs() < 1e-6));
        let z = freq_attention(&q, &[0.0; 64], 8).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_grid_shapes() {
        let x = Tensor::from_fn([1, 1, 16, 16], |_, _, y, x| (y * 16 + x) as f32);
        let g = patchify(&x, 8).unwrap();
        assert_eq!(g.grid(), (2, 2));
        assert_eq!(unpatchify(&g), x);
        let x8 = Tensor::from_fn([1, 1, 8, 8], |_, _, y, x| (y * 8 + x) as f32);
        let g8 = patchify(&x8, 8).unwrap();
        assert_eq!(g8.patch(PatchIndex { batch: 0, channel: 0, row: 0, col: 0 }), x8.data());
        assert!(patchify(&x, 6).is_err());
    }

    #[test]
    fn modulation_counts_retained_entries() {
        let m = map(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mask = [true, false, true, true];
        let (out, n) = apply_attention(&m.masked(&mask), &mask, &[1.0, 1.0, 2.0, 0.5]).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 6.0, 2.0]);
        assert_eq!(n, 3);
        assert!(apply_attention(&m, &mask, &[1.0]).is_err());
    }
}
