//! Same-padded 2D convolution (standard 3x3, pointwise 1x1, depthwise 3x3) with
//! optional stride, plus its adjoint.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Standard3x3,
    Pointwise,
    Depthwise3x3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub stride: usize,
}

impl ConvSpec {
    pub const STANDARD: ConvSpec = ConvSpec {
        kind: ConvKind::Standard3x3,
        stride: 1,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        kind: ConvKind::Pointwise,
        stride: 1,
    };
    pub const DEPTHWISE: ConvSpec = ConvSpec {
        kind: ConvKind::Depthwise3x3,
        stride: 1,
    };
    /// 3x3 stride-2 convolution used for encoder downsampling.
    pub const DOWNSAMPLE: ConvSpec = ConvSpec {
        kind: ConvKind::Standard3x3,
        stride: 2,
    };

    pub fn kernel_size(&self) -> usize {
        match self.kind {
            ConvKind::Pointwise => 1,
            ConvKind::Standard3x3 | ConvKind::Depthwise3x3 => 3,
        }
    }

    fn padding(&self) -> usize {
        self.kernel_size() / 2
    }

    pub fn is_depthwise(&self) -> bool {
        self.kind == ConvKind::Depthwise3x3
    }

    pub fn weight_shape(&self, cin: usize, cout: usize) -> Shape {
        let k = self.kernel_size();
        if self.is_depthwise() {
            [cin, 1, k, k]
        } else {
            [cout, cin, k, k]
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel_size();
        let p = self.padding();
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    /// Multiply-accumulate count for one forward application.
    pub fn macs(&self, batch: usize, cin: usize, cout: usize, ho: usize, wo: usize) -> u64 {
        let k = self.kernel_size() as u64;
        let per_out = if self.is_depthwise() { k * k } else { cin as u64 * k * k };
        batch as u64 * cout as u64 * ho as u64 * wo as u64 * per_out
    }
}

/// Output index range `[start, end)` such that `o * stride + offset` lies inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let start = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let end = (last / s + 1).min(out_len as isize);
    let start = start.min(end);
    (start as usize, end as usize)
}

fn check_shapes(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<usize> {
    let (_, cin, h, w) = x.dims();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("conv2d: empty spatial input".into()));
    }
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let [wo, wi, kh, kw] = weight.shape();
    let k = spec.kernel_size();
    if kh != k {
        return Err(Error::shape("conv2d", "kernel height", k, kh));
    }
    if kw != k {
        return Err(Error::shape("conv2d", "kernel width", k, kw));
    }
    if spec.is_depthwise() {
        if wi != 1 {
            return Err(Error::shape("conv2d", "depthwise kernel input channels", 1, wi));
        }
        if wo != cin {
            return Err(Error::shape("conv2d", "depthwise output channels", cin, wo));
        }
    } else if wi != cin {
        return Err(Error::shape("conv2d", "input channels", wi, cin));
    }
    if bias.shape() != [wo, 1, 1, 1] {
        return Err(Error::shape("conv2d", "bias channels", wo, bias.shape()[0]));
    }
    Ok(wo)
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let cout = check_shapes(x, weight, bias, spec)?;
    match spec.kind {
        ConvKind::Pointwise if spec.stride == 1 => return Ok(pointwise_forward(x, weight, bias, cout)),
        ConvKind::Standard3x3 => return Ok(im2col_forward(x, weight, bias, spec, cout)),
        _ => {}
    }
    let (b, cin, h, w) = x.dims();
    let (ho, wo) = spec.output_hw(h, w);
    let k = spec.kernel_size();
    let p = spec.padding() as isize;
    let s = spec.stride;
    let mut out = Tensor::zeros([b, cout, ho, wo]);
    let wdata = weight.data();

    for bi in 0..b {
        for o in 0..cout {
            let inputs = if spec.is_depthwise() { o..o + 1 } else { 0..cin };
            let bias_v = bias.data()[o];
            let oplane = out.plane_mut(bi, o);
            oplane.fill(bias_v);
            for i in inputs {
                let iplane = x.plane(bi, i);
                let wi = if spec.is_depthwise() { 0 } else { i };
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (ys, ye) = valid_range(ho, h, dy, s);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (xs, xe) = valid_range(wo, w, dx, s);
                        if xs >= xe {
                            continue;
                        }
                        let wv = wdata[((o * weight.shape()[1] + wi) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in ys..ye {
                            let yi = (y * s) as isize + dy;
                            let irow = &iplane[yi as usize * w..(yi as usize + 1) * w];
                            let orow = &mut oplane[y * wo..(y + 1) * wo];
                            if s == 1 {
                                let src = &irow[(xs as isize + dx) as usize..];
                                for (ov, iv) in orow[xs..xe].iter_mut().zip(src) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for xo in xs..xe {
                                    orow[xo] += wv * irow[((xo * s) as isize + dx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product accumulated in eight `f32` lanes and reduced in `f64`.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x as f64 * y as f64).sum();
    lanes.iter().map(|&v| v as f64).sum::<f64>() + tail
}

/// `[B,C,H,W]` data as `[B*H*W, C]` rows.
fn to_pixel_major(t: &Tensor) -> Vec<f32> {
    let (b, c, h, w) = t.dims();
    let hw = h * w;
    let mut out = vec![0.0f32; b * hw * c];
    for bi in 0..b {
        for ci in 0..c {
            for (p, &v) in t.plane(bi, ci).iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    out
}

fn from_pixel_major(rows: &[f32], shape: [usize; 4]) -> Tensor {
    let [_, c, h, w] = shape;
    let hw = h * w;
    Tensor::from_fn(shape, |bi, ci, y, x| rows[(bi * hw + y * w + x) * c + ci])
}

/// Pixel-major 1x1 convolution, used when planes are shorter than the channel count.
fn pointwise_rows_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, cout: usize) -> Tensor {
    let (b, cin, h, w) = x.dims();
    let xr = to_pixel_major(x);
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; b * h * w * cout];
    for (xrow, orow) in xr.chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        for (o, ov) in orow.iter_mut().enumerate() {
            *ov = bd[o] + dot(&wd[o * cin..(o + 1) * cin], xrow) as f32;
        }
    }
    from_pixel_major(&out, [b, cout, h, w])
}

fn pointwise_rows_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor, need: [bool; 3]) -> ConvGrads {
    let (_, cin, _, _) = x.dims();
    let cout = grad_out.shape()[1];
    let wd = weight.data();
    let gr = to_pixel_major(grad_out);
    let mut grads = ConvGrads::default();
    if need[0] {
        let mut dx = vec![0.0f32; x.numel()];
        for (grow, drow) in gr.chunks_exact(cout).zip(dx.chunks_exact_mut(cin)) {
            for (o, &g) in grow.iter().enumerate() {
                if g != 0.0 {
                    axpy(drow, g, &wd[o * cin..(o + 1) * cin]);
                }
            }
        }
        grads.input = Some(from_pixel_major(&dx, x.shape()));
    }
    if need[1] {
        let xr = to_pixel_major(x);
        let mut dw = vec![0.0f32; cout * cin];
        for (grow, xrow) in gr.chunks_exact(cout).zip(xr.chunks_exact(cin)) {
            for (o, &g) in grow.iter().enumerate() {
                if g != 0.0 {
                    axpy(&mut dw[o * cin..(o + 1) * cin], g, xrow);
                }
            }
        }
        grads.weight = Some(Tensor::new(weight.shape(), dw).expect("weight shape"));
    }
    grads
}

/// 1x1 convolution as a per-image matrix product over flattened planes.
fn pointwise_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, cout: usize) -> Tensor {
    let (b, cin, h, w) = x.dims();
    if h * w < cin {
        return pointwise_rows_forward(x, weight, bias, cout);
    }
    let mut out = Tensor::zeros([b, cout, h, w]);
    let wd = weight.data();
    for bi in 0..b {
        for o in 0..cout {
            let oplane = out.plane_mut(bi, o);
            oplane.fill(bias.data()[o]);
            for i in 0..cin {
                let wv = wd[o * cin + i];
                if wv != 0.0 {
                    axpy(oplane, wv, x.plane(bi, i));
                }
            }
        }
    }
    out
}

fn pointwise_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor, need: [bool; 3]) -> ConvGrads {
    let (b, cin, h, w) = x.dims();
    if h * w < cin {
        return pointwise_rows_backward(x, weight, grad_out, need);
    }
    let cout = grad_out.shape()[1];
    let wd = weight.data();
    let mut grads = ConvGrads::default();
    if need[0] {
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            for i in 0..cin {
                let dplane = dx.plane_mut(bi, i);
                for o in 0..cout {
                    let wv = wd[o * cin + i];
                    if wv != 0.0 {
                        axpy(dplane, wv, grad_out.plane(bi, o));
                    }
                }
            }
        }
        grads.input = Some(dx);
    }
    if need[1] {
        let mut dw = Tensor::zeros(weight.shape());
        let dwd = dw.data_mut();
        for o in 0..cout {
            for i in 0..cin {
                let acc: f64 = (0..b).map(|bi| dot(grad_out.plane(bi, o), x.plane(bi, i))).sum();
                dwd[o * cin + i] = acc as f32;
            }
        }
        grads.weight = Some(dw);
    }
    grads
}

/// Unfolds one image into `[cin * k * k, ho * wo]` patch columns.
fn im2col(x: &Tensor, bi: usize, spec: ConvSpec) -> Vec<f32> {
    let (_, cin, h, w) = x.dims();
    let k = spec.kernel_size();
    let p = spec.padding() as isize;
    let s = spec.stride;
    let (ho, wo) = spec.output_hw(h, w);
    let mut cols = vec![0.0f32; cin * k * k * ho * wo];
    for i in 0..cin {
        let src = x.plane(bi, i);
        for ky in 0..k {
            let (ys, ye) = valid_range(ho, h, ky as isize - p, s);
            for kx in 0..k {
                let (xs, xe) = valid_range(wo, w, kx as isize - p, s);
                let row = &mut cols[((i * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for y in ys..ye {
                    let yi = (y * s) as isize + ky as isize - p;
                    let irow = &src[yi as usize * w..][..w];
                    for xo in xs..xe {
                        row[y * wo + xo] = irow[((xo * s) as isize + kx as isize - p) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch-column gradients back onto one image.
fn col2im(cols: &[f32], dst: &mut [f32], cin: usize, h: usize, w: usize, spec: ConvSpec) {
    let k = spec.kernel_size();
    let p = spec.padding() as isize;
    let s = spec.stride;
    let (ho, wo) = spec.output_hw(h, w);
    for i in 0..cin {
        let plane = &mut dst[i * h * w..][..h * w];
        for ky in 0..k {
            let (ys, ye) = valid_range(ho, h, ky as isize - p, s);
            for kx in 0..k {
                let (xs, xe) = valid_range(wo, w, kx as isize - p, s);
                let row = &cols[((i * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for y in ys..ye {
                    let yi = ((y * s) as isize + ky as isize - p) as usize;
                    for xo in xs..xe {
                        plane[yi * w + ((xo * s) as isize + kx as isize - p) as usize] += row[y * wo + xo];
                    }
                }
            }
        }
    }
}

fn im2col_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: ConvSpec, cout: usize) -> Tensor {
    let (b, cin, h, w) = x.dims();
    let (ho, wo) = spec.output_hw(h, w);
    let n = ho * wo;
    let depth = cin * spec.kernel_size() * spec.kernel_size();
    let wd = weight.data();
    let mut out = Tensor::zeros([b, cout, ho, wo]);
    for bi in 0..b {
        let cols = im2col(x, bi, spec);
        for o in 0..cout {
            let oplane = out.plane_mut(bi, o);
            oplane.fill(bias.data()[o]);
            for j in 0..depth {
                let wv = wd[o * depth + j];
                if wv != 0.0 {
                    axpy(oplane, wv, &cols[j * n..(j + 1) * n]);
                }
            }
        }
    }
    out
}

fn im2col_backward(x: &Tensor, weight: &Tensor, spec: ConvSpec, grad_out: &Tensor, need: [bool; 3]) -> ConvGrads {
    let (b, cin, h, w) = x.dims();
    let (_, cout, ho, wo) = grad_out.dims();
    let n = ho * wo;
    let depth = cin * spec.kernel_size() * spec.kernel_size();
    let wd = weight.data();
    let mut grads = ConvGrads::default();
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| vec![0.0f64; cout * depth]);
    let mut dcols = vec![0.0f32; if need[0] { depth * n } else { 0 }];
    for bi in 0..b {
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(x, bi, spec);
            for o in 0..cout {
                let g = grad_out.plane(bi, o);
                for j in 0..depth {
                    dw[o * depth + j] += dot(g, &cols[j * n..(j + 1) * n]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for o in 0..cout {
                let g = grad_out.plane(bi, o);
                for j in 0..depth {
                    let wv = wd[o * depth + j];
                    if wv != 0.0 {
                        axpy(&mut dcols[j * n..(j + 1) * n], wv, g);
                    }
                }
            }
            let plane_len = cin * h * w;
            col2im(&dcols, &mut dx.data_mut()[bi * plane_len..(bi + 1) * plane_len], cin, h, w, spec);
        }
    }
    grads.input = dx;
    grads.weight = dw.map(|v| Tensor::new(weight.shape(), v.into_iter().map(|a| a as f32).collect()).expect("weight shape"));
    grads
}

#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let (b, cin, h, w) = x.dims();
    let (_, cout, ho, wo) = grad_out.dims();
    let k = spec.kernel_size();
    let p = spec.padding() as isize;
    let s = spec.stride;
    let wi_stride = weight.shape()[1];
    let wdata = weight.data();
    let mut grads = match spec.kind {
        ConvKind::Pointwise if s == 1 => pointwise_backward(x, weight, grad_out, need),
        ConvKind::Standard3x3 => im2col_backward(x, weight, spec, grad_out, need),
        _ => ConvGrads::default(),
    };

    if need[0] && grads.input.is_none() {
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            for o in 0..cout {
                let gplane = grad_out.plane(bi, o);
                let inputs = if spec.is_depthwise() { o..o + 1 } else { 0..cin };
                for i in inputs {
                    let wi = if spec.is_depthwise() { 0 } else { i };
                    let dplane = dx.plane_mut(bi, i);
                    for ky in 0..k {
                        let dy = ky as isize - p;
                        let (ys, ye) = valid_range(ho, h, dy, s);
                        for kx in 0..k {
                            let ddx = kx as isize - p;
                            let (xs, xe) = valid_range(wo, w, ddx, s);
                            if xs >= xe {
                                continue;
                            }
                            let wv = wdata[((o * wi_stride + wi) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in ys..ye {
                                let yi = ((y * s) as isize + dy) as usize;
                                let grow = &gplane[y * wo..(y + 1) * wo];
                                let drow = &mut dplane[yi * w..(yi + 1) * w];
                                if s == 1 {
                                    let dst = &mut drow[(xs as isize + ddx) as usize..];
                                    for (dv, gv) in dst.iter_mut().zip(&grow[xs..xe]) {
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for xo in xs..xe {
                                        drow[((xo * s) as isize + ddx) as usize] += wv * grow[xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        grads.input = Some(dx);
    }

    if need[1] && grads.weight.is_none() {
        let mut dw = Tensor::zeros(weight.shape());
        let dwd = dw.data_mut();
        for o in 0..cout {
            let inputs = if spec.is_depthwise() { o..o + 1 } else { 0..cin };
            for i in inputs {
                let wi = if spec.is_depthwise() { 0 } else { i };
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (ys, ye) = valid_range(ho, h, dy, s);
                    for kx in 0..k {
                        let ddx = kx as isize - p;
                        let (xs, xe) = valid_range(wo, w, ddx, s);
                        let mut acc = 0.0f64;
                        for bi in 0..b {
                            let gplane = grad_out.plane(bi, o);
                            let iplane = x.plane(bi, i);
                            for y in ys..ye {
                                let yi = ((y * s) as isize + dy) as usize;
                                let grow = &gplane[y * wo..(y + 1) * wo];
                                let irow = &iplane[yi * w..(yi + 1) * w];
                                let mut row_acc = 0.0f32;
                                if s == 1 {
                                    let src = &irow[(xs as isize + ddx) as usize..];
                                    for (gv, iv) in grow[xs..xe].iter().zip(src) {
                                        row_acc += gv * iv;
                                    }
                                } else {
                                    for xo in xs..xe {
                                        row_acc += grow[xo] * irow[((xo * s) as isize + ddx) as usize];
                                    }
                                }
                                acc += row_acc as f64;
                            }
                        }
                        dwd[((o * wi_stride + wi) * k + ky) * k + kx] = acc as f32;
                    }
                }
            }
        }
        grads.weight = Some(dw);
    }

    if need[2] {
        let mut db = Tensor::zeros([cout, 1, 1, 1]);
        for o in 0..cout {
            let mut acc = 0.0f64;
            for bi in 0..b {
                acc += grad_out.plane(bi, o).iter().map(|&v| v as f64).sum::<f64>();
            }
            db.data_mut()[o] = acc as f32;
        }
        grads.bias = Some(db);
    }
    grads
}
