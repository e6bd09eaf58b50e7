//! Forward and backward kernels shared by the eager evaluator and the tape.
//!
//! Convolutions are lowered to `im2col` + GEMM. Work is split into fixed
//! chunks of output rows (independent of the thread count), and per-item
//! partial reductions are summed in batch order, so results are bitwise
//! reproducible in both execution modes.

use super::Tensor;
use crate::error::{Error, Result};
use crate::exec;

/// Target number of output columns per im2col chunk.
const COLS_PER_CHUNK: usize = 1024;

/// `c = a · b + beta · c` for strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A view out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B view out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C view out of bounds");
    // SAFETY: every index reachable through the strided views was checked
    // against the slice lengths above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom { stride: 1, pad: 1 };
    pub const POINTWISE: ConvGeom = ConvGeom { stride: 1, pad: 0 };
    pub const DOWN2: ConvGeom = ConvGeom { stride: 2, pad: 1 };

    pub fn out_len(&self, n: usize, k: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < k || self.stride == 0 {
            None
        } else {
            Some((padded - k) / self.stride + 1)
        }
    }
}

struct ConvShape {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl ConvShape {
    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.g.stride == 1 && self.g.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COLS_PER_CHUNK / self.wo).clamp(1, self.ho)
    }

    fn chunks(&self) -> usize {
        self.ho.div_ceil(self.rows_per_chunk())
    }

    fn chunk_rows(&self, i: usize) -> (usize, usize) {
        let r = self.rows_per_chunk();
        (i * r, ((i + 1) * r).min(self.ho))
    }

    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.g.stride as isize, self.g.pad as isize);
        let (h, w, wo) = (self.h as isize, self.w, self.wo);
        let ncols = (r1 - r0) * wo;
        for c in 0..self.cin {
            let plane = &x[c * self.h * w..(c + 1) * self.h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oh in r0..r1 {
                        let d = &mut dst[(oh - r0) * wo..(oh - r0 + 1) * wo];
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= h {
                            d.fill(0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        for (ow, v) in d.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize - p;
                            *v = if iw >= 0 && (iw as usize) < w {
                                src[iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, x: &mut [f64]) {
        let (k, s, p) = (self.k, self.g.stride as isize, self.g.pad as isize);
        let (h, w, wo) = (self.h as isize, self.w, self.wo);
        let ncols = (r1 - r0) * wo;
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * w..(c + 1) * self.h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oh in r0..r1 {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let d = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        let sr = &src[(oh - r0) * wo..(oh - r0 + 1) * wo];
                        for (ow, v) in sr.iter().enumerate() {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && (iw as usize) < w {
                                d[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_shape(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<ConvShape> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, cin_w, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(Error::shape(format!("only square kernels are supported, got {kh}x{kw}")));
    }
    if cin != cin_w {
        return Err(Error::config(format!(
            "convolution expects {cin_w} input channels, got {cin}"
        )));
    }
    let (ho, wo) = match (g.out_len(h, kh), g.out_len(wd, kw)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "input {h}x{wd} too small for kernel {kh} with {g:?}"
            )))
        }
    };
    Ok(ConvShape {
        n,
        cin,
        h,
        w: wd,
        cout,
        k: kh,
        ho,
        wo,
        g,
    })
}

/// 2-D convolution with zero padding. `w` is `(out, in, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let s = conv_shape(x, w, g)?;
    if let Some(b) = bias {
        if b.numel() != s.cout {
            return Err(Error::shape(format!(
                "bias has {} entries for {} output channels",
                b.numel(),
                s.cout
            )));
        }
    }
    let chunks = s.chunks();
    let kdim = s.kdim();
    let item_len = s.cin * s.h * s.w;
    let xd = x.data();
    let wd = w.data();
    let parts = exec::map_range(s.n * chunks, |task| {
        let (bi, ci) = (task / chunks, task % chunks);
        let (r0, r1) = s.chunk_rows(ci);
        let ncols = (r1 - r0) * s.wo;
        let xi = &xd[bi * item_len..(bi + 1) * item_len];
        let mut out = vec![0.0; s.cout * ncols];
        if s.pointwise() {
            let b = &xi[r0 * s.wo..];
            gemm(s.cout, kdim, ncols, wd, kdim, 1, b, s.h * s.w, 1, 0.0, &mut out, ncols, 1);
        } else {
            let mut cols = vec![0.0; kdim * ncols];
            s.im2col(xi, r0, r1, &mut cols);
            gemm(s.cout, kdim, ncols, wd, kdim, 1, &cols, ncols, 1, 0.0, &mut out, ncols, 1);
        }
        out
    });
    let plane = s.ho * s.wo;
    let mut y = vec![0.0; s.n * s.cout * plane];
    for (task, part) in parts.into_iter().enumerate() {
        let (bi, ci) = (task / chunks, task % chunks);
        let (r0, r1) = s.chunk_rows(ci);
        let ncols = (r1 - r0) * s.wo;
        for o in 0..s.cout {
            let dst = &mut y[(bi * s.cout + o) * plane + r0 * s.wo..][..ncols];
            let src = &part[o * ncols..(o + 1) * ncols];
            match bias {
                Some(b) => {
                    let bv = b.data()[o];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + bv);
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    Tensor::new([s.n, s.cout, s.ho, s.wo], y)
}

/// Gradient of [`conv2d`] with respect to its input of spatial size `h x w`.
pub fn conv2d_backward_input(
    dy: &Tensor,
    w: &Tensor,
    g: ConvGeom,
    h: usize,
    wd: usize,
) -> Result<Tensor> {
    let (n, cout, ho, wo) = dy.dims4()?;
    let (cout_w, cin, _, _) = w.dims4()?;
    if cout != cout_w {
        return Err(Error::shape(format!(
            "gradient has {cout} channels, kernel produces {cout_w}"
        )));
    }
    let probe = Tensor::zeros([1, cin, h, wd]);
    let s = conv_shape(&probe, w, g)?;
    if (s.ho, s.wo) != (ho, wo) {
        return Err(Error::shape(format!(
            "input {h}x{wd} does not produce output {ho}x{wo}"
        )));
    }
    let s = ConvShape { n, ..s };
    let kdim = s.kdim();
    let item_len = cin * h * wd;
    let plane = ho * wo;
    let dyd = dy.data();
    let wdata = w.data();
    let mut dx = vec![0.0; n * item_len];
    exec::for_each_chunk_mut(&mut dx, item_len, |bi, dxi| {
        let dyi = &dyd[bi * cout * plane..(bi + 1) * cout * plane];
        if s.pointwise() {
            gemm(cin, cout, plane, wdata, 1, kdim, dyi, plane, 1, 0.0, dxi, plane, 1);
            return;
        }
        for ci in 0..s.chunks() {
            let (r0, r1) = s.chunk_rows(ci);
            let ncols = (r1 - r0) * wo;
            let mut cols = vec![0.0; kdim * ncols];
            gemm(
                kdim,
                cout,
                ncols,
                wdata,
                1,
                kdim,
                &dyi[r0 * wo..],
                plane,
                1,
                0.0,
                &mut cols,
                ncols,
                1,
            );
            s.col2im(&cols, r0, r1, dxi);
        }
    });
    Tensor::new([n, cin, h, wd], dx)
}

/// Gradient of [`conv2d`] with respect to a kernel of size `k`.
pub fn conv2d_backward_weight(x: &Tensor, dy: &Tensor, g: ConvGeom, k: usize) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4()?;
    let (n2, cout, ho, wo) = dy.dims4()?;
    if n != n2 {
        return Err(Error::shape("batch mismatch in weight gradient"));
    }
    let probe = Tensor::zeros([cout, cin, k, k]);
    let s = conv_shape(x, &probe, g)?;
    if (s.ho, s.wo) != (ho, wo) {
        return Err(Error::shape("output size mismatch in weight gradient"));
    }
    let kdim = s.kdim();
    let item_len = cin * h * wd;
    let plane = ho * wo;
    let xd = x.data();
    let dyd = dy.data();
    let partials = exec::map_range(n, |bi| {
        let xi = &xd[bi * item_len..(bi + 1) * item_len];
        let dyi = &dyd[bi * cout * plane..(bi + 1) * cout * plane];
        let mut dw = vec![0.0; cout * kdim];
        if s.pointwise() {
            gemm(cout, plane, kdim, dyi, plane, 1, xi, 1, plane, 0.0, &mut dw, kdim, 1);
            return dw;
        }
        for ci in 0..s.chunks() {
            let (r0, r1) = s.chunk_rows(ci);
            let ncols = (r1 - r0) * wo;
            let mut cols = vec![0.0; kdim * ncols];
            s.im2col(xi, r0, r1, &mut cols);
            gemm(
                cout,
                ncols,
                kdim,
                &dyi[r0 * wo..],
                plane,
                1,
                &cols,
                1,
                ncols,
                1.0,
                &mut dw,
                kdim,
                1,
            );
        }
        dw
    });
    let mut total = vec![0.0; cout * kdim];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    Tensor::new([cout, cin, k, k], total)
}

/// Per-channel sum over batch and space, i.e. the bias gradient.
pub fn channel_sums(dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *o += dy.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    Tensor::new([c], out)
}

/// Transposed convolution, the adjoint of [`conv2d`]. `w` is `(in, out, k, k)`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeom,
) -> Result<Tensor> {
    let (_, _, h, wd) = x.dims4()?;
    let (_, cout, k, _) = w.dims4()?;
    let out_len = |n: usize| -> Result<usize> {
        ((n - 1) * g.stride + k)
            .checked_sub(2 * g.pad)
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::shape("transposed convolution output is empty"))
    };
    let mut y = conv2d_backward_input(x, w, g, out_len(h)?, out_len(wd)?)?;
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape("bias length mismatch"));
        }
        add_channel_bias(&mut y, b.data())?;
    }
    Ok(y)
}

pub fn add_channel_bias(y: &mut Tensor, bias: &[f64]) -> Result<()> {
    let (n, c, h, w) = y.dims4()?;
    let plane = h * w;
    for b in 0..n {
        for (ch, bv) in bias.iter().enumerate().take(c) {
            let start = (b * c + ch) * plane;
            y.data_mut()[start..start + plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    Ok(())
}

/// Interpolation taps `(i0, i1, weight0, weight1)` for 2x bilinear upsampling
/// with half-pixel centres.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (th, tw) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * c * oh * ow];
    let xd = x.data();
    exec::for_each_chunk_mut(&mut y, oh * ow, |p, out| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let mut rows = vec![0.0; h * ow];
        for i in 0..h {
            for (o, &(j0, j1, a, b)) in tw.iter().enumerate() {
                rows[i * ow + o] = a * src[i * w + j0] + b * src[i * w + j1];
            }
        }
        for (o, &(i0, i1, a, b)) in th.iter().enumerate() {
            for j in 0..ow {
                out[o * ow + j] = a * rows[i0 * ow + j] + b * rows[i1 * ow + j];
            }
        }
    });
    Tensor::new([n, c, oh, ow], y)
}

pub fn upsample_bilinear2x_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = dy.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample gradient must have even size"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let (th, tw) = (bilinear_taps(h), bilinear_taps(w));
    let mut dx = vec![0.0; n * c * h * w];
    let dyd = dy.data();
    exec::for_each_chunk_mut(&mut dx, h * w, |p, out| {
        let g = &dyd[p * oh * ow..(p + 1) * oh * ow];
        let mut rows = vec![0.0; h * ow];
        for (o, &(i0, i1, a, b)) in th.iter().enumerate() {
            for j in 0..ow {
                rows[i0 * ow + j] += a * g[o * ow + j];
                rows[i1 * ow + j] += b * g[o * ow + j];
            }
        }
        for i in 0..h {
            for (o, &(j0, j1, a, b)) in tw.iter().enumerate() {
                out[i * w + j0] += a * rows[i * ow + o];
                out[i * w + j1] += b * rows[i * ow + o];
            }
        }
    });
    Tensor::new([n, c, h, w], dx)
}

/// 2x2 max pooling (floor mode). Returns the output and the flat argmax index
/// of every output element.
pub fn max_pool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], y)?, arg))
}

pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("concatenation of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in items {
        let (n2, c, h2, w2) = t.dims4()?;
        if (n2, h2, w2) != (n, h, w) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                t.shape(),
                first.shape()
            )));
        }
        total += c;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in items {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new([n, total, h, w], out)
}

/// Splits a channel-concatenated gradient back into pieces of `widths` channels.
pub fn split_channels(dy: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = dy.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape("split widths do not add up"));
    }
    let plane = h * w;
    let mut out: Vec<Vec<f64>> = widths
        .iter()
        .map(|wc| Vec::with_capacity(n * wc * plane))
        .collect();
    for b in 0..n {
        let mut off = (b * c) * plane;
        for (o, wc) in out.iter_mut().zip(widths) {
            o.extend_from_slice(&dy.data()[off..off + wc * plane]);
            off += wc * plane;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &wc)| Tensor::new([n, wc, h, w], d))
        .collect()
}

/// Keeps the top-left `h x w` window of every map.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, xh, xw) = x.dims4()?;
    if h > xh || w > xw || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot crop {xh}x{xw} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for i in 0..h {
            let start = p * xh * xw + i * xw;
            out.extend_from_slice(&x.data()[start..start + w]);
        }
    }
    Tensor::new([n, c, h, w], out)
}

pub fn crop_backward(dy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, dh, dw) = dy.dims4()?;
    let mut out = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        for i in 0..dh {
            let dst = p * h * w + i * w;
            let src = p * dh * dw + i * dw;
            out.data_mut()[dst..dst + dw].copy_from_slice(&dy.data()[src..src + dw]);
        }
    }
    Ok(out)
}

/// Mirror index without repeating the edge sample.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the right and bottom edges to `h x w`.
pub fn reflect_pad(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, xh, xw) = x.dims4()?;
    if h < xh || w < xw {
        return Err(Error::shape("reflect padding cannot shrink"));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for i in 0..h {
            let row = p * xh * xw + reflect_index(i, xh) * xw;
            for j in 0..w {
                out.push(x.data()[row + reflect_index(j, xw)]);
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Tile rectangles `(y0, y1, x0, x1)` covering an `h x w` map.
pub fn attention_tiles(h: usize, w: usize, tile: Option<usize>) -> Vec<(usize, usize, usize, usize)> {
    let (th, tw) = match tile {
        Some(t) => (t.max(1).min(h), t.max(1).min(w)),
        None => (h, w),
    };
    let mut out = Vec::new();
    for y0 in (0..h).step_by(th) {
        for x0 in (0..w).step_by(tw) {
            out.push((y0, (y0 + th).min(h), x0, (x0 + tw).min(w)));
        }
    }
    out
}

fn gather(t: &[f64], c: usize, h: usize, w: usize, rect: (usize, usize, usize, usize)) -> Vec<f64> {
    // channel-major: c x positions
    let (y0, y1, x0, x1) = rect;
    let np = (y1 - y0) * (x1 - x0);
    let mut out = Vec::with_capacity(c * np);
    for ch in 0..c {
        for i in y0..y1 {
            let row = (ch * h + i) * w;
            out.extend_from_slice(&t[row + x0..row + x1]);
        }
    }
    out
}

fn scatter(dst: &mut [f64], src: &[f64], c: usize, h: usize, w: usize, rect: (usize, usize, usize, usize)) {
    let (y0, y1, x0, x1) = rect;
    let tw = x1 - x0;
    let np = (y1 - y0) * tw;
    for ch in 0..c {
        for i in y0..y1 {
            let row = (ch * h + i) * w;
            let s = ch * np + (i - y0) * tw;
            dst[row + x0..row + x1].copy_from_slice(&src[s..s + tw]);
        }
    }
}

/// Row-softmax attention matrices `softmax(θᵀφ)` for every (item, tile), in
/// item-major order. Each matrix is `positions x positions`, row-major.
pub fn attention_weights(theta: &Tensor, phi: &Tensor, tile: Option<usize>) -> Result<Vec<Vec<f64>>> {
    theta.expect_same_shape(phi)?;
    let (n, c, h, w) = theta.dims4()?;
    let tiles = attention_tiles(h, w, tile);
    let item = c * h * w;
    Ok(exec::map_range(n * tiles.len(), |task| {
        let (b, t) = (task / tiles.len(), task % tiles.len());
        let rect = tiles[t];
        let th = gather(&theta.data()[b * item..(b + 1) * item], c, h, w, rect);
        let ph = gather(&phi.data()[b * item..(b + 1) * item], c, h, w, rect);
        softmax_scores(&th, &ph, c, (rect.1 - rect.0) * (rect.3 - rect.2))
    }))
}

fn softmax_scores(th: &[f64], ph: &[f64], c: usize, np: usize) -> Vec<f64> {
    let mut a = vec![0.0; np * np];
    for (i, row) in a.chunks_mut(np).enumerate() {
        softmax_row(th, ph, c, np, i, row);
    }
    a
}

/// Row `i` of `softmax(θᵀφ)`, with θ and φ stored `c x np`.
fn softmax_row(th: &[f64], ph: &[f64], c: usize, np: usize, i: usize, row: &mut [f64]) {
    row.iter_mut().for_each(|v| *v = 0.0);
    for ch in 0..c {
        let t = th[ch * np + i];
        let prow = &ph[ch * np..(ch + 1) * np];
        row.iter_mut().zip(prow).for_each(|(r, p)| *r += t * p);
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    let inv = 1.0 / z;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Embedded-Gaussian attention `y = softmax(θᵀφ) g` applied independently
/// within each tile. Returns the output and the attention matrices.
pub fn attention(
    theta: &Tensor,
    phi: &Tensor,
    g: &Tensor,
    tile: Option<usize>,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    theta.expect_same_shape(phi)?;
    let (n, c, h, w) = theta.dims4()?;
    let (n2, cg, h2, w2) = g.dims4()?;
    if (n2, h2, w2) != (n, h, w) {
        return Err(Error::shape("attention value map does not match keys"));
    }
    let tiles = attention_tiles(h, w, tile);
    let (item, gitem) = (c * h * w, cg * h * w);
    let parts = exec::map_range(n * tiles.len(), |task| {
        let (b, t) = (task / tiles.len(), task % tiles.len());
        let rect = tiles[t];
        let np = (rect.1 - rect.0) * (rect.3 - rect.2);
        let th = gather(&theta.data()[b * item..(b + 1) * item], c, h, w, rect);
        let ph = gather(&phi.data()[b * item..(b + 1) * item], c, h, w, rect);
        let gv = gather(&g.data()[b * gitem..(b + 1) * gitem], cg, h, w, rect);
        let mut a = vec![0.0; np * np];
        let mut y = vec![0.0; cg * np];
        for (i, row) in a.chunks_mut(np).enumerate() {
            softmax_row(&th, &ph, c, np, i, row);
            for k in 0..cg {
                y[k * np + i] = dot(row, &gv[k * np..(k + 1) * np]);
            }
        }
        (y, a)
    });
    let mut out = vec![0.0; n * gitem];
    let mut mats = Vec::with_capacity(parts.len());
    for (task, (y, a)) in parts.into_iter().enumerate() {
        let (b, t) = (task / tiles.len(), task % tiles.len());
        scatter(&mut out[b * gitem..(b + 1) * gitem], &y, cg, h, w, tiles[t]);
        mats.push(a);
    }
    Ok((Tensor::new([n, cg, h, w], out)?, mats))
}

/// Gradients of [`attention`] with respect to `(theta, phi, g)`.
pub fn attention_backward(
    dy: &Tensor,
    theta: &Tensor,
    phi: &Tensor,
    g: &Tensor,
    mats: &[Vec<f64>],
    tile: Option<usize>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = theta.dims4()?;
    let cg = g.shape()[1];
    dy.expect_same_shape(g)?;
    let tiles = attention_tiles(h, w, tile);
    if mats.len() != n * tiles.len() {
        return Err(Error::shape("attention cache does not match the tiling"));
    }
    let (item, gitem) = (c * h * w, cg * h * w);
    let parts = exec::map_range(n * tiles.len(), |task| {
        let (b, t) = (task / tiles.len(), task % tiles.len());
        let rect = tiles[t];
        let np = (rect.1 - rect.0) * (rect.3 - rect.2);
        let a = &mats[task];
        let th = gather(&theta.data()[b * item..(b + 1) * item], c, h, w, rect);
        let ph = gather(&phi.data()[b * item..(b + 1) * item], c, h, w, rect);
        let gv = gather(&g.data()[b * gitem..(b + 1) * gitem], cg, h, w, rect);
        let dyv = gather(&dy.data()[b * gitem..(b + 1) * gitem], cg, h, w, rect);
        let mut dth = vec![0.0; c * np];
        let mut dph = vec![0.0; c * np];
        let mut dg = vec![0.0; cg * np];
        let mut ds = vec![0.0; np];
        for (i, arow) in a.chunks(np).enumerate() {
            // dA_i = Σ_k dy_ki g_k ; dG_k += dy_ki A_i
            ds.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..cg {
                let d = dyv[k * np + i];
                axpy(&mut ds, d, &gv[k * np..(k + 1) * np]);
                axpy(&mut dg[k * np..(k + 1) * np], d, arow);
            }
            // softmax backward
            let s = dot(&ds, arow);
            ds.iter_mut().zip(arow).for_each(|(d, a)| *d = a * (*d - s));
            // dθ_i = Σ_j dS_ij φ_j ; dφ_j += dS_ij θ_i
            for ch in 0..c {
                dth[ch * np + i] = dot(&ds, &ph[ch * np..(ch + 1) * np]);
                axpy(&mut dph[ch * np..(ch + 1) * np], th[ch * np + i], &ds);
            }
        }
        (dth, dph, dg)
    });
    let mut dth = vec![0.0; n * item];
    let mut dph = vec![0.0; n * item];
    let mut dg = vec![0.0; n * gitem];
    for (task, (a, b_, gg)) in parts.into_iter().enumerate() {
        let (b, t) = (task / tiles.len(), task % tiles.len());
        scatter(&mut dth[b * item..(b + 1) * item], &a, c, h, w, tiles[t]);
        scatter(&mut dph[b * item..(b + 1) * item], &b_, c, h, w, tiles[t]);
        scatter(&mut dg[b * gitem..(b + 1) * gitem], &gg, cg, h, w, tiles[t]);
    }
    Ok((
        Tensor::new([n, c, h, w], dth)?,
        Tensor::new([n, c, h, w], dph)?,
        Tensor::new([n, cg, h, w], dg)?,
    ))
}

/// Batch normalisation with batch statistics. Returns `(y, x_hat, inv_std)`.
pub fn batch_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batch norm affine size mismatch"));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv = vec![0.0; c];
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * plane;
        let mut mean = 0.0;
        for b in 0..n {
            mean += x.data()[idx(b)..idx(b) + plane].iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            var += x.data()[idx(b)..idx(b) + plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        var /= m;
        let is = 1.0 / (var + eps).sqrt();
        inv[ch] = is;
        for b in 0..n {
            for k in idx(b)..idx(b) + plane {
                let xh = (x.data()[k] - mean) * is;
                xhat.data_mut()[k] = xh;
                y.data_mut()[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((y, xhat, inv))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * plane;
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for b in 0..n {
            for k in idx(b)..idx(b) + plane {
                sum_dy += dy.data()[k];
                sum_dy_xh += dy.data()[k] * xhat.data()[k];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch] / m;
        for b in 0..n {
            for k in idx(b)..idx(b) + plane {
                dx.data_mut()[k] =
                    scale * (m * dy.data()[k] - sum_dy - xhat.data()[k] * sum_dy_xh);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// `y = x wᵀ + b` for `x: (n, f)`, `w: (o, f)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, f) = dims2(x)?;
    let (o, f2) = dims2(w)?;
    if f != f2 {
        return Err(Error::config(format!("linear layer expects {f2} features, got {f}")));
    }
    let mut y = vec![0.0; n * o];
    gemm(n, f, o, x.data(), f, 1, w.data(), 1, f, 0.0, &mut y, o, 1);
    if let Some(b) = b {
        if b.numel() != o {
            return Err(Error::shape("linear bias length mismatch"));
        }
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Tensor::new([n, o], y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = dims2(x)?;
    let (o, _) = dims2(w)?;
    let mut dx = vec![0.0; n * f];
    gemm(n, o, f, dy.data(), o, 1, w.data(), f, 1, 0.0, &mut dx, f, 1);
    let mut dw = vec![0.0; o * f];
    gemm(o, n, f, dy.data(), 1, o, x.data(), f, 1, 0.0, &mut dw, f, 1);
    let mut db = vec![0.0; o];
    for row in dy.data().chunks(o) {
        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
    Ok((
        Tensor::new([n, f], dx)?,
        Tensor::new([o, f], dw)?,
        Tensor::new([o], db)?,
    ))
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape(format!("expected a matrix, got {:?}", t.shape()))),
    }
}

/// `y[:, c] = x[:, c] * scale[c] + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape("channel affine size mismatch"));
    }
    let plane = h * w;
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            y.data_mut()[start..start + plane]
                .iter_mut()
                .for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
    }
    Ok(y)
}

pub fn channel_scale(dy: &Tensor, scale: &[f64]) -> Result<Tensor> {
    channel_affine(dy, scale, &vec![0.0; scale.len()])
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
