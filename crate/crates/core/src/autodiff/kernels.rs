//! Raw numeric kernels on NCHW slices. These know nothing about the graph;
//! [`super::graph`] wires them into forward and backward rules.

use crate::tensor::Element;

/// Geometry of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`, with
/// stride 1: the input index is `o + k - pad`.
fn valid_range(k: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(n_out);
    let hi = (n_in + pad).saturating_sub(k).min(n_out).max(lo);
    (lo, hi)
}

fn im2col<T: Element>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.cin {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kj, g.pad, g.w, ow);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let off = lo + kj - g.pad;
                        line[lo..hi].copy_from_slice(&srow[off..off + (hi - lo)]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.cin {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kj, g.pad, g.w, ow);
                        let off = lo + kj - g.pad;
                        drow[off..off + (hi - lo)]
                            .iter_mut()
                            .zip(&src[oy * ow + lo..oy * ow + hi])
                            .for_each(|(d, &s)| *d += s);
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `weight` is `[cout, cin, kh, kw]`.
pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * plane;
    let mut out = vec![T::zero(); g.batch * out_per];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for b in 0..g.batch {
        let img = &x[b * in_per..(b + 1) * in_per];
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        let dst = &mut out[b * out_per..(b + 1) * out_per];
        T::gemm(
            g.cout, k, plane, T::one(), weight, k as isize, 1, src, plane as isize, 1, T::zero(), dst,
            plane as isize, 1,
        );
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradient of the cross-correlation with respect to its input, i.e. the
/// adjoint map applied to `gout`.
pub fn conv2d_input_grad<T: Element>(gout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * plane;
    let mut dx = vec![T::zero(); g.batch * in_per];
    let mut dcol = vec![T::zero(); k * plane];
    for b in 0..g.batch {
        let go = &gout[b * out_per..(b + 1) * out_per];
        let dimg = &mut dx[b * in_per..(b + 1) * in_per];
        if g.is_pointwise() {
            T::gemm(
                k, g.cout, plane, T::one(), weight, 1, k as isize, go, plane as isize, 1, T::zero(), dimg,
                plane as isize, 1,
            );
        } else {
            T::gemm(
                k, g.cout, plane, T::one(), weight, 1, k as isize, go, plane as isize, 1, T::zero(),
                &mut dcol, plane as isize, 1,
            );
            col2im_add(&dcol, g, dimg);
        }
    }
    dx
}

/// Gradient of the cross-correlation with respect to its kernel.
pub fn conv2d_weight_grad<T: Element>(x: &[T], gout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * plane;
    let mut dw = vec![T::zero(); g.cout * k];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for b in 0..g.batch {
        let img = &x[b * in_per..(b + 1) * in_per];
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        let go = &gout[b * out_per..(b + 1) * out_per];
        T::gemm(
            g.cout, plane, k, T::one(), go, plane as isize, 1, src, 1, plane as isize, T::one(), &mut dw,
            k as isize, 1,
        );
    }
    dw
}

/// Per-channel sum over batch and spatial positions of an NCHW buffer.
pub fn channel_sums<T: Element>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            for &v in &x[start..start + plane] {
                *acc += v;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Source taps for one output coordinate: `(lo, hi, weight_hi)`.
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    mode: UpsampleMode,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = srow[ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                        let top = src[y0 * w + x0] * lx0 + src[y0 * w + x1] * lx1;
                        let bot = src[y1 * w + x0] * lx0 + src[y1 * w + x1] * lx1;
                        dst[oy * ow + ox] = top * ly0 + bot * ly1;
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_backward<T: Element>(
    gout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    mode: UpsampleMode,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                let src = &gout[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..planes {
                let src = &gout[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                        let g = src[oy * ow + ox];
                        dst[y0 * w + x0] += g * ly0 * lx0;
                        dst[y0 * w + x1] += g * ly0 * lx1;
                        dst[y1 * w + x0] += g * ly1 * lx0;
                        dst[y1 * w + x1] += g * ly1 * lx1;
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat index of the winning input element (first on ties).
pub fn max_pool2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel mean and biased variance of an NCHW buffer.
pub fn channel_moments<T: Element>(x: &[T], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let start = (b * channels + c) * plane;
            s += x[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for b in 0..batch {
            let start = (b * channels + c) * plane;
            ss += x[start..start + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / n;
    }
    (mean, var)
}
