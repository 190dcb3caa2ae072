//! Numerical kernels on channel-first tensors, shared by the autograd tape,
//! the inference path and the degradation pipeline.
//!
//! Every forward kernel has matching adjoints so the tape never needs its
//! own arithmetic.

use crate::tensor::{Real, Tensor};

// ---------------------------------------------------------------------------
// Dense convolution (zero padding, stride 1, odd square kernels)

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - p;
            for kx in 0..k {
                let dx = kx as isize - p;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = valid_range(w, dx);
                let (y0, y1) = valid_range(h, dy);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let src = &plane[sy * w..][(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                    row[y * w + x0..y * w + x1].copy_from_slice(src);
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - p;
            for kx in 0..k {
                let dx = kx as isize - p;
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = valid_range(w, dx);
                let (y0, y1) = valid_range(h, dy);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut plane[sy * w..][(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Output positions `o` in `0..n` for which `o + d` lies inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// `x: [Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]` -> `[Co,H,W]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (ci, h, wd) = x.chw();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    assert_eq!(w.shape()[1], ci, "conv input channels");
    let hw = h * wd;
    let mut out = vec![T::zero(); co * hw];
    if let Some(b) = b {
        for (o, &bv) in out.chunks_exact_mut(hw).zip(b.data()) {
            o.fill(bv);
        }
    }
    let kk = ci * k * k;
    if k == 1 {
        T::gemm(co, kk, hw, T::one(), w.data(), kk as isize, 1, x.data(), hw as isize, 1, T::one(), &mut out, hw as isize, 1);
    } else {
        let col = im2col(x.data(), ci, h, wd, k);
        T::gemm(co, kk, hw, T::one(), w.data(), kk as isize, 1, &col, hw as isize, 1, T::one(), &mut out, hw as isize, 1);
    }
    Tensor::from_vec(&[co, h, wd], out)
}

/// Adjoints of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (ci, h, wd) = x.chw();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let hw = h * wd;
    let kk = ci * k * k;
    let col_owned;
    let col: &[T] = if k == 1 {
        x.data()
    } else {
        col_owned = im2col(x.data(), ci, h, wd, k);
        &col_owned
    };
    let mut dw = vec![T::zero(); co * kk];
    // dW[co, kk] = g[co, hw] * col[kk, hw]^T
    T::gemm(co, hw, kk, T::one(), g.data(), hw as isize, 1, col, 1, hw as isize, T::zero(), &mut dw, kk as isize, 1);
    let db: Vec<T> = g.data().chunks_exact(hw).map(|c| c.iter().copied().sum()).collect();
    let dx = need_input.then(|| {
        let mut dcol = vec![T::zero(); kk * hw];
        // dcol[kk, hw] = W[co, kk]^T * g[co, hw]
        T::gemm(kk, co, hw, T::one(), w.data(), 1, kk as isize, g.data(), hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
        let dx = if k == 1 { dcol } else { col2im(&dcol, ci, h, wd, k) };
        Tensor::from_vec(&[ci, h, wd], dx)
    });
    (dx, Tensor::from_vec(w.shape(), dw), Tensor::from_vec(&[co], db))
}

// ---------------------------------------------------------------------------
// Blur with reflect padding (mirror without repeating the edge sample)

#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r), "reflect pad wider than image");
    r as usize
}

fn pad_reflect<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * ph * pw];
    for ci in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize - p as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - p as isize, w);
                out[(ci * ph + y) * pw + xx] = x[(ci * h + sy) * w + sx];
            }
        }
    }
    out
}

/// 2-D correlation of each channel of `x: [C,H,W]` with a `k x k` kernel
/// stored row-major in `kernel`, reflect-padded to keep the shape.
pub fn blur<T: Real>(x: &Tensor<T>, kernel: &[T], k: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert_eq!(kernel.len(), k * k);
    let p = k / 2;
    let pw = w + 2 * p;
    let ph = h + 2 * p;
    let xp = pad_reflect(x.data(), c, h, w, p);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let src = &xp[ci * ph * pw..(ci + 1) * ph * pw];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let kv = kernel[i * k + j];
                for y in 0..h {
                    let srow = &src[(y + i) * pw + j..][..w];
                    for (d, &s) in dst[y * w..(y + 1) * w].iter_mut().zip(srow) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Gradient of [`blur`] with respect to the kernel.
pub fn blur_backward_kernel<T: Real>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Vec<T> {
    let (c, h, w) = x.chw();
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let xp = pad_reflect(x.data(), c, h, w, p);
    let mut dk = vec![T::zero(); k * k];
    for ci in 0..c {
        let src = &xp[ci * ph * pw..(ci + 1) * ph * pw];
        let gp = &g.data()[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let mut acc = T::zero();
                for y in 0..h {
                    let srow = &src[(y + i) * pw + j..][..w];
                    acc += srow.iter().zip(&gp[y * w..(y + 1) * w]).map(|(&a, &b)| a * b).sum::<T>();
                }
                dk[i * k + j] += acc;
            }
        }
    }
    dk
}

/// Gradient of [`blur`] with respect to the image.
pub fn blur_backward_input<T: Real>(g: &Tensor<T>, kernel: &[T], k: usize) -> Tensor<T> {
    let (c, h, w) = g.chw();
    let p = k / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut dxp = vec![T::zero(); c * ph * pw];
    for ci in 0..c {
        let dst = &mut dxp[ci * ph * pw..(ci + 1) * ph * pw];
        let gp = &g.data()[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let kv = kernel[i * k + j];
                for y in 0..h {
                    let drow = &mut dst[(y + i) * pw + j..][..w];
                    for (d, &s) in drow.iter_mut().zip(&gp[y * w..(y + 1) * w]) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize - p as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - p as isize, w);
                dx[(ci * h + sy) * w + sx] += dxp[(ci * ph + y) * pw + xx];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], dx)
}

// ---------------------------------------------------------------------------
// Cubic-convolution resampling

/// Keys' cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps along one axis.
#[derive(Clone, Debug)]
pub struct ResampleAxis {
    pub in_len: usize,
    pub out_len: usize,
    /// `(first input index, normalized weights)` per output index.
    pub taps: Vec<(usize, Vec<f64>)>,
}

impl ResampleAxis {
    /// Antialiased cubic resampling from `in_len` to `out_len` samples. When
    /// shrinking, the kernel support widens by the reduction factor. Taps
    /// outside the signal are dropped and the rest renormalized.
    pub fn cubic(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let stretch = (1.0 / scale).max(1.0);
        let support = 2.0 * stretch;
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) / scale - 0.5;
                let lo = ((center - support).floor() as isize).max(0) as usize;
                let hi = ((center + support).ceil() as isize).min(in_len as isize - 1) as usize;
                let mut ws: Vec<f64> = (lo..=hi).map(|j| cubic((j as f64 - center) / stretch)).collect();
                // Trim zero-weight ends so the tap list stays tight.
                let first = ws.iter().position(|&v| v != 0.0).unwrap_or(0);
                let last = ws.iter().rposition(|&v| v != 0.0).unwrap_or(0);
                ws = ws[first..=last].to_vec();
                let sum: f64 = ws.iter().sum();
                for v in &mut ws {
                    *v /= sum;
                }
                (lo + first, ws)
            })
            .collect();
        Self {
            in_len,
            out_len,
            taps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub rows: ResampleAxis,
    pub cols: ResampleAxis,
}

impl ResamplePlan {
    pub fn cubic(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: ResampleAxis::cubic(in_h, out_h),
            cols: ResampleAxis::cubic(in_w, out_w),
        }
    }

    /// Applies the plan: width first, then height.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = x.chw();
        assert_eq!((h, w), (self.rows.in_len, self.cols.in_len), "resample input size");
        let (oh, ow) = (self.rows.out_len, self.cols.out_len);
        let col_taps = cast_taps::<T>(&self.cols);
        let row_taps = cast_taps::<T>(&self.rows);
        let mut tmp = vec![T::zero(); c * h * ow];
        for (src, dst) in x.data().chunks_exact(w).zip(tmp.chunks_exact_mut(ow)) {
            for (d, (start, ws)) in dst.iter_mut().zip(&col_taps) {
                *d = ws.iter().zip(&src[*start..]).map(|(&wv, &s)| wv * s).sum();
            }
        }
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            let src = &tmp[ci * h * ow..(ci + 1) * h * ow];
            let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
            for (i, (start, ws)) in row_taps.iter().enumerate() {
                let drow = &mut dst[i * ow..(i + 1) * ow];
                for (t, &wv) in ws.iter().enumerate() {
                    let srow = &src[(start + t) * ow..(start + t + 1) * ow];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d += wv * s;
                    }
                }
            }
        }
        Tensor::from_vec(&[c, oh, ow], out)
    }

    /// Adjoint of [`ResamplePlan::apply`].
    pub fn apply_transpose<T: Real>(&self, g: &Tensor<T>) -> Tensor<T> {
        let (c, oh, ow) = g.chw();
        let (h, w) = (self.rows.in_len, self.cols.in_len);
        let col_taps = cast_taps::<T>(&self.cols);
        let row_taps = cast_taps::<T>(&self.rows);
        let mut tmp = vec![T::zero(); c * h * ow];
        for ci in 0..c {
            let src = &g.data()[ci * oh * ow..(ci + 1) * oh * ow];
            let dst = &mut tmp[ci * h * ow..(ci + 1) * h * ow];
            for (i, (start, ws)) in row_taps.iter().enumerate() {
                let srow = &src[i * ow..(i + 1) * ow];
                for (t, &wv) in ws.iter().enumerate() {
                    for (d, &s) in dst[(start + t) * ow..(start + t + 1) * ow].iter_mut().zip(srow) {
                        *d += wv * s;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); c * h * w];
        for (src, dst) in tmp.chunks_exact(ow).zip(out.chunks_exact_mut(w)) {
            for (&s, (start, ws)) in src.iter().zip(&col_taps) {
                for (d, &wv) in dst[*start..].iter_mut().zip(ws) {
                    *d += wv * s;
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }
}

fn cast_taps<T: Real>(axis: &ResampleAxis) -> Vec<(usize, Vec<T>)> {
    axis.taps
        .iter()
        .map(|(s, ws)| (*s, ws.iter().map(|&v| T::of(v)).collect()))
        .collect()
}

// ---------------------------------------------------------------------------
// Spatially varying convolution

/// `x: [C,H,W]`, `wf: [k*k,H,W]` -> `[C,H,W]`; each pixel's kernel is shared
/// across channels, zero padding outside the image.
pub fn dynamic_conv<T: Real>(x: &Tensor<T>, wf: &Tensor<T>, k: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    assert_eq!(wf.shape(), &[k * k, h, w], "weight field shape");
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for t in 0..k * k {
        let dy = (t / k) as isize - p;
        let dx = (t % k) as isize - p;
        let wplane = &wf.data()[t * hw..(t + 1) * hw];
        let (y0, y1) = valid_range(h, dy);
        let (x0, x1) = valid_range(w, dx);
        if y0 >= y1 || x0 >= x1 {
            continue;
        }
        for ci in 0..c {
            let src = &x.data()[ci * hw..(ci + 1) * hw];
            let dst = &mut out[ci * hw..(ci + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                let wrow = &wplane[y * w + x0..y * w + x1];
                for ((d, &wv), &s) in dst[y * w + x0..y * w + x1].iter_mut().zip(wrow).zip(srow) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Adjoints of [`dynamic_conv`]: `(d_image, d_weight_field)`.
pub fn dynamic_conv_backward<T: Real>(
    x: &Tensor<T>,
    wf: &Tensor<T>,
    g: &Tensor<T>,
    k: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = x.chw();
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut dx = vec![T::zero(); c * hw];
    let mut dwf = vec![T::zero(); k * k * hw];
    for t in 0..k * k {
        let dy = (t / k) as isize - p;
        let ddx = (t % k) as isize - p;
        let wplane = &wf.data()[t * hw..(t + 1) * hw];
        let dwplane = &mut dwf[t * hw..(t + 1) * hw];
        let (y0, y1) = valid_range(h, dy);
        let (x0, x1) = valid_range(w, ddx);
        if y0 >= y1 || x0 >= x1 {
            continue;
        }
        for ci in 0..c {
            let src = &x.data()[ci * hw..(ci + 1) * hw];
            let gp = &g.data()[ci * hw..(ci + 1) * hw];
            let dxp = &mut dx[ci * hw..(ci + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + ddx) as usize;
                let n = x1 - x0;
                for i in 0..n {
                    let o = y * w + x0 + i;
                    let s = sy * w + sx0 + i;
                    dwplane[o] += gp[o] * src[s];
                    dxp[s] += gp[o] * wplane[o];
                }
            }
        }
    }
    (
        Tensor::from_vec(&[c, h, w], dx),
        Tensor::from_vec(&[k * k, h, w], dwf),
    )
}

// ---------------------------------------------------------------------------
// Sub-pixel rearrangement

/// `[C*r*r, H, W]` -> `[C, rH, rW]` with `out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (cr, h, w) = x.chw();
    assert_eq!(cr % (r * r), 0, "pixel shuffle channels");
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src = &x.data()[((ci * r + i) * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[(ci * oh + y * r + i) * ow + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, oh, ow) = x.chw();
    let (h, w) = (oh / r, ow / r);
    let mut out = vec![T::zero(); c * r * r * h * w];
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let dst = &mut out[((ci * r + i) * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = x.data()[(ci * oh + y * r + i) * ow + xx * r + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * r * r, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = lcg_tensor(&[3, 5, 6], 1);
        let w = lcg_tensor(&[4, 3, 3, 3], 2);
        let b = lcg_tensor(&[4], 3);
        let y = conv2d(&x, &w, Some(&b));
        for co in 0..4 {
            for yy in 0..5isize {
                for xx in 0..6isize {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..5).contains(&sy) && (0..6).contains(&sx) {
                                    acc += w.data()[((co * 3 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[(ci * 5 + sy as usize) * 6 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 5 + yy as usize) * 6 + xx as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    // <A x, g> = <x, A^T g> for every linear kernel's adjoint.
    #[test]
    fn adjoints_satisfy_dot_product_identity() {
        let x = lcg_tensor(&[2, 7, 6], 4);
        let w = lcg_tensor(&[3, 2, 3, 3], 5);
        let g = lcg_tensor(&[3, 7, 6], 6);
        let (dx, dw, _) = conv2d_backward(&x, &w, &g, true);
        let lhs = dot(&conv2d(&x, &w, None), &g);
        assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-10);
        assert!((lhs - dot(&w, &dw)).abs() < 1e-10);

        let kern = lcg_tensor(&[25], 7);
        let g = lcg_tensor(&[2, 7, 6], 8);
        let lhs = dot(&blur(&x, kern.data(), 5), &g);
        assert!((lhs - dot(&x, &blur_backward_input(&g, kern.data(), 5))).abs() < 1e-10);
        let dk = Tensor::from_vec(&[25], blur_backward_kernel(&x, &g, 5));
        assert!((lhs - dot(&kern, &dk)).abs() < 1e-10);

        let plan = ResamplePlan::cubic(7, 6, 3, 2);
        let g = lcg_tensor(&[2, 3, 2], 9);
        let lhs = dot(&plan.apply(&x), &g);
        assert!((lhs - dot(&x, &plan.apply_transpose(&g))).abs() < 1e-10);

        let wf = lcg_tensor(&[9, 7, 6], 10);
        let g = lcg_tensor(&[2, 7, 6], 11);
        let (dx, dwf) = dynamic_conv_backward(&x, &wf, &g, 3);
        let lhs = dot(&dynamic_conv(&x, &wf, 3), &g);
        assert!((lhs - dot(&x, &dx)).abs() < 1e-10);
        assert!((lhs - dot(&wf, &dwf)).abs() < 1e-10);
    }

    #[test]
    fn pixel_shuffle_inverts() {
        let x = lcg_tensor(&[12, 3, 2], 12);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[3, 6, 4]);
        assert_eq!(pixel_unshuffle(&y, 2), x);
        assert_eq!(y.data()[1], x.data()[6]); // out[0,0,1] = in[1,0,0]
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn kernels_wider_than_the_image() {
        let x = lcg_tensor(&[2, 3, 4], 1);
        let k = 15;
        let wf = lcg_tensor(&[k * k, 3, 4], 2);
        let y = dynamic_conv(&x, &wf, k);
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut acc = 0.0;
                    for sy in 0..3 {
                        for sx in 0..4 {
                            let t = (sy + 7 - oy) * k + (sx + 7 - ox);
                            acc += wf.data()[t * 12 + oy * 4 + ox] * x.data()[c * 12 + sy * 4 + sx];
                        }
                    }
                    assert!((y.data()[c * 12 + oy * 4 + ox] - acc).abs() < 1e-12);
                }
            }
        }
        let g = lcg_tensor(&[2, 3, 4], 3);
        let (dx, dwf) = dynamic_conv_backward(&x, &wf, &g, k);
        let (lhs, rhs) = (dot(&g, &y), dot(&dx, &x));
        assert!((lhs - rhs).abs() < 1e-9);
        assert!((dot(&dwf, &wf) - lhs).abs() < 1e-9);

        let w = lcg_tensor(&[3, 2, 7, 7], 4);
        let out = conv2d(&x, &w, None);
        let (dxc, dwc, _) = conv2d_backward(&x, &w, &out, true);
        assert!((dot(&out, &out) - dot(&dxc.unwrap(), &x)).abs() < 1e-9);
        assert!((dot(&dwc, &w) - dot(&out, &out)).abs() < 1e-9);
    }
}
