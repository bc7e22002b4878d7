//! im2col-based convolution kernels.
//!
//! A transposed convolution is computed as the data-gradient of the matching
//! forward convolution, so both share one geometry description and the two
//! are exact adjoints of each other.

use super::Element;
use crate::error::{Error, Result};

/// Geometry of a forward cross-correlation from `[cin, h, w]` to `[cout, oh, ow]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1 kernel, unit stride, no padding: im2col is the identity.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Row-major `c (m×n) = op(a) (m×k) · op(b) (k×n) [+ c]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents asserted above; strides describe the packed layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Columns of one image: the image itself for a pointwise kernel, otherwise
/// its im2col unfolding written into `buf`.
fn unfold<'a, T: Element>(img: &'a [T], g: &ConvGeom, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        return img;
    }
    buf.resize(g.col_rows() * g.col_cols(), T::zero());
    im2col(img, g, buf);
    buf
}

/// Range of output columns `ox` whose input column `ox·stride + k − pad`
/// lies inside `[0, w)`.
fn valid_range(out: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one image `[cin, h, w]` into `[cin·kh·kw, oh·ow]`.
pub(crate) fn im2col<T: Element>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (lo, hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst[..oy_lo * g.ow].fill(T::zero());
                dst[oy_hi * g.ow..].fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, ix) in line[lo..hi].iter_mut().zip((first..).step_by(g.stride)) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cin, h, w]`.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (lo, hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                if lo >= hi {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (&v, ix) in line.iter().zip((first..).step_by(g.stride)) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Run `f` for every batch index on up to `threads` scoped workers and return
/// the results in batch order.
pub(crate) fn per_image<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let f = &f;
                s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("conv worker panicked"))
            .collect()
    })
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Element>(dy: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for img in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (img * channels + c) * plane;
            *acc = dy[start..start + plane]
                .iter()
                .fold(*acc, |s, &v| s + v);
        }
    }
    db
}

fn sum_in_order<T: Element>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        total.iter_mut().zip(part).for_each(|(t, p)| *t = *t + p);
    }
    total
}

/// Forward convolution. `weight` is `[cout, cin, kh, kw]`.
pub(crate) fn conv_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
    threads: usize,
) -> Vec<T> {
    let per = per_image(g.n, threads, |img| {
        let mut buf = Vec::new();
        let cols = unfold(&x[img * g.in_len()..(img + 1) * g.in_len()], g, &mut buf);
        let mut out = vec![T::zero(); g.out_len()];
        gemm(
            false,
            false,
            g.cout,
            g.col_cols(),
            g.col_rows(),
            weight,
            cols,
            &mut out,
            false,
        );
        add_bias(&mut out, bias, g.oh * g.ow);
        out
    });
    per.concat()
}

/// Gradients of [`conv_forward`] with respect to input, weight and bias.
pub(crate) fn conv_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    threads: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let wlen = g.cout * g.col_rows();
    let per = per_image(g.n, threads, |img| {
        let dy_img = &dy[img * g.out_len()..(img + 1) * g.out_len()];
        let mut buf = Vec::new();
        let cols = unfold(&x[img * g.in_len()..(img + 1) * g.in_len()], g, &mut buf);
        let mut dw = vec![T::zero(); wlen];
        gemm(
            false,
            true,
            g.cout,
            g.col_rows(),
            g.col_cols(),
            dy_img,
            cols,
            &mut dw,
            false,
        );
        if !need_dx {
            return (Vec::new(), dw);
        }
        let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
        gemm(
            true,
            false,
            g.col_rows(),
            g.col_cols(),
            g.cout,
            weight,
            dy_img,
            &mut dcols,
            false,
        );
        let dx = if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.in_len()];
            col2im(&dcols, g, &mut dx);
            dx
        };
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let db = bias_grad(dy, g.n, g.cout, g.oh * g.ow);
    (need_dx.then(|| dxs.concat()), sum_in_order(dws, wlen), db)
}

/// Transposed convolution: the adjoint of the forward convolution described
/// by `g`, mapping `[cout, oh, ow]` back to `[cin, h, w]`. `weight` is laid
/// out `[cout, cin, kh, kw]` in forward terms, i.e. `[in, out, kh, kw]` from
/// the transposed op's point of view.
pub(crate) fn deconv_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
    threads: usize,
) -> Vec<T> {
    let per = per_image(g.n, threads, |img| {
        let x_img = &x[img * g.out_len()..(img + 1) * g.out_len()];
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        gemm(
            true,
            false,
            g.col_rows(),
            g.col_cols(),
            g.cout,
            weight,
            x_img,
            &mut cols,
            false,
        );
        let mut out = if g.is_pointwise() {
            cols
        } else {
            let mut out = vec![T::zero(); g.in_len()];
            col2im(&cols, g, &mut out);
            out
        };
        add_bias(&mut out, bias, g.h * g.w);
        out
    });
    per.concat()
}

pub(crate) fn deconv_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    threads: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let wlen = g.cout * g.col_rows();
    let per = per_image(g.n, threads, |img| {
        let x_img = &x[img * g.out_len()..(img + 1) * g.out_len()];
        let mut buf = Vec::new();
        let cols = unfold(&dy[img * g.in_len()..(img + 1) * g.in_len()], g, &mut buf);
        let mut dx = Vec::new();
        if need_dx {
            dx = vec![T::zero(); g.out_len()];
            gemm(
                false,
                false,
                g.cout,
                g.col_cols(),
                g.col_rows(),
                weight,
                cols,
                &mut dx,
                false,
            );
        }
        let mut dw = vec![T::zero(); wlen];
        gemm(
            false,
            true,
            g.cout,
            g.col_rows(),
            g.col_cols(),
            x_img,
            cols,
            &mut dw,
            false,
        );
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let db = bias_grad(dy, g.n, g.cin, g.h * g.w);
    (need_dx.then(|| dxs.concat()), sum_in_order(dws, wlen), db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.out_len()];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((n * g.cin + ci) * g.h + iy as usize) * g.w
                                        + ix as usize]
                                        * w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_loops() {
        for (h, w, k, stride, pad) in [(7, 6, 3, 2, 1), (5, 5, 1, 1, 0), (6, 9, 3, 1, 2), (8, 8, 2, 3, 0), (4, 7, 3, 4, 1), (3, 3, 5, 1, 1)] {
            let g = ConvGeom::forward(2, 3, h, w, 4, k, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
            let wt: Vec<f64> = (0..g.cout * g.col_rows())
                .map(|i| (i as f64 * 0.11).cos())
                .collect();
            let fast = conv_forward(&x, &wt, &[0.0; 4], &g, 1);
            let slow = naive_conv(&x, &wt, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for (h, w, k, stride, pad) in [(7, 6, 3, 2, 1), (6, 9, 3, 1, 2), (8, 8, 2, 3, 0), (4, 7, 3, 4, 1)] {
            let g = ConvGeom::forward(1, 2, h, w, 1, k, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.53).sin()).collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.29).cos()).collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn threaded_matches_serial_bitwise() {
        let g = ConvGeom::forward(5, 2, 8, 8, 3, 3, 3, 1, 1).unwrap();
        let x: Vec<f32> = (0..5 * g.in_len()).map(|i| (i as f32 * 0.3).sin()).collect();
        let w: Vec<f32> = (0..g.cout * g.col_rows()).map(|i| (i as f32).cos()).collect();
        let dy: Vec<f32> = (0..5 * g.out_len()).map(|i| (i as f32 * 0.7).sin()).collect();
        let serial = conv_backward(&x, &w, &dy, &g, 1, true);
        let threaded = conv_backward(&x, &w, &dy, &g, 3, true);
        assert_eq!(serial, threaded);
    }

    #[test]
    fn oversized_kernel_is_shape_error() {
        assert!(ConvGeom::forward(1, 1, 2, 2, 1, 5, 5, 1, 1).is_err());
    }
}
