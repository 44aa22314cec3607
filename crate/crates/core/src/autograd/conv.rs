//! Dense and depthwise 2D convolutions on `(H, W, C)` maps.
//!
//! Dense kernels are stored `(kh, kw, C_in, C_out)` and evaluated by im2col
//! followed by a single matrix product. Depthwise kernels are `(kh, kw, C)`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, ArrayView4, Axis, Ix1, Ix4};

use super::ops::{v2, v3};
use super::{Graph, Var};
use crate::Real;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: (usize, usize, usize), k: (usize, usize), stride: usize, pad: usize) -> Self {
        let (h, w, cin) = x;
        let (kh, kw) = k;
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    /// Input coordinate for output `(i, j)` and tap `(di, dj)`, if inside.
    #[inline]
    fn source(&self, i: usize, j: usize, di: usize, dj: usize) -> Option<(usize, usize)> {
        let r = (i * self.stride + di).checked_sub(self.pad)?;
        let c = (j * self.stride + dj).checked_sub(self.pad)?;
        (r < self.h && c < self.w).then_some((r, c))
    }

    fn im2col<T: Real>(&self, x: ArrayView3<'_, T>) -> Array2<T> {
        let k = self.kh * self.kw * self.cin;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard");
        let mut cols = Array2::zeros((self.ho * self.wo, k));
        let cs = cols.as_slice_mut().expect("fresh array");
        self.for_each_patch(|row, off, r, c| {
            let src = (r * self.w + c) * self.cin;
            cs[row * k + off..row * k + off + self.cin].copy_from_slice(&xs[src..src + self.cin]);
        });
        cols
    }

    fn col2im<T: Real>(&self, cols: &Array2<T>) -> Array3<T> {
        let k = self.kh * self.kw * self.cin;
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard");
        let mut x = Array3::zeros((self.h, self.w, self.cin));
        let xs = x.as_slice_mut().expect("fresh array");
        self.for_each_patch(|row, off, r, c| {
            let dst = (r * self.w + c) * self.cin;
            for (d, &v) in xs[dst..dst + self.cin].iter_mut().zip(&cs[row * k + off..row * k + off + self.cin]) {
                *d += v;
            }
        });
        x
    }

    /// `f(output row, column offset, input row, input col)` for every tap
    /// that lands inside the input.
    #[inline]
    fn for_each_patch(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for i in 0..self.ho {
            for j in 0..self.wo {
                for di in 0..self.kh {
                    for dj in 0..self.kw {
                        if let Some((r, c)) = self.source(i, j, di, dj) {
                            f(i * self.wo + j, (di * self.kw + dj) * self.cin, r, c);
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded strided convolution.
pub fn conv2d_forward<T: Real>(
    x: ArrayView3<'_, T>,
    w: ArrayView4<'_, T>,
    b: Option<ArrayView1<'_, T>>,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (kh, kw, cin, cout) = w.dim();
    assert_eq!(x.dim().2, cin, "conv input channels");
    let geo = Geometry::new(x.dim(), (kh, kw), stride, pad);
    let wm = w.to_shape((kh * kw * cin, cout)).expect("kernel reshape");
    let mut y = geo.im2col(x).dot(&wm);
    if let Some(b) = b {
        y += &b;
    }
    y.into_shape_with_order((geo.ho, geo.wo, cout)).expect("conv output")
}

/// Depthwise convolution with "same" zero padding.
pub fn depthwise_conv_forward<T: Real>(
    x: ArrayView3<'_, T>,
    w: ArrayView3<'_, T>,
    b: Option<ArrayView1<'_, T>>,
) -> Array3<T> {
    let (h, wd, c) = x.dim();
    let (kh, kw, kc) = w.dim();
    assert_eq!(kc, c, "depthwise channels");
    let mut y = Array3::zeros((h, wd, c));
    if let Some(b) = b {
        y += &b;
    }
    let (x, w) = (x.as_standard_layout(), w.as_standard_layout());
    let (xs, ws) = (x.as_slice().expect("standard"), w.as_slice().expect("standard"));
    let ys = y.as_slice_mut().expect("fresh array");
    for_each_tap((h, wd, c), (kh, kw), |dst, src, tap, len| {
        let wt = &ws[tap..tap + c];
        for (yr, xr) in ys[dst..dst + len].chunks_exact_mut(c).zip(xs[src..src + len].chunks_exact(c)) {
            for k in 0..c {
                yr[k] += xr[k] * wt[k];
            }
        }
    });
    y
}

/// Calls `f(dst, src, tap, len)` for every row segment of a "same" depthwise
/// convolution: output offset, input offset, kernel offset (all flat, in
/// elements) and segment length.
#[inline]
fn for_each_tap(dim: (usize, usize, usize), k: (usize, usize), mut f: impl FnMut(usize, usize, usize, usize)) {
    let (h, wd, c) = dim;
    let (kh, kw) = k;
    let (ph, pw) = (kh / 2, kw / 2);
    for i in 0..h {
        for di in 0..kh {
            let Some(r) = (i + di).checked_sub(ph).filter(|&r| r < h) else {
                continue;
            };
            for dj in 0..kw {
                // output columns j with 0 ≤ j + dj − pw < wd
                let j0 = pw.saturating_sub(dj);
                let j1 = (wd + pw).saturating_sub(dj).min(wd);
                if j0 >= j1 {
                    continue;
                }
                let dst = (i * wd + j0) * c;
                let src = (r * wd + j0 + dj - pw) * c;
                f(dst, src, (di * kw + dj) * c, (j1 - j0) * c);
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = v3(self.value(x));
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("rank-4 kernel");
        let bv = b.map(|b| self.value(b).view().into_dimensionality::<Ix1>().expect("bias vector"));
        let y = conv2d_forward(xv, wv, bv, stride, pad).into_dyn();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.op(y, &inputs, move |ctx| {
            let x = v3(ctx.inputs[0]);
            let w = ctx.inputs[1].view().into_dimensionality::<Ix4>().expect("rank-4 kernel");
            let (kh, kw, cin, cout) = w.dim();
            let geo = Geometry::new(x.dim(), (kh, kw), stride, pad);
            let g = v3(ctx.grad);
            let g2 = g.to_shape((geo.ho * geo.wo, cout)).expect("grad rows");
            let wm = w.to_shape((kh * kw * cin, cout)).expect("kernel reshape");
            let cols = geo.im2col(x);
            let gw = cols
                .t()
                .dot(&g2)
                .into_shape_with_order((kh, kw, cin, cout))
                .expect("kernel grad");
            let gx = geo.col2im(&g2.dot(&wm.t()));
            let mut out = vec![gx.into_dyn(), gw.into_dyn()];
            if ctx.inputs.len() == 3 {
                out.push(g2.sum_axis(Axis(0)).into_dyn());
            }
            out
        })
    }

    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = v3(self.value(x));
        let wv = v3(self.value(w));
        let bv = b.map(|b| self.value(b).view().into_dimensionality::<Ix1>().expect("bias vector"));
        let y = depthwise_conv_forward(xv, wv, bv).into_dyn();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.op(y, &inputs, |ctx| {
            let x = v3(ctx.inputs[0]);
            let w = v3(ctx.inputs[1]);
            let g = v3(ctx.grad);
            let (h, wd, c) = x.dim();
            let (kh, kw, _) = w.dim();
            let mut gx = Array3::<T>::zeros((h, wd, c));
            let mut gw = Array3::<T>::zeros((kh, kw, c));
            {
                let (xs, ws, gs) = (x.as_slice().expect("standard"), w.as_slice().expect("standard"), g.as_slice().expect("standard"));
                let gxs = gx.as_slice_mut().expect("fresh array");
                let gws = gw.as_slice_mut().expect("fresh array");
                for_each_tap((h, wd, c), (kh, kw), |dst, src, tap, len| {
                    let wt = &ws[tap..tap + c];
                    let gwt = &mut gws[tap..tap + c];
                    for ((gr, xr), gxr) in gs[dst..dst + len]
                        .chunks_exact(c)
                        .zip(xs[src..src + len].chunks_exact(c))
                        .zip(gxs[src..src + len].chunks_exact_mut(c))
                    {
                        for k in 0..c {
                            gxr[k] += gr[k] * wt[k];
                            gwt[k] += gr[k] * xr[k];
                        }
                    }
                });
            }
            let mut out = vec![gx.into_dyn(), gw.into_dyn()];
            if ctx.inputs.len() == 3 {
                let gb: Array1<T> = v2(&g.to_shape((h * wd, c)).expect("rows").to_owned().into_dyn())
                    .sum_axis(Axis(0));
                out.push(gb.into_dyn());
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_grads, random};
    use super::*;
    use ndarray::Array4;

    /// Direct six-loop convolution.
    fn naive_conv(x: &Array3<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array3<f64> {
        let (h, wd, cin) = x.dim();
        let (kh, kw, _, cout) = w.dim();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Array3::from_shape_fn((ho, wo, cout), |(i, j, o)| {
            let mut acc = 0.0;
            for di in 0..kh {
                for dj in 0..kw {
                    let r = (i * stride + di) as isize - pad as isize;
                    let c = (j * stride + dj) as isize - pad as isize;
                    if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
                        continue;
                    }
                    for k in 0..cin {
                        acc += x[[r as usize, c as usize, k]] * w[[di, dj, k, o]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = random(&[6, 5, 3], 1).into_dimensionality().unwrap();
        for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (1, 1, 0)] {
            let w = random(&[k, k, 3, 4], 2).into_dimensionality().unwrap();
            let fast = conv2d_forward(x.view(), w.view(), None, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let x: Array3<f64> = random(&[5, 4, 3], 3).into_dimensionality().unwrap();
        let w: Array3<f64> = random(&[3, 3, 3], 4).into_dimensionality().unwrap();
        let fast = depthwise_conv_forward(x.view(), w.view(), None);
        for c in 0..3 {
            let xc = x.slice(ndarray::s![.., .., c..c + 1]).to_owned();
            let wc = w.slice(ndarray::s![.., .., c..c + 1]).to_owned().insert_axis(Axis(3));
            let slow = naive_conv(&xc, &wc, 1, 1);
            for ((i, j, _), v) in slow.indexed_iter() {
                assert!((fast[[i, j, c]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_grads() {
        check_grads(&[random(&[5, 4, 2], 5), random(&[3, 3, 2, 3], 6), random(&[3], 7)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }, 1e-6);
        check_grads(&[random(&[4, 6, 2], 8), random(&[2, 2, 2, 4], 9), random(&[4], 10)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 0)
        }, 1e-6);
        check_grads(&[random(&[4, 5, 3], 11), random(&[3, 3, 3], 12), random(&[3], 13)], |g, v| {
            g.depthwise_conv(v[0], v[1], Some(v[2]))
        }, 1e-6);
    }
}
