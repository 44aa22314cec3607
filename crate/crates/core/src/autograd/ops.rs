//! Elementwise, reduction, linear-algebra and layout operations.

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn, Zip};

use super::{dyn_shape, Graph, Var};
use crate::Real;

pub(crate) fn v2<T: Real>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

pub(crate) fn v3<T: Real>(a: &ArrayD<T>) -> ArrayView3<'_, T> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

/// Views the tensor as `(rows, last_dim)`.
pub(crate) fn rows_view<T: Real>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let last = *a.shape().last().expect("non-scalar tensor");
    a.view()
        .into_shape_with_order((a.len() / last, last))
        .expect("standard layout")
}

fn scalar<T: Real>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Tanh approximation of GELU and its derivative.
pub fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    // tanh via one exp; saturates correctly at both ends.
    let t = T::one() - T::lit(2.0) / ((inner + inner).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Non-overlapping `k × k` mean pooling of an `(H, W, C)` map.
pub fn avg_pool_forward<T: Real>(x: ArrayView3<'_, T>, k: usize) -> Array3<T> {
    let (h, w, c) = x.dim();
    assert!(k > 0 && h % k == 0 && w % k == 0, "pool {k} on {h}×{w}");
    let inv = T::one() / T::lit((k * k) as f64);
    let mut out = Array3::zeros((h / k, w / k, c));
    for i in 0..h {
        for j in 0..w {
            let mut dst = out.slice_mut(s![i / k, j / k, ..]);
            dst.zip_mut_with(&x.slice(s![i, j, ..]), |d, &v| *d += v * inv);
        }
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Reflection padding on the bottom and right edges.
pub fn reflect_pad_forward<T: Real>(x: ArrayView3<'_, T>, pad_h: usize, pad_w: usize) -> Array3<T> {
    let (h, w, c) = x.dim();
    assert!(pad_h < h.max(1) && pad_w < w.max(1), "reflection pad larger than plane");
    Array3::from_shape_fn((h + pad_h, w + pad_w, c), |(i, j, k)| x[[reflect(i, h), reflect(j, w), k]])
}

/// `(H, W, r²C) → (rH, rW, C)`; channel block `a·r + b` lands at offset `(a, b)`.
pub fn pixel_shuffle_forward<T: Real>(x: ArrayView3<'_, T>, r: usize) -> Array3<T> {
    let (h, w, cin) = x.dim();
    assert!(cin % (r * r) == 0, "channels {cin} not divisible by {}", r * r);
    let c = cin / (r * r);
    Array3::from_shape_fn((h * r, w * r, c), |(i, j, ch)| {
        let (a, b) = (i % r, j % r);
        x[[i / r, j / r, (a * r + b) * c + ch]]
    })
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.op(v, &[a, b], |ctx| vec![ctx.grad.clone(), ctx.grad.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.op(v, &[a, b], |ctx| vec![ctx.grad.clone(), ctx.grad.mapv(|v| -v)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.op(v, &[a, b], |ctx| {
            vec![ctx.grad * ctx.inputs[1], ctx.grad * ctx.inputs[0]]
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.op(v, &[a], move |ctx| vec![ctx.grad * c])
    }

    /// `a · s` for a single-element tensor `s`.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar_mul expects a single-element scale");
        let sv = self.value(s).iter().copied().next().unwrap_or_else(T::zero);
        let v = self.value(a) * sv;
        self.op(v, &[a, s], |ctx| {
            let sv = ctx.inputs[1].iter().copied().next().unwrap_or_else(T::zero);
            let gs = Zip::from(ctx.grad).and(ctx.inputs[0]).fold(T::zero(), |acc, &g, &x| acc + g * x);
            vec![ctx.grad * sv, ArrayD::from_elem(ctx.inputs[1].raw_dim(), gs)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.op(v, &[a], |ctx| {
            let g = ctx.grad.iter().copied().next().unwrap_or_else(T::zero);
            vec![ArrayD::from_elem(ctx.inputs[0].raw_dim(), g)]
        })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = T::lit(self.value(a).len() as f64);
        let diff = self.value(a) - self.value(b);
        let v = scalar(diff.mapv(|d| d * d).sum() / n);
        self.op(v, &[a, b], move |ctx| {
            let g = ctx.grad.iter().copied().next().unwrap_or_else(T::zero);
            let ga = (ctx.inputs[0] - ctx.inputs[1]) * (T::lit(2.0) * g / n);
            let gb = ga.mapv(|v| -v);
            vec![ga, gb]
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = v2(self.value(a)).dot(&v2(self.value(b))).into_dyn();
        self.op(v, &[a, b], |ctx| {
            let g = v2(ctx.grad);
            vec![
                g.dot(&v2(ctx.inputs[1]).t()).into_dyn(),
                v2(ctx.inputs[0]).t().dot(&g).into_dyn(),
            ]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = v2(self.value(a)).t().as_standard_layout().into_owned().into_dyn();
        self.op(v, &[a], |ctx| {
            vec![v2(ctx.grad).t().as_standard_layout().into_owned().into_dyn()]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(dyn_shape(shape))
            .expect("reshape keeps the element count");
        self.op(v, &[a], |ctx| {
            vec![ctx
                .grad
                .clone()
                .into_shape_with_order(ctx.inputs[0].raw_dim())
                .expect("reshape keeps the element count")]
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let axis = Axis(self.value(a).ndim() - 1);
        let v = ndarray::concatenate(axis, &[self.value(a).view(), self.value(b).view()])
            .expect("matching leading dims");
        let ca = self.value(a).shape()[axis.0];
        self.op(v, &[a, b], move |ctx| {
            let (ga, gb) = ctx.grad.view().split_at(axis, ca);
            vec![ga.to_owned(), gb.to_owned()]
        })
    }

    /// `x · W + b` over the last axis; `W` is `(C_in, C_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let cout = self.value(w).shape()[1];
        let mut y = rows_view(self.value(x)).dot(&v2(self.value(w)));
        if let Some(b) = b {
            let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias vector");
            y += &bias;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().expect("non-scalar") = cout;
        let v = y.into_shape_with_order(dyn_shape(&out_shape)).expect("linear output");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.op(v, &inputs, |ctx| {
            let g = rows_view(ctx.grad);
            let x2 = rows_view(ctx.inputs[0]);
            let gx = g
                .dot(&v2(ctx.inputs[1]).t())
                .into_shape_with_order(ctx.inputs[0].raw_dim())
                .expect("grad shape");
            let gw = x2.t().dot(&g).into_dyn();
            let mut out = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                out.push(g.sum_axis(Axis(0)).into_dyn());
            }
            out
        })
    }

    /// Normalisation over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(1e-5);
        let xv = rows_view(self.value(x));
        let c = xv.ncols();
        let cn = T::lit(c as f64);
        let gam = self.value(gamma).as_slice().expect("contiguous gamma").to_vec();
        let bet = self.value(beta).as_slice().expect("contiguous beta").to_vec();
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut dst) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / cn;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / cn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            Zip::from(&mut dst).and(&row).for_each(|d, &v| *d = (v - mean) * inv);
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * gam[k] + bet[k];
            }
        }
        let shape = self.value(x).raw_dim();
        let v = y.into_shape_with_order(shape.clone()).expect("layer norm output");
        self.op(v, &[x, gamma, beta], move |ctx| {
            let g = rows_view(ctx.grad);
            let gam = ctx.inputs[1].as_slice().expect("contiguous gamma");
            let mut gx = Array2::zeros(g.raw_dim());
            let mut ggam = vec![T::zero(); c];
            let mut gbet = vec![T::zero(); c];
            for r in 0..g.nrows() {
                let grow = g.row(r);
                let xrow = xhat.row(r);
                let mut mean_gx = T::zero();
                let mut mean_gxx = T::zero();
                for k in 0..c {
                    let gh = grow[k] * gam[k];
                    mean_gx += gh;
                    mean_gxx += gh * xrow[k];
                    ggam[k] += grow[k] * xrow[k];
                    gbet[k] += grow[k];
                }
                mean_gx /= cn;
                mean_gxx /= cn;
                for k in 0..c {
                    let gh = grow[k] * gam[k];
                    gx[[r, k]] = inv_std[r] * (gh - mean_gx - xrow[k] * mean_gxx);
                }
            }
            vec![
                gx.into_shape_with_order(shape.clone()).expect("grad shape"),
                ArrayD::from_shape_vec(IxDyn(&[c]), ggam).expect("gamma grad"),
                ArrayD::from_shape_vec(IxDyn(&[c]), gbet).expect("beta grad"),
            ]
        })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| gelu(a).0);
        self.op(v, &[x], |ctx| {
            let mut g = ctx.grad.clone();
            Zip::from(&mut g).and(ctx.inputs[0]).for_each(|g, &x| *g *= gelu(x).1);
            vec![g]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(T::zero()));
        self.op(v, &[x], |ctx| {
            let mut g = ctx.grad.clone();
            Zip::from(&mut g).and(ctx.inputs[0]).for_each(|g, &x| {
                if x <= T::zero() {
                    *g = T::zero();
                }
            });
            vec![g]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.op(v, &[x], |ctx| {
            let mut g = ctx.grad.clone();
            Zip::from(&mut g).and(ctx.output).for_each(|g, &s| *g = *g * s * (T::one() - s));
            vec![g]
        })
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let v = avg_pool_forward(v3(self.value(x)), k).into_dyn();
        self.op(v, &[x], move |ctx| {
            let g = v3(ctx.grad);
            let (h, w, c) = v3(ctx.inputs[0]).dim();
            let inv = T::one() / T::lit((k * k) as f64);
            vec![Array3::from_shape_fn((h, w, c), |(i, j, ch)| g[[i / k, j / k, ch]] * inv).into_dyn()]
        })
    }

    pub fn reflect_pad(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Var {
        if pad_h == 0 && pad_w == 0 {
            return x;
        }
        let v = reflect_pad_forward(v3(self.value(x)), pad_h, pad_w).into_dyn();
        self.op(v, &[x], move |ctx| {
            let g = v3(ctx.grad);
            let (h, w, _) = v3(ctx.inputs[0]).dim();
            let mut gx = Array3::zeros(v3(ctx.inputs[0]).raw_dim());
            for ((i, j, k), &gv) in g.indexed_iter() {
                gx[[reflect(i, h), reflect(j, w), k]] += gv;
            }
            vec![gx.into_dyn()]
        })
    }

    /// Keeps the top-left `h × w` block of an `(H, W, C)` map.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (hx, wx, _) = v3(self.value(x)).dim();
        if hx == h && wx == w {
            return x;
        }
        let v = v3(self.value(x)).slice(s![..h, ..w, ..]).to_owned().into_dyn();
        self.op(v, &[x], move |ctx| {
            let mut gx = Array3::zeros(v3(ctx.inputs[0]).raw_dim());
            gx.slice_mut(s![..h, ..w, ..]).assign(&v3(ctx.grad));
            vec![gx.into_dyn()]
        })
    }

    /// Global average over the spatial axes, `(H, W, C) → (C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = v3(self.value(x));
        let n = T::lit((xv.dim().0 * xv.dim().1) as f64);
        let v = rows_view(self.value(x)).sum_axis(Axis(0)).mapv(|s| s / n).into_dyn();
        self.op(v, &[x], move |ctx| {
            let g = ctx.grad.as_slice().expect("contiguous grad").to_vec();
            let dim = v3(ctx.inputs[0]).raw_dim();
            vec![Array3::from_shape_fn(dim, |(_, _, c)| g[c] / n).into_dyn()]
        })
    }

    /// `x[.., c] · gate[c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Var {
        let gv = self.value(gate).as_slice().expect("gate vector").to_vec();
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            Zip::from(&mut row).and(&gv[..]).for_each(|a, &s| *a *= s);
        }
        self.op(v, &[x, gate], |ctx| {
            let gate = ctx.inputs[1].as_slice().expect("gate vector");
            let mut gx = ctx.grad.clone();
            for mut row in gx.rows_mut() {
                Zip::from(&mut row).and(gate).for_each(|a, &s| *a *= s);
            }
            let prod = ctx.grad * ctx.inputs[0];
            let ggate = rows_view(&prod).sum_axis(Axis(0)).into_dyn();
            vec![gx, ggate]
        })
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let v = pixel_shuffle_forward(v3(self.value(x)), r).into_dyn();
        self.op(v, &[x], move |ctx| {
            let g = v3(ctx.grad);
            let (h, w, cin) = v3(ctx.inputs[0]).dim();
            let c = cin / (r * r);
            vec![Array3::from_shape_fn((h, w, cin), |(i, j, k)| {
                let (blk, ch) = (k / c, k % c);
                g[[i * r + blk / r, j * r + blk % r, ch]]
            })
            .into_dyn()]
        })
    }
}
