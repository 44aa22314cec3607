//! Window partitioning and fused multi-head window attention.
//!
//! Queries live on one window grid and keys/values on another with the same
//! number of windows, which covers both plain window attention (identical
//! grids) and the cross-scale case where queries come from `pN`-pixel windows
//! and keys/values from `N`-pixel windows of a pooled map.

use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis};

use super::ops::{rows_view, v3};
use super::{Graph, Var};
use crate::error::arg_err;
use crate::{Real, Result};

/// Non-overlapping windows over an `H × W` plane, optionally after a cyclic
/// shift that moves row `r + shift_h` (mod `H`) to row `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub shift_h: usize,
    pub shift_w: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 || win_h > height || win_w > width {
            return Err(arg_err(format!(
                "window {win_h}×{win_w} does not fit the {height}×{width} plane"
            )));
        }
        if !height.is_multiple_of(win_h) || !width.is_multiple_of(win_w) {
            return Err(arg_err(format!(
                "{height}×{width} plane is not a multiple of the {win_h}×{win_w} window"
            )));
        }
        Ok(Self {
            height,
            width,
            win_h,
            win_w,
            shift_h: 0,
            shift_w: 0,
        })
    }

    /// Half-window cyclic shift.
    pub fn shifted(height: usize, width: usize, win_h: usize, win_w: usize) -> Result<Self> {
        Ok(Self::new(height, width, win_h, win_w)?.with_shift(win_h / 2, win_w / 2))
    }

    pub fn with_shift(mut self, shift_h: usize, shift_w: usize) -> Self {
        self.shift_h = shift_h % self.height;
        self.shift_w = shift_w % self.width;
        self
    }

    pub fn is_shifted(&self) -> bool {
        self.shift_h != 0 || self.shift_w != 0
    }

    pub fn windows(&self) -> (usize, usize) {
        (self.height / self.win_h, self.width / self.win_w)
    }

    pub fn num_windows(&self) -> usize {
        let (a, b) = self.windows();
        a * b
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Source `(row, col)` of token `t` in window `w`, plus a code telling
    /// which axes wrapped around during the shift.
    pub fn token(&self, w: usize, t: usize) -> (usize, usize, u8) {
        let (_, nw) = self.windows();
        let r = (w / nw) * self.win_h + t / self.win_w;
        let c = (w % nw) * self.win_w + t % self.win_w;
        let wrap_r = r + self.shift_h >= self.height;
        let wrap_c = c + self.shift_w >= self.width;
        (
            (r + self.shift_h) % self.height,
            (c + self.shift_w) % self.width,
            (wrap_r as u8) << 1 | wrap_c as u8,
        )
    }

    fn token_table(&self) -> Vec<(usize, u8)> {
        let n = self.tokens_per_window();
        (0..self.num_windows() * n)
            .map(|i| {
                let (r, c, code) = self.token(i / n, i % n);
                (r * self.width + c, code)
            })
            .collect()
    }

    /// `(H, W, C) → (windows, N, C)`.
    pub fn partition<T: Real>(&self, x: ArrayView3<'_, T>) -> Result<Array3<T>> {
        let (h, w, c) = x.dim();
        if (h, w) != (self.height, self.width) {
            return Err(arg_err(format!("plane {h}×{w} does not match grid {}×{}", self.height, self.width)));
        }
        let n = self.tokens_per_window();
        Ok(Array3::from_shape_fn((self.num_windows(), n, c), |(wi, t, k)| {
            let (r, col, _) = self.token(wi, t);
            x[[r, col, k]]
        }))
    }

    /// Inverse of [`WindowGrid::partition`].
    pub fn reverse<T: Real>(&self, groups: ArrayView3<'_, T>) -> Result<Array3<T>> {
        let (nw, n, c) = groups.dim();
        if nw != self.num_windows() || n != self.tokens_per_window() {
            return Err(arg_err("token groups do not match the grid"));
        }
        let mut out = Array3::zeros((self.height, self.width, c));
        for wi in 0..nw {
            for t in 0..n {
                let (r, col, _) = self.token(wi, t);
                out.slice_mut(ndarray::s![r, col, ..]).assign(&groups.slice(ndarray::s![wi, t, ..]));
            }
        }
        Ok(out)
    }

    /// `mask[i][j]` is true when query token `i` may not attend key token `j`
    /// of window `w` (they sit on different sides of a wrapped boundary).
    pub fn attention_mask(&self, kv: &WindowGrid, w: usize) -> Array2<bool> {
        let nq = self.tokens_per_window();
        let nk = kv.tokens_per_window();
        Array2::from_shape_fn((nq, nk), |(i, j)| self.token(w, i).2 != kv.token(w, j).2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub q_grid: WindowGrid,
    pub kv_grid: WindowGrid,
    pub heads: usize,
}

impl AttentionSpec {
    pub fn validate(&self, qc: usize, kc: usize, vc: usize) -> Result<()> {
        if self.q_grid.num_windows() != self.kv_grid.num_windows() {
            return Err(arg_err("query and key/value grids differ in window count"));
        }
        if self.heads == 0 || qc != kc || !qc.is_multiple_of(self.heads) || !vc.is_multiple_of(self.heads) {
            return Err(arg_err(format!(
                "channels q={qc} k={kc} v={vc} incompatible with {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

struct Tables {
    q: Vec<(usize, u8)>,
    kv: Vec<(usize, u8)>,
    masked: bool,
}

impl Tables {
    fn new(spec: &AttentionSpec) -> Self {
        Self {
            q: spec.q_grid.token_table(),
            kv: spec.kv_grid.token_table(),
            masked: spec.q_grid.is_shifted() || spec.kv_grid.is_shifted(),
        }
    }
}

fn gather<T: Real>(src: ArrayView2<'_, T>, table: &[(usize, u8)]) -> Array2<T> {
    let mut out = Array2::zeros((table.len(), src.ncols()));
    for (mut row, &(idx, _)) in out.rows_mut().into_iter().zip(table) {
        row.assign(&src.row(idx));
    }
    out
}

fn scatter_add<T: Real>(dst: &mut Array2<T>, rows: ArrayView2<'_, T>, table: &[(usize, u8)]) {
    for (row, &(idx, _)) in rows.rows().into_iter().zip(table) {
        let mut d = dst.row_mut(idx);
        d += &row;
    }
}

fn softmax_rows<T: Real>(scores: &mut Array2<T>, mask: Option<(&[(usize, u8)], &[(usize, u8)])>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        if let Some((qt, kt)) = mask {
            for (j, v) in row.iter_mut().enumerate() {
                if qt[i].1 != kt[j].1 {
                    *v = T::neg_infinity();
                }
            }
        }
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        row.mapv_inplace(|v| {
            let e = if v == T::neg_infinity() { T::zero() } else { (v - max).exp() };
            total += e;
            e
        });
        row.mapv_inplace(|v| v / total);
    }
}

fn attention_core<T: Real>(
    q: ArrayView3<'_, T>,
    k: ArrayView3<'_, T>,
    v: ArrayView3<'_, T>,
    spec: &AttentionSpec,
    tables: &Tables,
) -> (Array3<T>, Vec<Array2<T>>) {
    let (hq, wq, qc) = q.dim();
    let vc = v.dim().2;
    let heads = spec.heads;
    let (dq, dv) = (qc / heads, vc / heads);
    let scale = T::one() / T::lit(dq as f64).sqrt();
    let nq = spec.q_grid.tokens_per_window();
    let nk = spec.kv_grid.tokens_per_window();
    let q2 = q.into_shape_with_order((hq * wq, qc)).expect("standard layout q");
    let (hk, wk, _) = k.dim();
    let k2 = k.into_shape_with_order((hk * wk, qc)).expect("standard layout k");
    let v2 = v.into_shape_with_order((hk * wk, vc)).expect("standard layout v");
    let mut out = Array2::zeros((hq * wq, vc));
    let mut probs = Vec::with_capacity(spec.q_grid.num_windows() * heads);
    for w in 0..spec.q_grid.num_windows() {
        let qt = &tables.q[w * nq..(w + 1) * nq];
        let kt = &tables.kv[w * nk..(w + 1) * nk];
        let qw = gather(q2, qt);
        let kw = gather(k2, kt);
        let vw = gather(v2, kt);
        let mut ow = Array2::zeros((nq, vc));
        for h in 0..heads {
            let qh = qw.slice(ndarray::s![.., h * dq..(h + 1) * dq]);
            let kh = kw.slice(ndarray::s![.., h * dq..(h + 1) * dq]);
            let vh = vw.slice(ndarray::s![.., h * dv..(h + 1) * dv]);
            let mut p = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut p, tables.masked.then_some((qt, kt)));
            ow.slice_mut(ndarray::s![.., h * dv..(h + 1) * dv]).assign(&p.dot(&vh));
            probs.push(p);
        }
        scatter_add(&mut out, ow.view(), qt);
    }
    (out.into_shape_with_order((hq, wq, vc)).expect("attention output"), probs)
}

/// Evaluates window attention, returning the output map and the attention
/// probabilities indexed by `window * heads + head`.
pub fn window_attention_forward<T: Real>(
    q: ArrayView3<'_, T>,
    k: ArrayView3<'_, T>,
    v: ArrayView3<'_, T>,
    spec: &AttentionSpec,
) -> Result<(Array3<T>, Vec<Array2<T>>)> {
    spec.validate(q.dim().2, k.dim().2, v.dim().2)?;
    if (q.dim().0, q.dim().1) != (spec.q_grid.height, spec.q_grid.width)
        || (k.dim().0, k.dim().1) != (spec.kv_grid.height, spec.kv_grid.width)
        || (k.dim().0, k.dim().1) != (v.dim().0, v.dim().1)
    {
        return Err(arg_err("attention inputs do not match their grids"));
    }
    let q = q.as_standard_layout();
    let k = k.as_standard_layout();
    let v = v.as_standard_layout();
    Ok(attention_core(q.view(), k.view(), v.view(), spec, &Tables::new(spec)))
}

impl<T: Real> Graph<T> {
    /// Multi-head window attention, `softmax(Q Kᵀ/√d) V` per window and head.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let tables = Tables::new(&spec);
        let (out, probs) = {
            let (qv, kv, vv) = (v3(self.value(q)), v3(self.value(k)), v3(self.value(v)));
            spec.validate(qv.dim().2, kv.dim().2, vv.dim().2)?;
            attention_core(qv, kv, vv, &spec, &tables)
        };
        Ok(self.op(out.into_dyn(), &[q, k, v], move |ctx| {
            attention_backward(ctx.grad, &ctx.inputs, &spec, &tables, &probs)
        }))
    }
}

fn attention_backward<T: Real>(
    grad: &ArrayD<T>,
    inputs: &[&ArrayD<T>],
    spec: &AttentionSpec,
    tables: &Tables,
    probs: &[Array2<T>],
) -> Vec<ArrayD<T>> {
    let (q2, k2, v2) = (rows_view(inputs[0]), rows_view(inputs[1]), rows_view(inputs[2]));
    let g2 = rows_view(grad);
    let qc = q2.ncols();
    let vc = v2.ncols();
    let heads = spec.heads;
    let (dq, dv) = (qc / heads, vc / heads);
    let scale = T::one() / T::lit(dq as f64).sqrt();
    let nq = spec.q_grid.tokens_per_window();
    let nk = spec.kv_grid.tokens_per_window();
    let mut gq = Array2::zeros(q2.raw_dim());
    let mut gk = Array2::zeros(k2.raw_dim());
    let mut gv = Array2::zeros(v2.raw_dim());
    for w in 0..spec.q_grid.num_windows() {
        let qt = &tables.q[w * nq..(w + 1) * nq];
        let kt = &tables.kv[w * nk..(w + 1) * nk];
        let qw = gather(q2, qt);
        let kw = gather(k2, kt);
        let vw = gather(v2, kt);
        let gow = gather(g2, qt);
        let mut gqw = Array2::zeros(qw.raw_dim());
        let mut gkw = Array2::zeros(kw.raw_dim());
        let mut gvw = Array2::zeros(vw.raw_dim());
        for h in 0..heads {
            let p = &probs[w * heads + h];
            let qs = ndarray::s![.., h * dq..(h + 1) * dq];
            let vs = ndarray::s![.., h * dv..(h + 1) * dv];
            let go = gow.slice(vs);
            gvw.slice_mut(vs).assign(&p.t().dot(&go));
            let gp = go.dot(&vw.slice(vs).t());
            // softmax Jacobian: dS = P ⊙ (dP − Σ_j dP ⊙ P)
            let row_dot = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let gs = (&gp - &row_dot) * p * scale;
            gqw.slice_mut(qs).assign(&gs.dot(&kw.slice(qs)));
            gkw.slice_mut(qs).assign(&gs.t().dot(&qw.slice(qs)));
        }
        scatter_add(&mut gq, gqw.view(), qt);
        scatter_add(&mut gk, gkw.view(), kt);
        scatter_add(&mut gv, gvw.view(), kt);
    }
    vec![
        gq.into_shape_with_order(inputs[0].raw_dim()).expect("q grad"),
        gk.into_shape_with_order(inputs[1].raw_dim()).expect("k grad"),
        gv.into_shape_with_order(inputs[2].raw_dim()).expect("v grad"),
    ]
}
