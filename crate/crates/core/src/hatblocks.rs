//! Hybrid-attention Transformer blocks.
//!
//! A block (HATB) is `Y₁ = F + S-SA(LN(F))`, `out = Y₁ + C-SA(FFN(LN(Y₁)))`.
//! S-SA splits the channels in two: a high-frequency branch attends inside
//! native-resolution windows, a low-frequency branch lets queries from a
//! `p`-times larger native window attend to keys/values of the average-pooled
//! map. Everything works on `(H, W, C)` tensors inside an autograd [`Graph`];
//! parameters are looked up by name under a caller-chosen prefix.

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Var, WindowGrid};
use crate::error::{arg_err, shape_err};
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::{Real, Result};

/// Switches used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    /// Native-scale window attention.
    pub high: bool,
    /// Pooled-scale window attention.
    pub low: bool,
    /// Channel gating of the FFN output.
    pub csa: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            high: true,
            low: true,
            csa: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HatbConfig {
    pub channels: usize,
    pub heads: usize,
    /// Nominal `(rows, cols)` window; clipped to the plane when larger.
    pub window: (usize, usize),
    /// Average-pooling kernel of the low branch.
    pub pool: usize,
    pub shifted: bool,
    pub ffn_expansion: usize,
    pub csa_shrink: usize,
    pub branches: Branches,
}

impl HatbConfig {
    pub fn new(channels: usize, heads: usize, window: (usize, usize)) -> Self {
        Self {
            channels,
            heads,
            window,
            pool: 2,
            shifted: false,
            ffn_expansion: 2,
            csa_shrink: 16,
            branches: Branches::default(),
        }
    }

    /// Channel split `(C₁, C₂)` between the high and low branch.
    pub fn split(&self) -> (usize, usize) {
        let c1 = self.channels / 2;
        (c1, self.channels - c1)
    }

    pub fn csa_hidden(&self) -> usize {
        (self.channels / self.csa_shrink.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (c1, c2) = self.split();
        if c1 == 0 || c2 == 0 {
            return Err(arg_err(format!("{} channels cannot be split into two branches", self.channels)));
        }
        if self.heads == 0 || c1 % self.heads != 0 || c2 % self.heads != 0 {
            return Err(arg_err(format!(
                "branch widths {c1}+{c2} are not divisible by {} heads",
                self.heads
            )));
        }
        if self.window.0 == 0 || self.window.1 == 0 || self.pool == 0 || self.ffn_expansion == 0 {
            return Err(arg_err("window, pool and expansion factors must be positive"));
        }
        Ok(())
    }

    /// Parameters of one block under `prefix`.
    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let c = self.channels;
        let (c1, c2) = self.split();
        let e = c * self.ffn_expansion;
        let r = self.csa_hidden();
        let p = |s: &str| format!("{prefix}.{s}");
        let mut out = vec![
            ParamSpec::new(p("norm1.gamma"), &[c], Init::Ones),
            ParamSpec::zeros(p("norm1.beta"), &[c]),
        ];
        // Output projections start at zero, so every block starts as the
        // identity on its attention path.
        if self.branches.high {
            for w in ["wq_h", "wk_h", "wv_h"] {
                out.push(ParamSpec::weight(p(&format!("ssa.{w}")), &[c, c1], c));
            }
            out.push(ParamSpec::zeros(p("ssa.w_h"), &[c1, c1]));
        }
        if self.branches.low {
            for w in ["wq_l", "wk_l", "wv_l"] {
                out.push(ParamSpec::weight(p(&format!("ssa.{w}")), &[c, c2], c));
            }
            out.push(ParamSpec::zeros(p("ssa.w_l"), &[c2, c2]));
        }
        out.extend([
            ParamSpec::new(p("norm2.gamma"), &[c], Init::Ones),
            ParamSpec::zeros(p("norm2.beta"), &[c]),
            ParamSpec::weight(p("ffn.expand.w"), &[c, e], c),
            ParamSpec::zeros(p("ffn.expand.b"), &[e]),
            ParamSpec::weight(p("ffn.dw.w"), &[3, 3, e], 9),
            ParamSpec::zeros(p("ffn.dw.b"), &[e]),
            ParamSpec::weight(p("ffn.reduce.w"), &[e, c], e),
            ParamSpec::zeros(p("ffn.reduce.b"), &[c]),
        ]);
        if self.branches.csa {
            out.push(ParamSpec::weight(p("csa.w1"), &[c, r], c));
            out.push(ParamSpec::weight(p("csa.w2"), &[r, c], r));
        }
        out
    }
}

fn pad_to(n: usize, m: usize) -> usize {
    (m - n % m) % m
}

fn dims3<T: Real>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err(format!("expected an (H, W, C) feature map, got {s:?}"))),
    }
}

/// Window geometry of both S-SA branches for an `h × w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsaGeometry {
    pub high: AttentionSpec,
    /// Padded plane of the high branch.
    pub high_plane: (usize, usize),
    pub low: AttentionSpec,
    /// Padded native plane of the low branch (its pooled plane is `/ pool`).
    pub low_plane: (usize, usize),
}

impl SsaGeometry {
    pub fn new(h: usize, w: usize, cfg: &HatbConfig) -> Result<Self> {
        let p = cfg.pool;
        if h < p || w < p {
            return Err(shape_err(format!("{h}×{w} plane is smaller than the pooling kernel {p}")));
        }
        let shift = |win: usize, len: usize| if cfg.shifted && win < len { win / 2 } else { 0 };

        let (wh, ww) = (cfg.window.0.min(h), cfg.window.1.min(w));
        let (hh, hw) = (h + pad_to(h, wh), w + pad_to(w, ww));
        let grid = WindowGrid::new(hh, hw, wh, ww)?.with_shift(shift(wh, hh), shift(ww, hw));
        let high = AttentionSpec {
            q_grid: grid,
            kv_grid: grid,
            heads: cfg.heads,
        };

        // Low branch windows are counted on the pooled map.
        let (lh, lw) = (cfg.window.0.min(h / p), cfg.window.1.min(w / p));
        let (nh, nw) = (h + pad_to(h, p * lh), w + pad_to(w, p * lw));
        let (sh, sw) = (shift(lh, nh / p), shift(lw, nw / p));
        let kv_grid = WindowGrid::new(nh / p, nw / p, lh, lw)?.with_shift(sh, sw);
        let q_grid = WindowGrid::new(nh, nw, p * lh, p * lw)?.with_shift(p * sh, p * sw);
        let low = AttentionSpec {
            q_grid,
            kv_grid,
            heads: cfg.heads,
        };
        Ok(Self {
            high,
            high_plane: (hh, hw),
            low,
            low_plane: (nh, nw),
        })
    }
}

/// Dual-scale spatial self-attention.
pub fn s_sa<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, cfg: &HatbConfig) -> Result<Var> {
    cfg.validate()?;
    let (h, w, c) = dims3(g, x)?;
    if c != cfg.channels {
        return Err(shape_err(format!("block expects {} channels, got {c}", cfg.channels)));
    }
    let geo = SsaGeometry::new(h, w, cfg)?;
    let (c1, c2) = cfg.split();
    let name = |s: &str| format!("{prefix}.ssa.{s}");

    let high = if cfg.branches.high {
        let (hh, hw) = geo.high_plane;
        let xp = g.reflect_pad(x, hh - h, hw - w);
        let q = g.linear(xp, p.get(&name("wq_h"))?, None);
        let k = g.linear(xp, p.get(&name("wk_h"))?, None);
        let v = g.linear(xp, p.get(&name("wv_h"))?, None);
        let e = g.window_attention(q, k, v, geo.high)?;
        let e = g.crop(e, h, w);
        g.linear(e, p.get(&name("w_h"))?, None)
    } else {
        g.constant(ArrayD::zeros(IxDyn(&[h, w, c1])))
    };

    let low = if cfg.branches.low {
        let (nh, nw) = geo.low_plane;
        let xp = g.reflect_pad(x, nh - h, nw - w);
        let pooled = g.avg_pool(xp, cfg.pool);
        let q = g.linear(xp, p.get(&name("wq_l"))?, None);
        let k = g.linear(pooled, p.get(&name("wk_l"))?, None);
        let v = g.linear(pooled, p.get(&name("wv_l"))?, None);
        let e = g.window_attention(q, k, v, geo.low)?;
        let e = g.crop(e, h, w);
        g.linear(e, p.get(&name("w_l"))?, None)
    } else {
        g.constant(ArrayD::zeros(IxDyn(&[h, w, c2])))
    };

    Ok(g.concat_last(high, low))
}

/// `F · sigmoid(ReLU(GAP(F) W₁) W₂)`, channel-wise.
pub fn c_sa<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (_, _, c) = dims3(g, x)?;
    let s = g.spatial_mean(x);
    let s = g.reshape(s, &[1, c]);
    let hdn = g.linear(s, p.get(&format!("{prefix}.csa.w1"))?, None);
    let hdn = g.relu(hdn);
    let a = g.linear(hdn, p.get(&format!("{prefix}.csa.w2"))?, None);
    let a = g.sigmoid(a);
    let a = g.reshape(a, &[c]);
    Ok(g.channel_scale(x, a))
}

/// Point-wise expand, GELU, depth-wise 3×3, point-wise reduce.
pub fn ffn<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let name = |s: &str| format!("{prefix}.ffn.{s}");
    let y = g.linear(x, p.get(&name("expand.w"))?, Some(p.get(&name("expand.b"))?));
    let y = g.gelu(y);
    let y = g.depthwise_conv(y, p.get(&name("dw.w"))?, Some(p.get(&name("dw.b"))?));
    Ok(g.linear(y, p.get(&name("reduce.w"))?, Some(p.get(&name("reduce.b"))?)))
}

/// One hybrid-attention Transformer block.
pub fn hatb<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, cfg: &HatbConfig) -> Result<Var> {
    let n1 = g.layer_norm(x, p.get(&format!("{prefix}.norm1.gamma"))?, p.get(&format!("{prefix}.norm1.beta"))?);
    let a = s_sa(g, p, prefix, n1, cfg)?;
    let y1 = g.add(x, a);
    let n2 = g.layer_norm(y1, p.get(&format!("{prefix}.norm2.gamma"))?, p.get(&format!("{prefix}.norm2.beta"))?);
    let f = ffn(g, p, prefix, n2)?;
    let f = if cfg.branches.csa { c_sa(g, p, prefix, f)? } else { f };
    Ok(g.add(y1, f))
}

pub fn downsample_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w"), &[2, 2, c, 2 * c], 4 * c),
        ParamSpec::zeros(format!("{prefix}.b"), &[2 * c]),
    ]
}

pub fn upsample_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w"), &[c, 2 * c], c),
        ParamSpec::zeros(format!("{prefix}.b"), &[2 * c]),
    ]
}

/// 2×2 stride-2 convolution, `(H, W, C) → (H/2, W/2, 2C)`.
pub fn downsample<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (h, w, _) = dims3(g, x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("cannot halve an odd {h}×{w} plane")));
    }
    Ok(g.conv2d(x, p.get(&format!("{prefix}.w"))?, Some(p.get(&format!("{prefix}.b"))?), 2, 0))
}

/// Point-wise conv to `2C` then pixel shuffle, `(H, W, C) → (2H, 2W, C/2)`.
pub fn upsample<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (_, _, c) = dims3(g, x)?;
    if c % 2 != 0 {
        return Err(shape_err(format!("cannot halve {c} channels")));
    }
    let y = g.linear(x, p.get(&format!("{prefix}.w"))?, Some(p.get(&format!("{prefix}.b"))?));
    Ok(g.pixel_shuffle(y, 2))
}

/// Runs a block-level function outside of training: parameters and input
/// enter as constants and the output map is returned.
pub fn evaluate<T, F>(store: &ParamStore<T>, x: &Array3<T>, f: F) -> Result<Array3<T>>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &Bound, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let xv = g.constant(x.clone().into_dyn());
    let out = f(&mut g, &p, xv)?;
    g.value(out)
        .clone()
        .into_dimensionality()
        .map_err(|e| shape_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::{check_grads, fill_zero_tensors, random};
    use crate::autograd::window_attention_forward;
    use ndarray::{s, Array2, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &HatbConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::from_specs(&cfg.specs("b"), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        fill_zero_tensors(&mut s, 0.2, seed);
        s
    }

    fn zeroed(mut s: ParamStore<f64>) -> ParamStore<f64> {
        for (_, v) in s.iter_mut() {
            v.fill(0.0);
        }
        s
    }

    fn rand3(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        random(&[h, w, c], seed).into_dimensionality().unwrap()
    }

    #[test]
    fn zero_weight_ssa_outputs_zero() {
        let cfg = HatbConfig::new(8, 1, (4, 16));
        let out = evaluate(&zeroed(store(&cfg, 1)), &rand3(8, 32, 8, 2), |g, p, x| s_sa(g, p, "b", x, &cfg)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_csa_halves_and_ffn_vanishes() {
        let cfg = HatbConfig::new(8, 1, (4, 4));
        let s = zeroed(store(&cfg, 1));
        let x = rand3(4, 4, 8, 3);
        let half = evaluate(&s, &x, |g, p, x| c_sa(g, p, "b", x)).unwrap();
        assert!(half.iter().zip(x.iter()).all(|(a, b)| (a - 0.5 * b).abs() < 1e-15));
        let f = evaluate(&s, &x, |g, p, x| ffn(g, p, "b", x)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        let zero = Array3::<f64>::zeros((4, 4, 8));
        let out = evaluate(&store(&cfg, 4), &zero, |g, p, x| c_sa(g, p, "b", x)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csa_gate_in_open_unit_interval() {
        let cfg = HatbConfig::new(16, 1, (4, 4));
        let mut s = store(&cfg, 9);
        s.get_mut("b.csa.w2").unwrap().mapv_inplace(|v| v * 50.0);
        let x = rand3(4, 4, 16, 8);
        let out = evaluate(&s, &x, |g, p, x| c_sa(g, p, "b", x)).unwrap();
        for c in 0..16 {
            let gate = out[[0, 0, c]] / x[[0, 0, c]];
            assert!(gate > 0.0 && gate < 1.0);
            for (a, b) in out.slice(s![.., .., c]).iter().zip(x.slice(s![.., .., c]).iter()) {
                assert!((a - gate * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_hatb_is_identity() {
        let mut cfg = HatbConfig::new(8, 1, (4, 16));
        cfg.shifted = true;
        let x = rand3(8, 16, 8, 5);
        let out = evaluate(&zeroed(store(&cfg, 1)), &x, |g, p, x| hatb(g, p, "b", x, &cfg)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn blocks_preserve_shape() {
        for (h, w, c, win) in [(8, 8, 8, (4, 16)), (12, 20, 16, (16, 4)), (6, 10, 4, (4, 16)), (16, 24, 32, (4, 16))] {
            let mut cfg = HatbConfig::new(c, (c / 16).max(1), win);
            for shifted in [false, true] {
                cfg.shifted = shifted;
                let x = rand3(h, w, c, 11);
                let out = evaluate(&store(&cfg, 3), &x, |g, p, x| hatb(g, p, "b", x, &cfg)).unwrap();
                assert_eq!(out.dim(), (h, w, c));
                assert!(out.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn single_window_matches_dense_attention() {
        // 2×2 plane: one 4-token high window; the low branch sees one pooled
        // key, so every query gets that key's value.
        let cfg = HatbConfig::new(4, 1, (2, 2));
        let s = store(&cfg, 21);
        let x = rand3(2, 2, 4, 22);
        let out = evaluate(&s, &x, |g, p, x| s_sa(g, p, "b", x, &cfg)).unwrap();

        let m = |n: &str| s.get(n).unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let tokens = x.clone().into_shape_with_order((4, 4)).unwrap();
        let (q, k, v) = (tokens.dot(&m("b.ssa.wq_h")), tokens.dot(&m("b.ssa.wk_h")), tokens.dot(&m("b.ssa.wv_h")));
        let mut scores = q.dot(&k.t()) / 2f64.sqrt();
        for mut row in scores.rows_mut() {
            let mx = row.fold(f64::MIN, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - mx).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let high = scores.dot(&v).dot(&m("b.ssa.w_h"));
        let mean = tokens.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let low_row = mean.dot(&m("b.ssa.wv_l")).dot(&m("b.ssa.w_l"));
        let low = Array2::from_shape_fn((4, 2), |(_, j)| low_row[[0, j]]);
        let dense = ndarray::concatenate(Axis(1), &[high.view(), low.view()]).unwrap();
        for (a, b) in out.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut cfg = HatbConfig::new(32, 2, (4, 16));
        cfg.shifted = true;
        let geo = SsaGeometry::new(16, 32, &cfg).unwrap();
        for spec in [geo.high, geo.low] {
            let (qp, kp) = (spec.q_grid, spec.kv_grid);
            let q = rand3(qp.height, qp.width, 16, 1);
            let k = rand3(kp.height, kp.width, 16, 2).mapv(|v| v * 4.0);
            let v = rand3(kp.height, kp.width, 16, 3);
            let (_, probs) = window_attention_forward(q.view(), k.view(), v.view(), &spec).unwrap();
            for pm in probs {
                for row in pm.rows() {
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pooling_and_shift_geometry() {
        let mut cfg = HatbConfig::new(8, 1, (4, 16));
        cfg.shifted = true;
        let geo = SsaGeometry::new(8, 32, &cfg).unwrap();
        assert_eq!(geo.high.q_grid.num_windows(), 4);
        assert_eq!(geo.high.q_grid.tokens_per_window(), 64);
        assert_eq!((geo.high.q_grid.shift_h, geo.high.q_grid.shift_w), (2, 8));
        // Pooled plane 4×16: one 4×16 window, so no shift is applied.
        assert_eq!(geo.low.kv_grid.num_windows(), 1);
        assert_eq!(geo.low.q_grid.tokens_per_window(), 4 * geo.low.kv_grid.tokens_per_window());
        assert!(!geo.low.q_grid.is_shifted());
    }

    #[test]
    fn down_and_up_shapes() {
        let c = 8;
        let mut specs = downsample_specs("d", c);
        specs.extend(upsample_specs("u", 2 * c));
        let s = ParamStore::<f64>::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = rand3(16, 16, c, 1);
        let d = evaluate(&s, &x, |g, p, x| downsample(g, p, "d", x)).unwrap();
        assert_eq!(d.dim(), (8, 8, 16));
        let u = evaluate(&s, &d, |g, p, x| upsample(g, p, "u", x)).unwrap();
        assert_eq!(u.dim(), (16, 16, 8));
        assert!(evaluate(&s, &rand3(7, 8, c, 1), |g, p, x| downsample(g, p, "d", x)).is_err());
    }

    #[test]
    fn ffn_is_nearly_linear_for_tiny_inputs() {
        let cfg = HatbConfig::new(8, 1, (4, 4));
        // Zero biases, as initialised.
        let s = ParamStore::<f64>::from_specs(&cfg.specs("b"), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let x = rand3(4, 4, 8, 14);
        let f = |scale: f64| evaluate(&s, &x.mapv(|v| v * scale), |g, p, x| ffn(g, p, "b", x)).unwrap();
        let (a, b) = (f(1e-4), f(2e-4));
        let rel = (&b - &a.mapv(|v| 2.0 * v)).mapv(f64::abs).sum() / b.mapv(f64::abs).sum();
        assert!(rel < 1e-3, "{rel}");
        let slope = (crate::autograd::gelu(1e-6f64).0 - crate::autograd::gelu(-1e-6f64).0) / 2e-6;
        assert!((slope - 0.5).abs() < 1e-6);
    }

    #[test]
    fn hatb_gradients_match_finite_differences() {
        let mut cfg = HatbConfig::new(8, 1, (4, 16));
        cfg.shifted = true;
        let s = store(&cfg, 31);
        let names: Vec<String> = s.names().cloned().collect();
        let mut inputs = vec![random(&[8, 8, 8], 32)];
        inputs.extend(s.iter().map(|(_, v)| v + &random(v.shape(), 33).mapv(|r| 0.1 * r)));
        check_grads(
            &inputs,
            |g, vars| {
                let bound = Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
                hatb(g, &bound, "b", vars[0], &cfg).unwrap()
            },
            1e-6,
        );
    }
}
