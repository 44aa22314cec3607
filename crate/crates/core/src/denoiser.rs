//! Per-stage U-shaped denoiser.
//!
//! Three levels with one HATB each: embed (3×3 conv) → enc1 → down → enc2 →
//! down → bottleneck → up ⊕ enc2 → dec2 → up ⊕ enc1 → dec1 → 3×3 conv, added
//! to the input. Decoder features of every level (`d1`, `d2`, the bottleneck
//! output) are exported so the next stage can fuse them into its encoder.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{arg_err, shape_err};
use crate::hatblocks::{self, Branches, HatbConfig};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::sensing::ImagePlane;
use crate::{Real, Result};

pub const LEVELS: usize = 3;

/// Spatial multiple a plane is padded to before entering the U-net.
pub const GRID_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channels of the first level; level `ℓ` has `channels · 2^ℓ`.
    pub channels: usize,
    pub window: (usize, usize),
    pub pool: usize,
    pub head_dim: usize,
    pub ffn_expansion: usize,
    pub csa_shrink: usize,
    pub branches: Branches,
    /// Whether the encoder fuses the previous stage's decoder features.
    pub cssc_input: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            window: (4, 16),
            pool: 2,
            head_dim: 16,
            ffn_expansion: 2,
            csa_shrink: 16,
            branches: Branches::default(),
            cssc_input: false,
        }
    }
}

/// Decoder features handed from one stage to the next, finest level first.
pub type CsscBundle<T> = Vec<Array3<T>>;

impl DenoiserConfig {
    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    pub fn block(&self, level: usize, shifted: bool) -> HatbConfig {
        let c = self.level_channels(level);
        HatbConfig {
            channels: c,
            heads: (c / self.head_dim.max(1)).max(1),
            window: self.window,
            pool: self.pool,
            shifted,
            ffn_expansion: self.ffn_expansion,
            csa_shrink: self.csa_shrink,
            branches: self.branches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(arg_err(format!("base channel count {} must be even and ≥ 2", self.channels)));
        }
        for level in 0..LEVELS {
            self.block(level, false).validate()?;
        }
        Ok(())
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let c = self.channels;
        let p = |s: &str| format!("{prefix}.{s}");
        let fuse = |name: &str, cin: usize, cout: usize| {
            vec![
                ParamSpec::weight(p(&format!("{name}.w")), &[cin, cout], cin),
                ParamSpec::zeros(p(&format!("{name}.b")), &[cout]),
            ]
        };
        let mut out = vec![
            ParamSpec::weight(p("embed.w"), &[3, 3, 1, c], 9),
            ParamSpec::zeros(p("embed.b"), &[c]),
        ];
        let enc = ["enc1", "enc2", "bott"];
        for (level, name) in enc.iter().enumerate() {
            let cl = self.level_channels(level);
            if self.cssc_input {
                out.extend(fuse(&format!("{name}.fuse"), 2 * cl, cl));
            }
            out.extend(self.block(level, false).specs(&p(&format!("{name}.hatb"))));
            if level + 1 < LEVELS {
                out.extend(hatblocks::downsample_specs(&p(&format!("down{}", level + 1)), cl));
            }
        }
        for level in (0..LEVELS - 1).rev() {
            let cl = self.level_channels(level);
            out.extend(hatblocks::upsample_specs(&p(&format!("up{}", level + 1)), 2 * cl));
            out.extend(fuse(&format!("dec{}.fuse", level + 1), 2 * cl, cl));
            out.extend(self.block(level, true).specs(&p(&format!("dec{}.hatb", level + 1))));
        }
        out.push(ParamSpec::weight(p("out.w"), &[3, 3, c, 1], 9 * c));
        out.push(ParamSpec::zeros(p("out.b"), &[1]));
        out
    }

    /// Shapes of the exported decoder features for an `h × w` input.
    pub fn cssc_shapes(&self, h: usize, w: usize) -> [[usize; 3]; LEVELS] {
        let (hp, wp) = (h.div_ceil(GRID_MULTIPLE) * GRID_MULTIPLE, w.div_ceil(GRID_MULTIPLE) * GRID_MULTIPLE);
        std::array::from_fn(|l| [hp >> l, wp >> l, self.level_channels(l)])
    }
}

fn fuse<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, a: Var, b: Var) -> Result<Var> {
    let cat = g.concat_last(a, b);
    Ok(g.linear(cat, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?)))
}

/// `X = Z + body(Z)`; returns `X` and the decoder features.
pub fn stage_denoise<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    z: Var,
    cssc_in: Option<&[Var; LEVELS]>,
    cfg: &DenoiserConfig,
) -> Result<(Var, [Var; LEVELS])> {
    let (h, w) = match *g.shape(z) {
        [h, w] => (h, w),
        ref s => return Err(shape_err(format!("denoiser expects a 2-D plane, got {s:?}"))),
    };
    if h < GRID_MULTIPLE || w < GRID_MULTIPLE {
        return Err(shape_err(format!("{h}×{w} plane is below the {GRID_MULTIPLE}×{GRID_MULTIPLE} minimum")));
    }
    let cssc = match (cfg.cssc_input, cssc_in) {
        (true, Some(c)) => {
            for (l, (v, want)) in c.iter().zip(cfg.cssc_shapes(h, w)).enumerate() {
                if g.shape(*v) != want {
                    return Err(shape_err(format!(
                        "cross-stage feature {l} has shape {:?}, expected {want:?}",
                        g.shape(*v)
                    )));
                }
            }
            Some(c)
        }
        (true, None) => return Err(arg_err("stage expects cross-stage features but none were given")),
        (false, _) => None,
    };
    let name = |s: &str| format!("{prefix}.{s}");
    let pad = |n: usize| (GRID_MULTIPLE - n % GRID_MULTIPLE) % GRID_MULTIPLE;

    let x = g.reshape(z, &[h, w, 1]);
    let x = g.reflect_pad(x, pad(h), pad(w));
    let mut f = g.conv2d(x, p.get(&name("embed.w"))?, Some(p.get(&name("embed.b"))?), 1, 1);

    let enc = ["enc1", "enc2", "bott"];
    let mut skips = Vec::with_capacity(LEVELS);
    for (level, stage) in enc.iter().enumerate() {
        if let Some(c) = cssc {
            f = fuse(g, p, &name(&format!("{stage}.fuse")), f, c[level])?;
        }
        f = hatblocks::hatb(g, p, &name(&format!("{stage}.hatb")), f, &cfg.block(level, false))?;
        skips.push(f);
        if level + 1 < LEVELS {
            f = hatblocks::downsample(g, p, &name(&format!("down{}", level + 1)), f)?;
        }
    }

    let mut out = [skips[LEVELS - 1]; LEVELS];
    for level in (0..LEVELS - 1).rev() {
        let up = hatblocks::upsample(g, p, &name(&format!("up{}", level + 1)), f)?;
        let fused = fuse(g, p, &name(&format!("dec{}.fuse", level + 1)), up, skips[level])?;
        f = hatblocks::hatb(g, p, &name(&format!("dec{}.hatb", level + 1)), fused, &cfg.block(level, true))?;
        out[level] = f;
    }

    let r = g.conv2d(f, p.get(&name("out.w"))?, Some(p.get(&name("out.b"))?), 1, 1);
    let r = g.crop(r, h, w);
    let r = g.reshape(r, &[h, w]);
    Ok((g.add(z, r), out))
}

/// Inference-only wrapper around [`stage_denoise`].
pub fn denoise<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    z: &ImagePlane<T>,
    cssc_in: Option<&CsscBundle<T>>,
    cfg: &DenoiserConfig,
) -> Result<(ImagePlane<T>, CsscBundle<T>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let zv = g.constant(z.data().clone().into_dyn());
    let cssc = match cssc_in {
        Some(b) if b.len() == LEVELS => Some(std::array::from_fn(|l| g.constant(b[l].clone().into_dyn()))),
        Some(b) => return Err(shape_err(format!("expected {LEVELS} cross-stage features, got {}", b.len()))),
        None => None,
    };
    let (x, feats) = stage_denoise(&mut g, &p, prefix, zv, cssc.as_ref(), cfg)?;
    let to3 = |v: Var| -> Result<Array3<T>> {
        g.value(v).clone().into_dimensionality().map_err(|e| shape_err(e.to_string()))
    };
    let plane = ImagePlane::new(g.value(x).clone().into_dimensionality().map_err(|e| shape_err(e.to_string()))?)?;
    Ok((plane, feats.iter().map(|&v| to3(v)).collect::<Result<_>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_f32_against_f64, per_tensor, ScalarFn};
    use crate::autograd::testutil::{fill_zero_tensors, random};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(cssc: bool) -> DenoiserConfig {
        DenoiserConfig {
            channels: 8,
            cssc_input: cssc,
            ..Default::default()
        }
    }

    fn store(cfg: &DenoiserConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::from_specs(&cfg.specs("s"), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        fill_zero_tensors(&mut s, 0.2, seed);
        s
    }

    fn plane(h: usize, w: usize, seed: u64) -> ImagePlane<f64> {
        ImagePlane::new(random(&[h, w], seed).into_dimensionality::<ndarray::Ix2>().unwrap()).unwrap()
    }

    #[test]
    fn zero_body_is_identity() {
        let cfg = small(false);
        let mut s = store(&cfg, 1);
        for (_, v) in s.iter_mut() {
            v.fill(0.0);
        }
        let z = plane(16, 24, 2);
        let (x, _) = denoise(&s, "s", &z, None, &cfg).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn shapes_and_cssc_round_trip() {
        let cfg = small(false);
        let next = small(true);
        for (h, w) in [(64, 64), (64, 96), (20, 12)] {
            let z = plane(h, w, 3);
            let (x, feats) = denoise(&store(&cfg, 4), "s", &z, None, &cfg).unwrap();
            assert_eq!(x.dim(), (h, w));
            for (f, want) in feats.iter().zip(cfg.cssc_shapes(h, w)) {
                assert_eq!(f.shape(), want);
            }
            let (x2, _) = denoise(&store(&next, 5), "s", &x, Some(&feats), &next).unwrap();
            assert_eq!(x2.dim(), (h, w));
        }
    }

    #[test]
    fn mismatched_cssc_rejected() {
        let cfg = small(true);
        let z = plane(16, 16, 1);
        let bad: CsscBundle<f64> = cfg.cssc_shapes(32, 32).iter().map(|s| Array3::zeros((s[0], s[1], s[2]))).collect();
        assert!(denoise(&store(&cfg, 1), "s", &z, Some(&bad), &cfg).is_err());
        assert!(denoise(&store(&cfg, 1), "s", &z, None, &cfg).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = small(false);
        let s = store(&cfg, 8);
        let z = plane(16, 16, 9);
        assert_eq!(denoise(&s, "s", &z, None, &cfg).unwrap(), denoise(&s, "s", &z, None, &cfg).unwrap());
    }

    struct DenoiseLoss {
        cfg: DenoiserConfig,
        target: Array2<f64>,
    }

    impl ScalarFn for DenoiseLoss {
        fn eval<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
            let cssc: [Var; LEVELS] = std::array::from_fn(|l| p.get(&format!("cssc{l}")).unwrap());
            let (x, _) = stage_denoise(g, p, "s", p.get("z")?, Some(&cssc), &self.cfg)?;
            let t = g.constant(self.target.mapv(T::lit).into_dyn());
            Ok(g.mse(x, t))
        }
    }

    #[test]
    fn single_precision_gradients_match_double_differences() {
        let cfg = small(true);
        let mut s = store(&cfg, 10);
        s.insert("z", random(&[16, 16], 11));
        for (l, shape) in cfg.cssc_shapes(16, 16).iter().enumerate() {
            s.insert(format!("cssc{l}"), random(shape, 12 + l as u64));
        }
        let f = DenoiseLoss {
            cfg,
            target: random(&[16, 16], 20).into_dimensionality().unwrap(),
        };
        let checks = check_f32_against_f64(&s, &f, per_tensor, 0).unwrap();
        for c in &checks {
            assert!(c.rel_err < 1e-3, "{c:?}");
        }
    }
}
