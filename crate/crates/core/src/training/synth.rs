//! Procedural grayscale test images.
//!
//! Each image is a smooth background with a handful of overlapping shapes
//! (discs, ellipses, rotated rectangles, half-planes). Fills are flat, linear
//! ramps or oriented sinusoidal stripes, and edges are anti-aliased. The mix
//! of flat regions, ramps, edges and texture gives both piecewise-smooth and
//! oscillatory content, so no single hand-made prior suits all of it.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::save_png;
use crate::Result;

enum Fill {
    Flat(f64),
    Ramp { base: f64, gx: f64, gy: f64 },
    Stripes { mean: f64, amp: f64, freq: f64, angle: f64, phase: f64 },
    /// Product of two orthogonal sinusoids.
    Plaid { mean: f64, amp: f64, freq: (f64, f64), angle: f64 },
}

impl Fill {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        match rng.gen_range(0..8) {
            0 | 1 => Fill::Flat(rng.gen_range(0.05..0.95)),
            2 | 3 => Fill::Ramp {
                base: rng.gen_range(0.2..0.8),
                gx: rng.gen_range(-0.6..0.6) / size,
                gy: rng.gen_range(-0.6..0.6) / size,
            },
            4 => Fill::Plaid {
                mean: rng.gen_range(0.3..0.7),
                amp: rng.gen_range(0.1..0.3),
                freq: (rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)),
                angle: rng.gen_range(0.0..PI),
            },
            _ => Fill::Stripes {
                mean: rng.gen_range(0.3..0.7),
                amp: rng.gen_range(0.1..0.3),
                freq: rng.gen_range(0.15..0.9),
                angle: rng.gen_range(0.0..PI),
                phase: rng.gen_range(0.0..2.0 * PI),
            },
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        match *self {
            Fill::Flat(v) => v,
            Fill::Ramp { base, gx, gy } => base + gx * x + gy * y,
            Fill::Stripes { mean, amp, freq, angle, phase } => {
                mean + amp * (freq * (x * angle.cos() + y * angle.sin()) + phase).sin()
            }
            Fill::Plaid { mean, amp, freq, angle } => {
                let u = x * angle.cos() + y * angle.sin();
                let v = y * angle.cos() - x * angle.sin();
                mean + amp * (freq.0 * u).sin() * (freq.1 * v).sin()
            }
        }
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, rot: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, rot: f64 },
    HalfPlane { cy: f64, cx: f64, angle: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cy = rng.gen_range(0.0..size);
        let cx = rng.gen_range(0.0..size);
        let rot = rng.gen_range(0.0..PI);
        match rng.gen_range(0..5) {
            0 | 1 => {
                let r = rng.gen_range(0.06..0.3) * size;
                Shape::Ellipse { cy, cx, ry: r, rx: r * rng.gen_range(0.5..1.5), rot }
            }
            2 | 3 => Shape::Rect {
                cy,
                cx,
                hy: rng.gen_range(0.05..0.3) * size,
                hx: rng.gen_range(0.05..0.3) * size,
                rot,
            },
            _ => Shape::HalfPlane { cy, cx, angle: rng.gen_range(0.0..2.0 * PI) },
        }
    }

    /// Signed distance-like value, negative inside.
    fn sdf(&self, y: f64, x: f64) -> f64 {
        let rotate = |cy: f64, cx: f64, rot: f64| {
            let (dy, dx) = (y - cy, x - cx);
            (dy * rot.cos() - dx * rot.sin(), dy * rot.sin() + dx * rot.cos())
        };
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, rot } => {
                let (u, v) = rotate(cy, cx, rot);
                let k = ((u / ry).powi(2) + (v / rx).powi(2)).sqrt();
                (k - 1.0) * ry.min(rx)
            }
            Shape::Rect { cy, cx, hy, hx, rot } => {
                let (u, v) = rotate(cy, cx, rot);
                (u.abs() - hy).max(v.abs() - hx)
            }
            Shape::HalfPlane { cy, cx, angle } => (y - cy) * angle.sin() + (x - cx) * angle.cos(),
        }
    }
}

/// One `size × size` image in `[0, 1]`, deterministic under `seed`.
pub fn synth_image(size: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let background = Fill::Ramp {
        base: rng.gen_range(0.3..0.7),
        gx: rng.gen_range(-0.4..0.4) / s,
        gy: rng.gen_range(-0.4..0.4) / s,
    };
    // Half of the backgrounds carry a faint texture.
    let texture = rng.gen_bool(0.5).then(|| Fill::Stripes {
        mean: 0.0,
        amp: rng.gen_range(0.03..0.1),
        freq: rng.gen_range(0.3..1.2),
        angle: rng.gen_range(0.0..PI),
        phase: rng.gen_range(0.0..2.0 * PI),
    });
    let n_shapes = rng.gen_range(4..9);
    let layers: Vec<(Shape, Fill)> = (0..n_shapes)
        .map(|_| (Shape::random(&mut rng, s), Fill::random(&mut rng, s)))
        .collect();
    let noise = rng.gen_range(0.0..0.01);
    let mut img = Array2::from_shape_fn((size, size), |(i, j)| {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        let mut v = background.at(y, x) + texture.as_ref().map_or(0.0, |t| t.at(y, x));
        for (shape, fill) in &layers {
            // Anti-aliased coverage over roughly one pixel.
            let a = (0.5 - shape.sdf(y, x)).clamp(0.0, 1.0);
            if a > 0.0 {
                v = (1.0 - a) * v + a * fill.at(y, x);
            }
        }
        v
    });
    for v in img.iter_mut() {
        *v += noise * (rng.gen::<f64>() - 0.5);
    }
    img.mapv(|v| v.clamp(0.0, 1.0) as f32)
}

/// Writes `count` images named `synth_0000.png`, … into `dir`.
pub fn write_synthetic_set(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..count)
        .map(|k| {
            let path = dir.join(format!("synth_{k:04}.png"));
            let img = synth_image(size, seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
            save_png(&path, img.view())?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_range_and_varied() {
        let a = synth_image(48, 3);
        assert_eq!(a, synth_image(48, 3));
        assert_ne!(a, synth_image(48, 4));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.mean().unwrap();
        let var = a.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(var > 1e-4);
    }
}
