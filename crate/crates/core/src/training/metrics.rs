//! PSNR and SSIM.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{arg_err, shape_err};
use crate::{Real, Result};

/// Peak of the 8-bit scale on which image metrics are reported.
pub const PEAK: f64 = 255.0;

fn same_shape(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape(&a, &b)?;
    let mut acc = 0.0;
    Zip::from(&a).and(&b).for_each(|&x, &y| acc += (x - y) * (x - y));
    Ok(acc / a.len() as f64)
}

/// `10·log10(peak²/MSE)`; identical inputs give `+∞`.
pub fn psnr(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(arg_err("PSNR peak must be positive"));
    }
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / e).log10() })
}

/// Clamps a `[0, 1]` image and scales it to `[0, 255]`.
pub fn to_8bit_scale<T: Real>(x: ArrayView2<'_, T>) -> Array2<f64> {
    x.mapv(|v| v.as_f64().clamp(0.0, 1.0) * PEAK)
}

/// PSNR of two `[0, 1]` images on the 8-bit scale.
pub fn image_psnr<T: Real>(x: ArrayView2<'_, T>, reference: ArrayView2<'_, T>) -> Result<f64> {
    psnr(to_8bit_scale(x).view(), to_8bit_scale(reference).view(), PEAK)
}

pub fn image_ssim<T: Real>(x: ArrayView2<'_, T>, reference: ArrayView2<'_, T>) -> Result<f64> {
    ssim(to_8bit_scale(x).view(), to_8bit_scale(reference).view(), PEAK)
}

/// Normalised `size × size` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w = Array2::from_shape_fn((size, size), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let s = w.sum();
    w / s
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), K₁ = 0.01,
/// K₂ = 0.03, over all fully-contained window positions. Images smaller than
/// the window use the largest odd window that fits.
pub fn ssim(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, peak: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(shape_err("empty image"));
    }
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, 1.5);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..size {
                for v in 0..size {
                    let g = win[[u, v]];
                    let (x, y) = (a[[i + u, j + v]], b[[i + u, j + v]]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn psnr_of_unit_offset() {
        let x = rand_img(16, 1);
        let p = psnr(x.view(), (&x + 1.0).view(), 255.0).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((p - 48.13).abs() < 0.005);
        assert_eq!(psnr(x.view(), x.view(), 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = rand_img(32, 2);
        let y = rand_img(32, 3);
        assert!((ssim(x.view(), x.view(), 255.0).unwrap() - 1.0).abs() < 1e-12);
        let (s1, s2) = (ssim(x.view(), y.view(), 255.0).unwrap(), ssim(y.view(), x.view(), 255.0).unwrap());
        assert!((s1 - s2).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&s1));
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert_eq!(w[[0, 3]], w[[3, 0]]);
        assert_eq!(w[[0, 0]], w[[10, 10]]);
    }
}
