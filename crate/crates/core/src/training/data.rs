//! Image loading, PNG output and the augmented crop dataset.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error};
use crate::{Real, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_601: [f32; 3] = [0.299, 0.587, 0.114];

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Grayscale plane with values in `[0, 1]`; colour images are converted with
/// BT.601 weights.
pub fn to_plane(img: &DynamicImage) -> Array2<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let p = rgb.get_pixel(j as u32, i as u32).0;
            LUMA_601[0] * p[0] + LUMA_601[1] * p[1] + LUMA_601[2] * p[2]
        })
    } else {
        let l = img.to_luma32f();
        Array2::from_shape_fn((h, w), |(i, j)| l.get_pixel(j as u32, i as u32).0[0])
    }
}

pub fn load_image(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(to_plane(&img))
}

/// Writes a `[0, 1]` plane as an 8-bit grayscale PNG (values are clamped).
pub fn save_png<T: Real>(path: &Path, x: ArrayView2<'_, T>) -> Result<()> {
    let (h, w) = x.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |j, i| {
        let v = x[[i as usize, j as usize]].as_f64().clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// PNG files of `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Decodes every PNG of `dir`. Undecodable files are logged and skipped; an
/// error is returned only when nothing all remains.
pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Array2<f32>)>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        match load_image(&path) {
            Ok(img) => out.push((path, img)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(out)
}

/// Central `h × w` window, or `None` when the image is smaller.
pub fn center_crop(img: ArrayView2<'_, f32>, h: usize, w: usize) -> Option<Array2<f32>> {
    let (ih, iw) = img.dim();
    if ih < h || iw < w {
        return None;
    }
    let (t, l) = ((ih - h) / 2, (iw - w) / 2);
    Some(img.slice(s![t..t + h, l..l + w]).to_owned())
}

/// Central square crop, upscaling first when the image is too small.
pub fn fit_crop(img: ArrayView2<'_, f32>, crop: usize) -> Array2<f32> {
    center_crop(img, crop, crop).unwrap_or_else(|| {
        let fit = crop as f64 / img.nrows().min(img.ncols()) as f64;
        let up = rescale(img, fit);
        center_crop(up.view(), crop, crop).expect("upscaled to fit")
    })
}

/// Where a crop came from: source image, rescale factor, top-left corner in
/// the rescaled image and whether it was mirrored left-right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub source: usize,
    pub scale: f64,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub crops: Vec<Array2<f32>>,
    pub records: Vec<CropRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }
}

pub fn rescale(img: ArrayView2<'_, f32>, scale: f64) -> Array2<f32> {
    if scale == 1.0 {
        return img.to_owned();
    }
    let (h, w) = img.dim();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |j, i| Luma([img[[i as usize, j as usize]]]));
    let (nh, nw) = (((h as f64) * scale).round() as u32, ((w as f64) * scale).round() as u32);
    let r = imageops::resize(&buf, nw.max(1), nh.max(1), FilterType::Triangle);
    Array2::from_shape_fn((nh as usize, nw as usize), |(i, j)| r.get_pixel(j as u32, i as u32).0[0])
}

/// `count` random crops (rescale in `[min_scale, 1]`, position, mirror),
/// deterministic under `seed`. Images smaller than the crop are upscaled
/// just enough to fit.
pub fn build_dataset(images: &[Array2<f32>], crop: usize, count: usize, min_scale: f64, seed: u64) -> Result<Dataset> {
    if images.is_empty() {
        return Err(arg_err("no source images"));
    }
    if crop == 0 {
        return Err(arg_err("crop size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crops = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let source = rng.gen_range(0..images.len());
        let img = &images[source];
        let fit = crop as f64 / img.nrows().min(img.ncols()) as f64;
        let drawn = if min_scale < 1.0 { rng.gen_range(min_scale..=1.0) } else { 1.0 };
        let scale = if drawn < fit { fit.max(drawn) } else { drawn };
        let scaled = rescale(img.view(), scale);
        let top = rng.gen_range(0..=scaled.nrows().saturating_sub(crop));
        let left = rng.gen_range(0..=scaled.ncols().saturating_sub(crop));
        let flip = rng.gen_bool(0.5);
        let mut c = scaled.slice(s![top..top + crop, left..left + crop]).to_owned();
        if flip {
            c.invert_axis(ndarray::Axis(1));
            c = c.as_standard_layout().into_owned();
        }
        crops.push(c);
        records.push(CropRecord {
            source,
            scale,
            top,
            left,
            flip,
        });
    }
    Ok(Dataset { crops, records })
}

/// Training crops and held-out validation planes.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Vec<Array2<f32>>,
}

/// Loads `dir`, holds out the last `val_images` files (central crops) and
/// draws the augmented training crops from the rest.
pub fn split_dir(dir: &Path, crop: usize, count: usize, val_images: usize, min_scale: f64, seed: u64) -> Result<TrainData> {
    let all = load_dir(dir)?;
    let n_val = if all.len() > val_images { val_images } else { 0 };
    if n_val < val_images {
        log::warn!("only {} images in {}; validating on training crops", all.len(), dir.display());
    }
    let (train_imgs, val_imgs) = all.split_at(all.len() - n_val);
    let sources: Vec<Array2<f32>> = train_imgs.iter().map(|(_, i)| i.clone()).collect();
    let train = build_dataset(&sources, crop, count, min_scale, seed)?;
    let mut val: Vec<Array2<f32>> = val_imgs
        .iter()
        .map(|(_, img)| fit_crop(img.view(), crop))
        .collect();
    if val.is_empty() {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        val = idx.iter().take(val_images.max(1)).map(|&i| train.crops[i].clone()).collect();
    }
    Ok(TrainData { train, val })
}
