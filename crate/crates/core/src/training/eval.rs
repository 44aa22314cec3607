//! Evaluation reports: the adjoint back-projection, tuned ISTA-TV and the
//! unfolding network on the same measurements.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::data::center_crop;
use super::metrics::{image_psnr, image_ssim};
use crate::error::{arg_err, shape_err};
use crate::sensing::{self, FactorPair, ImagePlane, Scheme};
use crate::solvers::{ista_solve, IstaConfig, Prox};
use crate::unfolding::{hatnet_forward, HatnetParams, PHI, PSI};
use crate::Result;

pub const ADJOINT: &str = "adjoint";
pub const ISTA_TV: &str = "ista-tv";
pub const HATNET: &str = "hatnet";

/// PSNR is `+∞` for identical images; JSON has no infinity, so it is written
/// as the string `"inf"`.
mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub images: Vec<ImageMetrics>,
    #[serde(with = "psnr_serde")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Wall time of all reconstructions of this method.
    pub seconds: f64,
}

impl MethodReport {
    fn new(method: &str, images: Vec<ImageMetrics>, seconds: f64) -> Self {
        let n = images.len().max(1) as f64;
        Self {
            method: method.to_string(),
            mean_psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
            images,
            seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sr: f64,
    pub ista_lambda: f64,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, id: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == id)
    }

    /// One row per image and method plus a `mean` row per method.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,image,psnr,ssim,seconds")?;
        for m in &self.methods {
            for im in &m.images {
                writeln!(w, "{},{},{},{},", m.method, im.name, im.psnr, im.ssim)?;
            }
            writeln!(w, "{},mean,{},{},{}", m.method, m.mean_psnr, m.mean_ssim, m.seconds)?;
        }
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other; `path` may
    /// carry either extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(self)?)?;
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path.with_extension("csv"), buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?)
    }

    /// Plain-text summary table.
    pub fn render(&self) -> String {
        let mut s = format!("SR {:.2}  (ISTA-TV λ = {})\n", self.sr, self.ista_lambda);
        s += &format!("{:<10} {:>10} {:>8} {:>10}\n", "method", "PSNR (dB)", "SSIM", "time (s)");
        for m in &self.methods {
            s += &format!("{:<10} {:>10.2} {:>8.4} {:>10.3}\n", m.method, m.mean_psnr, m.mean_ssim, m.seconds);
        }
        s
    }
}

fn ista_config(lambda: f64, iters: usize) -> IstaConfig {
    IstaConfig {
        rho: 1.0,
        lambda,
        max_iters: iters.max(1),
        prox: Prox::Tv,
        ..IstaConfig::default()
    }
}

fn ista_tv(pair: &FactorPair<f64>, x: &Array2<f32>, lambda: f64, iters: usize) -> Result<Array2<f64>> {
    let x = ImagePlane::new(x.mapv(f64::from))?;
    let y = sensing::forward(pair, &x)?;
    Ok(ista_solve(&y, pair, &ista_config(lambda, iters))?.0.into_inner())
}

/// The λ among `lambdas` with the best mean PSNR of ISTA-TV on `images`.
pub fn tune_ista_lambda(images: &[Array2<f32>], pair: &FactorPair<f64>, lambdas: &[f64], iters: usize) -> Result<f64> {
    if lambdas.is_empty() || images.is_empty() {
        return Err(arg_err("λ tuning needs candidates and images"));
    }
    let mut best = (f64::NEG_INFINITY, lambdas[0]);
    for &lambda in lambdas {
        let mut total = 0.0;
        for x in images {
            let rec = ista_tv(pair, x, lambda, iters)?;
            total += image_psnr(rec.view(), x.mapv(f64::from).view())?;
        }
        let mean = total / images.len() as f64;
        log::debug!("ISTA-TV λ = {lambda}: {mean:.2} dB");
        if mean > best.0 {
            best = (mean, lambda);
        }
    }
    Ok(best.1)
}

fn largest_pow2(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        1 << (usize::BITS - 1 - n.leading_zeros())
    }
}

/// Parameters the network runs with on an `h × w` test image, and the size
/// the image has to be cropped to.
///
/// The denoisers are size-agnostic, so with fixed Hadamard factors the image
/// is reconstructed at full size (cropped only to power-of-two sides). Learned
/// or custom factors pin the image size to the training size.
pub fn params_for_image(params: &HatnetParams<f32>, h: usize, w: usize) -> Result<(HatnetParams<f32>, (usize, usize))> {
    let cfg = &params.config;
    let (th, tw) = if cfg.scheme == Scheme::HadamardCc && !cfg.learnable_matrices {
        (largest_pow2(h), largest_pow2(w))
    } else {
        cfg.image
    };
    if th < cfg.image.0.min(8) || tw < cfg.image.1.min(8) || h < th || w < tw {
        return Err(shape_err(format!(
            "test image {h}×{w} is smaller than the {}×{} the model needs",
            th.max(cfg.image.0),
            tw.max(cfg.image.1)
        )));
    }
    if (th, tw) == cfg.image {
        return Ok((params.clone(), cfg.image));
    }
    let mut p = params.clone();
    p.config.image = (th, tw);
    let (m_r, m_c) = p.config.measurement()?;
    let pair = sensing::build_factor_pair::<f32>(th, tw, m_r, m_c, cfg.scheme, 0)?;
    p.store.insert(PHI, pair.phi.into_dyn());
    p.store.insert(PSI, pair.psi.into_dyn());
    Ok((p, (th, tw)))
}

/// Reconstructs every image with the adjoint, ISTA-TV (weight `ista_lambda`)
/// and the network, all from the same noiseless measurement.
pub fn evaluate(
    params: &HatnetParams<f32>,
    images: &[(String, Array2<f32>)],
    sr: f64,
    ista_lambda: f64,
    ista_iters: usize,
) -> Result<EvalReport> {
    if (params.config.sampling_ratio - sr).abs() > 1e-9 {
        return Err(arg_err(format!(
            "checkpoint was trained at SR {} but evaluation asked for SR {sr}",
            params.config.sampling_ratio
        )));
    }
    if images.is_empty() {
        return Err(arg_err("no test images"));
    }
    let mut rows: [(Vec<ImageMetrics>, f64); 3] = Default::default();
    for (name, img) in images {
        let (p, (h, w)) = params_for_image(params, img.nrows(), img.ncols())?;
        let x = center_crop(img.view(), h, w).ok_or_else(|| shape_err("crop larger than image"))?;
        let pair32 = p.pair()?;
        let pair64 = pair32.cast::<f64>();
        let x64 = x.mapv(f64::from);
        let score = |rec: &Array2<f64>| -> Result<ImageMetrics> {
            Ok(ImageMetrics {
                name: name.clone(),
                psnr: image_psnr(rec.view(), x64.view())?,
                ssim: image_ssim(rec.view(), x64.view())?,
            })
        };

        let t = Instant::now();
        let y64 = sensing::forward(&pair64, &ImagePlane::new(x64.clone())?)?;
        let adj = sensing::adjoint(&pair64, &y64)?.into_inner();
        rows[0].1 += t.elapsed().as_secs_f64();
        rows[0].0.push(score(&adj)?);

        let t = Instant::now();
        let ista = ista_tv(&pair64, &x, ista_lambda, ista_iters)?;
        rows[1].1 += t.elapsed().as_secs_f64();
        rows[1].0.push(score(&ista)?);

        let t = Instant::now();
        let y32 = sensing::forward(&pair32, &ImagePlane::new(x.clone())?)?;
        let (rec, _) = hatnet_forward(&y32, &p)?;
        rows[2].1 += t.elapsed().as_secs_f64();
        rows[2].0.push(score(&rec.into_inner().mapv(f64::from))?);
    }
    let [a, i, n] = rows;
    Ok(EvalReport {
        sr,
        ista_lambda,
        methods: vec![
            MethodReport::new(ADJOINT, a.0, a.1),
            MethodReport::new(ISTA_TV, i.0, i.1),
            MethodReport::new(HATNET, n.0, n.1),
        ],
    })
}
