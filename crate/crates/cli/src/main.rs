use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use kspi_core::checkpoint::{self, Checkpoint};
use kspi_core::config::{RunConfig, Toggle};
use kspi_core::ksp::{self, KspTensor};
use kspi_core::sensing::{self, FactorPair, ImagePlane, MeasurementPlane, Scheme};
use kspi_core::solvers::{ista_solve, IstaConfig, Prox};
use kspi_core::training::{self, data, eval, synth};
use kspi_core::unfolding::hatnet_forward;
use kspi_core::{bench, FactorPair64};

/// Kronecker single-pixel imaging: simulate, reconstruct, train, evaluate.
#[derive(Parser)]
#[command(name = "kspi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Back-projection `ΦᵀYΨ`.
    Adjoint,
    IstaTv,
    Hatnet,
}

#[derive(Subcommand)]
enum Command {
    /// Build square Φ, Ψ for an n × n image.
    Matrices {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        sr: f64,
        #[arg(long, default_value = "hadamard_cc")]
        scheme: Scheme,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure an image: `Y = Φ X Ψᵀ` (+ optional Gaussian noise).
    Simulate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover an image from a measurement; writes a PNG and a `.ksp` tensor.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// ISTA-TV weight; defaults to the checkpoint's tuned value (or 0.01)
        /// scaled by (1 − SR), so full sampling is not regularised.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Per-iteration (ISTA) or per-stage (network) trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unfolding network from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// PSNR/SSIM of adjoint, ISTA-TV and the network on a directory of PNGs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_dir: PathBuf,
        #[arg(long)]
        sr: f64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 100)]
        ista_iters: usize,
    },
    /// Time the Kronecker and vectorised gradient steps.
    Bench {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        sr: f64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the vectorised step when Ψ⊗Φ would exceed this many MiB.
        #[arg(long, default_value_t = 1024)]
        memory_cap_mb: usize,
    },
    /// Train the configured model with one component switched off.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        toggle: Toggle,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a set of procedural grayscale test images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Matrices { n, sr, scheme, seed, out } => {
            let m = sensing::rows_for_ratio(n, sr)?;
            let pair = sensing::build_factor_pair::<f64>(n, n, m, m, scheme, seed)?;
            checkpoint::save_matrices(&out, &pair)?;
            log::info!("wrote {m}×{n} factors ({scheme}, SR {:.4}) to {}", pair.sampling_ratio(), out.display());
        }
        Command::Simulate {
            image,
            matrices,
            noise_sigma,
            seed,
            out,
        } => {
            let pair: FactorPair64 = checkpoint::load_matrices(&matrices)?;
            let x = load_sized(&image, pair.image_dim())?;
            let y = sensing::forward(&pair, &ImagePlane::new(x)?)?;
            let y = if noise_sigma > 0.0 { sensing::add_noise(&y, noise_sigma, seed)? } else { y };
            write_plane(&out, y.data())?;
            log::info!("measurement {:?} written to {}", y.dim(), out.display());
        }
        Command::Reconstruct {
            method,
            measurement,
            matrices,
            checkpoint,
            lambda,
            iters,
            trace,
            out,
        } => reconstruct(method, &measurement, &matrices, checkpoint.as_deref(), lambda, iters, trace.as_deref(), &out)?,
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let outcome = match resume {
                Some(dir) => {
                    let ck = checkpoint::load(&dir)?;
                    let data = data::split_dir(&cfg.data_dir, cfg.crop, cfg.dataset_size, cfg.val_images, cfg.min_scale, cfg.seed)?;
                    training::train_with(&cfg, &data, &out, Some(ck))?
                }
                None => training::train(&cfg, &out)?,
            };
            report_training(&outcome);
        }
        Command::Ablate { config, toggle, out } => {
            let cfg = RunConfig::load(&config)?.without(toggle);
            log::info!("training without {toggle}");
            report_training(&training::train(&cfg, &out)?);
        }
        Command::Eval {
            checkpoint,
            test_dir,
            sr,
            report,
            ista_iters,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let images: Vec<(String, Array2<f32>)> = data::load_dir(&test_dir)?
                .into_iter()
                .map(|(p, img)| (p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()), img))
                .collect();
            let lambda = ck.manifest.ista_lambda.unwrap_or(0.01);
            let r = eval::evaluate(&ck.params, &images, sr, lambda, ista_iters)?;
            r.save(&report)?;
            print!("{}", r.render());
        }
        Command::Bench {
            n,
            sr,
            reps,
            report,
            seed,
            memory_cap_mb,
        } => {
            let r = bench::time_gradient_step(n, sr, reps, seed, memory_cap_mb.saturating_mul(1 << 20))?;
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&report, serde_json::to_string_pretty(&r)?)?;
            std::fs::write(report.with_extension("txt"), r.render())?;
            print!("{}", r.render());
        }
        Command::Synth { out, count, size, seed } => {
            ensure!(size >= 8, "images must be at least 8 pixels wide");
            let paths = synth::write_synthetic_set(&out, count, size, seed)?;
            log::info!("wrote {} images to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn report_training(o: &training::TrainOutcome) {
    log::info!(
        "{} epochs; best validation PSNR {}; checkpoints in {} and {}",
        o.epochs_done,
        o.best_val_psnr.map_or("n/a".into(), |p| format!("{p:.2} dB")),
        o.last_dir.display(),
        o.best_dir.display()
    );
}

/// Accepts a checkpoint directory or a training output directory (whose
/// `best/` checkpoint is used).
fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let dir = if dir.join(checkpoint::MANIFEST).exists() { dir.to_path_buf() } else { dir.join(training::BEST) };
    checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Loads an image as a plane of exactly `dim`, centre-cropping larger ones.
fn load_sized(path: &Path, dim: (usize, usize)) -> Result<Array2<f64>> {
    let img = data::load_image(path)?;
    let crop = data::center_crop(img.view(), dim.0, dim.1).with_context(|| {
        format!("image {} is {:?}, smaller than the {:?} the factors expect", path.display(), img.dim(), dim)
    })?;
    if img.dim() != dim {
        log::warn!("centre-cropping {:?} image to {:?}", img.dim(), dim);
    }
    Ok(crop.mapv(f64::from))
}

fn write_plane(path: &Path, a: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ksp::write(path, &KspTensor::F64(a.clone().into_dyn()))?;
    Ok(())
}

fn read_plane(path: &Path) -> Result<Array2<f64>> {
    let t = ksp::read(path)?.into_real::<f64>();
    t.into_dimensionality().map_err(|_| anyhow::anyhow!("{} is not a 2D tensor", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    method: Method,
    measurement: &Path,
    matrices: &Path,
    checkpoint: Option<&Path>,
    lambda: Option<f64>,
    iters: usize,
    trace: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let pair: FactorPair<f64> = checkpoint::load_matrices(matrices)?;
    let y = MeasurementPlane::new(read_plane(measurement)?)?;
    ensure!(
        y.dim() == pair.measurement_dim(),
        "measurement is {:?} but the factors produce {:?}",
        y.dim(),
        pair.measurement_dim()
    );
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let mut trace_rows: Option<Vec<u8>> = None;
    let x: Array2<f64> = match method {
        Method::Adjoint => sensing::adjoint(&pair, &y)?.into_inner(),
        Method::IstaTv => {
            let base = ck.as_ref().and_then(|c| c.manifest.ista_lambda).unwrap_or(0.01);
            let lambda = lambda.unwrap_or(base * (1.0 - pair.sampling_ratio()).max(0.0));
            let cfg = IstaConfig {
                rho: 1.0 / spectral_bound(&pair),
                lambda,
                max_iters: iters,
                prox: Prox::Tv,
                ..IstaConfig::default()
            };
            let (x, tr) = ista_solve(&y, &pair, &cfg)?;
            log::info!("ISTA-TV, λ = {lambda}: {} iterations", tr.iterations());
            let mut buf = Vec::new();
            tr.write_csv(&mut buf)?;
            trace_rows = Some(buf);
            x.into_inner()
        }
        Method::Hatnet => {
            let Some(ck) = ck.as_ref() else {
                bail!("--method hatnet needs --checkpoint");
            };
            let (h, w) = pair.image_dim();
            let (params, dim) = eval::params_for_image(&ck.params, h, w)?;
            ensure!(dim == (h, w), "the checkpoint cannot reconstruct {h}×{w} images");
            let own = params.pair()?.cast::<f64>();
            let diff = (&own.phi - &pair.phi)
                .iter()
                .chain((&own.psi - &pair.psi).iter())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            ensure!(diff <= 1e-6, "the matrices differ from the ones the checkpoint was trained with");
            let y32 = MeasurementPlane::new(y.data().mapv(|v| v as f32))?;
            let (x, stages) = hatnet_forward(&y32, &params)?;
            let mut buf = b"stage,residual_norm\n".to_vec();
            for (k, s) in stages.iter().enumerate() {
                let r = y.data() - &sensing::apply_forward(&pair, s.data().mapv(f64::from).view())?;
                buf.extend(format!("{},{:e}\n", k + 1, r.mapv(|v| v * v).sum().sqrt()).bytes());
            }
            trace_rows = Some(buf);
            x.into_inner().mapv(f64::from)
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let png = out.with_extension("png");
    data::save_png(&png, x.view())?;
    write_plane(&out.with_extension("ksp"), &x)?;
    if let (Some(path), Some(rows)) = (trace, trace_rows) {
        std::fs::write(path, rows)?;
    }
    log::info!("reconstruction written to {} (+ .ksp)", png.display());
    Ok(())
}

/// Lipschitz constant `σ_max(Ψ⊗Φ)² = σ_max(Φ)²·σ_max(Ψ)²`, each factor by
/// power iteration on its Gram matrix.
fn spectral_bound(pair: &FactorPair<f64>) -> f64 {
    fn sigma_sq(a: &Array2<f64>) -> f64 {
        let g = a.t().dot(a);
        let mut v = ndarray::Array1::from_elem(g.nrows(), 1.0 / (g.nrows() as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = g.dot(&v);
            let norm = w.mapv(|x| x * x).sum().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = w / norm;
        }
        lambda
    }
    // Power iteration converges from below; a small margin keeps ρ ≤ 1/L.
    (sigma_sq(&pair.phi) * sigma_sq(&pair.psi) * 1.01).max(f64::MIN_POSITIVE)
}
