//! Training loop, metrics, data pipeline and evaluation.

pub mod data;
pub mod eval;
pub mod metrics;
pub mod synth;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::gradcheck::ScalarFn;
use crate::autograd::Graph;
use crate::checkpoint::{self, Checkpoint, SaveExtras, TrainState};
use crate::config::RunConfig;
use crate::error::{arg_err, shape_err};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::sensing::{self, ImagePlane};
use crate::unfolding::{hatnet_forward, init_params, HatnetParams, ReconstructionLoss};
use crate::{Error, Real, Result};

use data::TrainData;

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST: &str = "last";
pub const BEST: &str = "best";

/// Mean squared error over pixels.
pub fn loss<T: Real>(x_hat: ArrayView2<'_, T>, x_gt: ArrayView2<'_, T>) -> Result<f64> {
    if x_hat.dim() != x_gt.dim() {
        return Err(shape_err(format!("{:?} vs {:?}", x_hat.dim(), x_gt.dim())));
    }
    let mut acc = 0.0;
    Zip::from(&x_hat).and(&x_gt).for_each(|&a, &b| acc += (a - b).as_f64().powi(2));
    Ok(acc / x_hat.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        })
    }
}

/// Phase and learning rate of 0-based `epoch`.
pub fn schedule(cfg: &RunConfig, epoch: usize) -> (Phase, f64) {
    if epoch < cfg.epochs_main {
        (Phase::Main, cfg.lr_main)
    } else {
        (Phase::Finetune, cfg.lr_finetune)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: HatnetParams<f32>,
    pub epochs_done: usize,
    /// Mini-batch losses of this run, in order.
    pub step_losses: Vec<f64>,
    pub log: Vec<EpochLog>,
    pub best_val_psnr: Option<f64>,
    pub ista_lambda: f64,
    pub last_dir: PathBuf,
    pub best_dir: PathBuf,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    idx
}

/// Loss and gradients of every trainable tensor for one ground-truth crop.
pub fn sample_gradients(params: &HatnetParams<f32>, x: &Array2<f32>) -> Result<(f64, ParamStore<f32>)> {
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, |n| params.is_trainable(n));
    let objective = ReconstructionLoss {
        config: params.config.clone(),
        target: x.mapv(f64::from),
    };
    let l = objective.eval(&mut g, &p)?;
    let value = g.value(l).sum().as_f64();
    let mut grads = g.backward(l);
    let mut out = ParamStore::new();
    for (name, &var) in p.iter() {
        if let Some(gr) = grads.take(var) {
            out.insert(name.clone(), gr);
        }
    }
    Ok((value, out))
}

/// Mean PSNR (8-bit scale) of the network's reconstructions of `images`.
pub fn validation_psnr(params: &HatnetParams<f32>, images: &[Array2<f32>]) -> Result<f64> {
    if images.is_empty() {
        return Err(arg_err("empty validation set"));
    }
    let pair = params.pair()?;
    let mut total = 0.0;
    for x in images {
        let y = sensing::forward(&pair, &ImagePlane::new(x.clone())?)?;
        let (rec, _) = hatnet_forward(&y, params)?;
        total += metrics::image_psnr(rec.view(), x.view())?;
    }
    Ok(total / images.len() as f64)
}

/// Loads the images of `cfg.data_dir` and trains into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = data::split_dir(&cfg.data_dir, cfg.crop, cfg.dataset_size, cfg.val_images, cfg.min_scale, cfg.seed)?;
    train_with(cfg, &data, out, None)
}

/// Two-phase Adam training on prepared crops.
///
/// After every epoch `out/last` is rewritten (with optimizer state, so a run
/// can resume from it) and `out/best` whenever validation PSNR improves; one
/// CSV row per epoch goes to `out/train_log.csv`. A resumed run continues at
/// the stored epoch count and reproduces the losses of an uninterrupted run.
pub fn train_with(cfg: &RunConfig, data: &TrainData, out: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(arg_err("no training crops"));
    }
    let model = cfg.hatnet();
    let adam_cfg = AdamConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamConfig::default()
    };
    std::fs::create_dir_all(out)?;

    let (mut params, mut adam, start_epoch, mut steps, mut best, stored_lambda) = match resume {
        Some(ck) => {
            if ck.params.config != model {
                return Err(arg_err("checkpoint model does not match the run configuration"));
            }
            let state = ck.manifest.train_state.clone();
            let adam = ck
                .adam
                .unwrap_or_else(|| Adam::new(&ck.params.store, adam_cfg, |n| ck.params.is_trainable(n)));
            (
                ck.params,
                adam,
                state.as_ref().map_or(0, |s| s.epochs_done),
                state.as_ref().map_or(0, |s| s.steps_done),
                state.and_then(|s| s.best_val_psnr),
                ck.manifest.ista_lambda,
            )
        }
        None => {
            let params = init_params::<f32>(&model, cfg.seed)?;
            let adam = Adam::new(&params.store, adam_cfg, |n| params.is_trainable(n));
            (params, adam, 0, 0, None, None)
        }
    };

    let ista_lambda = match stored_lambda {
        Some(l) => l,
        None => eval::tune_ista_lambda(&data.val, &params.pair()?.cast(), &cfg.ista_lambdas, cfg.ista_iters)?,
    };
    log::info!("ISTA-TV reference λ = {ista_lambda}");

    let log_path = out.join(LOG_FILE);
    let mut log_file = if start_epoch > 0 && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "epoch,phase,lr,train_loss,val_psnr")?;
        f
    };

    let (last_dir, best_dir) = (out.join(LAST), out.join(BEST));
    let save = |dir: &Path, params: &HatnetParams<f32>, adam: &Adam<f32>, epochs: usize, steps: u64, best: Option<f64>| {
        checkpoint::save(
            dir,
            params,
            SaveExtras {
                run: Some(cfg),
                train_state: Some(TrainState {
                    epochs_done: epochs,
                    steps_done: steps,
                    best_val_psnr: best,
                    adam: adam.config,
                    adam_t: adam.t,
                }),
                adam: Some(adam),
                ista_lambda: Some(ista_lambda),
            },
        )
    };

    let total_epochs = cfg.epochs_main + cfg.epochs_finetune;
    let started = Instant::now();
    let mut step_losses = Vec::new();
    let mut history = Vec::new();
    let mut epochs_done = start_epoch;
    for epoch in start_epoch..total_epochs {
        let (phase, lr) = schedule(cfg, epoch);
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<ParamStore<f32>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (l, grads) = sample_gradients(&params, &data.train.crops[i])?;
                batch_loss += l;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (name, gr) in grads.iter() {
                            match a.get_mut(name) {
                                Some(t) => *t += gr,
                                None => {
                                    a.insert(name.clone(), gr.clone());
                                }
                            }
                        }
                    }
                }
            }
            steps += 1;
            let batch_loss = batch_loss / batch.len() as f64;
            if !batch_loss.is_finite() {
                log::error!("non-finite loss in epoch {} step {steps}", epoch + 1);
                return Err(Error::NonFinite {
                    stage: "training step",
                    index: steps as usize,
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for (_, t) in grads.iter_mut() {
                t.mapv_inplace(|v| v * inv);
            }
            adam.step(&mut params.store, &grads, lr)?;
            step_losses.push(batch_loss);
            epoch_loss += batch_loss;
            batches += 1;
        }

        let val_psnr = validation_psnr(&params, &data.val)?;
        let row = EpochLog {
            epoch: epoch + 1,
            phase,
            lr,
            train_loss: epoch_loss / batches as f64,
            val_psnr,
        };
        log::info!(
            "epoch {:>3} [{}] lr {:.1e}  loss {:.3e}  val {:.2} dB",
            row.epoch,
            row.phase,
            row.lr,
            row.train_loss,
            row.val_psnr
        );
        writeln!(log_file, "{},{},{},{:e},{}", row.epoch, row.phase, row.lr, row.train_loss, row.val_psnr)?;
        history.push(row);
        epochs_done = epoch + 1;

        if best.is_none_or(|b| val_psnr > b) {
            best = Some(val_psnr);
            save(&best_dir, &params, &adam, epochs_done, steps, best)?;
        }
        save(&last_dir, &params, &adam, epochs_done, steps, best)?;

        if let Some(limit) = cfg.max_train_seconds {
            if started.elapsed().as_secs_f64() >= limit && epochs_done < total_epochs {
                log::warn!("time budget of {limit} s reached after epoch {epochs_done}");
                break;
            }
        }
    }

    if epochs_done == start_epoch {
        save(&last_dir, &params, &adam, epochs_done, steps, best)?;
    }
    if !best_dir.join(checkpoint::MANIFEST).exists() {
        save(&best_dir, &params, &adam, epochs_done, steps, best)?;
    }
    Ok(TrainOutcome {
        params,
        epochs_done,
        step_losses,
        log: history,
        best_val_psnr: best,
        ista_lambda,
        last_dir,
        best_dir,
    })
}
