//! Checkpoint and factor-matrix directories.
//!
//! A checkpoint is `manifest.json` plus one `.ksp` file per tensor. The
//! manifest echoes the model configuration, maps tensor names to files and
//! optionally carries optimizer state so training can resume exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{shape_err, Error};
use crate::ksp::{self, KspTensor};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::sensing::{FactorPair, Scheme};
use crate::unfolding::{self, HatnetConfig, HatnetParams};
use crate::{Real, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Progress of the run that wrote the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps_done: u64,
    pub best_val_psnr: Option<f64>,
    pub adam: AdamConfig,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: HatnetConfig,
    pub stages: usize,
    /// Tensor name → file inside the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
    #[serde(default)]
    pub run: Option<RunConfig>,
    #[serde(default)]
    pub train_state: Option<TrainState>,
    /// Adam moments, `m/<name>` and `v/<name>` → file.
    #[serde(default)]
    pub optimizer: BTreeMap<String, String>,
    /// Regularisation weight of the ISTA-TV reference tuned during training.
    #[serde(default)]
    pub ista_lambda: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: HatnetParams<f32>,
    pub adam: Option<Adam<f32>>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Extra state saved next to the parameters.
#[derive(Default)]
pub struct SaveExtras<'a> {
    pub run: Option<&'a RunConfig>,
    pub train_state: Option<TrainState>,
    pub adam: Option<&'a Adam<f32>>,
    pub ista_lambda: Option<f64>,
}

pub fn save(dir: &Path, params: &HatnetParams<f32>, extras: SaveExtras<'_>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, value) in params.store.iter() {
        let file = format!("{name}.ksp");
        ksp::write(&dir.join(&file), &KspTensor::F32(value.clone()))?;
        tensors.insert(name.clone(), file);
    }
    let mut optimizer = BTreeMap::new();
    if let Some(adam) = extras.adam {
        std::fs::create_dir_all(dir.join("optim"))?;
        for (kind, store) in [("m", &adam.m), ("v", &adam.v)] {
            for (name, value) in store.iter() {
                let file = format!("optim/{kind}.{name}.ksp");
                ksp::write(&dir.join(&file), &KspTensor::F32(value.clone()))?;
                optimizer.insert(format!("{kind}/{name}"), file);
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: params.config.clone(),
        stages: params.config.stages,
        tensors,
        run: extras.run.cloned(),
        train_state: extras.train_state,
        optimizer,
        ista_lambda: extras.ista_lambda,
    };
    // Write the manifest last so a crash never leaves one pointing at
    // missing tensors.
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(manifest)
}

fn read_f32(dir: &Path, file: &str) -> Result<ndarray::ArrayD<f32>> {
    let path = dir.join(file);
    if Path::new(file).is_absolute() || file.contains("..") {
        return Err(format_err(&path, "tensor path escapes the checkpoint directory"));
    }
    Ok(ksp::read(&path)?.into_real())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)
        .map_err(|e| format_err(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(&mpath, format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.stages != manifest.model.stages {
        return Err(format_err(&mpath, "stage count disagrees with the model configuration"));
    }
    manifest.model.validate()?;

    let mut expected: BTreeMap<String, Vec<usize>> =
        manifest.model.specs().into_iter().map(|s| (s.name, s.shape)).collect();
    let (m_r, m_c) = manifest.model.measurement()?;
    let (n_r, n_c) = manifest.model.image;
    expected.insert(unfolding::PHI.into(), vec![m_r, n_r]);
    expected.insert(unfolding::PSI.into(), vec![m_c, n_c]);

    let mut store = ParamStore::new();
    for (name, shape) in &expected {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| format_err(&mpath, format!("missing tensor `{name}`")))?;
        let t = read_f32(dir, file)?;
        if t.shape() != &shape[..] {
            return Err(shape_err(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        store.insert(name.clone(), t);
    }
    if let Some(extra) = manifest.tensors.keys().find(|k| !expected.contains_key(*k)) {
        return Err(format_err(&mpath, format!("unexpected tensor `{extra}`")));
    }

    let adam = match &manifest.train_state {
        Some(state) if !manifest.optimizer.is_empty() => {
            let mut m = ParamStore::new();
            let mut v = ParamStore::new();
            for (key, file) in &manifest.optimizer {
                let (kind, name) = key
                    .split_once('/')
                    .ok_or_else(|| format_err(&mpath, format!("bad optimizer key `{key}`")))?;
                let t = read_f32(dir, file)?;
                if Some(t.shape()) != store.get(name).map(|p| p.shape()) {
                    return Err(shape_err(format!("optimizer slot `{key}` does not match its tensor")));
                }
                match kind {
                    "m" => m.insert(name, t),
                    "v" => v.insert(name, t),
                    _ => return Err(format_err(&mpath, format!("bad optimizer key `{key}`"))),
                };
            }
            Some(Adam {
                config: state.adam,
                t: state.adam_t,
                m,
                v,
            })
        }
        _ => None,
    };

    Ok(Checkpoint {
        params: HatnetParams {
            config: manifest.model.clone(),
            store,
        },
        manifest,
        adam,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatricesMeta {
    pub scheme: Scheme,
    pub image: (usize, usize),
    pub measurement: (usize, usize),
    pub sampling_ratio: f64,
}

pub const PHI_FILE: &str = "phi.ksp";
pub const PSI_FILE: &str = "psi.ksp";
pub const MATRICES_META: &str = "matrices.json";

/// Writes Φ and Ψ (f64) plus a small JSON description.
pub fn save_matrices<T: Real>(dir: &Path, pair: &FactorPair<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (file, m) in [(PHI_FILE, &pair.phi), (PSI_FILE, &pair.psi)] {
        ksp::write(&dir.join(file), &KspTensor::F64(m.mapv(|v| v.as_f64()).into_dyn()))?;
    }
    let meta = MatricesMeta {
        scheme: pair.scheme,
        image: pair.image_dim(),
        measurement: pair.measurement_dim(),
        sampling_ratio: pair.sampling_ratio(),
    };
    std::fs::write(dir.join(MATRICES_META), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_matrices<T: Real>(dir: &Path) -> Result<FactorPair<T>> {
    let get = |file: &str| -> Result<Array2<T>> {
        let path: PathBuf = dir.join(file);
        ksp::read(&path)?
            .into_real::<T>()
            .into_dimensionality()
            .map_err(|_| format_err(&path, "factor matrix must be 2-D"))
    };
    let scheme = match std::fs::read_to_string(dir.join(MATRICES_META)) {
        Ok(text) => serde_json::from_str::<MatricesMeta>(&text)?.scheme,
        Err(_) => Scheme::Custom,
    };
    FactorPair::from_matrices(get(PHI_FILE)?, get(PSI_FILE)?, scheme)
}
