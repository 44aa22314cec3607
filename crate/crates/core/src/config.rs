//! The flat JSON run configuration shared by `train`, `eval` and `ablate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::arg_err;
use crate::hatblocks::Branches;
use crate::sensing::Scheme;
use crate::unfolding::HatnetConfig;
use crate::Result;

/// Every knob of a training run. Unknown keys are rejected so that typos do
/// not silently fall back to defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of training images (PNG).
    pub data_dir: PathBuf,
    /// Side of the square training crops.
    pub crop: usize,
    /// Number of augmented crops per epoch.
    pub dataset_size: usize,
    /// Images held out (last in file-name order) for validation.
    pub val_images: usize,
    /// Smallest random rescale factor of the augmentation (1 disables it).
    pub min_scale: f64,
    pub epochs_main: usize,
    pub lr_main: f64,
    pub epochs_finetune: usize,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Wall-clock budget; training stops after the epoch that crosses it.
    pub max_train_seconds: Option<f64>,
    pub sr: f64,
    pub seed: u64,

    pub stages: usize,
    pub channels: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub pool: usize,
    pub head_dim: usize,
    pub ffn_expansion: usize,
    pub csa_shrink: usize,
    pub scheme: Scheme,
    pub learnable_matrices: bool,
    pub cssc: bool,
    pub hf: bool,
    pub lf: bool,
    pub csa: bool,

    /// Candidate λ values for the ISTA-TV reference, tuned on validation.
    pub ista_lambdas: Vec<f64>,
    pub ista_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/train"),
            crop: 64,
            dataset_size: 20_000,
            val_images: 4,
            min_scale: 0.75,
            epochs_main: 100,
            lr_main: 1e-3,
            epochs_finetune: 20,
            lr_finetune: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            max_train_seconds: None,
            sr: 0.25,
            seed: 0,
            stages: 5,
            channels: 32,
            window_h: 4,
            window_w: 16,
            pool: 2,
            head_dim: 16,
            ffn_expansion: 2,
            csa_shrink: 16,
            scheme: Scheme::HadamardCc,
            learnable_matrices: false,
            cssc: true,
            hf: true,
            lf: true,
            csa: true,
            ista_lambdas: vec![1e-3, 3e-3, 1e-2, 3e-2],
            ista_iters: 100,
        }
    }
}

/// A component the ablation study can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Cssc,
    Hf,
    Lf,
    Csa,
}

impl std::str::FromStr for Toggle {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cssc" => Ok(Toggle::Cssc),
            "hf" => Ok(Toggle::Hf),
            "lf" => Ok(Toggle::Lf),
            "csa" => Ok(Toggle::Csa),
            _ => Err(arg_err(format!("unknown toggle `{s}` (expected cssc, hf, lf or csa)"))),
        }
    }
}

impl std::fmt::Display for Toggle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Toggle::Cssc => "cssc",
            Toggle::Hf => "hf",
            Toggle::Lf => "lf",
            Toggle::Csa => "csa",
        })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The same run with one component disabled.
    pub fn without(&self, t: Toggle) -> Self {
        let mut c = self.clone();
        match t {
            Toggle::Cssc => c.cssc = false,
            Toggle::Hf => c.hf = false,
            Toggle::Lf => c.lf = false,
            Toggle::Csa => c.csa = false,
        }
        c
    }

    pub fn hatnet(&self) -> HatnetConfig {
        HatnetConfig {
            stages: self.stages,
            image: (self.crop, self.crop),
            sampling_ratio: self.sr,
            scheme: self.scheme,
            learnable_matrices: self.learnable_matrices,
            cssc: self.cssc,
            denoiser: DenoiserConfig {
                channels: self.channels,
                window: (self.window_h, self.window_w),
                pool: self.pool,
                head_dim: self.head_dim,
                ffn_expansion: self.ffn_expansion,
                csa_shrink: self.csa_shrink,
                branches: Branches {
                    high: self.hf,
                    low: self.lf,
                    csa: self.csa,
                },
                cssc_input: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_finetune > 0.0) {
            return Err(arg_err("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(arg_err("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(arg_err("batch size and dataset size must be positive"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) {
            return Err(arg_err("min_scale must lie in (0, 1]"));
        }
        if !self.crop.is_multiple_of(crate::denoiser::GRID_MULTIPLE) {
            return Err(arg_err(format!(
                "crop {} must be a multiple of {}",
                self.crop,
                crate::denoiser::GRID_MULTIPLE
            )));
        }
        if !self.hf && !self.lf {
            return Err(arg_err("at least one attention branch must stay enabled"));
        }
        if self.ista_lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(arg_err("ISTA λ candidates must be non-negative"));
        }
        self.hatnet().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_uses_defaults_and_typos_fail() {
        let c: RunConfig = serde_json::from_str(r#"{"stages": 3, "channels": 16}"#).unwrap();
        assert_eq!((c.stages, c.channels, c.crop), (3, 16, 64));
        assert!(serde_json::from_str::<RunConfig>(r#"{"stage": 3}"#).is_err());
    }

    #[test]
    fn toggles() {
        let c = RunConfig::default();
        assert!(!c.without("cssc".parse().unwrap()).hatnet().cssc);
        assert!(!c.without(Toggle::Lf).hatnet().denoiser.branches.low);
        assert!("xyz".parse::<Toggle>().is_err());
    }
}
