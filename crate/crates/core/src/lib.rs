//! Kronecker single-pixel imaging toolkit.
//!
//! The crate simulates the factored compressive model `Y = Φ X Ψᵀ` and
//! reconstructs images either with a classical tensor ISTA (soft threshold or
//! total-variation prox) or with a deep unfolding network whose stages
//! alternate a tensor gradient step with a U-shaped hybrid-attention
//! Transformer denoiser.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the concrete
//! aliases below are what the command line front end uses.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod hatblocks;
pub mod ksp;
pub mod optim;
pub mod params;
pub mod sensing;
pub mod solvers;
pub mod training;
pub mod unfolding;

use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub use error::{Error, Result};

/// Floating point scalar used throughout the crate.
pub trait Real: NdFloat + FromPrimitive + Sum + Default {
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    /// Widen to `f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type FactorPair32 = sensing::FactorPair<f32>;
pub type FactorPair64 = sensing::FactorPair<f64>;
pub type ImagePlane32 = sensing::ImagePlane<f32>;
pub type ImagePlane64 = sensing::ImagePlane<f64>;
pub type MeasurementPlane32 = sensing::MeasurementPlane<f32>;
pub type MeasurementPlane64 = sensing::MeasurementPlane<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
