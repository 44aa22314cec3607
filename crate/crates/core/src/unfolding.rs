//! The unfolded network: `K` stages of tensor gradient descent, each followed
//! by its own U-shaped denoiser, starting from `X₀ = ΦᵀYΨ`.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::gradcheck::ScalarFn;
use crate::autograd::{Graph, Var};
use crate::denoiser::{self, DenoiserConfig, LEVELS};
use crate::error::{arg_err, shape_err};
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::sensing::{self, FactorPair, ImagePlane, MeasurementPlane, Scheme};
use crate::{Error, Real, Result};

pub const PHI: &str = "sensing.phi";
pub const PSI: &str = "sensing.psi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatnetConfig {
    pub stages: usize,
    /// Image rows × cols the network is built for.
    pub image: (usize, usize),
    pub sampling_ratio: f64,
    pub scheme: Scheme,
    /// Train Φ and Ψ together with the network.
    pub learnable_matrices: bool,
    /// Cross-stage feature fusion.
    pub cssc: bool,
    /// Shared settings of every stage denoiser; window orientation
    /// alternates between stages.
    pub denoiser: DenoiserConfig,
}

impl Default for HatnetConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            image: (64, 64),
            sampling_ratio: 0.25,
            scheme: Scheme::HadamardCc,
            learnable_matrices: false,
            cssc: true,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl HatnetConfig {
    pub fn measurement(&self) -> Result<(usize, usize)> {
        Ok((
            sensing::rows_for_ratio(self.image.0, self.sampling_ratio)?,
            sensing::rows_for_ratio(self.image.1, self.sampling_ratio)?,
        ))
    }

    /// Denoiser settings of stage `k` (0-based).
    pub fn stage(&self, k: usize) -> DenoiserConfig {
        let (a, b) = self.denoiser.window;
        DenoiserConfig {
            window: if k.is_multiple_of(2) { (a, b) } else { (b, a) },
            cssc_input: self.cssc && k > 0,
            ..self.denoiser
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(arg_err("at least one stage is required"));
        }
        let (h, w) = self.image;
        if h < denoiser::GRID_MULTIPLE || w < denoiser::GRID_MULTIPLE {
            return Err(arg_err(format!("image {h}×{w} is too small for the denoiser")));
        }
        self.measurement()?;
        self.denoiser.validate()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for k in 0..self.stages {
            out.push(ParamSpec::new(rho_name(k), &[], Init::Const(1.0)));
            out.extend(self.stage(k).specs(&stage_prefix(k)));
        }
        out
    }
}

pub fn rho_name(k: usize) -> String {
    format!("stage{}.rho", k + 1)
}

pub fn stage_prefix(k: usize) -> String {
    format!("stage{}.den", k + 1)
}

/// Configuration plus every learnable tensor (including Φ, Ψ).
#[derive(Clone, Debug, PartialEq)]
pub struct HatnetParams<T> {
    pub config: HatnetConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> HatnetParams<T> {
    pub fn pair(&self) -> Result<FactorPair<T>> {
        let get = |n: &str| -> Result<Array2<T>> {
            self.store
                .require(n)?
                .clone()
                .into_dimensionality()
                .map_err(|e| shape_err(e.to_string()))
        };
        FactorPair::from_matrices(get(PHI)?, get(PSI)?, self.config.scheme)
    }

    pub fn rho(&self) -> Result<Vec<T>> {
        (0..self.config.stages)
            .map(|k| Ok(*self.store.require(&rho_name(k))?.first().expect("scalar")))
            .collect()
    }

    /// Whether the optimiser should update `name`.
    pub fn is_trainable(&self, name: &str) -> bool {
        trainable(&self.config, name)
    }

    pub fn cast<U: Real>(&self) -> HatnetParams<U> {
        HatnetParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

pub fn trainable(cfg: &HatnetConfig, name: &str) -> bool {
    cfg.learnable_matrices || !name.starts_with("sensing.")
}

/// `ρ = 1`, fan-in uniform weights, factor pair from the configured scheme.
pub fn init_params<T: Real>(cfg: &HatnetConfig, seed: u64) -> Result<HatnetParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::from_specs(&cfg.specs(), &mut rng)?;
    let (m_r, m_c) = cfg.measurement()?;
    let pair = sensing::build_factor_pair::<T>(cfg.image.0, cfg.image.1, m_r, m_c, cfg.scheme, seed)?;
    store.insert(PHI, pair.phi.into_dyn());
    store.insert(PSI, pair.psi.into_dyn());
    Ok(HatnetParams {
        config: cfg.clone(),
        store,
    })
}

/// `Φ X Ψᵀ` inside the graph.
pub fn measure<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    let (phi, psi) = (p.get(PHI)?, p.get(PSI)?);
    let psi_t = g.transpose(psi);
    let t = g.matmul(phi, x);
    Ok(g.matmul(t, psi_t))
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, index: usize) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: "unfolding stage",
            index,
        })
    }
}

/// Builds the unfolded network on `y`; returns `X₁ … X_K`.
pub fn hatnet_graph<T: Real>(g: &mut Graph<T>, p: &Bound, y: Var, cfg: &HatnetConfig) -> Result<Vec<Var>> {
    let (phi, psi) = (p.get(PHI)?, p.get(PSI)?);
    let (m, n) = (g.shape(phi).to_vec(), g.shape(psi).to_vec());
    if g.shape(y) != [m[0], n[0]] {
        return Err(shape_err(format!(
            "measurement {:?} does not match factors {}×{}",
            g.shape(y),
            m[0],
            n[0]
        )));
    }
    let phi_t = g.transpose(phi);
    let psi_t = g.transpose(psi);
    let t = g.matmul(phi_t, y);
    let mut x = g.matmul(t, psi);
    check_finite(g, x, 0)?;

    let mut cssc: Option<[Var; LEVELS]> = None;
    let mut out = Vec::with_capacity(cfg.stages);
    for k in 0..cfg.stages {
        let t = g.matmul(phi, x);
        let ax = g.matmul(t, psi_t);
        let r = g.sub(y, ax);
        let t = g.matmul(phi_t, r);
        let grad = g.matmul(t, psi);
        let step = g.scalar_mul(grad, p.get(&rho_name(k))?);
        let z = g.add(x, step);
        let (xk, feats) = denoiser::stage_denoise(g, p, &stage_prefix(k), z, cssc.as_ref(), &cfg.stage(k))?;
        check_finite(g, xk, k + 1)?;
        x = xk;
        cssc = Some(feats);
        out.push(xk);
    }
    Ok(out)
}

/// Reconstructs from `y`; returns `X_K` and every stage output.
pub fn hatnet_forward<T: Real>(
    y: &MeasurementPlane<T>,
    params: &HatnetParams<T>,
) -> Result<(ImagePlane<T>, Vec<ImagePlane<T>>)> {
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, |_| false);
    let yv = g.constant(y.data().clone().into_dyn());
    let xs = hatnet_graph(&mut g, &p, yv, &params.config)?;
    let planes = xs
        .iter()
        .map(|&v| {
            let a: Array2<T> = g.value(v).clone().into_dimensionality().map_err(|e| shape_err(e.to_string()))?;
            ImagePlane::new(a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((planes.last().expect("at least one stage").clone(), planes))
}

/// Mean squared error of the final stage against the ground truth, with the
/// measurement simulated in-graph so that learnable factors get gradients
/// through both the acquisition and the reconstruction.
#[derive(Clone, Debug)]
pub struct ReconstructionLoss {
    pub config: HatnetConfig,
    pub target: Array2<f64>,
}

impl ScalarFn for ReconstructionLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let x = g.constant(self.target.mapv(T::lit).into_dyn());
        let y = measure(g, p, x)?;
        let xs = hatnet_graph(g, p, y, &self.config)?;
        Ok(g.mse(*xs.last().expect("at least one stage"), x))
    }
}

/// Zeroes every denoiser tensor, leaving ρ and the factors alone.
pub fn zero_denoisers<T: Real>(params: &mut HatnetParams<T>) {
    for (name, v) in params.store.iter_mut() {
        if name.contains(".den.") {
            v.fill(T::zero());
        }
    }
}

pub fn set_rho<T: Real>(params: &mut HatnetParams<T>, value: T) {
    for k in 0..params.config.stages {
        if let Some(r) = params.store.get_mut(&rho_name(k)) {
            *r = ArrayD::from_elem(IxDyn(&[]), value);
        }
    }
}
