//! Measurement matrices and the Kronecker forward/adjoint operators.
//!
//! An image `X` (`n_r × n_c`) is measured as `Y = Φ X Ψᵀ` (`m_r × m_c`). With
//! column-stacking vectorisation this is the dense system `vec(Y) = (Ψ ⊗ Φ) vec(X)`;
//! [`kron_expand`] materialises that matrix for oracle checks and benchmarks.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err};
use crate::{Real, Result};

/// Default element cap for [`kron_expand`]; 2^26 entries is 512 MiB at f64.
pub const KRON_ELEMENT_LIMIT: usize = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Sequency-ordered ("cake-cutting") Hadamard rows, scaled by `1/√n`.
    HadamardCc,
    /// Hadamard initialisation that the unfolding network is allowed to train.
    Learnable,
    /// Seeded Gaussian factors or matrices supplied by the caller.
    Custom,
}

impl std::str::FromStr for Scheme {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hadamard_cc" => Ok(Scheme::HadamardCc),
            "learnable" => Ok(Scheme::Learnable),
            "custom" => Ok(Scheme::Custom),
            other => Err(arg_err(format!("unknown scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::HadamardCc => "hadamard_cc",
            Scheme::Learnable => "learnable",
            Scheme::Custom => "custom",
        })
    }
}

/// A 2D image or intermediate estimate. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane<T>(Array2<T>);

/// A 2D block of compressed measurements. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementPlane<T>(Array2<T>);

macro_rules! plane_impl {
    ($ty:ident, $what:literal) => {
        impl<T: Real> $ty<T> {
            pub fn new(data: Array2<T>) -> Result<Self> {
                if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                    return Err(crate::Error::NonFinite { stage: $what, index: i });
                }
                Ok(Self(data))
            }

            pub fn zeros(rows: usize, cols: usize) -> Self {
                Self(Array2::zeros((rows, cols)))
            }

            pub fn data(&self) -> &Array2<T> {
                &self.0
            }

            pub fn view(&self) -> ArrayView2<'_, T> {
                self.0.view()
            }

            pub fn into_inner(self) -> Array2<T> {
                self.0
            }

            pub fn dim(&self) -> (usize, usize) {
                self.0.dim()
            }
        }
    };
}

plane_impl!(ImagePlane, "image entry");
plane_impl!(MeasurementPlane, "measurement entry");

/// The two factor matrices of a Kronecker measurement system.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair<T> {
    pub phi: Array2<T>,
    pub psi: Array2<T>,
    pub scheme: Scheme,
}

impl<T: Real> FactorPair<T> {
    pub fn from_matrices(phi: Array2<T>, psi: Array2<T>, scheme: Scheme) -> Result<Self> {
        let (m_r, n_r) = phi.dim();
        let (m_c, n_c) = psi.dim();
        if m_r == 0 || m_c == 0 || m_r > n_r || m_c > n_c {
            return Err(shape_err(format!(
                "factor shapes must satisfy 0 < m ≤ n, got Φ {m_r}×{n_r}, Ψ {m_c}×{n_c}"
            )));
        }
        if phi.iter().chain(psi.iter()).any(|v| !v.is_finite()) {
            return Err(arg_err("factor matrices contain non-finite entries"));
        }
        Ok(Self { phi, psi, scheme })
    }

    /// Image shape `(n_r, n_c)`.
    pub fn image_dim(&self) -> (usize, usize) {
        (self.phi.ncols(), self.psi.ncols())
    }

    /// Measurement shape `(m_r, m_c)`.
    pub fn measurement_dim(&self) -> (usize, usize) {
        (self.phi.nrows(), self.psi.nrows())
    }

    /// Sampling ratio `α = m_r·m_c / (n_r·n_c)`.
    pub fn sampling_ratio(&self) -> f64 {
        let (m_r, m_c) = self.measurement_dim();
        let (n_r, n_c) = self.image_dim();
        (m_r * m_c) as f64 / (n_r * n_c) as f64
    }

    pub fn cast<U: Real>(&self) -> FactorPair<U> {
        FactorPair {
            phi: self.phi.mapv(|v| U::lit(v.as_f64())),
            psi: self.psi.mapv(|v| U::lit(v.as_f64())),
            scheme: self.scheme,
        }
    }
}

/// Sylvester construction of the `order × order` Hadamard matrix.
pub fn sylvester_hadamard(order: usize) -> Result<Array2<i8>> {
    if order == 0 || !order.is_power_of_two() {
        return Err(arg_err(format!(
            "Hadamard order must be a power of two, got {order}"
        )));
    }
    let mut h = Array2::from_elem((1, 1), 1i8);
    while h.nrows() < order {
        let n = h.nrows();
        let mut next = Array2::zeros((2 * n, 2 * n));
        for i in 0..n {
            for j in 0..n {
                let v = h[[i, j]];
                next[[i, j]] = v;
                next[[i, j + n]] = v;
                next[[i + n, j]] = v;
                next[[i + n, j + n]] = -v;
            }
        }
        h = next;
    }
    Ok(h)
}

/// Number of sign changes along a ±1 row.
pub fn sign_transitions(row: impl IntoIterator<Item = i8>) -> usize {
    let mut it = row.into_iter();
    let Some(mut prev) = it.next() else {
        return 0;
    };
    let mut count = 0;
    for v in it {
        if v != prev {
            count += 1;
        }
        prev = v;
    }
    count
}

/// Row permutation sorting a Hadamard matrix by ascending sign-transition
/// count (stable in the original row index).
pub fn sequency_order(h: &Array2<i8>) -> Vec<usize> {
    let counts: Vec<usize> = h
        .rows()
        .into_iter()
        .map(|r| sign_transitions(r.iter().copied()))
        .collect();
    let mut perm: Vec<usize> = (0..h.nrows()).collect();
    perm.sort_by_key(|&i| counts[i]);
    perm
}

/// Number of factor rows giving sampling ratio `sr` on one axis of length `n`
/// (the per-axis ratio is `√sr`).
pub fn rows_for_ratio(n: usize, sr: f64) -> Result<usize> {
    if !(sr > 0.0 && sr <= 1.0) {
        return Err(arg_err(format!("sampling ratio must lie in (0, 1], got {sr}")));
    }
    let m = (n as f64 * sr.sqrt()).round() as usize;
    Ok(m.clamp(1, n))
}

fn cake_cutting_rows<T: Real>(n: usize, m: usize) -> Result<Array2<T>> {
    let h = sylvester_hadamard(n)?;
    let perm = sequency_order(&h);
    let scale = T::one() / T::lit(n as f64).sqrt();
    let mut out = Array2::zeros((m, n));
    for (dst, &src) in perm.iter().take(m).enumerate() {
        for j in 0..n {
            out[[dst, j]] = T::lit(f64::from(h[[src, j]])) * scale;
        }
    }
    Ok(out)
}

fn gaussian_rows<T: Real>(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid std");
    Array2::from_shape_fn((m, n), |_| T::lit(normal.sample(rng)))
}

pub fn build_factor_pair<T: Real>(
    n_r: usize,
    n_c: usize,
    m_r: usize,
    m_c: usize,
    scheme: Scheme,
    seed: u64,
) -> Result<FactorPair<T>> {
    if m_r == 0 || m_c == 0 || m_r > n_r || m_c > n_c {
        return Err(arg_err(format!(
            "infeasible factor dims: need 0 < m ≤ n, got ({m_r}, {m_c}) of ({n_r}, {n_c})"
        )));
    }
    let (phi, psi) = match scheme {
        Scheme::HadamardCc | Scheme::Learnable => {
            (cake_cutting_rows(n_r, m_r)?, cake_cutting_rows(n_c, m_c)?)
        }
        Scheme::Custom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = gaussian_rows(n_r, m_r, &mut rng);
            (phi, gaussian_rows(n_c, m_c, &mut rng))
        }
    };
    FactorPair::from_matrices(phi, psi, scheme)
}

fn check_image<T: Real>(pair: &FactorPair<T>, x: ArrayView2<'_, T>) -> Result<()> {
    if x.dim() != pair.image_dim() {
        return Err(shape_err(format!(
            "image is {:?}, factors expect {:?}",
            x.dim(),
            pair.image_dim()
        )));
    }
    Ok(())
}

fn check_measurement<T: Real>(pair: &FactorPair<T>, y: ArrayView2<'_, T>) -> Result<()> {
    if y.dim() != pair.measurement_dim() {
        return Err(shape_err(format!(
            "measurement is {:?}, factors expect {:?}",
            y.dim(),
            pair.measurement_dim()
        )));
    }
    Ok(())
}

/// `Φ X Ψᵀ` on raw arrays.
pub fn apply_forward<T: Real>(pair: &FactorPair<T>, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_image(pair, x)?;
    Ok(pair.phi.dot(&x).dot(&pair.psi.t()))
}

/// `Φᵀ Y Ψ` on raw arrays.
pub fn apply_adjoint<T: Real>(pair: &FactorPair<T>, y: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_measurement(pair, y)?;
    Ok(pair.phi.t().dot(&y).dot(&pair.psi))
}

pub fn forward<T: Real>(pair: &FactorPair<T>, x: &ImagePlane<T>) -> Result<MeasurementPlane<T>> {
    apply_forward(pair, x.view()).map(MeasurementPlane)
}

pub fn adjoint<T: Real>(pair: &FactorPair<T>, y: &MeasurementPlane<T>) -> Result<ImagePlane<T>> {
    apply_adjoint(pair, y.view()).map(ImagePlane)
}

/// Column-stacking vectorisation.
pub fn vec_col<T: Real>(x: ArrayView2<'_, T>) -> Array1<T> {
    x.t().iter().copied().collect()
}

/// Inverse of [`vec_col`].
pub fn unvec_col<T: Real>(v: &Array1<T>, rows: usize, cols: usize) -> Result<Array2<T>> {
    if v.len() != rows * cols {
        return Err(shape_err(format!("{} entries cannot fill {rows}×{cols}", v.len())));
    }
    Ok(Array2::from_shape_fn((rows, cols), |(i, j)| v[j * rows + i]))
}

pub fn kron_expand<T: Real>(pair: &FactorPair<T>) -> Result<Array2<T>> {
    kron_expand_with_limit(pair, KRON_ELEMENT_LIMIT)
}

/// Dense `Ψ ⊗ Φ`, refusing to allocate more than `limit` entries.
pub fn kron_expand_with_limit<T: Real>(pair: &FactorPair<T>, limit: usize) -> Result<Array2<T>> {
    let (m_r, m_c) = pair.measurement_dim();
    let (n_r, n_c) = pair.image_dim();
    let rows = m_r * m_c;
    let cols = n_r * n_c;
    let requested = rows.saturating_mul(cols);
    if requested > limit {
        return Err(crate::Error::TooLarge { requested, limit });
    }
    let mut a = Array2::zeros((rows, cols));
    for j in 0..m_c {
        for l in 0..n_c {
            let s = pair.psi[[j, l]];
            if s == T::zero() {
                continue;
            }
            for i in 0..m_r {
                for k in 0..n_r {
                    a[[j * m_r + i, l * n_r + k]] = s * pair.phi[[i, k]];
                }
            }
        }
    }
    Ok(a)
}

/// Adds i.i.d. `N(0, sigma²)` noise, reproducible under `seed`.
pub fn add_noise<T: Real>(
    y: &MeasurementPlane<T>,
    sigma: f64,
    seed: u64,
) -> Result<MeasurementPlane<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(arg_err(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let noisy = y.data().mapv(|v| v + T::lit(normal.sample(&mut rng)));
    MeasurementPlane::new(noisy)
}
