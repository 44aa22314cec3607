//! Kronecker versus vectorised gradient step: operation counts, wall time
//! and memory.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::arg_err;
use crate::sensing::{self, FactorPair, ImagePlane, MeasurementPlane, Scheme};
use crate::solvers::tgd_step;
use crate::Result;

/// Default cap on the dense `Ψ ⊗ Φ` (bytes).
pub const DEFAULT_MEMORY_CAP: usize = 1 << 30;
/// Largest allowed difference between the two steps before timing.
pub const AGREEMENT_TOL: f64 = 1e-5;

/// Leading-order multiply counts `((√α + α)·N³, α·N⁴)` of one gradient step
/// in Kronecker and vectorised form.
pub fn flops_estimate(n: usize, alpha: f64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(arg_err(format!("N must be ≥ 2, got {n}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(arg_err(format!("α must lie in (0, 1], got {alpha}")));
    }
    let n = n as f64;
    Ok(((alpha.sqrt() + alpha) * n.powi(3), alpha * n.powi(4)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub model_flops: f64,
    /// Median of `samples`.
    pub seconds: Option<f64>,
    pub samples: Vec<f64>,
    /// Bytes of the tensors alive during one step.
    pub analytic_bytes: u64,
    /// Peak resident-set growth while preparing and running the step, where
    /// the platform reports it.
    pub measured_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub alpha: f64,
    /// Factor rows `m`; the measurement is `m × m`.
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
    pub kron: MethodTiming,
    pub vec: MethodTiming,
    /// Largest entrywise difference of the two steps (when both ran).
    pub max_abs_diff: Option<f64>,
    pub note: Option<String>,
}

/// Lower median: an actual sample, not an interpolation.
pub fn median(samples: &[f64]) -> Option<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s.get(s.len().saturating_sub(1) / 2).copied().filter(|_| !s.is_empty())
}

/// Identical random inputs for both forms: Gaussian factors, image and
/// measurement, all determined by `seed`.
pub fn bench_inputs(n: usize, alpha: f64, seed: u64) -> Result<(FactorPair<f64>, ImagePlane<f64>, MeasurementPlane<f64>)> {
    let m = sensing::rows_for_ratio(n, alpha)?;
    let pair = sensing::build_factor_pair::<f64>(n, n, m, m, Scheme::Custom, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = ImagePlane::new(Array2::from_shape_fn((n, n), |_| rng.gen::<f64>()))?;
    let y = MeasurementPlane::new(Array2::from_shape_fn((m, m), |_| rng.gen::<f64>()))?;
    Ok((pair, x, y))
}

/// `x + ρ Aᵀ(y − A x)` on column-stacked vectors.
pub fn vectorized_step(a: &Array2<f64>, x: &Array1<f64>, y: &Array1<f64>, rho: f64) -> Array1<f64> {
    let r = y - &a.dot(x);
    x + &(a.t().dot(&r) * rho)
}

mod rss {
    //! Linux peak-RSS probe via `/proc/self`.

    fn status_kb(key: &str) -> Option<u64> {
        let s = std::fs::read_to_string("/proc/self/status").ok()?;
        s.lines()
            .find(|l| l.starts_with(key))?
            .split_whitespace()
            .nth(1)?
            .parse()
            .ok()
    }

    /// Resets the high-water mark to the current RSS; returns the RSS.
    pub fn reset_peak() -> Option<u64> {
        std::fs::write("/proc/self/clear_refs", "5").ok()?;
        status_kb("VmRSS:").map(|kb| kb * 1024)
    }

    pub fn peak() -> Option<u64> {
        status_kb("VmHWM:").map(|kb| kb * 1024)
    }
}

fn measured<R>(f: impl FnOnce() -> R) -> (R, Option<u64>) {
    let base = rss::reset_peak();
    let out = f();
    let delta = base.zip(rss::peak()).map(|(b, p)| p.saturating_sub(b));
    (out, delta)
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect()
}

/// Times the Kronecker step and, if `Ψ ⊗ Φ` fits in `memory_cap` bytes, the
/// vectorised one; both are checked to agree before timing starts.
pub fn time_gradient_step(n: usize, alpha: f64, reps: usize, seed: u64, memory_cap: usize) -> Result<BenchReport> {
    if reps < 3 {
        return Err(arg_err(format!("at least 3 repetitions are needed, got {reps}")));
    }
    let (kron_flops, vec_flops) = flops_estimate(n, alpha)?;
    let (pair, x, y) = bench_inputs(n, alpha, seed)?;
    let m = pair.measurement_dim().0;
    let rho = 1.0;
    let f64_bytes = std::mem::size_of::<f64>() as u64;
    let (nn, mm) = (n as u64, m as u64);
    // Φ, Ψ, X, Y, ΦX, ΦXΨᵀ, residual, Φᵀr, Z
    let kron_bytes = f64_bytes * (2 * mm * nn + nn * nn + mm * mm + mm * nn + 2 * mm * mm + nn * mm + nn * nn);
    // A, x, y, Ax, residual, Aᵀr, z
    let vec_bytes = f64_bytes * (mm * mm * nn * nn + 2 * nn * nn + 3 * mm * mm + nn * nn);

    let kron_ref = tgd_step(&x, &y, &pair, rho)?;
    let (kron_samples, kron_rss) = measured(|| {
        time_reps(reps, || {
            std::hint::black_box(tgd_step(&x, &y, &pair, rho).expect("shapes checked"));
        })
    });

    let a_bytes = (mm * mm * nn * nn).saturating_mul(f64_bytes);
    let mut note = None;
    let mut max_abs_diff = None;
    let (vec_samples, vec_rss) = if a_bytes as usize > memory_cap {
        note = Some(format!(
            "vectorised step skipped: Ψ⊗Φ needs {a_bytes} bytes, cap is {memory_cap}"
        ));
        (Vec::new(), None)
    } else {
        let (result, rss) = measured(|| -> Result<(Vec<f64>, f64)> {
            let a = sensing::kron_expand_with_limit(&pair, usize::MAX)?;
            let xv = sensing::vec_col(x.view());
            let yv = sensing::vec_col(y.view());
            let z = sensing::unvec_col(&vectorized_step(&a, &xv, &yv, rho), n, n)?;
            let diff = (&z - kron_ref.data()).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if diff > AGREEMENT_TOL {
                return Err(arg_err(format!("gradient steps disagree by {diff}")));
            }
            let samples = time_reps(reps, || {
                std::hint::black_box(vectorized_step(&a, &xv, &yv, rho));
            });
            Ok((samples, diff))
        });
        let (samples, diff) = result?;
        max_abs_diff = Some(diff);
        (samples, rss)
    };

    Ok(BenchReport {
        n,
        alpha,
        m,
        reps,
        seed,
        kron: MethodTiming {
            model_flops: kron_flops,
            seconds: median(&kron_samples),
            samples: kron_samples,
            analytic_bytes: kron_bytes,
            measured_bytes: kron_rss,
        },
        vec: MethodTiming {
            model_flops: vec_flops,
            seconds: median(&vec_samples),
            samples: vec_samples,
            analytic_bytes: vec_bytes,
            measured_bytes: vec_rss,
        },
        max_abs_diff,
        note,
    })
}

impl BenchReport {
    /// Text table with one row per quantity and one column per form.
    pub fn render(&self) -> String {
        let secs = |t: &MethodTiming| t.seconds.map_or("skipped".to_string(), |s| format!("{s:.3e}"));
        let mb = |b: u64| format!("{:.3}", b as f64 / (1024.0 * 1024.0));
        let measured = |t: &MethodTiming| t.measured_bytes.map_or("n/a".to_string(), mb);
        let mut s = format!("N = {}, α = {}, m = {}, {} repetitions\n", self.n, self.alpha, self.m, self.reps);
        s += &format!("{:<22} {:>16} {:>16}\n", "", "Kronecker SPI", "Vectorized SPI");
        s += &format!("{:<22} {:>16.6e} {:>16.6e}\n", "Complexity (mults)", self.kron.model_flops, self.vec.model_flops);
        s += &format!("{:<22} {:>16} {:>16}\n", "Memory, analytic (MB)", mb(self.kron.analytic_bytes), mb(self.vec.analytic_bytes));
        s += &format!("{:<22} {:>16} {:>16}\n", "Memory, RSS peak (MB)", measured(&self.kron), measured(&self.vec));
        s += &format!("{:<22} {:>16} {:>16}\n", "Step time (s)", secs(&self.kron), secs(&self.vec));
        if let Some(note) = &self.note {
            s += note;
            s.push('\n');
        }
        s
    }
}
