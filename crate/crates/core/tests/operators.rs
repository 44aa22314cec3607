use kspi_core::sensing::{self, FactorPair, ImagePlane, MeasurementPlane, Scheme};
use kspi_core::solvers::tgd_step;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Random factors and image for `n_r × n_c` images, `m_r × m_c` measurements.
fn instance(dims: (usize, usize, usize, usize), seed: u64) -> (FactorPair<f64>, Array2<f64>) {
    let (n_r, n_c, m_r, m_c) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = random(m_r, n_r, &mut rng);
    let psi = random(m_c, n_c, &mut rng);
    let x = random(n_r, n_c, &mut rng);
    (FactorPair::from_matrices(phi, psi, Scheme::Custom).unwrap(), x)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(n_r, n_c)| (Just(n_r), Just(n_c), 1..=n_r, 1..=n_c))
}

fn max_abs(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #[test]
    fn factored_forward_matches_kronecker(d in dims(), seed in any::<u64>()) {
        let (pair, x) = instance(d, seed);
        let a = sensing::kron_expand(&pair).unwrap();
        let lhs = sensing::vec_col(sensing::apply_forward(&pair, x.view()).unwrap().view());
        let rhs = a.dot(&sensing::vec_col(x.view()));
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn adjoint_is_the_transpose(d in dims(), seed in any::<u64>()) {
        let (pair, x) = instance(d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let y = random(d.2, d.3, &mut rng);
        let ax = sensing::apply_forward(&pair, x.view()).unwrap();
        let aty = sensing::apply_adjoint(&pair, y.view()).unwrap();
        let lhs = (&ax * &y).sum();
        let rhs = (&x * &aty).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn tensor_step_matches_vectorised_step(d in dims(), seed in any::<u64>(), rho in 0.0f64..2.0) {
        let (pair, x) = instance(d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let y = random(d.2, d.3, &mut rng);
        let z = tgd_step(
            &ImagePlane::new(x.clone()).unwrap(),
            &MeasurementPlane::new(y.clone()).unwrap(),
            &pair,
            rho,
        )
        .unwrap();
        let a = sensing::kron_expand(&pair).unwrap();
        let xv = sensing::vec_col(x.view());
        let r = sensing::vec_col(y.view()) - a.dot(&xv);
        let zv = &xv + &(a.t().dot(&r) * rho);
        prop_assert!(max_abs(&sensing::vec_col(z.view()), &zv) <= 1e-9);
    }

    #[test]
    fn vec_roundtrip(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let x = random(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(sensing::unvec_col(&sensing::vec_col(x.view()), rows, cols).unwrap(), x);
    }

    #[test]
    fn square_hadamard_factors_are_lossless(log_r in 0u32..6, log_c in 0u32..6, seed in any::<u64>()) {
        let (n_r, n_c) = (1usize << log_r, 1usize << log_c);
        let pair = sensing::build_factor_pair::<f64>(n_r, n_c, n_r, n_c, Scheme::HadamardCc, 0).unwrap();
        let x = ImagePlane::new(random(n_r, n_c, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let back = sensing::adjoint(&pair, &sensing::forward(&pair, &x).unwrap()).unwrap();
        let err = (back.data() - x.data()).mapv(|v| v * v).sum().sqrt();
        prop_assert!(err <= 1e-12 * (1.0 + x.data().mapv(|v| v * v).sum().sqrt()));
    }

    #[test]
    fn cake_cutting_rows_are_orthonormal(log_n in 1u32..7, sr in 0.01f64..=1.0) {
        let n = 1usize << log_n;
        let m = sensing::rows_for_ratio(n, sr).unwrap();
        let pair = sensing::build_factor_pair::<f64>(n, n, m, m, Scheme::HadamardCc, 0).unwrap();
        let gram = pair.phi.dot(&pair.phi.t());
        let eye = Array2::<f64>::eye(m);
        prop_assert!((gram - eye).iter().all(|v| v.abs() < 1e-12));
    }
}
