//! Acceptance suite: one `PASS`/`FAIL` line per criterion on stderr, then a
//! single assertion over all of them.
//!
//! The toy training section trains four small networks and dominates the
//! run time.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use kspi_core::autograd::gradcheck::{by_prefix, check_f32_against_f64};
use kspi_core::autograd::window_attention_forward;
use kspi_core::bench;
use kspi_core::denoiser::{self, DenoiserConfig};
use kspi_core::hatblocks::{self, HatbConfig, SsaGeometry};
use kspi_core::params::ParamStore;
use kspi_core::sensing::{self, FactorPair, ImagePlane, MeasurementPlane, Scheme};
use kspi_core::solvers::{ista_solve, objective, tgd_step, IstaConfig, Prox};
use kspi_core::unfolding::{self, HatnetConfig, ReconstructionLoss, PHI, PSI};
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Toy protocol: K = 3, C = 16 on 64 crops of 64×64 at SR 25 %.
const TOY_EPOCHS_MAIN: usize = 16;
const TOY_EPOCHS_FINETUNE: usize = 4;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    name: &'static str,
    pass: bool,
}

fn report(results: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    let _ = writeln!(
        std::io::stderr(),
        "{} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(Outcome { name, pass });
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        // Box–Muller keeps this independent of the library's samplers.
        let (u, v): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

/// Gives zero-initialised tensors (biases, attention output projections)
/// random values so the checks exercise the paths behind them.
fn fill_zero_tensors(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, v) in store.iter_mut() {
        if v.iter().all(|&x| x == 0.0) {
            v.mapv_inplace(|_| 0.05 * (rng.gen::<f64>() * 2.0 - 1.0));
        }
    }
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Random factor pair with `m ≤ n` on each side, `n ≤ 16`.
fn random_case(rng: &mut ChaCha8Rng) -> (FactorPair<f64>, Array2<f64>, Array2<f64>) {
    let (n_r, n_c) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let (m_r, m_c) = (rng.gen_range(1..=n_r), rng.gen_range(1..=n_c));
    let pair = FactorPair::from_matrices(gaussian(m_r, n_r, rng), gaussian(m_c, n_c, rng), Scheme::Custom).unwrap();
    let x = gaussian(n_r, n_c, rng);
    let y = gaussian(m_r, m_c, rng);
    (pair, x, y)
}

fn kronecker_equivalence(results: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (pair, x, _) = random_case(&mut rng);
        let a = sensing::kron_expand(&pair).unwrap();
        let lhs = sensing::vec_col(sensing::apply_forward(&pair, x.view()).unwrap().view());
        let rhs = a.dot(&sensing::vec_col(x.view()));
        worst = worst.max(lhs.iter().zip(&rhs).fold(0.0, |m, (p, q)| m.max((p - q).abs())));
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        results,
        "kronecker equivalence",
        worst <= 1e-6 && secs < 5.0,
        format!("200 cases, max |vec(ΦXΨᵀ) − (Ψ⊗Φ)vec(X)| = {worst:.2e} (≤ 1e-6), {secs:.2}s (< 5s)"),
    );
}

fn tgd_oracle(results: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (pair, x, y) = random_case(&mut rng);
        let rho = rng.gen_range(0.0..2.0);
        let z = tgd_step(
            &ImagePlane::new(x.clone()).unwrap(),
            &MeasurementPlane::new(y.clone()).unwrap(),
            &pair,
            rho,
        )
        .unwrap();
        let a = sensing::kron_expand(&pair).unwrap();
        let (xv, yv) = (sensing::vec_col(x.view()), sensing::vec_col(y.view()));
        let zv = bench::vectorized_step(&a, &xv, &yv, rho);
        let oracle = sensing::unvec_col(&zv, x.nrows(), x.ncols()).unwrap();
        worst = worst.max(max_abs(z.data(), &oracle));
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        results,
        "tensor gradient step",
        worst <= 1e-6 && secs < 5.0,
        format!("100 cases vs x + ρAᵀ(y − Ax), max diff {worst:.2e} (≤ 1e-6), {secs:.2}s (< 5s)"),
    );
}

fn lossless_full_sampling(results: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for (n_r, n_c) in [(4, 4), (8, 16), (32, 32), (64, 8), (128, 128)] {
        let pair = sensing::build_factor_pair::<f64>(n_r, n_c, n_r, n_c, Scheme::HadamardCc, 0).unwrap();
        let x = ImagePlane::new(Array2::from_shape_fn((n_r, n_c), |_| rng.gen::<f64>())).unwrap();
        let back = sensing::adjoint(&pair, &sensing::forward(&pair, &x).unwrap()).unwrap();
        worst = worst.max(max_abs(back.data(), x.data()));
    }
    report(
        results,
        "lossless full sampling",
        worst <= 1e-5,
        format!("Hadamard SR 1, max |ΦᵀΦXΨᵀΨ − X| = {worst:.2e} (≤ 1e-5)"),
    );
}

fn ista_tv_monotone(results: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let m = sensing::rows_for_ratio(32, 0.25).unwrap();
    let pair = sensing::build_factor_pair::<f64>(32, 32, m, m, Scheme::HadamardCc, 0).unwrap();
    let cfg = IstaConfig {
        rho: 1.0,
        lambda: 0.01,
        max_iters: 100,
        tol: 0.0,
        prox: Prox::Tv,
        ..IstaConfig::default()
    };
    let mut violations = 0;
    let mut iters = 0;
    for _ in 0..5 {
        let x = ImagePlane::new(Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>())).unwrap();
        let y = sensing::forward(&pair, &x).unwrap();
        let (_, trace) = ista_solve(&y, &pair, &cfg).unwrap();
        let mut prev = objective(&sensing::adjoint(&pair, &y).unwrap(), &y, &pair, cfg.lambda, cfg.prox).unwrap();
        for &o in &trace.objective {
            if o > prev + 1e-12 * prev.abs().max(1.0) {
                violations += 1;
            }
            prev = o;
        }
        iters += trace.iterations();
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        results,
        "ISTA-TV monotone",
        violations == 0 && secs < 30.0,
        format!("5 images 32×32 at SR 25 %, {iters} iterations, {violations} increases, {secs:.2}s (< 30s)"),
    );
}

fn gradient_checks(results: &mut Vec<Outcome>) {
    let t = Instant::now();
    let cfg = HatnetConfig {
        stages: 2,
        image: (16, 16),
        learnable_matrices: true,
        denoiser: DenoiserConfig {
            channels: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut p = unfolding::init_params::<f64>(&cfg, 3).unwrap();
    // Orthonormal rows would make the first residual vanish identically;
    // check at a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    fill_zero_tensors(&mut p.store, &mut rng);
    for name in [PHI, PSI] {
        p.store
            .get_mut(name)
            .unwrap()
            .mapv_inplace(|v| v + 0.05 * (rng.gen::<f64>() * 2.0 - 1.0));
    }
    let target = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>());
    let loss = ReconstructionLoss { config: cfg, target };
    let checks = check_f32_against_f64(&p.store, &loss, by_prefix(3), 1).unwrap();
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    let covered = [PHI, PSI, "stage1.rho", "stage2.rho"]
        .iter()
        .all(|g| checks.iter().any(|c| c.group == *g));
    let secs = t.elapsed().as_secs_f64();
    report(
        results,
        "gradient checks",
        worst.rel_err < 1e-3 && covered && secs < 300.0,
        format!(
            "{} groups incl. ρ_k, Φ, Ψ; worst rel. error {:.2e} ({}) (< 1e-3), {secs:.1}s (< 300s)",
            checks.len(),
            worst.rel_err,
            worst.group
        ),
    );
}

fn rand3(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((h, w, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

fn softmax_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let mx = row.fold(f64::MIN, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    a
}

/// Multi-head attention of all `q` rows over all `k`/`v` rows.
fn dense_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Array2<f64> {
    let d = q.ncols() / heads;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for h in 0..heads {
        let cols = s![.., h * d..(h + 1) * d];
        let p = softmax_rows(q.slice(cols).dot(&k.slice(cols).t()) / (d as f64).sqrt());
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
    }
    out
}

fn attention_invariants(results: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(606);

    // Softmax rows of both branches, shifted windows included.
    let mut row_err = 0.0f64;
    let mut rows = 0;
    for shifted in [false, true] {
        let mut cfg = HatbConfig::new(32, 2, (4, 16));
        cfg.shifted = shifted;
        let geo = SsaGeometry::new(16, 32, &cfg).unwrap();
        for spec in [geo.high, geo.low] {
            let (qg, kg) = (spec.q_grid, spec.kv_grid);
            let q = rand3(qg.height, qg.width, 16, &mut rng);
            let k = rand3(kg.height, kg.width, 16, &mut rng).mapv(|v| 4.0 * v);
            let v = rand3(kg.height, kg.width, 16, &mut rng);
            let (_, probs) = window_attention_forward(q.view(), k.view(), v.view(), &spec).unwrap();
            for pm in probs {
                for row in pm.rows() {
                    rows += 1;
                    row_err = row_err.max((row.sum() - 1.0).abs());
                    if row.iter().any(|&p| p < 0.0) {
                        row_err = f64::INFINITY;
                    }
                }
            }
        }
    }

    // One window per branch: a 4×4 plane, 4×4 windows, 2×2 pooling.
    let cfg = HatbConfig::new(8, 2, (4, 4));
    let mut store = ParamStore::<f64>::from_specs(&cfg.specs("b"), &mut rng).unwrap();
    fill_zero_tensors(&mut store, &mut rng);
    let x = rand3(4, 4, 8, &mut rng);
    let out = hatblocks::evaluate(&store, &x, |g, p, x| hatblocks::s_sa(g, p, "b", x, &cfg)).unwrap();
    let w = |n: &str| store.get(n).unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let tokens = x.clone().into_shape_with_order((16, 8)).unwrap();
    let pooled = Array2::from_shape_fn((4, 8), |(t, c)| {
        let (i, j) = (2 * (t / 2), 2 * (t % 2));
        (x[[i, j, c]] + x[[i + 1, j, c]] + x[[i, j + 1, c]] + x[[i + 1, j + 1, c]]) / 4.0
    });
    let high = dense_attention(&tokens.dot(&w("b.ssa.wq_h")), &tokens.dot(&w("b.ssa.wk_h")), &tokens.dot(&w("b.ssa.wv_h")), 2)
        .dot(&w("b.ssa.w_h"));
    let low = dense_attention(&tokens.dot(&w("b.ssa.wq_l")), &pooled.dot(&w("b.ssa.wk_l")), &pooled.dot(&w("b.ssa.wv_l")), 2)
        .dot(&w("b.ssa.w_l"));
    let dense = ndarray::concatenate(Axis(1), &[high.view(), low.view()]).unwrap();
    let got = out.into_shape_with_order((16, 8)).unwrap();
    let oracle_err = max_abs(&got, &dense);

    // Zero weights: a HATB and a whole stage denoiser are identities.
    let mut cfg = HatbConfig::new(16, 1, (4, 16));
    cfg.shifted = true;
    let mut zero = ParamStore::<f64>::from_specs(&cfg.specs("b"), &mut rng).unwrap();
    zero.iter_mut().for_each(|(_, v)| v.fill(0.0));
    let f = rand3(8, 32, 16, &mut rng);
    let hatb_identity = hatblocks::evaluate(&zero, &f, |g, p, x| hatblocks::hatb(g, p, "b", x, &cfg)).unwrap() == f;

    let first = DenoiserConfig {
        channels: 8,
        ..Default::default()
    };
    let next = DenoiserConfig {
        cssc_input: true,
        window: (16, 4),
        ..first
    };
    let mut den_identity = true;
    for dcfg in [first, next] {
        let mut store = ParamStore::<f64>::from_specs(&dcfg.specs("s"), &mut rng).unwrap();
        store.iter_mut().for_each(|(_, v)| v.fill(0.0));
        let z = ImagePlane::new(Array2::from_shape_fn((24, 40), |_| rng.gen::<f64>())).unwrap();
        let feats: Vec<Array3<f64>> = dcfg
            .cssc_shapes(24, 40)
            .iter()
            .map(|s| rand3(s[0], s[1], s[2], &mut rng))
            .collect();
        let cssc = dcfg.cssc_input.then_some(&feats);
        let (out, _) = denoiser::denoise(&store, "s", &z, cssc, &dcfg).unwrap();
        den_identity &= out == z;
    }

    report(
        results,
        "attention invariants",
        row_err <= 1e-6 && oracle_err <= 1e-6 && hatb_identity && den_identity,
        format!(
            "{rows} softmax rows, max |Σ−1| = {row_err:.1e} (≤ 1e-6); single-window S-SA vs dense oracle {oracle_err:.1e} (≤ 1e-6); \
             zero HATB identity: {hatb_identity}; zero stage denoiser identity: {den_identity}"
        ),
    );
}

fn complexity(results: &mut Vec<Outcome>) {
    let flops = bench::flops_estimate(256, 0.25).unwrap();
    let exact = flops == (12_582_912.0, 1_073_741_824.0);
    let r = bench::time_gradient_step(64, 0.25, 5, 0, bench::DEFAULT_MEMORY_CAP).unwrap();
    let (k, v) = (r.kron.seconds.unwrap_or(f64::NAN), r.vec.seconds.unwrap_or(f64::NAN));
    report(
        results,
        "complexity benchmark",
        exact && k < v,
        format!(
            "flops(256, 0.25) = ({}, {}); N = 64, α = 0.25 step time kron {k:.2e}s vs vec {v:.2e}s",
            flops.0, flops.1
        ),
    );
}

// ---- command line ----

fn kspi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kspi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn kspi")
}

/// Runs a subcommand; `Err` carries its diagnostic.
fn run(args: &[&str]) -> Result<Output, String> {
    let out = kspi(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("kspi {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_config(data: &Path, overrides: Value) -> Value {
    let mut cfg = json!({
        "data_dir": data,
        "crop": 64,
        "dataset_size": 64,
        "val_images": 4,
        "epochs_main": TOY_EPOCHS_MAIN,
        "lr_main": 3e-3,
        "epochs_finetune": TOY_EPOCHS_FINETUNE,
        "lr_finetune": 3e-4,
        "batch_size": 4,
        "max_train_seconds": TOY_BUDGET.as_secs_f64(),
        "sr": 0.25,
        "seed": 7,
        "stages": 3,
        "channels": 16,
    });
    for (k, v) in overrides.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    cfg
}

/// Mean PSNR per method from an eval report.
fn mean_psnr(report: &Path) -> Result<Vec<(String, f64)>, String> {
    let text = std::fs::read_to_string(report).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&text).map_err(|e| format!("unparseable report: {e}"))?;
    v["methods"]
        .as_array()
        .ok_or("report has no methods")?
        .iter()
        .map(|m| {
            let psnr = match &m["mean_psnr"] {
                Value::String(s) if s == "inf" => f64::INFINITY,
                other => other.as_f64().ok_or("non-numeric PSNR")?,
            };
            Ok((m["method"].as_str().ok_or("unnamed method")?.to_string(), psnr))
        })
        .collect()
}

fn psnr_of(rows: &[(String, f64)], method: &str) -> f64 {
    rows.iter().find(|(m, _)| m == method).map_or(f64::NAN, |r| r.1)
}

fn format_closure(results: &mut Vec<Outcome>, root: &Path) {
    let attempt = || -> Result<String, String> {
        let d = root.join("closure");
        std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
        run(&["synth", "--out", p(&d.join("train")), "--count", "6", "--size", "24", "--seed", "3"])?;
        run(&["synth", "--out", p(&d.join("test")), "--count", "2", "--size", "16", "--seed", "4"])?;
        let cfg = json!({
            "data_dir": d.join("train"), "crop": 16, "dataset_size": 4, "val_images": 2,
            "epochs_main": 1, "epochs_finetune": 0, "batch_size": 2, "sr": 0.25,
            "stages": 1, "channels": 8, "window_h": 4, "window_w": 4, "ista_lambdas": [0.01], "ista_iters": 5,
        });
        let cfg_path = d.join("run.json");
        std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
        run(&["train", "--config", p(&cfg_path), "--out", p(&d.join("model"))])?;
        run(&["matrices", "--n", "16", "--sr", "0.25", "--scheme", "hadamard_cc", "--out", p(&d.join("m"))])?;
        let img = d.join("test").join("synth_0000.png");
        run(&["simulate", "--image", p(&img), "--matrices", p(&d.join("m")), "--noise-sigma", "0.01", "--seed", "5", "--out", p(&d.join("y.ksp"))])?;
        for method in ["adjoint", "ista-tv", "hatnet"] {
            let out = d.join(format!("x_{method}.png"));
            run(&[
                "reconstruct", "--method", method, "--checkpoint", p(&d.join("model")),
                "--measurement", p(&d.join("y.ksp")), "--matrices", p(&d.join("m")), "--out", p(&out),
            ])?;
            if !out.exists() || !out.with_extension("ksp").exists() {
                return Err(format!("{method} reconstruction not written"));
            }
        }
        let report = d.join("eval.json");
        run(&["eval", "--checkpoint", p(&d.join("model")), "--test-dir", p(&d.join("test")), "--sr", "0.25", "--report", p(&report), "--ista-iters", "5"])?;
        let rows = mean_psnr(&report)?;
        if rows.len() != 3 || rows.iter().any(|(_, v)| v.is_nan()) {
            return Err(format!("unexpected report rows {rows:?}"));
        }
        Ok(format!("train → matrices → simulate → reconstruct (3 methods) → eval, report rows {rows:?}"))
    };
    match attempt() {
        Ok(detail) => report(results, "format closure", true, detail),
        Err(e) => report(results, "format closure", false, e),
    }
}

struct ToyRun {
    psnr: Vec<(String, f64)>,
    seconds: f64,
}

fn train_and_eval(root: &Path, name: &str, toggle: Option<&str>) -> Result<ToyRun, String> {
    let cfg_path = root.join("toy.json");
    let out = root.join(name);
    let t = Instant::now();
    match toggle {
        None => run(&["train", "--config", p(&cfg_path), "--out", p(&out)])?,
        Some(tg) => run(&["ablate", "--config", p(&cfg_path), "--toggle", tg, "--out", p(&out)])?,
    };
    let seconds = t.elapsed().as_secs_f64();
    let report = root.join(format!("{name}_eval.json"));
    run(&["eval", "--checkpoint", p(&out), "--test-dir", p(&root.join("test")), "--sr", "0.25", "--report", p(&report)])?;
    Ok(ToyRun {
        psnr: mean_psnr(&report)?,
        seconds,
    })
}

fn toy_training(results: &mut Vec<Outcome>, root: &Path) {
    let prepared = (|| -> Result<(), String> {
        run(&["synth", "--out", p(&root.join("train")), "--count", "24", "--size", "96", "--seed", "1"])?;
        run(&["synth", "--out", p(&root.join("test")), "--count", "8", "--size", "64", "--seed", "2"])?;
        let cfg = toy_config(&root.join("train"), json!({}));
        std::fs::write(root.join("toy.json"), cfg.to_string()).map_err(|e| e.to_string())
    })();
    if let Err(e) = prepared {
        report(results, "toy training uplift", false, e.clone());
        report(results, "ablation direction", false, e);
        return;
    }

    let full = match train_and_eval(root, "full", None) {
        Ok(r) => r,
        Err(e) => {
            report(results, "toy training uplift", false, e.clone());
            report(results, "ablation direction", false, e);
            return;
        }
    };
    let (net, adj, ista) = (
        psnr_of(&full.psnr, "hatnet"),
        psnr_of(&full.psnr, "adjoint"),
        psnr_of(&full.psnr, "ista-tv"),
    );
    report(
        results,
        "toy training uplift",
        net - adj >= 3.0 && net - ista >= 1.0 && full.seconds <= TOY_BUDGET.as_secs_f64(),
        format!(
            "HATNet {net:.2} dB, adjoint {adj:.2} dB (+{:.2}, need ≥ 3), ISTA-TV {ista:.2} dB (+{:.2}, need ≥ 1), trained in {:.0}s",
            net - adj,
            net - ista,
            full.seconds
        ),
    );

    let mut pass = true;
    let mut parts = vec![format!("full {net:.2} dB")];
    for toggle in ["cssc", "hf", "lf"] {
        match train_and_eval(root, &format!("no_{toggle}"), Some(toggle)) {
            Ok(r) => {
                let v = psnr_of(&r.psnr, "hatnet");
                pass &= v < net;
                parts.push(format!("no {toggle} {v:.2} dB ({:+.2})", v - net));
            }
            Err(e) => {
                pass = false;
                parts.push(e);
            }
        }
    }
    report(results, "ablation direction", pass, parts.join(", "));
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    kronecker_equivalence(&mut results);
    tgd_oracle(&mut results);
    lossless_full_sampling(&mut results);
    ista_tv_monotone(&mut results);
    gradient_checks(&mut results);
    attention_invariants(&mut results);
    complexity(&mut results);
    let dir = tempfile::tempdir().unwrap();
    format_closure(&mut results, dir.path());
    toy_training(&mut results, dir.path());

    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    let _ = writeln!(
        std::io::stderr(),
        "{} of {} acceptance criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    assert!(failed.is_empty(), "failed: {failed:?}");
}
