//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use inrank_core::data::{linear_spectrum, make_blobs, make_teacher_student, Dataset};
use inrank_core::glrl::{eckart_young_loss, glrl_train, GlrlConfig, SquaredTarget};
use inrank_core::init::{init_weights, InitScheme};
use inrank_core::inrank::{fuse_layer, InRankConfig};
use inrank_core::linalg::{singular_values, svd, thin_svd_of_product};
use inrank_core::matrix::{matmul, matmul_tn, Matrix};
use inrank_core::net::{
    build_deep_linear, build_mlp, loss_and_grad, Activation, FactorizedLayer, Layer,
    LossKind, Model,
};
use inrank_core::optim::Hyper;
use inrank_core::spectrum::{explained_ratio, VariationMeasure};
use inrank_core::theory::{
    sample_u0, simulate_discrete_training, simulate_gradient_flow, suggested_horizon,
    verify_trajectory, FlowConfig, Integrator, ModeSpec, TimeMap,
};
use inrank_core::train::{train, NullObserver, TrainConfig};
use inrank_core::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_fro(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

fn orthonormality_error(q: &Matrix) -> f64 {
    let g = matmul_tn(q, q).unwrap();
    g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
}

fn criterion_1() -> Outcome {
    let mut rng = Rng::new(1).substream_named("shapes");
    let mut recon = 0.0f64;
    let mut ortho = 0.0f64;
    let mut thin = 0.0f64;
    for _ in 0..50 {
        let rows = 1 + rng.index(128);
        let cols = 1 + rng.index(96);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gaussian());
        let k = rows.min(cols);
        let d = svd(&m, k).unwrap();
        recon = recon.max(rel_fro(&d.reconstruct(), &m));
        ortho = ortho.max(orthonormality_error(&d.u)).max(orthonormality_error(&d.v));

        let w = 1 + rng.index(k.min(24));
        let u = Matrix::from_fn(rows, w, |_, _| rng.gaussian());
        let v = Matrix::from_fn(w, cols, |_, _| rng.gaussian());
        let fast = thin_svd_of_product(&u, &v, w).unwrap();
        let dense = singular_values(&matmul(&u, &v).unwrap()).unwrap();
        for (a, b) in fast.s.iter().zip(&dense) {
            thin = thin.max((a - b).abs() / dense[0]);
        }
    }
    outcome(
        recon <= 1e-10 && ortho <= 1e-10 && thin <= 1e-9,
        format!("reconstruction {recon:.2e}, orthonormality {ortho:.2e}, thin-vs-dense {thin:.2e}"),
    )
}

fn flat_grad(model: &Model, x: &Matrix, t: &Matrix) -> Vec<f64> {
    let (_, g) = loss_and_grad(model, x, t).unwrap();
    g.layers
        .iter()
        .flat_map(|l| l.tensors().into_iter().flat_map(|m| m.as_slice().to_vec()).collect::<Vec<_>>())
        .collect()
}

fn fd_grad(model: &Model, x: &Matrix, t: &Matrix) -> Vec<f64> {
    let h = 1e-6;
    let mut out = Vec::new();
    let mut probe = model.clone();
    for li in 0..model.layers.len() {
        let n_params = model.layers[li].params().len();
        for pi in 0..n_params {
            let len = model.layers[li].params()[pi].as_slice().len();
            for k in 0..len {
                let orig = model.layers[li].params()[pi].as_slice()[k];
                probe.layers[li].params_mut()[pi].as_mut_slice()[k] = orig + h;
                let up = loss_and_grad(&probe, x, t).unwrap().0;
                probe.layers[li].params_mut()[pi].as_mut_slice()[k] = orig - h;
                let down = loss_and_grad(&probe, x, t).unwrap().0;
                probe.layers[li].params_mut()[pi].as_mut_slice()[k] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    out
}

fn gradient_model(seed: u64, act: Activation, loss: LossKind, factorized: bool) -> Model {
    let rng = Rng::new(seed);
    let dims = [5, 7, 6, 3];
    let mut model = build_mlp(&dims, act, InitScheme::KaimingUniform, loss, &rng).unwrap();
    if factorized {
        let mut r = rng.substream_named("factors");
        let w0 = init_weights(6, 7, InitScheme::Gaussian(0.3), &mut r).unwrap();
        let u = init_weights(6, 3, InitScheme::Gaussian(0.5), &mut r).unwrap();
        let v = init_weights(3, 7, InitScheme::Gaussian(0.5), &mut r).unwrap();
        let mut f = FactorizedLayer::new(w0, 2, 1, Some(Matrix::zeros(6, 1)), act).unwrap();
        f.set_factors(u, v, None).unwrap();
        model.layers[1] = Layer::Factorized(f);
        let u2 = init_weights(3, 2, InitScheme::Gaussian(0.5), &mut r).unwrap();
        let v2 = init_weights(2, 6, InitScheme::Gaussian(0.5), &mut r).unwrap();
        let top = FactorizedLayer::without_base(u2, v2, 2, Some(Matrix::zeros(3, 1)), Activation::Linear)
            .unwrap();
        model.layers[2] = Layer::Factorized(top);
    }
    // nonzero biases so they are actually exercised
    let mut br = rng.substream_named("bias");
    for layer in &mut model.layers {
        if let Some(b) = layer.params_mut().into_iter().last() {
            if b.cols() == 1 {
                for v in b.as_mut_slice() {
                    *v = 0.1 * br.gaussian();
                }
            }
        }
    }
    model
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..20u64 {
        for act in [Activation::Linear, Activation::Relu, Activation::Tanh] {
            for loss in [LossKind::Squared, LossKind::CrossEntropy] {
                for factorized in [false, true] {
                    let model = gradient_model(seed, act, loss, factorized);
                    let mut r = Rng::new(seed).substream_named("batch");
                    let x = Matrix::from_fn(5, 8, |_, _| r.gaussian());
                    let t = match loss {
                        LossKind::Squared => Matrix::from_fn(3, 8, |_, _| r.gaussian()),
                        LossKind::CrossEntropy => {
                            Matrix::from_fn(3, 8, |i, j| if i == (j + seed as usize) % 3 { 1.0 } else { 0.0 })
                        }
                    };
                    let a = flat_grad(&model, &x, &t);
                    let n = fd_grad(&model, &x, &t);
                    let diff: f64 = a.iter().zip(&n).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                    let scale = a.iter().map(|p| p * p).sum::<f64>().sqrt().max(
                        n.iter().map(|q| q * q).sum::<f64>().sqrt(),
                    );
                    worst = worst.max(diff / scale.max(1e-12));
                    cases += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-6, format!("{cases} cases, worst relative error {worst:.2e}"))
}

fn flow_cfg(modes: &[ModeSpec], dt: f64, horizon: f64, integrator: Integrator) -> FlowConfig {
    let n = modes.len();
    let steps = (horizon / dt).ceil() as usize;
    FlowConfig {
        nx: n,
        ny: n,
        nh: n,
        spectrum: modes.iter().map(|m| m.s).collect(),
        u0: modes.iter().map(|m| m.u0).collect(),
        mixing: None,
        dt,
        steps,
        sample_every: (steps / 400).max(1),
        integrator,
        seed: 7,
    }
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, a) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let s = linear_spectrum(a, 10);
        let u0 = sample_u0(0.05, 10, &mut Rng::new(k as u64).substream_named("u0"));
        let modes: Vec<ModeSpec> = s.iter().zip(&u0).map(|(&s, &u)| ModeSpec::new(s, u, 1.0).unwrap()).collect();
        let horizon = suggested_horizon(&modes);
        let dt = 0.01 / (10.0 * a);
        let flow = simulate_gradient_flow(&flow_cfg(&modes, dt, horizon, Integrator::Rk4)).unwrap();
        let fe = verify_trajectory(&flow.spectra, 0, &modes, TimeMap { scale: dt }).unwrap().worst();
        let eta = 1e-3;
        let sgd = simulate_discrete_training(&flow_cfg(&modes, eta, horizon, Integrator::Euler)).unwrap();
        let se = verify_trajectory(&sgd.spectra, 0, &modes, TimeMap { scale: eta }).unwrap().worst();
        let half = simulate_discrete_training(&flow_cfg(&modes, eta / 2.0, horizon, Integrator::Euler)).unwrap();
        let he = verify_trajectory(&half.spectra, 0, &modes, TimeMap { scale: eta / 2.0 }).unwrap().worst();
        pass &= fe <= 0.02 && se <= 0.05 && he < se;
        parts.push(format!("a={a}: flow {fe:.1e}, sgd {se:.2e}, sgd/2 {he:.2e}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4() -> Outcome {
    // equal u0 isolates the dependence on s; consecutive values differ by 25%
    let s: Vec<f64> = (0..6).map(|i| 0.5 * 1.25f64.powi(i)).collect();
    let modes: Vec<ModeSpec> = s.iter().map(|&s| ModeSpec::new(s, 1e-3, 1.0).unwrap()).collect();
    let horizon = suggested_horizon(&modes);
    let dt = 0.01 / s[5];
    let flow = simulate_gradient_flow(&flow_cfg(&modes, dt, horizon, Integrator::Rk4)).unwrap();
    let t: Vec<Option<f64>> = flow.half_rise_times(&modes);
    let all = t.iter().all(Option::is_some);
    let ordered = all && t.windows(2).all(|w| w[1].unwrap() < w[0].unwrap());
    let shown: Vec<String> = t.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.2}"))).collect();
    outcome(ordered, format!("half-rise times for increasing s: [{}]", shown.join(", ")))
}

fn planted_target(n: usize, s: &[f64], seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let u = inrank_core::linalg::random_orthogonal(n, &mut rng);
    let v = inrank_core::linalg::random_orthogonal(n, &mut rng);
    let d = Matrix::diag(n, n, s);
    matmul(&matmul(&u, &d).unwrap(), &v.transpose()).unwrap()
}

fn criterion_5() -> Outcome {
    let s = [3.0, 2.0, 1.0];
    let cost = SquaredTarget::new(planted_target(20, &s, 5));
    let cfg = GlrlConfig { depth: 3, eps: 1e-4, ..Default::default() };
    let out = glrl_train(&cost, &cfg).unwrap();
    let mut worst = 0.0f64;
    for p in &out.plateaus {
        let bound = eckart_young_loss(&s, p.width);
        if bound > 0.0 {
            worst = worst.max((p.loss - bound).abs() / bound);
        }
    }
    outcome(
        out.converged && out.final_width() == 3 && worst <= 0.05,
        format!(
            "final width {}, staircase {:?}, worst plateau error {worst:.2e}",
            out.final_width(),
            out.staircase()
        ),
    )
}

fn teacher_student(seed: u64) -> Dataset {
    make_teacher_student(64, 64, 8, 1024, 0.1, &Rng::new(seed)).unwrap()
}

fn ts_train_config() -> TrainConfig {
    TrainConfig { epochs: 200, batch_size: 0, metrics_every: 1_000_000, ..Default::default() }
}

fn ts_inrank() -> InRankConfig {
    InRankConfig { initial_rank: 2, buffer: 8, threshold: 0.95, check_interval: 1, ..Default::default() }
}

/// InRank on the teacher-student task; returns the final rank and loss.
fn inrank_run(seed: u64, data: &Dataset) -> (usize, f64) {
    let rng = Rng::new(seed);
    let mut m = build_deep_linear(&[64, 64], InitScheme::Zeros, &rng).unwrap();
    m.factorize_layer(0, 2, 8).unwrap();
    let rep = train(&mut m, data, Hyper::sgd(5e-4), &ts_train_config(), Some(&ts_inrank()), &rng, &mut NullObserver)
        .unwrap();
    (m.layers[0].as_factorized().unwrap().rank(), rep.final_loss)
}

fn criterion_6() -> Outcome {
    let data = teacher_student(0);
    let (rank, loss) = inrank_run(0, &data);
    let rng = Rng::new(0);
    let mut dense = build_deep_linear(&[64, 64], InitScheme::Zeros, &rng).unwrap();
    let base = train(&mut dense, &data, Hyper::sgd(5e-4), &ts_train_config(), None, &rng, &mut NullObserver)
        .unwrap()
        .final_loss;
    let ratio = loss / base;
    outcome(
        (8..=16).contains(&rank) && ratio <= 1.10,
        format!("active rank {rank}, loss ratio to dense {ratio:.4}"),
    )
}

fn criterion_7() -> Outcome {
    let ss = VariationMeasure::SumOfSquares;
    let full = explained_ratio(&[5.0, 2.0, 1.0, 0.0, 0.0], 3, 2, ss).unwrap();
    let worked = explained_ratio(&[4.0, 3.0, 2.0, 1.0], 1, 3, ss).unwrap();
    let expected = 1.0 - 14.0 / 30.0;
    let s = [6.0, 3.0, 2.5, 1.0, 0.5];
    let window = s.len() + 2;
    let g: Vec<f64> = (0..window)
        .map(|r| explained_ratio(&s, r, window - r, ss).unwrap())
        .collect();
    let monotone = g.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        full == 1.0 && (worked - expected).abs() <= 1e-15 && monotone,
        format!("g at full rank {full}, worked value {worked:.15} (expected {expected:.15}), monotone {monotone}"),
    )
}

fn criterion_8() -> Outcome {
    // Eckart-Young identity of the fused factors
    let mut r = Rng::new(8);
    let w0 = init_weights(40, 30, InitScheme::Gaussian(0.2), &mut r).unwrap();
    let u = init_weights(40, 6, InitScheme::Gaussian(0.5), &mut r).unwrap();
    let v = init_weights(6, 30, InitScheme::Gaussian(0.5), &mut r).unwrap();
    let mut layer = FactorizedLayer::new(w0, 4, 2, None, Activation::Linear).unwrap();
    layer.set_factors(u, v, None).unwrap();
    let w = layer.effective_weight();
    let s = singular_values(&w).unwrap();
    let mut ey = 0.0f64;
    for r_star in [1, 5, 12] {
        let fused = fuse_layer(&layer, r_star).unwrap();
        let err = fused.effective_weight().sub(&w).unwrap();
        let got = err.dot(&err);
        let want: f64 = s[r_star..].iter().map(|x| x * x).sum();
        ey = ey.max((got - want).abs() / want);
    }

    // end-to-end blobs classification
    let rng = Rng::new(8);
    let data = make_blobs(5, 20, 80, 3.0, 1.0, &rng.substream_named("task")).unwrap();
    let dims = [20, 64, 64, 5];
    let hyper = Hyper::sgd(0.05);
    let tc = TrainConfig { epochs: 30, batch_size: 32, metrics_every: 10, ..Default::default() };
    let model_rng = rng.substream_named("model");
    let mut dense = build_mlp(&dims, Activation::Relu, InitScheme::KaimingUniform, LossKind::CrossEntropy, &model_rng)
        .unwrap();
    train(&mut dense, &data, hyper, &tc, None, &rng.substream_named("train"), &mut NullObserver).unwrap();
    let dense_acc = inrank_core::train::evaluate(&dense, &data).unwrap().1.unwrap();

    let mut fact = build_mlp(&dims, Activation::Relu, InitScheme::KaimingUniform, LossKind::CrossEntropy, &model_rng)
        .unwrap();
    let cfg = InRankConfig {
        initial_rank: 2,
        buffer: 8,
        threshold: 0.95,
        check_interval: 10,
        efficient: true,
        fuse_after: 100,
        ..Default::default()
    };
    for idx in 0..2 {
        let (r0, b) = cfg.layer_widths(64, dims[idx]);
        fact.factorize_layer(idx, r0, b).unwrap();
    }
    let rep = train(&mut fact, &data, hyper, &tc, Some(&cfg), &rng.substream_named("train"), &mut NullObserver)
        .unwrap();
    let acc = inrank_core::train::evaluate(&fact, &data).unwrap().1.unwrap();
    let fused_at = rep.fused_at.unwrap_or(u64::MAX);
    let after: Vec<&Vec<usize>> = rep.metrics.iter().filter(|m| m.iteration >= fused_at).map(|m| &m.ranks).collect();
    let constant = after.len() >= 2 && after.windows(2).all(|w| w[0][..2] == w[1][..2]);
    let gap = (dense_acc - acc) * 100.0;
    outcome(
        ey <= 1e-8 && constant && gap <= 2.0,
        format!(
            "EY error {ey:.2e}, ranks after fusion at {fused_at} {:?} constant {constant}, accuracy {:.2}% vs dense {:.2}%",
            after.last().map(|r| &r[..2]),
            acc * 100.0,
            dense_acc * 100.0
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let data = teacher_student(seed);
        let (rank, loss) = inrank_run(seed, &data);
        let rng = Rng::new(seed);
        let mut fr = rng.substream_named("fixed");
        let u = init_weights(64, rank, InitScheme::Orthogonal, &mut fr).unwrap();
        let v = init_weights(rank, 64, InitScheme::Orthogonal, &mut fr).unwrap();
        let layer = FactorizedLayer::without_base(u, v, rank, None, Activation::Linear).unwrap();
        let mut fixed = Model::new(vec![Layer::Factorized(layer)], LossKind::Squared).unwrap();
        let base = train(&mut fixed, &data, Hyper::sgd(5e-4), &ts_train_config(), None, &rng, &mut NullObserver)
            .unwrap()
            .final_loss;
        ratios.push(loss / base);
    }
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[4] + ratios[5]);
    outcome(
        median <= 1.05,
        format!("median ratio {median:.4} (range {:.4} to {:.4})", ratios[0], ratios[9]),
    )
}

fn run_binary(sub: &str, cfg: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_inrank-lab"))
        .arg(sub)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env_remove("INRANK_LAB_SEED")
        .status()
        .expect("spawn inrank-lab")
        .code()
        .unwrap_or(-1)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        (
            "train",
            r#"{"seed": 4, "task": {"type": "blobs", "classes": 3, "dim": 8, "per_class": 30, "separation": 3.0},
                "model": {"widths": [16], "layer_mode": "factorized"},
                "inrank": {"buffer": 4, "check_interval": 5},
                "optim": {"learning_rate": 0.05, "epochs": 5, "batch_size": 16},
                "logging": {"spectrum_every": 5}}"#,
        ),
        (
            "spectrum-trace",
            r#"{"seed": 5, "task": {"type": "teacher-student", "nx": 12, "ny": 10, "rank": 3, "samples": 64, "noise": 0.1},
                "model": {"activation": "linear", "init": "gaussian(0.01)"},
                "optim": {"learning_rate": 0.002, "epochs": 20}}"#,
        ),
        ("theory-verify", r#"{"seed": 6, "theory": {"modes": 4, "a": 1.0}}"#),
        (
            "glrl-demo",
            r#"{"seed": 7, "task": {"type": "planted", "nx": 8, "ny": 8, "spectrum": [2.0, 1.0]},
                "logging": {"metrics_every": 100}}"#,
        ),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (sub, text) in configs {
        let cfg = dir.path().join(format!("{sub}.json"));
        std::fs::write(&cfg, text).unwrap();
        let a = dir.path().join(format!("{sub}-a"));
        let b = dir.path().join(format!("{sub}-b"));
        let codes = (run_binary(sub, &cfg, &a), run_binary(sub, &cfg, &b));
        let mut same = codes == (0, 0);
        for file in ["metrics.csv", "spectrum.csv"] {
            match (std::fs::read(a.join(file)), std::fs::read(b.join(file))) {
                (Ok(x), Ok(y)) => same &= x == y,
                _ => same = false,
            }
        }
        let digest = |p: &Path| -> Option<(String, Vec<serde_json::Value>)> {
            let m: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("manifest.json")).ok()?).ok()?;
            Some((
                m["config_digest"].as_str()?.to_string(),
                vec![m["seed"].clone(), m["final_ranks"].clone(), m["outputs"].clone()],
            ))
        };
        same &= digest(&a).is_some() && digest(&a) == digest(&b);
        pass &= same;
        notes.push(format!("{sub} {}", if same { "identical" } else { "DIFFERS" }));
    }
    outcome(pass, notes.join(", "))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "numerical core", Duration::from_secs(30), criterion_1),
        (2, "gradient correctness", Duration::from_secs(60), criterion_2),
        (3, "mode trajectories vs closed form", Duration::from_secs(120), criterion_3),
        (4, "sequential learning order", Duration::from_secs(60), criterion_4),
        (5, "GLRL staircase", Duration::from_secs(120), criterion_5),
        (6, "InRank rank recovery", Duration::from_secs(180), criterion_6),
        (7, "explained ratio", Duration::from_secs(60), criterion_7),
        (8, "InRank-Efficient fusion", Duration::from_secs(180), criterion_8),
        (9, "incremental vs fixed rank", Duration::from_secs(300), criterion_9),
        (10, "reproducibility", Duration::from_secs(300), criterion_10),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut err = std::io::stderr();
    for (id, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let ok = o.pass && took <= budget;
        if !ok {
            failed += 1;
        }
        let _ = writeln!(
            err,
            "criterion {id:>2} {} {name}: {} [{:.1}s of {}s]",
            if ok { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        let _ = writeln!(err, "{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
