//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and a
//! summary count.
//!
//! Run with `cargo test -p stgcn --test acceptance`. Environment:
//! `STGCN_ACCEPTANCE_STRICT=1` exits nonzero when any criterion fails;
//! `STGCN_ACCEPTANCE_SKIP_BENCHMARK=1` skips the long forecasting benchmark;
//! `STGCN_DATASET_MANIFEST=<path>` runs the informational real-data check.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stgcn::checkpoint::Checkpoint;
use stgcn::data::{make_windows, SplitSpec};
use stgcn::evaluation::report_table;
use stgcn::experiment::{gradcheck_suite, random_graph, run_eval, run_synth, run_train, RunManifest};
use stgcn::graph::{cheb_filter, normalized_laplacian, spectral_oracle};
use stgcn::layers::{GraphConvKind, ModelConfig, StgcnModel};
use stgcn::synth::{generate, SynthConfig};
use stgcn::tensor::{no_grad, Tensor};
use stgcn::training::{predict_direct, train, TrainConfig};
use stgcn::{LaplacianBundle, Scalar};

const SPECTRAL_TOL: f64 = 1e-8;
const SPECTRAL_BUDGET: Duration = Duration::from_secs(5);
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const EQUIVARIANCE_TOL: f64 = 1e-8;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(600);
const OVERFIT_RATIO: f64 = 1e-3;
const OVERFIT_STEPS: usize = 500;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn spectral_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let k = rng.random_range(1..=5);
        let bundle = normalized_laplacian(&random_graph(&mut rng, n).map_err(err)?).map_err(err)?;
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = cheb_filter(&bundle, &theta, &x).map_err(err)?;
        let exact = spectral_oracle(&bundle, &theta, &x).map_err(err)?;
        for (a, b) in fast.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < SPECTRAL_TOL && elapsed < SPECTRAL_BUDGET,
        format!("max abs difference {worst:.2e} (< {SPECTRAL_TOL:e}) in {elapsed:.2?} (< {SPECTRAL_BUDGET:?})"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck_suite(0).map_err(err)?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passes(GRADCHECK_TOL))
        .map(|r| format!("{} {:.2e}", r.label, r.max_relative_error()))
        .collect();
    let worst = reports.iter().map(|r| r.max_relative_error()).fold(0.0, f64::max);
    check(
        failed.is_empty() && reports.len() == 8 && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} layer checks, worst relative error {worst:.2e} (< {GRADCHECK_TOL:e}) in {elapsed:.2?}{}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f64>, String> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(err)
}

fn shape_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 7;
    let bundle = normalized_laplacian(&random_graph(&mut rng, n).map_err(err)?).map_err(err)?;
    let config = ModelConfig::standard(n);
    let model = StgcnModel::new(config.clone(), &bundle, 3).map_err(err)?;
    let x = random_input(&mut rng, &[2, 12, n, 1])?;
    let mut lengths = Vec::new();
    let mut h = x.clone();
    for block in model.blocks() {
        h = block.forward(&h).map_err(err)?;
        lengths.push(h.shape()[1]);
        if h.shape() != [2, h.shape()[1], n, 64] {
            return Err(format!("block output shape {:?}", h.shape()));
        }
    }
    let out = model.forward(&x).map_err(err)?.shape().to_vec();
    check(
        lengths == [8, 4] && config.block_lengths() == [8, 4] && out == [2, n, 1],
        format!("block lengths {lengths:?}, output {out:?} for batch 2 and n={n}"),
    )
}

fn permutation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for (trial, kind) in [GraphConvKind::Chebyshev { k: 3 }, GraphConvKind::FirstOrder].into_iter().cycle().take(6).enumerate() {
        let n = rng.random_range(3..=9);
        let graph = random_graph(&mut rng, n).map_err(err)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let bundle = normalized_laplacian(&graph).map_err(err)?;
        let permuted_bundle = normalized_laplacian(&graph.permuted(&perm).map_err(err)?).map_err(err)?;
        let config = ModelConfig { graph_conv: kind, ..ModelConfig::standard(n) };
        let model = StgcnModel::new(config, &bundle, trial as u64).map_err(err)?;
        // Give node-indexed parameters distinct values so relabeling matters.
        for (_, t) in model.parameters().iter().filter(|(name, _)| name.contains(".norm.")) {
            t.update_data(|v| v.iter_mut().for_each(|x| *x = rng.random_range(0.5..1.5))).map_err(err)?;
        }
        let twin = model.permuted(&perm, &permuted_bundle).map_err(err)?;
        let x = random_input(&mut rng, &[3, 12, n, 1])?;
        let xv = x.to_vec();
        let mut xp = vec![0.0; xv.len()];
        for s in 0..3 * 12 {
            for (k, &p) in perm.iter().enumerate() {
                xp[s * n + k] = xv[s * n + p];
            }
        }
        let xp = Tensor::new(&[3, 12, n, 1], xp).map_err(err)?;
        let (y, yp) = no_grad(|| (model.forward(&x), twin.forward(&xp)));
        let (y, yp) = (y.map_err(err)?.to_vec(), yp.map_err(err)?.to_vec());
        for b in 0..3 {
            for (k, &p) in perm.iter().enumerate() {
                worst = worst.max((yp[b * n + k] - y[b * n + p]).abs());
            }
        }
    }
    check(
        worst < EQUIVARIANCE_TOL,
        format!("6 random instances, max abs difference {worst:.2e} (< {EQUIVARIANCE_TOL:e})"),
    )
}

fn forecasting_benchmark() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = SynthConfig { nodes: 20, workdays: 40, seed: 42, ..SynthConfig::default() };
    run_synth(&cfg, dir.path()).map_err(err)?;
    let overrides = [
        "variant=cheb",
        "train.epochs=20",
        "horizons=[1,3,6]",
        "precision=f32",
    ]
    .map(String::from);
    let m = RunManifest::load_with_overrides(&dir.path().join("manifest.json"), &overrides).map_err(err)?;
    run_train(&m).map_err(err)?;
    let rows = run_eval(&m, Some(&m.checkpoint_path())).map_err(err)?;
    let elapsed = start.elapsed();
    println!("{}", report_table(&rows).trim_end());
    let mut ok = elapsed < BENCHMARK_BUDGET;
    let mut parts = Vec::new();
    for h in [1, 3, 6] {
        let mae = |label: &str| {
            rows.iter()
                .find(|r| r.report.horizon_steps == h && r.model.starts_with(label))
                .map(|r| r.report.mae)
                .ok_or_else(|| format!("no {label} row at horizon {h}"))
        };
        let (model, ha) = (mae("STGCN")?, mae("HA")?);
        ok &= model < ha;
        parts.push(format!("h{h} {model:.3} vs HA {ha:.3}"));
    }
    check(ok, format!("test MAE {} in {elapsed:.1?} (< {BENCHMARK_BUDGET:?})", parts.join(", ")))
}

fn overfit() -> Outcome {
    let data = generate(&SynthConfig::default()).map_err(err)?;
    let graph = stgcn::graph::build_adjacency_with_ids::<f64>(
        data.distances.node_ids.clone(),
        &data.distances.records,
        &Default::default(),
    )
    .map_err(err)?;
    let bundle = normalized_laplacian(&graph).map_err(err)?;
    let d = make_windows(&data.series, 12, 1, &SplitSpec::default()).map_err(err)?;
    let spacing = d.train.len() / 10;
    let idx: Vec<usize> = (0..10).map(|i| i * spacing).collect();
    let subset = d.train.subset(&idx).map_err(err)?;
    let model = StgcnModel::new(ModelConfig::standard(graph.n()), &bundle, 1).map_err(err)?;
    // One full-batch step per epoch; halve the rate every 100 steps.
    let cfg = TrainConfig {
        epochs: OVERFIT_STEPS,
        batch_size: 10,
        decay_every_epochs: 100,
        lr_decay: 0.5,
        ..TrainConfig::default()
    };
    let out = train(&model, &subset, &d.val.truncated(0), &cfg).map_err(err)?;
    let initial = out.history[0].train_loss;
    let last = out.history.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    let ratio = last / initial;
    check(
        out.steps == OVERFIT_STEPS && ratio < OVERFIT_RATIO,
        format!("loss {initial:.4} -> {last:.4} after {} steps, ratio {ratio:.2e} (< {OVERFIT_RATIO:e})", out.steps),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = SynthConfig { nodes: 6, workdays: 6, seed: 9, ..SynthConfig::default() };
    run_synth(&cfg, dir.path()).map_err(err)?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let overrides = [format!("output_dir={run}"), "train.epochs=3".into(), "blocks=[[1,4,8],[8,4,8]]".into()];
        let m = RunManifest::load_with_overrides(&dir.path().join("manifest.json"), &overrides).map_err(err)?;
        run_train(&m).map_err(err)?;
        let read = |p: &Path| std::fs::read(p).map_err(err);
        outputs.push((read(&m.output_dir.join("history.csv"))?, read(&m.checkpoint_path())?));
    }
    let same = outputs[0] == outputs[1];
    check(
        same,
        format!(
            "history ({} bytes) and checkpoint ({} bytes) {}",
            outputs[0].0.len(),
            outputs[0].1.len(),
            if same { "identical across runs" } else { "differ between runs" }
        ),
    )
}

fn round_trip_for<T: Scalar>(bundle: &LaplacianBundle, label: &str) -> Outcome {
    let data = generate(&SynthConfig { nodes: 5, workdays: 5, ..SynthConfig::default() }).map_err(err)?;
    let d = make_windows(&data.series, 12, 1, &SplitSpec::default()).map_err(err)?;
    let bundle = bundle.cast::<T>();
    let model = StgcnModel::<T>::new(ModelConfig::standard(5), &bundle, 11).map_err(err)?;
    let before = predict_direct(&model, &d.test, 64).map_err(err)?;
    let ckpt = Checkpoint::from_model(&model, Some(d.train.stats()), 1, Some(0));
    let bytes = ckpt.to_bytes().map_err(err)?;
    let restored = Checkpoint::from_bytes(&bytes).map_err(err)?.restore(&bundle).map_err(err)?;
    let after = predict_direct(&restored, &d.test, 64).map_err(err)?;
    let same = before.len() == after.len() && before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    check(same, format!("{label}: {} predictions", before.len()))
}

fn checkpoint_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bundle = normalized_laplacian(&random_graph(&mut rng, 5).map_err(err)?).map_err(err)?;
    let a = round_trip_for::<f64>(&bundle, "f64")?;
    let b = round_trip_for::<f32>(&bundle, "f32")?;
    Ok(format!("bitwise identical ({a}; {b})"))
}

/// `1e-3 · 0.7^k` for k = 0..9, each power correctly rounded and then
/// multiplied by `1e-3`, computed with exact rational arithmetic.
const LR_TABLE: [u64; 10] = [
    0x3f50624dd2f1a9fc,
    0x3f46f0068db8bac7,
    0x3f400e6afcce1c58,
    0x3f367a95c853c147,
    0x3f2f786b4ba874fd,
    0x3f26077e4e8f8517,
    0x3f1ed74a6dfc20ba,
    0x3f1596b419ca16e8,
    0x3f0e39628a815344,
    0x3f05282b60f420af,
];

fn lr_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let mismatched: Vec<usize> = (0..50).filter(|&e| cfg.lr_at(e).to_bits() != LR_TABLE[e / 5]).collect();
    check(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "epochs 0-49 match bit for bit".to_string()
        } else {
            format!("mismatch at epochs {mismatched:?}")
        },
    )
}

enum Status {
    Gate(Outcome),
    Info(Outcome),
    Skip(String),
}

fn real_dataset() -> Status {
    let Ok(path) = std::env::var("STGCN_DATASET_MANIFEST") else {
        return Status::Skip("set STGCN_DATASET_MANIFEST to run on a user-supplied dataset".into());
    };
    let run = || -> Outcome {
        let m = RunManifest::load(Path::new(&path)).map_err(err)?;
        run_train(&m).map_err(err)?;
        let rows = run_eval(&m, Some(&m.checkpoint_path())).map_err(err)?;
        println!("{}", report_table(&rows).trim_end());
        Ok(format!("{} report rows written to {}", rows.len(), m.output_dir.join("report.csv").display()))
    };
    Status::Info(run())
}

fn main() -> ExitCode {
    let skip_benchmark = std::env::var_os("STGCN_ACCEPTANCE_SKIP_BENCHMARK").is_some();
    let criteria: Vec<(&str, Box<dyn Fn() -> Status>)> = vec![
        ("spectral oracle equivalence", Box::new(|| Status::Gate(spectral_equivalence()))),
        ("gradient checks", Box::new(|| Status::Gate(gradient_checks()))),
        ("shape contract", Box::new(|| Status::Gate(shape_contract()))),
        ("permutation equivariance", Box::new(|| Status::Gate(permutation_equivariance()))),
        (
            "synthetic forecasting benchmark",
            Box::new(move || {
                if skip_benchmark {
                    Status::Skip("STGCN_ACCEPTANCE_SKIP_BENCHMARK is set".into())
                } else {
                    Status::Gate(forecasting_benchmark())
                }
            }),
        ),
        ("overfit sanity", Box::new(|| Status::Gate(overfit()))),
        ("determinism", Box::new(|| Status::Gate(determinism()))),
        ("checkpoint round trip", Box::new(|| Status::Gate(checkpoint_round_trip()))),
        ("real-data reproduction (informational)", Box::new(real_dataset)),
        ("learning-rate schedule", Box::new(|| Status::Gate(lr_schedule()))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let line = match f() {
            Status::Gate(Ok(d)) => format!("PASS {}: {name}: {d}", i + 1),
            Status::Gate(Err(d)) => {
                failed += 1;
                format!("FAIL {}: {name}: {d}", i + 1)
            }
            Status::Info(Ok(d)) => format!("INFO {}: {name}: {d}", i + 1),
            Status::Info(Err(d)) => format!("INFO {}: {name}: did not complete: {d}", i + 1),
            Status::Skip(d) => format!("SKIP {}: {name}: {d}", i + 1),
        };
        println!("{line}");
    }
    println!("{failed} of {} criteria failed", criteria.len());
    if failed > 0 && std::env::var_os("STGCN_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
