//! Acceptance criteria, one `[PASS]`/`[FAIL]`/`[SKIP]` line each.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 2 8`.
//! Failures are reported but only fail the process with
//! `HESPLIT_ACCEPTANCE_STRICT=1`, so the rest of the workspace suite still runs.

mod common;

use std::time::{Duration, Instant};

use hesplit_core::attack::{check_applicable, reconstruct_activation, run_attack, simulate_prior_protocol_leak, LeakedGradients};
use hesplit_core::ckks::{keygen, serialize_ct, CkksContext, HeSet};
use hesplit_core::data::{load_csv, split_train_test, synth_ecg, Profile};
use hesplit_core::nn::tensor::matmul;
use hesplit_core::nn::{ClientModel, LinearLayer, ModelSpec, Tensor, TrainConfig};
use hesplit_core::split::{run_loopback, ClientOptions, ServerOptions, StepTensors, MAX_PROTOCOL_LEVEL};
use hesplit_core::wire::{decode_frame, encode_frame, Mode, DEFAULT_MAX_PAYLOAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const FD_TOLERANCE: f64 = 1e-4;
const FD_INSTANCES: usize = 100;
const HE_OP_TOLERANCE: f64 = 1e-2;
const HE_OP_TRIALS: usize = 1000;
const ATTACK_MIN_PEARSON: f64 = 0.999;
const EQUIVALENCE_ITERATIONS: usize = 20;
const EQUIVALENCE_TOLERANCE: f64 = 1e-2;
const PARITY_SAMPLES: usize = 2000;
const PARITY_EPOCHS: usize = 3;
const PARITY_MAX_GAP_PP: f64 = 6.0;
const MITBIH_TARGET: f64 = 0.8806;
const MITBIH_BAND: f64 = 0.02;
const MITBIH_ENV: &str = "HESPLIT_MITBIH_CSV";
const SCALING_RATIO: f64 = 2.0;
const SCALING_BAND: f64 = 0.10;
const S1_CT_HEADER: usize = 18;
const S1_CT_PAYLOAD: usize = 655_360;
const DEPTH_ITERATIONS: usize = 100;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// 1
fn gradient_correctness() -> Verdict {
    let results = common::gradient_check(FD_INSTANCES, 2024);
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        worst < FD_TOLERANCE,
        format!("max rel err {worst:.2e} < {FD_TOLERANCE:e} over {FD_INSTANCES} instances per layer ({detail})"),
    )
}

// 2
fn homomorphism_suite() -> Verdict {
    let ctx = CkksContext::new(HeSet::S1.params()).expect("S1 context");
    let keys = keygen(&ctx, 11);
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let slots = ctx.slots();
    let delta = ctx.scale();
    let mut worst = [0.0f64; 5];
    let names = ["add", "sub", "mul_plain", "rotate", "slot_sum"];
    let max_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for trial in 0..HE_OP_TRIALS {
        let op = trial % 5;
        let a: Vec<f64> = (0..slots).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..slots).map(|_| rng.random_range(-10.0..10.0)).collect();
        let ca = ctx.encrypt_symmetric(&keys.secret, &ctx.encode(&a, 0, delta).unwrap(), &mut rng).unwrap();
        let (got, want): (Vec<f64>, Vec<f64>) = match op {
            0 | 1 => {
                let cb = ctx.encrypt(&keys.public, &ctx.encode(&b, 0, delta).unwrap(), &mut rng).unwrap();
                if op == 0 {
                    (
                        ctx.decrypt(&keys.secret, &ctx.add(&ca, &cb).unwrap()).unwrap(),
                        a.iter().zip(&b).map(|(x, y)| x + y).collect(),
                    )
                } else {
                    (
                        ctx.decrypt(&keys.secret, &ctx.sub(&ca, &cb).unwrap()).unwrap(),
                        a.iter().zip(&b).map(|(x, y)| x - y).collect(),
                    )
                }
            }
            2 => {
                let pb = ctx.encode(&b, 0, delta).unwrap();
                let prod = ctx.rescale(&ctx.mul_plain(&ca, &pb).unwrap()).unwrap();
                (ctx.decrypt(&keys.secret, &prod).unwrap(), a.iter().zip(&b).map(|(x, y)| x * y).collect())
            }
            3 => {
                let step = 1usize << rng.random_range(0..slots.trailing_zeros());
                let r = ctx.rotate(&ca, step, &keys.rotation).unwrap();
                (ctx.decrypt(&keys.secret, &r).unwrap(), (0..slots).map(|j| a[(j + step) % slots]).collect())
            }
            _ => {
                let width = 1usize << rng.random_range(1..5);
                let s = ctx.slot_sum(&ca, width, &keys.rotation).unwrap();
                (
                    ctx.decrypt(&keys.secret, &s).unwrap(),
                    (0..slots).map(|j| (0..width).map(|i| a[(j + i) % slots]).sum()).collect(),
                )
            }
        };
        worst[op] = worst[op].max(max_abs(&got, &want));
    }
    let overall = worst.iter().copied().fold(0.0, f64::max);
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        overall <= HE_OP_TOLERANCE,
        format!(
            "max-abs {overall:.2e} <= {HE_OP_TOLERANCE:e} over {HE_OP_TRIALS} trials, {} per operation ({detail})",
            HE_OP_TRIALS / 5
        ),
    )
}

// 3
fn attack_reproduction() -> Verdict {
    // independent oracle: the solver inverts a product built by plain matmul
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let a =
        Tensor::new(vec![5, 5], (0..25).map(|i| if i % 6 == 0 { 3.0 } else { rng.random_range(-1.0..1.0) }).collect()).unwrap();
    let x = Tensor::new(vec![5, 448], (0..5 * 448).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let leak = LeakedGradients { grad_al: a.transpose2().unwrap(), grad_w: matmul(&a, &x).unwrap() };
    let solver_err = reconstruct_activation(&leak).unwrap().max_abs_diff(&x).unwrap();

    // audit half: a real encrypted session never hands the server the weight gradient
    let spec = ModelSpec::mitbih();
    let ds = synth_ecg(10, Profile::Mitbih, 3);
    let cfg = TrainConfig { epochs: 1, lr: 0.001, batch_size: 5, batches: 1, seed: 3 };
    let opts = ClientOptions::new(Mode::He, HeSet::Toy, cfg);
    let (client, _) = run_loopback(ClientModel::init(&spec, 3).unwrap(), &ds, None, &opts, &ServerOptions::default()).unwrap();
    let audit_blocks = check_applicable(&client.audit).is_err() && client.audit.passed();

    // end-to-end capture on random weights
    let model = ClientModel::init(&spec, 4).unwrap();
    let layer = LinearLayer::init(&spec, 4);
    let (xb, labels) = ds.gather(&[0, 1, 2, 3, 4]);
    let capture = simulate_prior_protocol_leak(&model, &layer, &xb, &labels).unwrap();
    let row_sum = (0..5).map(|r| capture.leak.grad_al.row(r).iter().sum::<f64>().abs()).fold(0.0, f64::max);
    let (min_r, attack_detail) = match run_attack(&capture) {
        Ok(rep) => (rep.min_pearson(), format!("min per-sample r {:.6}, cond {:.2e}", rep.min_pearson(), rep.condition_number)),
        Err(e) => (f64::NAN, format!("reconstruction refused: {e}")),
    };
    verdict(
        min_r > ATTACK_MIN_PEARSON && audit_blocks && solver_err < 1e-8,
        format!(
            "{attack_detail}; output-gradient rows sum to {row_sum:.1e} (softmax cross-entropy makes it rank-deficient); \
             solver oracle err {solver_err:.1e}; encrypted-protocol audit blocks attack: {audit_blocks}"
        ),
    )
}

fn observable_diff(a: &StepTensors, b: &StepTensors) -> f64 {
    [(&a.logits, &b.logits), (&a.grad_al, &b.grad_al), (&a.grad_alow, &b.grad_alow)]
        .into_iter()
        .map(|(x, y)| x.max_abs_diff(y).unwrap())
        .fold((a.loss - b.loss).abs(), f64::max)
}

fn run_steps(
    mode: Mode,
    he_set: HeSet,
    cfg: &TrainConfig,
    ds: &hesplit_core::data::Dataset,
) -> (Vec<StepTensors>, ClientModel, usize) {
    let spec = ModelSpec::mitbih();
    let opts = ClientOptions::new(mode, he_set, cfg.clone());
    let server = ServerOptions { private_seed: Some(9), ..Default::default() };
    let (mut session, handle) = common::session_pair(ClientModel::init(&spec, cfg.seed).unwrap(), &opts, server);
    let mut steps = Vec::new();
    for (it, (x, labels)) in common::sequential_batches(ds, cfg.batch_size, cfg.batches).into_iter().enumerate() {
        steps.push(session.train_batch(&x, &labels, it).unwrap());
    }
    session.end_epoch(0, None).unwrap();
    let (model, _, _) = session.finish().unwrap();
    let server = handle.join().unwrap().unwrap();
    (steps, model, server.max_level)
}

// 4
fn encrypted_equivalence() -> Verdict {
    let cfg = TrainConfig { epochs: 1, lr: 0.001, batch_size: 4, batches: EQUIVALENCE_ITERATIONS, seed: 21 };
    let ds = synth_ecg(cfg.batch_size * cfg.batches, Profile::Mitbih, 21);
    let (plain, plain_model, _) = run_steps(Mode::Plain, HeSet::S1, &cfg, &ds);
    let (he, he_model, level) = run_steps(Mode::He, HeSet::S1, &cfg, &ds);
    let per_iter: Vec<f64> = plain.iter().zip(&he).map(|(p, h)| observable_diff(p, h)).collect();
    let worst = per_iter.iter().copied().fold(0.0, f64::max);
    let weights = plain_model.max_abs_diff(&he_model).unwrap();
    verdict(
        worst <= EQUIVALENCE_TOLERANCE && per_iter.len() == EQUIVALENCE_ITERATIONS,
        format!(
            "S1, {} iterations: max per-iteration diff {worst:.2e} over loss/logits/grad_al/grad_alow (last {:.2e}); \
             client weights differ by {weights:.2e}; max ciphertext level {level}",
            per_iter.len(),
            per_iter.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

// 5
fn accuracy_parity() -> Verdict {
    let ds = synth_ecg(PARITY_SAMPLES, Profile::Mitbih, 55);
    let (train, test) = split_train_test(&ds, 0.5, 55).unwrap();
    let cfg = TrainConfig { epochs: PARITY_EPOCHS, lr: 0.001, batch_size: 4, batches: train.len() / 4, seed: 55 };
    let spec = ModelSpec::mitbih();
    let acc = |mode| {
        let opts = ClientOptions::new(mode, HeSet::Toy, cfg.clone());
        let (c, _) =
            run_loopback(ClientModel::init(&spec, cfg.seed).unwrap(), &train, Some(&test), &opts, &ServerOptions::default())
                .unwrap();
        c.report.final_test_accuracy.unwrap()
    };
    let plain = acc(Mode::Plain);
    let he = acc(Mode::He);
    let gap = (plain - he) * 100.0;
    verdict(
        gap <= PARITY_MAX_GAP_PP,
        format!("{PARITY_SAMPLES} samples, {PARITY_EPOCHS} epochs, toy HE set: plain {:.2}%, HE {:.2}%, gap {gap:.2} pp <= {PARITY_MAX_GAP_PP}", plain * 100.0, he * 100.0),
    )
}

// 6
fn mitbih_reproduction() -> Verdict {
    let Some(path) = std::env::var_os(MITBIH_ENV) else {
        return Verdict::Skip(format!("{MITBIH_ENV} not set; no MIT-BIH CSV supplied"));
    };
    let ds = match load_csv(&path, Profile::Mitbih) {
        Ok(ds) => ds,
        Err(e) => return Verdict::Fail(format!("cannot load {}: {e}", path.to_string_lossy())),
    };
    let (train, test) = split_train_test(&ds, 0.5, 1).unwrap();
    let cfg = TrainConfig { epochs: 10, lr: 0.001, batch_size: 4, batches: train.len() / 4, seed: 1 };
    let opts = ClientOptions::new(Mode::Plain, HeSet::S1, cfg.clone());
    let spec = ModelSpec::mitbih();
    let (c, _) =
        run_loopback(ClientModel::init(&spec, cfg.seed).unwrap(), &train, Some(&test), &opts, &ServerOptions::default()).unwrap();
    let acc = c.report.final_test_accuracy.unwrap();
    verdict(
        (acc - MITBIH_TARGET).abs() <= MITBIH_BAND,
        format!(
            "{} train / {} test, 10 epochs split-plain: {:.2}% (target {:.2}% ± {:.0})",
            train.len(),
            test.len(),
            acc * 100.0,
            MITBIH_TARGET * 100.0,
            MITBIH_BAND * 100.0
        ),
    )
}

// 7
fn communication_scaling() -> Verdict {
    let ds = synth_ecg(32, Profile::Mitbih, 77);
    let spec = ModelSpec::mitbih();
    let bytes: Vec<u64> = [4usize, 8, 16]
        .iter()
        .map(|&n| {
            let cfg = TrainConfig { epochs: 1, lr: 0.001, batch_size: n, batches: ds.len() / n, seed: 77 };
            let opts = ClientOptions::new(Mode::He, HeSet::S1, cfg.clone());
            let (c, _) =
                run_loopback(ClientModel::init(&spec, 77).unwrap(), &ds, None, &opts, &ServerOptions::default()).unwrap();
            c.report.epochs[0].bytes_total()
        })
        .collect();
    let r1 = bytes[0] as f64 / bytes[1] as f64;
    let r2 = bytes[1] as f64 / bytes[2] as f64;
    let ok = [r1, r2].iter().all(|r| (r / SCALING_RATIO - 1.0).abs() <= SCALING_BAND);
    verdict(
        ok,
        format!(
            "S1, 32 samples per epoch: n=4 {:.1} MiB, n=8 {:.1} MiB, n=16 {:.1} MiB; ratios {r1:.3}, {r2:.3} (want 2 ± 10%)",
            bytes[0] as f64 / 1048576.0,
            bytes[1] as f64 / 1048576.0,
            bytes[2] as f64 / 1048576.0
        ),
    )
}

// 8
fn ciphertext_size() -> Verdict {
    let ctx = CkksContext::new(HeSet::S1.params()).unwrap();
    let keys = keygen(&ctx, 8);
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let ct = ctx.encrypt(&keys.public, &ctx.encode(&[1.0], 0, ctx.scale()).unwrap(), &mut rng).unwrap();
    let len = serialize_ct(&ct).len();
    verdict(
        len == S1_CT_HEADER + S1_CT_PAYLOAD,
        format!("fresh S1 ciphertext {len} bytes (want {S1_CT_HEADER} header + {S1_CT_PAYLOAD} payload)"),
    )
}

// 9
fn golden_frames() -> Verdict {
    let mut problems = Vec::new();
    for (name, fresh) in [
        ("sync.frame", common::sync_frame()),
        ("enc_act.frame", common::enc_act_frame()),
        ("grad_al.frame", common::grad_al_frame()),
    ] {
        match std::fs::read(common::golden_path(name)) {
            Ok(pinned) => {
                let rt = decode_frame(&pinned, DEFAULT_MAX_PAYLOAD).and_then(|m| encode_frame(&m, DEFAULT_MAX_PAYLOAD));
                if pinned != fresh || rt.ok().as_ref() != Some(&pinned) {
                    problems.push(name.to_string());
                }
            }
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "SYNC, ENC_ACT, GRAD_AL frames byte-identical".into()
        } else {
            format!("mismatch: {problems:?}")
        },
    )
}

// 10
fn depth_budget() -> Verdict {
    let ds = synth_ecg(4 * DEPTH_ITERATIONS, Profile::Mitbih, 10);
    let cfg = TrainConfig { epochs: 1, lr: 0.001, batch_size: 4, batches: DEPTH_ITERATIONS, seed: 10 };
    let mut opts = ClientOptions::new(Mode::He, HeSet::Toy, cfg);
    opts.keep_iterations = true;
    let (c, s) =
        run_loopback(ClientModel::init(&ModelSpec::mitbih(), 10).unwrap(), &ds, None, &opts, &ServerOptions::default()).unwrap();
    let client_max = c.report.iterations.iter().filter_map(|t| t.max_level).max().unwrap_or(0);
    let n = c.report.iterations.len();
    verdict(
        n == DEPTH_ITERATIONS && s.max_level <= MAX_PROTOCOL_LEVEL && client_max <= MAX_PROTOCOL_LEVEL,
        format!(
            "{n} iterations on the S1 modulus chain (toy ring): server max level {}, client-observed max level {client_max}",
            s.max_level
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "layer gradients vs finite differences",
            budget: Duration::from_secs(10),
            run: gradient_correctness,
        },
        Criterion { id: 2, name: "CKKS homomorphism suite (S1)", budget: mins(2), run: homomorphism_suite },
        Criterion {
            id: 3,
            name: "gradient-inversion attack reproduction",
            budget: Duration::from_secs(30),
            run: attack_reproduction,
        },
        Criterion { id: 4, name: "split-HE vs split-plain equivalence (S1)", budget: mins(15), run: encrypted_equivalence },
        Criterion { id: 5, name: "plain vs HE accuracy parity", budget: mins(45), run: accuracy_parity },
        Criterion { id: 6, name: "MIT-BIH accuracy reproduction", budget: Duration::MAX, run: mitbih_reproduction },
        Criterion { id: 7, name: "HE bytes per epoch halve as n doubles", budget: mins(30), run: communication_scaling },
        Criterion { id: 8, name: "fresh S1 ciphertext size", budget: Duration::MAX, run: ciphertext_size },
        Criterion { id: 9, name: "wire golden frames", budget: Duration::from_secs(1), run: golden_frames },
        Criterion { id: 10, name: "depth budget over 100 iterations", budget: Duration::MAX, run: depth_budget },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut pass, mut fail, mut skip) = (0, 0, 0);
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let v = (c.run)();
        let elapsed = start.elapsed();
        let timing = if c.budget == Duration::MAX {
            format!("{:.1}s", elapsed.as_secs_f64())
        } else {
            format!("{:.1}s of {:.0}s", elapsed.as_secs_f64(), c.budget.as_secs_f64())
        };
        let v = match v {
            Verdict::Pass(d) if elapsed > c.budget => Verdict::Fail(format!("{d}; over time budget")),
            v => v,
        };
        let (tag, detail) = match v {
            Verdict::Pass(d) => {
                pass += 1;
                ("PASS", d)
            }
            Verdict::Fail(d) => {
                fail += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => {
                skip += 1;
                ("SKIP", d)
            }
        };
        println!("[{tag}] {:>2} {}: {detail} [{timing}]", c.id, c.name);
    }
    println!("acceptance: {pass} passed, {fail} failed, {skip} skipped");
    if fail > 0 && std::env::var_os("HESPLIT_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
