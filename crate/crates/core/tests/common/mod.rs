//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread::{self, JoinHandle};

use hesplit_core::ckks::{keygen, CkksContext, CkksParams, HeSet};
use hesplit_core::data::Dataset;
use hesplit_core::nn::layers::{
    ce_softmax_grad, conv1d_backward, conv1d_forward, cross_entropy, leaky_relu_backward, leaky_relu_forward, linear_backward,
    linear_forward, maxpool1d_backward, maxpool1d_forward, softmax,
};
use hesplit_core::nn::{ClientModel, ModelSpec, Tensor};
use hesplit_core::split::{server_run, ClientOptions, ClientSession, ServerOptions, ServerOutcome, SplitError};
use hesplit_core::wire::{
    encode_ct_batch, encode_frame, GradPayload, Mode, MsgType, SyncParams, WireMessage, DEFAULT_MAX_PAYLOAD,
};
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

pub const FD_STEP: f64 = 1e-5;

/// `max |analytic − numeric| / max(max |numeric|, 1e-6)` over one tensor.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Central differences of a scalar function of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least `gap` away from zero, so a probe never crosses the kink.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values in random order with spacing `gap`, so window maxima are stable.
pub fn distinct_values(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * gap - (n as f64 * gap) / 2.0).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error of one instance per layer kind; the loss is `⟨out, R⟩`.
pub struct LayerCheck {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> f64,
}

fn check_conv(rng: &mut ChaCha8Rng) -> f64 {
    let (n, cin, cout, k, len) = (2, rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), 12);
    let stride = rng.random_range(1..3);
    let x = random_tensor(&[n, cin, len], rng);
    let w = random_tensor(&[cout, cin, k], rng);
    let b = random_tensor(&[cout], rng);
    let (y, cache) = conv1d_forward(&x, &w, &b, stride).unwrap();
    let r = random_tensor(y.shape(), rng);
    let (gx, gw, gb) = conv1d_backward(&r, &cache).unwrap();
    let ex = rel_err(gx.data(), &numeric_grad(&x, |p| dot(&conv1d_forward(p, &w, &b, stride).unwrap().0, &r)));
    let ew = rel_err(gw.data(), &numeric_grad(&w, |p| dot(&conv1d_forward(&x, p, &b, stride).unwrap().0, &r)));
    let eb = rel_err(gb.data(), &numeric_grad(&b, |p| dot(&conv1d_forward(&x, &w, p, stride).unwrap().0, &r)));
    ex.max(ew).max(eb)
}

fn check_lrelu(rng: &mut ChaCha8Rng) -> f64 {
    let alpha = rng.random_range(0.0..0.3);
    let x = away_from_zero(&[3, 2, 8], 1e-3, rng);
    let r = random_tensor(x.shape(), rng);
    let g = leaky_relu_backward(&r, &x, alpha).unwrap();
    rel_err(g.data(), &numeric_grad(&x, |p| dot(&leaky_relu_forward(p, alpha), &r)))
}

fn check_pool(rng: &mut ChaCha8Rng) -> f64 {
    let window = rng.random_range(1..4);
    let x = distinct_values(&[2, 2, 11], 1e-2, rng);
    let (y, cache) = maxpool1d_forward(&x, window).unwrap();
    let r = random_tensor(y.shape(), rng);
    let g = maxpool1d_backward(&r, &cache).unwrap();
    rel_err(g.data(), &numeric_grad(&x, |p| dot(&maxpool1d_forward(p, window).unwrap().0, &r)))
}

fn check_linear(rng: &mut ChaCha8Rng) -> f64 {
    let (n, f, k) = (rng.random_range(1..6), rng.random_range(1..10), rng.random_range(1..6));
    let x = random_tensor(&[n, f], rng);
    let w = random_tensor(&[k, f], rng);
    let b = random_tensor(&[k], rng);
    let r = random_tensor(&[n, k], rng);
    let (gx, gw, gb) = linear_backward(&r, &x, &w).unwrap();
    let ex = rel_err(gx.data(), &numeric_grad(&x, |p| dot(&linear_forward(p, &w, &b).unwrap(), &r)));
    let ew = rel_err(gw.data(), &numeric_grad(&w, |p| dot(&linear_forward(&x, p, &b).unwrap(), &r)));
    let eb = rel_err(gb.data(), &numeric_grad(&b, |p| dot(&linear_forward(&x, &w, p).unwrap(), &r)));
    ex.max(ew).max(eb)
}

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (rng.random_range(1..6), rng.random_range(2..6));
    let z = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let g = ce_softmax_grad(&softmax(&z).unwrap(), &labels).unwrap();
    rel_err(g.data(), &numeric_grad(&z, |p| cross_entropy(&softmax(p).unwrap(), &labels).unwrap()))
}

/// Whole client stack against differences of its own forward pass.
fn check_client_model(rng: &mut ChaCha8Rng) -> f64 {
    let spec = ModelSpec::default_cnn(1, 24, 2, 3).unwrap();
    let model = ClientModel::init(&spec, rng.random()).unwrap();
    let x = random_tensor(&[2, 1, 24], rng);
    let (a, cache) = model.forward(&x).unwrap();
    let r = random_tensor(a.shape(), rng);
    let grads = model.backward(&r, &cache).unwrap();
    let mut worst: f64 = 0.0;
    for (li, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = model.params()[li].as_ref().unwrap();
        let numeric_w = numeric_grad(&p.w, |probe| {
            let mut m = model.clone();
            m.params_mut()[li].as_mut().unwrap().w = probe.clone();
            dot(&m.forward(&x).unwrap().0, &r)
        });
        worst = worst.max(rel_err(g.w.data(), &numeric_w));
    }
    worst
}

pub const LAYER_CHECKS: [LayerCheck; 6] = [
    LayerCheck { name: "conv1d", run: check_conv },
    LayerCheck { name: "leaky_relu", run: check_lrelu },
    LayerCheck { name: "maxpool1d", run: check_pool },
    LayerCheck { name: "linear", run: check_linear },
    LayerCheck { name: "softmax+cross_entropy", run: check_softmax_ce },
    LayerCheck { name: "client stack", run: check_client_model },
];

/// Worst error per layer over `instances` random draws.
pub fn gradient_check(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    LAYER_CHECKS
        .iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let worst = (0..instances).map(|_| (c.run)(&mut rng)).fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// A server thread plus a connected client session, driven step by step.
pub fn session_pair(
    model: ClientModel,
    opts: &ClientOptions,
    server: ServerOptions,
) -> (ClientSession<TcpStream>, JoinHandle<Result<ServerOutcome, SplitError>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        server_run(stream, &server)
    });
    let stream = TcpStream::connect(addr).unwrap();
    let session = ClientSession::connect(stream, model, opts).unwrap();
    (session, handle)
}

/// Fixed-order batches `[0..n), [n..2n), ...` of a dataset.
pub fn sequential_batches(ds: &Dataset, n: usize, count: usize) -> Vec<(Tensor, Vec<usize>)> {
    (0..count).map(|b| ds.gather(&(b * n..(b + 1) * n).collect::<Vec<_>>())).collect()
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn sync_frame() -> Vec<u8> {
    let p = SyncParams {
        mode: Mode::He,
        he_set: HeSet::S1,
        epochs: 10,
        lr: 0.001,
        batch_size: 4,
        batches: 3311,
        seed: 42,
        features: 448,
        classes: 5,
        refresh_every: 1,
    };
    encode_frame(&WireMessage::new(MsgType::Sync, p.encode()), DEFAULT_MAX_PAYLOAD).unwrap()
}

pub fn enc_act_frame() -> Vec<u8> {
    let ctx = CkksContext::new(CkksParams::tiny()).unwrap();
    let keys = keygen(&ctx, 7);
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let cts: Vec<_> = [[0.5, -0.25, 1.0, 0.0], [1.5, 0.75, -1.0, 0.125]]
        .iter()
        .map(|v| {
            let pt = ctx.encode(&v[..], 0, ctx.scale()).unwrap();
            ctx.encrypt_symmetric(&keys.secret, &pt, &mut rng).unwrap()
        })
        .collect();
    encode_frame(&WireMessage::new(MsgType::EncAct, encode_ct_batch(&cts)), DEFAULT_MAX_PAYLOAD).unwrap()
}

pub fn grad_al_frame() -> Vec<u8> {
    let g = Tensor::new(vec![2, 5], vec![0.1, -0.4, 0.05, 0.15, 0.1, -0.3, 0.2, 0.025, 0.05, 0.025]).unwrap();
    let payload = GradPayload { grad_al: g, grad_w: None }.encode().unwrap();
    encode_frame(&WireMessage::new(MsgType::GradAl, payload), DEFAULT_MAX_PAYLOAD).unwrap()
}
