use std::time::Instant;

use crate::data::{batches, Dataset};
use crate::nn::layers::{argmax_rows, ce_softmax_grad, cross_entropy, softmax};
use crate::nn::{ClientModel, LinearLayer, ModelSpec, Tensor, TrainConfig};
use crate::telemetry::{IterationTrace, RunReport};
use crate::wire::SessionStats;

use super::SplitError;

/// Everything one non-split iteration produces.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStep {
    pub loss: f64,
    pub logits: Tensor,
    pub grad_al: Tensor,
    pub grad_alow: Tensor,
    pub correct: usize,
}

/// One iteration of the whole model: the same operations, in the same order,
/// as a plaintext split iteration.
pub fn local_step(
    client: &mut ClientModel,
    server: &mut LinearLayer,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<LocalStep, SplitError> {
    let (a, cache) = client.forward(x)?;
    let logits = server.forward(&a)?;
    let probs = softmax(&logits)?;
    let loss = cross_entropy(&probs, labels)?;
    let grad_al = ce_softmax_grad(&probs, labels)?;
    let (grad_alow, gw, gb) = server.backward(&grad_al, &a)?;
    server.sgd(&gw, &gb, lr)?;
    let grads = client.backward(&grad_alow, &cache)?;
    client.adam_update(&grads, lr)?;
    let correct = argmax_rows(&probs).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(LocalStep { loss, logits, grad_al, grad_alow, correct })
}

/// Sequential evaluation chunks of at most `n` samples.
pub(crate) fn eval_chunks(len: usize, n: usize) -> Vec<Vec<usize>> {
    (0..len).collect::<Vec<_>>().chunks(n.max(1)).map(|c| c.to_vec()).collect()
}

/// Test accuracy of the full model, evaluated in chunks of `n`.
pub fn evaluate_local(client: &ClientModel, server: &LinearLayer, ds: &Dataset, n: usize) -> Result<f64, SplitError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for idx in eval_chunks(ds.len(), n) {
        let (x, labels) = ds.gather(&idx);
        let (a, _) = client.forward(&x)?;
        let probs = softmax(&server.forward(&a)?)?;
        correct += argmax_rows(&probs).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub struct LocalOutcome {
    pub client: ClientModel,
    pub server: LinearLayer,
    pub report: RunReport,
}

/// Trains the non-split model; the baseline every split run is compared to.
pub fn local_train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    keep_iterations: bool,
) -> Result<LocalOutcome, SplitError> {
    cfg.validate()?;
    let mut client = ClientModel::init(spec, cfg.seed)?;
    let mut server = LinearLayer::init(spec, cfg.seed);
    let mut report = RunReport::new("local", "local");
    report.add_config_kv(&spec.to_kv());
    report.add_config_kv(&cfg.to_kv());
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut traces = Vec::new();
        let (mut seen, mut correct) = (0usize, 0usize);
        for (it, batch) in batches(train, cfg.batch_size, cfg.seed, epoch)?.take(cfg.batches).enumerate() {
            let step = local_step(&mut client, &mut server, &batch.x, &batch.labels, cfg.lr).map_err(|e| e.at(epoch, it))?;
            seen += batch.labels.len();
            correct += step.correct;
            traces.push(IterationTrace {
                epoch,
                iteration: it,
                loss: step.loss,
                accuracy_so_far: correct as f64 / seen as f64,
                ..Default::default()
            });
        }
        let mut row = crate::telemetry::epoch_summary(epoch, &traces, &SessionStats::default(), 0.0);
        if let Some(test) = test {
            row.test_accuracy = Some(evaluate_local(&client, &server, test, cfg.batch_size)?);
        }
        row.seconds = start.elapsed().as_secs_f64();
        report.epochs.push(row);
        if keep_iterations {
            report.iterations.extend(traces);
        }
    }
    report.finalize(&SessionStats::default());
    Ok(LocalOutcome { client, server, report })
}
