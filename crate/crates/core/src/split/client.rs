use std::io::{Read, Write};
use std::time::Instant;

use crate::ckks::{Ciphertext, HeSet};
use crate::data::{batches, Dataset};
use crate::nn::layers::{argmax_rows, ce_softmax_grad, cross_entropy, softmax};
use crate::nn::tensor::matmul_tn;
use crate::nn::{ClientModel, Tensor, TrainConfig};
use crate::telemetry::{bytes_by_type, epoch_summary, IterationTrace, RunReport};
use crate::wire::{
    decode_ct_batch, decode_tensor, encode_ct_batch, encode_tensor, handshake_client, Connection, EpochEnd, GradPayload, Mode,
    MsgType, SessionStats, SyncParams, WireMessage,
};

use super::audit::{contents, Content, LeakageAudit};
use super::he::{ClientEncryption, ClientHe};
use super::local::eval_chunks;
use super::packing::Packing;
use super::SplitError;

#[derive(Clone, Debug)]
pub struct ClientOptions {
    pub mode: Mode,
    pub he_set: HeSet,
    pub train: TrainConfig,
    pub refresh_every: u32,
    pub key_seed: u64,
    pub encryption: ClientEncryption,
    /// Leaky debug switch: also send the plaintext weight gradient, as the
    /// prior protocol did. Only for demonstrating the audit.
    pub debug_send_grad_w: bool,
    pub keep_iterations: bool,
}

impl ClientOptions {
    pub fn new(mode: Mode, he_set: HeSet, train: TrainConfig) -> Self {
        Self {
            mode,
            he_set,
            key_seed: train.seed ^ 0x6b65_7973,
            train,
            refresh_every: 1,
            encryption: ClientEncryption::Secret,
            debug_send_grad_w: false,
            keep_iterations: false,
        }
    }
}

/// Every tensor the client materializes in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTensors {
    pub loss: f64,
    pub logits: Tensor,
    pub grad_al: Tensor,
    pub grad_alow: Tensor,
    /// Decrypted masked weights, on refresh iterations in encrypted mode.
    pub masked_weights: Option<Tensor>,
    pub correct: usize,
    pub max_level: Option<usize>,
}

/// The client's half of a session, driven one batch at a time.
pub struct ClientSession<S: Read + Write> {
    conn: Connection<S>,
    model: ClientModel,
    params: SyncParams,
    he: Option<ClientHe>,
    debug_send_grad_w: bool,
    sent: Vec<(MsgType, Vec<Content>)>,
}

impl<S: Read + Write> ClientSession<S> {
    /// Handshake, then (in encrypted mode) key generation and `CTX_PUB`.
    pub fn connect(stream: S, model: ClientModel, opts: &ClientOptions) -> Result<Self, SplitError> {
        let (features, classes) = model.spec().server_dims();
        let params = SyncParams {
            mode: opts.mode,
            he_set: opts.he_set,
            epochs: opts.train.epochs as u32,
            lr: opts.train.lr,
            batch_size: opts.train.batch_size as u32,
            batches: opts.train.batches as u32,
            seed: opts.train.seed,
            features: features as u32,
            classes: classes as u32,
            refresh_every: opts.refresh_every,
        };
        let mut conn = Connection::new(stream);
        let params = handshake_client(&mut conn, &params)?;
        let mut session = Self {
            conn,
            model,
            params,
            he: None,
            debug_send_grad_w: opts.debug_send_grad_w,
            sent: vec![(MsgType::Hello, vec![Content::Control]), (MsgType::Sync, vec![Content::Control])],
        };
        if opts.mode == Mode::He {
            let start = Instant::now();
            let he = ClientHe::new(
                opts.he_set,
                |slots| Packing::new(opts.train.batch_size, classes, features, slots),
                opts.key_seed,
                opts.encryption,
            )?;
            let ctx_bytes = he.public_context();
            session.conn.stats_mut().add_phase("keygen", start.elapsed());
            session.he = Some(he);
            session.send(WireMessage::new(MsgType::CtxPub, ctx_bytes))?;
        }
        Ok(session)
    }

    fn send(&mut self, msg: WireMessage) -> Result<(), SplitError> {
        let with_grad_w = msg.msg_type == MsgType::GradAl && self.debug_send_grad_w;
        self.sent.push((msg.msg_type, contents(msg.msg_type, with_grad_w)));
        self.conn.send(&msg)?;
        Ok(())
    }

    pub fn params(&self) -> &SyncParams {
        &self.params
    }

    pub fn model(&self) -> &ClientModel {
        &self.model
    }

    pub fn stats(&self) -> &SessionStats {
        self.conn.stats()
    }

    pub fn he(&self) -> Option<&ClientHe> {
        self.he.as_ref()
    }

    pub fn audit(&self) -> LeakageAudit {
        LeakageAudit::from_sent(self.params.mode, &self.sent)
    }

    fn phase(&mut self, name: &str, start: Instant) {
        self.conn.stats_mut().add_phase(name, start.elapsed());
    }

    fn recv_cts(&mut self, want: MsgType, max_level: &mut usize) -> Result<Vec<Ciphertext>, SplitError> {
        let msg = self.conn.expect(want)?;
        let he = self.he.as_ref().expect("encrypted mode");
        let cts = decode_ct_batch(&msg.payload, he.context())?;
        for ct in &cts {
            *max_level = (*max_level).max(ct.level());
            if ct.level() > 1 {
                return Err(SplitError::Precision(format!("{want} ciphertext at level {} exceeds the depth budget", ct.level())));
            }
        }
        Ok(cts)
    }

    /// Server half of the forward pass: logits `[rows, K]` for activation `a`.
    fn remote_forward(&mut self, a: &Tensor, max_level: &mut usize) -> Result<Tensor, SplitError> {
        let rows = a.shape()[0];
        let logits = match self.params.mode {
            Mode::Plain => {
                self.send(WireMessage::new(MsgType::PlainAct, encode_tensor(a)?))?;
                decode_tensor(&self.conn.expect(MsgType::PlainOut)?.payload)?
            }
            Mode::He => {
                let t = Instant::now();
                let cts = self.he.as_mut().expect("encrypted mode").encrypt_activation(a)?;
                let payload = encode_ct_batch(&cts);
                self.phase("client_encrypt", t);
                self.send(WireMessage::new(MsgType::EncAct, payload))?;
                let out = self.recv_cts(MsgType::EncOut, max_level)?;
                let t = Instant::now();
                let logits = self.he.as_ref().expect("encrypted mode").decrypt_outputs(&out, rows)?;
                self.phase("client_decrypt", t);
                logits
            }
        };
        if logits.shape() != [rows, self.params.classes as usize] {
            return Err(SplitError::Protocol(format!("server output has shape {:?}", logits.shape())));
        }
        if !logits.is_finite() {
            return Err(SplitError::Precision("server output is not finite".into()));
        }
        Ok(logits)
    }

    fn refresh_due(&self, iteration: usize) -> bool {
        let k = self.params.refresh_every as usize;
        (iteration + 1).is_multiple_of(k) || iteration + 1 == self.params.batches as usize
    }

    /// One training iteration; `iteration` counts from 0 within the epoch.
    pub fn train_batch(&mut self, x: &Tensor, labels: &[usize], iteration: usize) -> Result<StepTensors, SplitError> {
        let t = Instant::now();
        let (a, cache) = self.model.forward(x)?;
        self.phase("client_forward", t);
        let mut max_level = 0;
        let logits = self.remote_forward(&a, &mut max_level)?;

        let t = Instant::now();
        let probs = softmax(&logits)?;
        let loss = cross_entropy(&probs, labels)?;
        let grad_al = ce_softmax_grad(&probs, labels)?;
        let grad_w = if self.debug_send_grad_w { Some(matmul_tn(&grad_al, &a)?) } else { None };
        self.phase("client_loss", t);
        let payload = GradPayload { grad_al: grad_al.clone(), grad_w }.encode()?;
        self.send(WireMessage::new(MsgType::GradAl, payload))?;

        let grad_alow = decode_tensor(&self.conn.expect(MsgType::GradAlow)?.payload)?;
        if grad_alow.shape() != a.shape() {
            return Err(SplitError::Protocol(format!("GRAD_ALOW shape {:?}, expected {:?}", grad_alow.shape(), a.shape())));
        }
        let t = Instant::now();
        let grads = self.model.backward(&grad_alow, &cache)?;
        self.model.adam_update(&grads, self.params.lr)?;
        self.phase("client_backward", t);

        let mut masked_weights = None;
        if self.params.mode == Mode::He && self.refresh_due(iteration) {
            let cts = self.recv_cts(MsgType::EncW, &mut max_level)?;
            let t = Instant::now();
            let w = self.he.as_ref().expect("encrypted mode").decrypt_weights(&cts)?;
            self.phase("client_refresh", t);
            self.send(WireMessage::new(MsgType::DecW, encode_tensor(&w)?))?;
            masked_weights = Some(w);
        }
        let correct = argmax_rows(&probs).iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(StepTensors {
            loss,
            logits,
            grad_al,
            grad_alow,
            masked_weights,
            correct,
            max_level: (self.params.mode == Mode::He).then_some(max_level),
        })
    }

    /// Sends `EPOCH_END` and evaluates `test` through the server, forward only.
    pub fn end_epoch(&mut self, epoch: usize, test: Option<&Dataset>) -> Result<Option<f64>, SplitError> {
        let chunks = test.map(|t| eval_chunks(t.len(), self.params.batch_size as usize)).unwrap_or_default();
        let msg = EpochEnd { epoch: epoch as u32, eval_batches: chunks.len() as u32 };
        self.send(WireMessage::new(MsgType::EpochEnd, msg.encode()))?;
        let Some(test) = test else { return Ok(None) };
        let t = Instant::now();
        let mut correct = 0;
        let mut unused = 0;
        for idx in &chunks {
            let (x, labels) = test.gather(idx);
            let (a, _) = self.model.forward(&x)?;
            let probs = softmax(&self.remote_forward(&a, &mut unused)?)?;
            correct += argmax_rows(&probs).iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        self.phase("evaluation", t);
        Ok(Some(if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 }))
    }

    /// Sends `BYE` and returns the trained model with the session counters.
    pub fn finish(mut self) -> Result<(ClientModel, SessionStats, LeakageAudit), SplitError> {
        self.send(WireMessage::empty(MsgType::Bye))?;
        let audit = self.audit();
        let (_, stats) = self.conn.into_inner();
        Ok((self.model, stats, audit))
    }

    /// Reports a fatal error to the server before giving up.
    pub fn abort(&mut self, reason: &str) {
        self.conn.send_error(reason);
    }
}

pub struct ClientOutcome {
    pub model: ClientModel,
    pub report: RunReport,
    pub audit: LeakageAudit,
    pub stats: SessionStats,
}

/// Runs every epoch of a session as the client.
pub fn client_run<S: Read + Write>(
    stream: S,
    model: ClientModel,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &ClientOptions,
) -> Result<ClientOutcome, SplitError> {
    opts.train.validate()?;
    let available = train.len() / opts.train.batch_size;
    if opts.train.batches > available {
        return Err(SplitError::Config(format!(
            "{} batches requested but the training set yields {available}",
            opts.train.batches
        )));
    }
    let spec_kv = model.spec().to_kv();
    let mut session = ClientSession::connect(stream, model, opts)?;
    let mode_name = match opts.mode {
        Mode::Plain => "split-plain",
        Mode::He => "split-he",
    };
    let mut report = RunReport::new(mode_name, "client");
    report.add_config_kv(&spec_kv);
    report.add_config_kv(&opts.train.to_kv());
    report.config.insert("refresh_every".into(), opts.refresh_every.to_string());
    if opts.mode == Mode::He {
        report.he_set = Some(opts.he_set.name().to_string());
        report.config.insert("security_note".into(), opts.he_set.params().security_note);
    }
    let result = run_epochs(&mut session, train, test, opts, &mut report);
    if let Err(e) = result {
        session.abort(&e.to_string());
        return Err(e);
    }
    let (model, stats, audit) = session.finish()?;
    report.finalize(&stats);
    report.audit = Some(serde_json::to_value(&audit).expect("audit serializes"));
    Ok(ClientOutcome { model, report, audit, stats })
}

fn run_epochs<S: Read + Write>(
    session: &mut ClientSession<S>,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &ClientOptions,
    report: &mut RunReport,
) -> Result<(), SplitError> {
    for epoch in 0..opts.train.epochs {
        let start = Instant::now();
        let before = session.stats().snapshot();
        let mut traces = Vec::with_capacity(opts.train.batches);
        let (mut seen, mut correct) = (0usize, 0usize);
        for (it, batch) in batches(train, opts.train.batch_size, opts.train.seed, epoch)?.take(opts.train.batches).enumerate() {
            let it_before = session.stats().snapshot();
            let step = session.train_batch(&batch.x, &batch.labels, it).map_err(|e| e.at(epoch, it))?;
            seen += batch.labels.len();
            correct += step.correct;
            let delta = session.stats().since(&it_before);
            traces.push(IterationTrace {
                epoch,
                iteration: it,
                loss: step.loss,
                accuracy_so_far: correct as f64 / seen as f64,
                phase_seconds: delta.phase_seconds.clone(),
                bytes_by_type: bytes_by_type(&delta),
                max_level: step.max_level,
            });
        }
        let test_accuracy = session.end_epoch(epoch, test).map_err(|e| e.at(epoch, opts.train.batches))?;
        let delta = session.stats().since(&before);
        let mut row = epoch_summary(epoch, &traces, &delta, start.elapsed().as_secs_f64());
        row.test_accuracy = test_accuracy;
        report.epochs.push(row);
        if opts.keep_iterations {
            report.iterations.extend(traces);
        }
    }
    Ok(())
}
