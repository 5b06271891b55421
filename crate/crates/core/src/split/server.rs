use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::ckks::{deserialize_public_context, Ciphertext, CkksContext};
use crate::nn::optim::sgd_step;
use crate::nn::tensor::matmul;
use crate::nn::{LinearLayer, Tensor};
use crate::telemetry::{EpochRow, RunReport};
use crate::wire::{
    decode_ct_batch, decode_tensor, encode_ct_batch, encode_tensor, handshake_server, Connection, EpochEnd, GradPayload, Mode,
    MsgType, SessionStats, SyncParams, SyncPolicy, WireError, WireMessage,
};

use super::he::ServerHe;
use super::packing::Packing;
use super::SplitError;

/// Highest ciphertext level the protocol may produce.
pub const MAX_PROTOCOL_LEVEL: usize = 1;

#[derive(Clone, Debug, Default)]
pub struct ServerOptions {
    pub policy: SyncPolicy,
    /// Keep a copy of the layer after every iteration.
    pub record_weights: bool,
    /// Seed for the refresh masks and encryptions. `None` draws from the OS;
    /// a fixed seed is for reproducible tests only, since a client that
    /// knows it can unmask the weights.
    pub private_seed: Option<u64>,
}

/// The server's half of a session.
pub struct ServerSession<S: Read + Write> {
    conn: Connection<S>,
    params: SyncParams,
    layer: LinearLayer,
    he: Option<ServerHe>,
    pending: Option<Vec<Ciphertext>>,
    rng: ChaCha20Rng,
    max_level: usize,
    history: Vec<LinearLayer>,
    record_weights: bool,
}

impl<S: Read + Write> ServerSession<S> {
    /// Handshake and, in encrypted mode, receipt of the public context.
    pub fn accept(stream: S, opts: &ServerOptions) -> Result<Self, SplitError> {
        let mut conn = Connection::new(stream);
        let params = handshake_server(&mut conn, &opts.policy)?;
        let private_seed = opts.private_seed.unwrap_or_else(|| rand::rng().random());
        let layer = LinearLayer::init_dims(params.features as usize, params.classes as usize, params.seed);
        let mut session = Self {
            conn,
            params,
            layer,
            he: None,
            pending: None,
            rng: ChaCha20Rng::seed_from_u64(private_seed),
            max_level: 0,
            history: Vec::new(),
            record_weights: opts.record_weights,
        };
        if params.mode == Mode::He {
            let msg = session.conn.expect(MsgType::CtxPub)?;
            match session.setup_he(&msg.payload, private_seed) {
                Ok(he) => session.he = Some(he),
                Err(e) => {
                    session.conn.send_error(&e.to_string());
                    return Err(e);
                }
            }
        }
        Ok(session)
    }

    fn setup_he(&self, payload: &[u8], seed: u64) -> Result<ServerHe, SplitError> {
        let public = deserialize_public_context(payload)?;
        let expected = CkksContext::new(self.params.he_set.params())?;
        if public.context.fingerprint() != expected.fingerprint() {
            return Err(SplitError::Protocol(format!(
                "public context does not use the agreed parameter set {}",
                self.params.he_set.name()
            )));
        }
        let p = &self.params;
        let packing = Packing::new(p.batch_size as usize, p.classes as usize, p.features as usize, public.context.slots())?;
        ServerHe::new(public, packing, p.lr, seed)
    }

    pub fn params(&self) -> &SyncParams {
        &self.params
    }

    pub fn layer(&self) -> &LinearLayer {
        &self.layer
    }

    pub fn stats(&self) -> &SessionStats {
        self.conn.stats()
    }

    /// Highest ciphertext level seen so far, received or produced.
    pub fn max_level(&self) -> usize {
        self.max_level
    }

    fn phase(&mut self, name: &str, start: Instant) {
        self.conn.stats_mut().add_phase(name, start.elapsed());
    }

    fn track_levels(&mut self, cts: &[Ciphertext]) -> Result<(), SplitError> {
        for ct in cts {
            self.max_level = self.max_level.max(ct.level());
            if ct.level() > MAX_PROTOCOL_LEVEL {
                return Err(SplitError::Precision(format!("ciphertext at level {} exceeds the depth budget", ct.level())));
            }
        }
        Ok(())
    }

    fn recv_acts(&mut self) -> Result<Vec<Ciphertext>, SplitError> {
        let msg = self.conn.expect(MsgType::EncAct)?;
        let he = self.he.as_ref().expect("encrypted mode");
        let cts = decode_ct_batch(&msg.payload, he.context())?;
        self.track_levels(&cts)?;
        Ok(cts)
    }

    fn recv_plain_act(&mut self, max_rows: usize) -> Result<Tensor, SplitError> {
        let a = decode_tensor(&self.conn.expect(MsgType::PlainAct)?.payload)?;
        let (rows, f) = a.dims2().map_err(|_| SplitError::Protocol(format!("activation shape {:?}", a.shape())))?;
        if rows == 0 || rows > max_rows || f != self.params.features as usize {
            return Err(SplitError::Protocol(format!("activation shape {:?}", a.shape())));
        }
        Ok(a)
    }

    fn recv_grad(&mut self) -> Result<Tensor, SplitError> {
        let g = GradPayload::decode(&self.conn.expect(MsgType::GradAl)?.payload)?.grad_al;
        let want = [self.params.batch_size as usize, self.params.classes as usize];
        if g.shape() != want {
            return Err(SplitError::Protocol(format!("GRAD_AL shape {:?}, expected {want:?}", g.shape())));
        }
        if !g.is_finite() {
            return Err(SplitError::Precision("GRAD_AL is not finite".into()));
        }
        Ok(g)
    }

    fn refresh_due(&self, iteration: usize) -> bool {
        let k = self.params.refresh_every as usize;
        (iteration + 1).is_multiple_of(k) || iteration + 1 == self.params.batches as usize
    }

    /// One training iteration.
    pub fn train_iteration(&mut self, iteration: usize) -> Result<(), SplitError> {
        match self.params.mode {
            Mode::Plain => self.plain_iteration(),
            Mode::He => self.he_iteration(iteration),
        }?;
        if self.record_weights {
            self.history.push(self.layer.clone());
        }
        Ok(())
    }

    fn plain_iteration(&mut self) -> Result<(), SplitError> {
        let a = self.recv_plain_act(self.params.batch_size as usize)?;
        let t = Instant::now();
        let z = self.layer.forward(&a)?;
        self.phase("server_forward", t);
        self.conn.send(&WireMessage::new(MsgType::PlainOut, encode_tensor(&z)?))?;
        let g = self.recv_grad()?;
        let t = Instant::now();
        let (gx, gw, gb) = self.layer.backward(&g, &a)?;
        self.conn.send(&WireMessage::new(MsgType::GradAlow, encode_tensor(&gx)?))?;
        self.layer.sgd(&gw, &gb, self.params.lr)?;
        self.phase("server_backward", t);
        Ok(())
    }

    fn he_iteration(&mut self, iteration: usize) -> Result<(), SplitError> {
        let acts = self.recv_acts()?;
        let t = Instant::now();
        let out = self.he.as_ref().expect("encrypted mode").forward(&acts, &self.layer)?;
        self.track_levels(&out)?;
        self.phase("server_forward", t);
        self.conn.send(&WireMessage::new(MsgType::EncOut, encode_ct_batch(&out)))?;

        let g = self.recv_grad()?;
        let gx = matmul(&g, &self.layer.w)?;
        self.conn.send(&WireMessage::new(MsgType::GradAlow, encode_tensor(&gx)?))?;

        let t = Instant::now();
        let grad = self.he.as_ref().expect("encrypted mode").weight_gradient(&acts, &g)?;
        self.track_levels(&grad)?;
        let pending = match self.pending.take() {
            None => grad,
            Some(mut acc) => {
                let ctx = self.he.as_ref().expect("encrypted mode").context();
                for (a, b) in acc.iter_mut().zip(&grad) {
                    ctx.add_assign_ct(a, b)?;
                }
                acc
            }
        };
        let gb = column_sums(&g);
        sgd_step(&mut self.layer.b, &gb, self.params.lr)?;
        self.phase("server_gradient", t);

        if !self.refresh_due(iteration) {
            self.pending = Some(pending);
            return Ok(());
        }
        let t = Instant::now();
        let mask = self.draw_mask();
        let mut masked = self.layer.w.clone();
        for (m, r) in masked.data_mut().iter_mut().zip(mask.data()) {
            *m += r;
        }
        let enc = self.he.as_mut().expect("encrypted mode").refresh(&pending, &masked)?;
        self.track_levels(&enc)?;
        self.phase("server_refresh", t);
        self.conn.send(&WireMessage::new(MsgType::EncW, encode_ct_batch(&enc)))?;
        let dec = decode_tensor(&self.conn.expect(MsgType::DecW)?.payload)?;
        if dec.shape() != self.layer.w.shape() || !dec.is_finite() {
            return Err(SplitError::Protocol(format!("DEC_W shape {:?} or values invalid", dec.shape())));
        }
        for ((w, d), r) in self.layer.w.data_mut().iter_mut().zip(dec.data()).zip(mask.data()) {
            *w = d - r;
        }
        Ok(())
    }

    /// Uniform additive mask, wide relative to the weights it hides.
    fn draw_mask(&mut self) -> Tensor {
        let half = 10.0 * self.layer.w.std().max(1e-3);
        let shape = self.layer.w.shape().to_vec();
        let data = (0..self.layer.w.len()).map(|_| self.rng.random_range(-half..half)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    /// Answers the evaluation requests that follow `EPOCH_END`.
    pub fn end_epoch(&mut self, epoch: usize) -> Result<(), SplitError> {
        let end = EpochEnd::decode(&self.conn.expect(MsgType::EpochEnd)?.payload)?;
        if end.epoch as usize != epoch {
            return Err(SplitError::Protocol(format!("EPOCH_END for epoch {}, expected {epoch}", end.epoch)));
        }
        let t = Instant::now();
        for _ in 0..end.eval_batches {
            match self.params.mode {
                Mode::Plain => {
                    let a = self.recv_plain_act(self.params.batch_size as usize)?;
                    let z = self.layer.forward(&a)?;
                    self.conn.send(&WireMessage::new(MsgType::PlainOut, encode_tensor(&z)?))?;
                }
                Mode::He => {
                    let acts = self.recv_acts()?;
                    let out = self.he.as_ref().expect("encrypted mode").forward(&acts, &self.layer)?;
                    self.track_levels(&out)?;
                    self.conn.send(&WireMessage::new(MsgType::EncOut, encode_ct_batch(&out)))?;
                }
            }
        }
        self.phase("evaluation", t);
        Ok(())
    }

    pub fn finish(mut self) -> Result<ServerOutcome, SplitError> {
        self.conn.expect(MsgType::Bye)?;
        let (_, stats) = self.conn.into_inner();
        let mut report = RunReport::new(
            match self.params.mode {
                Mode::Plain => "split-plain",
                Mode::He => "split-he",
            },
            "server",
        );
        if self.params.mode == Mode::He {
            report.he_set = Some(self.params.he_set.name().to_string());
        }
        Ok(ServerOutcome { layer: self.layer, report, stats, history: self.history, max_level: self.max_level })
    }

    pub fn abort(&mut self, reason: &str) {
        self.conn.send_error(reason);
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (rows, cols) = g.dims2().expect("2-d gradient");
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::new(vec![cols], out).expect("shape matches")
}

pub struct ServerOutcome {
    pub layer: LinearLayer,
    pub report: RunReport,
    pub stats: SessionStats,
    /// Layer after every iteration, when requested.
    pub history: Vec<LinearLayer>,
    pub max_level: usize,
}

/// Serves one client session to completion.
pub fn server_run<S: Read + Write>(stream: S, opts: &ServerOptions) -> Result<ServerOutcome, SplitError> {
    let mut session = ServerSession::accept(stream, opts)?;
    let p = *session.params();
    let mut rows = Vec::with_capacity(p.epochs as usize);
    for epoch in 0..p.epochs as usize {
        let start = Instant::now();
        let before = session.stats().snapshot();
        let result = (0..p.batches as usize)
            .try_for_each(|it| session.train_iteration(it).map_err(|e| e.at(epoch, it)))
            .and_then(|_| session.end_epoch(epoch).map_err(|e| e.at(epoch, p.batches as usize)));
        if let Err(e) = result {
            // a dead transport cannot carry the explanation
            if !matches!(e.root(), SplitError::Wire(WireError::Io(_) | WireError::Truncated { .. })) {
                session.abort(&e.to_string());
            }
            return Err(e);
        }
        let delta = session.stats().since(&before);
        rows.push(EpochRow {
            epoch,
            seconds: start.elapsed().as_secs_f64(),
            bytes_by_type: crate::telemetry::bytes_by_type(&delta),
            bytes_sent: delta.total_sent(),
            bytes_received: delta.total_received(),
            ..Default::default()
        });
    }
    let mut outcome = session.finish()?;
    outcome.report.epochs = rows;
    outcome.report.config.insert("batch_size".into(), p.batch_size.to_string());
    outcome.report.config.insert("refresh_every".into(), p.refresh_every.to_string());
    outcome.report.finalize(&outcome.stats);
    outcome.report.config.insert("max_ciphertext_level".into(), outcome.max_level.to_string());
    Ok(outcome)
}
