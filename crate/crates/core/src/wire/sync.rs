use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::ckks::HeSet;

use super::{Connection, MsgType, WireError, WireMessage};

/// Session protocol version carried in `HELLO`.
pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    He,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::He => "he",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Mode::Plain),
            "he" => Ok(Mode::He),
            other => Err(format!("unknown mode '{other}' (expected plain or he)")),
        }
    }
}

/// Training parameters both parties must agree on before the first batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncParams {
    pub mode: Mode,
    pub he_set: HeSet,
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: u32,
    pub batches: u32,
    /// Seed for the server layer's initial weights.
    pub seed: u64,
    pub features: u32,
    pub classes: u32,
    /// Encrypted-weight refresh period in iterations.
    pub refresh_every: u32,
}

const SYNC_LEN: usize = 1 + 1 + 4 + 8 + 4 + 4 + 8 + 4 + 4 + 4;

fn he_set_code(s: HeSet) -> u8 {
    match s {
        HeSet::S1 => 1,
        HeSet::S2 => 2,
        HeSet::Toy => 3,
    }
}

impl SyncParams {
    /// Rejects values no session can run with; names the offending field.
    pub fn validate(&self) -> Result<(), WireError> {
        let bad = |field, msg: &str| Err(WireError::Sync { field, msg: msg.to_string() });
        if self.batch_size == 0 {
            return bad("batch_size", "batch size n must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "learning rate must be positive");
        }
        if self.batches == 0 {
            return bad("batches", "batch count must be positive");
        }
        if self.features == 0 {
            return bad("features", "feature count must be positive");
        }
        if self.classes == 0 {
            return bad("classes", "class count must be positive");
        }
        if self.refresh_every == 0 {
            return bad("refresh_every", "refresh period must be positive");
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SYNC_LEN);
        out.push(match self.mode {
            Mode::Plain => 0,
            Mode::He => 1,
        });
        out.push(he_set_code(self.he_set));
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        out.extend_from_slice(&self.batch_size.to_le_bytes());
        out.extend_from_slice(&self.batches.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.features.to_le_bytes());
        out.extend_from_slice(&self.classes.to_le_bytes());
        out.extend_from_slice(&self.refresh_every.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() != SYNC_LEN {
            return Err(WireError::Codec(format!("SYNC payload is {} bytes, expected {SYNC_LEN}", b.len())));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let mode = match b[0] {
            0 => Mode::Plain,
            1 => Mode::He,
            m => return Err(WireError::Codec(format!("unknown mode code {m}"))),
        };
        let he_set = match b[1] {
            1 => HeSet::S1,
            2 => HeSet::S2,
            3 => HeSet::Toy,
            s => return Err(WireError::Codec(format!("unknown HE set code {s}"))),
        };
        Ok(Self {
            mode,
            he_set,
            epochs: u32_at(2),
            lr: f64::from_bits(u64_at(6)),
            batch_size: u32_at(14),
            batches: u32_at(18),
            seed: u64_at(22),
            features: u32_at(30),
            classes: u32_at(34),
            refresh_every: u32_at(38),
        })
    }
}

/// Server-side constraints on a proposal; `None` accepts any value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyncPolicy {
    pub mode: Option<Mode>,
    pub he_set: Option<HeSet>,
    pub epochs: Option<u32>,
    pub lr: Option<f64>,
    pub batch_size: Option<u32>,
    pub features: Option<u32>,
    pub classes: Option<u32>,
}

impl SyncPolicy {
    pub fn check(&self, p: &SyncParams) -> Result<(), WireError> {
        fn cmp<T: PartialEq + std::fmt::Debug>(field: &'static str, want: &Option<T>, got: &T) -> Result<(), WireError> {
            match want {
                Some(w) if w != got => {
                    Err(WireError::Sync { field, msg: format!("server requires {w:?}, client proposed {got:?}") })
                }
                _ => Ok(()),
            }
        }
        cmp("mode", &self.mode, &p.mode)?;
        cmp("he_set", &self.he_set, &p.he_set)?;
        cmp("epochs", &self.epochs, &p.epochs)?;
        cmp("lr", &self.lr, &p.lr)?;
        cmp("batch_size", &self.batch_size, &p.batch_size)?;
        cmp("features", &self.features, &p.features)?;
        cmp("classes", &self.classes, &p.classes)
    }
}

fn hello(role: Role) -> WireMessage {
    let mut p = PROTOCOL_VERSION.to_le_bytes().to_vec();
    p.push(match role {
        Role::Client => 0,
        Role::Server => 1,
    });
    WireMessage::new(MsgType::Hello, p)
}

fn check_hello(msg: &WireMessage, want_role: u8) -> Result<(), WireError> {
    if msg.payload.len() != 3 {
        return Err(WireError::Protocol("malformed HELLO".into()));
    }
    let v = u16::from_le_bytes([msg.payload[0], msg.payload[1]]);
    if v != PROTOCOL_VERSION {
        return Err(WireError::Sync { field: "version", msg: format!("peer speaks {v}, this side {PROTOCOL_VERSION}") });
    }
    if msg.payload[2] != want_role {
        return Err(WireError::Protocol("peer announced the same role".into()));
    }
    Ok(())
}

/// Client side: HELLO exchange, then propose `params` and wait for the echo.
pub fn handshake_client<S: Read + Write>(conn: &mut Connection<S>, params: &SyncParams) -> Result<SyncParams, WireError> {
    params.validate()?;
    conn.send(&hello(Role::Client))?;
    check_hello(&conn.expect(MsgType::Hello)?, 1)?;
    conn.send(&WireMessage::new(MsgType::Sync, params.encode()))?;
    // a rejection at this point is a configuration mismatch, not a transport fault
    let reply = conn.expect(MsgType::Sync).map_err(|e| match e {
        WireError::Remote(msg) => WireError::Sync { field: "proposal", msg },
        e => e,
    })?;
    let echo = SyncParams::decode(&reply.payload)?;
    if &echo != params {
        return Err(WireError::Sync { field: "echo", msg: "server echoed different parameters".into() });
    }
    Ok(echo)
}

/// Server side: answer HELLO, validate the proposal against `policy`, echo it.
/// Rejections are reported to the client as an `ERROR` frame.
pub fn handshake_server<S: Read + Write>(conn: &mut Connection<S>, policy: &SyncPolicy) -> Result<SyncParams, WireError> {
    let h = conn.expect(MsgType::Hello)?;
    if let Err(e) = check_hello(&h, 0) {
        conn.send_error(&e.to_string());
        return Err(e);
    }
    conn.send(&hello(Role::Server))?;
    let proposal = conn.expect(MsgType::Sync)?;
    let checked = SyncParams::decode(&proposal.payload).and_then(|p| {
        p.validate()?;
        policy.check(&p)?;
        Ok(p)
    });
    match checked {
        Ok(p) => {
            conn.send(&WireMessage::new(MsgType::Sync, p.encode()))?;
            Ok(p)
        }
        Err(e) => {
            conn.send_error(&e.to_string());
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> SyncParams {
        SyncParams {
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
        }
    }

    #[test]
    fn sync_roundtrip() {
        let p = sample();
        assert_eq!(SyncParams::decode(&p.encode()).unwrap(), p);
        assert_eq!(p.encode().len(), SYNC_LEN);
    }

    #[test]
    fn zero_batch_names_field() {
        let mut p = sample();
        p.batch_size = 0;
        match p.validate() {
            Err(WireError::Sync { field, .. }) => assert_eq!(field, "batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn policy_mismatch_names_field() {
        let policy = SyncPolicy { features: Some(100), ..Default::default() };
        match policy.check(&sample()) {
            Err(WireError::Sync { field, .. }) => assert_eq!(field, "features"),
            other => panic!("{other:?}"),
        }
        assert!(SyncPolicy::default().check(&sample()).is_ok());
    }
}
