//! Framed TCP messages: `"HSPL" | version u16 | type u8 | len u32 | payload`.

mod payload;
mod stats;
mod sync;

use std::io::{self, Read, Write};

use thiserror::Error;

pub use payload::{
    check_dims, decode_ct_batch, decode_tensor, decode_tensor_prefix, encode_ct_batch, encode_tensor, EpochEnd, GradPayload,
    TENSOR_DTYPE_F64,
};
pub use stats::{Direction, MessageRecord, SessionStats, TypeCounters};
pub use sync::{handshake_client, handshake_server, Mode, Role, SyncParams, SyncPolicy, PROTOCOL_VERSION};

pub const MAGIC: &[u8; 4] = b"HSPL";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 11;
pub const DEFAULT_MAX_PAYLOAD: usize = 1 << 30;
pub const DEFAULT_PORT: u16 = 9009;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("payload of {len} bytes exceeds the limit of {max}")]
    Size { len: usize, max: usize },
    #[error("connection closed mid-frame ({got} of {want} bytes)")]
    Truncated { got: usize, want: usize },
    #[error("sync error on field '{field}': {msg}")]
    Sync { field: &'static str, msg: String },
    #[error("codec error: {0}")]
    Codec(String),
    #[error("peer reported an error: {0}")]
    Remote(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Sync = 2,
    CtxPub = 3,
    EncAct = 4,
    EncOut = 5,
    GradAl = 6,
    GradAlow = 7,
    EncW = 8,
    DecW = 9,
    PlainAct = 10,
    PlainOut = 11,
    EpochEnd = 12,
    Bye = 13,
    Error = 14,
}

impl MsgType {
    pub const ALL: [MsgType; 14] = [
        MsgType::Hello,
        MsgType::Sync,
        MsgType::CtxPub,
        MsgType::EncAct,
        MsgType::EncOut,
        MsgType::GradAl,
        MsgType::GradAlow,
        MsgType::EncW,
        MsgType::DecW,
        MsgType::PlainAct,
        MsgType::PlainOut,
        MsgType::EpochEnd,
        MsgType::Bye,
        MsgType::Error,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::Sync => "SYNC",
            MsgType::CtxPub => "CTX_PUB",
            MsgType::EncAct => "ENC_ACT",
            MsgType::EncOut => "ENC_OUT",
            MsgType::GradAl => "GRAD_AL",
            MsgType::GradAlow => "GRAD_ALOW",
            MsgType::EncW => "ENC_W",
            MsgType::DecW => "DEC_W",
            MsgType::PlainAct => "PLAIN_ACT",
            MsgType::PlainOut => "PLAIN_OUT",
            MsgType::EpochEnd => "EPOCH_END",
            MsgType::Bye => "BYE",
            MsgType::Error => "ERROR",
        }
    }
}

impl std::fmt::Display for MsgType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn empty(msg_type: MsgType) -> Self {
        Self { msg_type, payload: Vec::new() }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

/// Full frame bytes for `msg`.
pub fn encode_frame(msg: &WireMessage, max_payload: usize) -> Result<Vec<u8>, WireError> {
    if msg.payload.len() > max_payload || msg.payload.len() > u32::MAX as usize {
        return Err(WireError::Size { len: msg.payload.len(), max: max_payload });
    }
    let mut out = Vec::with_capacity(msg.frame_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage, max_payload: usize) -> Result<usize, WireError> {
    let frame = encode_frame(msg, max_payload)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(WireError::Truncated { got, want: buf.len() }),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Blocks until one full frame has arrived.
pub fn read_frame<R: Read>(r: &mut R, max_payload: usize) -> Result<WireMessage, WireError> {
    let mut header = [0u8; HEADER_LEN];
    read_full(r, &mut header)?;
    decode_header(&header, max_payload).and_then(|(msg_type, len)| {
        let mut payload = vec![0u8; len];
        read_full(r, &mut payload)?;
        Ok(WireMessage { msg_type, payload })
    })
}

/// Validates an 11-byte header and returns the type and payload length.
pub fn decode_header(header: &[u8; HEADER_LEN], max_payload: usize) -> Result<(MsgType, usize), WireError> {
    if &header[..4] != MAGIC {
        return Err(WireError::Protocol(format!("bad magic {:?}", String::from_utf8_lossy(&header[..4]))));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != WIRE_VERSION {
        return Err(WireError::Protocol(format!("unsupported frame version {version} (expected {WIRE_VERSION})")));
    }
    let msg_type =
        MsgType::from_u8(header[6]).ok_or_else(|| WireError::Protocol(format!("unknown message type {}", header[6])))?;
    let len = u32::from_le_bytes(header[7..11].try_into().unwrap()) as usize;
    if len > max_payload {
        return Err(WireError::Size { len, max: max_payload });
    }
    Ok((msg_type, len))
}

pub fn decode_frame(bytes: &[u8], max_payload: usize) -> Result<WireMessage, WireError> {
    let mut cursor = bytes;
    let msg = read_frame(&mut cursor, max_payload)?;
    if !cursor.is_empty() {
        return Err(WireError::Protocol(format!("{} trailing bytes after frame", cursor.len())));
    }
    Ok(msg)
}

/// One side of a session: a byte stream plus counters for everything sent and received.
pub struct Connection<S> {
    stream: S,
    stats: SessionStats,
    max_payload: usize,
}

impl<S: Read + Write> Connection<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, stats: SessionStats::default(), max_payload: DEFAULT_MAX_PAYLOAD }
    }

    pub fn with_max_payload(mut self, max: usize) -> Self {
        self.max_payload = max;
        self
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        let n = write_frame(&mut self.stream, msg, self.max_payload)?;
        self.stats.record(Direction::Sent, msg.msg_type, n);
        Ok(())
    }

    pub fn recv(&mut self) -> Result<WireMessage, WireError> {
        let msg = read_frame(&mut self.stream, self.max_payload)?;
        self.stats.record(Direction::Received, msg.msg_type, msg.frame_len());
        Ok(msg)
    }

    /// Receives one message and fails unless it has type `want`. An `ERROR`
    /// frame from the peer becomes [`WireError::Remote`].
    pub fn expect(&mut self, want: MsgType) -> Result<WireMessage, WireError> {
        let msg = self.recv()?;
        if msg.msg_type == want {
            return Ok(msg);
        }
        if msg.msg_type == MsgType::Error {
            return Err(WireError::Remote(String::from_utf8_lossy(&msg.payload).into_owned()));
        }
        Err(WireError::Protocol(format!("expected {want}, received {}", msg.msg_type)))
    }

    /// Best effort: tells the peer why the session is being aborted.
    pub fn send_error(&mut self, reason: &str) {
        let _ = self.send(&WireMessage::new(MsgType::Error, reason.as_bytes().to_vec()));
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut SessionStats {
        &mut self.stats
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    pub fn into_inner(self) -> (S, SessionStats) {
        (self.stream, self.stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bye_is_header_only() {
        let f = encode_frame(&WireMessage::empty(MsgType::Bye), DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!(f.len(), 11);
        assert_eq!(&f[..4], b"HSPL");
        assert_eq!(f[6], 13);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut f = encode_frame(&WireMessage::empty(MsgType::Bye), 16).unwrap();
        f[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_frame(&f, 16), Err(WireError::Protocol(_))));
        let mut f = encode_frame(&WireMessage::empty(MsgType::Bye), 16).unwrap();
        f[4] = 9;
        assert!(matches!(decode_frame(&f, 16), Err(WireError::Protocol(_))));
    }

    #[test]
    fn size_limit_and_truncation() {
        let msg = WireMessage::new(MsgType::EncAct, vec![7; 100]);
        assert!(matches!(encode_frame(&msg, 99), Err(WireError::Size { .. })));
        let f = encode_frame(&msg, 100).unwrap();
        assert!(matches!(decode_frame(&f, 99), Err(WireError::Size { len: 100, max: 99 })));
        assert!(matches!(decode_frame(&f[..50], 100), Err(WireError::Truncated { got: 39, want: 100 })));
        assert!(matches!(decode_frame(&f[..5], 100), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn connection_counts_frames() {
        let mut buf = Vec::new();
        {
            let mut c = Connection::new(io::Cursor::new(&mut buf));
            c.send(&WireMessage::new(MsgType::GradAl, vec![1, 2, 3])).unwrap();
            c.send(&WireMessage::empty(MsgType::Bye)).unwrap();
            assert_eq!(c.stats().total_sent(), 14 + 11);
        }
        let mut c = Connection::new(io::Cursor::new(buf));
        assert_eq!(c.expect(MsgType::GradAl).unwrap().payload, vec![1, 2, 3]);
        assert!(matches!(c.expect(MsgType::EncW), Err(WireError::Protocol(_))));
        assert_eq!(c.stats().total_received(), 25);
    }
}
