//! Wire protocol between the federation server and its clients.
//!
//! Every message is an [`Envelope`] framed as a 4-byte big-endian length
//! followed by that many bytes of UTF-8 JSON with fields in the order
//! (v, kind, msg_id, correlates, payload). The same framing runs over the
//! in-process simulated network and real TCP sockets, so the two modes are
//! byte-compatible.

pub mod sim;
pub mod tcp;

use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Protocol version this build speaks.
pub const PROTOCOL_VERSION: u32 = 1;

/// Serialized payloads are capped at 64 MiB.
pub const MAX_FRAME_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("payload exceeds the 64 MiB frame limit ({0} bytes)")]
    OversizePayload(usize),
    #[error("stream ended mid-frame")]
    TruncatedFrame,
    #[error("frame is not a valid envelope: {0}")]
    MalformedPayload(String),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u32),
    #[error("connection closed by peer")]
    Closed,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

const KNOWN_KINDS: [&str; 8] = [
    "REGISTER",
    "REGISTER_ACK",
    "QUERY",
    "RESPONSE",
    "MODEL_BROADCAST",
    "MODEL_UPDATE",
    "ERROR",
    "BYE",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsgKind {
    #[serde(rename = "REGISTER")]
    Register,
    #[serde(rename = "REGISTER_ACK")]
    RegisterAck,
    #[serde(rename = "QUERY")]
    Query,
    #[serde(rename = "RESPONSE")]
    Response,
    #[serde(rename = "MODEL_BROADCAST")]
    ModelBroadcast,
    #[serde(rename = "MODEL_UPDATE")]
    ModelUpdate,
    #[serde(rename = "ERROR")]
    Error,
    #[serde(rename = "BYE")]
    Bye,
}

impl MsgKind {
    fn expects_correlation(&self) -> bool {
        matches!(self, MsgKind::RegisterAck | MsgKind::Response)
    }
}

/// One protocol message. Field order is part of the wire contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub kind: MsgKind,
    pub msg_id: String,
    pub correlates: Option<String>,
    pub payload: Value,
}

impl Envelope {
    pub fn new(kind: MsgKind, msg_id: impl Into<String>, payload: Value) -> Self {
        Envelope {
            v: PROTOCOL_VERSION,
            kind,
            msg_id: msg_id.into(),
            correlates: None,
            payload,
        }
    }

    pub fn reply(
        kind: MsgKind,
        msg_id: impl Into<String>,
        correlates: impl Into<String>,
        payload: Value,
    ) -> Self {
        Envelope {
            v: PROTOCOL_VERSION,
            kind,
            msg_id: msg_id.into(),
            correlates: Some(correlates.into()),
            payload,
        }
    }

    fn check(&self) -> Result<(), TransportError> {
        if self.v != PROTOCOL_VERSION {
            return Err(TransportError::UnsupportedVersion(self.v));
        }
        if self.kind.expects_correlation() && self.correlates.is_none() {
            return Err(TransportError::MalformedPayload(
                "response kinds must correlate to a request".into(),
            ));
        }
        Ok(())
    }
}

/// Encodes an envelope as a length-prefixed JSON frame.
pub fn frame(envelope: &Envelope) -> Result<Vec<u8>, TransportError> {
    envelope.check()?;
    let body = serde_json::to_vec(envelope)
        .map_err(|e| TransportError::MalformedPayload(e.to_string()))?;
    if body.len() > MAX_FRAME_PAYLOAD {
        return Err(TransportError::OversizePayload(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend((body.len() as u32).to_be_bytes());
    out.extend(body);
    Ok(out)
}

fn decode_body(body: &[u8]) -> Result<Envelope, TransportError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| TransportError::MalformedPayload(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| TransportError::MalformedPayload("not an object".into()))?;
    if let Some(v) = obj.get("v").and_then(Value::as_u64) {
        if v as u32 != PROTOCOL_VERSION {
            return Err(TransportError::UnsupportedVersion(v as u32));
        }
    }
    if let Some(kind) = obj.get("kind").and_then(Value::as_str) {
        if !KNOWN_KINDS.contains(&kind) {
            return Err(TransportError::UnknownKind(kind.to_string()));
        }
    }
    let envelope: Envelope = serde_json::from_value(value)
        .map_err(|e| TransportError::MalformedPayload(e.to_string()))?;
    envelope.check()?;
    Ok(envelope)
}

/// Parses one frame from the front of a buffer; returns the envelope and the
/// bytes consumed, or `None` when the buffer does not yet hold a full frame.
pub fn unframe_bytes(buf: &[u8]) -> Result<Option<(Envelope, usize)>, TransportError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(TransportError::OversizePayload(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let envelope = decode_body(&buf[4..4 + len])?;
    Ok(Some((envelope, 4 + len)))
}

/// Blocking read of exactly one frame from a byte stream.
pub fn unframe(reader: &mut impl Read) -> Result<Envelope, TransportError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = reader.read(&mut header[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Err(TransportError::Closed)
            } else {
                Err(TransportError::TruncatedFrame)
            };
        }
        filled += n;
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(TransportError::OversizePayload(len));
    }
    let mut body = vec![0u8; len];
    reader
        .read_exact(&mut body)
        .map_err(|_| TransportError::TruncatedFrame)?;
    decode_body(&body)
}

/// A duplex, ordered message channel to one peer.
pub trait Connection: Send {
    fn send(&mut self, envelope: &Envelope) -> Result<(), TransportError>;

    /// Waits up to `timeout` for the next envelope. `Ok(None)` means the
    /// deadline passed with nothing to read.
    fn try_recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError>;

    /// Blocks until an envelope arrives or the peer goes away.
    fn recv(&mut self) -> Result<Envelope, TransportError> {
        loop {
            if let Some(env) = self.try_recv(Duration::from_secs(3600))? {
                return Ok(env);
            }
        }
    }
}
