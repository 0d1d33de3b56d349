//! Framed binary protocol shared by the client-edge and edge-cloud hops.
//!
//! ```text
//! frame    := magic "CIC1" | msg_type u8 | request_id u64 | body_len u32 | body
//! request  := task_kind u8 | user_id u32 | descriptor
//!   descriptor (kind 1)   := dim u16 | dim x f32
//!   descriptor (kind 2,3) := 32 hash bytes
//! response := served_from u8 | result_len u32 | result bytes
//! ```
//!
//! All integers and floats are big-endian. `msg_type` is 1 for requests and
//! 2 for responses; `served_from` is 1 for the edge and 2 for the cloud.

use bytes::{Buf, BufMut, BytesMut};
use thiserror::Error;

use crate::descriptor::{ContentHash, Descriptor, FeatureVector, TaskKind};
use crate::simcache::ResultPayload;
use crate::tiers::ServedFrom;

pub const MAGIC: [u8; 4] = *b"CIC1";
pub const HEADER_LEN: usize = 17;
pub const MAX_BODY_LEN: u32 = 64 * 1024 * 1024;

const MSG_REQUEST: u8 = 1;
const MSG_RESPONSE: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("body length {0} exceeds the 64 MiB limit")]
    OversizeBody(u32),
    #[error("stream closed with {buffered} bytes of an incomplete frame")]
    TruncatedBody { buffered: usize },
    #[error("malformed body: {0}")]
    MalformedBody(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestMessage {
    pub request_id: u64,
    pub user_id: u32,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMessage {
    pub request_id: u64,
    pub served_from: ServedFrom,
    pub result: ResultPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(RequestMessage),
    Response(ResponseMessage),
}

impl Message {
    pub fn request_id(&self) -> u64 {
        match self {
            Message::Request(r) => r.request_id,
            Message::Response(r) => r.request_id,
        }
    }
}

/// Encoded size of a request frame carrying `descriptor`.
pub fn request_frame_len(descriptor: &Descriptor) -> usize {
    HEADER_LEN + request_body_len(descriptor)
}

fn request_body_len(descriptor: &Descriptor) -> usize {
    1 + 4 + descriptor_len(descriptor)
}

/// Wire length of a descriptor on its own (no kind or user fields).
pub fn descriptor_len(descriptor: &Descriptor) -> usize {
    match descriptor.as_vector() {
        Some(v) => 2 + 4 * v.dim(),
        None => 32,
    }
}

/// Appends the descriptor encoding (`dim | values` or the hash bytes).
pub fn put_descriptor(buf: &mut impl BufMut, descriptor: &Descriptor) {
    if let Some(v) = descriptor.as_vector() {
        let dim = u16::try_from(v.dim()).expect("feature dim fits in u16");
        buf.put_u16(dim);
        for &x in v.values() {
            buf.put_f32(x);
        }
    } else if let Some(h) = descriptor.as_hash() {
        buf.put_slice(h.as_bytes());
    }
}

/// Parses a descriptor of `kind` occupying all of `bytes`.
pub fn parse_descriptor(kind: TaskKind, mut bytes: &[u8]) -> Result<Descriptor, ProtocolError> {
    if kind.uses_vector_key() {
        if bytes.len() < 2 {
            return Err(malformed("vector descriptor shorter than its dim field"));
        }
        let dim = bytes.get_u16() as usize;
        if dim == 0 {
            return Err(malformed("vector descriptor with dim 0"));
        }
        if bytes.len() != 4 * dim {
            return Err(malformed(format!(
                "dim {dim} needs {} value bytes, found {}",
                4 * dim,
                bytes.len()
            )));
        }
        let values = (0..dim).map(|_| bytes.get_f32()).collect();
        let vector = FeatureVector::new(values).map_err(|e| malformed(e.to_string()))?;
        Ok(Descriptor::recognition(vector))
    } else {
        let hash = ContentHash::from_slice(bytes)
            .ok_or_else(|| malformed(format!("hash descriptor of {} bytes", bytes.len())))?;
        Descriptor::hashed(kind, hash).map_err(|e| malformed(e.to_string()))
    }
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedBody(msg.into())
}

/// Appends the canonical encoding of `message` to `buf`.
pub fn encode_into(message: &Message, buf: &mut BytesMut) {
    buf.put_slice(&MAGIC);
    match message {
        Message::Request(r) => {
            buf.put_u8(MSG_REQUEST);
            buf.put_u64(r.request_id);
            buf.put_u32(request_body_len(&r.descriptor) as u32);
            buf.put_u8(r.descriptor.kind().code());
            buf.put_u32(r.user_id);
            put_descriptor(buf, &r.descriptor);
        }
        Message::Response(r) => {
            buf.put_u8(MSG_RESPONSE);
            buf.put_u64(r.request_id);
            buf.put_u32(5 + r.result.len() as u32);
            buf.put_u8(r.served_from.code());
            buf.put_u32(r.result.len() as u32);
            buf.put_slice(r.result.as_bytes());
        }
    }
}

pub fn encode(message: &Message) -> Vec<u8> {
    let mut buf = BytesMut::new();
    encode_into(message, &mut buf);
    buf.to_vec()
}

/// Outcome of decoding from the front of a buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// A complete frame and the number of bytes it occupied.
    Frame(Message, usize),
    NeedMoreBytes,
}

/// Decodes at most one frame from the front of `buf`.
///
/// Header fields are checked as soon as they are available, so garbage is
/// rejected without waiting for a full header.
pub fn decode(buf: &[u8]) -> Result<Decoded, ProtocolError> {
    let magic_seen = buf.len().min(4);
    if buf[..magic_seen] != MAGIC[..magic_seen] {
        return Err(ProtocolError::BadMagic);
    }
    if buf.len() < 5 {
        return Ok(Decoded::NeedMoreBytes);
    }
    let msg_type = buf[4];
    if msg_type != MSG_REQUEST && msg_type != MSG_RESPONSE {
        return Err(ProtocolError::UnknownType(msg_type));
    }
    if buf.len() < HEADER_LEN {
        return Ok(Decoded::NeedMoreBytes);
    }
    let mut header = &buf[5..HEADER_LEN];
    let request_id = header.get_u64();
    let body_len = header.get_u32();
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::OversizeBody(body_len));
    }
    let total = HEADER_LEN + body_len as usize;
    if buf.len() < total {
        return Ok(Decoded::NeedMoreBytes);
    }
    let body = &buf[HEADER_LEN..total];
    let message = match msg_type {
        MSG_REQUEST => Message::Request(decode_request(request_id, body)?),
        _ => Message::Response(decode_response(request_id, body)?),
    };
    Ok(Decoded::Frame(message, total))
}

fn decode_request(request_id: u64, mut body: &[u8]) -> Result<RequestMessage, ProtocolError> {
    if body.len() < 5 {
        return Err(malformed("request body shorter than 5 bytes"));
    }
    let code = body.get_u8();
    let kind = TaskKind::from_code(code).ok_or_else(|| malformed(format!("task kind {code}")))?;
    let user_id = body.get_u32();
    let descriptor = parse_descriptor(kind, body)?;
    Ok(RequestMessage {
        request_id,
        user_id,
        descriptor,
    })
}

fn decode_response(request_id: u64, mut body: &[u8]) -> Result<ResponseMessage, ProtocolError> {
    if body.len() < 5 {
        return Err(malformed("response body shorter than 5 bytes"));
    }
    let code = body.get_u8();
    let served_from =
        ServedFrom::from_code(code).ok_or_else(|| malformed(format!("served_from {code}")))?;
    let result_len = body.get_u32() as usize;
    if result_len != body.len() {
        return Err(malformed(format!(
            "result_len {result_len} but {} bytes remain",
            body.len()
        )));
    }
    let result = ResultPayload::new(body.to_vec()).map_err(|e| malformed(e.to_string()))?;
    Ok(ResponseMessage {
        request_id,
        served_from,
        result,
    })
}

/// Incremental decoder for one byte stream.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: BytesMut,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete message, or `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match decode(&self.buf)? {
            Decoded::Frame(message, used) => {
                self.buf.advance(used);
                Ok(Some(message))
            }
            Decoded::NeedMoreBytes => Ok(None),
        }
    }

    /// Call when the peer closed the stream.
    pub fn finish(&self) -> Result<(), ProtocolError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::TruncatedBody {
                buffered: self.buf.len(),
            })
        }
    }
}
