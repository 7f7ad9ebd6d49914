//! Framed wire protocol spoken between the engine and a model server.
//!
//! A frame is a 4-byte big-endian header length, a UTF-8 JSON header, then
//! a raw little-endian `f32` payload. The payload length is implied by the
//! header:
//!
//! * `shape` absent: no payload.
//! * `mask_shape` absent: `prod(shape)` floats.
//! * `mask_shape` present (a `predict_noise` request): latent, conditioning
//!   image and mask concatenated, `2 * prod(shape) + prod(mask_shape)` floats.
//!
//! Responses echo the request `id` and `op`; failures come back as an
//! `"error"` frame carrying a message.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffusion::GuidanceScales;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a JSON header, in bytes.
pub const MAX_HEADER_BYTES: usize = 1 << 20;

/// Upper bound on a payload, in floats.
pub const MAX_PAYLOAD_FLOATS: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Handshake,
    Encode,
    Decode,
    PredictNoise,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub id: u64,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<GuidanceScales>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supports_text: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    /// Maximum number of requests the server accepts in flight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Server-specific handshake fields (e.g. the codec's latent scaling).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extensions: Option<serde_json::Value>,
}

impl Header {
    pub fn new(id: u64, op: Op) -> Self {
        Self {
            id,
            op,
            shape: None,
            t: None,
            scales: None,
            text: None,
            mask_shape: None,
            version: None,
            latent_shape: None,
            supports_text: None,
            deterministic: None,
            window: None,
            message: None,
            extensions: None,
        }
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        Self {
            message: Some(message.into()),
            ..Self::new(id, Op::Error)
        }
    }

    /// Number of payload floats this header declares.
    pub fn payload_len(&self) -> Result<usize> {
        let Some(shape) = &self.shape else {
            if self.mask_shape.is_some() {
                return Err(Error::Protocol("mask_shape without shape".into()));
            }
            return Ok(0);
        };
        let n = checked_prod(shape)?;
        let total = match &self.mask_shape {
            None => Some(n),
            Some(m) => {
                let nm = checked_prod(m)?;
                n.checked_mul(2).and_then(|v| v.checked_add(nm))
            }
        };
        match total {
            Some(v) if v <= MAX_PAYLOAD_FLOATS => Ok(v),
            _ => Err(Error::Protocol(format!(
                "declared payload too large: shape {:?}, mask_shape {:?}",
                self.shape, self.mask_shape
            ))),
        }
    }
}

fn checked_prod(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Protocol(format!("shape {dims:?} overflows")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn new(header: Header, payload: Vec<f32>) -> Self {
        Self { header, payload }
    }

    pub fn header_only(header: Header) -> Self {
        Self {
            header,
            payload: Vec::new(),
        }
    }
}

/// Serializes a frame; fails if the payload disagrees with the header.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>> {
    let want = frame.header.payload_len()?;
    if want != frame.payload.len() {
        return Err(Error::Protocol(format!(
            "header declares {want} floats, payload has {}",
            frame.payload.len()
        )));
    }
    let json = serde_json::to_vec(&frame.header).map_err(|e| Error::Protocol(format!("header serialization: {e}")))?;
    if json.len() > MAX_HEADER_BYTES {
        return Err(Error::Protocol(format!("header of {} bytes too large", json.len())));
    }
    let mut out = Vec::with_capacity(4 + json.len() + 4 * want);
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    for v in &frame.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> Result<()> {
    let bytes = encode_frame(frame)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Outcome of reading one frame.
#[derive(Debug)]
pub enum ReadOutcome {
    Frame(Frame),
    /// The header arrived intact but was not a valid frame header; its
    /// declared bytes were consumed, so the stream is still aligned.
    BadHeader {
        id: Option<u64>,
        message: String,
    },
    /// Clean end of stream before any byte of a new frame.
    Eof,
}

fn read_exact_or_eof<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => {
                return Err(Error::Protocol(format!(
                    "truncated frame: got {filled} of {} bytes",
                    buf.len()
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_exact<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    if buf.is_empty() {
        return Ok(());
    }
    if read_exact_or_eof(r, buf)? {
        Ok(())
    } else {
        Err(Error::Protocol(format!("truncated frame: missing {} bytes", buf.len())))
    }
}

/// Reads one frame, distinguishing recoverable header errors from stream
/// corruption.
pub fn read_frame_lenient<R: Read + ?Sized>(r: &mut R) -> Result<ReadOutcome> {
    let mut len = [0u8; 4];
    if !read_exact_or_eof(r, &mut len)? {
        return Ok(ReadOutcome::Eof);
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_HEADER_BYTES {
        return Err(Error::Protocol(format!("header length {len} exceeds limit")));
    }
    let mut json = vec![0u8; len];
    read_exact(r, &mut json)?;
    let header: Header = match serde_json::from_slice(&json) {
        Ok(h) => h,
        Err(e) => {
            let id = serde_json::from_slice::<serde_json::Value>(&json)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
            return Ok(ReadOutcome::BadHeader {
                id,
                message: format!("malformed header: {e}"),
            });
        }
    };
    // An unusable length cannot be skipped, so it is fatal for the stream.
    let n = header.payload_len()?;
    let mut raw = vec![0u8; 4 * n];
    read_exact(r, &mut raw)?;
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ReadOutcome::Frame(Frame { header, payload }))
}

/// Reads one frame; a clean end of stream or a bad header is an error.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Frame> {
    match read_frame_lenient(r)? {
        ReadOutcome::Frame(f) => Ok(f),
        ReadOutcome::BadHeader { message, .. } => Err(Error::Protocol(message)),
        ReadOutcome::Eof => Err(Error::Protocol("connection closed".into())),
    }
}

/// Splits a byte buffer holding consecutive frames.
pub fn decode_frames(mut bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        out.push(read_frame(&mut bytes)?);
    }
    Ok(out)
}
