//! Conformance stub server: identity codec and zero noise.
//!
//! Speaks the wire protocol without any model, for tests and for checking
//! client integrations. Requests are answered strictly in order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;

use serde_json::json;

use super::protocol::{read_frame_lenient, write_frame, Frame, Header, Op, ReadOutcome, PROTOCOL_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    /// Advertised latent shape; 0 = any.
    pub latent_shape: [usize; 3],
    pub supports_text: bool,
    pub window: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            latent_shape: [0, 0, 0],
            supports_text: false,
            window: 8,
        }
    }
}

fn reply(request: &Header, op: Op, shape: Vec<usize>, payload: Vec<f32>) -> Frame {
    let mut h = Header::new(request.id, op);
    h.shape = Some(shape);
    Frame::new(h, payload)
}

fn check_latent_shape(cfg: &StubConfig, shape: &[usize]) -> std::result::Result<(), String> {
    if shape.len() != 3 {
        return Err(format!(
            "shape must have 3 dims (height, width, channels), got {shape:?}"
        ));
    }
    for (want, got) in cfg.latent_shape.iter().zip(shape) {
        if *want != 0 && want != got {
            return Err(format!(
                "latent shape {shape:?} does not match served shape {:?}",
                cfg.latent_shape
            ));
        }
    }
    Ok(())
}

/// The stub's answer to one well-formed request frame.
pub fn respond(cfg: &StubConfig, frame: &Frame) -> Frame {
    match answer(cfg, frame) {
        Ok(f) => f,
        Err(message) => Frame::header_only(Header::error(frame.header.id, message)),
    }
}

fn answer(cfg: &StubConfig, frame: &Frame) -> std::result::Result<Frame, String> {
    let h = &frame.header;
    match h.op {
        Op::Handshake => {
            let mut r = Header::new(h.id, Op::Handshake);
            r.version = Some(PROTOCOL_VERSION);
            r.latent_shape = Some(cfg.latent_shape.to_vec());
            r.supports_text = Some(cfg.supports_text);
            r.deterministic = Some(true);
            r.window = Some(cfg.window.max(1));
            r.extensions = Some(json!({"codec": "identity", "scale_factor": 1}));
            Ok(Frame::header_only(r))
        }
        Op::Encode | Op::Decode => {
            let shape = h.shape.clone().ok_or("missing shape")?;
            if h.mask_shape.is_some() {
                return Err("mask_shape is only valid for predict_noise".into());
            }
            check_latent_shape(cfg, &shape)?;
            Ok(reply(h, h.op, shape, frame.payload.clone()))
        }
        Op::PredictNoise => {
            let shape = h.shape.clone().ok_or("missing shape")?;
            check_latent_shape(cfg, &shape)?;
            let mask = h.mask_shape.as_deref().ok_or("missing mask_shape")?;
            if mask != &shape[..2] {
                return Err(format!(
                    "mask_shape {mask:?} does not match latent spatial shape {:?}",
                    &shape[..2]
                ));
            }
            if h.t.is_none() {
                return Err("missing t".into());
            }
            match h.scales {
                None => return Err("missing scales".into()),
                Some(s) if s.validate().is_err() => return Err("guidance scales must be non-negative".into()),
                _ => {}
            }
            if h.text.is_some() && !cfg.supports_text {
                return Err("text conditioning is not supported".into());
            }
            let n: usize = shape.iter().product();
            Ok(reply(h, Op::PredictNoise, shape, vec![0.0; n]))
        }
        Op::Error => Err("clients may not send error frames".into()),
    }
}

/// Serves one connection until the peer closes it. Malformed headers get an
/// error frame and the connection stays open; a truncated frame gets an
/// error frame and ends the session.
pub fn serve_stream<R: Read, W: Write>(cfg: &StubConfig, reader: R, writer: W) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    loop {
        match read_frame_lenient(&mut reader) {
            Ok(ReadOutcome::Eof) => return Ok(()),
            Ok(ReadOutcome::Frame(f)) => write_frame(&mut writer, &respond(cfg, &f))?,
            Ok(ReadOutcome::BadHeader { id, message }) => write_frame(
                &mut writer,
                &Frame::header_only(Header::error(id.unwrap_or(0), message)),
            )?,
            Err(Error::Transport(e)) => return Err(Error::Transport(e)),
            Err(e) => {
                write_frame(&mut writer, &Frame::header_only(Header::error(0, e.to_string())))?;
                return Ok(());
            }
        }
    }
}

/// A stub listening on TCP in a background thread.
pub struct StubServer {
    addr: SocketAddr,
    _accept: JoinHandle<()>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts accepting.
    pub fn spawn(addr: &str, cfg: StubConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let accept = std::thread::spawn(move || accept_loop(listener, cfg));
        Ok(Self { addr, _accept: accept })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> super::Endpoint {
        super::Endpoint::Tcp(self.addr.to_string())
    }
}

fn handle(stream: TcpStream, cfg: &StubConfig) {
    let _ = stream.set_nodelay(true);
    let reader = match stream.try_clone() {
        Ok(r) => r,
        Err(e) => {
            log::warn!("stub: cannot clone stream: {e}");
            return;
        }
    };
    if let Err(e) = serve_stream(cfg, reader, stream) {
        log::debug!("stub: connection ended: {e}");
    }
}

fn accept_loop(listener: TcpListener, cfg: StubConfig) {
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                let cfg = cfg.clone();
                std::thread::spawn(move || handle(s, &cfg));
            }
            Err(e) => log::warn!("stub: accept failed: {e}"),
        }
    }
}

/// Serves connections on `listener` in the calling thread, forever.
pub fn serve_blocking(listener: TcpListener, cfg: StubConfig) {
    accept_loop(listener, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::protocol::{decode_frames, encode_frame};
    use crate::diffusion::GuidanceScales;

    fn predict(id: u64, shape: Vec<usize>, mask: Vec<usize>) -> Frame {
        let mut h = Header::new(id, Op::PredictNoise);
        let n: usize = shape.iter().product::<usize>() * 2 + mask.iter().product::<usize>();
        h.shape = Some(shape);
        h.mask_shape = Some(mask);
        h.t = Some(10);
        h.scales = Some(GuidanceScales::default());
        Frame::new(h, vec![0.5; n])
    }

    #[test]
    fn zero_noise_and_echo() {
        let cfg = StubConfig::default();
        let r = respond(&cfg, &predict(4, vec![2, 3, 4], vec![2, 3]));
        assert_eq!(r.header.id, 4);
        assert_eq!(r.header.op, Op::PredictNoise);
        assert_eq!(r.payload, vec![0.0; 24]);
    }

    #[test]
    fn mismatched_mask_is_error_frame() {
        let r = respond(&StubConfig::default(), &predict(9, vec![2, 2, 1], vec![2, 3]));
        assert_eq!(r.header.op, Op::Error);
        assert_eq!(r.header.id, 9);
        assert!(r.header.message.unwrap().contains("mask_shape"));
    }

    #[test]
    fn session_survives_bad_header_and_reports_truncation() {
        let mut input = Vec::new();
        let junk = br#"{"id":5,"op":"fly"}"#;
        input.extend_from_slice(&(junk.len() as u32).to_be_bytes());
        input.extend_from_slice(junk);
        input.extend(encode_frame(&Frame::header_only(Header::new(6, Op::Handshake))).unwrap());
        let tail = encode_frame(&predict(7, vec![1, 1, 1], vec![1, 1])).unwrap();
        input.extend_from_slice(&tail[..tail.len() - 2]);
        let mut out = Vec::new();
        serve_stream(&StubConfig::default(), &input[..], &mut out).unwrap();
        let frames = decode_frames(&out).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!((frames[0].header.op, frames[0].header.id), (Op::Error, 5));
        assert_eq!(frames[1].header.version, Some(1));
        assert_eq!(frames[2].header.op, Op::Error);
        assert!(frames[2].header.message.as_deref().unwrap().contains("truncated"));
    }
}
