use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
#[cfg(unix)]
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use ndarray::Array3;

use super::protocol::{read_frame, write_frame, Frame, Header, Op, PROTOCOL_VERSION};
use super::{BackendDescriptor, Codec, DenoiserBackend};
use crate::data::Image;
use crate::diffusion::{Conditioning, GuidanceScales, Latent};
use crate::error::{Error, Result};

/// Transport address of a model server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    #[cfg(unix)]
    Unix(PathBuf),
}

impl FromStr for Endpoint {
    type Err = Error;

    /// Accepts `tcp://host:port`, `unix:///path`, or a bare `host:port`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("tcp://") {
            return Ok(Endpoint::Tcp(rest.to_string()));
        }
        if let Some(rest) = s.strip_prefix("unix://") {
            #[cfg(unix)]
            return Ok(Endpoint::Unix(PathBuf::from(rest)));
            #[cfg(not(unix))]
            return Err(Error::invalid(format!("unix sockets unsupported: {rest}")));
        }
        if s.contains(':') && !s.contains('/') {
            return Ok(Endpoint::Tcp(s.to_string()));
        }
        Err(Error::invalid(format!("unrecognized endpoint {s:?}")))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            #[cfg(unix)]
            Endpoint::Unix(p) => write!(f, "unix://{}", p.display()),
        }
    }
}

type BoxRead = Box<dyn Read + Send>;
type BoxWrite = Box<dyn Write + Send>;

fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<(BoxRead, BoxWrite)> {
    match endpoint {
        Endpoint::Tcp(addr) => {
            let sock = addr
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| Error::Remote(format!("{addr} did not resolve")))?;
            let stream = TcpStream::connect_timeout(&sock, timeout)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(timeout))?;
            stream.set_write_timeout(Some(timeout))?;
            Ok((Box::new(stream.try_clone()?), Box::new(stream)))
        }
        #[cfg(unix)]
        Endpoint::Unix(path) => {
            let stream = UnixStream::connect(path)?;
            stream.set_read_timeout(Some(timeout))?;
            stream.set_write_timeout(Some(timeout))?;
            Ok((Box::new(stream.try_clone()?), Box::new(stream)))
        }
    }
}

struct Reader {
    stream: BoxRead,
    pending: HashMap<u64, Frame>,
}

/// Counting semaphore bounding requests in flight.
struct Window {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Window {
    fn acquire(&self) -> WindowGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        WindowGuard(self)
    }
}

struct WindowGuard<'a>(&'a Window);

impl Drop for WindowGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// One pipelined connection. Requests may be issued from many threads;
/// responses are matched to requests by id.
struct Connection {
    endpoint: Endpoint,
    writer: Mutex<BoxWrite>,
    reader: Mutex<Reader>,
    window: Window,
    next_id: AtomicU64,
    broken: AtomicBool,
}

impl Connection {
    fn fail(&self, e: Error) -> Error {
        // A partial read or write leaves the stream misaligned.
        if matches!(e, Error::Transport(_) | Error::Protocol(_)) {
            self.broken.store(true, Ordering::SeqCst);
        }
        match e {
            Error::Transport(io)
                if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                Error::Remote(format!("{}: request timed out", self.endpoint))
            }
            other => other,
        }
    }

    fn request(&self, mut header: Header, payload: Vec<f32>) -> Result<Frame> {
        if self.broken.load(Ordering::SeqCst) {
            return Err(Error::Remote(format!("{}: connection is broken", self.endpoint)));
        }
        let _slot = self.window.acquire();
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        header.id = id;
        {
            let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
            write_frame(&mut **w, &Frame::new(header, payload)).map_err(|e| self.fail(e))?;
        }
        loop {
            let mut r = self.reader.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(f) = r.pending.remove(&id) {
                return check_error(f);
            }
            if self.broken.load(Ordering::SeqCst) {
                return Err(Error::Remote(format!("{}: connection is broken", self.endpoint)));
            }
            let frame = read_frame(&mut *r.stream).map_err(|e| self.fail(e))?;
            if frame.header.id == id {
                return check_error(frame);
            }
            r.pending.insert(frame.header.id, frame);
        }
    }
}

fn check_error(frame: Frame) -> Result<Frame> {
    if frame.header.op == Op::Error {
        return Err(Error::Remote(
            frame
                .header
                .message
                .unwrap_or_else(|| "unspecified server error".into()),
        ));
    }
    Ok(frame)
}

/// Capabilities advertised by the server during the handshake.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerInfo {
    pub version: u32,
    pub latent_shape: [usize; 3],
    pub supports_text: bool,
    pub deterministic: bool,
    pub window: usize,
    pub scale_factor: usize,
    pub extensions: Option<serde_json::Value>,
}

/// Denoiser forwarding to a model server. The server evaluates guidance
/// itself, so [`DenoiserBackend::predict_guided`] costs one round trip.
#[derive(Clone)]
pub struct RemoteBackend {
    conn: Arc<Connection>,
    info: ServerInfo,
}

/// Codec half of a remote connection.
#[derive(Clone)]
pub struct RemoteCodec {
    conn: Arc<Connection>,
    info: ServerInfo,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.conn.endpoint)
            .field("info", &self.info)
            .finish()
    }
}

impl fmt::Debug for RemoteCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteCodec")
            .field("endpoint", &self.conn.endpoint)
            .finish()
    }
}

/// Default number of requests kept in flight per connection.
pub const DEFAULT_WINDOW: usize = 8;

/// Connects and performs the handshake.
pub fn remote_backend(endpoint: &Endpoint, timeout: Duration) -> Result<(RemoteBackend, RemoteCodec)> {
    remote_backend_with_window(endpoint, timeout, DEFAULT_WINDOW)
}

pub fn remote_backend_with_window(
    endpoint: &Endpoint,
    timeout: Duration,
    window: usize,
) -> Result<(RemoteBackend, RemoteCodec)> {
    let (reader, writer) =
        connect(endpoint, timeout).map_err(|e| Error::Remote(format!("cannot connect to {endpoint}: {e}")))?;
    let conn = Connection {
        endpoint: endpoint.clone(),
        writer: Mutex::new(writer),
        reader: Mutex::new(Reader {
            stream: reader,
            pending: HashMap::new(),
        }),
        window: Window {
            free: Mutex::new(1),
            cv: Condvar::new(),
        },
        next_id: AtomicU64::new(0),
        broken: AtomicBool::new(false),
    };
    let reply = conn.request(Header::new(0, Op::Handshake), Vec::new())?;
    let h = reply.header;
    if h.op != Op::Handshake {
        return Err(Error::Protocol(format!("expected handshake reply, got {:?}", h.op)));
    }
    let version = h
        .version
        .ok_or_else(|| Error::Protocol("handshake reply lacks version".into()))?;
    if version != PROTOCOL_VERSION {
        return Err(Error::Remote(format!(
            "protocol version mismatch: server {version}, client {PROTOCOL_VERSION}"
        )));
    }
    let latent_shape = match h.latent_shape.as_deref() {
        Some(&[a, b, c]) => [a, b, c],
        other => {
            return Err(Error::Protocol(format!(
                "handshake latent_shape must have 3 entries, got {other:?}"
            )))
        }
    };
    let server_window = h.window.unwrap_or(1).max(1);
    let scale_factor = h
        .extensions
        .as_ref()
        .and_then(|e| e.get("scale_factor"))
        .and_then(|v| v.as_u64())
        .unwrap_or(1)
        .max(1) as usize;
    let info = ServerInfo {
        version,
        latent_shape,
        supports_text: h.supports_text.unwrap_or(false),
        deterministic: h.deterministic.unwrap_or(true),
        window: window.max(1).min(server_window),
        scale_factor,
        extensions: h.extensions,
    };
    *conn.window.free.lock().unwrap_or_else(|e| e.into_inner()) = info.window;
    let conn = Arc::new(conn);
    Ok((
        RemoteBackend {
            conn: conn.clone(),
            info: info.clone(),
        },
        RemoteCodec { conn, info },
    ))
}

fn to_f32(a: &Array3<f64>) -> Vec<f32> {
    a.iter().map(|&v| v as f32).collect()
}

fn check_response(frame: &Frame, want: &[usize], what: &str) -> Result<()> {
    let got = frame.header.shape.as_deref().unwrap_or(&[]);
    if got != want {
        return Err(Error::Remote(format!(
            "{what}: server returned shape {got:?}, expected {want:?}"
        )));
    }
    if let Some(i) = frame.payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::Remote(format!(
            "{what}: non-finite value {} at index {i}",
            frame.payload[i]
        )));
    }
    Ok(())
}

fn to_array(frame: Frame, shape: &[usize]) -> Result<Array3<f32>> {
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), frame.payload).map_err(|e| Error::Protocol(e.to_string()))
}

impl RemoteBackend {
    pub fn info(&self) -> &ServerInfo {
        &self.info
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.conn.endpoint
    }

    fn predict(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Conditioning,
        scales: GuidanceScales,
        text: Option<&str>,
    ) -> Result<Latent> {
        self.descriptor().check_shape(z_t)?;
        crate::diffusion::check_mask(z_t, &cond.cond_mask)?;
        if cond.cond_image.shape() != z_t.shape() {
            return Err(Error::shape(format!(
                "cond_image {:?} vs latent {:?}",
                cond.cond_image.shape(),
                z_t.shape()
            )));
        }
        let shape = z_t.shape().to_vec();
        let mut h = Header::new(0, Op::PredictNoise);
        h.shape = Some(shape.clone());
        h.mask_shape = Some(cond.cond_mask.shape().to_vec());
        h.t = Some(t);
        h.scales = Some(scales);
        h.text = text.map(str::to_string);
        let mut payload = to_f32(z_t);
        payload.extend(cond.cond_image.iter().map(|&v| v as f32));
        payload.extend(cond.cond_mask.iter().map(|&v| v as f32));
        let reply = self.conn.request(h, payload)?;
        check_response(&reply, &shape, "predict_noise")?;
        Ok(to_array(reply, &shape)?.mapv(f64::from))
    }
}

impl DenoiserBackend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("remote:{}", self.conn.endpoint),
            latent_shape: self.info.latent_shape,
            supports_text: self.info.supports_text,
            grid_aware: true,
            deterministic: self.info.deterministic,
        }
    }

    /// A single branch: image+text when text is present, otherwise
    /// image-only; a dropped image arrives as a zero image with an empty mask.
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        match cond.effective_text() {
            Some(text) if self.info.supports_text => self.predict(
                z_t,
                t,
                cond,
                GuidanceScales {
                    s_image: 1.0,
                    s_text: 0.0,
                },
                Some(text),
            ),
            _ => self.predict(
                z_t,
                t,
                cond,
                GuidanceScales {
                    s_image: 0.0,
                    s_text: 0.0,
                },
                None,
            ),
        }
    }

    fn predict_guided(&self, z_t: &Latent, t: usize, cond: &Conditioning, scales: &GuidanceScales) -> Result<Latent> {
        scales.validate()?;
        let text = cond.effective_text().filter(|_| self.info.supports_text);
        self.predict(z_t, t, cond, *scales, text)
    }
}

impl RemoteCodec {
    pub fn info(&self) -> &ServerInfo {
        &self.info
    }
}

impl Codec for RemoteCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let shape = image.shape().to_vec();
        let mut h = Header::new(0, Op::Encode);
        h.shape = Some(shape.clone());
        let reply = self.conn.request(h, image.iter().copied().collect())?;
        let out = reply.header.shape.clone().unwrap_or_default();
        if out.len() != 3 {
            return Err(Error::Remote(format!("encode: server returned shape {out:?}")));
        }
        let f = self.info.scale_factor;
        if out[0] * f != shape[0] || out[1] * f != shape[1] {
            return Err(Error::Remote(format!(
                "encode: latent {out:?} inconsistent with image {shape:?} at scale {f}"
            )));
        }
        check_response(&reply, &out, "encode")?;
        Ok(to_array(reply, &out)?.mapv(f64::from))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let mut h = Header::new(0, Op::Decode);
        h.shape = Some(latent.shape().to_vec());
        let reply = self.conn.request(h, to_f32(latent))?;
        let out = reply.header.shape.clone().unwrap_or_default();
        let f = self.info.scale_factor;
        if out.len() != 3 || out[0] != latent.shape()[0] * f || out[1] != latent.shape()[1] * f {
            return Err(Error::Remote(format!(
                "decode: server returned shape {out:?} for latent {:?}",
                latent.shape()
            )));
        }
        check_response(&reply, &out, "decode")?;
        to_array(reply, &out)
    }

    fn scale_factor(&self) -> usize {
        self.info.scale_factor
    }
}
