//! In-process echo backend: answers every score request with its own `x_t`.
//!
//! Speaks the full wire protocol, one thread per connection. [`Fault`] makes
//! it misbehave in specific ways so client error paths can be exercised.

use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ldistill_core::Shape;

use crate::protocol::{
    read_frame, shape_of, HelloResponse, Response, Returns, ScoreFrame, DEFAULT_MAX_LINE, PROTOCOL_VERSION,
};

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Responds with `id + 1`.
    WrongId,
    /// Declares one extra channel in the response shape.
    WrongShape,
    /// Replies with an error frame carrying this message.
    ErrorFrame(String),
    /// Corrupts the payload so it is not base64.
    BadBase64,
    /// Drops the last four payload bytes.
    ShortPayload,
    /// Closes the connection instead of answering score requests.
    HangUp,
}

#[derive(Debug, Clone)]
pub struct EchoConfig {
    pub shape: Shape,
    pub returns: Returns,
    pub max_line: usize,
    pub fault: Fault,
}

impl EchoConfig {
    pub fn new(shape: Shape) -> Self {
        Self {
            shape,
            returns: Returns::Score,
            max_line: DEFAULT_MAX_LINE,
            fault: Fault::None,
        }
    }
}

/// A running echo server bound to a loopback port. Stops on drop.
#[derive(Debug)]
pub struct EchoServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl EchoServer {
    pub fn spawn(config: EchoConfig) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let cfg = config.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve(conn, &cfg) {
                        log::debug!("echo connection ended: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn send<T: serde::Serialize>(w: &mut TcpStream, frame: &T) -> io::Result<()> {
    use std::io::Write;
    let mut line = serde_json::to_vec(frame).map_err(io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)
}

fn error(id: Option<u64>, msg: impl Into<String>) -> Response {
    Response::Error { id, error: msg.into() }
}

fn serve(conn: TcpStream, cfg: &EchoConfig) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let mut writer = conn.try_clone()?;
    let mut reader = BufReader::new(conn);
    let mut greeted = false;
    while let Some(frame) = read_frame(&mut reader, cfg.max_line)? {
        let line = match frame {
            Ok(line) => line,
            Err(n) => {
                send(&mut writer, &error(None, format!("line of {n} bytes exceeds the {} byte limit", cfg.max_line)))?;
                continue;
            }
        };
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                send(&mut writer, &error(None, format!("malformed JSON: {e}")))?;
                continue;
            }
        };
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("hello") => {
                let proto = value.get("proto").and_then(|p| p.as_u64());
                if proto != Some(PROTOCOL_VERSION as u64) {
                    send(&mut writer, &error(None, format!("unsupported protocol {proto:?}")))?;
                    continue;
                }
                greeted = true;
                send(
                    &mut writer,
                    &HelloResponse {
                        proto: PROTOCOL_VERSION,
                        returns: cfg.returns,
                        shape: cfg.shape.as_array(),
                    },
                )?;
            }
            Some("score") => {
                let id = value.get("id").and_then(|i| i.as_u64());
                if !greeted {
                    send(&mut writer, &error(id, "score request before hello"))?;
                    continue;
                }
                let req: ScoreFrame = match serde_json::from_value(value) {
                    Ok(r) => r,
                    Err(e) => {
                        send(&mut writer, &error(id, format!("bad score request: {e}")))?;
                        continue;
                    }
                };
                let resp = answer(req, cfg);
                if matches!(cfg.fault, Fault::HangUp) {
                    return Ok(());
                }
                send(&mut writer, &resp)?;
            }
            other => send(&mut writer, &error(None, format!("unknown frame kind {other:?}")))?,
        }
    }
    Ok(())
}

fn answer(req: ScoreFrame, cfg: &EchoConfig) -> Response {
    if shape_of(req.shape) != cfg.shape {
        return error(Some(req.id), format!("shape {:?} does not match session shape {}", req.shape, cfg.shape));
    }
    let decoded = match STANDARD.decode(&req.x_t) {
        Ok(b) => b,
        Err(e) => return error(Some(req.id), format!("x_t: {e}")),
    };
    if decoded.len() != 4 * cfg.shape.len() {
        return error(Some(req.id), "x_t payload length does not match shape");
    }
    let mut id = req.id;
    let mut shape = req.shape;
    let mut score = req.x_t;
    match &cfg.fault {
        Fault::None | Fault::HangUp => {}
        Fault::WrongId => id += 1,
        Fault::WrongShape => shape[0] += 1,
        Fault::ErrorFrame(msg) => return error(Some(id), msg.clone()),
        Fault::BadBase64 => score.replace_range(0..1, "*"),
        Fault::ShortPayload => score = STANDARD.encode(&decoded[..decoded.len() - 4]),
    }
    Response::Score { id, shape, score }
}
