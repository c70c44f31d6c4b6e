//! Score-backend wire protocol: NDJSON over TCP with base64 little-endian f32 tensors.
//!
//! ```text
//! → {"kind":"hello","proto":1}
//! ← {"kind":"hello","proto":1,"returns":"score","shape":[4,32,32]}
//! → {"kind":"score","id":1,"t":812,"prompt":"..","negative_prompt":"","cfg_weight":7.5,
//!    "control_weight":1.0,"shape":[4,32,32],"x_t":"<b64>","control_image":"<b64>"}
//! ← {"kind":"score","id":1,"shape":[4,32,32],"score":"<b64>"}
//! ← {"kind":"error","id":1,"error":"message"}
//! ```

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ldistill_core::scores::{eps_to_score, ScoreModel, ScoreQuery, ScoreRequest};
use ldistill_core::{ScoreTensor, Shape};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;
/// Longest accepted frame, in bytes, newline excluded.
pub const DEFAULT_MAX_LINE: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Returns {
    Score,
    Eps,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("shape mismatch: session is {expected}, got {got}")]
    ShapeMismatch { expected: Shape, got: Shape },
    #[error("backend error{}: {message}", id.map(|i| format!(" for request {i}")).unwrap_or_default())]
    Backend { id: Option<u64>, message: String },
    #[error("malformed base64 payload: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("cannot decode frame: {0}")]
    Decode(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Engine(#[from] ldistill_core::Error),
}

impl ClientError {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientError::Transport(_) => "transport",
            ClientError::IdMismatch { .. } => "id_mismatch",
            ClientError::ShapeMismatch { .. } => "shape_mismatch",
            ClientError::Backend { .. } => "backend_error",
            ClientError::Base64(_) => "base64",
            ClientError::Decode(_) => "decode",
            ClientError::Handshake(_) => "handshake",
            ClientError::Engine(_) => "engine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename = "hello")]
pub struct HelloRequest {
    pub proto: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename = "hello")]
pub struct HelloResponse {
    pub proto: u32,
    pub returns: Returns,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename = "score")]
pub struct ScoreFrame {
    pub id: u64,
    pub t: usize,
    pub prompt: String,
    pub negative_prompt: String,
    pub cfg_weight: f64,
    pub control_weight: f64,
    pub shape: [usize; 3],
    pub x_t: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Score { id: u64, shape: [usize; 3], score: String },
    Error { id: Option<u64>, error: String },
}

pub fn shape_of(s: [usize; 3]) -> Shape {
    Shape::new(s[0], s[1], s[2])
}

/// Base64 of the tensor as little-endian f32.
pub fn encode_tensor(x: &ScoreTensor) -> String {
    let mut bytes = Vec::with_capacity(4 * x.data().len());
    for v in x.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_tensor(b64: &str, shape: Shape) -> Result<ScoreTensor, ClientError> {
    let bytes = STANDARD.decode(b64)?;
    if bytes.len() != 4 * shape.len() {
        return Err(ClientError::Decode(format!(
            "payload holds {} bytes, shape {shape} needs {}",
            bytes.len(),
            4 * shape.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ScoreTensor::from_vec(shape, data).map_err(|e| ClientError::Decode(e.to_string()))
}

/// Reads one `\n`-terminated line of at most `max` bytes. `Ok(None)` on clean EOF.
pub(crate) fn read_frame<R: BufRead>(reader: &mut R, max: usize) -> io::Result<Option<Result<String, usize>>> {
    let mut buf = Vec::new();
    let n = reader.by_ref().take(max as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
    } else if buf.len() > max {
        // discard the remainder of the oversized line
        let mut skipped = buf.len();
        loop {
            let chunk = reader.fill_buf()?;
            if chunk.is_empty() {
                break;
            }
            match chunk.iter().position(|&b| b == b'\n') {
                Some(p) => {
                    reader.consume(p + 1);
                    skipped += p;
                    break;
                }
                None => {
                    let len = chunk.len();
                    reader.consume(len);
                    skipped += len;
                }
            }
        }
        return Ok(Some(Err(skipped)));
    }
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    String::from_utf8(buf)
        .map(|s| Some(Ok(s)))
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn write_frame<W: Write, T: Serialize>(w: &mut W, frame: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(frame).map_err(io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()
}

/// One single-owner connection to a score backend.
#[derive(Debug)]
pub struct BackendClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    shape: Shape,
    returns: Returns,
    next_id: u64,
    max_line: usize,
}

impl BackendClient {
    /// Connects and completes the hello handshake; every socket operation is bounded by `timeout`.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{addr} resolves to no address"));
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(stream) => return Self::handshake(stream, timeout),
                Err(e) => last = e,
            }
        }
        Err(ClientError::Transport(last))
    }

    fn handshake(stream: TcpStream, timeout: Duration) -> Result<Self, ClientError> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        write_frame(&mut writer, &HelloRequest { proto: PROTOCOL_VERSION })?;
        let line = match read_frame(&mut reader, DEFAULT_MAX_LINE)? {
            Some(Ok(line)) => line,
            Some(Err(_)) => return Err(ClientError::Handshake("oversized hello".into())),
            None => return Err(closed().into()),
        };
        if let Ok(Response::Error { error, .. }) = serde_json::from_str::<Response>(&line) {
            return Err(ClientError::Handshake(error));
        }
        let hello: HelloResponse =
            serde_json::from_str(&line).map_err(|e| ClientError::Handshake(format!("bad hello: {e}")))?;
        if hello.proto != PROTOCOL_VERSION {
            return Err(ClientError::Handshake(format!("server speaks protocol {}", hello.proto)));
        }
        let shape = shape_of(hello.shape);
        if shape.is_empty() {
            return Err(ClientError::Handshake("server declared an empty shape".into()));
        }
        Ok(Self {
            reader,
            writer,
            shape,
            returns: hello.returns,
            next_id: 1,
            max_line: DEFAULT_MAX_LINE,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn returns(&self) -> Returns {
        self.returns
    }

    /// Sends one request without waiting; returns its id.
    pub fn submit(&mut self, req: &ScoreRequest) -> Result<u64, ClientError> {
        req.validate()?;
        if req.x_t.shape() != self.shape {
            return Err(ClientError::ShapeMismatch {
                expected: self.shape,
                got: req.x_t.shape(),
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        let frame = ScoreFrame {
            id,
            t: req.t,
            prompt: req.prompt.clone(),
            negative_prompt: req.negative_prompt.clone(),
            cfg_weight: req.cfg_weight,
            control_weight: req.control_weight,
            shape: self.shape.as_array(),
            x_t: encode_tensor(&req.x_t),
            control_image: req.control_image.as_ref().map(encode_tensor),
        };
        write_frame(&mut self.writer, &frame)?;
        Ok(id)
    }

    /// Reads the next response, which must answer request `id`.
    pub fn receive(&mut self, id: u64) -> Result<ScoreTensor, ClientError> {
        let line = match read_frame(&mut self.reader, self.max_line)? {
            Some(Ok(line)) => line,
            Some(Err(n)) => return Err(ClientError::Decode(format!("response line of {n} bytes exceeds the limit"))),
            None => return Err(closed().into()),
        };
        let resp: Response = serde_json::from_str(&line).map_err(|e| ClientError::Decode(e.to_string()))?;
        match resp {
            Response::Error { id, error } => Err(ClientError::Backend { id, message: error }),
            Response::Score { id: got, shape, score } => {
                if got != id {
                    return Err(ClientError::IdMismatch { expected: id, got });
                }
                let shape = shape_of(shape);
                if shape != self.shape {
                    return Err(ClientError::ShapeMismatch {
                        expected: self.shape,
                        got: shape,
                    });
                }
                decode_tensor(&score, shape)
            }
        }
    }

    /// One request-response round trip. The payload is returned as sent by the backend.
    pub fn backend_score(&mut self, req: &ScoreRequest) -> Result<ScoreTensor, ClientError> {
        let id = self.submit(req)?;
        self.receive(id)
    }
}

fn closed() -> io::Error {
    io::Error::new(io::ErrorKind::UnexpectedEof, "backend closed the connection")
}

/// A backend connection plus the prompt it is queried with.
#[derive(Debug)]
pub struct BackendSource {
    pub client: BackendClient,
    pub prompt: String,
    pub negative_prompt: String,
    pub control_weight: f64,
}

impl ScoreModel for BackendSource {
    type Error = ClientError;

    fn score(&mut self, q: &ScoreQuery<'_>) -> Result<ScoreTensor, ClientError> {
        q.schedule.check(q.t)?;
        let req = ScoreRequest {
            x_t: q.x_t.clone(),
            t: q.t,
            prompt: self.prompt.clone(),
            negative_prompt: self.negative_prompt.clone(),
            cfg_weight: q.cfg_weight,
            control_image: q.control.cloned(),
            control_weight: self.control_weight,
        };
        let out = self.client.backend_score(&req)?;
        Ok(match self.client.returns() {
            Returns::Score => out,
            Returns::Eps => eps_to_score(&out, q.t, q.schedule)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frames_have_the_documented_fields() {
        let hello = serde_json::to_value(HelloRequest { proto: 1 }).unwrap();
        assert_eq!(hello, serde_json::json!({"kind": "hello", "proto": 1}));
        let err: Response = serde_json::from_str(r#"{"kind":"error","id":3,"error":"boom"}"#).unwrap();
        assert_eq!(err, Response::Error { id: Some(3), error: "boom".into() });
        let r: HelloResponse = serde_json::from_str(r#"{"kind":"hello","proto":1,"returns":"eps","shape":[4,8,8]}"#).unwrap();
        assert_eq!(r.returns, Returns::Eps);
        let f = ScoreFrame {
            id: 1,
            t: 10,
            prompt: "p".into(),
            negative_prompt: String::new(),
            cfg_weight: 7.5,
            control_weight: 1.0,
            shape: [1, 1, 1],
            x_t: "AAAAAA==".into(),
            control_image: None,
        };
        let v = serde_json::to_value(&f).unwrap();
        assert_eq!(v["kind"], "score");
        assert!(v.get("control_image").is_none());
    }

    #[test]
    fn codec_rejects_bad_payloads() {
        let s = Shape::new(1, 1, 2);
        assert!(matches!(decode_tensor("not base64!", s), Err(ClientError::Base64(_))));
        let one = STANDARD.encode(1.0f32.to_le_bytes());
        assert!(matches!(decode_tensor(&one, s), Err(ClientError::Decode(_))));
        let nan = STANDARD.encode([f32::NAN.to_le_bytes(), 0f32.to_le_bytes()].concat());
        assert!(matches!(decode_tensor(&nan, s), Err(ClientError::Decode(_))));
    }

    #[test]
    fn frame_reader_limits_lines() {
        let data = b"short\r\n0123456789abc\nnext\n".to_vec();
        let mut r = BufReader::new(&data[..]);
        assert_eq!(read_frame(&mut r, 8).unwrap(), Some(Ok("short".into())));
        assert_eq!(read_frame(&mut r, 8).unwrap(), Some(Err(13)));
        assert_eq!(read_frame(&mut r, 8).unwrap(), Some(Ok("next".into())));
        assert_eq!(read_frame(&mut r, 8).unwrap(), None);
    }

    proptest! {
        #[test]
        fn f32_values_survive_the_codec(v in prop::collection::vec(-1e30f32..1e30, 1..64)) {
            let shape = Shape::new(1, 1, v.len());
            let x = ScoreTensor::from_vec(shape, v.iter().map(|&f| f as f64).collect()).unwrap();
            let y = decode_tensor(&encode_tensor(&x), shape).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
