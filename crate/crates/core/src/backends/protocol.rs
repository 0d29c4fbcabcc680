//! Newline-delimited JSON protocol for out-of-process models.
//!
//! One request object per line, one response object per line, strictly in
//! order, one request in flight per connection. Every response carries
//! `"ok"`; failures carry `"error": {"code", "message"}`.
//!
//! ```text
//! → {"op":"hello"}
//! ← {"ok":true,"dim":512,"vocab_size":50257,"eot_token":50256,"protocol_version":1}
//! → {"op":"top_k","context":[50256],"k":3}
//! ← {"ok":true,"candidates":[{"token":64,"p":0.03,"hidden":[...]}, ...]}
//! → {"op":"encode_image","width":224,"height":224,"data":"<base64 RGB8>"}
//! ← {"ok":true,"embedding":[...]}
//! ```
//!
//! Floats are written in shortest round-trip decimal form, which reproduces
//! every `f64` (and so every `f32`) bit-exactly.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{BackendError, Candidate, Encoder, LanguageModel, TokenId};
use crate::embedding::Embedding;
use crate::imaging::Image;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendRequest {
    Hello,
    EncodeText { text: String },
    EncodeImage { width: u32, height: u32, data: String },
    TopK { context: Vec<TokenId>, k: usize },
    Tokenize { text: String },
    Detokenize { tokens: Vec<TokenId> },
}

impl BackendRequest {
    pub fn encode_image(image: &Image) -> Self {
        BackendRequest::EncodeImage {
            width: image.width(),
            height: image.height(),
            data: BASE64.encode(image.pixels()),
        }
    }

    pub fn op(&self) -> &'static str {
        match self {
            BackendRequest::Hello => "hello",
            BackendRequest::EncodeText { .. } => "encode_text",
            BackendRequest::EncodeImage { .. } => "encode_image",
            BackendRequest::TopK { .. } => "top_k",
            BackendRequest::Tokenize { .. } => "tokenize",
            BackendRequest::Detokenize { .. } => "detokenize",
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("requests always serialize")
    }

    /// Decodes the RGB payload of an `encode_image` request.
    pub fn decode_image(width: u32, height: u32, data: &str) -> Result<Image, BackendError> {
        let pixels = BASE64
            .decode(data)
            .map_err(|e| BackendError::Malformed(format!("image data: {e}")))?;
        Image::new(width, height, pixels).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloInfo {
    pub dim: usize,
    pub vocab_size: usize,
    pub eot_token: TokenId,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub token: TokenId,
    pub p: f64,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendResponse {
    Hello(HelloInfo),
    Embedding(Vec<f64>),
    Candidates(Vec<WireCandidate>),
    Tokens(Vec<TokenId>),
    Text(String),
    Error(WireError),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Payload {
    Error { error: WireError },
    Hello(HelloInfo),
    Embedding { embedding: Vec<f64> },
    Candidates { candidates: Vec<WireCandidate> },
    Tokens { tokens: Vec<TokenId> },
    Text { text: String },
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    ok: bool,
    #[serde(flatten)]
    payload: Payload,
}

impl BackendResponse {
    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        BackendResponse::Error(WireError {
            code: code.into(),
            message: message.into(),
        })
    }

    pub fn to_line(&self) -> String {
        let payload = match self.clone() {
            BackendResponse::Hello(h) => Payload::Hello(h),
            BackendResponse::Embedding(embedding) => Payload::Embedding { embedding },
            BackendResponse::Candidates(candidates) => Payload::Candidates { candidates },
            BackendResponse::Tokens(tokens) => Payload::Tokens { tokens },
            BackendResponse::Text(text) => Payload::Text { text },
            BackendResponse::Error(error) => Payload::Error { error },
        };
        let envelope = Envelope {
            ok: !matches!(self, BackendResponse::Error(_)),
            payload,
        };
        serde_json::to_string(&envelope).expect("responses always serialize")
    }

    pub fn parse(line: &str) -> Result<Self, BackendError> {
        let envelope: Envelope = serde_json::from_str(line)
            .map_err(|e| BackendError::Malformed(format!("{e}: {}", truncate(line))))?;
        let response = match envelope.payload {
            Payload::Hello(h) => BackendResponse::Hello(h),
            Payload::Embedding { embedding } => BackendResponse::Embedding(embedding),
            Payload::Candidates { candidates } => BackendResponse::Candidates(candidates),
            Payload::Tokens { tokens } => BackendResponse::Tokens(tokens),
            Payload::Text { text } => BackendResponse::Text(text),
            Payload::Error { error } => BackendResponse::Error(error),
        };
        if envelope.ok == matches!(response, BackendResponse::Error(_)) {
            return Err(BackendError::Malformed(format!(
                "`ok` is {} but payload is {}",
                envelope.ok,
                response.kind()
            )));
        }
        Ok(response)
    }

    fn kind(&self) -> &'static str {
        match self {
            BackendResponse::Hello(_) => "hello",
            BackendResponse::Embedding(_) => "embedding",
            BackendResponse::Candidates(_) => "candidates",
            BackendResponse::Tokens(_) => "tokens",
            BackendResponse::Text(_) => "text",
            BackendResponse::Error(_) => "error",
        }
    }

    fn expected_for(request: &BackendRequest) -> &'static str {
        match request {
            BackendRequest::Hello => "hello",
            BackendRequest::EncodeText { .. } | BackendRequest::EncodeImage { .. } => "embedding",
            BackendRequest::TopK { .. } => "candidates",
            BackendRequest::Tokenize { .. } => "tokens",
            BackendRequest::Detokenize { .. } => "text",
        }
    }
}

fn truncate(s: &str) -> String {
    if s.len() <= 120 {
        s.to_string()
    } else {
        let mut end = 120;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

/// A single protocol connection.
pub struct ProtocolClient {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    dim: Option<usize>,
}

impl std::fmt::Debug for ProtocolClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtocolClient")
            .field("dim", &self.dim)
            .field("child", &self.child.as_ref().map(Child::id))
            .finish_non_exhaustive()
    }
}

impl ProtocolClient {
    pub fn from_streams(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
            dim: None,
        }
    }

    pub fn connect_tcp(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::from_streams(reader, BufWriter::new(stream)))
    }

    /// Runs `program` and speaks the protocol over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> io::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(BufReader::new(stdout), BufWriter::new(stdin));
        client.child = Some(child);
        Ok(client)
    }

    /// `tcp://host:port`, `host:port`, or `exec:<command> [args...]`.
    pub fn connect(endpoint: &str) -> Result<Self, BackendError> {
        if let Some(cmd) = endpoint.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| BackendError::Config("empty exec endpoint".into()))?;
            let args: Vec<String> = parts.collect();
            return Ok(Self::spawn(&program, &args)?);
        }
        let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
        Ok(Self::connect_tcp(addr)?)
    }

    /// Sends one request and reads its response. Server-reported failures
    /// come back as [`BackendError::Server`]; nothing is retried.
    pub fn request(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut line = request.to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;

        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(BackendError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "connection closed before response",
            )));
        }
        let response = BackendResponse::parse(reply.trim_end())?;
        if let BackendResponse::Error(e) = response {
            return Err(BackendError::Server {
                code: e.code,
                message: e.message,
            });
        }
        let expected = BackendResponse::expected_for(request);
        if response.kind() != expected {
            return Err(BackendError::Malformed(format!(
                "expected {expected} response to `{}`, got {}",
                request.op(),
                response.kind()
            )));
        }
        match &response {
            BackendResponse::Hello(h) => {
                if h.protocol_version != PROTOCOL_VERSION {
                    return Err(BackendError::Malformed(format!(
                        "unsupported protocol version {}",
                        h.protocol_version
                    )));
                }
                self.dim = Some(h.dim);
            }
            BackendResponse::Embedding(v) => self.check_dim(v.len())?,
            _ => {}
        }
        Ok(response)
    }

    fn check_dim(&self, actual: usize) -> Result<(), BackendError> {
        match self.dim {
            Some(expected) if expected != actual => {
                Err(BackendError::DimensionMismatch { expected, actual })
            }
            _ => Ok(()),
        }
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A language model and encoder reached through one protocol connection.
#[derive(Debug)]
pub struct RemoteBackend {
    client: Mutex<ProtocolClient>,
    info: HelloInfo,
}

impl RemoteBackend {
    /// Performs the `hello` handshake on an open connection.
    pub fn handshake(mut client: ProtocolClient) -> Result<Self, BackendError> {
        match client.request(&BackendRequest::Hello)? {
            BackendResponse::Hello(info) => Ok(Self {
                client: Mutex::new(client),
                info,
            }),
            other => Err(BackendError::Malformed(format!("bad hello reply {other:?}"))),
        }
    }

    pub fn connect(endpoint: &str) -> Result<Self, BackendError> {
        Self::handshake(ProtocolClient::connect(endpoint)?)
    }

    pub fn info(&self) -> &HelloInfo {
        &self.info
    }

    fn call(&self, request: BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut client = self
            .client
            .lock()
            .map_err(|_| BackendError::Malformed("connection poisoned by an earlier panic".into()))?;
        client.request(&request)
    }

    fn embedding(&self, request: BackendRequest) -> Result<Embedding, BackendError> {
        match self.call(request)? {
            BackendResponse::Embedding(v) => Ok(Embedding::new(v)?),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(response: BackendResponse) -> BackendError {
    BackendError::Malformed(format!("unexpected response {}", response.kind()))
}

impl LanguageModel for RemoteBackend {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        match self.call(BackendRequest::Tokenize { text: text.into() })? {
            BackendResponse::Tokens(t) => Ok(t),
            other => Err(unexpected(other)),
        }
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        match self.call(BackendRequest::Detokenize {
            tokens: tokens.to_vec(),
        })? {
            BackendResponse::Text(t) => Ok(t),
            other => Err(unexpected(other)),
        }
    }

    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<Candidate>, BackendError> {
        match self.call(BackendRequest::TopK {
            context: context.to_vec(),
            k,
        })? {
            BackendResponse::Candidates(cands) => cands
                .into_iter()
                .map(|c| {
                    Ok(Candidate {
                        token: c.token,
                        p_model: c.p,
                        hidden: Embedding::new(c.hidden)?,
                    })
                })
                .collect(),
            other => Err(unexpected(other)),
        }
    }

    fn eot_token(&self) -> TokenId {
        self.info.eot_token
    }

    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }
}

impl Encoder for RemoteBackend {
    fn dim(&self) -> usize {
        self.info.dim
    }

    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        self.embedding(BackendRequest::EncodeText { text: text.into() })
    }

    fn encode_image(&self, image: &Image) -> Result<Embedding, BackendError> {
        self.embedding(BackendRequest::encode_image(image))
    }
}

/// Answers one request line with a model pair. Unparseable lines and unknown
/// ops become error responses, never a dropped connection.
pub fn handle_line(line: &str, lm: &dyn LanguageModel, encoder: &dyn Encoder) -> BackendResponse {
    let request: BackendRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let op = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("op").and_then(|o| o.as_str()).map(str::to_string));
            return match op {
                Some(op) if !KNOWN_OPS.contains(&op.as_str()) => {
                    BackendResponse::error("unknown_op", format!("unknown op `{op}`"))
                }
                _ => BackendResponse::error("bad_request", e.to_string()),
            };
        }
    };
    let result = match request {
        BackendRequest::Hello => Ok(BackendResponse::Hello(HelloInfo {
            dim: encoder.dim(),
            vocab_size: lm.vocab_size(),
            eot_token: lm.eot_token(),
            protocol_version: PROTOCOL_VERSION,
        })),
        BackendRequest::EncodeText { text } => encoder
            .encode_text(&text)
            .map(|e| BackendResponse::Embedding(e.into())),
        BackendRequest::EncodeImage { width, height, data } => {
            BackendRequest::decode_image(width, height, &data)
                .and_then(|img| encoder.encode_image(&img))
                .map(|e| BackendResponse::Embedding(e.into()))
        }
        BackendRequest::TopK { context, k } => lm.top_k(&context, k).map(|cands| {
            BackendResponse::Candidates(
                cands
                    .into_iter()
                    .map(|c| WireCandidate {
                        token: c.token,
                        p: c.p_model,
                        hidden: c.hidden.into(),
                    })
                    .collect(),
            )
        }),
        BackendRequest::Tokenize { text } => lm.tokenize(&text).map(BackendResponse::Tokens),
        BackendRequest::Detokenize { tokens } => lm.detokenize(&tokens).map(BackendResponse::Text),
    };
    result.unwrap_or_else(|e| BackendResponse::error(error_code(&e), e.to_string()))
}

const KNOWN_OPS: [&str; 6] = ["hello", "encode_text", "encode_image", "top_k", "tokenize", "detokenize"];

fn error_code(e: &BackendError) -> &'static str {
    match e {
        BackendError::Malformed(_) => "bad_request",
        BackendError::UnknownWord(_) | BackendError::UnknownToken(_) => "invalid_argument",
        _ => "internal",
    }
}

/// Serves one connection until the peer closes it.
pub fn serve_stream(
    reader: impl BufRead,
    mut writer: impl Write,
    lm: &dyn LanguageModel,
    encoder: &dyn Encoder,
) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = handle_line(&line, lm, encoder).to_line();
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection, each served by
/// the shared model pair.
pub fn serve_tcp<L, E>(listener: TcpListener, lm: std::sync::Arc<L>, encoder: std::sync::Arc<E>) -> io::Result<()>
where
    L: LanguageModel + 'static,
    E: Encoder + 'static,
{
    for stream in listener.incoming() {
        let stream = stream?;
        let (lm, encoder) = (lm.clone(), encoder.clone());
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve_stream(reader, BufWriter::new(stream), lm.as_ref(), encoder.as_ref());
        });
    }
    Ok(())
}
