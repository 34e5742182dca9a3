//! Out-of-process prediction provider speaking newline-delimited JSON.
//!
//! Each request carries the full sequence (prompt plus generation region,
//! `mask_id` at masked slots), so servers can stay stateless:
//!
//! ```text
//! -> {"id":1,"tokens":[5,9,126336,126336],"prompt_len":2,"mask_id":126336,"eos_id":126081}
//! <- {"id":1,"predictions":[{"pos":0,"top_token":17,"top_prob":0.99,"eos_prob":0.005},...]}
//! <- {"id":1,"error":"model failed"}
//! ```
//!
//! The same framing is used over a child's stdin/stdout and over TCP.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::{Error, ProviderError, Result};
use crate::kernel::{validate_predictions, PositionPrediction, PredictionProvider};
use crate::vocab::{SequenceState, Slot, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launch {
    /// Shell command line; the child speaks the protocol on stdin/stdout.
    Command(String),
    /// `host:port` of a listening server.
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeConfig {
    pub launch: Launch,
    pub request_timeout: Duration,
    pub max_retries: u32,
}

impl BridgeConfig {
    pub fn new(launch: Launch) -> Self {
        Self {
            launch,
            request_timeout: Duration::from_secs(30),
            max_retries: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.request_timeout.is_zero() {
            return Err(Error::Config("bridge request_timeout must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
}

impl Request {
    pub fn from_state(id: u64, state: &SequenceState, vocab: &Vocabulary) -> Self {
        Self {
            id,
            tokens: state.tokens_with_masks(vocab.mask_id),
            prompt_len: state.prompt().len(),
            mask_id: vocab.mask_id,
            eos_id: vocab.eos_id,
        }
    }

    /// Rebuild the engine-side state a request describes.
    pub fn to_state(&self) -> std::result::Result<SequenceState, String> {
        if self.prompt_len > self.tokens.len() {
            return Err(format!(
                "prompt_len {} exceeds token count {}",
                self.prompt_len,
                self.tokens.len()
            ));
        }
        let (prompt, gen) = self.tokens.split_at(self.prompt_len);
        let gen = gen
            .iter()
            .map(|&t| {
                if t == self.mask_id {
                    Slot::Masked
                } else {
                    Slot::Decoded(t)
                }
            })
            .collect();
        Ok(SequenceState::from_parts(prompt.to_vec(), gen))
    }
}

/// Server reply. Exactly one of `predictions` / `error` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<PositionPrediction>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn ok(id: u64, predictions: Vec<PositionPrediction>) -> Self {
        Self {
            id: Some(id),
            predictions: Some(predictions),
            error: None,
        }
    }

    pub fn err(id: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            id,
            predictions: None,
            error: Some(message.into()),
        }
    }
}

/// One live connection to a bridge server.
pub struct BridgeProvider {
    cfg: BridgeConfig,
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    tcp: Option<TcpStream>,
    next_id: u64,
}

fn spawn_reader<R: Read + Send + 'static>(source: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(source).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl BridgeProvider {
    pub fn connect(cfg: BridgeConfig) -> Result<Self> {
        cfg.validate()?;
        match &cfg.launch {
            Launch::Command(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(ProviderError::Transport)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    child: Some(child),
                    tcp: None,
                    next_id: 1,
                    cfg,
                })
            }
            Launch::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(ProviderError::Transport)?;
                stream.set_nodelay(true).ok();
                let read_half = stream.try_clone().map_err(ProviderError::Transport)?;
                let write_half = stream.try_clone().map_err(ProviderError::Transport)?;
                Ok(Self {
                    writer: Box::new(write_half),
                    lines: spawn_reader(read_half),
                    child: None,
                    tcp: Some(stream),
                    next_id: 1,
                    cfg,
                })
            }
        }
    }

    fn send(&mut self, req: &Request) -> std::result::Result<(), ProviderError> {
        let mut line = serde_json::to_vec(req).map_err(|e| ProviderError::Transport(e.into()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Wait for the response to `id`. `Ok(None)` means the deadline passed.
    fn receive(
        &mut self,
        id: u64,
    ) -> std::result::Result<Option<(Response, String)>, ProviderError> {
        let deadline = Instant::now() + self.cfg.request_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(left) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ProviderError::Transport(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "bridge closed the connection",
                    )))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let resp: Response =
                serde_json::from_str(&line).map_err(|e| ProviderError::Protocol {
                    reason: format!("unparseable response: {e}"),
                    payload: line.clone(),
                })?;
            match resp.id {
                Some(got) if got < id => {
                    debug!(got, want = id, "discarding stale response");
                    continue;
                }
                Some(got) if got == id => return Ok(Some((resp, line))),
                Some(got) => {
                    return Err(ProviderError::Protocol {
                        reason: format!("response id {got} ahead of request id {id}"),
                        payload: line,
                    })
                }
                None => match resp.error {
                    Some(message) => return Err(ProviderError::Remote { id, message }),
                    None => {
                        return Err(ProviderError::Protocol {
                            reason: "response without id".into(),
                            payload: line,
                        })
                    }
                },
            }
        }
    }

    fn interpret(
        &self,
        id: u64,
        resp: Response,
        payload: String,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
        let protocol = |reason: String| {
            warn!(%reason, %payload, "bridge protocol violation");
            ProviderError::Protocol {
                reason,
                payload: payload.clone(),
            }
        };
        match (resp.predictions, resp.error) {
            (Some(_), Some(_)) => Err(protocol("response has both predictions and error".into())),
            (None, Some(message)) => Err(ProviderError::Remote { id, message }),
            (None, None) => Err(protocol(
                "response has neither predictions nor error".into(),
            )),
            (Some(preds), None) => validate_predictions(state, vocab, preds).map_err(protocol),
        }
    }
}

impl PredictionProvider for BridgeProvider {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
        let attempts = self.cfg.max_retries + 1;
        let mut last_id = self.next_id;
        for attempt in 1..=attempts {
            let id = self.next_id;
            self.next_id += 1;
            last_id = id;
            self.send(&Request::from_state(id, state, vocab))?;
            match self.receive(id)? {
                Some((resp, payload)) => return self.interpret(id, resp, payload, state, vocab),
                None => warn!(id, attempt, "bridge request timed out"),
            }
        }
        Err(ProviderError::Timeout {
            id: last_id,
            attempts,
        })
    }
}

impl Drop for BridgeProvider {
    fn drop(&mut self) {
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Serve the protocol on one connection until EOF.
///
/// `handler` maps a request to predictions or an error message. Lines that
/// do not parse get an error reply carrying the id when one can be
/// recovered. Returns the number of requests answered.
pub fn serve_session<R, W, F>(reader: R, mut writer: W, mut handler: F) -> io::Result<usize>
where
    R: BufRead,
    W: Write,
    F: FnMut(&Request) -> std::result::Result<Vec<PositionPrediction>, String>,
{
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match handler(&req) {
                Ok(preds) => Response::ok(req.id, preds),
                Err(message) => Response::err(Some(req.id), message),
            },
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_u64()));
                Response::err(id, format!("malformed request: {e}"))
            }
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Adapt an in-process provider into a [`serve_session`] handler.
pub fn provider_handler<P: PredictionProvider>(
    mut provider: P,
) -> impl FnMut(&Request) -> std::result::Result<Vec<PositionPrediction>, String> {
    move |req: &Request| {
        let vocab = Vocabulary {
            size: u32::MAX,
            mask_id: req.mask_id,
            eos_id: req.eos_id,
        };
        let state = req.to_state()?;
        provider.predict(&state, &vocab).map_err(|e| e.to_string())
    }
}
