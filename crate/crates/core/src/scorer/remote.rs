//! Newline-delimited JSON scoring protocol.
//!
//! ```text
//! -> {"type":"init","dataset":"<path>"}                  <- {"type":"ready"}
//! -> {"type":"score","id":7,"sample":"s1","mask":[1,0]}  <- {"type":"loss","id":7,"loss":0.5}
//! -> {"type":"shutdown"}                                 <- process exits 0
//! errors: {"type":"error","id":7,"message":"..."}  (id omitted when unparseable)
//! ```
//!
//! [`RemoteClient`] pipelines requests over one connection and matches
//! responses by id, so a batch may be answered in any order. [`serve`] is a
//! reference server used by tests and by `evocomp serve-scorer`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::container::read_dataset;
use crate::error::ScoreError;
use crate::mask::{GroupPartition, Mask};
use crate::sample::Sample;

use super::{Concurrency, PooledScorer, Scorer};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Init { dataset: String },
    Score { id: u64, sample: String, mask: Vec<u8> },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Ready,
    Loss { id: u64, loss: f64 },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

/// Where the external scorer lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Shell command spawned as a child; protocol over its stdin/stdout.
    Command(String),
    /// `host:port` of a listening scorer.
    Tcp(String),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Command(c) => write!(f, "cmd:{c}"),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

type Reply = Result<f64, ScoreError>;

#[derive(Default)]
struct Pending {
    waiting: HashMap<u64, Sender<Reply>>,
    ready: Option<Sender<()>>,
    fatal: Option<ScoreError>,
}

impl Pending {
    fn fail_all(&mut self, err: ScoreError) {
        for (_, tx) in self.waiting.drain() {
            let _ = tx.send(Err(err.clone()));
        }
        self.ready = None;
        if self.fatal.is_none() {
            self.fatal = Some(err);
        }
    }
}

pub struct RemoteClient {
    endpoint: Endpoint,
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Mutex<Pending>>,
    next_id: AtomicU64,
    timeout: Duration,
    child: Mutex<Option<Child>>,
    reader: Mutex<Option<JoinHandle<()>>>,
    closed: Mutex<bool>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("endpoint", &self.endpoint).finish()
    }
}

impl RemoteClient {
    /// Connects (or spawns) and completes the init/ready handshake.
    pub fn open(endpoint: &Endpoint, dataset: &Path, timeout: Duration) -> Result<Self, ScoreError> {
        match endpoint {
            Endpoint::Command(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| ScoreError::Transport(format!("cannot spawn {cmd:?}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::start(endpoint.clone(), Box::new(stdin), Box::new(stdout), Some(child), dataset, timeout)
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| ScoreError::Transport(format!("cannot connect to {addr}: {e}")))?;
                let read_half = stream
                    .try_clone()
                    .map_err(|e| ScoreError::Transport(e.to_string()))?;
                Self::start(endpoint.clone(), Box::new(stream), Box::new(read_half), None, dataset, timeout)
            }
        }
    }

    fn start(
        endpoint: Endpoint,
        writer: Box<dyn Write + Send>,
        reader: Box<dyn std::io::Read + Send>,
        child: Option<Child>,
        dataset: &Path,
        timeout: Duration,
    ) -> Result<Self, ScoreError> {
        let pending = Arc::new(Mutex::new(Pending::default()));
        let (ready_tx, ready_rx) = mpsc::channel();
        pending.lock().unwrap().ready = Some(ready_tx);
        let shared = Arc::clone(&pending);
        let handle = std::thread::spawn(move || read_loop(BufReader::new(reader), shared));
        let client = RemoteClient {
            endpoint,
            writer: Mutex::new(writer),
            pending,
            next_id: AtomicU64::new(0),
            timeout,
            child: Mutex::new(child),
            reader: Mutex::new(Some(handle)),
            closed: Mutex::new(false),
        };
        client.send(&[Request::Init {
            dataset: dataset.to_string_lossy().into_owned(),
        }])?;
        match ready_rx.recv_timeout(timeout) {
            Ok(()) => Ok(client),
            Err(RecvTimeoutError::Timeout) => Err(ScoreError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(client
                .pending
                .lock()
                .unwrap()
                .fatal
                .clone()
                .unwrap_or_else(|| ScoreError::Transport("closed before ready".into()))),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn send(&self, requests: &[Request]) -> Result<(), ScoreError> {
        let mut buf = Vec::new();
        for r in requests {
            serde_json::to_writer(&mut buf, r).expect("requests serialize");
            buf.push(b'\n');
        }
        let mut w = self.writer.lock().unwrap();
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| ScoreError::Transport(e.to_string()))
    }

    /// Scores a batch; results come back in request order whatever the
    /// order of the responses.
    pub fn score_batch(&self, sample_id: &str, masks: &[Mask]) -> Result<Vec<f64>, (usize, ScoreError)> {
        let mut receivers: Vec<(u64, Receiver<Reply>)> = Vec::with_capacity(masks.len());
        let mut requests = Vec::with_capacity(masks.len());
        {
            let mut pending = self.pending.lock().unwrap();
            if let Some(err) = &pending.fatal {
                return Err((0, err.clone()));
            }
            for m in masks {
                let id = self.next_id.fetch_add(1, Ordering::Relaxed);
                let (tx, rx) = mpsc::channel();
                pending.waiting.insert(id, tx);
                receivers.push((id, rx));
                requests.push(Request::Score {
                    id,
                    sample: sample_id.to_owned(),
                    mask: m.bits().to_vec(),
                });
            }
        }
        if let Err(e) = self.send(&requests) {
            self.pending.lock().unwrap().fail_all(e.clone());
            return Err((0, e));
        }
        let deadline = Instant::now() + self.timeout;
        let mut losses = Vec::with_capacity(masks.len());
        for (i, (id, rx)) in receivers.into_iter().enumerate() {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(Ok(loss)) => losses.push(loss),
                Ok(Err(e)) => return Err((i, e)),
                Err(RecvTimeoutError::Timeout) => {
                    self.pending.lock().unwrap().waiting.remove(&id);
                    return Err((i, ScoreError::Timeout(self.timeout)));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err((i, ScoreError::Transport("response channel closed".into())))
                }
            }
        }
        Ok(losses)
    }

    pub fn score(&self, sample_id: &str, mask: &Mask) -> Result<f64, ScoreError> {
        self.score_batch(sample_id, std::slice::from_ref(mask))
            .map(|v| v[0])
            .map_err(|(_, e)| e)
    }

    /// Sends `shutdown` and waits for the child (if any) to exit with status 0.
    pub fn shutdown(&self) -> Result<(), ScoreError> {
        {
            let mut closed = self.closed.lock().unwrap();
            if *closed {
                return Ok(());
            }
            *closed = true;
        }
        let sent = self.send(&[Request::Shutdown]);
        if let Some(mut child) = self.child.lock().unwrap().take() {
            drop(std::mem::replace(&mut *self.writer.lock().unwrap(), Box::new(std::io::sink())));
            let deadline = Instant::now() + self.timeout;
            let status = loop {
                match child.try_wait().map_err(|e| ScoreError::Transport(e.to_string()))? {
                    Some(status) => break status,
                    None if Instant::now() >= deadline => {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(ScoreError::Timeout(self.timeout));
                    }
                    None => std::thread::sleep(Duration::from_millis(5)),
                }
            };
            if !status.success() {
                return Err(ScoreError::Transport(format!("scorer exited with {status}")));
            }
        }
        if let Some(h) = self.reader.lock().unwrap().take() {
            if matches!(self.endpoint, Endpoint::Command(_)) {
                let _ = h.join();
            }
        }
        sent
    }
}

impl Drop for RemoteClient {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

fn read_loop<R: BufRead>(reader: R, pending: Arc<Mutex<Pending>>) {
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                pending.lock().unwrap().fail_all(ScoreError::Transport(e.to_string()));
                return;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let response: Response = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                pending
                    .lock()
                    .unwrap()
                    .fail_all(ScoreError::Malformed(format!("{e}: {line}")));
                return;
            }
        };
        let mut p = pending.lock().unwrap();
        match response {
            Response::Ready => match p.ready.take() {
                Some(tx) => {
                    let _ = tx.send(());
                }
                None => {
                    p.fail_all(ScoreError::Protocol("unexpected ready".into()));
                    return;
                }
            },
            Response::Loss { id, loss } => match p.waiting.remove(&id) {
                Some(tx) if loss.is_finite() => {
                    let _ = tx.send(Ok(loss));
                }
                Some(tx) => {
                    let _ = tx.send(Err(ScoreError::Malformed(format!("non-finite loss for request {id}"))));
                }
                None => {
                    p.fail_all(ScoreError::Protocol(format!("response for unknown id {id}")));
                    return;
                }
            },
            Response::Error { id: Some(id), message } => match p.waiting.remove(&id) {
                Some(tx) => {
                    let _ = tx.send(Err(ScoreError::Remote { id, message }));
                }
                None => {
                    p.fail_all(ScoreError::Protocol(format!("error for unknown id {id}: {message}")));
                    return;
                }
            },
            Response::Error { id: None, message } => {
                p.fail_all(ScoreError::Protocol(format!("line-level error: {message}")));
                return;
            }
        }
    }
    pending
        .lock()
        .unwrap()
        .fail_all(ScoreError::Transport("scorer closed the connection".into()));
}

/// [`Scorer`] over a shared [`RemoteClient`].
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: Arc<RemoteClient>,
    concurrency: Concurrency,
}

impl RemoteScorer {
    pub fn new(client: Arc<RemoteClient>, concurrency: Concurrency) -> Self {
        RemoteScorer { client, concurrency }
    }

    pub fn client(&self) -> &Arc<RemoteClient> {
        &self.client
    }
}

impl Scorer for RemoteScorer {
    fn id(&self) -> String {
        format!("remote:{}", self.client.endpoint())
    }

    fn concurrency(&self) -> Concurrency {
        self.concurrency
    }

    fn score(&self, sample: &Sample, _partition: &GroupPartition, mask: &Mask) -> Result<f64, ScoreError> {
        self.client.score(&sample.id, mask)
    }

    fn score_batch(
        &self,
        sample: &Sample,
        _partition: &GroupPartition,
        masks: &[Mask],
        _workers: usize,
    ) -> Result<Vec<f64>, (usize, ScoreError)> {
        match self.concurrency {
            Concurrency::Safe => self.client.score_batch(&sample.id, masks),
            Concurrency::Serialized => masks
                .iter()
                .enumerate()
                .map(|(i, m)| self.client.score(&sample.id, m).map_err(|e| (i, e)))
                .collect(),
        }
    }
}

/// Loss function plugged into the reference server.
pub trait BridgeAdapter {
    /// `sample` is `None` when the id is not in the loaded dataset.
    fn loss(&self, sample_id: &str, sample: Option<&Sample>, mask: &Mask) -> Result<f64, String>;
}

/// Fraction of retained bits; needs no dataset.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoAdapter;

impl BridgeAdapter for EchoAdapter {
    fn loss(&self, _sample_id: &str, sample: Option<&Sample>, mask: &Mask) -> Result<f64, String> {
        if mask.is_empty() {
            return Err("empty mask".into());
        }
        if let Some(s) = sample {
            if s.n_visual() != mask.len() {
                return Err(format!("mask length {} != n {}", mask.len(), s.n_visual()));
            }
        }
        Ok(mask.retained() as f64 / mask.len() as f64)
    }
}

/// Same loss as [`PooledScorer`].
#[derive(Debug)]
pub struct PooledAdapter(pub PooledScorer);

impl BridgeAdapter for PooledAdapter {
    fn loss(&self, sample_id: &str, sample: Option<&Sample>, mask: &Mask) -> Result<f64, String> {
        let sample = sample.ok_or_else(|| format!("unknown sample {sample_id}"))?;
        if sample.n_visual() != mask.len() {
            return Err(format!("mask length {} != n {}", mask.len(), sample.n_visual()));
        }
        self.0.loss(sample, mask).map_err(|e| e.to_string())
    }
}

fn write_response<W: Write>(out: &mut W, r: &Response) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, r)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Reference server loop. Returns after `shutdown` or end of input.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, adapter: &dyn BridgeAdapter) -> std::io::Result<()> {
    let mut dataset: HashMap<String, Sample> = HashMap::new();
    let mut dataset_path: Option<PathBuf> = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
                write_response(&mut output, &Response::Error { id, message: format!("malformed request: {e}") })?;
                continue;
            }
        };
        match request {
            Request::Init { dataset: path } => {
                let path = PathBuf::from(path);
                match read_dataset(&path) {
                    Ok(samples) => {
                        dataset = samples.into_iter().map(|s| (s.id.clone(), s)).collect();
                        dataset_path = Some(path);
                        write_response(&mut output, &Response::Ready)?;
                    }
                    Err(e) => write_response(
                        &mut output,
                        &Response::Error { id: None, message: format!("cannot load {}: {e}", path.display()) },
                    )?,
                }
            }
            Request::Score { id, sample, mask } => {
                let response = if dataset_path.is_none() {
                    Response::Error { id: Some(id), message: "score before init".into() }
                } else {
                    match Mask::from_bits(mask) {
                        Ok(mask) => match adapter.loss(&sample, dataset.get(&sample), &mask) {
                            Ok(loss) => Response::Loss { id, loss },
                            Err(message) => Response::Error { id: Some(id), message },
                        },
                        Err(e) => Response::Error { id: Some(id), message: e.to_string() },
                    }
                };
                write_response(&mut output, &response)?;
            }
            Request::Shutdown => return Ok(()),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shapes() {
        let r = Request::Score { id: 7, sample: "s1".into(), mask: vec![1, 0] };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"type":"score","id":7,"sample":"s1","mask":[1,0]}"#
        );
        assert_eq!(serde_json::to_string(&Request::Shutdown).unwrap(), r#"{"type":"shutdown"}"#);
        assert_eq!(
            serde_json::to_string(&Request::Init { dataset: "d.evc".into() }).unwrap(),
            r#"{"type":"init","dataset":"d.evc"}"#
        );
    }

    #[test]
    fn response_wire_shapes() {
        let r: Response = serde_json::from_str(r#"{"type":"loss","id":3,"loss":0.5}"#).unwrap();
        assert_eq!(r, Response::Loss { id: 3, loss: 0.5 });
        let e: Response = serde_json::from_str(r#"{"type":"error","message":"bad"}"#).unwrap();
        assert_eq!(e, Response::Error { id: None, message: "bad".into() });
        assert_eq!(serde_json::to_string(&Response::Ready).unwrap(), r#"{"type":"ready"}"#);
    }

    #[test]
    fn echo_server_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.evc");
        let s = Sample::new("s1", ndarray::Array2::ones((2, 2)), ndarray::Array2::ones((1, 2))).unwrap();
        crate::container::write_dataset(&path, &[s]).unwrap();
        let input = format!(
            "{}\n{}\nnot json\n{{\"type\":\"score\",\"id\":9,\"mask\":5}}\n{}\n{}\n",
            serde_json::to_string(&Request::Init { dataset: path.to_string_lossy().into() }).unwrap(),
            r#"{"type":"score","id":7,"sample":"s1","mask":[1,0]}"#,
            r#"{"type":"shutdown"}"#,
            r#"{"type":"score","id":8,"sample":"s1","mask":[1,1]}"#,
        );
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &EchoAdapter).unwrap();
        let lines: Vec<Response> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0], Response::Ready);
        assert_eq!(lines[1], Response::Loss { id: 7, loss: 0.5 });
        assert!(matches!(lines[2], Response::Error { id: None, .. }));
        assert!(matches!(lines[3], Response::Error { id: Some(9), .. }));
        // nothing after shutdown
        assert_eq!(lines.len(), 4);
    }
}
