//! Minimal completions server for conformance tests.
//!
//! Serves fixed responses keyed by the request's `prompt`. Unknown prompts
//! get a 404. Every connection is closed after one response.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One fixture file: a prompt and the response body served for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    pub prompt: String,
    pub response: Value,
}

/// Reads every `*.json` fixture in `dir`, sorted by file name.
pub fn load_fixture_dir(dir: &Path) -> io::Result<Vec<MockFixture>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", p.display())))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub body: Value,
    pub authorization: Option<String>,
}

#[derive(Default)]
struct State {
    fixtures: HashMap<String, Value>,
    failures_left: AtomicUsize,
    failure_status: AtomicUsize,
    requests: AtomicUsize,
    log: Mutex<Vec<RecordedRequest>>,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(fixtures: Vec<MockFixture>) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(State {
            fixtures: fixtures.into_iter().map(|f| (f.prompt, f.response)).collect(),
            ..State::default()
        });
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let state = Arc::clone(&state);
            let stop = Arc::clone(&stop);
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let state = Arc::clone(&state);
                    thread::spawn(move || {
                        if let Err(e) = serve(stream, &state) {
                            log::debug!("mock connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(Self { addr, state, stop, handle: Some(handle) })
    }

    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        Self::start(load_fixture_dir(dir)?)
    }

    /// URL of the completions route.
    pub fn url(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    /// Requests served so far, including failures.
    pub fn request_count(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().expect("mock log").clone()
    }

    /// Answers the next `n` requests with `status` before serving fixtures.
    pub fn fail_next(&self, n: usize, status: u16) {
        self.state.failure_status.store(status as usize, Ordering::SeqCst);
        self.state.failures_left.store(n, Ordering::SeqCst);
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, state: &State) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.is_empty() {
        return Ok(());
    }
    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let value = value.trim();
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.parse().unwrap_or(0),
                "authorization" => authorization = Some(value.to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    state.requests.fetch_add(1, Ordering::SeqCst);
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    state.log.lock().expect("mock log").push(RecordedRequest { body: body.clone(), authorization });

    let failing = state
        .failures_left
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    let (status, payload) = if failing {
        let status = state.failure_status.load(Ordering::SeqCst) as u16;
        (status, serde_json::json!({"error": "injected failure"}))
    } else {
        match body.get("prompt").and_then(Value::as_str).and_then(|p| state.fixtures.get(p)) {
            Some(v) => (200, v.clone()),
            None => (404, serde_json::json!({"error": "no fixture for prompt"})),
        }
    };
    let text = serde_json::to_string(&payload).map_err(io::Error::other)?;
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        reason(status),
        text.len()
    )?;
    stream.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}
