//! A local HTTP server speaking the chat-completions protocol with
//! scriptable response sequences. Used by the test suite and by offline
//! dry runs against a deterministic "judge".

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

/// What the stub replies with for one request.
#[derive(Debug, Clone)]
pub enum StubReply {
    /// 200 with the given string as choices[0].message.content.
    Content(String),
    /// A bare HTTP status with an empty JSON body.
    Status(u16),
}

/// A parsed incoming request as seen by the stub.
#[derive(Debug, Clone)]
pub struct StubRequest {
    /// Zero-based arrival index.
    pub index: usize,
    pub body: Value,
    /// The user-message content (the judge prompt), when present.
    pub prompt: String,
}

pub type Responder = dyn Fn(&StubRequest) -> StubReply + Send + Sync;

struct Shared {
    responder: Box<Responder>,
    prompts: Mutex<Vec<String>>,
    arrivals: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: String,
    shared: Arc<Shared>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(responder: Box<Responder>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let addr = format!("http://{}", listener.local_addr().expect("addr"));
        let shared = Arc::new(Shared {
            responder,
            prompts: Mutex::new(Vec::new()),
            arrivals: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let accept_shared = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.stop.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let conn_shared = Arc::clone(&accept_shared);
                    std::thread::spawn(move || handle_connection(stream, &conn_shared));
                }
            }
        });
        StubServer {
            addr,
            shared,
            handle: Some(handle),
        }
    }

    /// Always answer with the same per-label scores.
    pub fn fixed_scores(first: [u8; 4], second: [u8; 4], dimensions: &[String]) -> StubServer {
        let body = scores_json(first, second, dimensions);
        StubServer::start(Box::new(move |_| StubReply::Content(body.clone())))
    }

    /// Answer request i with `sequence[i]`, repeating the last entry.
    pub fn sequence(sequence: Vec<StubReply>) -> StubServer {
        StubServer::start(Box::new(move |req| {
            sequence
                .get(req.index)
                .or_else(|| sequence.last())
                .cloned()
                .expect("non-empty sequence")
        }))
    }

    pub fn base_url(&self) -> &str {
        &self.addr
    }

    /// Prompts in arrival order. Arrival order is nondeterministic under
    /// concurrency; callers sort or match by content.
    pub fn prompts(&self) -> Vec<String> {
        self.shared.prompts.lock().expect("prompts lock").clone()
    }

    pub fn request_count(&self) -> usize {
        self.shared.arrivals.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously open requests observed.
    pub fn max_concurrent_observed(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // unblock the accept loop
        if let Some(addr) = self.addr.strip_prefix("http://") {
            let _ = TcpStream::connect(addr);
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Render a scores payload in the strict shape the judge prompt requests.
pub fn scores_json(first: [u8; 4], second: [u8; 4], dimensions: &[String]) -> String {
    let fill = |vals: [u8; 4]| {
        let mut m = serde_json::Map::new();
        for (d, v) in dimensions.iter().zip(vals) {
            m.insert(d.clone(), json!(v));
        }
        Value::Object(m)
    };
    json!({"Response 1": fill(first), "Response 2": fill(second)}).to_string()
}

fn handle_connection(mut stream: TcpStream, shared: &Shared) {
    let current = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.max_in_flight.fetch_max(current, Ordering::SeqCst);
    let result = respond(&mut stream, shared);
    shared.in_flight.fetch_sub(1, Ordering::SeqCst);
    let _ = result;
}

fn respond(stream: &mut TcpStream, shared: &Shared) -> std::io::Result<()> {
    let body = read_request_body(stream)?;
    let parsed: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let prompt = parsed["messages"]
        .as_array()
        .and_then(|msgs| {
            msgs.iter()
                .find(|m| m["role"] == "user")
                .and_then(|m| m["content"].as_str())
        })
        .unwrap_or("")
        .to_string();
    let index = shared.arrivals.fetch_add(1, Ordering::SeqCst);
    shared.prompts.lock().expect("prompts lock").push(prompt.clone());
    let request = StubRequest {
        index,
        body: parsed,
        prompt,
    };
    let reply = (shared.responder)(&request);
    let (status, body) = match reply {
        StubReply::Content(content) => (
            200,
            json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
                .to_string(),
        ),
        StubReply::Status(code) => (code, "{}".to_string()),
    };
    let reason = match status {
        200 => "OK",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

fn read_request_body(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end;
    loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            header_end = pos;
            break;
        }
        if buf.len() > 1 << 20 {
            return Ok(Vec::new());
        }
    }
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            if name.eq_ignore_ascii_case("content-length") {
                value.trim().parse::<usize>().ok()
            } else {
                None
            }
        })
        .unwrap_or(0);
    let body_start = header_end + 4;
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Ok(buf[body_start..(body_start + content_length).min(buf.len())].to_vec())
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}
