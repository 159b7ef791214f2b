//! Shared test fixtures: a scripted HTTP mock for the critic endpoint.
//!
//! Each test binary uses a different slice of this module.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// One scripted reply; consumed per incoming request, in order. When the
/// script runs out the server answers 500.
#[derive(Debug, Clone)]
pub enum MockResponse {
    /// 200 with an OpenAI-style chat completion whose message content is
    /// the given string.
    Chat(String),
    /// Arbitrary status code and raw body.
    Status(u16, String),
    /// 200 whose body is not valid JSON for the expected schema.
    RawBody(String),
}

/// What one request looked like on the wire.
#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

pub struct MockCritic {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<CapturedRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockCritic {
    /// Bind on an ephemeral localhost port and serve the scripted
    /// responses, one per connection.
    pub fn start(script: Vec<MockResponse>) -> MockCritic {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().expect("local addr");
        let requests: Arc<Mutex<Vec<CapturedRequest>>> = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let script = Arc::new(Mutex::new(VecDeque::from(script)));

        let thread_requests = Arc::clone(&requests);
        let thread_stop = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { break };
                let response = script.lock().unwrap().pop_front();
                handle_connection(stream, response, &thread_requests);
            }
        });

        MockCritic {
            addr,
            requests,
            stop,
            handle: Some(handle),
        }
    }

    /// Endpoint root for `CriticEndpointConfig::base_url`.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests captured so far, in accept order.
    pub fn requests(&self) -> Vec<CapturedRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for MockCritic {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    response: Option<MockResponse>,
    requests: &Mutex<Vec<CapturedRequest>>,
) {
    let Some(request) = read_request(&mut stream) else {
        return;
    };
    requests.lock().unwrap().push(request);

    let (status_line, body) = match response {
        Some(MockResponse::Chat(content)) => {
            let body = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": content}}]
            })
            .to_string();
            ("HTTP/1.1 200 OK".to_string(), body)
        }
        Some(MockResponse::Status(code, body)) => (format!("HTTP/1.1 {code} Scripted"), body),
        Some(MockResponse::RawBody(body)) => ("HTTP/1.1 200 OK".to_string(), body),
        None => (
            "HTTP/1.1 500 Exhausted".to_string(),
            "script exhausted".to_string(),
        ),
    };
    let reply = format!(
        "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
}

/// Minimal HTTP/1.1 request reader: headers, then a Content-Length body.
fn read_request(stream: &mut TcpStream) -> Option<CapturedRequest> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        if let Some(pos) = find_subslice(&buf, b"\r\n\r\n") {
            break pos + 4;
        }
        match stream.read(&mut chunk) {
            Ok(0) => return None,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    };

    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let mut lines = head.lines();
    let request_line = lines.next()?;
    let path = request_line.split_whitespace().nth(1)?.to_string();
    let mut authorization = None;
    let mut content_length = 0usize;
    for line in lines {
        if let Some((name, value)) = line.split_once(':') {
            match name.to_ascii_lowercase().as_str() {
                "authorization" => authorization = Some(value.trim().to_string()),
                "content-length" => content_length = value.trim().parse().unwrap_or(0),
                _ => {}
            }
        }
    }

    let mut body_bytes = buf[header_end..].to_vec();
    while body_bytes.len() < content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => body_bytes.extend_from_slice(&chunk[..n]),
            Err(_) => break,
        }
    }
    Some(CapturedRequest {
        path,
        authorization,
        body: String::from_utf8_lossy(&body_bytes).to_string(),
    })
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}
