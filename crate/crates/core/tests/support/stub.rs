//! Minimal chat-completions server on a loopback port.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Seen {
    pub authorization: Option<String>,
    pub body: Value,
}

impl Seen {
    /// Text of the final user message.
    pub fn prompt(&self) -> &str {
        self.body["messages"]
            .as_array()
            .and_then(|m| m.last())
            .and_then(|m| m["content"].as_str())
            .unwrap_or("")
    }
}

pub struct Stub {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    handle: Option<JoinHandle<()>>,
}

/// Answers come from `reply(request_index, request_body)`, which returns
/// an HTTP status and the assistant text. Serves `max_requests` then exits.
pub fn serve<F>(max_requests: usize, reply: F) -> Stub
where
    F: Fn(usize, &Value) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (i, stream) in listener.incoming().take(max_requests).enumerate() {
            let Ok(stream) = stream else { break };
            if let Some(s) = handle_one(stream, i, &reply) {
                log.lock().unwrap().push(s);
            }
        }
    });
    Stub {
        url,
        seen,
        handle: Some(handle),
    }
}

fn handle_one<F>(mut stream: TcpStream, i: usize, reply: &F) -> Option<Seen>
where
    F: Fn(usize, &Value) -> (u16, String),
{
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().ok()?;
        }
        if lower.starts_with("authorization:") {
            authorization = Some(line["authorization:".len()..].trim().to_string());
        }
    }
    let mut buf = vec![0u8; length];
    reader.read_exact(&mut buf).ok()?;
    let body: Value = serde_json::from_slice(&buf).ok()?;
    let (status, text) = reply(i, &body);
    let payload = if status == 200 {
        json!({
            "id": format!("stub-{i}"),
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 11, "completion_tokens": 7, "total_tokens": 18}
        })
    } else {
        json!({"error": {"message": text}})
    }
    .to_string();
    let reason = if status == 200 { "OK" } else { "Error" };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.flush();
    Some(Seen { authorization, body })
}

impl Stub {
    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        // Unblock the accept loop if it is still waiting.
        if let Some(h) = self.handle.take() {
            let addr = self.url.trim_start_matches("http://").trim_end_matches("/v1").to_string();
            for _ in 0..64 {
                if h.is_finished() {
                    break;
                }
                let _ = TcpStream::connect(&addr);
            }
            let _ = h.join();
        }
    }
}
