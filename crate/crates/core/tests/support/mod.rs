//! Shared fixtures: a tiny HTTP stub server and a scripted weather tool.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use toolplay::llm::{MockRule, MockScript, Role};

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    /// Header names lowercased.
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

pub type Handler = dyn Fn(&StubRequest) -> (u16, String) + Send + Sync;

/// HTTP/1.1 server on an ephemeral port; one thread per connection.
pub struct StubServer {
    pub port: u16,
    hits: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&StubRequest) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                let counter = counter.clone();
                std::thread::spawn(move || {
                    if let Some(req) = read_request(&stream) {
                        counter.fetch_add(1, Ordering::SeqCst);
                        let (status, body) = handler(&req);
                        respond(stream, status, &body);
                    }
                });
            }
        });
        Self { port, hits }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://127.0.0.1:{}{path}", self.port)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn read_request(stream: &TcpStream) -> Option<StubRequest> {
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let target = parts.next()?.to_string();
    let mut length = 0usize;
    let mut headers = BTreeMap::new();
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).ok()?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    let (path, query) = target.split_once('?').unwrap_or((&target, ""));
    let query = query
        .split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            (decode(k), decode(v))
        })
        .collect();
    Some(StubRequest {
        method,
        path: path.to_string(),
        query,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

fn decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' if i + 2 < bytes.len() => {
                let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).unwrap_or("");
                out.push(u8::from_str_radix(hex, 16).unwrap_or(b'?'));
                i += 3;
            }
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn respond(mut stream: TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

/// Weather service: known cities answer 200, anything else 400.
pub fn weather_server() -> StubServer {
    StubServer::start(|req| match req.query.get("city").map(String::as_str) {
        Some("Paris") => (200, r#"{"city":"Paris","temp_c":21}"#.into()),
        Some("Oslo") => (200, r#"{"city":"Oslo","temp_c":4}"#.into()),
        Some(other) => (400, format!(r#"{{"error":"unknown city {other}"}}"#)),
        None => (400, r#"{"error":"missing required parameter city"}"#.into()),
    })
}

/// Registry with `count` weather-like tools sharing one stub server.
pub fn weather_registry(server: &StubServer, count: usize) -> String {
    let tools: Vec<serde_json::Value> = (0..count)
        .map(|i| {
            let name = if i == 0 { "get_weather".to_string() } else { format!("get_weather_{i}") };
            serde_json::json!({
                "name": name,
                "description": "Current weather for a city",
                "parameters": {
                    "properties": {
                        "city": {"type": "string", "description": "City name"},
                        "units": {"type": "string", "description": "metric or imperial"}
                    },
                    "required": ["city"],
                    "optional": ["units"]
                },
                "executor": {"kind": "rest", "method": "GET", "url": server.url("/weather")}
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "tools": tools })).unwrap()
}

pub const M1: &str = "Your task is to write 1 example API call";
pub const M2: &str = "Your task is to analyze the response";
pub const M3: &str = "generate a user instruction";
pub const M4: &str = "produce an effective and short answer";
pub const M5: &str = "your task is to give a `score`";
pub const M6: &str = "identify and contrast the patterns of instructions";
pub const M7: &str = "further enhance the description";
pub const M8: &str = "critique the descriptions";

/// A mock that plays every stage of the pipeline successfully for the
/// weather tools: Paris calls, top quality, a correct task model.
pub fn weather_script() -> MockScript {
    MockScript {
        rules: vec![
            MockRule::new([M1], r#"{"name": "get_weather", "parameters": {"properties": {"city": "Paris"}}}"#)
                .for_role(Role::ExampleGenerator),
            MockRule::new([M2], r#"{"analysis": "", "err_code": 0}"#).for_role(Role::ExampleGenerator),
            MockRule::new([M3], r#"{"instruction": "How warm is it in Paris right now?"}"#)
                .for_role(Role::ExampleGenerator),
            MockRule::new([M4], "It is 21 degrees Celsius in Paris.").for_role(Role::ExampleGenerator),
            MockRule::new([M5], r#"{"analysis": "clear", "score": 3}"#).for_role(Role::ExampleGenerator),
            MockRule::new([M6], "Keep naming the city explicitly.").for_role(Role::ExampleGenerator),
            MockRule::new(
                [M7],
                r#"{"description": "Current weather for a named city", "parameters": {"properties": {"city": {"type": "string", "description": "English city name, e.g. Paris"}, "units": {"type": "string", "description": "metric (default) or imperial"}}, "required": ["city"], "optional": ["units"]}}"#,
            )
            .for_role(Role::DocGenerator),
            MockRule::new([M8], "Descriptions are adequate.").for_role(Role::DocGenerator),
            MockRule::new(["Oslo"], r#"[{"name": "get_weather", "arguments": {"city": "Oslo"}}]"#)
                .for_role(Role::TaskModel),
            MockRule::new(["Paris"], r#"[{"name": "get_weather", "arguments": {"city": "Paris"}}]"#)
                .for_role(Role::TaskModel),
            MockRule::new(Vec::<String>::new(), r#"{"verdict": "solved", "reason": "ok"}"#).for_role(Role::Judge),
        ],
        ..MockScript::default()
    }
}

pub fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}
