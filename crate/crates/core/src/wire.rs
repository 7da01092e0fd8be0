//! Request/response transports shared by the remote embedder and the remote
//! scorer.
//!
//! Both protocols are JSON documents. Over HTTP a request is a `POST` of the
//! JSON body and a throttle is status 429 with a `Retry-After: <seconds>`
//! header. Over stdio each request and response is one line of JSON, and a
//! throttle is a line of the form `{"retry_after": n}`.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WireResponse {
    pub status: u16,
    /// Seconds, from `Retry-After` or the stdio `retry_after` field.
    pub retry_after: Option<f64>,
    pub body: String,
}

impl WireResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        Self { status: 200, retry_after: None, body: body.into() }
    }

    pub fn throttled(retry_after: Option<f64>) -> Self {
        Self { status: 429, retry_after, body: String::new() }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

pub trait Transport: Send + Sync {
    fn call(&self, body: &str) -> Result<WireResponse>;

    fn describe(&self) -> String;
}

/// Blocking HTTP transport posting to a fixed URL.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent, url: url.into() }
    }
}

impl Transport for HttpTransport {
    fn call(&self, body: &str) -> Result<WireResponse> {
        let mut resp = self
            .agent
            .post(&self.url)
            .content_type("application/json")
            .send(body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok());
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        Ok(WireResponse { status, retry_after, body })
    }

    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }
}

/// Line-delimited JSON over a child process's stdin/stdout.
pub struct StdioTransport {
    program: String,
    inner: Mutex<StdioInner>,
}

struct StdioInner {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl StdioTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            program: program.to_string(),
            inner: Mutex::new(StdioInner { _child: child, stdin, stdout }),
        })
    }
}

/// Interprets one stdio response line.
pub fn parse_stdio_line(line: &str) -> Result<WireResponse> {
    let value: serde_json::Value = serde_json::from_str(line.trim())
        .map_err(|e| Error::Protocol(format!("malformed stdio frame: {e}")))?;
    if let Some(secs) = value.get("retry_after") {
        return Ok(WireResponse::throttled(secs.as_f64()));
    }
    if let Some(err) = value.get("error") {
        return Ok(WireResponse { status: 500, retry_after: None, body: err.to_string() });
    }
    Ok(WireResponse::ok(line.trim()))
}

impl Transport for StdioTransport {
    fn call(&self, body: &str) -> Result<WireResponse> {
        let mut inner = self.inner.lock().expect("stdio transport poisoned");
        let io_err = |e: std::io::Error| Error::Transport(format!("stdio {e}"));
        writeln!(inner.stdin, "{body}").map_err(io_err)?;
        inner.stdin.flush().map_err(io_err)?;
        let mut line = String::new();
        let n = inner.stdout.read_line(&mut line).map_err(io_err)?;
        if n == 0 {
            return Err(Error::Transport(format!("{} closed its stdout", self.program)));
        }
        parse_stdio_line(&line)
    }

    fn describe(&self) -> String {
        format!("stdio:{}", self.program)
    }
}

type Fallback = Box<dyn Fn(&str) -> Result<WireResponse> + Send + Sync>;

/// Replays a fixed script of responses and records every request body.
/// Once the script runs out, `fallback` answers each request.
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<WireResponse>>>,
    fallback: Fallback,
    requests: Mutex<Vec<String>>,
}

impl ScriptedTransport {
    pub fn new(
        script: Vec<Result<WireResponse>>,
        fallback: impl Fn(&str) -> Result<WireResponse> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Mutex::new(script.into()),
            fallback: Box::new(fallback),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn call(&self, body: &str) -> Result<WireResponse> {
        self.requests.lock().unwrap().push(body.to_string());
        let next = self.script.lock().unwrap().pop_front();
        match next {
            Some(r) => r,
            None => (self.fallback)(body),
        }
    }

    fn describe(&self) -> String {
        "scripted".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stdio_frames() {
        assert_eq!(parse_stdio_line("{\"retry_after\": 3}\n").unwrap(), WireResponse::throttled(Some(3.0)));
        assert_eq!(parse_stdio_line("{\"error\": \"boom\"}").unwrap().status, 500);
        let ok = parse_stdio_line("{\"vectors\": []}\n").unwrap();
        assert!(ok.is_success());
        assert_eq!(ok.body, "{\"vectors\": []}");
        assert!(parse_stdio_line("not json").is_err());
    }

    #[test]
    fn scripted_replays_then_falls_back() {
        let t = ScriptedTransport::new(vec![Ok(WireResponse::throttled(None))], |b| Ok(WireResponse::ok(b)));
        assert_eq!(t.call("a").unwrap().status, 429);
        assert_eq!(t.call("b").unwrap().body, "b");
        assert_eq!(t.requests(), ["a", "b"]);
    }

    #[cfg(unix)]
    #[test]
    fn stdio_round_trip_through_cat() {
        let t = StdioTransport::spawn("cat", &[]).unwrap();
        let r = t.call("{\"scores\": [1.0]}").unwrap();
        assert_eq!(r.body, "{\"scores\": [1.0]}");
        let r = t.call("{\"retry_after\": 2}").unwrap();
        assert_eq!(r.retry_after, Some(2.0));
    }
}
