use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use super::CorpusError;

/// Chat-completion endpoint settings. The API key itself is read from the
/// environment variable named by `api_key_env`, never from config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: f64,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "TEACHER_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            temperature: 0.7,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct TeacherClient {
    config: TeacherConfig,
    api_key: String,
    agent: ureq::Agent,
    sleeper: Sleeper,
}

enum Attempt {
    Done(String),
    Retry(Option<u16>, String),
    Fatal(CorpusError),
}

impl TeacherClient {
    /// Fails before any network traffic if the key variable is unset.
    pub fn new(config: TeacherConfig) -> Result<Self, CorpusError> {
        if config.endpoint.is_empty() || config.model.is_empty() {
            return Err(CorpusError::Config("endpoint and model must be set".into()));
        }
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CorpusError::Config(format!("environment variable `{}` is not set", config.api_key_env)))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            api_key,
            agent,
            sleeper: Arc::new(std::thread::sleep),
        })
    }

    /// Replaces the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(None, e.to_string()),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Attempt::Retry(Some(status), format!("http status {status}"));
        }
        if status >= 400 {
            return Attempt::Fatal(CorpusError::Transport {
                attempts: 1,
                status: Some(status),
                message: "request rejected".into(),
            });
        }
        let value: Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(CorpusError::BadResponse(e.to_string())),
        };
        match value.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(text) => Attempt::Done(text.to_string()),
            None => Attempt::Fatal(CorpusError::BadResponse("missing choices[0].message.content".into())),
        }
    }

    /// Sends one chat request, retrying 429/5xx/transport failures with
    /// exponential backoff up to `max_retries` times.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<String, CorpusError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(CorpusError::Transport { status, message, .. }) => {
                    return Err(CorpusError::Transport { attempts, status, message })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(status, message) => {
                    if attempts > self.config.max_retries {
                        return Err(CorpusError::Transport { attempts, status, message });
                    }
                    warn!(attempts, ?status, "teacher request failed, retrying");
                    (self.sleeper)(delay);
                    delay *= 2;
                }
            }
        }
    }
}

/// One-shot convenience wrapper around [`TeacherClient::chat`].
pub fn teacher_chat(config: &TeacherConfig, messages: &[ChatMessage]) -> Result<String, CorpusError> {
    TeacherClient::new(config.clone())?.chat(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Mutex;

    /// Serves scripted responses; `None` echoes the last message content.
    fn mock(script: Vec<(u16, Option<String>)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in script {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.to_ascii_lowercase();
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let req: Value = serde_json::from_slice(&buf).unwrap();
                let content = body.unwrap_or_else(|| {
                    let msgs = req["messages"].as_array().unwrap();
                    msgs[msgs.len() - 1]["content"].as_str().unwrap().to_string()
                });
                let payload = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    fn config(endpoint: String, var: &str) -> TeacherConfig {
        std::env::set_var(var, "test-key");
        TeacherConfig {
            endpoint,
            api_key_env: var.into(),
            max_retries: 3,
            backoff_ms: 100,
            timeout_secs: 5,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn echo_roundtrip() {
        let cfg = config(mock(vec![(200, None)]), "SIDREC_TEST_KEY_ECHO");
        let out = teacher_chat(&cfg, &[ChatMessage::user("hello there")]).unwrap();
        assert_eq!(out, "hello there");
    }

    #[test]
    fn retries_after_rate_limit_with_backoff() {
        let cfg = config(mock(vec![(429, None), (429, None), (200, Some("ok".into()))]), "SIDREC_TEST_KEY_RETRY");
        let delays = Arc::new(Mutex::new(Vec::new()));
        let d2 = delays.clone();
        let client = TeacherClient::new(cfg).unwrap().with_sleeper(Arc::new(move |d| d2.lock().unwrap().push(d)));
        assert_eq!(client.chat(&[ChatMessage::user("x")]).unwrap(), "ok");
        assert_eq!(*delays.lock().unwrap(), vec![Duration::from_millis(100), Duration::from_millis(200)]);
    }

    #[test]
    fn exhausted_retries_report_last_status() {
        let mut cfg = config(mock(vec![(503, None), (503, None)]), "SIDREC_TEST_KEY_FAIL");
        cfg.max_retries = 1;
        let client = TeacherClient::new(cfg).unwrap().with_sleeper(Arc::new(|_| {}));
        match client.chat(&[ChatMessage::user("x")]) {
            Err(CorpusError::Transport { attempts, status, .. }) => {
                assert_eq!(attempts, 2);
                assert_eq!(status, Some(503));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_fails_before_network() {
        let cfg = TeacherConfig {
            endpoint: "http://127.0.0.1:9/never".into(),
            api_key_env: "SIDREC_TEST_KEY_DEFINITELY_UNSET".into(),
            ..TeacherConfig::default()
        };
        assert!(matches!(TeacherClient::new(cfg), Err(CorpusError::Config(_))));
    }
}
