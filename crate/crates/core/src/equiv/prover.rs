use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::json;

/// Answer of an external equivalence prover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProverAnswer {
    Equivalent,
    NotEquivalent,
    Unknown(String),
}

/// Decision procedure for query equivalence living outside this crate.
pub trait Prover: Send + Sync {
    fn name(&self) -> &str;
    fn prove(&self, q1: &str, q2: &str, schema_ddl: &str) -> ProverAnswer;
}

fn parse_answer(text: &str) -> ProverAnswer {
    let trimmed = text.trim();
    let word = match serde_json::from_str::<serde_json::Value>(trimmed) {
        Ok(v) => v["result"]
            .as_str()
            .unwrap_or_default()
            .to_ascii_lowercase(),
        Err(_) => trimmed
            .split_whitespace()
            .next()
            .unwrap_or_default()
            .to_ascii_lowercase(),
    };
    match word.as_str() {
        "equivalent" => ProverAnswer::Equivalent,
        "not-equivalent" | "not_equivalent" | "inequivalent" => ProverAnswer::NotEquivalent,
        _ => ProverAnswer::Unknown(format!(
            "unrecognized prover answer: {}",
            trimmed.chars().take(200).collect::<String>()
        )),
    }
}

fn request(q1: &str, q2: &str, schema_ddl: &str) -> serde_json::Value {
    json!({"q1": q1, "q2": q2, "schema": schema_ddl})
}

/// Runs a shell command, writes `{"q1", "q2", "schema"}` as JSON to its
/// stdin and reads `equivalent`, `not-equivalent` or `unknown` (plain or as
/// `{"result": ...}`) from its stdout.
#[derive(Debug, Clone)]
pub struct CommandProver {
    command: String,
    timeout: Duration,
}

impl CommandProver {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
        }
    }
}

impl Prover for CommandProver {
    fn name(&self) -> &str {
        &self.command
    }

    fn prove(&self, q1: &str, q2: &str, schema_ddl: &str) -> ProverAnswer {
        let mut child = match Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return ProverAnswer::Unknown(format!("cannot start prover: {e}")),
        };
        if let Some(mut stdin) = child.stdin.take() {
            // A prover may exit without reading its input; that is not an error.
            let _ = stdin.write_all(request(q1, q2, schema_ddl).to_string().as_bytes());
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let out = reader.join().unwrap_or_default();
                    if !status.success() {
                        return ProverAnswer::Unknown(format!("prover exited with {status}"));
                    }
                    return parse_answer(&out);
                }
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return ProverAnswer::Unknown("prover timed out".into());
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => return ProverAnswer::Unknown(format!("prover wait failed: {e}")),
            }
        }
    }
}

/// POSTs the same JSON request to an HTTP endpoint.
#[derive(Debug)]
pub struct HttpProver {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpProver {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }
}

impl Prover for HttpProver {
    fn name(&self) -> &str {
        &self.url
    }

    fn prove(&self, q1: &str, q2: &str, schema_ddl: &str) -> ProverAnswer {
        let resp = self
            .client
            .post(&self.url)
            .json(&request(q1, q2, schema_ddl))
            .send();
        match resp
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.text())
        {
            Ok(body) => parse_answer(&body),
            Err(e) => ProverAnswer::Unknown(format!("prover request failed: {e}")),
        }
    }
}
