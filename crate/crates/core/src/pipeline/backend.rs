//! Generation backends and their line-delimited JSON wire protocol.
//!
//! Request, one JSON object per line (or per HTTP POST body):
//!
//! ```json
//! {"op": "generate", "context": "...", "temperature": 0.7, "n": 8, "max_tokens": 8, "want_states": true}
//! {"op": "forward", "context": "..."}
//! ```
//!
//! Response:
//!
//! ```json
//! {"sequences": [{"text": "...", "tokens": ["..."], "state_file": "/tmp/s0.soet"}], "seed": 7}
//! {"latent": [0.1, ...]}
//! {"error": "message"}
//! ```
//!
//! Each sequence needs its token list either inline or through the token
//! block of its state file. `state_file` is required when states were asked
//! for.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::trajectory::{read_trajectory, write_trajectory};
use crate::spectral::StateTrajectory;

pub const DEFAULT_MAX_TOKENS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Generate,
    Forward,
}

fn default_n() -> usize {
    1
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub context: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub want_states: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WireSequence {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequences: Vec<WireSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn error(msg: impl Into<String>) -> Self {
        Self {
            error: Some(msg.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub context: String,
    pub temperature: f64,
    pub n: usize,
    pub max_tokens: usize,
    pub want_states: bool,
}

impl GenerateRequest {
    pub fn to_wire(&self) -> Request {
        Request {
            op: Op::Generate,
            context: self.context.clone(),
            temperature: self.temperature,
            n: self.n,
            max_tokens: self.max_tokens,
            want_states: self.want_states,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub text: String,
    pub tokens: Vec<String>,
    /// One state row per token, when requested.
    pub states: Option<StateTrajectory>,
}

impl GeneratedSequence {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// A Teacher or Student model.
pub trait GenerationBackend {
    fn generate(&mut self, request: &GenerateRequest) -> Result<Vec<GeneratedSequence>>;

    /// Final-position latent of `context`.
    fn forward(&mut self, context: &str) -> Result<Vec<f64>>;

    /// Seed of the backend session, when known.
    fn seed(&self) -> Option<u64> {
        None
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &mut B {
    fn generate(&mut self, request: &GenerateRequest) -> Result<Vec<GeneratedSequence>> {
        (**self).generate(request)
    }

    fn forward(&mut self, context: &str) -> Result<Vec<f64>> {
        (**self).forward(context)
    }

    fn seed(&self) -> Option<u64> {
        (**self).seed()
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Box<B> {
    fn generate(&mut self, request: &GenerateRequest) -> Result<Vec<GeneratedSequence>> {
        (**self).generate(request)
    }

    fn forward(&mut self, context: &str) -> Result<Vec<f64>> {
        (**self).forward(context)
    }

    fn seed(&self) -> Option<u64> {
        (**self).seed()
    }
}

fn backend_err(e: impl std::fmt::Display) -> Error {
    Error::Backend(e.to_string())
}

/// Converts a wire response into sequences, loading state files.
pub fn decode_sequences(request: &GenerateRequest, response: Response) -> Result<Vec<GeneratedSequence>> {
    if let Some(e) = response.error {
        return Err(Error::Backend(e));
    }
    if response.sequences.len() != request.n {
        return Err(Error::Backend(format!(
            "asked for {} sequences, got {}",
            request.n,
            response.sequences.len()
        )));
    }
    response
        .sequences
        .into_iter()
        .enumerate()
        .map(|(i, seq)| {
            let states = match &seq.state_file {
                Some(path) => Some(read_trajectory(path).map_err(|e| {
                    Error::Backend(format!("sequence {i}: state file {}: {e}", path.display()))
                })?),
                None if request.want_states => {
                    return Err(Error::Backend(format!("sequence {i} has no state file")));
                }
                None => None,
            };
            let tokens = match (seq.tokens, states.as_ref().and_then(|s| s.token_texts())) {
                (Some(t), _) => t,
                (None, Some(t)) => t.to_vec(),
                (None, None) => {
                    return Err(Error::Backend(format!("sequence {i} has no token list")));
                }
            };
            if let Some(s) = &states {
                if s.len() != tokens.len() {
                    return Err(Error::Backend(format!(
                        "sequence {i}: {} states for {} tokens",
                        s.len(),
                        tokens.len()
                    )));
                }
            }
            Ok(GeneratedSequence {
                text: seq.text,
                tokens,
                states: if request.want_states { states } else { None },
            })
        })
        .collect()
}

fn decode_latent(response: Response) -> Result<Vec<f64>> {
    if let Some(e) = response.error {
        return Err(Error::Backend(e));
    }
    let latent = response
        .latent
        .ok_or_else(|| Error::Backend("forward response has no latent".into()))?;
    if latent.is_empty() || latent.iter().any(|x| !x.is_finite()) {
        return Err(Error::Backend("forward latent is empty or non-finite".into()));
    }
    Ok(latent)
}

/// Serves one request against `backend`. State files go to `state_dir`
/// named by the running `counter`.
pub fn handle_request(
    backend: &mut dyn GenerationBackend,
    request: &Request,
    state_dir: &Path,
    counter: &mut u64,
) -> Response {
    let result = match request.op {
        Op::Forward => backend.forward(&request.context).map(|latent| Response {
            latent: Some(latent),
            ..Response::default()
        }),
        Op::Generate => {
            let req = GenerateRequest {
                context: request.context.clone(),
                temperature: request.temperature,
                n: request.n,
                max_tokens: request.max_tokens,
                want_states: request.want_states,
            };
            backend.generate(&req).and_then(|seqs| {
                let mut sequences = Vec::with_capacity(seqs.len());
                for seq in seqs {
                    let state_file = match seq.states {
                        Some(states) if request.want_states => {
                            let path = state_dir.join(format!("seq-{:08}.soet", *counter));
                            *counter += 1;
                            let states = states.with_tokens(seq.tokens.clone())?;
                            write_trajectory(&states, &path)?;
                            Some(path)
                        }
                        _ => None,
                    };
                    sequences.push(WireSequence {
                        text: seq.text,
                        tokens: Some(seq.tokens),
                        state_file,
                    });
                }
                Ok(Response {
                    sequences,
                    seed: backend.seed(),
                    ..Response::default()
                })
            })
        }
    };
    result.unwrap_or_else(|e| Response::error(e.to_string()))
}

/// Answers requests line by line until `input` closes. Malformed requests
/// get an error response and the loop continues.
pub fn serve_stdio(
    backend: &mut dyn GenerationBackend,
    input: impl BufRead,
    mut output: impl Write,
    state_dir: &Path,
) -> Result<()> {
    let mut counter = 0;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle_request(backend, &req, state_dir, &mut counter),
            Err(e) => Response::error(format!("malformed request: {e}")),
        };
        let text = serde_json::to_string(&response).map_err(backend_err)?;
        writeln!(output, "{text}")
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

/// A backend running as a child process (`sh -c CMD`) that speaks the
/// protocol over its standard streams.
pub struct ProcessBackend {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    seed: Option<u64>,
}

impl ProcessBackend {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .map(BufReader::new)
            .ok_or_else(|| Error::Backend("child has no stdout".into()))?;
        Ok(Self {
            child,
            stdin,
            stdout,
            seed: None,
        })
    }

    fn call(&mut self, request: &Request) -> Result<Response> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Backend("backend stdin closed".into()))?;
        let line = serde_json::to_string(request).map_err(backend_err)?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Backend(format!("write to backend failed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("read from backend failed: {e}")))?;
        if n == 0 {
            return Err(Error::Backend("backend closed its output".into()));
        }
        let response: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Backend(format!("malformed backend response: {e}")))?;
        if response.seed.is_some() {
            self.seed = response.seed;
        }
        Ok(response)
    }
}

impl GenerationBackend for ProcessBackend {
    fn generate(&mut self, request: &GenerateRequest) -> Result<Vec<GeneratedSequence>> {
        let response = self.call(&request.to_wire())?;
        decode_sequences(request, response)
    }

    fn forward(&mut self, context: &str) -> Result<Vec<f64>> {
        let response = self.call(&Request {
            op: Op::Forward,
            context: context.to_string(),
            temperature: 0.0,
            n: 1,
            max_tokens: DEFAULT_MAX_TOKENS,
            want_states: false,
        })?;
        decode_latent(response)
    }

    fn seed(&self) -> Option<u64> {
        self.seed
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A backend behind an HTTP endpoint; each request is one POST of the JSON
/// request body.
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
    seed: Option<u64>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: ureq::Agent::new_with_defaults(),
            seed: None,
        }
    }

    fn call(&mut self, request: &Request) -> Result<Response> {
        let response: Response = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| Error::Backend(format!("POST {}: {e}", self.url)))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(format!("malformed backend response: {e}")))?;
        if response.seed.is_some() {
            self.seed = response.seed;
        }
        Ok(response)
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&mut self, request: &GenerateRequest) -> Result<Vec<GeneratedSequence>> {
        let response = self.call(&request.to_wire())?;
        decode_sequences(request, response)
    }

    fn forward(&mut self, context: &str) -> Result<Vec<f64>> {
        let response = self.call(&Request {
            op: Op::Forward,
            context: context.to_string(),
            temperature: 0.0,
            n: 1,
            max_tokens: DEFAULT_MAX_TOKENS,
            want_states: false,
        })?;
        decode_latent(response)
    }

    fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// `http://` and `https://` targets become [`HttpBackend`]s, anything else
/// is run as a shell command.
pub fn connect(target: &str) -> Result<Box<dyn GenerationBackend>> {
    if target.starts_with("http://") || target.starts_with("https://") {
        Ok(Box::new(HttpBackend::new(target)))
    } else {
        Ok(Box::new(ProcessBackend::spawn(target)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_defaults() {
        let r: Request = serde_json::from_str(r#"{"op":"forward","context":"x"}"#).unwrap();
        assert_eq!(r.n, 1);
        assert_eq!(r.max_tokens, 8192);
        assert!(!r.want_states);
        assert!(serde_json::from_str::<Request>(r#"{"op":"embed","context":"x"}"#).is_err());
    }

    fn req(n: usize, want_states: bool) -> GenerateRequest {
        GenerateRequest {
            context: String::new(),
            temperature: 0.7,
            n,
            max_tokens: 8,
            want_states,
        }
    }

    #[test]
    fn decode_checks_counts_and_tokens() {
        let seq = WireSequence {
            text: "ab".into(),
            tokens: Some(vec!["a".into(), "b".into()]),
            state_file: None,
        };
        let ok = Response {
            sequences: vec![seq.clone()],
            ..Response::default()
        };
        assert_eq!(decode_sequences(&req(1, false), ok.clone()).unwrap()[0].token_count(), 2);
        assert!(decode_sequences(&req(2, false), ok.clone()).is_err());
        assert!(decode_sequences(&req(1, true), ok).is_err());
        let no_tokens = Response {
            sequences: vec![WireSequence {
                tokens: None,
                ..seq
            }],
            ..Response::default()
        };
        assert!(decode_sequences(&req(1, false), no_tokens).is_err());
        assert!(matches!(
            decode_sequences(&req(1, false), Response::error("boom")),
            Err(Error::Backend(m)) if m == "boom"
        ));
    }

    #[test]
    fn latent_validation() {
        assert!(decode_latent(Response::default()).is_err());
        let r = Response {
            latent: Some(vec![1.0, 2.0]),
            ..Response::default()
        };
        assert_eq!(decode_latent(r).unwrap(), vec![1.0, 2.0]);
    }
}
