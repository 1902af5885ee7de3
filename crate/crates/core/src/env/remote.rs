use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use rand::RngCore;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{EnvSpec, Environment, StepOutcome};
use crate::error::{Error, Result};

/// Port a host listens on unless told otherwise.
pub const DEFAULT_PORT: u16 = 7720;

/// Episode cap used when the host does not report one.
pub const DEFAULT_REMOTE_EPISODE_STEPS: usize = 1000;

#[derive(Deserialize)]
struct SpecReply {
    state_dim: usize,
    action_dim: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    #[serde(default)]
    max_episode_steps: Option<usize>,
}

#[derive(Deserialize)]
struct ResetReply {
    state: Vec<f64>,
}

#[derive(Deserialize)]
struct StepReply {
    state: Vec<f64>,
    reward: f64,
    terminal: bool,
    #[serde(default)]
    truncated: bool,
    #[serde(default)]
    clipped: bool,
}

/// Client side of the JSON-lines environment protocol.
///
/// Requests are single-line JSON objects: `{"cmd":"spec"}`,
/// `{"cmd":"reset","seed":n}`, `{"cmd":"step","action":[...]}` and
/// `{"cmd":"close"}`. Any reply carrying an `"error"` key aborts with
/// [`Error::Protocol`].
pub struct RemoteEnv {
    spec: EnvSpec,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    steps: usize,
    state_dim: usize,
}

impl RemoteEnv {
    pub fn connect(host: &str, port: u16) -> Result<Self> {
        let stream = TcpStream::connect((host, port))
            .map_err(|e| Error::Protocol(format!("connect {host}:{port}: {e}")))?;
        Self::from_stream(stream)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_read_timeout(Some(Duration::from_secs(60)))?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut env = Self {
            spec: EnvSpec {
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 1,
            },
            reader: BufReader::new(stream),
            writer,
            steps: 0,
            state_dim: 1,
        };
        let reply: SpecReply = env.request(&json!({"cmd": "spec"}))?;
        env.spec = EnvSpec {
            state_dim: reply.state_dim,
            action_dim: reply.action_dim,
            action_low: reply.action_low,
            action_high: reply.action_high,
            max_episode_steps: reply.max_episode_steps.unwrap_or(DEFAULT_REMOTE_EPISODE_STEPS),
        };
        env.spec
            .validate()
            .map_err(|e| Error::Protocol(format!("host reported an invalid spec: {e}")))?;
        env.state_dim = env.spec.state_dim;
        Ok(env)
    }

    fn request<T: for<'de> Deserialize<'de>>(&mut self, msg: &Value) -> Result<T> {
        let mut line = serde_json::to_string(msg)?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .map_err(|e| Error::Protocol(format!("send: {e}")))?;
        let mut reply = String::new();
        let n = self
            .reader
            .read_line(&mut reply)
            .map_err(|e| Error::Protocol(format!("receive: {e}")))?;
        if n == 0 {
            return Err(Error::Protocol("host closed the connection".into()));
        }
        let value: Value = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Protocol(format!("malformed reply `{}`: {e}", reply.trim_end())))?;
        if let Some(err) = value.get("error") {
            return Err(Error::Protocol(format!("host error: {err}")));
        }
        serde_json::from_value(value).map_err(|e| Error::Protocol(format!("unexpected reply shape: {e}")))
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim || state.iter().any(|x| !x.is_finite()) {
            return Err(Error::Protocol(format!(
                "host sent a state of length {} (expected {}) or non-finite values",
                state.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    pub fn close(&mut self) -> Result<()> {
        let line = "{\"cmd\":\"close\"}\n";
        self.writer.write_all(line.as_bytes())?;
        Ok(())
    }
}

impl Drop for RemoteEnv {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl Environment for RemoteEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        // seeds stay within the exactly representable JSON integer range
        let seed = rng.next_u64() >> 11;
        let reply: ResetReply = self.request(&json!({"cmd": "reset", "seed": seed}))?;
        self.check_state(&reply.state)?;
        self.steps = 0;
        Ok(reply.state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (a, clipped) = self.spec.clip(action)?;
        let reply: StepReply = self.request(&json!({"cmd": "step", "action": a}))?;
        self.check_state(&reply.state)?;
        if !reply.reward.is_finite() {
            return Err(Error::Protocol("host sent a non-finite reward".into()));
        }
        self.steps += 1;
        Ok(StepOutcome {
            next_state: reply.state,
            reward: reply.reward,
            terminal: reply.terminal,
            truncated: reply.truncated || self.steps >= self.spec.max_episode_steps,
            clipped: clipped || reply.clipped,
        })
    }
}
