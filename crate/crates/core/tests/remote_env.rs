use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;

use flowrl::env::{Environment, RemoteEnv};
use flowrl::trainer::{RunConfig, Trainer};
use flowrl::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Serves one connection; `handle` maps each request to a reply line, or
/// `None` to hang up.
fn serve<F>(mut handle: F) -> (TcpStream, thread::JoinHandle<()>)
where
    F: FnMut(&Value) -> Option<String> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            let msg: Value = serde_json::from_str(&line).unwrap();
            if msg["cmd"] == "close" {
                break;
            }
            match handle(&msg) {
                Some(reply) => {
                    if writer.write_all(format!("{reply}\n").as_bytes()).is_err() {
                        break;
                    }
                }
                None => break,
            }
        }
    });
    (TcpStream::connect(addr).unwrap(), server)
}

const SPEC: &str = r#"{"state_dim":1,"action_dim":1,"action_low":[-1.0],"action_high":[1.0],"max_episode_steps":50}"#;

/// A 1D walk: `s' = s + a`, reward `-|s'|`, terminal once `|s'| > 5`.
fn walk() -> impl FnMut(&Value) -> Option<String> {
    let mut s = 0.0f64;
    move |msg| {
        Some(match msg["cmd"].as_str().unwrap() {
            "spec" => SPEC.to_string(),
            "reset" => {
                s = (msg["seed"].as_u64().unwrap() % 3) as f64 - 1.0;
                json!({"state": [s]}).to_string()
            }
            "step" => {
                s += msg["action"][0].as_f64().unwrap();
                json!({"state": [s], "reward": -s.abs(), "terminal": s.abs() > 5.0}).to_string()
            }
            other => panic!("unexpected command {other}"),
        })
    }
}

#[test]
fn loopback_sustains_ten_thousand_steps() {
    let (stream, server) = serve(walk());
    let mut env = RemoteEnv::from_stream(stream).unwrap();
    assert_eq!(env.spec().max_episode_steps, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = env.reset(&mut rng).unwrap();
    let mut episodes = 0;
    for k in 0..10_000 {
        let a = if s[0] > 0.0 { -0.7 } else { 0.9 } * if k % 7 == 0 { -1.0 } else { 1.0 };
        let out = env.step(&[a]).unwrap();
        assert!((out.reward + out.next_state[0].abs()).abs() < 1e-15);
        let done = out.done();
        s = out.next_state;
        if done {
            s = env.reset(&mut rng).unwrap();
            episodes += 1;
        }
    }
    // the 50-step cap truncates episodes the host never terminates
    assert!(episodes >= 10_000 / 50);
    drop(env);
    server.join().unwrap();
}

#[test]
fn actions_are_clipped_before_sending() {
    let (tx, rx) = mpsc::channel();
    let mut inner = walk();
    let (stream, server) = serve(move |msg| {
        if msg["cmd"] == "step" {
            tx.send(msg["action"][0].as_f64().unwrap()).unwrap();
        }
        inner(msg)
    });
    let mut env = RemoteEnv::from_stream(stream).unwrap();
    env.reset(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let out = env.step(&[3.0]).unwrap();
    assert!(out.clipped);
    assert_eq!(rx.recv().unwrap(), 1.0);
    drop(env);
    server.join().unwrap();
}

fn expect_protocol_error(reply_to_step: &'static str) -> String {
    let mut inner = walk();
    let (stream, server) = serve(move |msg| {
        if msg["cmd"] == "step" {
            Some(reply_to_step.to_string())
        } else {
            inner(msg)
        }
    });
    let mut env = RemoteEnv::from_stream(stream).unwrap();
    env.reset(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let err = env.step(&[0.5]).unwrap_err();
    drop(env);
    server.join().unwrap();
    match err {
        Error::Protocol(m) => m,
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn host_error_reply_is_reported() {
    assert!(expect_protocol_error(r#"{"error":"env crashed"}"#).contains("env crashed"));
}

#[test]
fn malformed_reply_is_reported() {
    assert!(expect_protocol_error("not json").contains("malformed"));
    assert!(expect_protocol_error(r#"{"state":[0.0]}"#).contains("shape"));
}

#[test]
fn wrong_state_width_is_reported() {
    expect_protocol_error(r#"{"state":[0.0,1.0],"reward":0.0,"terminal":false}"#);
}

#[test]
fn hang_up_is_reported() {
    let mut inner = walk();
    let (stream, server) = serve(move |msg| if msg["cmd"] == "step" { None } else { inner(msg) });
    let mut env = RemoteEnv::from_stream(stream).unwrap();
    env.reset(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(matches!(env.step(&[0.1]), Err(Error::Protocol(_))));
    server.join().unwrap();
}

#[test]
fn invalid_spec_is_rejected() {
    let (stream, server) = serve(|_| Some(r#"{"state_dim":1,"action_dim":1,"action_low":[1.0],"action_high":[-1.0]}"#.into()));
    assert!(matches!(RemoteEnv::from_stream(stream), Err(Error::Protocol(_))));
    server.join().unwrap();
}

fn small_config(steps: u64) -> RunConfig {
    RunConfig::with_overrides(&format!(
        "batch_size = 16\nwarmup_transitions = 32\ntotal_env_steps = {steps}\neval_interval = 0\n\
         critic_hidden_dim = 16\ncritic_hidden_layers = 1\nactor_hidden_dim = 16\nactor_hidden_layers = 1"
    ))
    .unwrap()
}

#[test]
fn trainer_runs_against_a_remote_env() {
    let (stream, server) = serve(walk());
    let mut env = RemoteEnv::from_stream(stream).unwrap();
    let mut trainer = Trainer::new(small_config(200), env.spec().clone(), "remote:test").unwrap();
    for _ in 0..200 {
        trainer.env_step(&mut env).unwrap();
    }
    assert_eq!(trainer.env_steps(), 200);
    assert_eq!(trainer.gradient_steps(), 200 - 32 + 1);
    drop(env);
    server.join().unwrap();
}

#[test]
fn env_failure_surfaces_from_the_trainer() {
    let mut inner = walk();
    let mut steps = 0;
    let (stream, server) = serve(move |msg| {
        if msg["cmd"] == "step" {
            steps += 1;
            if steps == 40 {
                return Some(r#"{"error":"boom"}"#.into());
            }
        }
        inner(msg)
    });
    let mut env = RemoteEnv::from_stream(stream).unwrap();
    let mut trainer = Trainer::new(small_config(100), env.spec().clone(), "remote:test").unwrap();
    let mut failed_at = None;
    for k in 0..100 {
        if let Err(e) = trainer.env_step(&mut env) {
            assert!(matches!(e, Error::Protocol(_)));
            failed_at = Some(k);
            break;
        }
    }
    assert_eq!(failed_at, Some(39));
    assert_eq!(trainer.env_steps(), 39);
    drop(env);
    server.join().unwrap();
}
