//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic            8 bytes  "FRLCK001"
//! config_len       u32      followed by the config text (UTF-8)
//! label_len        u32      followed by the environment label (UTF-8)
//! spec_len         u32      followed by the environment spec as JSON
//! env_steps        u64
//! gradient_steps   u64
//! episodes         u64
//! rng seed         32 bytes
//! rng stream       u64
//! rng word_pos     u128
//! block_count      u32
//! per block:       u64 len, u64 step_count, len f64 values, len f64 adam_m, len f64 adam_v
//! replay snapshot  see ReplayBuffer::write_snapshot
//! ```
//!
//! Blocks are the actor, the online critics, the target critics, `Q^beta*`
//! and `V^beta*`, in that order. Gradients are not stored (they are zero
//! between optimizer steps). A resumed trainer starts a fresh episode.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RunConfig, Trainer};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParameterBlock};
use crate::replay::{read_f64, read_u32, read_u64, ReplayBuffer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRLCK001";

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

fn write_block<W: Write>(w: &mut W, p: &ParameterBlock) -> Result<()> {
    w.write_all(&(p.len() as u64).to_le_bytes())?;
    w.write_all(&p.step_count().to_le_bytes())?;
    write_f64s(w, p.values())?;
    let (m, v) = p.moments();
    write_f64s(w, m)?;
    write_f64s(w, v)
}

fn read_block_into<R: Read>(r: &mut R, net: &mut Mlp) -> Result<()> {
    let len = read_u64(r)? as usize;
    if len != net.params().len() {
        return Err(Error::Checkpoint(format!(
            "parameter block has {len} entries, network expects {}",
            net.params().len()
        )));
    }
    let steps = read_u64(r)?;
    let values = read_f64s(r, len)?;
    let m = read_f64s(r, len)?;
    let v = read_f64s(r, len)?;
    *net.params_mut() = ParameterBlock::from_parts(values, m, v, steps)?;
    Ok(())
}

impl Trainer {
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_str(w, &self.cfg.to_text())?;
        write_str(w, &self.env_label)?;
        write_str(w, &serde_json::to_string(&self.spec)?)?;
        for c in [self.env_steps, self.gradient_steps, self.episodes] {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        let mut blocks = vec![self.actor.net().params()];
        blocks.extend(self.critics.networks().into_iter().map(|n| n.params()));
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for b in blocks {
            write_block(w, b)?;
        }
        self.buffer.write_snapshot(w)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let cfg = RunConfig::parse(&read_str(r)?)?;
        let label = read_str(r)?;
        let spec: EnvSpec = serde_json::from_str(&read_str(r)?)?;
        let mut t = Trainer::new(cfg, spec, label)?;
        t.env_steps = read_u64(r)?;
        t.gradient_steps = read_u64(r)?;
        t.episodes = read_u64(r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(r)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        t.rng = rng;
        let count = read_u32(r)? as usize;
        let expected = 1 + t.critics.networks().len();
        if count != expected {
            return Err(Error::Checkpoint(format!("expected {expected} parameter blocks, found {count}")));
        }
        read_block_into(r, t.actor.net_mut())?;
        for net in t.critics.networks_mut() {
            read_block_into(r, net)?;
        }
        let buffer = ReplayBuffer::read_snapshot(r)?;
        if buffer.state_dim() != t.spec.state_dim || buffer.action_dim() != t.spec.action_dim {
            return Err(Error::Checkpoint("replay dims do not match the environment spec".into()));
        }
        t.buffer = buffer;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Environment, GmmBandit};
    use crate::trainer::MetricsRow;

    fn cfg() -> RunConfig {
        RunConfig {
            batch_size: 8,
            warmup_transitions: 10,
            total_env_steps: 30,
            eval_interval: 0,
            eval_episodes: 2,
            critic_hidden_dim: 6,
            critic_hidden_layers: 1,
            actor_hidden_dim: 6,
            actor_hidden_layers: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        let mut env = GmmBandit::new();
        let mut eval_env = GmmBandit::new();
        let mut t = Trainer::new(cfg(), env.spec().clone(), "gmm-bandit").unwrap();
        let mut rows: Vec<MetricsRow> = Vec::new();
        t.run(&mut env, &mut eval_env, &mut rows).unwrap();
        let mut bytes = Vec::new();
        t.write_checkpoint(&mut bytes).unwrap();
        let back = Trainer::read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.cfg, t.cfg);
        assert_eq!(back.actor, t.actor);
        assert_eq!(back.critics, t.critics);
        assert_eq!(back.buffer, t.buffer);
        assert_eq!(back.rng, t.rng);
        assert_eq!(back.env_steps, 30);
        // a bandit never has a live episode, so continuing is identical
        let (mut a, mut b) = (t, back);
        let mut e1 = GmmBandit::new();
        let mut e2 = GmmBandit::new();
        for _ in 0..5 {
            a.env_step(&mut e1).unwrap();
            b.env_step(&mut e2).unwrap();
        }
        assert_eq!(a.actor, b.actor);
        assert_eq!(a.critics, b.critics);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let t = Trainer::new(cfg(), GmmBandit::new().spec().clone(), "gmm-bandit").unwrap();
        let mut bytes = Vec::new();
        t.write_checkpoint(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Trainer::read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let short = &bytes[..bytes.len() / 2];
        assert!(Trainer::read_checkpoint(&mut &short[..]).is_err());
    }
}
