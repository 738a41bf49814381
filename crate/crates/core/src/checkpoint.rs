//! Versioned checkpoint format: magic, version, component tag, stage
//! marker, config echo + hash, RNG state, then named parameter blobs as
//! little-endian 64-bit floats. Loading validates config compatibility.

use std::io::{Read, Write};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Tensor;
use crate::wire;

pub const MAGIC_CHECKPOINT: &[u8; 4] = b"AVCP";

/// Which model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Conductor,
    Creator,
}

/// Training-stage marker; later stages require earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Conductor,
    AudioAr,
    Joint,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Conductor => "conductor",
            Stage::AudioAr => "audio_ar",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "conductor" => Ok(Stage::Conductor),
            "audio_ar" => Ok(Stage::AudioAr),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Format(format!("unknown stage `{other}`"))),
        }
    }
}

/// Serializable RNG state: ChaCha seed plus stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// An on-disk snapshot of one model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub component: Component,
    pub stage: Stage,
    pub config: ModelConfig,
    /// Hash of the run configuration that produced this snapshot.
    pub config_hash: [u8; 32],
    pub rng: RngState,
    pub params: ParamStore,
}

pub fn save_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    wire::write_header(w, MAGIC_CHECKPOINT)?;
    wire::write_u32(
        w,
        match ckpt.component {
            Component::Conductor => 0,
            Component::Creator => 1,
        },
    )?;
    wire::write_u32(
        w,
        match ckpt.stage {
            Stage::Conductor => 0,
            Stage::AudioAr => 1,
            Stage::Joint => 2,
        },
    )?;
    let config_json = serde_json::to_vec(&ckpt.config).map_err(|e| Error::Format(e.to_string()))?;
    wire::write_bytes(w, &config_json)?;
    w.write_all(&ckpt.config_hash)?;
    w.write_all(&ckpt.rng.seed)?;
    w.write_all(&ckpt.rng.word_pos.to_le_bytes())?;
    wire::write_u32(w, ckpt.params.len() as u32)?;
    for (name, tensor) in ckpt.params.iter() {
        wire::write_bytes(w, name.as_bytes())?;
        wire::write_u32(w, tensor.rows as u32)?;
        wire::write_u32(w, tensor.cols as u32)?;
        for v in &tensor.data {
            wire::write_f64(w, *v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    wire::read_header(r, MAGIC_CHECKPOINT)?;
    let component = match wire::read_u32(r)? {
        0 => Component::Conductor,
        1 => Component::Creator,
        other => return Err(Error::Format(format!("unknown component tag {other}"))),
    };
    let stage = match wire::read_u32(r)? {
        0 => Stage::Conductor,
        1 => Stage::AudioAr,
        2 => Stage::Joint,
        other => return Err(Error::Format(format!("unknown stage tag {other}"))),
    };
    let config: ModelConfig = serde_json::from_slice(&wire::read_bytes(r)?)
        .map_err(|e| Error::Format(format!("bad config echo: {e}")))?;
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let rng = RngState { seed, word_pos: u128::from_le_bytes(pos) };
    let n = wire::read_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = String::from_utf8(wire::read_bytes(r)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let rows = wire::read_u32(r)? as usize;
        let cols = wire::read_u32(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(wire::read_f64(r)?);
        }
        params.insert(&name, Tensor::from_vec(rows, cols, data));
    }
    Ok(Checkpoint { component, stage, config, config_hash, rng, params })
}

/// Validates that a loaded checkpoint matches the active model config.
pub fn check_config_compat(ckpt: &Checkpoint, config: &ModelConfig) -> Result<()> {
    if &ckpt.config != config {
        return Err(Error::ConfigMismatch(
            "checkpoint was produced under a different model config".into(),
        ));
    }
    Ok(())
}
