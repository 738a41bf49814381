//! Flat key-value run configuration: diffable text, typed values, an
//! embedded schema version, and a stable hash for resume validation.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are
//! validation errors. Environment variables override paths only:
//! `DUET_DATASET`, `DUET_CHECKPOINT_DIR`, `DUET_REPORT`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use duet_core::checkpoint::Stage;
use duet_core::world::{CouplingRule, WorldSpec};
use duet_core::{Error, ModelConfig, Result};
use sha2::{Digest, Sha256};

pub const CONFIG_SCHEMA_VERSION: u64 = 1;

/// Everything one run needs: model + world parameters, optimizer settings,
/// the stage selector, ablation flags, and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub world: WorldSpec,
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub fusion: bool,
    pub history: bool,
    pub eval_records: usize,
    pub save_every: usize,
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk_default();
        let world = WorldSpec { seed: model.seed, ..WorldSpec::desk_default() };
        RunConfig {
            model,
            world,
            stage: Stage::Conductor,
            steps: 200,
            lr: 0.08,
            momentum: 0.9,
            batch: 4,
            fusion: true,
            history: true,
            eval_records: 8,
            save_every: 0,
            dataset: PathBuf::from("dataset.avds"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report: PathBuf::from("report.jsonl"),
        }
    }
}

fn bad(key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Format(format!("config key `{key}`: {detail}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|e| bad(key, e))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|e| bad(key, e))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|e| bad(key, e))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(key, format!("expected true/false, got `{other}`"))),
    }
}

impl RunConfig {
    /// Parses the text format, applying values over the desk defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut saw_version = false;
        let mut seed_set = false;
        let mut world_seed_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "schema_version" => {
                    if parse_u64(key, value)? != CONFIG_SCHEMA_VERSION {
                        return Err(bad(key, "unsupported schema version"));
                    }
                    saw_version = true;
                }
                "stage" => cfg.stage = Stage::parse(value)?,
                "steps" => cfg.steps = parse_usize(key, value)?,
                "lr" => cfg.lr = parse_f64(key, value)?,
                "momentum" => cfg.momentum = parse_f64(key, value)?,
                "batch" => cfg.batch = parse_usize(key, value)?,
                "fusion" => cfg.fusion = parse_bool(key, value)?,
                "history" => cfg.history = parse_bool(key, value)?,
                "eval_records" => cfg.eval_records = parse_usize(key, value)?,
                "save_every" => cfg.save_every = parse_usize(key, value)?,
                "seed" => {
                    cfg.model.seed = parse_u64(key, value)?;
                    seed_set = true;
                }
                "model.d_model" => cfg.model.d_model = parse_usize(key, value)?,
                "model.n_heads" => cfg.model.n_heads = parse_usize(key, value)?,
                "model.n_layers" => cfg.model.n_layers = parse_usize(key, value)?,
                "model.codebooks" => cfg.model.codebooks = parse_usize(key, value)?,
                "model.text_vocab" => cfg.model.text_vocab = parse_usize(key, value)?,
                "model.audio_vocab" => cfg.model.audio_vocab = parse_usize(key, value)?,
                "model.t_a" => cfg.model.t_a = parse_usize(key, value)?,
                "model.latent_len" => cfg.model.latent_len = parse_usize(key, value)?,
                "model.latent_dim" => cfg.model.latent_dim = parse_usize(key, value)?,
                "model.frames_per_latent" => cfg.model.frames_per_latent = parse_usize(key, value)?,
                "model.ms_per_token" => cfg.model.ms_per_token = parse_usize(key, value)?,
                "model.fps" => cfg.model.fps = parse_usize(key, value)?,
                "model.f_v_len" => cfg.model.f_v_len = parse_usize(key, value)?,
                "model.f_a_len" => cfg.model.f_a_len = parse_usize(key, value)?,
                "model.diffusion_steps" => cfg.model.diffusion_steps = parse_usize(key, value)?,
                "model.t_buckets" => cfg.model.t_buckets = parse_usize(key, value)?,
                "model.max_seq" => cfg.model.max_seq = parse_usize(key, value)?,
                "model.decode_cap" => cfg.model.decode_cap = parse_usize(key, value)?,
                "world.n_families" => cfg.world.n_families = parse_usize(key, value)?,
                "world.n_identities" => cfg.world.n_identities = parse_usize(key, value)?,
                "world.n_classes" => cfg.world.n_classes = parse_usize(key, value)?,
                "world.sigma" => cfg.world.sigma = parse_f64(key, value)?,
                "world.tau" => cfg.world.tau = parse_f64(key, value)?,
                "world.drift_scale" => cfg.world.drift_scale = parse_f64(key, value)?,
                "world.identity_scale" => cfg.world.identity_scale = parse_f64(key, value)?,
                "world.jitter" => cfg.world.jitter = parse_f64(key, value)?,
                "world.null_motion_ratio" => cfg.world.null_motion_ratio = parse_f64(key, value)?,
                "world.clips_per_record" => cfg.world.clips_per_record = parse_usize(key, value)?,
                "world.seed" => {
                    cfg.world.seed = parse_u64(key, value)?;
                    world_seed_set = true;
                }
                "world.rule" => match value {
                    "token_drift" => cfg.world.rule = CouplingRule::TokenDrift,
                    other => return Err(bad(key, format!("unknown rule `{other}`"))),
                },
                "paths.dataset" => cfg.dataset = PathBuf::from(value),
                "paths.checkpoint_dir" => cfg.checkpoint_dir = PathBuf::from(value),
                "paths.report" => cfg.report = PathBuf::from(value),
                other => return Err(Error::Format(format!("unknown config key `{other}`"))),
            }
        }
        if !saw_version {
            return Err(Error::Format("config is missing `schema_version`".into()));
        }
        if seed_set && !world_seed_set {
            cfg.world.seed = cfg.model.seed;
        }
        // environment overrides, paths only
        if let Ok(v) = std::env::var("DUET_DATASET") {
            cfg.dataset = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("DUET_CHECKPOINT_DIR") {
            cfg.checkpoint_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("DUET_REPORT") {
            cfg.report = PathBuf::from(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        duet_core::validate_config(self.model.clone())?;
        self.world.validate(&self.model)?;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::ConfigInvalid {
                field: "steps/batch",
                constraint: "must be positive".into(),
            });
        }
        if !(self.lr > 0.0) || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::ConfigInvalid {
                field: "lr/momentum",
                constraint: "lr > 0 and 0 <= momentum < 1 required".into(),
            });
        }
        Ok(())
    }

    /// Canonical non-path serialization; resume validation hashes this.
    pub fn canonical(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("schema_version", CONFIG_SCHEMA_VERSION.to_string());
        map.insert("stage", self.stage.as_str().to_string());
        map.insert("steps", self.steps.to_string());
        map.insert("lr", format!("{:?}", self.lr));
        map.insert("momentum", format!("{:?}", self.momentum));
        map.insert("batch", self.batch.to_string());
        map.insert("fusion", self.fusion.to_string());
        map.insert("history", self.history.to_string());
        map.insert("eval_records", self.eval_records.to_string());
        map.insert("save_every", self.save_every.to_string());
        map.insert("seed", self.model.seed.to_string());
        map.insert("model.d_model", self.model.d_model.to_string());
        map.insert("model.n_heads", self.model.n_heads.to_string());
        map.insert("model.n_layers", self.model.n_layers.to_string());
        map.insert("model.codebooks", self.model.codebooks.to_string());
        map.insert("model.text_vocab", self.model.text_vocab.to_string());
        map.insert("model.audio_vocab", self.model.audio_vocab.to_string());
        map.insert("model.t_a", self.model.t_a.to_string());
        map.insert("model.latent_len", self.model.latent_len.to_string());
        map.insert("model.latent_dim", self.model.latent_dim.to_string());
        map.insert("model.frames_per_latent", self.model.frames_per_latent.to_string());
        map.insert("model.ms_per_token", self.model.ms_per_token.to_string());
        map.insert("model.fps", self.model.fps.to_string());
        map.insert("model.f_v_len", self.model.f_v_len.to_string());
        map.insert("model.f_a_len", self.model.f_a_len.to_string());
        map.insert("model.diffusion_steps", self.model.diffusion_steps.to_string());
        map.insert("model.t_buckets", self.model.t_buckets.to_string());
        map.insert("model.max_seq", self.model.max_seq.to_string());
        map.insert("model.decode_cap", self.model.decode_cap.to_string());
        map.insert("world.n_families", self.world.n_families.to_string());
        map.insert("world.n_identities", self.world.n_identities.to_string());
        map.insert("world.n_classes", self.world.n_classes.to_string());
        map.insert("world.sigma", format!("{:?}", self.world.sigma));
        map.insert("world.tau", format!("{:?}", self.world.tau));
        map.insert("world.drift_scale", format!("{:?}", self.world.drift_scale));
        map.insert("world.identity_scale", format!("{:?}", self.world.identity_scale));
        map.insert("world.jitter", format!("{:?}", self.world.jitter));
        map.insert("world.null_motion_ratio", format!("{:?}", self.world.null_motion_ratio));
        map.insert("world.clips_per_record", self.world.clips_per_record.to_string());
        map.insert("world.seed", self.world.seed.to_string());
        map.insert("world.rule", "token_drift".to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the canonical form.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_hashes_deterministically() {
        let text = "\
schema_version = 1
stage = audio_ar   # stage two
steps = 50
lr = 0.1
seed = 11
model.d_model = 32
model.t_a = 16
model.latent_len = 4
world.sigma = 0.0
world.tau = 0.000000001
";
        let a = RunConfig::parse(text).unwrap();
        let b = RunConfig::parse(text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.stage, Stage::AudioAr);
        assert_eq!(a.model.seed, 11);
        assert_eq!(a.world.seed, 11);
        // a changed value changes the hash
        let c = RunConfig::parse(&text.replace("steps = 50", "steps = 51")).unwrap();
        assert_ne!(a.hash(), c.hash());
        // paths do not affect the hash
        let mut d = a.clone();
        d.report = PathBuf::from("elsewhere.jsonl");
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_missing_version() {
        assert!(RunConfig::parse("schema_version = 1\nnot_a_key = 3\n").is_err());
        assert!(RunConfig::parse("steps = 50\n").is_err());
        assert!(RunConfig::parse("schema_version = 2\n").is_err());
    }

    #[test]
    fn rejects_invalid_model_values() {
        let text = "schema_version = 1\nmodel.d_model = 30\n";
        assert!(matches!(
            RunConfig::parse(text),
            Err(Error::ConfigInvalid { field: "d_model", .. })
        ));
    }
}
