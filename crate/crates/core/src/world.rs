//! Synthetic world: paired audio-token / video-latent streams with an exact,
//! known cross-modal coupling, so sync and long-horizon consistency are
//! measurable by closed-form oracles.
//!
//! Default coupling rule: each audio token carries a class; a latent's value
//! is a running walk that steps by the mean drift vector of the token
//! classes inside that latent's aligned audio window, plus observation
//! noise. The walk persists across clip boundaries, and an identity code
//! offsets both the token pattern and the latent start, giving a toy analog
//! of timbre/visual identity held constant across clips of one record.
//!
//! Drift vectors are axis-aligned and sign-separated, so the minimum
//! pairwise L-inf distance between classes equals `drift_scale` and any
//! class substitution inside a window is detectable at tolerance below
//! `drift_scale / 2`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conductor::{ConductorTask, TaskFamily};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{align_audio_window, FusionWindows};
use crate::types::{
    AudioClip, DirectivePair, LatentClip, Token, AUDIO_CONTENT_START, TEXT_CONTENT_START,
};
use crate::wire;

/// Coupling rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingRule {
    /// Audio token classes drive additive latent drift per aligned window.
    TokenDrift,
}

/// World parameters; deterministic given `(spec, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub rule: CouplingRule,
    pub n_families: usize,
    pub n_identities: usize,
    pub n_classes: usize,
    /// Latent observation noise.
    pub sigma: f64,
    /// Oracle matching tolerance.
    pub tau: f64,
    /// Norm of each class drift vector.
    pub drift_scale: f64,
    /// Norm scale of identity offsets.
    pub identity_scale: f64,
    /// Probability that the class walk jumps to a random class.
    pub jitter: f64,
    /// Fraction of records carrying empty motion directives.
    pub null_motion_ratio: f64,
    pub clips_per_record: usize,
    pub seed: u64,
}

impl WorldSpec {
    pub fn desk_default() -> WorldSpec {
        WorldSpec {
            rule: CouplingRule::TokenDrift,
            n_families: 4,
            n_identities: 4,
            n_classes: 8,
            sigma: 0.02,
            tau: 0.25,
            drift_scale: 0.6,
            identity_scale: 1.2,
            jitter: 0.1,
            null_motion_ratio: 0.5,
            clips_per_record: 2,
            seed: 7,
        }
    }

    /// Noiseless variant for exact-oracle tests.
    pub fn noiseless() -> WorldSpec {
        WorldSpec { sigma: 0.0, tau: 1e-9, ..WorldSpec::desk_default() }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.sigma < 0.0 || self.tau <= 0.0 {
            return Err(Error::ConfigInvalid {
                field: "world.sigma/tau",
                constraint: "sigma >= 0 and tau > 0 required".into(),
            });
        }
        if self.n_classes == 0 || self.n_families == 0 || self.n_identities == 0 {
            return Err(Error::ConfigInvalid {
                field: "world.counts",
                constraint: "families, identities, and classes must be positive".into(),
            });
        }
        if self.clips_per_record == 0 {
            return Err(Error::ConfigInvalid {
                field: "world.clips_per_record",
                constraint: "must be positive".into(),
            });
        }
        let audio_ids = AUDIO_CONTENT_START + self.n_classes;
        if audio_ids > config.audio_vocab {
            return Err(Error::ConfigInvalid {
                field: "world.n_classes",
                constraint: format!("needs audio vocab of at least {audio_ids}"),
            });
        }
        let text_ids = TEXT_CONTENT_START + 3 * self.n_families + self.n_identities;
        if text_ids > config.text_vocab {
            return Err(Error::ConfigInvalid {
                field: "world.n_families",
                constraint: format!("needs text vocab of at least {text_ids}"),
            });
        }
        Ok(())
    }

    /// Drift vector of one token class: axis-aligned, sign-separated.
    pub fn drift(&self, class: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        let axis = class % dim;
        let sign = if (class / dim) % 2 == 0 { 1.0 } else { -1.0 };
        v[axis] = sign * self.drift_scale;
        v
    }

    /// Identity offset vectors; seeded, fixed per world.
    pub fn identity_offset(&self, identity: usize, dim: usize) -> Vec<f64> {
        let mut rng = crate::rng::stream_rng(self.seed, "world-identity", identity as u64);
        (0..dim).map(|_| self.identity_scale * crate::rng::gauss(&mut rng)).collect()
    }

    /// Token id carrying `class` in codebook `k`.
    pub fn token_id(&self, codebook: usize, class: usize) -> u32 {
        (AUDIO_CONTENT_START + (class + codebook * 3) % self.n_classes) as u32
    }

    /// Inverse of [`WorldSpec::token_id`].
    pub fn class_of(&self, codebook: usize, id: u32) -> usize {
        let raw = id as usize - AUDIO_CONTENT_START;
        (raw + self.n_classes - (codebook * 3) % self.n_classes) % self.n_classes
    }

    // Text-token layout: families, then identities, then motion markers,
    // then response markers.
    pub fn family_token(&self, family: usize) -> Token {
        Token::text((TEXT_CONTENT_START + family) as u32)
    }

    pub fn identity_token(&self, identity: usize) -> Token {
        Token::text((TEXT_CONTENT_START + self.n_families + identity) as u32)
    }

    pub fn motion_token(&self, family: usize) -> Token {
        Token::text((TEXT_CONTENT_START + self.n_families + self.n_identities + family) as u32)
    }

    pub fn response_token(&self, family: usize) -> Token {
        Token::text(
            (TEXT_CONTENT_START + 2 * self.n_families + self.n_identities + family) as u32,
        )
    }
}

/// Ground-truth labels attached to a generated record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLabels {
    pub family: usize,
    pub identity: usize,
    pub has_motion: bool,
    pub seed: u64,
}

/// One paired record: directives, aligned clip streams, and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldRecord {
    pub directives: DirectivePair,
    pub audio: Vec<AudioClip>,
    pub video: Vec<LatentClip>,
    pub labels: RecordLabels,
}

/// Generates the class walk of one record: `clips x t_a` classes.
fn class_walk(
    spec: &WorldSpec,
    family: usize,
    identity: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    config: &ModelConfig,
) -> Vec<Vec<usize>> {
    let step = 1 + family % 3;
    let mut class = (family * 3 + identity) % spec.n_classes;
    let mut clips = Vec::with_capacity(spec.clips_per_record);
    for _ in 0..spec.clips_per_record {
        let mut row = Vec::with_capacity(config.t_a);
        for _ in 0..config.t_a {
            row.push(class);
            if rng.random::<f64>() < spec.jitter {
                class = rng.random_range(0..spec.n_classes);
            } else {
                class = (class + step) % spec.n_classes;
            }
        }
        clips.push(row);
    }
    clips
}

/// Deterministic record generation: video latents are the coupling rule
/// applied to the audio tokens plus observation noise; directives encode the
/// generating family; the identity code is constant across clips.
pub fn gen_record(spec: &WorldSpec, config: &ModelConfig, seed: u64) -> WorldRecord {
    let mut rng = crate::rng::stream_rng(spec.seed, "world-record", seed);
    let family = rng.random_range(0..spec.n_families);
    let identity = rng.random_range(0..spec.n_identities);
    let has_motion = rng.random::<f64>() >= spec.null_motion_ratio;

    let classes = class_walk(spec, family, identity, &mut rng, config);
    let audio: Vec<AudioClip> = classes
        .iter()
        .map(|row| {
            let rows: Vec<Vec<u32>> = (0..config.codebooks)
                .map(|k| row.iter().map(|&c| spec.token_id(k, c)).collect())
                .collect();
            AudioClip::from_ids(&rows).expect("generated clip is valid")
        })
        .collect();

    let windows = FusionWindows::from_config(config);
    let dim = config.latent_dim;
    let mut state = spec.identity_offset(identity, dim);
    let mut video = Vec::with_capacity(spec.clips_per_record);
    for clip_classes in &classes {
        let mut data = Vec::with_capacity(config.latent_len * dim);
        for l in 0..config.latent_len {
            let (start, end) =
                align_audio_window(l, config.latent_len, config.t_a, &windows).unwrap();
            if end > start {
                let mut drift = vec![0.0; dim];
                for t in start..end {
                    let d = spec.drift(clip_classes[t], dim);
                    for c in 0..dim {
                        drift[c] += d[c];
                    }
                }
                for c in 0..dim {
                    state[c] += drift[c] / (end - start) as f64;
                }
            }
            for c in 0..dim {
                data.push(state[c] + spec.sigma * crate::rng::gauss(&mut rng));
            }
        }
        video.push(LatentClip::new(config.latent_len, dim, data).expect("finite latents"));
    }

    let speech = vec![spec.family_token(family), spec.identity_token(identity)];
    let motion = if has_motion {
        vec![spec.motion_token(family)]
    } else {
        Vec::new()
    };
    WorldRecord {
        directives: DirectivePair::new(speech, motion).unwrap(),
        audio,
        video,
        labels: RecordLabels { family, identity, has_motion, seed },
    }
}

/// Fraction of latent steps matching the coupling rule's prediction from the
/// temporally aligned audio window, within tolerance `tau`.
pub fn oracle_consistency(
    audio: &[AudioClip],
    video: &[LatentClip],
    spec: &WorldSpec,
    config: &ModelConfig,
) -> Result<f64> {
    if audio.len() != video.len() {
        return Err(Error::ClipCountMismatch { audio: audio.len(), video: video.len() });
    }
    if audio.is_empty() {
        return Err(Error::TooFewClips { got: 0, need: 1 });
    }
    let windows = FusionWindows::from_config(config);
    let dim = video[0].dim();
    let mut total = 0usize;
    let mut matches = 0usize;
    let mut prev: Option<Vec<f64>> = None;
    for (clip_a, clip_v) in audio.iter().zip(video.iter()) {
        for l in 0..clip_v.len() {
            let cur = clip_v.latent(l).to_vec();
            if let Some(p) = prev {
                let (start, end) = align_audio_window(l, clip_v.len(), clip_a.len(), &windows)?;
                let mut predicted = vec![0.0; dim];
                if end > start {
                    for t in start..end {
                        let class = spec.class_of(0, clip_a.token(0, t).id);
                        let d = spec.drift(class, dim);
                        for c in 0..dim {
                            predicted[c] += d[c];
                        }
                    }
                    for v in predicted.iter_mut() {
                        *v /= (end - start) as f64;
                    }
                }
                let ok = (0..dim).all(|c| ((cur[c] - p[c]) - predicted[c]).abs() <= spec.tau);
                total += 1;
                if ok {
                    matches += 1;
                }
            }
            prev = Some(cur);
        }
    }
    if total == 0 {
        return Err(Error::TooFewClips { got: audio.len(), need: 2 });
    }
    Ok(matches as f64 / total as f64)
}

/// Mean squared boundary jump minus mean squared intra-clip step, floored
/// at zero. Grows with injected discontinuities at clip boundaries.
pub fn boundary_discontinuity(video: &[LatentClip]) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::TooFewClips { got: video.len(), need: 2 });
    }
    let dim = video[0].dim() as f64;
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / dim
    };
    let mut jump = 0.0;
    for pair in video.windows(2) {
        let last = pair[0].latent(pair[0].len() - 1);
        let first = pair[1].latent(0);
        jump += sq(last, first);
    }
    jump /= (video.len() - 1) as f64;
    let mut intra = 0.0;
    let mut n = 0usize;
    for clip in video {
        for l in 1..clip.len() {
            intra += sq(clip.latent(l - 1), clip.latent(l));
            n += 1;
        }
    }
    if n > 0 {
        intra /= n as f64;
    }
    Ok((jump - intra).max(0.0))
}

/// Builds one synthetic understanding task. Modality subsets cycle through
/// all seven non-empty combinations by index; every modality present carries
/// the family signal, so any subset suffices to solve the task.
pub fn gen_conductor_task(spec: &WorldSpec, config: &ModelConfig, index: u64) -> ConductorTask {
    let mut rng = crate::rng::stream_rng(spec.seed, "world-task", index);
    let family = rng.random_range(0..spec.n_families);
    let identity = rng.random_range(0..spec.n_identities);
    let fam_tag = match index % 3 {
        0 => TaskFamily::Qa,
        1 => TaskFamily::Dialogue,
        _ => TaskFamily::Instruction,
    };
    let combo = 1 + (index % 7) as u8; // bits: text, audio, video
    let with_text = combo & 1 != 0;
    let with_audio = combo & 2 != 0;
    let with_video = combo & 4 != 0;

    let text = with_text.then(|| vec![spec.family_token(family), spec.identity_token(identity)]);
    let (audio, video) = {
        let record_spec = WorldSpec { sigma: 0.0, clips_per_record: 1, ..spec.clone() };
        let classes = class_walk(&record_spec, family, identity, &mut rng, config);
        let audio = with_audio.then(|| {
            let rows: Vec<Vec<u32>> = (0..config.codebooks)
                .map(|k| classes[0].iter().map(|&c| spec.token_id(k, c)).collect())
                .collect();
            AudioClip::from_ids(&rows).unwrap()
        });
        let video = with_video.then(|| {
            let windows = FusionWindows::from_config(config);
            let dim = config.latent_dim;
            let mut state = spec.identity_offset(identity, dim);
            let mut data = Vec::new();
            for l in 0..config.latent_len {
                let (start, end) =
                    align_audio_window(l, config.latent_len, config.t_a, &windows).unwrap();
                for t in start..end {
                    let d = spec.drift(classes[0][t], dim);
                    for c in 0..dim {
                        state[c] += d[c] / (end - start) as f64;
                    }
                }
                data.extend_from_slice(&state);
            }
            LatentClip::new(config.latent_len, dim, data).unwrap()
        });
        (audio, video)
    };

    let has_motion = fam_tag != TaskFamily::Qa;
    let speech = vec![spec.response_token(family), spec.identity_token(identity)];
    let motion = if has_motion { vec![spec.motion_token(family)] } else { Vec::new() };
    ConductorTask {
        text,
        audio,
        video,
        target: DirectivePair::new(speech, motion).unwrap(),
        family: fam_tag,
    }
}

/// Dataset container: header (spec + config), then the records.
pub fn write_dataset(
    w: &mut impl Write,
    spec: &WorldSpec,
    config: &ModelConfig,
    records: &[WorldRecord],
) -> Result<()> {
    wire::write_header(w, wire::MAGIC_DATASET)?;
    let spec_json = serde_json::to_vec(spec).map_err(|e| Error::Format(e.to_string()))?;
    wire::write_bytes(w, &spec_json)?;
    let config_json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    wire::write_bytes(w, &config_json)?;
    wire::write_u32(w, records.len() as u32)?;
    for rec in records {
        let wire_tokens = crate::directive::encode_directives(&rec.directives);
        wire::write_tokens(w, wire_tokens.tokens())?;
        wire::write_u32(w, rec.audio.len() as u32)?;
        for (a, v) in rec.audio.iter().zip(rec.video.iter()) {
            wire::write_audio_clip(w, a)?;
            wire::write_latent_clip(w, v)?;
        }
        wire::write_u32(w, rec.labels.family as u32)?;
        wire::write_u32(w, rec.labels.identity as u32)?;
        wire::write_u32(w, rec.labels.has_motion as u32)?;
        wire::write_u64(w, rec.labels.seed)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<(WorldSpec, ModelConfig, Vec<WorldRecord>)> {
    wire::read_header(r, wire::MAGIC_DATASET)?;
    let spec: WorldSpec = serde_json::from_slice(&wire::read_bytes(r)?)
        .map_err(|e| Error::Format(format!("bad spec header: {e}")))?;
    let config: ModelConfig = serde_json::from_slice(&wire::read_bytes(r)?)
        .map_err(|e| Error::Format(format!("bad config header: {e}")))?;
    let n = wire::read_u32(r)? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let tokens = wire::read_tokens(r)?;
        let directives = crate::directive::decode_directives(&tokens)?;
        let clips = wire::read_u32(r)? as usize;
        let mut audio = Vec::with_capacity(clips);
        let mut video = Vec::with_capacity(clips);
        for _ in 0..clips {
            audio.push(wire::read_audio_clip(r)?);
            video.push(wire::read_latent_clip(r)?);
        }
        let family = wire::read_u32(r)? as usize;
        let identity = wire::read_u32(r)? as usize;
        let has_motion = wire::read_u32(r)? != 0;
        let seed = wire::read_u64(r)?;
        records.push(WorldRecord {
            directives,
            audio,
            video,
            labels: RecordLabels { family, identity, has_motion, seed },
        });
    }
    Ok((spec, config, records))
}
