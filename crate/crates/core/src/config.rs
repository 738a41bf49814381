//! Model configuration shared by the conductor, the creator, and the
//! generation engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static hyperparameters of both models plus the modality rate constants
/// tying audio tokens to video latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width of every stream.
    pub d_model: usize,
    /// Attention heads per block; must divide `d_model`.
    pub n_heads: usize,
    /// Decoder layers in both models.
    pub n_layers: usize,
    /// Audio codebooks.
    pub codebooks: usize,
    /// Text vocabulary size, reserved specials included.
    pub text_vocab: usize,
    /// Audio vocabulary size per codebook, reserved specials included.
    pub audio_vocab: usize,
    /// Audio tokens per clip (per codebook), before delay staggering.
    pub t_a: usize,
    /// Temporal latents per video clip.
    pub latent_len: usize,
    /// Channels per video latent.
    pub latent_dim: usize,
    /// Video frames covered by one temporal latent.
    pub frames_per_latent: usize,
    /// Milliseconds of audio covered by one token.
    pub ms_per_token: usize,
    /// Video frame rate.
    pub fps: usize,
    /// Video context window: suffix latents of the previous clip injected
    /// into the audio path.
    pub f_v_len: usize,
    /// Audio context window: tokens per latent position injected into the
    /// video path.
    pub f_a_len: usize,
    /// Euler steps used by the diffusion sampler.
    pub diffusion_steps: usize,
    /// Buckets of the timestep embedding table.
    pub t_buckets: usize,
    /// Position table size; bounds every model sequence.
    pub max_seq: usize,
    /// Length cap for directive decoding.
    pub decode_cap: usize,
    /// Base seed for parameter init and samplers.
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for CPU finite-difference checks,
    /// large enough to learn the synthetic tasks.
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            codebooks: 3,
            text_vocab: 64,
            audio_vocab: 64,
            t_a: 48,
            latent_len: 12,
            latent_dim: 6,
            frames_per_latent: 4,
            ms_per_token: 10,
            fps: 100,
            f_v_len: 10,
            f_a_len: 4,
            diffusion_steps: 16,
            t_buckets: 16,
            max_seq: 512,
            decode_cap: 32,
            seed: 0,
        }
    }

    /// A reduced configuration for fast paired training runs in tests.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            codebooks: 2,
            text_vocab: 64,
            audio_vocab: 64,
            t_a: 16,
            latent_len: 4,
            latent_dim: 4,
            frames_per_latent: 4,
            ms_per_token: 10,
            fps: 100,
            f_v_len: 10,
            f_a_len: 4,
            diffusion_steps: 8,
            t_buckets: 8,
            max_seq: 256,
            decode_cap: 32,
            seed: 0,
        }
    }

    /// Delay-grid width for one audio clip: `t_a + codebooks - 1`.
    pub fn delay_width(&self) -> usize {
        self.t_a + self.codebooks - 1
    }

    /// Model-sequence length of one audio clip: a start column plus the
    /// delay-staggered columns.
    pub fn audio_clip_span(&self) -> usize {
        self.delay_width() + 1
    }

    /// Start token index of the audio window aligned with a latent:
    /// `floor((latent_index * frames_per_latent / fps) * 1000 / ms_per_token)`.
    pub fn latent_token_start(&self, latent_index: usize) -> usize {
        let ms = latent_index * self.frames_per_latent * 1000 / self.fps;
        ms / self.ms_per_token
    }
}

/// Checks every `ModelConfig` invariant, reporting the first violated field.
pub fn validate_config(config: ModelConfig) -> Result<ModelConfig> {
    fn positive(field: &'static str, value: usize) -> Result<()> {
        if value == 0 {
            return Err(Error::ConfigInvalid { field, constraint: "must be positive".into() });
        }
        Ok(())
    }

    positive("d_model", config.d_model)?;
    positive("n_heads", config.n_heads)?;
    positive("n_layers", config.n_layers)?;
    positive("codebooks", config.codebooks)?;
    positive("text_vocab", config.text_vocab)?;
    positive("audio_vocab", config.audio_vocab)?;
    positive("t_a", config.t_a)?;
    positive("latent_len", config.latent_len)?;
    positive("latent_dim", config.latent_dim)?;
    positive("frames_per_latent", config.frames_per_latent)?;
    positive("ms_per_token", config.ms_per_token)?;
    positive("fps", config.fps)?;
    positive("f_v_len", config.f_v_len)?;
    positive("f_a_len", config.f_a_len)?;
    positive("diffusion_steps", config.diffusion_steps)?;
    positive("t_buckets", config.t_buckets)?;
    positive("max_seq", config.max_seq)?;
    positive("decode_cap", config.decode_cap)?;

    if config.d_model % config.n_heads != 0 {
        return Err(Error::ConfigInvalid {
            field: "d_model",
            constraint: format!("not divisible by n_heads ({})", config.n_heads),
        });
    }
    if config.text_vocab <= crate::types::TEXT_CONTENT_START {
        return Err(Error::ConfigInvalid {
            field: "text_vocab",
            constraint: format!(
                "must exceed the {} reserved text specials",
                crate::types::TEXT_CONTENT_START
            ),
        });
    }
    if config.audio_vocab <= crate::types::AUDIO_CONTENT_START {
        return Err(Error::ConfigInvalid {
            field: "audio_vocab",
            constraint: format!(
                "must exceed the {} reserved audio specials",
                crate::types::AUDIO_CONTENT_START
            ),
        });
    }
    if config.codebooks > 64 {
        return Err(Error::ConfigInvalid {
            field: "codebooks",
            constraint: "at most 64 codebooks supported".into(),
        });
    }
    // The position table must cover the longest stream any builder can emit.
    let audio_stream_min = config.decode_cap + 2 * config.audio_clip_span();
    if config.max_seq < audio_stream_min {
        return Err(Error::ConfigInvalid {
            field: "max_seq",
            constraint: format!("must be at least {audio_stream_min} for the audio stream"),
        });
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_accepted() {
        let cfg = ModelConfig::desk_default();
        assert_eq!(cfg.f_v_len, 10);
        assert_eq!(cfg.f_a_len, 4);
        validate_config(cfg).unwrap();
    }

    #[test]
    fn divisibility_is_enforced() {
        let cfg = ModelConfig { d_model: 30, n_heads: 4, ..ModelConfig::desk_default() };
        let err = validate_config(cfg).unwrap_err();
        match err {
            Error::ConfigInvalid { field, constraint } => {
                assert_eq!(field, "d_model");
                assert!(constraint.contains("divisible"), "{constraint}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn small_valid_config_is_accepted() {
        let cfg = ModelConfig { d_model: 32, n_heads: 4, ..ModelConfig::desk_default() };
        validate_config(cfg).unwrap();
    }

    #[test]
    fn window_alignment_matches_floor_arithmetic() {
        // 4 frames per latent at 100 fps is 40 ms, i.e. 4 tokens of 10 ms.
        let cfg = ModelConfig::desk_default();
        assert_eq!(cfg.latent_token_start(0), 0);
        assert_eq!(cfg.latent_token_start(1), 4);
        assert_eq!(cfg.latent_token_start(5), 20);
        // 20 fps: one latent covers 200 ms -> 20 tokens.
        let cfg = ModelConfig { fps: 20, ..cfg };
        assert_eq!(cfg.latent_token_start(5), 100);
    }
}
