//! Shared vocabulary of tokens, clips, and directives.
//!
//! Reserved special ids occupy the lowest ids of each stream so framing
//! violations are detectable by a range check; content ids start at
//! `TEXT_CONTENT_START` / `AUDIO_CONTENT_START`.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Text-stream specials.
pub const TEXT_PAD: u32 = 0;
pub const M_BOS: u32 = 1;
pub const M_EOS: u32 = 2;
/// First non-reserved text id.
pub const TEXT_CONTENT_START: usize = 3;

/// Audio-stream specials (same reserved layout in every codebook).
pub const AUDIO_PAD: u32 = 0;
pub const AUDIO_BOS: u32 = 1;
pub const AUDIO_EOS: u32 = 2;
pub const CLIP_SEP: u32 = 3;
/// First non-reserved audio id.
pub const AUDIO_CONTENT_START: usize = 4;

/// Which vocabulary a token id lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Text,
    /// Audio codebook `k`.
    Audio(u8),
}

/// Discrete symbol with a modality tag; the unit of AR prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub stream: Stream,
}

impl Token {
    pub fn text(id: u32) -> Token {
        Token { id, stream: Stream::Text }
    }

    pub fn audio(codebook: u8, id: u32) -> Token {
        Token { id, stream: Stream::Audio(codebook) }
    }

    pub fn is_special(&self) -> bool {
        match self.stream {
            Stream::Text => (self.id as usize) < TEXT_CONTENT_START,
            Stream::Audio(_) => (self.id as usize) < AUDIO_CONTENT_START,
        }
    }

    /// Checks the id against the configured vocabulary of its stream.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let vocab = match self.stream {
            Stream::Text => config.text_vocab,
            Stream::Audio(k) => {
                if k as usize >= config.codebooks {
                    return Err(Error::InvalidToken(format!(
                        "codebook {k} out of range (config has {})",
                        config.codebooks
                    )));
                }
                config.audio_vocab
            }
        };
        if self.id as usize >= vocab {
            return Err(Error::InvalidToken(format!(
                "id {} exceeds vocab {vocab} of stream {:?}",
                self.id, self.stream
            )));
        }
        Ok(())
    }
}

/// Grid of audio tokens, `codebooks x t_a`; each column of the grid is one
/// time step of `ms_per_token` milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioClip {
    rows: Vec<Vec<Token>>,
}

impl AudioClip {
    /// Builds a clip from per-codebook rows, checking shape and stream tags.
    pub fn new(rows: Vec<Vec<Token>>) -> Result<AudioClip> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("audio clip needs at least one codebook row".into()));
        }
        let t_a = rows[0].len();
        if t_a == 0 {
            return Err(Error::ShapeMismatch("audio clip rows must be non-empty".into()));
        }
        for (k, row) in rows.iter().enumerate() {
            if row.len() != t_a {
                return Err(Error::ShapeMismatch(format!(
                    "codebook row {k} has length {} (expected {t_a})",
                    row.len()
                )));
            }
            for tok in row {
                if tok.stream != Stream::Audio(k as u8) {
                    return Err(Error::InvalidToken(format!(
                        "token {:?} placed in codebook row {k}",
                        tok
                    )));
                }
            }
        }
        Ok(AudioClip { rows })
    }

    /// Builds a clip from raw ids; row index becomes the codebook tag.
    pub fn from_ids(ids: &[Vec<u32>]) -> Result<AudioClip> {
        let rows = ids
            .iter()
            .enumerate()
            .map(|(k, row)| row.iter().map(|&id| Token::audio(k as u8, id)).collect())
            .collect();
        AudioClip::new(rows)
    }

    pub fn codebooks(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty clips
    }

    pub fn rows(&self) -> &[Vec<Token>] {
        &self.rows
    }

    pub fn token(&self, codebook: usize, t: usize) -> Token {
        self.rows[codebook][t]
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.codebooks() != config.codebooks {
            return Err(Error::ShapeMismatch(format!(
                "clip has {} codebooks, config expects {}",
                self.codebooks(),
                config.codebooks
            )));
        }
        for row in &self.rows {
            for tok in row {
                tok.validate(config)?;
            }
        }
        Ok(())
    }
}

/// Fixed-shape real-valued video latent block, `latent_len x latent_dim`;
/// the unit of diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClip {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentClip {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<LatentClip> {
        if len == 0 || dim == 0 {
            return Err(Error::ShapeMismatch("latent clip dims must be positive".into()));
        }
        if data.len() != len * dim {
            return Err(Error::ShapeMismatch(format!(
                "latent data has {} entries, expected {}",
                data.len(),
                len * dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("latent clip contains non-finite entries".into()));
        }
        Ok(LatentClip { len, dim, data })
    }

    pub fn zeros(len: usize, dim: usize) -> LatentClip {
        LatentClip { len, dim, data: vec![0.0; len * dim] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One temporal latent as a channel slice.
    pub fn latent(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn latent_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// Contiguous suffix starting at `start`, preserving temporal order.
    pub fn suffix(&self, start: usize) -> LatentClip {
        LatentClip {
            len: self.len - start,
            dim: self.dim,
            data: self.data[start * self.dim..].to_vec(),
        }
    }
}

/// Decoupled speech/motion instruction lists; framing tokens are added only
/// at serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectivePair {
    pub speech: Vec<Token>,
    pub motion: Vec<Token>,
}

impl DirectivePair {
    pub fn new(speech: Vec<Token>, motion: Vec<Token>) -> Result<DirectivePair> {
        for tok in speech.iter().chain(motion.iter()) {
            if tok.stream != Stream::Text {
                return Err(Error::InvalidToken(format!(
                    "directive token {:?} is not a text token",
                    tok
                )));
            }
            if tok.id == M_BOS || tok.id == M_EOS {
                return Err(Error::InvalidToken(
                    "directive content must not contain m_bos/m_eos".into(),
                ));
            }
        }
        Ok(DirectivePair { speech, motion })
    }

    pub fn empty() -> DirectivePair {
        DirectivePair { speech: Vec::new(), motion: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_unique_per_stream() {
        let text = [TEXT_PAD, M_BOS, M_EOS];
        let audio = [AUDIO_PAD, AUDIO_BOS, AUDIO_EOS, CLIP_SEP];
        for (i, a) in text.iter().enumerate() {
            for b in text.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
        for (i, a) in audio.iter().enumerate() {
            for b in audio.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
        assert!(text.iter().all(|&id| (id as usize) < TEXT_CONTENT_START));
        assert!(audio.iter().all(|&id| (id as usize) < AUDIO_CONTENT_START));
    }

    #[test]
    fn audio_clip_rejects_ragged_rows() {
        let rows = vec![vec![Token::audio(0, 4), Token::audio(0, 5)], vec![Token::audio(1, 4)]];
        assert!(AudioClip::new(rows).is_err());
    }

    #[test]
    fn audio_clip_rejects_misplaced_stream() {
        let rows = vec![vec![Token::audio(1, 4)]];
        assert!(AudioClip::new(rows).is_err());
    }

    #[test]
    fn directive_pair_rejects_frame_tokens() {
        assert!(DirectivePair::new(vec![Token::text(M_BOS)], vec![]).is_err());
        assert!(DirectivePair::new(vec![], vec![Token::text(M_EOS)]).is_err());
    }

    #[test]
    fn latent_clip_rejects_non_finite() {
        assert!(LatentClip::new(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn token_validate_respects_stream_vocab() {
        let cfg = ModelConfig::desk_default();
        assert!(Token::text(63).validate(&cfg).is_ok());
        assert!(Token::text(64).validate(&cfg).is_err());
        assert!(Token::audio(2, 10).validate(&cfg).is_ok());
        assert!(Token::audio(3, 10).validate(&cfg).is_err());
    }
}
