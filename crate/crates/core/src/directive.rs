//! Serialization and parsing of the decoupled speech/motion instruction
//! stream: `[speech..., m_bos, motion..., m_eos]`.
//!
//! Parsing is strict: malformed wires are errors, never repaired, so
//! training-data corruption cannot pass silently.

use crate::error::{Error, Result};
use crate::types::{DirectivePair, Stream, Token, M_BOS, M_EOS};

/// A flat token list in the framed layout. Constructed only through
/// [`encode_directives`], so the framing invariants always hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectiveWire {
    tokens: Vec<Token>,
}

impl DirectiveWire {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Line-oriented dump: one field per token, specials rendered as
    /// named literals.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match tok.id {
                M_BOS => out.push_str("<m_bos>"),
                M_EOS => out.push_str("<m_eos>"),
                id => out.push_str(&id.to_string()),
            }
        }
        out
    }

    /// Inverse of [`DirectiveWire::dump`].
    pub fn parse_dump(line: &str) -> Result<DirectiveWire> {
        let mut tokens = Vec::new();
        for field in line.split_whitespace() {
            let id = match field {
                "<m_bos>" => M_BOS,
                "<m_eos>" => M_EOS,
                other => other
                    .parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad token field `{other}`")))?,
            };
            tokens.push(Token::text(id));
        }
        let pair = decode_directives(&tokens)?;
        Ok(encode_directives(&pair))
    }
}

/// Lays a directive pair out on the wire:
/// speech tokens, `m_bos`, motion tokens, `m_eos`.
pub fn encode_directives(pair: &DirectivePair) -> DirectiveWire {
    let mut tokens = Vec::with_capacity(pair.speech.len() + pair.motion.len() + 2);
    tokens.extend_from_slice(&pair.speech);
    tokens.push(Token::text(M_BOS));
    tokens.extend_from_slice(&pair.motion);
    tokens.push(Token::text(M_EOS));
    DirectiveWire { tokens }
}

/// Parses a framed wire back into its speech/motion parts.
pub fn decode_directives(wire: &[Token]) -> Result<DirectivePair> {
    let mut speech = Vec::new();
    let mut motion = Vec::new();
    let mut state = 0u8; // 0 = speech, 1 = motion, 2 = done
    for tok in wire {
        if tok.stream != Stream::Text {
            return Err(Error::InvalidToken(format!("non-text token {:?} on the wire", tok)));
        }
        match (state, tok.id) {
            (0, M_BOS) => state = 1,
            (0, M_EOS) => return Err(Error::MissingFrame),
            (0, _) => speech.push(*tok),
            (1, M_BOS) => return Err(Error::NestedFrame),
            (1, M_EOS) => state = 2,
            (1, _) => motion.push(*tok),
            (2, _) => {
                let at = speech.len() + motion.len() + 2;
                return Err(Error::TrailingTokens(wire.len() - at));
            }
            _ => unreachable!(),
        }
    }
    if state != 2 {
        return Err(Error::MissingFrame);
    }
    DirectivePair::new(speech, motion)
}

/// A raw synthetic record before mixed-data construction.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub response: Vec<Token>,
    pub motion: Vec<Token>,
}

/// Mixed-data construction: when `has_motion` is false the motion part is
/// nulled and the full response becomes speech instructions.
pub fn build_mixed_sample(record: &RawRecord, has_motion: bool) -> DirectiveWire {
    let pair = if has_motion {
        DirectivePair { speech: record.response.clone(), motion: record.motion.clone() }
    } else {
        DirectivePair { speech: record.response.clone(), motion: Vec::new() }
    };
    encode_directives(&pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TEXT_CONTENT_START;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(id: u32) -> Token {
        Token::text(id)
    }

    #[test]
    fn encode_layout_matches_frame_order() {
        let pair =
            DirectivePair::new(vec![t(10), t(11), t(12)], vec![t(20), t(21)]).unwrap();
        let wire = encode_directives(&pair);
        let ids: Vec<u32> = wire.tokens().iter().map(|x| x.id).collect();
        assert_eq!(ids, vec![10, 11, 12, M_BOS, 20, 21, M_EOS]);
        assert_eq!(wire.len(), pair.speech.len() + pair.motion.len() + 2);
    }

    #[test]
    fn empty_pair_encodes_to_bare_frame() {
        let wire = encode_directives(&DirectivePair::empty());
        let ids: Vec<u32> = wire.tokens().iter().map(|x| x.id).collect();
        assert_eq!(ids, vec![M_BOS, M_EOS]);
    }

    #[test]
    fn decode_inverts_encode_shape() {
        let wire = vec![t(9), t(M_BOS), t(17), t(M_EOS)];
        let pair = decode_directives(&wire).unwrap();
        assert_eq!(pair.speech, vec![t(9)]);
        assert_eq!(pair.motion, vec![t(17)]);
    }

    #[test]
    fn missing_frame_is_rejected() {
        let wire = vec![t(9), t(M_BOS), t(17)];
        assert!(matches!(decode_directives(&wire), Err(Error::MissingFrame)));
        let wire = vec![t(9), t(M_EOS)];
        assert!(matches!(decode_directives(&wire), Err(Error::MissingFrame)));
    }

    #[test]
    fn nested_frame_is_rejected() {
        let wire = vec![t(M_BOS), t(M_BOS), t(M_EOS)];
        assert!(matches!(decode_directives(&wire), Err(Error::NestedFrame)));
    }

    #[test]
    fn trailing_tokens_are_rejected() {
        let wire = vec![t(M_BOS), t(M_EOS), t(5)];
        assert!(matches!(decode_directives(&wire), Err(Error::TrailingTokens(1))));
    }

    #[test]
    fn round_trip_over_seeded_pairs() {
        let mut rng = crate::rng::stream_rng(11, "directive-roundtrip", 0);
        for _ in 0..1000 {
            let ns = rng.random_range(0..6usize);
            let nm = rng.random_range(0..6usize);
            let speech: Vec<Token> = (0..ns)
                .map(|_| t(rng.random_range(TEXT_CONTENT_START as u32..32)))
                .collect();
            let motion: Vec<Token> = (0..nm)
                .map(|_| t(rng.random_range(TEXT_CONTENT_START as u32..32)))
                .collect();
            let pair = DirectivePair::new(speech, motion).unwrap();
            let wire = encode_directives(&pair);
            assert_eq!(decode_directives(wire.tokens()).unwrap(), pair);
        }
    }

    #[test]
    fn null_motion_sample_keeps_response_in_speech() {
        let record = RawRecord { response: vec![t(4), t(5)], motion: vec![t(6)] };
        let wire = build_mixed_sample(&record, false);
        let ids: Vec<u32> = wire.tokens().iter().map(|x| x.id).collect();
        assert_eq!(ids, vec![4, 5, M_BOS, M_EOS]);
        let wire = build_mixed_sample(&record, true);
        let ids: Vec<u32> = wire.tokens().iter().map(|x| x.id).collect();
        assert_eq!(ids, vec![4, 5, M_BOS, 6, M_EOS]);
    }

    #[test]
    fn dump_round_trips_named_literals() {
        let pair = DirectivePair::new(vec![t(7)], vec![t(8), t(9)]).unwrap();
        let wire = encode_directives(&pair);
        assert_eq!(wire.dump(), "7 <m_bos> 8 9 <m_eos>");
        assert_eq!(DirectiveWire::parse_dump(&wire.dump()).unwrap(), wire);
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity(
            speech in prop::collection::vec(TEXT_CONTENT_START as u32..64, 0..12),
            motion in prop::collection::vec(TEXT_CONTENT_START as u32..64, 0..12),
        ) {
            let pair = DirectivePair::new(
                speech.into_iter().map(t).collect(),
                motion.into_iter().map(t).collect(),
            ).unwrap();
            let wire = encode_directives(&pair);
            prop_assert_eq!(wire.len(), pair.speech.len() + pair.motion.len() + 2);
            prop_assert_eq!(decode_directives(wire.tokens()).unwrap(), pair);
        }
    }
}
