//! Interleaved condition/generation sequences and the attention masks their
//! layout implies.
//!
//! Visibility rules, applied per (query, key) position pair:
//!   * inside an audio segment: strictly causal (`k <= q`);
//!   * inside a video segment: fully bidirectional;
//!   * inside condition text: bidirectional; inside generated text: causal;
//!   * condition text is visible to every position;
//!   * a clip never sees a clip with a larger clip index;
//!   * same-kind clips see earlier clips of their kind in full;
//!   * audio and video clips never see each other in the base mask — the
//!     cross-modal paths run through the fusion module's cross-attention;
//!   * generated text sees every condition position.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::types::{AudioClip, DirectivePair, LatentClip, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Text,
    AudioClip,
    VideoClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Condition,
    Generation,
}

/// Contiguous span of the flat sequence with one kind and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub role: Role,
    /// Present for clip kinds only; increases by one between consecutive
    /// clips of the same kind.
    pub clip_index: Option<u32>,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Ordered segments tiling `[0, total_len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedSequence {
    segments: Vec<Segment>,
    total_len: usize,
}

impl SegmentedSequence {
    pub fn from_segments(segments: Vec<Segment>) -> Result<SegmentedSequence> {
        let mut cursor = 0usize;
        let mut next_clip: HashMap<SegmentKind, u32> = HashMap::new();
        let text_present = segments.iter().any(|s| s.kind == SegmentKind::Text);
        for (i, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                return Err(Error::ShapeMismatch(format!("segment {i} has zero length")));
            }
            if seg.start != cursor {
                return Err(Error::ShapeMismatch(format!(
                    "segment {i} starts at {} but previous span ends at {cursor}",
                    seg.start
                )));
            }
            cursor = seg.end();
            match seg.kind {
                SegmentKind::Text => {
                    if seg.clip_index.is_some() {
                        return Err(Error::ShapeMismatch(
                            "text segments carry no clip index".into(),
                        ));
                    }
                }
                kind => {
                    let expected = next_clip.entry(kind).or_insert(0);
                    let got = seg.clip_index.ok_or_else(|| {
                        Error::ShapeMismatch(format!("clip segment {i} lacks a clip index"))
                    })?;
                    if got != *expected {
                        return Err(Error::ShapeMismatch(format!(
                            "clip segment {i} has index {got}, expected {expected}"
                        )));
                    }
                    *expected += 1;
                }
            }
        }
        if text_present && segments[0].kind != SegmentKind::Text {
            return Err(Error::ShapeMismatch(
                "when text is present it must open the sequence".into(),
            ));
        }
        Ok(SegmentedSequence { segments, total_len: cursor })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Index of the segment covering a flat position.
    pub fn segment_of(&self, pos: usize) -> usize {
        // segments are ordered; binary search by start
        match self.segments.binary_search_by(|s| {
            if pos < s.start {
                std::cmp::Ordering::Greater
            } else if pos >= s.end() {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Equal
            }
        }) {
            Ok(i) => i,
            Err(_) => panic!("position {pos} outside sequence of length {}", self.total_len),
        }
    }

    /// Appends a generated-text region (the directive region of the
    /// conductor sequence).
    pub fn with_text_generation(mut self, len: usize) -> Result<SegmentedSequence> {
        if len == 0 {
            return Ok(self);
        }
        self.segments.push(Segment {
            kind: SegmentKind::Text,
            role: Role::Generation,
            clip_index: None,
            start: self.total_len,
            len,
        });
        self.total_len += len;
        Ok(self)
    }

    fn shape_key(&self) -> Vec<(u8, u8, i64, usize)> {
        self.segments
            .iter()
            .map(|s| {
                let kind = match s.kind {
                    SegmentKind::Text => 0u8,
                    SegmentKind::AudioClip => 1,
                    SegmentKind::VideoClip => 2,
                };
                let role = match s.role {
                    Role::Condition => 0u8,
                    Role::Generation => 1,
                };
                (kind, role, s.clip_index.map(|c| c as i64).unwrap_or(-1), s.len)
            })
            .collect()
    }
}

/// Boolean attention matrix; `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    q: usize,
    k: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(q: usize, k: usize, bits: Vec<bool>) -> AttentionMask {
        assert_eq!(bits.len(), q * k);
        AttentionMask { q, k, bits }
    }

    pub fn full(q: usize, k: usize) -> AttentionMask {
        AttentionMask { q, k, bits: vec![true; q * k] }
    }

    pub fn q_len(&self) -> usize {
        self.q
    }

    pub fn k_len(&self) -> usize {
        self.k
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.k + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.bits[q * self.k + k] = value;
    }

    /// PBM-style text grid: rows are queries, cols are keys, '1' = allowed.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.k, self.q);
        for q in 0..self.q {
            for k in 0..self.k {
                out.push(if self.allowed(q, k) { '1' } else { '0' });
                if k + 1 < self.k {
                    out.push(' ');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Single position-pair visibility rule; `derive_masks` and the brute-force
/// test oracle both reduce to this.
pub fn pair_allowed(seq: &SegmentedSequence, q: usize, k: usize) -> bool {
    let sq = &seq.segments()[seq.segment_of(q)];
    let sk = &seq.segments()[seq.segment_of(k)];
    if std::ptr::eq(sq, sk) {
        return match sq.kind {
            SegmentKind::AudioClip => k <= q,
            SegmentKind::VideoClip => true,
            SegmentKind::Text => match sq.role {
                Role::Condition => true,
                Role::Generation => k <= q,
            },
        };
    }
    // Condition text is visible to everything.
    if sk.kind == SegmentKind::Text && sk.role == Role::Condition {
        return true;
    }
    // Generated text reads the whole condition prefix.
    if sq.kind == SegmentKind::Text && sq.role == Role::Generation && sk.role == Role::Condition
    {
        return true;
    }
    // Same-kind clips see earlier clips of their kind in full.
    if sq.kind == sk.kind && sq.kind != SegmentKind::Text {
        return sk.clip_index.unwrap() < sq.clip_index.unwrap();
    }
    false
}

fn mask_cache() -> &'static RwLock<HashMap<Vec<(u8, u8, i64, usize)>, Arc<AttentionMask>>> {
    static CACHE: OnceLock<RwLock<HashMap<Vec<(u8, u8, i64, usize)>, Arc<AttentionMask>>>> =
        OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Builds (or fetches from the shape-keyed cache) the self-attention mask of
/// a segmented sequence.
pub fn derive_masks(seq: &SegmentedSequence) -> Arc<AttentionMask> {
    let key = seq.shape_key();
    if let Some(hit) = mask_cache().read().unwrap().get(&key) {
        return Arc::clone(hit);
    }
    let n = seq.total_len();
    let mut bits = vec![false; n * n];
    // Rules are segment-constant except for intra-segment causality, so fill
    // segment blocks instead of classifying every pair.
    for sq in seq.segments() {
        for sk in seq.segments() {
            let block_allowed = pair_allowed(seq, sq.start, sk.start);
            let causal_block = std::ptr::eq(sq, sk)
                && matches!(
                    (sq.kind, sq.role),
                    (SegmentKind::AudioClip, _) | (SegmentKind::Text, Role::Generation)
                );
            if causal_block {
                for q in sq.start..sq.end() {
                    for k in sk.start..=q {
                        bits[q * n + k] = true;
                    }
                }
            } else if block_allowed {
                for q in sq.start..sq.end() {
                    for k in sk.start..sk.end() {
                        bits[q * n + k] = true;
                    }
                }
            }
        }
    }
    let mask = Arc::new(AttentionMask::new(n, n, bits));
    mask_cache().write().unwrap().insert(key, Arc::clone(&mask));
    mask
}

/// Condition layout for the conductor: text first, then interleaved
/// audio/video clips.
pub fn build_conductor_sequence(
    text: &[Token],
    audio_clips: &[AudioClip],
    video_clips: &[LatentClip],
) -> Result<SegmentedSequence> {
    if audio_clips.len() != video_clips.len() {
        return Err(Error::ClipCountMismatch {
            audio: audio_clips.len(),
            video: video_clips.len(),
        });
    }
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    if !text.is_empty() {
        segments.push(Segment {
            kind: SegmentKind::Text,
            role: Role::Condition,
            clip_index: None,
            start: 0,
            len: text.len(),
        });
        cursor = text.len();
    }
    for (i, (a, v)) in audio_clips.iter().zip(video_clips.iter()).enumerate() {
        segments.push(Segment {
            kind: SegmentKind::AudioClip,
            role: Role::Condition,
            clip_index: Some(i as u32),
            start: cursor,
            len: a.len(),
        });
        cursor += a.len();
        segments.push(Segment {
            kind: SegmentKind::VideoClip,
            role: Role::Condition,
            clip_index: Some(i as u32),
            start: cursor,
            len: v.len(),
        });
        cursor += v.len();
    }
    SegmentedSequence::from_segments(segments)
}

/// Generation layout for the creator: speech text, motion text, then
/// interleaved audio/video clips carrying the generation role. Audio clips
/// span a start column plus their delay-staggered columns.
pub fn build_creator_sequence(
    directives: &DirectivePair,
    audio_clips: &[AudioClip],
    video_clips: &[LatentClip],
) -> Result<SegmentedSequence> {
    if audio_clips.len() != video_clips.len() {
        return Err(Error::ClipCountMismatch {
            audio: audio_clips.len(),
            video: video_clips.len(),
        });
    }
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    for part in [&directives.speech, &directives.motion] {
        if !part.is_empty() {
            segments.push(Segment {
                kind: SegmentKind::Text,
                role: Role::Condition,
                clip_index: None,
                start: cursor,
                len: part.len(),
            });
            cursor += part.len();
        }
    }
    for (i, (a, v)) in audio_clips.iter().zip(video_clips.iter()).enumerate() {
        let span = a.len() + a.codebooks(); // start column + delayed width
        segments.push(Segment {
            kind: SegmentKind::AudioClip,
            role: Role::Generation,
            clip_index: Some(i as u32),
            start: cursor,
            len: span,
        });
        cursor += span;
        segments.push(Segment {
            kind: SegmentKind::VideoClip,
            role: Role::Generation,
            clip_index: Some(i as u32),
            start: cursor,
            len: v.len(),
        });
        cursor += v.len();
    }
    SegmentedSequence::from_segments(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DirectivePair;
    use rand::Rng;

    fn audio_clip(t_a: usize) -> AudioClip {
        AudioClip::from_ids(&[vec![4; t_a], vec![5; t_a]]).unwrap()
    }

    fn video_clip(l: usize) -> LatentClip {
        LatentClip::zeros(l, 3)
    }

    fn text(n: usize) -> Vec<Token> {
        (0..n).map(|i| Token::text(3 + i as u32)).collect()
    }

    #[test]
    fn conductor_layout_interleaves_clips() {
        let seq = build_conductor_sequence(
            &text(5),
            &[audio_clip(4), audio_clip(4)],
            &[video_clip(3), video_clip(3)],
        )
        .unwrap();
        let kinds: Vec<SegmentKind> = seq.segments().iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                SegmentKind::Text,
                SegmentKind::AudioClip,
                SegmentKind::VideoClip,
                SegmentKind::AudioClip,
                SegmentKind::VideoClip,
            ]
        );
        assert_eq!(seq.total_len(), 5 + 4 + 3 + 4 + 3);
    }

    #[test]
    fn conductor_layout_degenerates_to_text() {
        let seq = build_conductor_sequence(&text(3), &[], &[]).unwrap();
        assert_eq!(seq.segments().len(), 1);
        assert_eq!(seq.total_len(), 3);
    }

    #[test]
    fn clip_count_mismatch_is_rejected() {
        let err = build_conductor_sequence(&text(3), &[audio_clip(4), audio_clip(4)], &[video_clip(3)])
            .unwrap_err();
        assert!(matches!(err, Error::ClipCountMismatch { audio: 2, video: 1 }));
    }

    #[test]
    fn creator_layout_counts_segments() {
        let dir = DirectivePair::new(text(3), text(2)).unwrap();
        let audio: Vec<AudioClip> = (0..3).map(|_| audio_clip(4)).collect();
        let video: Vec<LatentClip> = (0..3).map(|_| video_clip(3)).collect();
        let seq = build_creator_sequence(&dir, &audio, &video).unwrap();
        assert_eq!(seq.segments().len(), 2 + 6);
        for (i, seg) in seq.segments().iter().enumerate().skip(2) {
            let expect = if (i - 2) % 2 == 0 { SegmentKind::AudioClip } else { SegmentKind::VideoClip };
            assert_eq!(seg.kind, expect);
            assert_eq!(seg.role, Role::Generation);
        }
    }

    #[test]
    fn creator_layout_without_clips() {
        let dir = DirectivePair::new(text(3), text(2)).unwrap();
        let seq = build_creator_sequence(&dir, &[], &[]).unwrap();
        assert_eq!(seq.segments().len(), 2);
    }

    #[test]
    fn spans_tile_random_shapes() {
        let mut rng = crate::rng::stream_rng(3, "seq-tiling", 0);
        for _ in 0..200 {
            let n_clips = rng.random_range(0..4usize);
            let dir = DirectivePair::new(
                text(rng.random_range(0..5)),
                text(rng.random_range(0..5)),
            )
            .unwrap();
            let audio: Vec<AudioClip> =
                (0..n_clips).map(|_| audio_clip(rng.random_range(2..7))).collect();
            let video: Vec<LatentClip> =
                (0..n_clips).map(|_| video_clip(rng.random_range(2..6))).collect();
            let seq = build_creator_sequence(&dir, &audio, &video).unwrap();
            // interval-union check: spans cover [0, total) with no gaps/overlap
            let mut cursor = 0usize;
            for seg in seq.segments() {
                assert_eq!(seg.start, cursor);
                cursor = seg.end();
            }
            assert_eq!(cursor, seq.total_len());
            for pos in 0..seq.total_len() {
                let seg = &seq.segments()[seq.segment_of(pos)];
                assert!(pos >= seg.start && pos < seg.end());
            }
        }
    }

    #[test]
    fn single_audio_segment_is_lower_triangular() {
        let seq = SegmentedSequence::from_segments(vec![Segment {
            kind: SegmentKind::AudioClip,
            role: Role::Generation,
            clip_index: Some(0),
            start: 0,
            len: 4,
        }])
        .unwrap();
        let mask = derive_masks(&seq);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(mask.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn single_video_segment_is_all_true() {
        let seq = SegmentedSequence::from_segments(vec![Segment {
            kind: SegmentKind::VideoClip,
            role: Role::Generation,
            clip_index: Some(0),
            start: 0,
            len: 4,
        }])
        .unwrap();
        let mask = derive_masks(&seq);
        for q in 0..4 {
            for k in 0..4 {
                assert!(mask.allowed(q, k));
            }
        }
    }

    /// Brute-force oracle: classify every (q, k) pair independently of the
    /// block-fill path in `derive_masks`.
    fn oracle_allowed(seq: &SegmentedSequence, q: usize, k: usize) -> bool {
        let sq = &seq.segments()[seq.segment_of(q)];
        let sk = &seq.segments()[seq.segment_of(k)];
        let same = seq.segment_of(q) == seq.segment_of(k);
        if same {
            return match (sq.kind, sq.role) {
                (SegmentKind::AudioClip, _) => k <= q,
                (SegmentKind::VideoClip, _) => true,
                (SegmentKind::Text, Role::Condition) => true,
                (SegmentKind::Text, Role::Generation) => k <= q,
            };
        }
        if sk.kind == SegmentKind::Text && sk.role == Role::Condition {
            return true;
        }
        if sq.kind == SegmentKind::Text
            && sq.role == Role::Generation
            && sk.role == Role::Condition
        {
            return true;
        }
        match (sq.kind, sk.kind) {
            (SegmentKind::AudioClip, SegmentKind::AudioClip)
            | (SegmentKind::VideoClip, SegmentKind::VideoClip) => {
                sk.clip_index.unwrap() < sq.clip_index.unwrap()
            }
            _ => false,
        }
    }

    #[test]
    fn masks_match_brute_force_oracle_on_random_shapes() {
        let mut rng = crate::rng::stream_rng(5, "mask-oracle", 0);
        for case in 0..120 {
            let n_clips = rng.random_range(0..4usize);
            let with_dir_region = rng.random_range(0..2) == 1;
            let dir = DirectivePair::new(
                text(rng.random_range(0..4)),
                text(rng.random_range(0..4)),
            )
            .unwrap();
            let audio: Vec<AudioClip> =
                (0..n_clips).map(|_| audio_clip(rng.random_range(2..6))).collect();
            let video: Vec<LatentClip> =
                (0..n_clips).map(|_| video_clip(rng.random_range(2..5))).collect();
            let seq = if case % 2 == 0 {
                build_creator_sequence(&dir, &audio, &video).unwrap()
            } else {
                let t = text(rng.random_range(1..4));
                let base = build_conductor_sequence(&t, &audio, &video).unwrap();
                if with_dir_region {
                    base.with_text_generation(rng.random_range(1..5)).unwrap()
                } else {
                    base
                }
            };
            if seq.total_len() == 0 {
                continue;
            }
            let mask = derive_masks(&seq);
            for q in 0..seq.total_len() {
                for k in 0..seq.total_len() {
                    assert_eq!(
                        mask.allowed(q, k),
                        oracle_allowed(&seq, q, k),
                        "case {case} mismatch at ({q},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn no_future_clip_leakage() {
        let dir = DirectivePair::new(text(2), text(2)).unwrap();
        let audio: Vec<AudioClip> = (0..3).map(|_| audio_clip(3)).collect();
        let video: Vec<LatentClip> = (0..3).map(|_| video_clip(3)).collect();
        let seq = build_creator_sequence(&dir, &audio, &video).unwrap();
        let mask = derive_masks(&seq);
        for (qi, sq) in seq.segments().iter().enumerate() {
            for (ki, sk) in seq.segments().iter().enumerate() {
                if qi == ki {
                    continue;
                }
                if let (Some(ci_q), Some(ci_k)) = (sq.clip_index, sk.clip_index) {
                    if ci_k > ci_q {
                        for q in sq.start..sq.end() {
                            for k in sk.start..sk.end() {
                                assert!(!mask.allowed(q, k));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mask_cache_returns_shared_instance() {
        let seq1 = build_conductor_sequence(&text(4), &[audio_clip(3)], &[video_clip(2)]).unwrap();
        let seq2 = build_conductor_sequence(&text(4), &[audio_clip(3)], &[video_clip(2)]).unwrap();
        let m1 = derive_masks(&seq1);
        let m2 = derive_masks(&seq2);
        assert!(Arc::ptr_eq(&m1, &m2));
    }

    #[test]
    fn pbm_dump_shape() {
        let seq = SegmentedSequence::from_segments(vec![Segment {
            kind: SegmentKind::AudioClip,
            role: Role::Generation,
            clip_index: Some(0),
            start: 0,
            len: 2,
        }])
        .unwrap();
        let pbm = derive_masks(&seq).to_pbm();
        assert_eq!(pbm, "P1\n2 2\n1 0\n1 1\n");
    }
}
