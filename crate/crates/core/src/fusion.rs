//! Fusion attention: the per-layer blocks that tie speech text, audio
//! clips, and video clips together, plus the two context-window selectors.
//!
//! The audio path runs self-attention over `[speech ∘ prev-audio ∘ cur-audio]`
//! and then cross-attends into a context built from the *suffix window* of
//! the previous video clip. The video path runs self-attention over
//! `[prev-video ∘ cur-video]`, cross-attends into the motion text, and then
//! cross-attends into the current audio tokens, where each latent sees only
//! the few tokens at its own temporal position.
//!
//! Both window selectors act before any mixing, so perturbations outside a
//! window change nothing downstream — exactly, not approximately. Every
//! attention stage is a residual block (`x + attn(rmsnorm(x))`), and a
//! cross-attention stage with an empty key/value set passes its input
//! through unchanged.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::sequence::{
    derive_masks, AttentionMask, Role, Segment, SegmentKind, SegmentedSequence,
};
use crate::tape::{NodeId, Tape};
use crate::types::LatentClip;

/// Context-window sizes and the rate constants used to align them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionWindows {
    /// Suffix latents of the previous video clip fed to the audio path.
    pub f_v_len: usize,
    /// Audio tokens per latent position fed to the video path.
    pub f_a_len: usize,
    pub frames_per_latent: usize,
    pub ms_per_token: usize,
    pub fps: usize,
}

impl FusionWindows {
    pub fn from_config(config: &ModelConfig) -> FusionWindows {
        FusionWindows {
            f_v_len: config.f_v_len,
            f_a_len: config.f_a_len,
            frames_per_latent: config.frames_per_latent,
            ms_per_token: config.ms_per_token,
            fps: config.fps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_v_len == 0 || self.f_a_len == 0 {
            return Err(Error::ConfigInvalid {
                field: "fusion windows",
                constraint: "window lengths must be at least 1".into(),
            });
        }
        if self.frames_per_latent == 0 || self.ms_per_token == 0 || self.fps == 0 {
            return Err(Error::ConfigInvalid {
                field: "fusion rates",
                constraint: "rates must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Suffix of the previous clip, at most `f_v_len` latents, temporal order
/// preserved. Shorter clips are taken whole.
pub fn select_video_context(v_prev: &LatentClip, windows: &FusionWindows) -> LatentClip {
    let start = v_prev.len().saturating_sub(windows.f_v_len);
    v_prev.suffix(start)
}

/// Token window `[start, end)` aligned with a latent position:
/// `start = floor((latent_index * frames_per_latent / fps) * 1000 / ms_per_token)`,
/// clamped to the clip end.
pub fn align_audio_window(
    latent_index: usize,
    latent_len: usize,
    t_a: usize,
    windows: &FusionWindows,
) -> Result<(usize, usize)> {
    if latent_index >= latent_len {
        return Err(Error::IndexOutOfRange(format!(
            "latent index {latent_index} not below clip length {latent_len}"
        )));
    }
    let p = latent_index * windows.frames_per_latent * 1000 / (windows.fps * windows.ms_per_token);
    let start = p.min(t_a);
    let end = (p + windows.f_a_len).min(t_a);
    Ok((start, end))
}

/// Mask for the audio-context cross-attention of the video path: queries
/// are `[prev ∘ cur]` latent rows, keys are the `t_a` token positions of the
/// current audio clip. Previous-clip rows see nothing (they pass through);
/// each current row sees only its aligned window.
pub fn build_f_a_mask(
    prev_rows: usize,
    cur_rows: usize,
    t_a: usize,
    windows: &FusionWindows,
) -> Result<AttentionMask> {
    let mut mask = AttentionMask::new(prev_rows + cur_rows, t_a, vec![false; (prev_rows + cur_rows) * t_a]);
    for i in 0..cur_rows {
        let (start, end) = align_audio_window(i, cur_rows, t_a, windows)?;
        for k in start..end {
            mask.set(prev_rows + i, k, true);
        }
    }
    Ok(mask)
}

/// Node ids of one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// Registers a block's four `d x d` projections under `prefix.{wq,wk,wv,wo}`.
pub fn init_block(
    params: &mut ParamStore,
    prefix: &str,
    d: usize,
    std: f64,
    zero_out_proj: bool,
    rng: &mut ChaCha8Rng,
) {
    params.gaussian(&format!("{prefix}.wq"), d, d, std, rng);
    params.gaussian(&format!("{prefix}.wk"), d, d, std, rng);
    params.gaussian(&format!("{prefix}.wv"), d, d, std, rng);
    if zero_out_proj {
        params.zeros(&format!("{prefix}.wo"), d, d);
    } else {
        params.gaussian(&format!("{prefix}.wo"), d, d, std, rng);
    }
}

pub fn bind_block(bound: &Bound, prefix: &str) -> BlockIds {
    BlockIds {
        wq: bound.id(&format!("{prefix}.wq")),
        wk: bound.id(&format!("{prefix}.wk")),
        wv: bound.id(&format!("{prefix}.wv")),
        wo: bound.id(&format!("{prefix}.wo")),
    }
}

/// Residual self-attention: `x + mha(rms(x)) @ wo`.
pub fn sa_block(
    tape: &mut Tape,
    x: NodeId,
    blk: BlockIds,
    heads: usize,
    mask: Option<Arc<AttentionMask>>,
) -> NodeId {
    let xn = tape.rmsnorm(x);
    let q = tape.matmul(xn, blk.wq);
    let k = tape.matmul(xn, blk.wk);
    let v = tape.matmul(xn, blk.wv);
    let a = tape.mha(q, k, v, heads, mask);
    let o = tape.matmul(a, blk.wo);
    tape.add(x, o)
}

/// Residual cross-attention; `mem = None` (or an empty memory) passes the
/// input through unchanged.
pub fn ca_block(
    tape: &mut Tape,
    x: NodeId,
    mem: Option<NodeId>,
    blk: BlockIds,
    heads: usize,
    mask: Option<Arc<AttentionMask>>,
) -> NodeId {
    let mem = match mem {
        Some(m) if tape.value(m).rows > 0 => m,
        _ => return x,
    };
    let xn = tape.rmsnorm(x);
    let mn = tape.rmsnorm(mem);
    let q = tape.matmul(xn, blk.wq);
    let k = tape.matmul(mn, blk.wk);
    let v = tape.matmul(mn, blk.wv);
    let a = tape.mha(q, k, v, heads, mask);
    let o = tape.matmul(a, blk.wo);
    tape.add(x, o)
}

/// The parameter blocks one fused decoder layer touches.
#[derive(Debug, Clone, Copy)]
pub struct FusionLayer {
    pub audio_sa: BlockIds,
    pub audio_ca: BlockIds,
    /// Self-attention applied to the selected video-context window before it
    /// is used as audio-path memory.
    pub ctx_sa: BlockIds,
    pub video_sa: BlockIds,
    pub video_ca_text: BlockIds,
    pub video_ca_audio: BlockIds,
    pub heads: usize,
}

fn check_width(tape: &Tape, nodes: &[Option<NodeId>], d: usize) -> Result<()> {
    for n in nodes.iter().flatten() {
        let got = tape.value(*n).cols;
        if got != d {
            return Err(Error::DimensionMismatch(format!("expected width {d}, got {got}")));
        }
    }
    Ok(())
}

/// Mask for the audio stream `[speech ∘ prev ∘ cur]`: speech text is
/// bidirectional condition context; the audio region is strictly causal.
pub fn audio_stream_mask(
    speech_len: usize,
    prev_len: usize,
    cur_len: usize,
) -> Arc<AttentionMask> {
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    if speech_len > 0 {
        segments.push(Segment {
            kind: SegmentKind::Text,
            role: Role::Condition,
            clip_index: None,
            start: 0,
            len: speech_len,
        });
        cursor = speech_len;
    }
    let mut clip = 0u32;
    for len in [prev_len, cur_len] {
        if len > 0 {
            segments.push(Segment {
                kind: SegmentKind::AudioClip,
                role: Role::Generation,
                clip_index: Some(clip),
                start: cursor,
                len,
            });
            cursor += len;
            clip += 1;
        }
    }
    let seq = SegmentedSequence::from_segments(segments).expect("audio stream segments");
    derive_masks(&seq)
}

/// Mask for the video stream `[prev ∘ cur]`: bidirectional inside each clip,
/// the previous clip never sees the current one.
pub fn video_stream_mask(prev_len: usize, cur_len: usize) -> Arc<AttentionMask> {
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    let mut clip = 0u32;
    for len in [prev_len, cur_len] {
        if len > 0 {
            segments.push(Segment {
                kind: SegmentKind::VideoClip,
                role: Role::Generation,
                clip_index: Some(clip),
                start: cursor,
                len,
            });
            cursor += len;
            clip += 1;
        }
    }
    let seq = SegmentedSequence::from_segments(segments).expect("video stream segments");
    derive_masks(&seq)
}

/// One fused audio-path layer. Inputs are hidden-state rows of shared width;
/// the output covers the full `[speech ∘ prev ∘ cur]` concatenation, though
/// only the current-clip rows are consumed for prediction.
pub fn audio_fusion_step(
    tape: &mut Tape,
    layer: &FusionLayer,
    speech: Option<NodeId>,
    a_prev: Option<NodeId>,
    a_cur: NodeId,
    v_prev: Option<NodeId>,
    windows: &FusionWindows,
) -> Result<NodeId> {
    let d = tape.value(a_cur).cols;
    check_width(tape, &[speech, a_prev, Some(a_cur), v_prev], d)?;
    let speech_len = speech.map_or(0, |n| tape.value(n).rows);
    let prev_len = a_prev.map_or(0, |n| tape.value(n).rows);
    let cur_len = tape.value(a_cur).rows;
    let mut parts = Vec::new();
    if let Some(s) = speech {
        parts.push(s);
    }
    if let Some(p) = a_prev {
        parts.push(p);
    }
    parts.push(a_cur);
    let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
    let mask = audio_stream_mask(speech_len, prev_len, cur_len);
    let sa = sa_block(tape, x, layer.audio_sa, layer.heads, Some(mask));
    let mem = match v_prev {
        Some(v) => {
            let rows = tape.value(v).rows;
            let start = rows.saturating_sub(windows.f_v_len);
            let window = tape.slice_rows(v, start, rows - start);
            Some(sa_block(tape, window, layer.ctx_sa, layer.heads, None))
        }
        None => None,
    };
    Ok(ca_block(tape, sa, mem, layer.audio_ca, layer.heads, None))
}

/// One fused video-path layer. `a_cur_mem` holds one row per audio token of
/// the current clip (its embeddings, not mixed hidden states, so window
/// locality is exact); `t_m` is the motion-text memory.
pub fn video_fusion_step(
    tape: &mut Tape,
    layer: &FusionLayer,
    v_prev: Option<NodeId>,
    v_cur: NodeId,
    t_m: Option<NodeId>,
    a_cur_mem: Option<NodeId>,
    windows: &FusionWindows,
) -> Result<NodeId> {
    let d = tape.value(v_cur).cols;
    check_width(tape, &[v_prev, Some(v_cur), t_m, a_cur_mem], d)?;
    let prev_len = v_prev.map_or(0, |n| tape.value(n).rows);
    let cur_len = tape.value(v_cur).rows;
    let x = match v_prev {
        Some(p) => tape.concat_rows(&[p, v_cur]),
        None => v_cur,
    };
    let mask = video_stream_mask(prev_len, cur_len);
    let sa = sa_block(tape, x, layer.video_sa, layer.heads, Some(mask));
    let ca1 = ca_block(tape, sa, t_m, layer.video_ca_text, layer.heads, None);
    let out = match a_cur_mem {
        Some(mem) => {
            let t_a = tape.value(mem).rows;
            let fa = Arc::new(build_f_a_mask(prev_len, cur_len, t_a, windows)?);
            ca_block(tape, ca1, Some(mem), layer.video_ca_audio, layer.heads, Some(fa))
        }
        None => ca1,
    };
    Ok(out)
}

/// Registers one layer's fusion blocks plus the shared context block.
pub fn init_fusion_layer(
    params: &mut ParamStore,
    layer: usize,
    d: usize,
    std: f64,
    zero_out_proj: bool,
    rng: &mut ChaCha8Rng,
) {
    for name in ["audio_sa", "audio_ca", "video_sa", "video_ca_text", "video_ca_audio"] {
        init_block(params, &format!("layer{layer}.{name}"), d, std, zero_out_proj, rng);
    }
}

pub fn bind_fusion_layer(bound: &Bound, layer: usize, ctx_prefix: &str, heads: usize) -> FusionLayer {
    FusionLayer {
        audio_sa: bind_block(bound, &format!("layer{layer}.audio_sa")),
        audio_ca: bind_block(bound, &format!("layer{layer}.audio_ca")),
        ctx_sa: bind_block(bound, ctx_prefix),
        video_sa: bind_block(bound, &format!("layer{layer}.video_sa")),
        video_ca_text: bind_block(bound, &format!("layer{layer}.video_ca_text")),
        video_ca_audio: bind_block(bound, &format!("layer{layer}.video_ca_audio")),
        heads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tensor;
    use rand::Rng;

    fn windows() -> FusionWindows {
        FusionWindows { f_v_len: 10, f_a_len: 4, frames_per_latent: 4, ms_per_token: 10, fps: 100 }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn test_layer_params(d: usize, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut params = ParamStore::new();
        init_fusion_layer(&mut params, 0, d, 0.3, false, rng);
        init_block(&mut params, "ctx_sa", d, 0.3, false, rng);
        params
    }

    fn bind_layer(params: &ParamStore, tape: &mut Tape, heads: usize) -> FusionLayer {
        let bound = params.bind(tape);
        bind_fusion_layer(&bound, 0, "ctx_sa", heads)
    }

    #[test]
    fn video_context_is_a_suffix() {
        let w = windows();
        let clip = LatentClip::new(30, 2, (0..60).map(|x| x as f64).collect()).unwrap();
        let ctx = select_video_context(&clip, &w);
        assert_eq!(ctx.len(), 10);
        assert_eq!(ctx.latent(0), clip.latent(20));
        assert_eq!(ctx.latent(9), clip.latent(29));

        let clip = LatentClip::zeros(10, 2);
        assert_eq!(select_video_context(&clip, &w).len(), 10);
        let clip = LatentClip::zeros(6, 2);
        assert_eq!(select_video_context(&clip, &w).len(), 6);
    }

    #[test]
    fn window_alignment_examples() {
        let w = windows();
        assert_eq!(align_audio_window(0, 12, 48, &w).unwrap(), (0, 4));
        // 20 fps, 4 frames per latent, 10 ms tokens: latent 5 sits at 1000 ms.
        let w20 = FusionWindows { fps: 20, ..w };
        assert_eq!(align_audio_window(5, 8, 160, &w20).unwrap(), (100, 104));
        assert!(align_audio_window(12, 12, 48, &w).is_err());
    }

    #[test]
    fn window_clamps_to_clip_end() {
        let w = windows();
        // all indices of a clip, against independently computed floor arithmetic
        let (latent_len, t_a) = (12usize, 46usize); // 2 tokens short
        for i in 0..latent_len {
            let ms = (i * w.frames_per_latent) as f64 / w.fps as f64 * 1000.0;
            let p = (ms / w.ms_per_token as f64).floor() as usize;
            let expect = (p.min(t_a), (p + w.f_a_len).min(t_a));
            assert_eq!(align_audio_window(i, latent_len, t_a, &w).unwrap(), expect);
        }
        let (s, e) = align_audio_window(11, 12, 46, &w).unwrap();
        assert!(e - s <= 4 && e == 46);
    }

    #[test]
    fn zero_ca_projection_reduces_to_sa_only() {
        let d = 8;
        let mut rng = crate::rng::stream_rng(2, "fusion-zero-ca", 0);
        let mut params = test_layer_params(d, &mut rng);
        params.zeros("layer0.audio_ca.wo", d, d);
        let speech = rand_tensor(&mut rng, 3, d);
        let a_prev = rand_tensor(&mut rng, 4, d);
        let a_cur = rand_tensor(&mut rng, 4, d);
        let v_prev = rand_tensor(&mut rng, 6, d);

        let mut tape = Tape::new();
        let layer = bind_layer(&params, &mut tape, 2);
        let (s, p, c, v) = (
            tape.leaf(speech.clone()),
            tape.leaf(a_prev.clone()),
            tape.leaf(a_cur.clone()),
            tape.leaf(v_prev.clone()),
        );
        let fused =
            audio_fusion_step(&mut tape, &layer, Some(s), Some(p), c, Some(v), &windows()).unwrap();
        let with_ca = tape.value(fused).clone();

        let mut tape2 = Tape::new();
        let layer2 = bind_layer(&params, &mut tape2, 2);
        let (s2, p2, c2) =
            (tape2.leaf(speech), tape2.leaf(a_prev), tape2.leaf(a_cur));
        let sa_only =
            audio_fusion_step(&mut tape2, &layer2, Some(s2), Some(p2), c2, None, &windows())
                .unwrap();
        assert_eq!(with_ca, *tape2.value(sa_only));
    }

    #[test]
    fn audio_step_ignores_latents_outside_window() {
        let d = 8;
        let mut rng = crate::rng::stream_rng(2, "fusion-fv", 1);
        let params = test_layer_params(d, &mut rng);
        let speech = rand_tensor(&mut rng, 2, d);
        let a_prev = rand_tensor(&mut rng, 3, d);
        let a_cur = rand_tensor(&mut rng, 3, d);
        let v_prev = rand_tensor(&mut rng, 30, d);

        let run = |v: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let layer = bind_layer(&params, &mut tape, 2);
            let (s, p, c, vv) = (
                tape.leaf(speech.clone()),
                tape.leaf(a_prev.clone()),
                tape.leaf(a_cur.clone()),
                tape.leaf(v.clone()),
            );
            let out = audio_fusion_step(&mut tape, &layer, Some(s), Some(p), c, Some(vv), &windows())
                .unwrap();
            tape.value(out).clone()
        };

        let base = run(&v_prev);
        // outside the last-10 window: rows 0..20
        let mut outside = v_prev.clone();
        for r in 0..20 {
            for c in 0..d {
                outside.data[r * d + c] += 7.5;
            }
        }
        assert_eq!(base, run(&outside), "outside-window perturbation must be invisible");
        // inside the window
        let mut inside = v_prev.clone();
        inside.data[25 * d] += 0.5;
        let changed = run(&inside);
        let max_diff = base
            .data
            .iter()
            .zip(changed.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "inside-window perturbation must propagate");
    }

    #[test]
    fn empty_motion_text_passes_first_ca_through() {
        let d = 8;
        let mut rng = crate::rng::stream_rng(2, "fusion-tm", 2);
        let params = test_layer_params(d, &mut rng);
        let v_prev = rand_tensor(&mut rng, 4, d);
        let v_cur = rand_tensor(&mut rng, 4, d);
        let a_mem = rand_tensor(&mut rng, 16, d);

        let mut tape = Tape::new();
        let layer = bind_layer(&params, &mut tape, 2);
        let (p, c, m) =
            (tape.leaf(v_prev.clone()), tape.leaf(v_cur.clone()), tape.leaf(a_mem.clone()));
        let out =
            video_fusion_step(&mut tape, &layer, Some(p), c, None, Some(m), &windows()).unwrap();
        let no_tm = tape.value(out).clone();

        // manual recomposition without the motion CA stage
        let mut tape2 = Tape::new();
        let layer2 = bind_layer(&params, &mut tape2, 2);
        let (p2, c2, m2) = (tape2.leaf(v_prev), tape2.leaf(v_cur), tape2.leaf(a_mem));
        let x = tape2.concat_rows(&[p2, c2]);
        let mask = video_stream_mask(4, 4);
        let sa = sa_block(&mut tape2, x, layer2.video_sa, 2, Some(mask));
        let fa = Arc::new(build_f_a_mask(4, 4, 16, &windows()).unwrap());
        let direct = ca_block(&mut tape2, sa, Some(m2), layer2.video_ca_audio, 2, Some(fa));
        assert_eq!(no_tm, *tape2.value(direct));
    }

    #[test]
    fn video_step_is_local_in_audio_windows() {
        let d = 8;
        let mut rng = crate::rng::stream_rng(2, "fusion-fa", 3);
        let params = test_layer_params(d, &mut rng);
        let v_prev = rand_tensor(&mut rng, 4, d);
        let v_cur = rand_tensor(&mut rng, 4, d);
        let t_m = rand_tensor(&mut rng, 2, d);
        let a_mem = rand_tensor(&mut rng, 16, d);
        let w = windows();

        let run = |mem: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let layer = bind_layer(&params, &mut tape, 2);
            let (p, c, t, m) = (
                tape.leaf(v_prev.clone()),
                tape.leaf(v_cur.clone()),
                tape.leaf(t_m.clone()),
                tape.leaf(mem.clone()),
            );
            let out =
                video_fusion_step(&mut tape, &layer, Some(p), c, Some(t), Some(m), &w).unwrap();
            tape.value(out).clone()
        };

        let base = run(&a_mem);
        // latent 1's window is tokens [4, 8); perturb token 9 and check rows
        let (start, end) = align_audio_window(1, 4, 16, &w).unwrap();
        assert_eq!((start, end), (4, 8));
        let mut outside = a_mem.clone();
        for c in 0..d {
            outside.data[9 * d + c] += 3.0;
        }
        let perturbed = run(&outside);
        let row = 4 + 1; // prev rows + latent index
        assert_eq!(base.row(row), perturbed.row(row), "latent 1 must not see token 9");
        // every prev row passes through untouched by audio perturbations
        for r in 0..4 {
            assert_eq!(base.row(r), perturbed.row(r));
        }
        // inside the window
        let mut inside = a_mem.clone();
        for c in 0..d {
            inside.data[5 * d + c] += 3.0;
        }
        let perturbed = run(&inside);
        assert_ne!(base.row(row), perturbed.row(row), "latent 1 must see token 5");
    }

    /// Unfused reference: recompose SA/CA/CA from primitive matrix ops with
    /// an independent (loop-based, f64) implementation.
    #[test]
    fn video_step_matches_brute_force_recomposition() {
        let d = 4;
        let heads = 2;
        let mut rng = crate::rng::stream_rng(2, "fusion-brute", 4);
        let params = test_layer_params(d, &mut rng);
        let v_cur = rand_tensor(&mut rng, 2, d); // 2 latents
        let t_m = rand_tensor(&mut rng, 3, d);
        let a_mem = rand_tensor(&mut rng, 8, d); // 8 tokens
        let w = windows();

        let mut tape = Tape::new();
        let layer = bind_layer(&params, &mut tape, heads);
        let (c, t, m) =
            (tape.leaf(v_cur.clone()), tape.leaf(t_m.clone()), tape.leaf(a_mem.clone()));
        let out = video_fusion_step(&mut tape, &layer, None, c, Some(t), Some(m), &w).unwrap();
        let fused = tape.value(out).clone();

        // --- reference path ---
        let rms = |x: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                    let ri = 1.0 / (ms + 1e-6).sqrt();
                    row.iter().map(|v| v * ri).collect()
                })
                .collect()
        };
        let matmul = |x: &Vec<Vec<f64>>, w2: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..w2.cols)
                        .map(|j| (0..w2.rows).map(|i| row[i] * w2.get(i, j)).sum())
                        .collect()
                })
                .collect()
        };
        let attn = |q: &Vec<Vec<f64>>,
                    k: &Vec<Vec<f64>>,
                    v: &Vec<Vec<f64>>,
                    allowed: &dyn Fn(usize, usize) -> bool|
         -> Vec<Vec<f64>> {
            let dh = d / heads;
            let mut out = vec![vec![0.0; d]; q.len()];
            for h in 0..heads {
                for qi in 0..q.len() {
                    let mut weights = Vec::new();
                    for ki in 0..k.len() {
                        if allowed(qi, ki) {
                            let s: f64 = (0..dh)
                                .map(|c2| q[qi][h * dh + c2] * k[ki][h * dh + c2])
                                .sum::<f64>()
                                / (dh as f64).sqrt();
                            weights.push((ki, s));
                        }
                    }
                    if weights.is_empty() {
                        continue;
                    }
                    let max = weights.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = weights.iter().map(|(_, s)| (s - max).exp()).sum();
                    for (ki, s) in &weights {
                        let p = (s - max).exp() / denom;
                        for c2 in 0..dh {
                            out[qi][h * dh + c2] += p * v[*ki][h * dh + c2];
                        }
                    }
                }
            }
            out
        };
        let block = |x: &Vec<Vec<f64>>,
                     mem: &Vec<Vec<f64>>,
                     prefix: &str,
                     allowed: &dyn Fn(usize, usize) -> bool|
         -> Vec<Vec<f64>> {
            let xn = rms(x);
            let mn = rms(mem);
            let q = matmul(&xn, params.get(&format!("{prefix}.wq")));
            let k = matmul(&mn, params.get(&format!("{prefix}.wk")));
            let v = matmul(&mn, params.get(&format!("{prefix}.wv")));
            let a = attn(&q, &k, &v, allowed);
            let o = matmul(&a, params.get(&format!("{prefix}.wo")));
            x.iter()
                .zip(o.iter())
                .map(|(xr, or)| xr.iter().zip(or).map(|(a2, b2)| a2 + b2).collect())
                .collect()
        };
        let to_rows = |t2: &Tensor| -> Vec<Vec<f64>> {
            (0..t2.rows).map(|r| t2.row(r).to_vec()).collect()
        };
        // self-attention over the single current clip (x is its own memory)
        let x0 = to_rows(&v_cur);
        let sa_ref = {
            let xn = rms(&x0);
            let q = matmul(&xn, params.get("layer0.video_sa.wq"));
            let k = matmul(&xn, params.get("layer0.video_sa.wk"));
            let v = matmul(&xn, params.get("layer0.video_sa.wv"));
            let a = attn(&q, &k, &v, &|_, _| true);
            let o = matmul(&a, params.get("layer0.video_sa.wo"));
            x0.iter()
                .zip(o.iter())
                .map(|(xr, or)| {
                    xr.iter().zip(or).map(|(a2, b2)| a2 + b2).collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        };
        let ca1_ref = block(&sa_ref, &to_rows(&t_m), "layer0.video_ca_text", &|_, _| true);
        let fa_allowed = |qi: usize, ki: usize| -> bool {
            let (s, e) = align_audio_window(qi, 2, 8, &w).unwrap();
            ki >= s && ki < e
        };
        let ca2_ref = block(&ca1_ref, &to_rows(&a_mem), "layer0.video_ca_audio", &fa_allowed);

        for r in 0..2 {
            for c2 in 0..d {
                let diff = (fused.get(r, c2) - ca2_ref[r][c2]).abs();
                assert!(diff < 1e-6, "row {r} col {c2}: {diff}");
            }
        }
    }

    /// Analytic gradients of both fusion steps against central differences
    /// (1e-3 step, relative error < 1e-4, d_model = 8).
    #[test]
    fn fusion_step_gradients_match_finite_differences() {
        let d = 8;
        let heads = 2;
        let mut rng = crate::rng::stream_rng(2, "fusion-grad", 5);
        let mut params = test_layer_params(d, &mut rng);
        let speech = rand_tensor(&mut rng, 2, d);
        let a_prev = rand_tensor(&mut rng, 3, d);
        let a_cur = rand_tensor(&mut rng, 3, d);
        let v_prev = rand_tensor(&mut rng, 4, d);
        let v_cur = rand_tensor(&mut rng, 4, d);
        let t_m = rand_tensor(&mut rng, 2, d);
        let a_mem = rand_tensor(&mut rng, 12, d);
        let target_a = rand_tensor(&mut rng, 8, d);
        let target_v = rand_tensor(&mut rng, 8, d);
        let w = windows();

        let loss_of = |params: &ParamStore| -> (f64, Tape, Bound) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let layer = bind_fusion_layer(&bound, 0, "ctx_sa", heads);
            let (s, ap, ac, vp, vc, tm, am) = (
                tape.leaf(speech.clone()),
                tape.leaf(a_prev.clone()),
                tape.leaf(a_cur.clone()),
                tape.leaf(v_prev.clone()),
                tape.leaf(v_cur.clone()),
                tape.leaf(t_m.clone()),
                tape.leaf(a_mem.clone()),
            );
            let audio =
                audio_fusion_step(&mut tape, &layer, Some(s), Some(ap), ac, Some(vp), &w).unwrap();
            let video =
                video_fusion_step(&mut tape, &layer, Some(vp), vc, Some(tm), Some(am), &w)
                    .unwrap();
            let la = tape.squared_error_sum(audio, &target_a);
            let lv = tape.squared_error_sum(video, &target_v);
            let loss = tape.add(la, lv);
            let val = tape.scalar(loss);
            tape.backward(loss);
            (val, tape, bound)
        };

        let (_, tape, bound) = loss_of(&params);
        let mut grads = crate::params::GradStore::new();
        bound.accumulate_grads(&tape, &mut grads, 1.0);

        let h = 1e-3;
        let names: Vec<String> = params.names().cloned().collect();
        let mut rng2 = crate::rng::stream_rng(2, "fusion-grad-pick", 6);
        for name in names {
            let len = params.get(&name).data.len();
            // spot-check a few entries per parameter tensor
            for _ in 0..3 {
                let j = rng2.random_range(0..len);
                let orig = params.get(&name).data[j];
                params.get_mut(&name).data[j] = orig + h;
                let (up, _, _) = loss_of(&params);
                params.get_mut(&name).data[j] = orig - h;
                let (down, _, _) = loss_of(&params);
                params.get_mut(&name).data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let analytic = grads.get(&name).map(|g| g.data[j]).unwrap_or(0.0);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{j}]: analytic {analytic} vs fd {fd} (rel {rel})");
            }
        }
    }

    #[test]
    fn shape_preservation() {
        let d = 8;
        let mut rng = crate::rng::stream_rng(2, "fusion-shape", 7);
        let params = test_layer_params(d, &mut rng);
        let mut tape = Tape::new();
        let layer = bind_layer(&params, &mut tape, 2);
        let s = tape.leaf(rand_tensor(&mut rng, 2, d));
        let c = tape.leaf(rand_tensor(&mut rng, 5, d));
        let out = audio_fusion_step(&mut tape, &layer, Some(s), None, c, None, &windows()).unwrap();
        assert_eq!(tape.value(out).shape(), (7, d));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let d = 8;
        let mut rng = crate::rng::stream_rng(2, "fusion-dim", 8);
        let params = test_layer_params(d, &mut rng);
        let mut tape = Tape::new();
        let layer = bind_layer(&params, &mut tape, 2);
        let c = tape.leaf(rand_tensor(&mut rng, 5, d));
        let bad = tape.leaf(rand_tensor(&mut rng, 3, d + 1));
        let err = audio_fusion_step(&mut tape, &layer, Some(bad), None, c, None, &windows());
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }
}
