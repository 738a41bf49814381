//! The creator: a hybrid decoder over interleaved audio-token and
//! video-latent clips. Audio is modeled autoregressively over delay-staggered
//! multi-codebook columns; video latents are modeled by a velocity head
//! trained with the rectified-flow interpolation `x_t = (1-t)·x0 + t·x1`
//! against the target `u = x1 - x0`.
//!
//! One audio clip occupies `delay_width + 1` model positions: a start column
//! of `audio_bos` tokens followed by the staggered columns. Each column
//! embeds all codebooks (summed); per-codebook heads predict the next
//! column, so every codebook decodes simultaneously during inference.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    bind_block, bind_fusion_layer, build_f_a_mask, ca_block, init_block, init_fusion_layer,
    sa_block, FusionLayer, FusionWindows,
};
use crate::params::{Bound, ParamStore};
use crate::tape::{NodeId, Tape, Tensor};
use crate::types::{AudioClip, LatentClip, Stream, Token, AUDIO_BOS, AUDIO_PAD};

/// Staggered token grid: codebook `k`'s content occupies columns
/// `k .. k + t_a`, everything else is pad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayGrid {
    pub rows: Vec<Vec<Token>>,
}

impl DelayGrid {
    pub fn codebooks(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Token ids of one column across codebooks.
    pub fn column_ids(&self, col: usize) -> Vec<u32> {
        self.rows.iter().map(|r| r[col].id).collect()
    }
}

/// Shifts codebook `k` right by `k` columns, pad-filling the stagger.
pub fn apply_delay_pattern(clip: &AudioClip) -> DelayGrid {
    let c = clip.codebooks();
    let t_a = clip.len();
    let width = t_a + c - 1;
    let rows = (0..c)
        .map(|k| {
            let mut row = vec![Token::audio(k as u8, AUDIO_PAD); width];
            for t in 0..t_a {
                row[t + k] = clip.token(k, t);
            }
            row
        })
        .collect();
    DelayGrid { rows }
}

/// Exact inverse of [`apply_delay_pattern`]; rejects grids whose pad cells
/// contain content or whose width is inconsistent.
pub fn remove_delay_pattern(grid: &DelayGrid) -> Result<AudioClip> {
    let c = grid.codebooks();
    if c == 0 {
        return Err(Error::MalformedGrid("grid has no codebook rows".into()));
    }
    let width = grid.rows[0].len();
    if grid.rows.iter().any(|r| r.len() != width) {
        return Err(Error::MalformedGrid("ragged rows".into()));
    }
    if width + 1 < c + 1 || width + 1 - c < 1 {
        return Err(Error::MalformedGrid(format!(
            "width {width} impossible for {c} codebooks"
        )));
    }
    let t_a = width + 1 - c;
    let mut rows = Vec::with_capacity(c);
    for (k, row) in grid.rows.iter().enumerate() {
        for (col, tok) in row.iter().enumerate() {
            let in_content = col >= k && col < k + t_a;
            if !in_content && tok.id != AUDIO_PAD {
                return Err(Error::MalformedGrid(format!(
                    "pad cell ({k},{col}) holds content id {}",
                    tok.id
                )));
            }
            if tok.stream != Stream::Audio(k as u8) {
                return Err(Error::MalformedGrid(format!(
                    "cell ({k},{col}) has stream {:?}",
                    tok.stream
                )));
            }
        }
        rows.push(row[k..k + t_a].to_vec());
    }
    AudioClip::new(rows)
}

/// Mean negative log-likelihood over the target positions; logit rows before
/// `condition_len` are excluded.
pub fn ar_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    condition_len: usize,
) -> Result<NodeId> {
    let rows = tape.value(logits).rows;
    if condition_len + targets.len() > rows {
        return Err(Error::LengthMismatch(format!(
            "{} logit rows cannot cover condition {condition_len} + {} targets",
            rows,
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::LengthMismatch("no target positions".into()));
    }
    let sliced = tape.slice_rows(logits, condition_len, targets.len());
    let sum = tape.cross_entropy_sum(sliced, targets);
    Ok(tape.scale(sum, 1.0 / targets.len() as f64))
}

/// Rectified-flow interpolation point.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Tensor {
    assert_eq!(x0.shape(), x1.shape());
    let data = x0
        .data
        .iter()
        .zip(x1.data.iter())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::from_vec(x0.rows, x0.cols, data)
}

/// The regression target of the velocity head: `x1 - x0`.
pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Tensor {
    assert_eq!(x0.shape(), x1.shape());
    let data = x0.data.iter().zip(x1.data.iter()).map(|(a, b)| b - a).collect();
    Tensor::from_vec(x0.rows, x0.cols, data)
}

/// Mean squared error between the predicted velocity and `x1 - x0`.
pub fn diffusion_velocity_loss(
    tape: &mut Tape,
    predicted: NodeId,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
) -> Result<NodeId> {
    if x0.shape() != x1.shape() || tape.value(predicted).shape() != x0.shape() {
        return Err(Error::ShapeMismatch(format!(
            "velocity shapes: pred {:?}, x0 {:?}, x1 {:?}",
            tape.value(predicted).shape(),
            x0.shape(),
            x1.shape()
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::ShapeMismatch(format!("timestep {t} outside (0,1)")));
    }
    let target = velocity_target(x0, x1);
    let sum = tape.squared_error_sum(predicted, &target);
    let n = (x0.rows * x0.cols) as f64;
    Ok(tape.scale(sum, 1.0 / n))
}

/// Combined objective; the two parts are logged separately and must
/// recompose exactly.
pub fn total_loss(l_ar: f64, l_diff: f64) -> f64 {
    l_ar + l_diff
}

/// Trainable creator parameters bundled with their config.
#[derive(Debug, Clone)]
pub struct Creator {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Creator {
    /// Training initialization: small gaussian weights, zeroed attention
    /// output projections and heads.
    pub fn init(config: &ModelConfig) -> Creator {
        Creator { config: config.clone(), params: init_params(config, 0.08, true) }
    }

    /// Fully random initialization (no zeroed projections); used by
    /// gradient checks so every path carries signal.
    pub fn init_randomized(config: &ModelConfig, std: f64) -> Creator {
        Creator { config: config.clone(), params: init_params(config, std, false) }
    }

    pub fn windows(&self) -> FusionWindows {
        FusionWindows::from_config(&self.config)
    }
}

fn init_params(config: &ModelConfig, std: f64, zero_out_proj: bool) -> ParamStore {
    let d = config.d_model;
    let mut rng = crate::rng::stream_rng(config.seed, "creator-init", 0);
    let mut p = ParamStore::new();
    p.gaussian("embed.text", config.text_vocab, d, std, &mut rng);
    for k in 0..config.codebooks {
        p.gaussian(&format!("embed.audio{k}"), config.audio_vocab, d, std, &mut rng);
    }
    p.gaussian("embed.video_in", config.latent_dim, d, std, &mut rng);
    p.gaussian("embed.pos", config.max_seq, d, std, &mut rng);
    p.gaussian("embed.timestep", config.t_buckets, d, std, &mut rng);
    if zero_out_proj {
        p.constant("embed.t_gain", config.t_buckets, 1, 1.0);
    } else {
        p.gaussian("embed.t_gain", config.t_buckets, 1, std, &mut rng);
    }
    init_block(&mut p, "ctx_sa", d, std, zero_out_proj, &mut rng);
    for l in 0..config.n_layers {
        init_fusion_layer(&mut p, l, d, std, zero_out_proj, &mut rng);
    }
    for k in 0..config.codebooks {
        if zero_out_proj {
            p.zeros(&format!("head.audio{k}.w"), d, config.audio_vocab);
        } else {
            p.gaussian(&format!("head.audio{k}.w"), d, config.audio_vocab, std, &mut rng);
        }
        p.zeros(&format!("head.audio{k}.b"), 1, config.audio_vocab);
    }
    if zero_out_proj {
        p.zeros("head.velocity.w", d, config.latent_dim);
    } else {
        p.gaussian("head.velocity.w", d, config.latent_dim, std, &mut rng);
    }
    p.zeros("head.velocity.b", 1, config.latent_dim);
    p
}

/// Timestep bucket; `t = 1` maps to the last bucket.
pub fn t_bucket(t: f64, buckets: usize) -> usize {
    ((t * buckets as f64) as usize).min(buckets - 1)
}

/// One teacher-forced training example: the current clip pair plus at most
/// one previous pair as history.
#[derive(Debug, Clone)]
pub struct ClipPairInput {
    pub speech: Vec<Token>,
    pub motion: Vec<Token>,
    pub a_prev: Option<AudioClip>,
    pub v_prev: Option<LatentClip>,
    pub a_cur: AudioClip,
    pub v_cur: LatentClip,
}

/// Forward-pass switches: `video` is off during the audio-only training
/// stage; `fusion` off removes history conditioning and every
/// cross-attention stage, leaving per-clip self-attention only.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub fusion: bool,
    pub video: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { fusion: true, video: true }
    }
}

/// Outputs of one clip-pair forward.
pub struct ClipPairGraph {
    /// Per-codebook logits, each `[delay_width, audio_vocab]`; row `i`
    /// predicts staggered column `i`.
    pub audio_logits: Vec<NodeId>,
    /// Per-codebook target ids for those rows.
    pub audio_targets: Vec<Vec<usize>>,
    /// Predicted velocity `[latent_len, latent_dim]` (when video is on).
    pub velocity: Option<NodeId>,
    /// The noise sample used for the interpolation.
    pub x0: Option<Tensor>,
}

/// Embeds one audio clip as model columns: a start column of `audio_bos`
/// followed by the staggered columns. Returns (node, ids-per-codebook).
fn embed_audio_clip(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    clip: &AudioClip,
) -> (NodeId, Vec<Vec<usize>>) {
    let grid = apply_delay_pattern(clip);
    let width = grid.width();
    let mut ids: Vec<Vec<usize>> = vec![Vec::with_capacity(width + 1); config.codebooks];
    for k in 0..config.codebooks {
        ids[k].push(AUDIO_BOS as usize);
        for col in 0..width {
            ids[k].push(grid.rows[k][col].id as usize);
        }
    }
    let mut acc: Option<NodeId> = None;
    for k in 0..config.codebooks {
        let table = bound.id(&format!("embed.audio{k}"));
        let g = tape.gather(table, &ids[k]);
        acc = Some(match acc {
            Some(a) => tape.add(a, g),
            None => g,
        });
    }
    (acc.unwrap(), ids)
}

/// Embeds the undelayed token grid of a clip, one row per time step; this is
/// the video path's audio memory, local per token by construction.
fn embed_audio_tokens(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    clip: &AudioClip,
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for k in 0..config.codebooks {
        let table = bound.id(&format!("embed.audio{k}"));
        let ids: Vec<usize> = (0..clip.len()).map(|t| clip.token(k, t).id as usize).collect();
        let g = tape.gather(table, &ids);
        acc = Some(match acc {
            Some(a) => tape.add(a, g),
            None => g,
        });
    }
    let pos: Vec<usize> = (0..clip.len()).collect();
    let pos_table = bound.id("embed.pos");
    let p = tape.gather(pos_table, &pos);
    let x = acc.unwrap();
    tape.add(x, p)
}

/// Text rows without positions; used where a stream-wide position add
/// follows.
fn gather_text(tape: &mut Tape, bound: &Bound, tokens: &[Token]) -> NodeId {
    let ids: Vec<usize> = tokens.iter().map(|t| t.id as usize).collect();
    let table = bound.id("embed.text");
    tape.gather(table, &ids)
}

fn embed_text(tape: &mut Tape, bound: &Bound, tokens: &[Token]) -> NodeId {
    let x = gather_text(tape, bound, tokens);
    let pos: Vec<usize> = (0..tokens.len()).collect();
    let pos_table = bound.id("embed.pos");
    let p = tape.gather(pos_table, &pos);
    tape.add(x, p)
}

/// Embeds video latents at a timestep: `gain(t)·(latents @ video_in) + pos +
/// timestep`. Positions are stream-local and offset by `pos_offset`.
fn embed_video(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    latents: &Tensor,
    t: f64,
    pos_offset: usize,
) -> NodeId {
    let rows = latents.rows;
    let x = tape.leaf(latents.clone());
    let proj = bound.id("embed.video_in");
    let xp = tape.matmul(x, proj);
    let bucket = t_bucket(t, config.t_buckets);
    let gain_table = bound.id("embed.t_gain");
    let gain = tape.gather(gain_table, &vec![bucket; rows]);
    let xg = tape.scale_rows(xp, gain);
    let pos: Vec<usize> = (pos_offset..pos_offset + rows).collect();
    let pos_table = bound.id("embed.pos");
    let p = tape.gather(pos_table, &pos);
    let xpp = tape.add(xg, p);
    let ts_table = bound.id("embed.timestep");
    let ts = tape.gather(ts_table, &vec![bucket; rows]);
    tape.add(xpp, ts)
}

fn latents_as_tensor(clip: &LatentClip) -> Tensor {
    Tensor::from_vec(clip.len(), clip.dim(), clip.data().to_vec())
}

/// Builds the teacher-forced graph for one clip pair. The current audio
/// clip conditions the video branch through its clean tokens; only the
/// current video clip is noised (at timestep `t`, from noise `x0`).
pub fn forward_clip_pair(
    tape: &mut Tape,
    creator: &Creator,
    bound: &Bound,
    input: &ClipPairInput,
    t: f64,
    x0: Option<Tensor>,
    opts: ForwardOptions,
) -> Result<ClipPairGraph> {
    let config = &creator.config;
    let windows = creator.windows();
    input.a_cur.validate(config)?;
    if input.a_cur.len() != config.t_a {
        return Err(Error::DimensionMismatch(format!(
            "audio clip length {} vs configured {}",
            input.a_cur.len(),
            config.t_a
        )));
    }
    if input.v_cur.len() != config.latent_len || input.v_cur.dim() != config.latent_dim {
        return Err(Error::DimensionMismatch(format!(
            "video clip {}x{} vs configured {}x{}",
            input.v_cur.len(),
            input.v_cur.dim(),
            config.latent_len,
            config.latent_dim
        )));
    }

    let use_history = opts.fusion;
    let speech_len = input.speech.len();
    let a_prev = if use_history { input.a_prev.as_ref() } else { None };
    let v_prev = if use_history { input.v_prev.as_ref() } else { None };

    // ---- audio stream ----
    let t_s = if speech_len > 0 { Some(gather_text(tape, bound, &input.speech)) } else { None };
    let prev_part = a_prev.map(|clip| embed_audio_clip(tape, bound, config, clip).0);
    let (cur_part, cur_ids) = embed_audio_clip(tape, bound, config, &input.a_cur);
    let prev_span = prev_part.map_or(0, |n| tape.value(n).rows);
    let cur_span = tape.value(cur_part).rows;

    let mut parts: Vec<NodeId> = Vec::new();
    if let Some(s) = t_s {
        parts.push(s);
    }
    if let Some(p) = prev_part {
        parts.push(p);
    }
    parts.push(cur_part);
    let cat = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
    let total = tape.value(cat).rows;
    if total > config.max_seq {
        return Err(Error::DimensionMismatch(format!(
            "audio stream length {total} exceeds max_seq {}",
            config.max_seq
        )));
    }
    let pos_ids: Vec<usize> = (0..total).collect();
    let pos_table = bound.id("embed.pos");
    let pos = tape.gather(pos_table, &pos_ids);
    let mut x_audio = tape.add(cat, pos);

    let audio_mask = crate::fusion::audio_stream_mask(speech_len, prev_span, cur_span);

    // ---- video stream inputs ----
    let x1 = latents_as_tensor(&input.v_cur);
    let (mut x_video, video_mask, t_m_mem, a_mem, prev_rows, x0_used) = if opts.video {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::ShapeMismatch(format!("timestep {t} outside (0,1)")));
        }
        let x0 = x0.ok_or_else(|| Error::ShapeMismatch("video forward needs x0".into()))?;
        if x0.shape() != x1.shape() {
            return Err(Error::ShapeMismatch("x0 shape mismatch".into()));
        }
        let x_t = interpolate(&x0, &x1, t);
        let prev_rows = v_prev.map_or(0, |v| v.len());
        let v_prev_emb =
            v_prev.map(|v| embed_video(tape, bound, config, &latents_as_tensor(v), 1.0, 0));
        let v_cur_emb = embed_video(tape, bound, config, &x_t, t, prev_rows);
        let x_video = match v_prev_emb {
            Some(p) => tape.concat_rows(&[p, v_cur_emb]),
            None => v_cur_emb,
        };
        let video_mask = crate::fusion::video_stream_mask(prev_rows, input.v_cur.len());
        let t_m_mem = if opts.fusion && !input.motion.is_empty() {
            Some(embed_text(tape, bound, &input.motion))
        } else {
            None
        };
        let a_mem = if opts.fusion {
            Some(embed_audio_tokens(tape, bound, config, &input.a_cur))
        } else {
            None
        };
        (Some(x_video), Some(video_mask), t_m_mem, a_mem, prev_rows, Some(x0))
    } else {
        (None, None, None, None, 0, None)
    };

    // The audio path's video context: the window suffix of the previous
    // clip's embeddings, mixed once by the shared context block.
    let ctx_mem = if opts.fusion {
        v_prev.map(|v| {
            let emb = embed_video(tape, bound, config, &latents_as_tensor(v), 1.0, 0);
            let rows = tape.value(emb).rows;
            let start = rows.saturating_sub(windows.f_v_len);
            let window = tape.slice_rows(emb, start, rows - start);
            let ctx = bind_block(bound, "ctx_sa");
            sa_block(tape, window, ctx, config.n_heads, None)
        })
    } else {
        None
    };

    let fa_mask = if opts.video && opts.fusion {
        Some(Arc::new(build_f_a_mask(prev_rows, input.v_cur.len(), config.t_a, &windows)?))
    } else {
        None
    };

    // ---- layer stack ----
    for l in 0..config.n_layers {
        let layer: FusionLayer = bind_fusion_layer(bound, l, "ctx_sa", config.n_heads);
        let sa = sa_block(tape, x_audio, layer.audio_sa, config.n_heads, Some(audio_mask.clone()));
        x_audio = ca_block(tape, sa, ctx_mem, layer.audio_ca, config.n_heads, None);
        if let Some(xv) = x_video {
            let sa = sa_block(tape, xv, layer.video_sa, config.n_heads, video_mask.clone());
            let c1 = ca_block(tape, sa, t_m_mem, layer.video_ca_text, config.n_heads, None);
            x_video = Some(ca_block(
                tape,
                c1,
                a_mem,
                layer.video_ca_audio,
                config.n_heads,
                fa_mask.clone(),
            ));
        }
    }

    // ---- heads ----
    let width = config.delay_width();
    let cur_start = speech_len + prev_span;
    let pred_rows = tape.slice_rows(x_audio, cur_start, width);
    let mut audio_logits = Vec::with_capacity(config.codebooks);
    let mut audio_targets = Vec::with_capacity(config.codebooks);
    for k in 0..config.codebooks {
        let w = bound.id(&format!("head.audio{k}.w"));
        let b = bound.id(&format!("head.audio{k}.b"));
        let logits = tape.matmul(pred_rows, w);
        let logits = tape.add_row(logits, b);
        audio_logits.push(logits);
        // row i predicts staggered column i; input ids are shifted by the bos
        audio_targets.push(cur_ids[k][1..].iter().map(|&id| id).collect());
    }

    let velocity = x_video.map(|xv| {
        let rows = tape.slice_rows(xv, prev_rows, config.latent_len);
        let w = bound.id("head.velocity.w");
        let b = bound.id("head.velocity.b");
        let v = tape.matmul(rows, w);
        tape.add_row(v, b)
    });

    Ok(ClipPairGraph { audio_logits, audio_targets, velocity, x0: x0_used })
}

/// Losses of one clip-pair graph: `(l_ar, l_diff, l_all)` nodes.
pub fn clip_pair_losses(
    tape: &mut Tape,
    creator: &Creator,
    graph: &ClipPairGraph,
    x1: &LatentClip,
    t: f64,
) -> Result<(NodeId, Option<NodeId>, NodeId)> {
    let config = &creator.config;
    let width = config.delay_width();
    let mut ce_sum: Option<NodeId> = None;
    for (logits, targets) in graph.audio_logits.iter().zip(graph.audio_targets.iter()) {
        let s = tape.cross_entropy_sum(*logits, targets);
        ce_sum = Some(match ce_sum {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let n_cells = (config.codebooks * width) as f64;
    let l_ar = tape.scale(ce_sum.unwrap(), 1.0 / n_cells);
    let l_diff = match (&graph.velocity, &graph.x0) {
        (Some(v), Some(x0)) => {
            let x1t = latents_as_tensor(x1);
            Some(diffusion_velocity_loss(tape, *v, x0, &x1t, t)?)
        }
        _ => None,
    };
    let l_all = match l_diff {
        Some(ld) => tape.add(l_ar, ld),
        None => l_ar,
    };
    Ok((l_ar, l_diff, l_all))
}

/// Samples standard-normal noise shaped like one video clip.
pub fn sample_noise(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = config.latent_len * config.latent_dim;
    Tensor::from_vec(
        config.latent_len,
        config.latent_dim,
        (0..n).map(|_| crate::rng::gauss(rng)).collect(),
    )
}
