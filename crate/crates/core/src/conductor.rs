//! The conductor: a small decoder that reads stub-encoded multimodal inputs
//! and emits a framed directive wire by constrained next-token prediction.
//!
//! Stub encoders stand in for pretrained modality encoders: fixed,
//! seed-derived embedding maps that are deterministic and never trained.
//! Decoding enforces the wire grammar at sampling time (`m_eos` only after
//! `m_bos`, nothing after `m_eos`), so every terminated output parses.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{bind_block, init_block, sa_block};
use crate::infer::{block_w, matmul_plain, IncrementalDecoder, LayerSpec};
use crate::params::{GradStore, ParamStore, Sgd};
use crate::sequence::{derive_masks, Role, Segment, SegmentKind, SegmentedSequence};
use crate::tape::{Tape, Tensor};
use crate::types::{
    AudioClip, DirectivePair, LatentClip, Token, M_BOS, M_EOS, TEXT_CONTENT_START, TEXT_PAD,
};

/// Fixed, seed-derived embedding maps for the three input modalities.
#[derive(Debug, Clone)]
pub struct StubEncoders {
    text: Tensor,
    audio: Vec<Tensor>,
    video: Tensor,
}

impl StubEncoders {
    pub fn new(config: &ModelConfig) -> StubEncoders {
        let d = config.d_model;
        let mut rng = crate::rng::stream_rng(config.seed, "stub-encoders", 0);
        let mut table = |rows: usize| {
            Tensor::from_vec(
                rows,
                d,
                (0..rows * d).map(|_| 0.4 * crate::rng::gauss(&mut rng)).collect(),
            )
        };
        let text = table(config.text_vocab);
        let audio = (0..config.codebooks).map(|_| table(config.audio_vocab)).collect();
        let video = table(config.latent_dim);
        StubEncoders { text, audio, video }
    }

    pub fn encode_text(&self, tokens: &[Token]) -> Tensor {
        let d = self.text.cols;
        let mut out = Tensor::zeros(tokens.len(), d);
        for (r, tok) in tokens.iter().enumerate() {
            out.data[r * d..(r + 1) * d].copy_from_slice(self.text.row(tok.id as usize));
        }
        out
    }

    /// One row per time step: the sum of the codebook tables' rows.
    pub fn encode_audio(&self, clip: &AudioClip) -> Tensor {
        let d = self.text.cols;
        let mut out = Tensor::zeros(clip.len(), d);
        for t in 0..clip.len() {
            for k in 0..clip.codebooks() {
                let row = self.audio[k].row(clip.token(k, t).id as usize);
                for c in 0..d {
                    out.data[t * d + c] += row[c];
                }
            }
        }
        out
    }

    /// One row per temporal latent: a fixed projection of its channels.
    pub fn encode_video(&self, clip: &LatentClip) -> Tensor {
        let x = Tensor::from_vec(clip.len(), clip.dim(), clip.data().to_vec());
        matmul_plain(&x, &self.video)
    }
}

/// Task family tags for the synthetic understanding tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    Qa,
    Dialogue,
    Instruction,
}

/// One synthetic understanding task: a modality subset plus its exact
/// target directives.
#[derive(Debug, Clone)]
pub struct ConductorTask {
    pub text: Option<Vec<Token>>,
    pub audio: Option<AudioClip>,
    pub video: Option<LatentClip>,
    pub target: DirectivePair,
    pub family: TaskFamily,
}

impl ConductorTask {
    pub fn modality_count(&self) -> usize {
        self.text.is_some() as usize
            + self.audio.is_some() as usize
            + self.video.is_some() as usize
    }
}

/// Conductor model: trainable decoder stack over fixed stub encodings.
#[derive(Debug, Clone)]
pub struct Conductor {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stubs: StubEncoders,
}

impl Conductor {
    pub fn init(config: &ModelConfig) -> Conductor {
        Conductor {
            config: config.clone(),
            params: init_params(config, 0.08, true),
            stubs: StubEncoders::new(config),
        }
    }

    pub fn init_randomized(config: &ModelConfig, std: f64) -> Conductor {
        Conductor {
            config: config.clone(),
            params: init_params(config, std, false),
            stubs: StubEncoders::new(config),
        }
    }
}

fn init_params(config: &ModelConfig, std: f64, zero_out_proj: bool) -> ParamStore {
    let d = config.d_model;
    let mut rng = crate::rng::stream_rng(config.seed, "conductor-init", 0);
    let mut p = ParamStore::new();
    p.gaussian("embed.text", config.text_vocab, d, std, &mut rng);
    p.gaussian("embed.pos", config.max_seq, d, std, &mut rng);
    for l in 0..config.n_layers {
        init_block(&mut p, &format!("layer{l}.sa"), d, std, zero_out_proj, &mut rng);
    }
    if zero_out_proj {
        p.zeros("head.text.w", d, config.text_vocab);
    } else {
        p.gaussian("head.text.w", d, config.text_vocab, std, &mut rng);
    }
    p.zeros("head.text.b", 1, config.text_vocab);
    p
}

/// Builds the condition sequence for whatever modalities are present. With
/// both clip modalities present this matches `build_conductor_sequence`.
pub fn conductor_condition(
    text_len: usize,
    audio_len: Option<usize>,
    video_len: Option<usize>,
) -> Result<SegmentedSequence> {
    if text_len == 0 && audio_len.is_none() && video_len.is_none() {
        return Err(Error::LengthMismatch("at least one input modality required".into()));
    }
    let mut segments = Vec::new();
    let mut cursor = 0usize;
    if text_len > 0 {
        segments.push(Segment {
            kind: SegmentKind::Text,
            role: Role::Condition,
            clip_index: None,
            start: 0,
            len: text_len,
        });
        cursor = text_len;
    }
    if let Some(len) = audio_len {
        segments.push(Segment {
            kind: SegmentKind::AudioClip,
            role: Role::Condition,
            clip_index: Some(0),
            start: cursor,
            len,
        });
        cursor += len;
    }
    if let Some(len) = video_len {
        segments.push(Segment {
            kind: SegmentKind::VideoClip,
            role: Role::Condition,
            clip_index: Some(0),
            start: cursor,
            len,
        });
        cursor += len;
    }
    let _ = cursor;
    SegmentedSequence::from_segments(segments)
}

/// Stub-encoded condition rows for a task, in sequence order.
fn condition_rows(conductor: &Conductor, task: &ConductorTask) -> (Tensor, SegmentedSequence) {
    let d = conductor.config.d_model;
    let mut parts: Vec<Tensor> = Vec::new();
    let mut text_len = 0usize;
    if let Some(text) = &task.text {
        text_len = text.len();
        parts.push(conductor.stubs.encode_text(text));
    }
    let audio_len = task.audio.as_ref().map(|a| {
        let t = conductor.stubs.encode_audio(a);
        let n = t.rows;
        parts.push(t);
        n
    });
    let video_len = task.video.as_ref().map(|v| {
        let t = conductor.stubs.encode_video(v);
        let n = t.rows;
        parts.push(t);
        n
    });
    let seq = conductor_condition(text_len, audio_len, video_len).expect("non-empty task");
    let total: usize = parts.iter().map(|p| p.rows).sum();
    let mut rows = Tensor::zeros(total, d);
    let mut cursor = 0usize;
    for p in parts {
        rows.data[cursor..cursor + p.data.len()].copy_from_slice(&p.data);
        cursor += p.data.len();
    }
    (rows, seq)
}

/// Teacher-forced loss graph for one task; returns the loss node.
fn task_loss(
    tape: &mut Tape,
    conductor: &Conductor,
    bound: &crate::params::Bound,
    task: &ConductorTask,
) -> crate::tape::NodeId {
    let config = &conductor.config;
    let (cond, cond_seq) = condition_rows(conductor, task);
    let cond_len = cond.rows;
    let wire = crate::directive::encode_directives(&task.target);
    let wire_ids: Vec<usize> = wire.tokens().iter().map(|t| t.id as usize).collect();
    // inputs: condition rows + all wire tokens except the final m_eos
    let input_ids = &wire_ids[..wire_ids.len() - 1];
    let seq = cond_seq.with_text_generation(input_ids.len()).unwrap();
    let mask = derive_masks(&seq);

    let cond_node = tape.leaf(cond);
    let text_table = bound.id("embed.text");
    let gen = tape.gather(text_table, input_ids);
    let cat = tape.concat_rows(&[cond_node, gen]);
    let total = cond_len + input_ids.len();
    let pos_table = bound.id("embed.pos");
    let pos_ids: Vec<usize> = (0..total).collect();
    let pos = tape.gather(pos_table, &pos_ids);
    let mut x = tape.add(cat, pos);
    for l in 0..config.n_layers {
        let blk = bind_block(bound, &format!("layer{l}.sa"));
        x = sa_block(tape, x, blk, config.n_heads, Some(mask.clone()));
    }
    let w = bound.id("head.text.w");
    let b = bound.id("head.text.b");
    let logits = tape.matmul(x, w);
    let logits = tape.add_row(logits, b);
    // wire token i is predicted from row cond_len - 1 + i
    crate::creator::ar_loss(tape, logits, &wire_ids, cond_len - 1).expect("loss shape")
}

/// One optimizer step over a task batch; returns the mean loss.
pub fn conductor_train_step(
    conductor: &mut Conductor,
    batch: &[ConductorTask],
    opt: &mut Sgd,
) -> f64 {
    assert!(!batch.is_empty(), "empty batch");
    let mut grads = GradStore::new();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for task in batch {
        let mut tape = Tape::new();
        let bound = conductor.params.bind(&mut tape);
        let loss = task_loss(&mut tape, conductor, &bound, task);
        total += tape.scalar(loss);
        tape.backward(loss);
        bound.accumulate_grads(&tape, &mut grads, scale);
    }
    opt.step(&mut conductor.params, &grads);
    total * scale
}

/// Mean teacher-forced loss without updating parameters.
pub fn conductor_eval_loss(conductor: &Conductor, tasks: &[ConductorTask]) -> f64 {
    let mut total = 0.0;
    for task in tasks {
        let mut tape = Tape::new();
        let bound = conductor.params.bind(&mut tape);
        let loss = task_loss(&mut tape, conductor, &bound, task);
        total += tape.scalar(loss);
    }
    total / tasks.len() as f64
}

fn argmax_allowed(logits: &[f64], allowed: impl Fn(u32) -> bool) -> u32 {
    let mut best = None;
    for (id, &v) in logits.iter().enumerate() {
        if !allowed(id as u32) {
            continue;
        }
        match best {
            None => best = Some((id as u32, v)),
            Some((_, bv)) if v > bv => best = Some((id as u32, v)),
            _ => {}
        }
    }
    best.expect("constrained vocabulary is never empty").0
}

/// Greedy constrained decoding of a directive wire from a modality subset.
pub fn understand(
    conductor: &Conductor,
    text: Option<&[Token]>,
    audio: Option<&AudioClip>,
    video: Option<&LatentClip>,
) -> Result<crate::directive::DirectiveWire> {
    let config = &conductor.config;
    let task = ConductorTask {
        text: text.map(|t| t.to_vec()),
        audio: audio.cloned(),
        video: video.cloned(),
        target: DirectivePair::empty(),
        family: TaskFamily::Qa,
    };
    if task.modality_count() == 0 {
        return Err(Error::LengthMismatch("at least one input modality required".into()));
    }
    let (mut cond, cond_seq) = condition_rows(conductor, &task);
    let cond_len = cond.rows;
    if cond_len + config.decode_cap > config.max_seq {
        return Err(Error::DimensionMismatch(format!(
            "condition length {cond_len} plus decode cap exceeds max_seq {}",
            config.max_seq
        )));
    }
    // trained positions on top of the stub encodings
    let pos = conductor.params.get("embed.pos");
    for r in 0..cond_len {
        for c in 0..config.d_model {
            cond.data[r * config.d_model + c] += pos.get(r, c);
        }
    }
    let mask = derive_masks(&cond_seq);
    let layers: Vec<LayerSpec> = (0..config.n_layers)
        .map(|l| LayerSpec { sa: block_w(&conductor.params, &format!("layer{l}.sa")), ca: None })
        .collect();
    let mut dec = IncrementalDecoder::new(layers, config.n_heads, config.d_model);
    let hidden = dec.prefill(&cond, &mask);

    let head_w = conductor.params.get("head.text.w");
    let head_b = conductor.params.get("head.text.b");
    let logits_of = |h: &[f64]| -> Vec<f64> {
        let t = Tensor::from_vec(1, config.d_model, h.to_vec());
        let mut l = matmul_plain(&t, head_w);
        for (v, b) in l.data.iter_mut().zip(head_b.data.iter()) {
            *v += *b;
        }
        l.data
    };

    let emb = conductor.params.get("embed.text");
    let mut tokens: Vec<Token> = Vec::new();
    let mut hidden_row = hidden.row(cond_len - 1).to_vec();
    let mut seen_mbos = false;
    loop {
        if tokens.len() >= config.decode_cap {
            return Err(Error::DecodeOverflow(config.decode_cap));
        }
        let logits = logits_of(&hidden_row);
        let id = if seen_mbos {
            // content or m_eos; never pad, never a second m_bos
            argmax_allowed(&logits, |id| id == M_EOS || id as usize >= TEXT_CONTENT_START)
        } else {
            // content or m_bos; m_eos cannot come first
            argmax_allowed(&logits, |id| id == M_BOS || id as usize >= TEXT_CONTENT_START)
        };
        tokens.push(Token::text(id));
        if id == M_BOS {
            seen_mbos = true;
        }
        if id == M_EOS {
            break;
        }
        // feed the emitted token
        let mut row = emb.row(id as usize).to_vec();
        let p = cond_len + tokens.len() - 1;
        for c in 0..config.d_model {
            row[c] += pos.get(p, c);
        }
        hidden_row = dec.step(&row);
    }
    let _ = TEXT_PAD;
    let pair = crate::directive::decode_directives(&tokens)?;
    Ok(crate::directive::encode_directives(&pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AUDIO_CONTENT_START;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            codebooks: 2,
            text_vocab: 32,
            audio_vocab: 32,
            t_a: 6,
            latent_len: 3,
            latent_dim: 3,
            frames_per_latent: 4,
            ms_per_token: 10,
            fps: 100,
            f_v_len: 10,
            f_a_len: 4,
            diffusion_steps: 4,
            t_buckets: 4,
            max_seq: 128,
            decode_cap: 12,
            seed: 21,
        }
    }

    fn sample_task(config: &ModelConfig) -> ConductorTask {
        let audio = AudioClip::from_ids(&vec![
            vec![AUDIO_CONTENT_START as u32 + 1; config.t_a];
            config.codebooks
        ])
        .unwrap();
        let video = LatentClip::new(
            config.latent_len,
            config.latent_dim,
            vec![0.25; config.latent_len * config.latent_dim],
        )
        .unwrap();
        ConductorTask {
            text: Some(vec![Token::text(5), Token::text(6)]),
            audio: Some(audio),
            video: Some(video),
            target: DirectivePair::new(
                vec![Token::text(7), Token::text(8)],
                vec![Token::text(9)],
            )
            .unwrap(),
            family: TaskFamily::Dialogue,
        }
    }

    #[test]
    fn stub_encoders_are_deterministic() {
        let config = tiny_config();
        let a = StubEncoders::new(&config);
        let b = StubEncoders::new(&config);
        let task = sample_task(&config);
        assert_eq!(
            a.encode_audio(task.audio.as_ref().unwrap()),
            b.encode_audio(task.audio.as_ref().unwrap())
        );
        assert_eq!(a.encode_text(&[Token::text(3)]), b.encode_text(&[Token::text(3)]));
    }

    #[test]
    fn first_step_loss_is_near_log_vocab() {
        let config = tiny_config();
        let conductor = Conductor::init(&config);
        let task = sample_task(&config);
        let loss = conductor_eval_loss(&conductor, &[task]);
        let expect = (config.text_vocab as f64).ln();
        assert!(
            (loss - expect).abs() / expect < 0.10,
            "init loss {loss} should be within 10% of ln(vocab) = {expect}"
        );
    }

    #[test]
    fn memorizes_a_single_task() {
        let config = tiny_config();
        let mut conductor = Conductor::init(&config);
        let task = sample_task(&config);
        let mut opt = Sgd::new(0.4, 0.9);
        let first = conductor_train_step(&mut conductor, &[task.clone()], &mut opt);
        let mut last = first;
        for _ in 0..200 {
            last = conductor_train_step(&mut conductor, &[task.clone()], &mut opt);
            if last < 0.01 {
                break;
            }
        }
        assert!(last < 0.01, "memorization stalled at loss {last} (started {first})");
        // the memorized wire comes back из greedy decoding
        let wire = understand(
            &conductor,
            task.text.as_deref(),
            task.audio.as_ref(),
            task.video.as_ref(),
        )
        .unwrap();
        assert_eq!(
            crate::directive::decode_directives(wire.tokens()).unwrap(),
            task.target
        );
    }

    #[test]
    fn untrained_decode_parses_or_overflows() {
        let config = tiny_config();
        let conductor = Conductor::init_randomized(&config, 0.6);
        let task = sample_task(&config);
        match understand(&conductor, task.text.as_deref(), task.audio.as_ref(), task.video.as_ref())
        {
            Ok(wire) => {
                assert!(crate::directive::decode_directives(wire.tokens()).is_ok());
            }
            Err(Error::DecodeOverflow(cap)) => assert_eq!(cap, config.decode_cap),
            Err(other) => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn modality_dropout_still_yields_valid_wire() {
        let config = tiny_config();
        let conductor = Conductor::init(&config);
        let task = sample_task(&config);
        for (text, audio, video) in [
            (task.text.as_deref(), task.audio.as_ref(), None),
            (task.text.as_deref(), None, None),
            (None, task.audio.as_ref(), None),
            (None, None, task.video.as_ref()),
            (None, task.audio.as_ref(), task.video.as_ref()),
        ] {
            match understand(&conductor, text, audio, video) {
                Ok(wire) => {
                    assert!(crate::directive::decode_directives(wire.tokens()).is_ok())
                }
                Err(Error::DecodeOverflow(_)) => {}
                Err(other) => panic!("unexpected error: {other}"),
            }
        }
        assert!(matches!(
            understand(&conductor, None, None, None),
            Err(Error::LengthMismatch(_))
        ));
    }
}
