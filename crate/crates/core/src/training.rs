//! Staged training loops and held-out evaluation.
//!
//! Stage one trains the conductor on synthetic understanding tasks. Stage
//! two trains the creator's audio path alone (speech directives plus
//! previous-audio context, no video stream). Stage three trains the full
//! hybrid end-to-end. Batch gradients accumulate sequentially in sample
//! order and parameter updates apply in name order, so every run is exactly
//! reproducible from its seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Stage;
use crate::conductor::{conductor_train_step, Conductor};
use crate::config::ModelConfig;
use crate::creator::{
    clip_pair_losses, forward_clip_pair, sample_noise, ClipPairInput, Creator, ForwardOptions,
};
use crate::error::Result;
use crate::params::{GradStore, Sgd};
use crate::tape::Tape;
use crate::world::{gen_conductor_task, gen_record, WorldRecord, WorldSpec};

/// Per-step scalars for the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: Stage,
    pub l_ar: f64,
    pub l_diff: f64,
    pub l_all: f64,
}

/// Record seeds are split so held-out data never appears in training.
pub const HELDOUT_SEED_BASE: u64 = 1_000_000;

/// Teacher-forced clip-pair samples of one record, one per clip.
pub fn record_samples(record: &WorldRecord, keep_video_history: bool) -> Vec<ClipPairInput> {
    let mut out = Vec::with_capacity(record.audio.len());
    for j in 0..record.audio.len() {
        let (a_prev, v_prev) = if j > 0 {
            (
                Some(record.audio[j - 1].clone()),
                keep_video_history.then(|| record.video[j - 1].clone()),
            )
        } else {
            (None, None)
        };
        out.push(ClipPairInput {
            speech: record.directives.speech.clone(),
            motion: record.directives.motion.clone(),
            a_prev,
            v_prev,
            a_cur: record.audio[j].clone(),
            v_cur: record.video[j].clone(),
        });
    }
    out
}

/// Stage-one training: the conductor memorizes the synthetic task mapping.
pub fn train_conductor(
    conductor: &mut Conductor,
    spec: &WorldSpec,
    config: &ModelConfig,
    steps: usize,
    batch: usize,
    opt: &mut Sgd,
    mut on_step: impl FnMut(StepMetrics),
) {
    for step in 0..steps {
        let tasks: Vec<_> = (0..batch)
            .map(|b| gen_conductor_task(spec, config, (step * batch + b) as u64))
            .collect();
        let loss = conductor_train_step(conductor, &tasks, opt);
        on_step(StepMetrics { step, stage: Stage::Conductor, l_ar: loss, l_diff: 0.0, l_all: loss });
    }
}

/// One creator optimizer step over a batch of clip-pair samples; returns
/// `(l_ar, l_diff, l_all)` batch means.
pub fn creator_train_step(
    creator: &mut Creator,
    batch: &[ClipPairInput],
    opts: ForwardOptions,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    assert!(!batch.is_empty());
    let mut grads = GradStore::new();
    let scale = 1.0 / batch.len() as f64;
    let mut sum_ar = 0.0;
    let mut sum_diff = 0.0;
    let mut sum_all = 0.0;
    for input in batch {
        let t = if opts.video { 0.001 + 0.998 * rng.random::<f64>() } else { 0.5 };
        let x0 = opts.video.then(|| sample_noise(&creator.config, rng));
        let mut tape = Tape::new();
        let bound = creator.params.bind(&mut tape);
        let graph = forward_clip_pair(&mut tape, creator, &bound, input, t, x0, opts)?;
        let (l_ar, l_diff, l_all) = clip_pair_losses(&mut tape, creator, &graph, &input.v_cur, t)?;
        sum_ar += tape.scalar(l_ar);
        sum_diff += l_diff.map_or(0.0, |n| tape.scalar(n));
        sum_all += tape.scalar(l_all);
        tape.backward(l_all);
        bound.accumulate_grads(&tape, &mut grads, scale);
    }
    opt.step(&mut creator.params, &grads);
    Ok((sum_ar * scale, sum_diff * scale, sum_all * scale))
}

/// Stage-two or stage-three training over freshly generated records.
pub fn train_creator(
    creator: &mut Creator,
    spec: &WorldSpec,
    config: &ModelConfig,
    stage: Stage,
    fusion: bool,
    steps: usize,
    batch: usize,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(StepMetrics),
) -> Result<()> {
    assert!(stage == Stage::AudioAr || stage == Stage::Joint);
    let opts = ForwardOptions { fusion, video: stage == Stage::Joint };
    for step in 0..steps {
        let mut inputs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let seed = rng.random_range(0..HELDOUT_SEED_BASE);
            let record = gen_record(spec, config, seed);
            let samples = record_samples(&record, opts.video);
            let j = rng.random_range(0..samples.len());
            inputs.push(samples[j].clone());
        }
        let (l_ar, l_diff, l_all) = creator_train_step(creator, &inputs, opts, opt, rng)?;
        on_step(StepMetrics { step, stage, l_ar, l_diff, l_all });
    }
    Ok(())
}

/// Deterministic held-out teacher-forced losses: `(l_ar, l_diff)` means over
/// records never seen in training, with seeded timesteps and noise.
pub fn eval_creator_heldout(
    creator: &Creator,
    spec: &WorldSpec,
    config: &ModelConfig,
    n_records: usize,
    fusion: bool,
) -> Result<(f64, f64)> {
    let opts = ForwardOptions { fusion, video: true };
    let mut rng = crate::rng::stream_rng(spec.seed, "heldout-eval", 0);
    let mut sum_ar = 0.0;
    let mut sum_diff = 0.0;
    let mut n = 0usize;
    for i in 0..n_records {
        let record = gen_record(spec, config, HELDOUT_SEED_BASE + i as u64);
        for input in record_samples(&record, true) {
            let t = 0.001 + 0.998 * rng.random::<f64>();
            let x0 = sample_noise(&creator.config, &mut rng);
            let mut tape = Tape::new();
            let bound = creator.params.bind(&mut tape);
            let graph = forward_clip_pair(&mut tape, creator, &bound, &input, t, Some(x0), opts)?;
            let (l_ar, l_diff, _) = clip_pair_losses(&mut tape, creator, &graph, &input.v_cur, t)?;
            sum_ar += tape.scalar(l_ar);
            sum_diff += l_diff.map_or(0.0, |node| tape.scalar(node));
            n += 1;
        }
    }
    Ok((sum_ar / n as f64, sum_diff / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Sgd;

    fn fast_config() -> ModelConfig {
        ModelConfig { max_seq: 128, decode_cap: 16, ..ModelConfig::toy() }
    }

    fn fast_spec() -> WorldSpec {
        WorldSpec { clips_per_record: 2, ..WorldSpec::desk_default() }
    }

    #[test]
    fn audio_stage_reduces_training_loss() {
        let config = fast_config();
        let spec = fast_spec();
        let mut creator = Creator::init(&config);
        let mut opt = Sgd::new(0.08, 0.9);
        let mut rng = crate::rng::stream_rng(1, "train-test", 0);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        train_creator(
            &mut creator,
            &spec,
            &config,
            Stage::AudioAr,
            true,
            60,
            4,
            &mut opt,
            &mut rng,
            |m| {
                if m.step == 0 {
                    first = m.l_ar;
                }
                last = m.l_ar;
            },
        )
        .unwrap();
        assert!(
            last < first * 0.8,
            "audio loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let config = fast_config();
        let spec = fast_spec();
        let run = || {
            let mut creator = Creator::init(&config);
            let mut opt = Sgd::new(0.2, 0.9);
            let mut rng = crate::rng::stream_rng(2, "train-repro", 0);
            let mut trace = Vec::new();
            train_creator(
                &mut creator,
                &spec,
                &config,
                Stage::Joint,
                true,
                5,
                2,
                &mut opt,
                &mut rng,
                |m| trace.push((m.l_ar, m.l_diff, m.l_all)),
            )
            .unwrap();
            (trace, creator.params)
        };
        let (t1, p1) = run();
        let (t2, p2) = run();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn logged_total_recomposes_from_parts() {
        let config = fast_config();
        let spec = fast_spec();
        let mut creator = Creator::init(&config);
        let mut opt = Sgd::new(0.1, 0.0);
        let mut rng = crate::rng::stream_rng(3, "train-sum", 0);
        train_creator(
            &mut creator,
            &spec,
            &config,
            Stage::Joint,
            true,
            4,
            2,
            &mut opt,
            &mut rng,
            |m| {
                assert!((m.l_all - (m.l_ar + m.l_diff)).abs() < 1e-9);
            },
        )
        .unwrap();
    }
}
