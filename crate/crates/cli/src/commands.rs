//! Command implementations behind the CLI: staged training with checkpoint
//! ordering, deterministic generation to stream files, dataset dumping,
//! evaluation reports, the paired fusion ablation, and mask inspection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use duet_core::checkpoint::{
    check_config_compat, load_checkpoint, save_checkpoint, Checkpoint, Component, RngState, Stage,
};
use duet_core::conductor::Conductor;
use duet_core::creator::Creator;
use duet_core::directive::DirectiveWire;
use duet_core::generate::{
    generate_long, read_streams, write_streams, ClipPrompt, GenOptions, GeneratedStreams,
};
use duet_core::params::Sgd;
use duet_core::report::{render_table, run_eval, EvalReport};
use duet_core::sequence::{build_conductor_sequence, build_creator_sequence, derive_masks};
use duet_core::training::{
    eval_creator_heldout, train_conductor, train_creator, StepMetrics, HELDOUT_SEED_BASE,
};
use duet_core::types::{AudioClip, DirectivePair, LatentClip, Token, AUDIO_CONTENT_START};
use duet_core::world::{gen_record, read_dataset, write_dataset, WorldRecord};
use duet_core::{Error, Result};
use sha2::{Digest, Sha256};

use crate::run_config::RunConfig;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn append_jsonl(path: &Path, line: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn metrics_line(m: &StepMetrics) -> serde_json::Value {
    serde_json::json!({
        "kind": "train_step",
        "step": m.step,
        "stage": m.stage.as_str(),
        "l_ar": m.l_ar,
        "l_diff": m.l_diff,
        "l_all": m.l_all,
    })
}

pub fn checkpoint_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Conductor => "conductor.ckpt",
        Stage::AudioAr => "creator_audio_ar.ckpt",
        Stage::Joint => "creator_joint.ckpt",
    }
}

/// Outcome of a training run, for smoke checks and chaining.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub first: Option<StepMetrics>,
    pub last: Option<StepMetrics>,
}

fn save_stage_checkpoint(
    cfg: &RunConfig,
    component: Component,
    stage: Stage,
    params: &duet_core::params::ParamStore,
    rng: &duet_core::rng::ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    ensure_parent(path)?;
    let ckpt = Checkpoint {
        component,
        stage,
        config: cfg.model.clone(),
        config_hash: cfg.hash(),
        rng: RngState::capture(rng),
        params: params.clone(),
    };
    let mut f = fs::File::create(path)?;
    save_checkpoint(&mut f, &ckpt)
}

fn load_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::Format(format!("cannot open checkpoint {}: {e}", path.display())))?;
    load_checkpoint(&mut f)
}

/// Stage-ordered training. `resume` continues a same-stage checkpoint after
/// validating the run-config hash.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_path = cfg.checkpoint_dir.join(checkpoint_name(cfg.stage));
    let mut first: Option<StepMetrics> = None;
    let mut last: Option<StepMetrics> = None;
    let report = cfg.report.clone();
    let mut lines: Vec<serde_json::Value> = Vec::new();

    let resume_ckpt = match resume {
        Some(path) => {
            let ckpt = load_checkpoint_file(path)?;
            if ckpt.config_hash != cfg.hash() {
                return Err(Error::ConfigMismatch(format!(
                    "resume checkpoint {} was produced under a different run config",
                    path.display()
                )));
            }
            if ckpt.stage != cfg.stage {
                return Err(Error::StageOrderViolation(format!(
                    "resume checkpoint holds stage {}, config requests {}",
                    ckpt.stage.as_str(),
                    cfg.stage.as_str()
                )));
            }
            Some(ckpt)
        }
        None => None,
    };

    match cfg.stage {
        Stage::Conductor => {
            let mut conductor = Conductor::init(&cfg.model);
            let rng = match &resume_ckpt {
                Some(ckpt) => {
                    check_config_compat(ckpt, &cfg.model)?;
                    conductor.params = ckpt.params.clone();
                    ckpt.rng.restore()
                }
                None => duet_core::rng::stream_rng(cfg.model.seed, "train-conductor", 0),
            };
            let mut opt = Sgd::new(cfg.lr, cfg.momentum);
            train_conductor(
                &mut conductor,
                &cfg.world,
                &cfg.model,
                cfg.steps,
                cfg.batch,
                &mut opt,
                |m| {
                    if first.is_none() {
                        first = Some(m);
                    }
                    last = Some(m);
                    lines.push(metrics_line(&m));
                },
            );
            save_stage_checkpoint(
                cfg,
                Component::Conductor,
                Stage::Conductor,
                &conductor.params,
                &rng,
                &out_path,
            )?;
        }
        stage @ (Stage::AudioAr | Stage::Joint) => {
            let mut creator = Creator::init(&cfg.model);
            let mut rng = duet_core::rng::stream_rng(
                cfg.model.seed,
                if stage == Stage::AudioAr { "train-audio-ar" } else { "train-joint" },
                0,
            );
            if let Some(ckpt) = &resume_ckpt {
                check_config_compat(ckpt, &cfg.model)?;
                creator.params = ckpt.params.clone();
                rng = ckpt.rng.restore();
            } else if stage == Stage::Joint {
                // stage three continues from the audio-only checkpoint
                let prev = cfg.checkpoint_dir.join(checkpoint_name(Stage::AudioAr));
                if !prev.exists() {
                    return Err(Error::StageOrderViolation(format!(
                        "stage joint requires an audio_ar checkpoint at {}",
                        prev.display()
                    )));
                }
                let ckpt = load_checkpoint_file(&prev)?;
                if ckpt.stage < Stage::AudioAr || ckpt.component != Component::Creator {
                    return Err(Error::StageOrderViolation(
                        "joint stage needs a creator audio_ar checkpoint".into(),
                    ));
                }
                check_config_compat(&ckpt, &cfg.model)?;
                creator.params = ckpt.params.clone();
            }
            let mut opt = Sgd::new(cfg.lr, cfg.momentum);
            let save_every = cfg.save_every;
            let mut step_rng = rng.clone();
            train_creator(
                &mut creator,
                &cfg.world,
                &cfg.model,
                stage,
                cfg.fusion,
                cfg.steps,
                cfg.batch,
                &mut opt,
                &mut step_rng,
                |m| {
                    if first.is_none() {
                        first = Some(m);
                    }
                    last = Some(m);
                    lines.push(metrics_line(&m));
                },
            )?;
            rng = step_rng;
            if save_every > 0 {
                // interval snapshots share the final state naming scheme
                let interim = cfg
                    .checkpoint_dir
                    .join(format!("{}.step{}", checkpoint_name(stage), cfg.steps));
                save_stage_checkpoint(cfg, Component::Creator, stage, &creator.params, &rng, &interim)?;
            }
            save_stage_checkpoint(cfg, Component::Creator, stage, &creator.params, &rng, &out_path)?;
        }
    }
    for line in &lines {
        append_jsonl(&report, line)?;
    }
    Ok(TrainOutcome { checkpoint: out_path, first, last })
}

/// Parses a prompts file: one directive wire dump per line.
pub fn parse_prompts(path: &Path, n_clips: usize) -> Result<Vec<ClipPrompt>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read prompts {}: {e}", path.display())))?;
    let mut prompts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let wire = DirectiveWire::parse_dump(line)
            .map_err(|e| Error::Format(format!("prompts line {}: {e}", i + 1)))?;
        let directives = duet_core::directive::decode_directives(wire.tokens())?;
        prompts.push(ClipPrompt { directives });
    }
    if prompts.len() != n_clips {
        return Err(Error::LengthMismatch(format!(
            "prompts file holds {} prompt(s), n_clips is {n_clips}",
            prompts.len()
        )));
    }
    Ok(prompts)
}

fn prompt_hash(prompt: &ClipPrompt) -> String {
    let wire = duet_core::directive::encode_directives(&prompt.directives);
    let digest = Sha256::digest(wire.dump().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates streams from a checkpoint and writes `<out>.avst` plus
/// `<out>.manifest.jsonl`.
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    prompts_path: &Path,
    n_clips: usize,
    seed: u64,
    reference: Option<&Path>,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let ckpt = load_checkpoint_file(checkpoint)?;
    if ckpt.component != Component::Creator {
        return Err(Error::ConfigMismatch("generate needs a creator checkpoint".into()));
    }
    check_config_compat(&ckpt, &cfg.model)?;
    let creator = Creator { config: ckpt.config.clone(), params: ckpt.params.clone() };
    let prompts = parse_prompts(prompts_path, n_clips)?;
    let reference_latent: Option<Vec<f64>> = match reference {
        Some(path) => {
            let mut f = fs::File::open(path)
                .map_err(|e| Error::Format(format!("cannot open reference {}: {e}", path.display())))?;
            let clip = duet_core::wire::read_latent_clip(&mut f)?;
            if clip.dim() != cfg.model.latent_dim {
                return Err(Error::ShapeMismatch(format!(
                    "reference latent has {} channels, model expects {}",
                    clip.dim(),
                    cfg.model.latent_dim
                )));
            }
            Some(clip.latent(0).to_vec())
        }
        None => None,
    };
    let opts = GenOptions { fusion: cfg.fusion, history: cfg.history, top_k: None };
    let streams = generate_long(
        &creator,
        &prompts,
        n_clips,
        seed,
        reference_latent.as_deref(),
        &opts,
    )?;

    let stream_path = out.with_extension("avst");
    let manifest_path = out.with_extension("manifest.jsonl");
    ensure_parent(&stream_path)?;
    let mut f = fs::File::create(&stream_path)?;
    write_streams(&mut f, &streams)?;
    // fresh manifest per invocation so repeated runs are byte-identical
    let mut mf = fs::File::create(&manifest_path)?;
    for (j, prompt) in prompts.iter().enumerate() {
        let line = serde_json::json!({
            "clip_index": j,
            "prompt_hash": prompt_hash(prompt),
            "seed": seed,
            "audio_len": streams.audio[j].len(),
            "codebooks": streams.audio[j].codebooks(),
            "video_len": streams.video[j].len(),
        });
        writeln!(mf, "{line}")?;
    }
    Ok((stream_path, manifest_path))
}

/// Loads a stream file back (used by tests and inspection).
pub fn load_streams(path: &Path) -> Result<GeneratedStreams> {
    let mut f = fs::File::open(path)?;
    read_streams(&mut f)
}

/// Evaluates a checkpoint against a dataset; appends the report JSON line
/// and returns the report.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<EvalReport> {
    let ckpt = load_checkpoint_file(checkpoint)?;
    if ckpt.component != Component::Creator {
        return Err(Error::ConfigMismatch("eval needs a creator checkpoint".into()));
    }
    let mut f = fs::File::open(dataset)
        .map_err(|e| Error::Format(format!("cannot open dataset {}: {e}", dataset.display())))?;
    let (spec, data_config, records) = read_dataset(&mut f)?;
    if data_config != ckpt.config {
        return Err(Error::ConfigMismatch(
            "dataset was generated under a different model config".into(),
        ));
    }
    let creator = Creator { config: ckpt.config.clone(), params: ckpt.params.clone() };
    let opts = GenOptions { fusion: cfg.fusion, history: cfg.history, top_k: None };
    let report = run_eval(&creator, &spec, &ckpt.config, &records, &cfg.hash_hex(), &opts)?;
    let json = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
    duet_core::report::validate_report_schema(&json)?;
    append_jsonl(&cfg.report, &json)?;
    Ok(report)
}

/// One arm of the ablation: stage-two then stage-three training, then
/// held-out losses and generation oracle scores.
fn ablate_arm(cfg: &RunConfig, fusion: bool, seed_offset: u64) -> Result<(f64, f64, f64, f64)> {
    let mut arm = cfg.clone();
    arm.model.seed = cfg.model.seed + seed_offset;
    // identical data across arms: the world seed stays fixed
    let mut creator = Creator::init(&arm.model);
    let mut opt = Sgd::new(arm.lr, arm.momentum);
    let mut rng = duet_core::rng::stream_rng(arm.model.seed, "ablate-audio", 0);
    train_creator(
        &mut creator,
        &arm.world,
        &arm.model,
        Stage::AudioAr,
        fusion,
        arm.steps,
        arm.batch,
        &mut opt,
        &mut rng,
        |_| {},
    )?;
    let mut opt = Sgd::new(arm.lr, arm.momentum);
    let mut rng = duet_core::rng::stream_rng(arm.model.seed, "ablate-joint", 0);
    train_creator(
        &mut creator,
        &arm.world,
        &arm.model,
        Stage::Joint,
        fusion,
        arm.steps,
        arm.batch,
        &mut opt,
        &mut rng,
        |_| {},
    )?;
    let (l_ar, l_diff) = eval_creator_heldout(&creator, &arm.world, &arm.model, 4, fusion)?;
    let records: Vec<WorldRecord> = (0..arm.eval_records)
        .map(|i| gen_record(&arm.world, &arm.model, HELDOUT_SEED_BASE + i as u64))
        .collect();
    let opts = GenOptions { fusion, history: true, top_k: None };
    let gen = duet_core::report::eval_generation(&creator, &arm.world, &arm.model, &records, &opts)?;
    Ok((
        gen.oracle_consistency,
        gen.boundary_discontinuity.unwrap_or(0.0),
        l_ar,
        l_diff,
    ))
}

/// Paired fusion ablation across seeds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblatePair {
    pub seed: u64,
    pub on_consistency: f64,
    pub off_consistency: f64,
    pub on_discontinuity: f64,
    pub off_discontinuity: f64,
    pub on_l_ar: f64,
    pub off_l_ar: f64,
    pub on_l_diff: f64,
    pub off_l_diff: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblateSummary {
    pub pairs: Vec<AblatePair>,
    pub mean_on_consistency: f64,
    pub mean_off_consistency: f64,
    pub mean_on_discontinuity: f64,
    pub mean_off_discontinuity: f64,
}

/// Trains fusion-on and fusion-off arms under identical data, seeds, and
/// step budgets, per seed; reports the paired oracle scores.
pub fn cmd_ablate(cfg: &RunConfig, n_seeds: usize) -> Result<AblateSummary> {
    let mut pairs = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let offset = s as u64 * 101;
        let (on_c, on_d, on_ar, on_diff) = ablate_arm(cfg, true, offset)?;
        let (off_c, off_d, off_ar, off_diff) = ablate_arm(cfg, false, offset)?;
        pairs.push(AblatePair {
            seed: cfg.model.seed + offset,
            on_consistency: on_c,
            off_consistency: off_c,
            on_discontinuity: on_d,
            off_discontinuity: off_d,
            on_l_ar: on_ar,
            off_l_ar: off_ar,
            on_l_diff: on_diff,
            off_l_diff: off_diff,
        });
    }
    let n = pairs.len() as f64;
    let summary = AblateSummary {
        mean_on_consistency: pairs.iter().map(|p| p.on_consistency).sum::<f64>() / n,
        mean_off_consistency: pairs.iter().map(|p| p.off_consistency).sum::<f64>() / n,
        mean_on_discontinuity: pairs.iter().map(|p| p.on_discontinuity).sum::<f64>() / n,
        mean_off_discontinuity: pairs.iter().map(|p| p.off_discontinuity).sum::<f64>() / n,
        pairs,
    };
    let json = serde_json::json!({
        "kind": "ablate",
        "summary": serde_json::to_value(&summary).map_err(|e| Error::Format(e.to_string()))?,
    });
    append_jsonl(&cfg.report, &json)?;
    Ok(summary)
}

/// Renders the attention mask of a constructed sequence as a PBM grid.
pub fn cmd_inspect_mask(
    cfg: &RunConfig,
    kind: &str,
    text_len: usize,
    n_clips: usize,
    gen_len: usize,
) -> Result<String> {
    let audio: Vec<AudioClip> = (0..n_clips)
        .map(|_| {
            AudioClip::from_ids(&vec![
                vec![AUDIO_CONTENT_START as u32; cfg.model.t_a];
                cfg.model.codebooks
            ])
            .unwrap()
        })
        .collect();
    let video: Vec<LatentClip> = (0..n_clips)
        .map(|_| LatentClip::zeros(cfg.model.latent_len, cfg.model.latent_dim))
        .collect();
    let seq = match kind {
        "conductor" => {
            let text: Vec<Token> = (0..text_len).map(|_| Token::text(3)).collect();
            let base = build_conductor_sequence(&text, &audio, &video)?;
            base.with_text_generation(gen_len)?
        }
        "creator" => {
            let speech: Vec<Token> = (0..text_len).map(|_| Token::text(3)).collect();
            let motion: Vec<Token> = (0..text_len).map(|_| Token::text(4)).collect();
            let dir = DirectivePair::new(speech, motion)
                .map_err(|e| Error::Format(e.to_string()))?;
            build_creator_sequence(&dir, &audio, &video)?
        }
        other => return Err(Error::Format(format!("unknown sequence kind `{other}`"))),
    };
    Ok(derive_masks(&seq).to_pbm())
}

/// Generates a dataset file plus its regeneration manifest; optionally
/// returns a text dump of the records.
pub fn cmd_dump_dataset(
    cfg: &RunConfig,
    out: &Path,
    n_records: usize,
    dump: bool,
) -> Result<Option<String>> {
    let records: Vec<WorldRecord> =
        (0..n_records).map(|i| gen_record(&cfg.world, &cfg.model, i as u64)).collect();
    ensure_parent(out)?;
    let mut f = fs::File::create(out)?;
    write_dataset(&mut f, &cfg.world, &cfg.model, &records)?;
    let manifest_path = out.with_extension("manifest.jsonl");
    let mut mf = fs::File::create(&manifest_path)?;
    for (i, rec) in records.iter().enumerate() {
        let line = serde_json::json!({
            "index": i,
            "seed": rec.labels.seed,
            "family": rec.labels.family,
            "identity": rec.labels.identity,
            "has_motion": rec.labels.has_motion,
            "clips": rec.audio.len(),
        });
        writeln!(mf, "{line}")?;
    }
    if dump {
        let mut text = String::new();
        for (i, rec) in records.iter().enumerate() {
            let wire = duet_core::directive::encode_directives(&rec.directives);
            text.push_str(&format!(
                "record {i}: {} | clips {} | family {} identity {}\n",
                wire.dump(),
                rec.audio.len(),
                rec.labels.family,
                rec.labels.identity
            ));
        }
        return Ok(Some(text));
    }
    Ok(None)
}

pub fn render_report(report: &EvalReport) -> String {
    render_table(report)
}
