//! Evaluation reports: held-out losses, generation-time oracle scores, and
//! per-clip statistics, as JSON (schema-checked) plus a readable table.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::creator::Creator;
use crate::error::{Error, Result};
use crate::generate::{generate_long, ClipPrompt, GenOptions};
use crate::training::record_samples;
use crate::world::{boundary_discontinuity, oracle_consistency, WorldRecord, WorldSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub l_ar: f64,
    pub l_diff: f64,
    pub l_all: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipStats {
    pub clip: usize,
    pub mean_latent_norm: f64,
    pub mean_intra_step: f64,
    pub distinct_audio_tokens: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub records: usize,
    pub oracle_consistency: f64,
    /// Absent when records hold a single clip.
    pub boundary_discontinuity: Option<f64>,
    pub per_clip: Vec<ClipStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub fusion: bool,
    pub heldout: HeldoutMetrics,
    pub generation: GenerationMetrics,
}

/// Teacher-forced losses over the given records (seeded noise/timesteps).
pub fn eval_losses_on_records(
    creator: &Creator,
    records: &[WorldRecord],
    fusion: bool,
) -> Result<(f64, f64)> {
    use crate::creator::{clip_pair_losses, forward_clip_pair, sample_noise, ForwardOptions};
    use rand::Rng;
    let opts = ForwardOptions { fusion, video: true };
    let mut rng = crate::rng::stream_rng(creator.config.seed, "record-eval", 0);
    let mut sum_ar = 0.0;
    let mut sum_diff = 0.0;
    let mut n = 0usize;
    for record in records {
        for input in record_samples(record, true) {
            let t = 0.001 + 0.998 * rng.random::<f64>();
            let x0 = sample_noise(&creator.config, &mut rng);
            let mut tape = crate::tape::Tape::new();
            let bound = creator.params.bind(&mut tape);
            let graph = forward_clip_pair(&mut tape, creator, &bound, &input, t, Some(x0), opts)?;
            let (l_ar, l_diff, _) = clip_pair_losses(&mut tape, creator, &graph, &input.v_cur, t)?;
            sum_ar += tape.scalar(l_ar);
            sum_diff += l_diff.map_or(0.0, |node| tape.scalar(node));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::TooFewClips { got: 0, need: 1 });
    }
    Ok((sum_ar / n as f64, sum_diff / n as f64))
}

/// Generates streams from each record's directives and scores them with the
/// world oracles.
pub fn eval_generation(
    creator: &Creator,
    spec: &WorldSpec,
    config: &ModelConfig,
    records: &[WorldRecord],
    opts: &GenOptions,
) -> Result<GenerationMetrics> {
    if records.is_empty() {
        return Err(Error::TooFewClips { got: 0, need: 1 });
    }
    let n_clips = spec.clips_per_record;
    let mut consistency = 0.0;
    let mut disc_sum = 0.0;
    let mut disc_n = 0usize;
    let mut per_clip: Vec<(f64, f64, f64, usize)> = vec![(0.0, 0.0, 0.0, 0); n_clips];
    for record in records {
        let prompts =
            vec![ClipPrompt { directives: record.directives.clone() }; n_clips];
        let seed = crate::rng::derive_seed(config.seed, "eval-gen", record.labels.seed);
        let out = generate_long(creator, &prompts, n_clips, seed, None, opts)?;
        consistency += oracle_consistency(&out.audio, &out.video, spec, config)?;
        if n_clips >= 2 {
            disc_sum += boundary_discontinuity(&out.video)?;
            disc_n += 1;
        }
        for (j, (a, v)) in out.audio.iter().zip(out.video.iter()).enumerate() {
            let dim = v.dim() as f64;
            let norm: f64 = (0..v.len())
                .map(|l| v.latent(l).iter().map(|x| x * x).sum::<f64>() / dim)
                .sum::<f64>()
                / v.len() as f64;
            let step: f64 = if v.len() > 1 {
                (1..v.len())
                    .map(|l| {
                        v.latent(l)
                            .iter()
                            .zip(v.latent(l - 1))
                            .map(|(a2, b2)| (a2 - b2) * (a2 - b2))
                            .sum::<f64>()
                            / dim
                    })
                    .sum::<f64>()
                    / (v.len() - 1) as f64
            } else {
                0.0
            };
            let mut distinct = std::collections::BTreeSet::new();
            for row in a.rows() {
                for tok in row {
                    distinct.insert(tok.id);
                }
            }
            per_clip[j].0 += norm;
            per_clip[j].1 += step;
            per_clip[j].2 += distinct.len() as f64;
            per_clip[j].3 += 1;
        }
    }
    let n = records.len() as f64;
    Ok(GenerationMetrics {
        records: records.len(),
        oracle_consistency: consistency / n,
        boundary_discontinuity: (disc_n > 0).then(|| disc_sum / disc_n as f64),
        per_clip: per_clip
            .into_iter()
            .enumerate()
            .map(|(clip, (norm, step, distinct, cnt))| ClipStats {
                clip,
                mean_latent_norm: norm / cnt as f64,
                mean_intra_step: step / cnt as f64,
                distinct_audio_tokens: distinct / cnt as f64,
            })
            .collect(),
    })
}

/// Full evaluation over a dataset.
pub fn run_eval(
    creator: &Creator,
    spec: &WorldSpec,
    config: &ModelConfig,
    records: &[WorldRecord],
    config_hash: &str,
    opts: &GenOptions,
) -> Result<EvalReport> {
    let (l_ar, l_diff) = eval_losses_on_records(creator, records, opts.fusion)?;
    let generation = eval_generation(creator, spec, config, records, opts)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "eval".into(),
        config_hash: config_hash.into(),
        fusion: opts.fusion,
        heldout: HeldoutMetrics { l_ar, l_diff, l_all: l_ar + l_diff },
        generation,
    })
}

/// Structural validation of a report JSON value against the documented
/// schema (required fields and types).
pub fn validate_report_schema(value: &serde_json::Value) -> Result<()> {
    let obj = value.as_object().ok_or_else(|| Error::Format("report must be an object".into()))?;
    let need = |key: &str| -> Result<&serde_json::Value> {
        obj.get(key).ok_or_else(|| Error::Format(format!("report missing `{key}`")))
    };
    if need("schema_version")?.as_u64() != Some(REPORT_SCHEMA_VERSION as u64) {
        return Err(Error::Format("unsupported report schema_version".into()));
    }
    if need("kind")?.as_str() != Some("eval") {
        return Err(Error::Format("report kind must be `eval`".into()));
    }
    if !need("config_hash")?.is_string() || !need("fusion")?.is_boolean() {
        return Err(Error::Format("bad config_hash/fusion field".into()));
    }
    let heldout = need("heldout")?
        .as_object()
        .ok_or_else(|| Error::Format("heldout must be an object".into()))?;
    for key in ["l_ar", "l_diff", "l_all"] {
        if !heldout.get(key).map_or(false, |v| v.is_number()) {
            return Err(Error::Format(format!("heldout missing numeric `{key}`")));
        }
    }
    let generation = need("generation")?
        .as_object()
        .ok_or_else(|| Error::Format("generation must be an object".into()))?;
    if !generation.get("records").map_or(false, |v| v.is_u64()) {
        return Err(Error::Format("generation missing `records`".into()));
    }
    if !generation.get("oracle_consistency").map_or(false, |v| v.is_number()) {
        return Err(Error::Format("generation missing `oracle_consistency`".into()));
    }
    match generation.get("boundary_discontinuity") {
        Some(v) if v.is_number() || v.is_null() => {}
        _ => return Err(Error::Format("generation missing `boundary_discontinuity`".into())),
    }
    let per_clip = generation
        .get("per_clip")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Format("generation missing `per_clip` array".into()))?;
    for entry in per_clip {
        let e = entry.as_object().ok_or_else(|| Error::Format("per_clip entry".into()))?;
        for key in ["clip", "mean_latent_norm", "mean_intra_step", "distinct_audio_tokens"] {
            if !e.get(key).map_or(false, |v| v.is_number()) {
                return Err(Error::Format(format!("per_clip entry missing `{key}`")));
            }
        }
    }
    Ok(())
}

/// Human-readable rendering of a report.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "eval report (schema v{}, fusion {})\n",
        report.schema_version, report.fusion
    ));
    out.push_str(&format!("config hash: {}\n", report.config_hash));
    out.push_str(&format!(
        "held-out     l_ar {:>10.6}   l_diff {:>10.6}   l_all {:>10.6}\n",
        report.heldout.l_ar, report.heldout.l_diff, report.heldout.l_all
    ));
    out.push_str(&format!(
        "generation   consistency {:>8.4}   discontinuity {}   over {} record(s)\n",
        report.generation.oracle_consistency,
        report
            .generation
            .boundary_discontinuity
            .map_or("     n/a".to_string(), |v| format!("{v:>8.4}")),
        report.generation.records
    ));
    out.push_str("  clip   latent-norm   intra-step   distinct-tokens\n");
    for c in &report.generation.per_clip {
        out.push_str(&format!(
            "  {:>4}   {:>11.4}   {:>10.4}   {:>15.2}\n",
            c.clip, c.mean_latent_norm, c.mean_intra_step, c.distinct_audio_tokens
        ));
    }
    out
}
