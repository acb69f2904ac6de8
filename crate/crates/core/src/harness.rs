//! Experiment harness: config files, dataset export, the spatial score,
//! the three ablations (attention sharing, injection mode, depth-loss
//! weight) with directional verdicts, and run reports.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{InjectMode, ModelConfig, ShareStrategy};
use crate::diffusion::sample;
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Rng};
use crate::scenegen::{
    derive_relations, gen_scene, render, tokenize, visible_masks, CurriculumPhase, Relation,
    TaskMix, TaskTag,
};
use crate::trainer::{TrainLog, TrainParams, Trainer};

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Experiment configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Held-out scenes scored per sampled image.
    #[serde(default = "default_score_scenes")]
    pub score_scenes: usize,
    /// Weight values swept by the lambda ablation.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f32>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_score_scenes() -> usize {
    32
}

fn default_lambdas() -> Vec<f32> {
    vec![0.0, 0.1, 0.5, 1.0, 2.0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::desk(),
            train: TrainParams::default(),
            seeds: default_seeds(),
            score_scenes: default_score_scenes(),
            lambdas: default_lambdas(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} != {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.train.steps_s1 == 0 && self.train.steps_s2 == 0 {
            return Err(Error::Config("step budgets must be positive".into()));
        }
        self.model.validate()
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Spatial score

/// Mean absolute per-channel deviation allowed between a sampled image and
/// the flat-shaded ideal inside a primitive's visible region.
pub const PRESENCE_TOL: f32 = 0.2;

/// Fraction of held-out scenes whose sampled image satisfies every prompt
/// constraint: each primitive present (template match on the flat-shaded
/// render) and each depth-order clause consistent with the model's own
/// derived depth map. Deterministic given (store, cfg, seed).
pub fn spatial_score(
    store: &ParamStore,
    cfg: &ModelConfig,
    seed: u64,
    scenes: usize,
) -> Result<f32> {
    let scene_rng = Rng::new(seed).stream("score-scenes");
    let mut satisfied = 0usize;
    for i in 0..scenes {
        let mut rng = scene_rng.fork(i as u64);
        let pair = gen_scene(&mut rng, &CurriculumPhase::coarse(), TaskTag::T2i);
        let spec = pair.target;
        let prompt = tokenize(&spec);
        let mut noise_rng = Rng::new(seed).stream("score-noise").fork(i as u64);
        let out = sample(&prompt, None, store, cfg, &mut noise_rng)?;
        let (ideal, _, _) = render(&spec, cfg.height, cfg.width);
        let masks = visible_masks(&spec, cfg.height, cfg.width);
        let sampled = out.image.values();
        let ideal_v = ideal.values();
        let depth = out.depth.values();
        let mut ok = true;
        // Presence: sampled pixels inside each primitive's visible region
        // stay near the primitive's shade.
        for mask in &masks {
            let count = mask.iter().filter(|&&b| b).count();
            if count == 0 {
                continue; // fully occluded; nothing to check
            }
            let mut err = 0.0f64;
            for (px, &vis) in mask.iter().enumerate() {
                if vis {
                    for ch in 0..3 {
                        err += (sampled[px * 3 + ch] - ideal_v[px * 3 + ch]).abs() as f64;
                    }
                }
            }
            if (err / (3 * count) as f64) as f32 > PRESENCE_TOL {
                ok = false;
                break;
            }
        }
        // Depth order: the derived map must rank visible regions the way
        // the prompt's in-front-of clauses claim.
        if ok {
            for clause in derive_relations(&spec) {
                if clause.rel != Relation::InFrontOf {
                    continue;
                }
                let (ma, mb) = (&masks[clause.a], &masks[clause.b]);
                let med_a = masked_median(&depth, ma);
                let med_b = masked_median(&depth, mb);
                if let (Some(a), Some(b)) = (med_a, med_b) {
                    if a >= b {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if ok {
            satisfied += 1;
        }
    }
    Ok(satisfied as f32 / scenes as f32)
}

fn masked_median(values: &[f32], mask: &[bool]) -> Option<f32> {
    let mut inside: Vec<f32> = values
        .iter()
        .zip(mask)
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    if inside.is_empty() {
        return None;
    }
    inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(inside[inside.len() / 2])
}

// ---------------------------------------------------------------------------
// Ablation plumbing

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub data_hash: u64,
    pub val_depth_loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_diff_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_score: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    /// Hash of the scene stream this variant consumed; equal across
    /// variants by construction and asserted by the ablation drivers.
    pub batch_stream_hash: u64,
    pub per_seed: Vec<SeedResult>,
    pub mean_val_depth_loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_val_diff_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_spatial_score: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub soft: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub axis: String,
    pub steps_s1: u64,
    pub steps_s2: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
    pub verdicts: Vec<Verdict>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> &VariantResult {
        self.variants
            .iter()
            .find(|v| v.name == name)
            .unwrap_or_else(|| panic!("no variant {name}"))
    }

    pub fn ascii_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "ablation axis: {} (s1={}, s2={}, seeds {:?})\n",
            self.axis, self.steps_s1, self.steps_s2, self.seeds
        ));
        out.push_str(&format!(
            "{:<14} {:>14} {:>14} {:>14}\n",
            "variant", "val_depth", "val_diff", "spatial_score"
        ));
        for v in &self.variants {
            out.push_str(&format!(
                "{:<14} {:>14.4} {:>14} {:>14}\n",
                v.name,
                v.mean_val_depth_loss,
                v.mean_val_diff_loss
                    .map_or("-".to_string(), |x| format!("{x:.4}")),
                v.mean_spatial_score
                    .map_or("-".to_string(), |x| format!("{x:.3}")),
            ));
        }
        for verdict in &self.verdicts {
            out.push_str(&format!(
                "verdict {:<38} {} {}\n",
                verdict.name,
                if verdict.pass { "PASS" } else { "FAIL" },
                verdict.detail
            ));
        }
        out
    }
}

/// Shared prefixes across ablation variants: pre-fit-only checkpoints and
/// stage-1 checkpoints per seed, plus finished stage-2 variant metrics.
#[derive(Default)]
pub struct RunCache {
    pub prefit: HashMap<u64, Vec<u8>>,
    pub stage1: HashMap<u64, Vec<u8>>,
    pub stage2: HashMap<(String, u64), SeedResult>,
}

fn mean(values: &[f32]) -> f32 {
    values.iter().sum::<f32>() / values.len() as f32
}

fn prefit_checkpoint(cache: &mut RunCache, cfg: &ModelConfig, tp: &TrainParams, seed: u64) -> Result<Vec<u8>> {
    if let Some(bytes) = cache.prefit.get(&seed) {
        return Ok(bytes.clone());
    }
    let t = Trainer::new(cfg.clone(), tp.clone(), seed)?;
    let bytes = t.checkpoint_bytes();
    cache.prefit.insert(seed, bytes.clone());
    Ok(bytes)
}

/// Stage-1 checkpoint at the stage boundary under the base configuration;
/// shared by every stage-2 variant of that seed.
pub fn stage1_checkpoint(cache: &mut RunCache, cfg: &ModelConfig, tp: &TrainParams, seed: u64) -> Result<Vec<u8>> {
    if let Some(bytes) = cache.stage1.get(&seed) {
        return Ok(bytes.clone());
    }
    let mut t = Trainer::new(cfg.clone(), tp.clone(), seed)?;
    while t.global_step < tp.steps_s1 {
        t.step_once()?;
    }
    let bytes = t.checkpoint_bytes();
    cache.stage1.insert(seed, bytes.clone());
    Ok(bytes)
}

/// Run the stage-2 leg of one variant from the shared stage-1 checkpoint
/// and collect final metrics. `expect_adapter_calls_zero` is asserted for
/// the no-injection variant.
fn run_stage2_variant(
    cache: &mut RunCache,
    base: &ModelConfig,
    tp: &TrainParams,
    seed: u64,
    variant: &ModelConfig,
    key: String,
    score_scenes: usize,
) -> Result<SeedResult> {
    if let Some(r) = cache.stage2.get(&(key.clone(), seed)) {
        return Ok(r.clone());
    }
    let stage1 = stage1_checkpoint(cache, base, tp, seed)?;
    let loaded = checkpoint::from_bytes(&stage1)?;
    let mut t = Trainer::warm_start_from(variant.clone(), tp.clone(), seed, &loaded, tp.steps_s1)?;
    t.run_to_completion()?;
    if variant.inject_mode == InjectMode::None && t.adapter_calls != 0 {
        return Err(Error::Config(format!(
            "no-injection run called the depth adapter {} times",
            t.adapter_calls
        )));
    }
    let result = SeedResult {
        seed,
        data_hash: t.data_hash,
        val_depth_loss: t.validate_depth()?,
        val_diff_loss: Some(t.validate_diffusion()?),
        spatial_score: Some(spatial_score(&t.store, variant, seed, score_scenes)?),
        failed: None,
    };
    cache.stage2.insert((key, seed), result.clone());
    Ok(result)
}

fn collect_variant(name: &str, per_seed: Vec<SeedResult>) -> VariantResult {
    // Fold per-seed stream hashes in seed order: equal across variants iff
    // every seed consumed an identical stream.
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for r in &per_seed {
        hash = (hash ^ r.seed).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        hash = (hash ^ r.data_hash).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    let depth = mean(&per_seed.iter().map(|r| r.val_depth_loss).collect::<Vec<_>>());
    let diff: Vec<f32> = per_seed.iter().filter_map(|r| r.val_diff_loss).collect();
    let score: Vec<f32> = per_seed.iter().filter_map(|r| r.spatial_score).collect();
    VariantResult {
        name: name.to_string(),
        batch_stream_hash: hash,
        mean_val_depth_loss: depth,
        mean_val_diff_loss: (!diff.is_empty()).then(|| mean(&diff)),
        mean_spatial_score: (!score.is_empty()).then(|| mean(&score)),
        per_seed,
    }
}

// ---------------------------------------------------------------------------
// Ablations

/// Stage-1 sharing-strategy ablation: equal budget per variant, mean final
/// validation depth loss, verdict that every sharing variant beats the
/// no-sharing baseline.
pub fn ablate_sharing(exp: &ExperimentConfig, cache: &mut RunCache) -> Result<AblationReport> {
    let tp = TrainParams {
        steps_s2: 0,
        ..exp.train.clone()
    };
    let strategies = [
        ("none", ShareStrategy::None),
        ("shallow", ShareStrategy::Shallow),
        ("deep", ShareStrategy::Deep),
        ("uniform", ShareStrategy::Uniform),
    ];
    let mut variants = Vec::new();
    for (name, strategy) in strategies {
        let mut per_seed = Vec::new();
        for &seed in &exp.seeds {
            let prefit = prefit_checkpoint(cache, &exp.model, &tp, seed)?;
            let loaded = checkpoint::from_bytes(&prefit)?;
            let mut cfg = exp.model.clone();
            cfg.share_strategy = strategy;
            let mut t = Trainer::warm_start_from(cfg, tp.clone(), seed, &loaded, 0)?;
            t.run_to_completion()?;
            per_seed.push(SeedResult {
                seed,
                data_hash: t.data_hash,
                val_depth_loss: t.validate_depth()?,
                val_diff_loss: None,
                spatial_score: None,
                failed: None,
            });
        }
        variants.push(collect_variant(name, per_seed));
    }
    let hashes: Vec<u64> = variants.iter().map(|v| v.batch_stream_hash).collect();
    assert!(
        hashes.windows(2).all(|w| w[0] == w[1]),
        "variants consumed different scene streams"
    );
    let loss = |name: &str| {
        variants
            .iter()
            .find(|v| v.name == name)
            .unwrap()
            .mean_val_depth_loss
    };
    let (none, shallow, deep, uniform) = (loss("none"), loss("shallow"), loss("deep"), loss("uniform"));
    let verdicts = vec![
        Verdict {
            name: "uniform < none".into(),
            pass: uniform < none,
            soft: false,
            detail: format!("{uniform:.4} vs {none:.4}"),
        },
        Verdict {
            name: "shallow < none".into(),
            pass: shallow < none,
            soft: false,
            detail: format!("{shallow:.4} vs {none:.4}"),
        },
        Verdict {
            name: "deep < none".into(),
            pass: deep < none,
            soft: false,
            detail: format!("{deep:.4} vs {none:.4}"),
        },
        Verdict {
            name: "uniform best overall".into(),
            pass: uniform <= shallow && uniform <= deep,
            soft: true,
            detail: format!("uniform {uniform:.4}, shallow {shallow:.4}, deep {deep:.4}"),
        },
    ];
    Ok(AblationReport {
        schema_version: SCHEMA_VERSION,
        axis: "share_strategy".into(),
        steps_s1: tp.steps_s1,
        steps_s2: 0,
        seeds: exp.seeds.clone(),
        variants,
        verdicts,
    })
}

fn inject_variant_key(mode: InjectMode, lambda: f32) -> String {
    format!("mode={mode:?},lambda={lambda}")
}

/// Injection-mode ablation: identical stage-1 checkpoint shared across
/// modes, equal stage-2 budget, spatial score and validation diffusion loss
/// per mode.
pub fn ablate_inject(exp: &ExperimentConfig, cache: &mut RunCache) -> Result<AblationReport> {
    let tp = exp.train.clone();
    let modes = [
        ("none", InjectMode::None),
        ("concat", InjectMode::Concat),
        ("add", InjectMode::Add),
    ];
    let mut variants = Vec::new();
    for (name, mode) in modes {
        let mut per_seed = Vec::new();
        for &seed in &exp.seeds {
            let mut cfg = exp.model.clone();
            cfg.inject_mode = mode;
            let key = inject_variant_key(mode, cfg.lambda);
            per_seed.push(run_stage2_variant(
                cache,
                &exp.model,
                &tp,
                seed,
                &cfg,
                key,
                exp.score_scenes,
            )?);
        }
        variants.push(collect_variant(name, per_seed));
    }
    let hashes: Vec<u64> = variants.iter().map(|v| v.batch_stream_hash).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    let score = |name: &str| {
        variants
            .iter()
            .find(|v| v.name == name)
            .unwrap()
            .mean_spatial_score
            .unwrap()
    };
    let (none, concat, add) = (score("none"), score("concat"), score("add"));
    let verdicts = vec![
        Verdict {
            name: "score(add) > score(none)".into(),
            pass: add > none,
            soft: false,
            detail: format!("{add:.3} vs {none:.3}"),
        },
        Verdict {
            name: "score(add) >= score(concat)".into(),
            pass: add >= concat,
            soft: true,
            detail: format!("{add:.3} vs {concat:.3}"),
        },
        Verdict {
            name: "score(concat) > score(none)".into(),
            pass: concat > none,
            soft: true,
            detail: format!("{concat:.3} vs {none:.3}"),
        },
    ];
    Ok(AblationReport {
        schema_version: SCHEMA_VERSION,
        axis: "inject_mode".into(),
        steps_s1: tp.steps_s1,
        steps_s2: tp.steps_s2,
        seeds: exp.seeds.clone(),
        variants,
        verdicts,
    })
}

/// Depth-loss-weight sweep: equal budgets, shared stage-1 checkpoint,
/// validation depth and diffusion losses per weight.
pub fn sweep_lambda(exp: &ExperimentConfig, cache: &mut RunCache) -> Result<AblationReport> {
    let tp = exp.train.clone();
    let mut variants = Vec::new();
    for &lambda in &exp.lambdas {
        let mut per_seed = Vec::new();
        for &seed in &exp.seeds {
            let mut cfg = exp.model.clone();
            cfg.lambda = lambda;
            cfg.inject_mode = InjectMode::Add;
            let key = inject_variant_key(InjectMode::Add, lambda);
            per_seed.push(run_stage2_variant(
                cache,
                &exp.model,
                &tp,
                seed,
                &cfg,
                key,
                exp.score_scenes,
            )?);
        }
        variants.push(collect_variant(&format!("lambda={lambda}"), per_seed));
    }
    let depth_means: Vec<f32> = variants.iter().map(|v| v.mean_val_depth_loss).collect();
    let monotone = depth_means.windows(2).all(|w| w[1] <= w[0]);
    let diff_at = |lambda: f32| {
        variants
            .iter()
            .find(|v| v.name == format!("lambda={lambda}"))
            .and_then(|v| v.mean_val_diff_loss)
            .unwrap()
    };
    let largest = *exp
        .lambdas
        .iter()
        .max_by(|a, b| a.partial_cmp(b).unwrap())
        .unwrap();
    let verdicts = vec![
        Verdict {
            name: "val depth loss non-increasing in lambda".into(),
            pass: monotone,
            soft: false,
            detail: format!("{depth_means:.4?}"),
        },
        Verdict {
            name: format!("val diff loss at lambda={largest} exceeds lambda=0.5"),
            pass: diff_at(largest) > diff_at(0.5),
            soft: false,
            detail: format!("{:.4} vs {:.4}", diff_at(largest), diff_at(0.5)),
        },
    ];
    Ok(AblationReport {
        schema_version: SCHEMA_VERSION,
        axis: "lambda".into(),
        steps_s1: tp.steps_s1,
        steps_s2: tp.steps_s2,
        seeds: exp.seeds.clone(),
        variants,
        verdicts,
    })
}

// ---------------------------------------------------------------------------
// Consolidated reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_val_depth_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_val_diff_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation_axis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdicts_passed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdicts_total: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub runs: Vec<RunSummary>,
    /// Mean and standard deviation of final validation depth loss across
    /// runs that have one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_depth_mean: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_depth_std: Option<f32>,
}

/// Aggregate training logs and ablation reports from run directories.
/// Never mutates inputs.
pub fn report(run_dirs: &[&Path]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::MissingRun {
            dir: "(empty run list)".into(),
        });
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let log_path = dir.join("trainlog.ndjson");
        let abl_path = dir.join("ablation_report.json");
        if !log_path.exists() && !abl_path.exists() {
            return Err(Error::MissingRun {
                dir: dir.display().to_string(),
            });
        }
        let mut summary = RunSummary {
            dir: dir.display().to_string(),
            final_train_loss: None,
            final_val_depth_loss: None,
            final_val_diff_loss: None,
            steps: None,
            ablation_axis: None,
            verdicts_passed: None,
            verdicts_total: None,
        };
        if log_path.exists() {
            let log = TrainLog::from_ndjson(&std::fs::read_to_string(&log_path)?)?;
            if let Some(last) = log.records.last() {
                summary.final_train_loss = Some(last.l_total);
                summary.steps = Some(last.step + 1);
            }
            summary.final_val_depth_loss = log.records.iter().rev().find_map(|r| r.val_depth_loss);
            summary.final_val_diff_loss = log.records.iter().rev().find_map(|r| r.val_diff_loss);
        }
        if abl_path.exists() {
            let rep: AblationReport = serde_json::from_str(&std::fs::read_to_string(&abl_path)?)?;
            summary.ablation_axis = Some(rep.axis.clone());
            summary.verdicts_passed = Some(rep.verdicts.iter().filter(|v| v.pass).count());
            summary.verdicts_total = Some(rep.verdicts.len());
        }
        runs.push(summary);
    }
    let depths: Vec<f32> = runs.iter().filter_map(|r| r.final_val_depth_loss).collect();
    let (val_depth_mean, val_depth_std) = if depths.is_empty() {
        (None, None)
    } else {
        let m = mean(&depths);
        let var = depths.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / depths.len() as f32;
        (Some(m), Some(var.sqrt()))
    };
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        runs,
        val_depth_mean,
        val_depth_std,
    })
}

pub fn report_ascii(rep: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<40} {:>10} {:>12} {:>12} {:>10}\n",
        "run", "steps", "val_depth", "val_diff", "verdicts"
    ));
    for r in &rep.runs {
        out.push_str(&format!(
            "{:<40} {:>10} {:>12} {:>12} {:>10}\n",
            r.dir,
            r.steps.map_or("-".into(), |s| s.to_string()),
            r.final_val_depth_loss
                .map_or("-".to_string(), |v| format!("{v:.4}")),
            r.final_val_diff_loss
                .map_or("-".to_string(), |v| format!("{v:.4}")),
            match (r.verdicts_passed, r.verdicts_total) {
                (Some(p), Some(t)) => format!("{p}/{t}"),
                _ => "-".into(),
            }
        ));
    }
    if let (Some(m), Some(s)) = (rep.val_depth_mean, rep.val_depth_std) {
        out.push_str(&format!("val depth loss: mean {m:.4}, std {s:.4}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Dataset export

/// Write `count` training records and `val_count` held-out records, one
/// directory per sample, plus an index with split tags.
pub fn export_dataset(out: &Path, cfg: &ModelConfig, seed: u64, count: usize, val_count: usize) -> Result<()> {
    use crate::pnm;
    #[derive(Serialize)]
    struct IndexEntry {
        dir: String,
        split: String,
    }
    #[derive(Serialize)]
    struct Index {
        schema_version: u32,
        records: Vec<IndexEntry>,
    }
    std::fs::create_dir_all(out)?;
    let mut records = Vec::new();
    let splits: [(&str, &str, usize); 2] = [("data", "train", count), ("val", "val", val_count)];
    for (stream, split, n) in splits {
        let rng = Rng::new(seed).stream(stream);
        for i in 0..n {
            let phase = if i % 2 == 0 {
                CurriculumPhase::coarse()
            } else {
                CurriculumPhase::fine()
            };
            let sample = crate::scenegen::make_sample(
                &rng,
                i as u64,
                &phase,
                &TaskMix::mixed(),
                cfg.height,
                cfg.width,
            );
            let name = format!("{split}_{i:05}");
            let dir = out.join(&name);
            std::fs::create_dir_all(&dir)?;
            let prompt: Vec<String> = sample.prompt.iter().map(u32::to_string).collect();
            std::fs::write(dir.join("prompt.txt"), prompt.join(" "))?;
            pnm::write_image_ppm(&sample.image, &dir.join("image.ppm"))?;
            pnm::write_depth_pgm16(&sample.depth, &dir.join("depth.pgm16"))?;
            pnm::write_mask_pgm(&sample.mask, &dir.join("mask.pgm"))?;
            if let Some(src) = &sample.source_image {
                pnm::write_image_ppm(src, &dir.join("source.ppm"))?;
            }
            records.push(IndexEntry {
                dir: name,
                split: split.to_string(),
            });
        }
    }
    let index = Index {
        schema_version: SCHEMA_VERSION,
        records,
    };
    std::fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_unknown_key_rejection() {
        let exp = ExperimentConfig::default();
        let text = serde_json::to_string(&exp).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        let with_bogus = text.replace("\"schema_version\":1", "\"schema_version\":1,\"bogus\":2");
        let r: std::result::Result<ExperimentConfig, _> = serde_json::from_str(&with_bogus);
        assert!(r.is_err(), "unknown keys must be rejected");
    }

    #[test]
    fn report_errors_on_empty_and_missing() {
        assert!(matches!(report(&[]), Err(Error::MissingRun { .. })));
        let dir = std::env::temp_dir().join("spatialgen-missing-run");
        std::fs::create_dir_all(&dir).unwrap();
        assert!(matches!(
            report(&[dir.as_path()]),
            Err(Error::MissingRun { .. })
        ));
    }

    #[test]
    fn report_single_run_identity_and_json_round_trip() {
        let dir = std::env::temp_dir().join("spatialgen-report-one");
        std::fs::create_dir_all(&dir).unwrap();
        let log = "{\"step\":0,\"stage\":1,\"phase\":\"coarse\",\"l_depth\":2.5,\"l_total\":2.5,\"grad_norm\":0.1,\"wallclock\":0.5,\"val_depth_loss\":3.25}\n";
        std::fs::write(dir.join("trainlog.ndjson"), log).unwrap();
        let rep = report(&[dir.as_path()]).unwrap();
        assert_eq!(rep.runs.len(), 1);
        assert_eq!(rep.runs[0].final_val_depth_loss, Some(3.25));
        assert_eq!(rep.val_depth_mean, Some(3.25));
        assert_eq!(rep.val_depth_std, Some(0.0));
        let text = serde_json::to_string(&rep).unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn spatial_score_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let store = crate::trainer::init_full_store(&cfg, 0);
        let a = spatial_score(&store, &cfg, 0, 4).unwrap();
        let b = spatial_score(&store, &cfg, 0, 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn dataset_export_layout() {
        let dir = std::env::temp_dir().join("spatialgen-dataset-test");
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = ModelConfig::tiny();
        export_dataset(&dir, &cfg, 0, 3, 1).unwrap();
        assert!(dir.join("index.json").exists());
        assert!(dir.join("train_00000/prompt.txt").exists());
        assert!(dir.join("train_00000/image.ppm").exists());
        assert!(dir.join("train_00000/depth.pgm16").exists());
        assert!(dir.join("train_00000/mask.pgm").exists());
        assert!(dir.join("val_00000/image.ppm").exists());
        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("index.json")).unwrap()).unwrap();
        assert_eq!(index["records"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn tiny_ablation_sharing_produces_full_grid() {
        let mut exp = ExperimentConfig {
            model: ModelConfig::tiny(),
            ..Default::default()
        };
        exp.train = TrainParams {
            steps_s1: 2,
            steps_s2: 0,
            batch_size: 1,
            val_every: 1,
            val_scenes: 2,
            codec_prefit_steps: 2,
            sem_prefit_steps: 2,
            ..TrainParams::default()
        };
        exp.seeds = vec![0, 1];
        let mut cache = RunCache::default();
        let rep = ablate_sharing(&exp, &mut cache).unwrap();
        assert_eq!(rep.variants.len(), 4);
        for v in &rep.variants {
            assert_eq!(v.per_seed.len(), 2);
        }
        // Verdicts are report outcomes, not crashes.
        assert_eq!(rep.verdicts.len(), 4);
        let json = serde_json::to_string(&rep).unwrap();
        let back: AblationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.variants.len(), 4);
        assert!(!rep.ascii_table().is_empty());
    }
}
