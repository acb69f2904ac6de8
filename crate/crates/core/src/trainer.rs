//! Two-stage training: geometric pre-training with frozen semantic and
//! diffusion parameters, then joint training of the full pipeline under the
//! weighted objective, with a coarse-to-fine phase switch inside each stage.
//!
//! Everything a step consumes is derived from (seed, step index), so a run
//! resumed from a checkpoint replays the uninterrupted run exactly.

use serde::{Deserialize, Serialize};

use std::cell::RefCell;
use std::rc::Rc;

use crate::attention::{semantic_forward, semantic_lm_loss, SemanticState};
use crate::checkpoint::{self, RunState};
use crate::config::{InjectMode, ModelConfig, ShareStrategy};
use crate::diffusion::{
    depth_adapter, diffusion_loss, dit_forward, fuse_latent, latent_encode, prefit_codec,
    q_sample, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::geometry::{
    decode_depth, depth_loss, derive_geometry, init_geo_states, probe_baseline,
};
use crate::numcore::{no_grad, Array, OptimizerState, ParamGroup, ParamStore, Rng};
use crate::scenegen::{make_batch, make_sample, CurriculumPhase, Phase, Sample, TaskMix};

// ---------------------------------------------------------------------------
// Freeze specification

/// Which parameter groups train in each stage. Stage 1 freezes the semantic
/// decoder and the whole diffusion side; stage 2 unfreezes the denoiser and
/// adapter while the semantic decoder and codec stay frozen throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeSpec {
    trainable: Vec<ParamGroup>,
}

impl FreezeSpec {
    pub fn stage1() -> FreezeSpec {
        FreezeSpec {
            trainable: vec![ParamGroup::Spatial, ParamGroup::Queries, ParamGroup::DepthHead],
        }
    }

    pub fn stage2(inject_mode: InjectMode) -> FreezeSpec {
        let mut trainable = vec![
            ParamGroup::Spatial,
            ParamGroup::Queries,
            ParamGroup::DepthHead,
            ParamGroup::Dit,
        ];
        // Without injection the adapter never appears in the graph, so it
        // has no gradients and must stay out of the optimizer.
        if inject_mode != InjectMode::None {
            trainable.push(ParamGroup::Adapter);
        }
        FreezeSpec { trainable }
    }

    pub fn probe() -> FreezeSpec {
        FreezeSpec {
            trainable: vec![ParamGroup::Probe],
        }
    }

    pub fn trainable(&self) -> &[ParamGroup] {
        &self.trainable
    }

    pub fn frozen(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| !self.trainable.contains(g))
            .collect()
    }

    pub fn apply(&self, store: &ParamStore) {
        store.set_trainable_groups(&self.trainable);
    }
}

// ---------------------------------------------------------------------------
// Logging

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub stage: u8,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_diff: Option<f32>,
    pub l_depth: f32,
    pub l_total: f32,
    pub grad_norm: f32,
    pub wallclock: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_depth_loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_diff_loss: Option<f32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Newline-delimited JSON, one record per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<TrainLog> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line)?);
        }
        Ok(TrainLog { records })
    }

    /// Equality of every deterministic field; wallclock is inherently
    /// non-reproducible and excluded.
    pub fn eq_ignoring_wallclock(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.stage == b.stage
                    && a.phase == b.phase
                    && a.l_diff.map(f32::to_bits) == b.l_diff.map(f32::to_bits)
                    && a.l_depth.to_bits() == b.l_depth.to_bits()
                    && a.l_total.to_bits() == b.l_total.to_bits()
                    && a.grad_norm.to_bits() == b.grad_norm.to_bits()
                    && a.val_depth_loss.map(f32::to_bits) == b.val_depth_loss.map(f32::to_bits)
                    && a.val_diff_loss.map(f32::to_bits) == b.val_diff_loss.map(f32::to_bits)
            })
    }
}

// ---------------------------------------------------------------------------
// Training parameters

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub steps_s1: u64,
    pub steps_s2: u64,
    /// Fraction of each stage spent in the coarse phase.
    pub phase_split: f32,
    pub batch_size: usize,
    pub lr: f32,
    pub val_every: u64,
    pub val_scenes: usize,
    pub codec_prefit_steps: usize,
    pub sem_prefit_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    pub checked: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            steps_s1: 500,
            steps_s2: 1000,
            phase_split: 0.5,
            batch_size: 4,
            lr: 3e-3,
            val_every: 50,
            val_scenes: 64,
            codec_prefit_steps: 400,
            sem_prefit_steps: 300,
            grad_clip: 1.0,
            checked: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter assembly

/// Initialize every parameter group from seed-pinned substreams; creation
/// order never affects values.
pub fn init_full_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let rng = Rng::new(seed).stream("init");
    crate::attention::init_semantic_params(&mut store, &rng, cfg);
    crate::attention::init_spatial_params(&mut store, &rng, cfg);
    crate::attention::init_dit_params(&mut store, &rng, cfg);
    crate::geometry::init_query_bank(&mut store, &rng, cfg);
    crate::geometry::init_patch_encoder(&mut store, &rng, cfg);
    crate::geometry::init_depth_head(&mut store, &rng, cfg);
    crate::geometry::init_probe_head(&mut store, &rng, cfg);
    crate::diffusion::init_codec_params(&mut store, &rng, cfg);
    crate::diffusion::init_adapter_params(&mut store, &rng, cfg);
    store
}

/// Short language-model fit of the semantic decoder on scene prompts; it is
/// frozen for the rest of the run.
pub fn prefit_semantic(
    store: &ParamStore,
    cfg: &ModelConfig,
    rng: &Rng,
    steps: usize,
    batch_size: usize,
    lr: f32,
) -> Result<f32> {
    store.set_trainable_groups(&[ParamGroup::Semantic]);
    let mut opt = OptimizerState::new(store, lr);
    let data_rng = rng.stream("sem-data");
    let mut last = f32::NAN;
    for step in 0..steps {
        let mut losses = Vec::with_capacity(batch_size);
        for b in 0..batch_size {
            let idx = (step * batch_size + b) as u64;
            let phase = if idx % 2 == 0 {
                CurriculumPhase::coarse()
            } else {
                CurriculumPhase::fine()
            };
            let sample = make_sample(&data_rng, idx, &phase, &TaskMix::mixed(), cfg.height, cfg.width);
            losses.push(semantic_lm_loss(&sample.prompt, store, cfg)?);
        }
        let refs: Vec<&Array> = losses.iter().collect();
        let loss = Array::concat(&refs, 0)?.mean()?;
        last = loss.item();
        loss.backward()?;
        opt.adam_step(store)?;
    }
    Ok(last)
}

// ---------------------------------------------------------------------------
// Trainer

pub struct Trainer {
    pub cfg: ModelConfig,
    pub tp: TrainParams,
    pub store: ParamStore,
    pub log: TrainLog,
    pub seed: u64,
    /// Next global step to execute, in [0, steps_s1 + steps_s2].
    pub global_step: u64,
    /// Calls into the depth adapter during training losses.
    pub adapter_calls: u64,
    /// Running hash of the prompt stream this trainer consumed; ablation
    /// variants assert equality to prove they saw identical data.
    pub data_hash: u64,
    opt: Option<OptimizerState>,
    current_stage: Option<u8>,
    frozen_hashes: Vec<(ParamGroup, u64)>,
    sched: NoiseSchedule,
    started: std::time::Instant,
    // Held-out scenes and their (frozen) semantic states, built lazily at
    // the first validation and reused for the rest of the run.
    val_samples_cache: RefCell<Option<Rc<Vec<Sample>>>>,
    val_sem_cache: RefCell<Option<Rc<Vec<Vec<SemanticState>>>>>,
}

impl Trainer {
    /// Fresh run: initialize parameters, pre-fit the codec (only when stage 2
    /// will run) and the semantic decoder, freeze both.
    pub fn new(cfg: ModelConfig, tp: TrainParams, seed: u64) -> Result<Trainer> {
        let t = Self::without_prefits(cfg, tp, seed)?;
        let rng = Rng::new(seed);
        if t.tp.steps_s2 > 0 {
            prefit_codec(&t.store, &t.cfg, &rng, t.tp.codec_prefit_steps, 8, 3e-3)?;
        }
        prefit_semantic(&t.store, &t.cfg, &rng, t.tp.sem_prefit_steps, 8, 3e-3)?;
        Ok(t)
    }

    /// Seed-initialized trainer with no pre-fits; callers warm-start it from
    /// a checkpoint that already contains pre-fit (or trained) parameters.
    pub fn without_prefits(cfg: ModelConfig, tp: TrainParams, seed: u64) -> Result<Trainer> {
        cfg.validate()?;
        crate::numcore::set_checked(tp.checked);
        let store = init_full_store(&cfg, seed);
        let sched = NoiseSchedule::for_config(&cfg);
        Ok(Trainer {
            cfg,
            tp,
            store,
            log: TrainLog::default(),
            seed,
            global_step: 0,
            adapter_calls: 0,
            data_hash: 0xcbf2_9ce4_8422_2325,
            opt: None,
            current_stage: None,
            frozen_hashes: Vec::new(),
            sched,
            started: std::time::Instant::now(),
            val_samples_cache: RefCell::new(None),
            val_sem_cache: RefCell::new(None),
        })
    }

    /// Start a (possibly reconfigured) run from the parameters of a stored
    /// checkpoint: every tensor whose name matches is copied; the rest keep
    /// their seed-pinned initialization. Used to share pre-fit and stage-1
    /// prefixes across ablation variants.
    pub fn warm_start_from(
        cfg: ModelConfig,
        tp: TrainParams,
        seed: u64,
        loaded: &checkpoint::Loaded,
        global_step: u64,
    ) -> Result<Trainer> {
        let mut t = Self::without_prefits(cfg, tp, seed)?;
        checkpoint::warm_start(loaded, &t.store)?;
        t.global_step = global_step;
        Ok(t)
    }

    /// Resume from checkpoint bytes; pre-fits are baked into the stored
    /// parameters and do not rerun.
    pub fn from_checkpoint(tp: TrainParams, bytes: &[u8]) -> Result<Trainer> {
        crate::numcore::set_checked(tp.checked);
        let loaded = checkpoint::from_bytes(bytes)?;
        let cfg = loaded.header.config.clone();
        cfg.validate()?;
        let store = init_full_store(&cfg, loaded.header.run_state.seed);
        let stage = loaded.header.run_state.stage;
        let spec = if stage == 1 {
            FreezeSpec::stage1()
        } else {
            FreezeSpec::stage2(cfg.inject_mode)
        };
        spec.apply(&store);
        let mut opt = OptimizerState::new(&store, tp.lr);
        let run_state = checkpoint::load_into(&loaded, &cfg, &store, Some(&mut opt))?;
        let frozen_hashes = spec
            .frozen()
            .into_iter()
            .map(|g| (g, store.group_hash(g)))
            .collect();
        let sched = NoiseSchedule::for_config(&cfg);
        Ok(Trainer {
            cfg,
            tp,
            store,
            log: TrainLog::default(),
            seed: run_state.seed,
            global_step: run_state.next_step,
            adapter_calls: 0,
            data_hash: 0xcbf2_9ce4_8422_2325,
            opt: Some(opt),
            current_stage: Some(stage),
            frozen_hashes,
            sched,
            started: std::time::Instant::now(),
            val_samples_cache: RefCell::new(None),
            val_sem_cache: RefCell::new(None),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.tp.steps_s1 + self.tp.steps_s2
    }

    pub fn finished(&self) -> bool {
        self.global_step >= self.total_steps()
    }

    /// (stage, phase) for a global step index.
    pub fn position(&self, step: u64) -> (u8, Phase) {
        if step < self.tp.steps_s1 {
            let split = (self.tp.steps_s1 as f32 * self.tp.phase_split) as u64;
            (1, if step < split { Phase::Coarse } else { Phase::Fine })
        } else {
            let s2 = step - self.tp.steps_s1;
            let split = (self.tp.steps_s2 as f32 * self.tp.phase_split) as u64;
            (2, if s2 < split { Phase::Coarse } else { Phase::Fine })
        }
    }

    /// Steps at which a stage or phase boundary begins; checkpoints are cut
    /// when crossing these.
    pub fn phase_boundaries(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut prev = self.position(0);
        for step in 1..self.total_steps() {
            let pos = self.position(step);
            if pos != prev {
                out.push(step);
                prev = pos;
            }
        }
        out
    }

    fn mix_for(phase: Phase) -> TaskMix {
        match phase {
            Phase::Coarse => TaskMix::t2i_only(),
            Phase::Fine => TaskMix::mixed(),
        }
    }

    fn data_rng(&self) -> Rng {
        Rng::new(self.seed).stream("data")
    }

    fn ensure_stage(&mut self, stage: u8) -> Result<()> {
        if self.current_stage == Some(stage) {
            return Ok(());
        }
        let spec = if stage == 1 {
            FreezeSpec::stage1()
        } else {
            FreezeSpec::stage2(self.cfg.inject_mode)
        };
        spec.apply(&self.store);
        self.opt = Some(OptimizerState::new(&self.store, self.tp.lr));
        self.frozen_hashes = spec
            .frozen()
            .into_iter()
            .map(|g| (g, self.store.group_hash(g)))
            .collect();
        self.current_stage = Some(stage);
        Ok(())
    }

    fn fold_data_hash(&mut self, batch: &crate::scenegen::Batch) {
        for s in &batch.samples {
            for &t in &s.prompt {
                self.data_hash = (self.data_hash ^ t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                self.data_hash ^= self.data_hash >> 29;
            }
        }
    }

    fn clip_grads(&self) -> f32 {
        if self.tp.grad_clip > 0.0 {
            self.store.clip_grad_norm(self.tp.grad_clip)
        } else {
            self.store.grad_norm()
        }
    }

    fn check_frozen(&self) -> Result<()> {
        for (group, expected) in &self.frozen_hashes {
            if self.store.group_hash(*group) != *expected {
                return Err(Error::FrozenParamGradApplied {
                    group: group.name().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Depth loss of one sample through the frozen semantic pathway, the
    /// spatial stack, and the decode head. With no sharing the semantic
    /// pathway never influences the result and is skipped entirely.
    fn sample_depth_loss(&self, sample: &Sample) -> Result<Array> {
        let sem = if self.cfg.share_strategy == ShareStrategy::None {
            Vec::new()
        } else {
            semantic_forward(&sample.prompt, &self.store, &self.cfg)?
        };
        self.depth_loss_with_states(sample, &sem)
    }

    fn depth_loss_with_states(&self, sample: &Sample, sem: &[SemanticState]) -> Result<Array> {
        let geo0 = init_geo_states(&self.store, sample.source_image.as_ref(), &self.cfg)?;
        let geo = derive_geometry(&geo0, sem, &self.cfg, &self.store)?;
        let pred = decode_depth(&geo, &self.store, &self.cfg)?;
        depth_loss(&pred, &sample.depth, &sample.mask)
    }

    /// One stage-1 step: geometric regression only.
    pub fn stage1_step(&mut self) -> Result<TrainRecord> {
        let step = self.global_step;
        let (_, phase) = self.position(step);
        self.ensure_stage(1)?;
        let batch = make_batch(
            &self.data_rng(),
            step * self.tp.batch_size as u64,
            self.tp.batch_size,
            &CurriculumPhase::for_phase(phase),
            &Self::mix_for(phase),
            self.cfg.height,
            self.cfg.width,
        );
        self.fold_data_hash(&batch);
        let losses: Vec<Array> = batch
            .samples
            .iter()
            .map(|s| self.sample_depth_loss(s))
            .collect::<Result<_>>()?;
        let refs: Vec<&Array> = losses.iter().collect();
        let loss = Array::concat(&refs, 0)?.mean()?;
        let l_depth = loss.item();
        loss.backward()?;
        let grad_norm = self.clip_grads();
        self.opt.as_mut().unwrap().adam_step(&self.store)?;
        self.check_frozen()?;
        self.global_step += 1;
        let record = TrainRecord {
            step,
            stage: 1,
            phase,
            l_diff: None,
            l_depth,
            l_total: l_depth,
            grad_norm,
            wallclock: self.started.elapsed().as_secs_f64(),
            val_depth_loss: None,
            val_diff_loss: None,
        };
        Ok(record)
    }

    /// One stage-2 step: derive depth on the fly, inject it, and optimize
    /// the joint objective l_diff + lambda * l_depth.
    pub fn stage2_step(&mut self) -> Result<TrainRecord> {
        let step = self.global_step;
        let (_, phase) = self.position(step);
        self.ensure_stage(2)?;
        let batch = make_batch(
            &self.data_rng(),
            step * self.tp.batch_size as u64,
            self.tp.batch_size,
            &CurriculumPhase::for_phase(phase),
            &Self::mix_for(phase),
            self.cfg.height,
            self.cfg.width,
        );
        self.fold_data_hash(&batch);
        let noise_rng = Rng::new(self.seed).stream("s2-noise").fork(step);
        let mut diff_losses = Vec::with_capacity(batch.samples.len());
        let mut depth_losses = Vec::with_capacity(batch.samples.len());
        for (b, sample) in batch.samples.iter().enumerate() {
            let mut rng = noise_rng.fork(b as u64);
            let sem = semantic_forward(&sample.prompt, &self.store, &self.cfg)?;
            let sem_m = &sem[self.cfg.m_layers - 1];
            let geo0 = init_geo_states(&self.store, sample.source_image.as_ref(), &self.cfg)?;
            let geo = derive_geometry(&geo0, &sem, &self.cfg, &self.store)?;
            let pred = decode_depth(&geo, &self.store, &self.cfg)?;
            depth_losses.push(depth_loss(&pred, &sample.depth, &sample.mask)?);

            let z0 = latent_encode(&sample.image, &self.store, &self.cfg)?;
            let t = rng.int_in(1, self.cfg.t_steps);
            let eps = Array::randn(z0.shape(), &mut rng);
            let z_t = q_sample(&z0, t, &eps, &self.sched)?;
            let f_depth = match self.cfg.inject_mode {
                InjectMode::None => None,
                _ => {
                    self.adapter_calls += 1;
                    Some(depth_adapter(&pred, &self.store, &self.cfg)?)
                }
            };
            let z_hat = fuse_latent(&z_t, f_depth.as_ref(), self.cfg.inject_mode, &self.store)?;
            let eps_pred = dit_forward(&z_hat, t, sem_m, &self.store, &self.cfg)?;
            diff_losses.push(diffusion_loss(&eps_pred, &eps)?);
        }
        let diff_refs: Vec<&Array> = diff_losses.iter().collect();
        let depth_refs: Vec<&Array> = depth_losses.iter().collect();
        let l_diff_arr = Array::concat(&diff_refs, 0)?.mean()?;
        let l_depth_arr = Array::concat(&depth_refs, 0)?.mean()?;
        let l_total_arr = l_diff_arr.add(&l_depth_arr.scale(self.cfg.lambda)?)?;
        let (l_diff, l_depth, l_total) = (l_diff_arr.item(), l_depth_arr.item(), l_total_arr.item());
        l_total_arr.backward()?;
        let grad_norm = self.clip_grads();
        self.opt.as_mut().unwrap().adam_step(&self.store)?;
        self.check_frozen()?;
        self.global_step += 1;
        Ok(TrainRecord {
            step,
            stage: 2,
            phase,
            l_diff: Some(l_diff),
            l_depth,
            l_total,
            grad_norm,
            wallclock: self.started.elapsed().as_secs_f64(),
            val_depth_loss: None,
            val_diff_loss: None,
        })
    }

    pub fn step_once(&mut self) -> Result<TrainRecord> {
        assert!(!self.finished(), "run already complete");
        let (stage, _) = self.position(self.global_step);
        // Held-out validation at the cadence boundary, before the update:
        // the step-0 record carries the untrained reference value.
        let at_cadence = self.global_step % self.tp.val_every == 0;
        let val_depth = if at_cadence { Some(self.validate_depth()?) } else { None };
        let val_diff = if at_cadence && stage == 2 {
            Some(self.validate_diffusion()?)
        } else {
            None
        };
        let mut record = if stage == 1 {
            self.stage1_step()?
        } else {
            self.stage2_step()?
        };
        record.val_depth_loss = val_depth;
        record.val_diff_loss = val_diff;
        self.log.records.push(record.clone());
        Ok(record)
    }

    pub fn run_to_completion(&mut self) -> Result<()> {
        while !self.finished() {
            self.step_once()?;
        }
        Ok(())
    }

    /// Fixed held-out scenes (built once per trainer).
    fn val_samples(&self) -> Rc<Vec<Sample>> {
        let mut cache = self.val_samples_cache.borrow_mut();
        cache
            .get_or_insert_with(|| {
                let val_rng = Rng::new(self.seed).stream("val");
                Rc::new(
                    (0..self.tp.val_scenes)
                        .map(|i| {
                            let phase = if i % 2 == 0 {
                                CurriculumPhase::coarse()
                            } else {
                                CurriculumPhase::fine()
                            };
                            make_sample(
                                &val_rng,
                                i as u64,
                                &phase,
                                &TaskMix::t2i_only(),
                                self.cfg.height,
                                self.cfg.width,
                            )
                        })
                        .collect(),
                )
            })
            .clone()
    }

    /// Semantic states of the held-out scenes. The semantic decoder is
    /// frozen during both stages, so these are computed once.
    fn val_sem_states(&self) -> Result<Rc<Vec<Vec<SemanticState>>>> {
        {
            let cache = self.val_sem_cache.borrow();
            if let Some(c) = cache.as_ref() {
                return Ok(c.clone());
            }
        }
        let samples = self.val_samples();
        let states = no_grad(|| -> Result<Vec<Vec<SemanticState>>> {
            samples
                .iter()
                .map(|s| semantic_forward(&s.prompt, &self.store, &self.cfg))
                .collect()
        })?;
        let rc = Rc::new(states);
        *self.val_sem_cache.borrow_mut() = Some(rc.clone());
        Ok(rc)
    }

    /// Mean depth loss over the fixed held-out scenes.
    pub fn validate_depth(&self) -> Result<f32> {
        no_grad(|| {
            let samples = self.val_samples();
            let empty: Vec<SemanticState> = Vec::new();
            let sem_all = if self.cfg.share_strategy == ShareStrategy::None {
                None
            } else {
                Some(self.val_sem_states()?)
            };
            let mut total = 0.0f64;
            for (i, s) in samples.iter().enumerate() {
                let sem = sem_all.as_ref().map_or(&empty, |v| &v[i]);
                total += self.depth_loss_with_states(s, sem)?.item() as f64;
            }
            Ok((total / samples.len() as f64) as f32)
        })
    }

    /// Mean diffusion loss over the held-out scenes at fixed (t, eps) pairs.
    pub fn validate_diffusion(&self) -> Result<f32> {
        no_grad(|| {
            let samples = self.val_samples();
            let sem_all = self.val_sem_states()?;
            let base = Rng::new(self.seed).stream("val-diff");
            let mut total = 0.0f64;
            for (i, s) in samples.iter().enumerate() {
                let mut rng = base.fork(i as u64);
                let sem = &sem_all[i];
                let sem_m = &sem[self.cfg.m_layers - 1];
                let geo0 = init_geo_states(&self.store, s.source_image.as_ref(), &self.cfg)?;
                let geo = derive_geometry(&geo0, sem, &self.cfg, &self.store)?;
                let pred = decode_depth(&geo, &self.store, &self.cfg)?;
                let z0 = latent_encode(&s.image, &self.store, &self.cfg)?;
                let t = rng.int_in(1, self.cfg.t_steps);
                let eps = Array::randn(z0.shape(), &mut rng);
                let z_t = q_sample(&z0, t, &eps, &self.sched)?;
                let f_depth = match self.cfg.inject_mode {
                    InjectMode::None => None,
                    _ => Some(depth_adapter(&pred, &self.store, &self.cfg)?),
                };
                let z_hat = fuse_latent(&z_t, f_depth.as_ref(), self.cfg.inject_mode, &self.store)?;
                let eps_pred = dit_forward(&z_hat, t, sem_m, &self.store, &self.cfg)?;
                total += diffusion_loss(&eps_pred, &eps)?.item() as f64;
            }
            Ok((total / samples.len() as f64) as f32)
        })
    }

    pub fn run_state(&self) -> RunState {
        RunState {
            seed: self.seed,
            next_step: self.global_step,
            stage: self.current_stage.unwrap_or(1),
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.store, self.opt.as_ref(), &self.cfg, &self.run_state())
    }
}

// ---------------------------------------------------------------------------
// Probing baseline

/// Train only the probe decode head on frozen semantic states, at the same
/// data stream and budget as a stage-1 run. Returns the log and the final
/// held-out depth loss; validation uses the same scenes as the main trainer.
pub fn train_probe(cfg: &ModelConfig, tp: &TrainParams, seed: u64) -> Result<(TrainLog, f32)> {
    crate::numcore::set_checked(tp.checked);
    let store = init_full_store(cfg, seed);
    let rng = Rng::new(seed);
    prefit_semantic(&store, cfg, &rng, tp.sem_prefit_steps, 8, 3e-3)?;
    FreezeSpec::probe().apply(&store);
    let sem_hash = store.group_hash(ParamGroup::Semantic);
    let mut opt = OptimizerState::new(&store, tp.lr);
    let data_rng = Rng::new(seed).stream("data");
    let mut log = TrainLog::default();
    let started = std::time::Instant::now();

    let probe_loss = |sample: &Sample| -> Result<Array> {
        let sem = semantic_forward(&sample.prompt, &store, cfg)?;
        let pred = probe_baseline(&sem, &store, cfg)?;
        depth_loss(&pred, &sample.depth, &sample.mask)
    };
    // Held-out scenes and their frozen semantic states, computed once.
    let val_rng = Rng::new(seed).stream("val");
    let val_samples: Vec<Sample> = (0..tp.val_scenes)
        .map(|i| {
            let phase = if i % 2 == 0 {
                CurriculumPhase::coarse()
            } else {
                CurriculumPhase::fine()
            };
            make_sample(&val_rng, i as u64, &phase, &TaskMix::t2i_only(), cfg.height, cfg.width)
        })
        .collect();
    let val_sem: Vec<Vec<SemanticState>> = no_grad(|| -> Result<_> {
        val_samples
            .iter()
            .map(|s| semantic_forward(&s.prompt, &store, cfg))
            .collect()
    })?;
    let validate = || -> Result<f32> {
        no_grad(|| {
            let mut total = 0.0f64;
            for (s, sem) in val_samples.iter().zip(&val_sem) {
                let pred = probe_baseline(sem, &store, cfg)?;
                total += depth_loss(&pred, &s.depth, &s.mask)?.item() as f64;
            }
            Ok((total / tp.val_scenes as f64) as f32)
        })
    };

    for step in 0..tp.steps_s1 {
        let phase = if step < (tp.steps_s1 as f32 * tp.phase_split) as u64 {
            Phase::Coarse
        } else {
            Phase::Fine
        };
        let val_depth_loss = (step % tp.val_every == 0).then(&validate).transpose()?;
        let batch = make_batch(
            &data_rng,
            step * tp.batch_size as u64,
            tp.batch_size,
            &CurriculumPhase::for_phase(phase),
            &Trainer::mix_for(phase),
            cfg.height,
            cfg.width,
        );
        let losses: Vec<Array> = batch
            .samples
            .iter()
            .map(probe_loss)
            .collect::<Result<_>>()?;
        let refs: Vec<&Array> = losses.iter().collect();
        let loss = Array::concat(&refs, 0)?.mean()?;
        let l_depth = loss.item();
        loss.backward()?;
        let grad_norm = if tp.grad_clip > 0.0 {
            store.clip_grad_norm(tp.grad_clip)
        } else {
            store.grad_norm()
        };
        opt.adam_step(&store)?;
        log.records.push(TrainRecord {
            step,
            stage: 1,
            phase,
            l_diff: None,
            l_depth,
            l_total: l_depth,
            grad_norm,
            wallclock: started.elapsed().as_secs_f64(),
            val_depth_loss,
            val_diff_loss: None,
        });
    }
    if store.group_hash(ParamGroup::Semantic) != sem_hash {
        return Err(Error::FrozenParamGradApplied {
            group: "semantic".into(),
        });
    }
    let final_val = validate()?;
    Ok((log, final_val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> TrainParams {
        TrainParams {
            steps_s1: 4,
            steps_s2: 4,
            phase_split: 0.5,
            batch_size: 2,
            lr: 3e-3,
            val_every: 2,
            val_scenes: 4,
            codec_prefit_steps: 5,
            sem_prefit_steps: 5,
            grad_clip: 1.0,
            checked: false,
        }
    }

    #[test]
    fn freeze_specs_match_stage_contracts() {
        let s1 = FreezeSpec::stage1();
        assert!(s1.trainable().contains(&ParamGroup::Spatial));
        assert!(s1.trainable().contains(&ParamGroup::Queries));
        assert!(s1.trainable().contains(&ParamGroup::DepthHead));
        assert!(s1.frozen().contains(&ParamGroup::Semantic));
        assert!(s1.frozen().contains(&ParamGroup::Dit));
        assert!(s1.frozen().contains(&ParamGroup::Adapter));
        assert!(s1.frozen().contains(&ParamGroup::Codec));
        let s2 = FreezeSpec::stage2(InjectMode::Add);
        assert!(s2.trainable().contains(&ParamGroup::Dit));
        assert!(s2.trainable().contains(&ParamGroup::Adapter));
        assert!(s2.frozen().contains(&ParamGroup::Semantic));
        assert!(s2.frozen().contains(&ParamGroup::Codec));
        assert!(FreezeSpec::stage2(InjectMode::None)
            .frozen()
            .contains(&ParamGroup::Adapter));
    }

    #[test]
    fn tiny_run_trains_both_stages() {
        let cfg = ModelConfig::tiny();
        let mut t = Trainer::new(cfg, tiny_params(), 0).unwrap();
        t.run_to_completion().unwrap();
        assert_eq!(t.log.records.len(), 8);
        assert_eq!(t.log.records[0].stage, 1);
        assert!(t.log.records[0].l_diff.is_none());
        let last = t.log.records.last().unwrap();
        assert_eq!(last.stage, 2);
        assert!(last.l_diff.is_some());
        // Joint objective additivity.
        for r in &t.log.records {
            if r.stage == 2 {
                let expect = r.l_diff.unwrap() + t.cfg.lambda * r.l_depth;
                assert!((r.l_total - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn phase_boundaries_are_visible_in_log() {
        let cfg = ModelConfig::tiny();
        let mut t = Trainer::new(cfg, tiny_params(), 1).unwrap();
        t.run_to_completion().unwrap();
        let phases: Vec<(u8, Phase)> = t.log.records.iter().map(|r| (r.stage, r.phase)).collect();
        assert_eq!(
            phases,
            vec![
                (1, Phase::Coarse),
                (1, Phase::Coarse),
                (1, Phase::Fine),
                (1, Phase::Fine),
                (2, Phase::Coarse),
                (2, Phase::Coarse),
                (2, Phase::Fine),
                (2, Phase::Fine),
            ]
        );
        assert_eq!(t.phase_boundaries(), vec![2, 4, 6]);
    }

    #[test]
    fn frozen_groups_bit_identical_across_steps() {
        let cfg = ModelConfig::tiny();
        let mut t = Trainer::new(cfg, tiny_params(), 2).unwrap();
        let sem = t.store.group_hash(ParamGroup::Semantic);
        let codec = t.store.group_hash(ParamGroup::Codec);
        let dit = t.store.group_hash(ParamGroup::Dit);
        let adapter = t.store.group_hash(ParamGroup::Adapter);
        for _ in 0..4 {
            t.step_once().unwrap();
        }
        // Stage 1: semantic, dit, adapter, codec untouched.
        assert_eq!(t.store.group_hash(ParamGroup::Semantic), sem);
        assert_eq!(t.store.group_hash(ParamGroup::Codec), codec);
        assert_eq!(t.store.group_hash(ParamGroup::Dit), dit);
        assert_eq!(t.store.group_hash(ParamGroup::Adapter), adapter);
        for _ in 0..4 {
            t.step_once().unwrap();
        }
        // Stage 2: semantic and codec still untouched.
        assert_eq!(t.store.group_hash(ParamGroup::Semantic), sem);
        assert_eq!(t.store.group_hash(ParamGroup::Codec), codec);
    }

    #[test]
    fn stage2_lambda_zero_matches_diff_only_grads() {
        let mut cfg = ModelConfig::tiny();
        cfg.lambda = 0.0;
        let tp = tiny_params();
        // Build two trainers with identical state; one computes the joint
        // loss with lambda 0, the other the diffusion loss alone. Gradients
        // on a trainable dit parameter must agree bit-for-bit.
        let mut t = Trainer::new(cfg.clone(), tp.clone(), 3).unwrap();
        while t.global_step < t.tp.steps_s1 {
            t.step_once().unwrap();
        }
        let ckpt = t.checkpoint_bytes();
        // Run one joint step with lambda 0.
        let mut a = Trainer::from_checkpoint(tp.clone(), &ckpt).unwrap();
        a.stage2_step().unwrap();
        // Manually run the diffusion-loss-only step on the same state.
        let b = Trainer::from_checkpoint(tp, &ckpt).unwrap();
        FreezeSpec::stage2(b.cfg.inject_mode).apply(&b.store);
        {
            let step = b.global_step;
            let (_, phase) = b.position(step);
            let batch = make_batch(
                &Rng::new(b.seed).stream("data"),
                step * b.tp.batch_size as u64,
                b.tp.batch_size,
                &CurriculumPhase::for_phase(phase),
                &Trainer::mix_for(phase),
                b.cfg.height,
                b.cfg.width,
            );
            let noise_rng = Rng::new(b.seed).stream("s2-noise").fork(step);
            let mut diff_losses = Vec::new();
            for (i, sample) in batch.samples.iter().enumerate() {
                let mut rng = noise_rng.fork(i as u64);
                let sem = semantic_forward(&sample.prompt, &b.store, &b.cfg).unwrap();
                let sem_m = &sem[b.cfg.m_layers - 1];
                let geo0 = init_geo_states(&b.store, sample.source_image.as_ref(), &b.cfg).unwrap();
                let geo = derive_geometry(&geo0, &sem, &b.cfg, &b.store).unwrap();
                let pred = decode_depth(&geo, &b.store, &b.cfg).unwrap();
                let z0 = latent_encode(&sample.image, &b.store, &b.cfg).unwrap();
                let t_step = rng.int_in(1, b.cfg.t_steps);
                let eps = Array::randn(z0.shape(), &mut rng);
                let z_t = q_sample(&z0, t_step, &eps, &b.sched).unwrap();
                let f = depth_adapter(&pred, &b.store, &b.cfg).unwrap();
                let z_hat = fuse_latent(&z_t, Some(&f), b.cfg.inject_mode, &b.store).unwrap();
                let eps_pred = dit_forward(&z_hat, t_step, sem_m, &b.store, &b.cfg).unwrap();
                diff_losses.push(diffusion_loss(&eps_pred, &eps).unwrap());
            }
            let refs: Vec<&Array> = diff_losses.iter().collect();
            let loss = Array::concat(&refs, 0).unwrap().mean().unwrap();
            loss.backward().unwrap();
        }
        // Compare a dit gradient captured during the joint step against the
        // diff-only gradient: with lambda 0 the depth term contributes
        // exactly zero, so the applied updates must match bit-for-bit.
        let wa = a.store.get("dit.in.w").values();
        {
            // Apply the same optimizer update manually on b.
            let mut opt = OptimizerState::new(&b.store, b.tp.lr);
            opt.adam_step(&b.store).unwrap();
            let wb = b.store.get("dit.in.w").values();
            assert!(wa
                .iter()
                .zip(&wb)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn resume_replays_identically() {
        let cfg = ModelConfig::tiny();
        let tp = tiny_params();
        let mut full = Trainer::new(cfg.clone(), tp.clone(), 4).unwrap();
        full.run_to_completion().unwrap();

        let mut first = Trainer::new(cfg, tp.clone(), 4).unwrap();
        for _ in 0..5 {
            first.step_once().unwrap();
        }
        let ckpt = first.checkpoint_bytes();
        let mut resumed = Trainer::from_checkpoint(tp, &ckpt).unwrap();
        resumed.run_to_completion().unwrap();

        let tail = TrainLog {
            records: full.log.records[5..].to_vec(),
        };
        assert!(tail.eq_ignoring_wallclock(&resumed.log));
        assert_eq!(full.checkpoint_bytes(), resumed.checkpoint_bytes());
    }

    #[test]
    fn ndjson_round_trip() {
        let cfg = ModelConfig::tiny();
        let mut t = Trainer::new(cfg, tiny_params(), 5).unwrap();
        for _ in 0..3 {
            t.step_once().unwrap();
        }
        let text = t.log.to_ndjson();
        let back = TrainLog::from_ndjson(&text).unwrap();
        assert!(t.log.eq_ignoring_wallclock(&back));
        // Stage-1 records serialize without an l_diff field.
        assert!(!text.lines().next().unwrap().contains("l_diff"));
    }

    #[test]
    fn determinism_same_seed_same_checkpoint() {
        let cfg = ModelConfig::tiny();
        let tp = tiny_params();
        let mut a = Trainer::new(cfg.clone(), tp.clone(), 6).unwrap();
        a.run_to_completion().unwrap();
        let mut b = Trainer::new(cfg, tp, 6).unwrap();
        b.run_to_completion().unwrap();
        assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
        assert!(a.log.eq_ignoring_wallclock(&b.log));
    }

    #[test]
    fn probe_trains_and_keeps_semantic_frozen() {
        let cfg = ModelConfig::tiny();
        let (log, final_val) = train_probe(&cfg, &tiny_params(), 7).unwrap();
        assert_eq!(log.records.len(), 4);
        assert!(log.records.iter().all(|r| r.l_diff.is_none()));
        assert!(final_val.is_finite());
    }

    #[test]
    fn adapter_counter_zero_without_injection() {
        let mut cfg = ModelConfig::tiny();
        cfg.inject_mode = InjectMode::None;
        let mut t = Trainer::new(cfg, tiny_params(), 8).unwrap();
        t.run_to_completion().unwrap();
        assert_eq!(t.adapter_calls, 0);
        let mut cfg2 = ModelConfig::tiny();
        cfg2.inject_mode = InjectMode::Add;
        let mut t2 = Trainer::new(cfg2, tiny_params(), 8).unwrap();
        t2.run_to_completion().unwrap();
        assert!(t2.adapter_calls > 0);
    }
}
