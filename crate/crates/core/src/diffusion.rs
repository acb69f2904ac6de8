//! Toy latent diffusion: a frozen 8x latent codec, the noise schedule, the
//! depth adapter, element-wise latent fusion, a small denoising transformer
//! conditioned on the final semantic states, and an ancestral sampler.
//!
//! Latents are (h, w, c) arrays with h = H/8, w = W/8.

use crate::attention::{dit_blocks, semantic_forward, SemanticState};
use crate::config::{InjectMode, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{decode_depth, derive_geometry, init_geo_states, DepthMap};
use crate::numcore::{no_grad, Array, ParamGroup, ParamStore, Rng};

// ---------------------------------------------------------------------------
// Noise schedule

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    /// alpha_bars[t-1] is the cumulative product through step t.
    pub alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    /// Linear beta ramp over T steps.
    pub fn linear(t_steps: usize, beta_start: f32, beta_end: f32) -> NoiseSchedule {
        let mut betas = Vec::with_capacity(t_steps);
        for i in 0..t_steps {
            let frac = if t_steps == 1 { 0.0 } else { i as f32 / (t_steps - 1) as f32 };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a as f64;
            alpha_bars.push(prod as f32);
        }
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn for_config(cfg: &ModelConfig) -> NoiseSchedule {
        Self::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps() {
            return Err(Error::TOutOfRange {
                t,
                t_max: self.t_steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f32> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// Forward noising: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. The noise
/// is supplied explicitly for determinism.
pub fn q_sample(z0: &Array, t: usize, eps: &Array, sched: &NoiseSchedule) -> Result<Array> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let abar = sched.alpha_bar(t)?;
    z0.scale(abar.sqrt())?.add(&eps.scale((1.0 - abar).sqrt())?)
}

// ---------------------------------------------------------------------------
// Latent codec (frozen after a one-time pre-fit)

fn conv1x1(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    let s = x.shape().to_vec();
    let c_out = w.shape()[1];
    x.reshape(&[s[0] * s[1], s[2]])?
        .matmul(w)?
        .add_bias(b)?
        .reshape(&[s[0], s[1], c_out])
}

pub fn init_codec_params(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    let mut r = rng.stream("codec");
    let c = cfg.c_latent;
    let lin = |r: &mut Rng, fan_in: usize, out: usize| {
        let w = Array::randn(&[fan_in, out], r)
            .scale(1.0 / (fan_in as f32).sqrt())
            .unwrap();
        Array::from_vec(w.values(), &[fan_in, out]).unwrap()
    };
    let pairs = [
        ("codec.e1", 12, 32),
        ("codec.e2", 128, 64),
        ("codec.e3", 256, c),
        ("codec.d1", c, 256),
        ("codec.d2", 64, 128),
        ("codec.d3", 32, 12),
    ];
    for (name, fan_in, out) in pairs {
        store.insert(&format!("{name}.w"), ParamGroup::Codec, lin(&mut r, fan_in, out));
        store.insert(&format!("{name}.b"), ParamGroup::Codec, Array::zeros(&[out]));
    }
}

/// 8x-downsampling encoder: (H, W, 3) -> (H/8, W/8, c_latent).
pub fn latent_encode(image: &Array, params: &ParamStore, cfg: &ModelConfig) -> Result<Array> {
    if image.shape() != [cfg.height, cfg.width, 3] {
        return Err(Error::ShapeMismatch {
            op: "latent_encode",
            lhs: image.shape().to_vec(),
            rhs: vec![cfg.height, cfg.width, 3],
        });
    }
    let x = image.space_to_depth()?;
    let x = conv1x1(&x, params.get("codec.e1.w"), params.get("codec.e1.b"))?.gelu()?;
    let x = x.space_to_depth()?;
    let x = conv1x1(&x, params.get("codec.e2.w"), params.get("codec.e2.b"))?.gelu()?;
    let x = x.space_to_depth()?;
    conv1x1(&x, params.get("codec.e3.w"), params.get("codec.e3.b"))
}

/// Matching decoder: (H/8, W/8, c_latent) -> (H, W, 3) in [0, 1].
pub fn latent_decode(z: &Array, params: &ParamStore, cfg: &ModelConfig) -> Result<Array> {
    if z.shape() != [cfg.latent_h(), cfg.latent_w(), cfg.c_latent] {
        return Err(Error::ShapeMismatch {
            op: "latent_decode",
            lhs: z.shape().to_vec(),
            rhs: vec![cfg.latent_h(), cfg.latent_w(), cfg.c_latent],
        });
    }
    let x = conv1x1(z, params.get("codec.d1.w"), params.get("codec.d1.b"))?.gelu()?;
    let x = x.depth_to_space()?;
    let x = conv1x1(&x, params.get("codec.d2.w"), params.get("codec.d2.b"))?.gelu()?;
    let x = x.depth_to_space()?;
    let x = conv1x1(&x, params.get("codec.d3.w"), params.get("codec.d3.b"))?;
    x.depth_to_space()?.sigmoid()
}

// ---------------------------------------------------------------------------
// Depth adapter E_phi

pub fn init_adapter_params(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    let mut r = rng.stream("adapter");
    let c = cfg.c_latent;
    let lin = |r: &mut Rng, fan_in: usize, out: usize| {
        let w = Array::randn(&[fan_in, out], r)
            .scale(1.0 / (fan_in as f32).sqrt())
            .unwrap();
        Array::from_vec(w.values(), &[fan_in, out]).unwrap()
    };
    store.insert("adapter.c1.w", ParamGroup::Adapter, lin(&mut r, 4, 8));
    store.insert("adapter.c1.b", ParamGroup::Adapter, Array::zeros(&[8]));
    store.insert("adapter.c2.w", ParamGroup::Adapter, lin(&mut r, 32, 16));
    store.insert("adapter.c2.b", ParamGroup::Adapter, Array::zeros(&[16]));
    // Zero-init final projection: geometry injection starts as a no-op.
    store.insert("adapter.out.w", ParamGroup::Adapter, Array::zeros(&[64, c]));
    store.insert("adapter.out.b", ParamGroup::Adapter, Array::zeros(&[c]));
    // Concat fusion re-projects (2c) back to c; initialized to pass z
    // through. Only materialized when the config can reach it, since every
    // trainable parameter must receive gradients.
    if cfg.inject_mode == InjectMode::Concat {
        let mut reproj = vec![0.0f32; 2 * c * c];
        for i in 0..c {
            reproj[i * c + i] = 1.0;
        }
        store.insert(
            "adapter.reproj.w",
            ParamGroup::Adapter,
            Array::from_vec(reproj, &[2 * c, c]).unwrap(),
        );
        store.insert("adapter.reproj.b", ParamGroup::Adapter, Array::zeros(&[c]));
    }
}

/// Strided encoder aligning a depth map with the latent space:
/// (H, W) -> (H/8, W/8, c_latent).
pub fn depth_adapter(depth: &DepthMap, params: &ParamStore, cfg: &ModelConfig) -> Result<Array> {
    if depth.array().shape() != [cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            op: "depth_adapter",
            lhs: depth.array().shape().to_vec(),
            rhs: vec![cfg.height, cfg.width],
        });
    }
    // Meters land around [0, 1] under the fixed scene depth scale.
    let x = depth
        .array()
        .scale(1.0 / crate::geometry::DEPTH_SCALE)?
        .reshape(&[cfg.height, cfg.width, 1])?;
    let x = x.space_to_depth()?;
    let x = conv1x1(&x, params.get("adapter.c1.w"), params.get("adapter.c1.b"))?.gelu()?;
    let x = x.space_to_depth()?;
    let x = conv1x1(&x, params.get("adapter.c2.w"), params.get("adapter.c2.b"))?.gelu()?;
    let x = x.space_to_depth()?;
    conv1x1(&x, params.get("adapter.out.w"), params.get("adapter.out.b"))
}

/// Inject depth features into the noisy latent.
pub fn fuse_latent(
    z_t: &Array,
    f_depth: Option<&Array>,
    mode: InjectMode,
    params: &ParamStore,
) -> Result<Array> {
    match mode {
        InjectMode::None => Ok(z_t.clone()),
        InjectMode::Add => {
            let f = f_depth.ok_or(Error::Config("add fusion requires depth features".into()))?;
            z_t.add(f)
        }
        InjectMode::Concat => {
            let f = f_depth.ok_or(Error::Config("concat fusion requires depth features".into()))?;
            if z_t.shape()[..2] != f.shape()[..2] {
                return Err(Error::ShapeMismatch {
                    op: "fuse_latent",
                    lhs: z_t.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            let cat = Array::concat(&[z_t, f], 2)?;
            conv1x1(&cat, params.get("adapter.reproj.w"), params.get("adapter.reproj.b"))
        }
    }
}

// ---------------------------------------------------------------------------
// Denoiser

/// Sinusoidal embedding of the step index.
pub fn time_embedding(t: usize, d: usize) -> Array {
    let mut v = vec![0.0f32; d];
    for k in 0..d / 2 {
        let omega = 1.0 / 10_000f64.powf(2.0 * k as f64 / d as f64);
        let arg = t as f64 * omega;
        v[2 * k] = arg.sin() as f32;
        v[2 * k + 1] = arg.cos() as f32;
    }
    Array::from_vec(v, &[d]).unwrap()
}

/// Predict the noise in a (possibly geometry-fused) latent, conditioned on
/// the final semantic states: patchify, add time and position embeddings,
/// concatenate with projected semantic tokens into one sequence, run the
/// block stack with full attention, unpatchify the latent positions.
pub fn dit_forward(
    z_hat: &Array,
    t: usize,
    sem_m: &SemanticState,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Array> {
    let (h, w, c) = (cfg.latent_h(), cfg.latent_w(), cfg.c_latent);
    if z_hat.shape() != [h, w, c] {
        return Err(Error::ShapeMismatch {
            op: "dit_forward",
            lhs: z_hat.shape().to_vec(),
            rhs: vec![h, w, c],
        });
    }
    if t < 1 || t > cfg.t_steps {
        return Err(Error::TOutOfRange {
            t,
            t_max: cfg.t_steps,
        });
    }
    let latent_tokens = z_hat
        .reshape(&[h * w, c])?
        .matmul(params.get("dit.in.w"))?
        .add_bias(params.get("dit.in.b"))?
        .add_bias(&time_embedding(t, cfg.d_model))?
        .add(params.get("dit.pos"))?;
    let sem_tokens = sem_m
        .hidden
        .matmul(params.get("dit.sem.w"))?
        .add_bias(params.get("dit.sem.b"))?;
    let seq = Array::concat(&[&latent_tokens, &sem_tokens], 0)?;
    let out = dit_blocks(&seq, params, cfg)?;
    out.narrow(0, 0, h * w)?
        .matmul(params.get("dit.out.w"))?
        .add_bias(params.get("dit.out.b"))?
        .reshape(&[h, w, c])
}

/// Mean squared error over all latent elements.
pub fn diffusion_loss(eps_pred: &Array, eps: &Array) -> Result<Array> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_loss",
            lhs: eps_pred.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let diff = eps_pred.sub(eps)?;
    diff.mul(&diff)?.mean()
}

// ---------------------------------------------------------------------------
// Sampling

pub struct SampleOutput {
    pub image: Array,
    pub depth: DepthMap,
    /// Denoising steps executed.
    pub steps: usize,
}

/// Full generation: parse the prompt, derive depth once, compute depth
/// features once, then ancestral denoising from pure noise with fusion
/// applied at every step. Returns the decoded image and the derived depth.
pub fn sample(
    prompt: &[u32],
    source_image: Option<&Array>,
    params: &ParamStore,
    cfg: &ModelConfig,
    rng: &mut Rng,
) -> Result<SampleOutput> {
    no_grad(|| {
        let sched = NoiseSchedule::for_config(cfg);
        let sem_states = semantic_forward(prompt, params, cfg)?;
        let sem_m = &sem_states[cfg.m_layers - 1];
        let geo0 = init_geo_states(params, source_image, cfg)?;
        let geo = derive_geometry(&geo0, &sem_states, cfg, params)?;
        let depth = decode_depth(&geo, params, cfg)?;
        let f_depth = match cfg.inject_mode {
            InjectMode::None => None,
            _ => Some(depth_adapter(&depth, params, cfg)?),
        };
        let (h, w, c) = (cfg.latent_h(), cfg.latent_w(), cfg.c_latent);
        let mut z = Array::randn(&[h, w, c], rng);
        let mut steps = 0;
        for t in (1..=cfg.t_steps).rev() {
            let z_hat = fuse_latent(&z, f_depth.as_ref(), cfg.inject_mode, params)?;
            let eps_pred = dit_forward(&z_hat, t, sem_m, params, cfg)?;
            let beta = sched.betas[t - 1];
            let alpha = sched.alphas[t - 1];
            let abar = sched.alpha_bars[t - 1];
            let coeff = beta / (1.0 - abar).sqrt();
            let mean = z
                .sub(&eps_pred.scale(coeff)?)?
                .scale(1.0 / alpha.sqrt())?;
            z = if t > 1 {
                let abar_prev = sched.alpha_bars[t - 2];
                let sigma = (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt();
                let noise = Array::randn(&[h, w, c], rng);
                mean.add(&noise.scale(sigma)?)?
            } else {
                mean
            };
            steps += 1;
        }
        let image = latent_decode(&z, params, cfg)?;
        Ok(SampleOutput {
            image,
            depth,
            steps,
        })
    })
}

// ---------------------------------------------------------------------------
// Codec pre-fit

/// One-time reconstruction fit of the codec on rendered scenes; the codec is
/// frozen for the rest of the run. Returns the final training MSE.
pub fn prefit_codec(
    store: &ParamStore,
    cfg: &ModelConfig,
    rng: &Rng,
    steps: usize,
    batch_size: usize,
    lr: f32,
) -> Result<f32> {
    use crate::numcore::OptimizerState;
    use crate::scenegen::{make_sample, CurriculumPhase, TaskMix};

    store.set_trainable_groups(&[ParamGroup::Codec]);
    let mut opt = OptimizerState::new(store, lr);
    let data_rng = rng.stream("codec-data");
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
            let sample = make_sample(&data_rng, idx, &phase, &TaskMix::t2i_only(), cfg.height, cfg.width);
            let z = latent_encode(&sample.image, store, cfg)?;
            let rec = latent_decode(&z, store, cfg)?;
            let diff = rec.sub(&sample.image)?;
            losses.push(diff.mul(&diff)?.mean()?);
        }
        let refs: Vec<&Array> = losses.iter().collect();
        let loss = Array::concat(&refs, 0)?.mean()?;
        last = loss.item();
        loss.backward()?;
        opt.adam_step(store)?;
    }
    Ok(last)
}

/// Mean absolute reconstruction error over held-out rendered scenes.
pub fn codec_round_trip_mae(store: &ParamStore, cfg: &ModelConfig, rng: &Rng, scenes: usize) -> Result<f32> {
    use crate::scenegen::{make_sample, CurriculumPhase, TaskMix};
    no_grad(|| {
        let val_rng = rng.stream("codec-val");
        let mut total = 0.0f64;
        for i in 0..scenes {
            let phase = if i % 2 == 0 {
                CurriculumPhase::coarse()
            } else {
                CurriculumPhase::fine()
            };
            let sample = make_sample(&val_rng, i as u64, &phase, &TaskMix::t2i_only(), cfg.height, cfg.width);
            let z = latent_encode(&sample.image, store, cfg)?;
            let rec = latent_decode(&z, store, cfg)?;
            let mae = rec.sub(&sample.image)?.abs()?.mean()?.item();
            total += mae as f64;
        }
        Ok((total / scenes as f64) as f32)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::init_dit_params;
    use crate::numcore::grad_check_params;

    fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let rng = Rng::new(seed).stream("init");
        crate::attention::init_semantic_params(&mut store, &rng, cfg);
        init_dit_params(&mut store, &rng, cfg);
        init_codec_params(&mut store, &rng, cfg);
        init_adapter_params(&mut store, &rng, cfg);
        store
    }

    #[test]
    fn schedule_alpha_bars_strictly_decreasing() {
        let cfg = ModelConfig::desk();
        let s = NoiseSchedule::for_config(&cfg);
        for pair in s.alpha_bars.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        assert!(s.alpha_bars[0] > 0.999, "abar_1 = {}", s.alpha_bars[0]);
        let last = *s.alpha_bars.last().unwrap();
        assert!(last < 0.01, "abar_T = {last}");
    }

    #[test]
    fn q_sample_zero_noise_scales_z0() {
        let cfg = ModelConfig::tiny();
        let s = NoiseSchedule::for_config(&cfg);
        let mut rng = Rng::new(0);
        let z0 = Array::randn(&[2, 2, 2], &mut rng);
        let eps = Array::zeros(&[2, 2, 2]);
        let t = 3;
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let abar = s.alpha_bar(t).unwrap();
        for (a, b) in zt.values().iter().zip(z0.values()) {
            assert!((a - b * abar.sqrt()).abs() < 1e-7);
        }
    }

    #[test]
    fn q_sample_t1_close_to_z0() {
        let cfg = ModelConfig::desk();
        let s = NoiseSchedule::for_config(&cfg);
        let mut rng = Rng::new(1);
        let z0 = Array::randn(&[2, 2, 2], &mut rng);
        let eps = Array::randn(&[2, 2, 2], &mut rng);
        let zt = q_sample(&z0, 1, &eps, &s).unwrap();
        let abar1 = s.alpha_bar(1).unwrap();
        let eps_max = eps.values().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let bound = (1.0 - abar1).sqrt() * eps_max;
        for (a, b) in zt.values().iter().zip(z0.values()) {
            assert!((a - b).abs() <= bound + (1.0 - abar1.sqrt()) * b.abs() + 1e-6);
        }
    }

    #[test]
    fn q_sample_rejects_out_of_range_t() {
        let cfg = ModelConfig::tiny();
        let s = NoiseSchedule::for_config(&cfg);
        let z0 = Array::zeros(&[1, 1, 2]);
        let eps = Array::zeros(&[1, 1, 2]);
        assert!(matches!(
            q_sample(&z0, 0, &eps, &s),
            Err(Error::TOutOfRange { .. })
        ));
        assert!(matches!(
            q_sample(&z0, cfg.t_steps + 1, &eps, &s),
            Err(Error::TOutOfRange { .. })
        ));
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        // Monte-Carlo: Var(z_t) ~= abar * Var(z0) + (1 - abar) within 5%.
        let cfg = ModelConfig::desk();
        let s = NoiseSchedule::for_config(&cfg);
        let mut rng = Rng::new(42);
        let t = 40;
        let abar = s.alpha_bar(t).unwrap() as f64;
        let z0_var = 2.0f64;
        let n = 10_000;
        let mut acc = 0.0f64;
        let mut acc2 = 0.0f64;
        for _ in 0..n {
            let z0 = Array::randn(&[1], &mut rng).scale(z0_var.sqrt() as f32).unwrap();
            let eps = Array::randn(&[1], &mut rng);
            let zt = q_sample(&z0, t, &eps, &s).unwrap().item() as f64;
            acc += zt;
            acc2 += zt * zt;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let expected = abar * z0_var + (1.0 - abar);
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} expected {expected}"
        );
    }

    #[test]
    fn adapter_outputs_zero_at_init() {
        let cfg = ModelConfig::tiny();
        let store = store_for(&cfg, 0);
        let mut rng = Rng::new(3);
        let d = DepthMap::from_vec(
            (0..cfg.height * cfg.width).map(|_| rng.range_f32(1.0, 9.0)).collect(),
            cfg.height,
            cfg.width,
        );
        let f = depth_adapter(&d, &store, &cfg).unwrap();
        assert_eq!(f.shape(), &[cfg.latent_h(), cfg.latent_w(), cfg.c_latent]);
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_add_identity_and_arithmetic() {
        let cfg = ModelConfig::tiny();
        let store = store_for(&cfg, 0);
        let mut rng = Rng::new(4);
        let z = Array::randn(&[1, 1, 2], &mut rng);
        let zero = Array::zeros(&[1, 1, 2]);
        let fused = fuse_latent(&z, Some(&zero), InjectMode::Add, &store).unwrap();
        assert!(fused.bits_eq(&z));
        let z = Array::from_vec(vec![0.25, 0.0], &[1, 1, 2]).unwrap();
        let f = Array::from_vec(vec![0.5, 0.0], &[1, 1, 2]).unwrap();
        let fused = fuse_latent(&z, Some(&f), InjectMode::Add, &store).unwrap();
        assert_eq!(fused.values()[0], 0.75);
    }

    #[test]
    fn fuse_none_ignores_depth_features() {
        let cfg = ModelConfig::tiny();
        let store = store_for(&cfg, 0);
        let mut rng = Rng::new(5);
        let z = Array::randn(&[1, 1, 2], &mut rng);
        let f = Array::randn(&[1, 1, 2], &mut rng);
        let fused = fuse_latent(&z, Some(&f), InjectMode::None, &store).unwrap();
        assert!(fused.bits_eq(&z));
    }

    #[test]
    fn fuse_concat_starts_as_passthrough() {
        let mut cfg = ModelConfig::tiny();
        cfg.inject_mode = InjectMode::Concat;
        let store = store_for(&cfg, 0);
        let mut rng = Rng::new(6);
        let z = Array::randn(&[1, 1, cfg.c_latent], &mut rng);
        let f = Array::randn(&[1, 1, cfg.c_latent], &mut rng);
        let fused = fuse_latent(&z, Some(&f), InjectMode::Concat, &store).unwrap();
        for (a, b) in fused.values().iter().zip(z.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn sem_state(cfg: &ModelConfig, store: &ParamStore) -> SemanticState {
        let tokens = [0u32, 4, 2, 8, 35, 39, 11, 19, 27, 1];
        let states = semantic_forward(&tokens, store, cfg).unwrap();
        states[cfg.m_layers - 1].clone()
    }

    #[test]
    fn dit_output_shape_and_conditioning() {
        let cfg = ModelConfig::tiny();
        let store = store_for(&cfg, 0);
        // Zero-init output/residual projections hide conditioning; kick them.
        let mut kick = Rng::new(9).stream("kick");
        for name in ["dit.out.w", "dit.l0.wo", "dit.l0.ffn.w2"] {
            let p = store.get(name);
            p.set_data(&(0..p.numel()).map(|_| kick.normal() * 0.1).collect::<Vec<f32>>());
        }
        let mut rng = Rng::new(7);
        let z = Array::randn(&[cfg.latent_h(), cfg.latent_w(), cfg.c_latent], &mut rng);
        let sem = sem_state(&cfg, &store);
        let out = dit_forward(&z, 2, &sem, &store, &cfg).unwrap();
        assert_eq!(out.shape(), z.shape());
        // Changing t changes the prediction.
        let out_t3 = dit_forward(&z, 3, &sem, &store, &cfg).unwrap();
        assert!(!out.bits_eq(&out_t3));
        // Changing the semantic conditioning changes the prediction.
        let other = SemanticState {
            hidden: Array::randn(&[sem.hidden.shape()[0], cfg.d_model], &mut rng),
            layer_index: sem.layer_index,
        };
        let out_sem = dit_forward(&z, 2, &other, &store, &cfg).unwrap();
        assert!(!out.bits_eq(&out_sem));
    }

    #[test]
    fn diffusion_loss_oracle_values() {
        let mut rng = Rng::new(8);
        let eps = Array::randn(&[2, 2, 2], &mut rng);
        assert_eq!(diffusion_loss(&eps, &eps).unwrap().item(), 0.0);
        let off = eps.add(&Array::full(&[2, 2, 2], 1.0)).unwrap();
        let l = diffusion_loss(&off, &eps).unwrap().item();
        assert!((l - 1.0).abs() < 1e-6);
        for _ in 0..10 {
            let a = Array::randn(&[2, 2, 2], &mut rng);
            let b = Array::randn(&[2, 2, 2], &mut rng);
            assert!(diffusion_loss(&a, &b).unwrap().item() >= 0.0);
        }
    }

    #[test]
    fn gradcheck_adapter_and_dit() {
        let cfg = ModelConfig::tiny();
        let store = store_for(&cfg, 0);
        // Give zero-init projections live values so their gradients are
        // informative, then check against the finite-difference oracle.
        let mut kick = Rng::new(10).stream("kick");
        for name in ["adapter.out.w", "dit.out.w", "dit.l0.wo", "dit.l0.ffn.w2"] {
            let p = store.get(name);
            p.set_data(&(0..p.numel()).map(|_| kick.normal() * 0.1).collect::<Vec<f32>>());
        }
        store.set_trainable_groups(&[ParamGroup::Adapter, ParamGroup::Dit]);
        let mut rng = Rng::new(11);
        let depth = DepthMap::from_vec(
            (0..cfg.height * cfg.width).map(|_| rng.range_f32(1.0, 9.0)).collect(),
            cfg.height,
            cfg.width,
        );
        let sem = sem_state(&cfg, &store);
        let sched = NoiseSchedule::for_config(&cfg);
        let z0 = Array::randn(&[cfg.latent_h(), cfg.latent_w(), cfg.c_latent], &mut rng);
        let eps = Array::randn(&[cfg.latent_h(), cfg.latent_w(), cfg.c_latent], &mut rng);
        let f = || {
            let f_depth = depth_adapter(&depth, &store, &cfg)?;
            let z_t = q_sample(&z0, 2, &eps, &sched)?;
            let z_hat = fuse_latent(&z_t, Some(&f_depth), InjectMode::Add, &store)?;
            let pred = dit_forward(&z_hat, 2, &sem, &store, &cfg)?;
            diffusion_loss(&pred, &eps)
        };
        let params: Vec<(&str, Array)> = vec![
            ("adapter.c1.w", store.get("adapter.c1.w").clone()),
            ("adapter.out.w", store.get("adapter.out.w").clone()),
            ("dit.in.w", store.get("dit.in.w").clone()),
            ("dit.l0.wq", store.get("dit.l0.wq").clone()),
            ("dit.out.b", store.get("dit.out.b").clone()),
        ];
        let report = grad_check_params(&f, &params, 1e-3).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn codec_shapes_round_trip() {
        let cfg = ModelConfig::tiny();
        let store = store_for(&cfg, 0);
        let mut rng = Rng::new(12);
        let img = Array::from_vec(
            (0..cfg.height * cfg.width * 3).map(|_| rng.range_f32(0.0, 1.0)).collect(),
            &[cfg.height, cfg.width, 3],
        )
        .unwrap();
        let z = latent_encode(&img, &store, &cfg).unwrap();
        assert_eq!(z.shape(), &[cfg.latent_h(), cfg.latent_w(), cfg.c_latent]);
        let rec = latent_decode(&z, &store, &cfg).unwrap();
        assert_eq!(rec.shape(), img.shape());
        assert!(rec.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[cfg(test)]
mod prefit_tests {
    use super::*;

    #[test]
    fn codec_prefit_reaches_target_mae() {
        // Round-trip MAE <= 0.05 on 64 held-out rendered scenes after the
        // one-time pre-fit.
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let rng = Rng::new(0).stream("init");
        init_codec_params(&mut store, &rng, &cfg);
        let t0 = std::time::Instant::now();
        let final_mse = prefit_codec(&store, &cfg, &Rng::new(0), 400, 8, 3e-3).unwrap();
        let mae = codec_round_trip_mae(&store, &cfg, &Rng::new(0), 64).unwrap();
        eprintln!("codec prefit: {:?}, final mse {final_mse}, held-out mae {mae}", t0.elapsed());
        assert!(mae <= 0.05, "held-out MAE {mae} > 0.05");
    }
}
