//! Geometric derivation: learnable queries (optionally augmented with patch
//! features of a source image), the spatial stack, the dense depth decode
//! head, and the masked depth regression loss.

use crate::attention::{mapped_layer, spatial_block, GeoState, SemanticState};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{Array, ParamGroup, ParamStore, Rng};

/// Depth positivity comes from softplus; this fixed scale keeps the head's
/// pre-activations O(1) while covering the 1-10 m scene range.
pub const DEPTH_SCALE: f32 = 10.0;

/// Dense metric depth in meters, positive where valid.
#[derive(Clone)]
pub struct DepthMap {
    values: Array,
}

impl DepthMap {
    pub fn from_vec(values: Vec<f32>, h: usize, w: usize) -> DepthMap {
        DepthMap {
            values: Array::from_vec(values, &[h, w]).unwrap(),
        }
    }

    pub fn from_array(values: Array) -> DepthMap {
        assert_eq!(values.shape().len(), 2, "depth map must be (H, W)");
        DepthMap { values }
    }

    pub fn array(&self) -> &Array {
        &self.values
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> Vec<f32> {
        self.values.values()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values.data()[r * self.w() + c]
    }
}

/// Per-pixel validity; |M| is the number of true entries.
#[derive(Clone)]
pub struct ValidMask {
    mask: Vec<bool>,
    h: usize,
    w: usize,
}

impl ValidMask {
    pub fn new(mask: Vec<bool>, h: usize, w: usize) -> ValidMask {
        assert_eq!(mask.len(), h * w);
        ValidMask { mask, h, w }
    }

    pub fn all_true(h: usize, w: usize) -> ValidMask {
        ValidMask {
            mask: vec![true; h * w],
            h,
            w,
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.w + c]
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    fn as_f32(&self) -> Array {
        Array::from_vec(
            self.mask.iter().map(|&b| b as u8 as f32).collect(),
            &[self.h, self.w],
        )
        .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Parameters

pub fn init_query_bank(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    let mut r = rng.stream("queries");
    let q = Array::randn(&[cfg.n_geo_tokens, cfg.d_model], &mut r)
        .scale(0.5)
        .unwrap();
    store.insert(
        "queries.bank",
        ParamGroup::Queries,
        Array::from_vec(q.values(), &[cfg.n_geo_tokens, cfg.d_model]).unwrap(),
    );
}

/// Seed-pinned frozen patch embedding for source-image augmentation:
/// 4x4 RGB patches, one per geo token, linearly projected to d_model.
pub fn init_patch_encoder(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    let mut r = rng.stream("patch");
    let fan_in = 4 * 4 * 3;
    let w = Array::randn(&[fan_in, cfg.d_model], &mut r)
        .scale(1.0 / (fan_in as f32).sqrt())
        .unwrap();
    store.insert(
        "patch.w",
        ParamGroup::PatchEncoder,
        Array::from_vec(w.values(), &[fan_in, cfg.d_model]).unwrap(),
    );
}

fn head_widths(cfg: &ModelConfig) -> (usize, usize) {
    (cfg.d_model.max(8) / 2, (cfg.d_model / 8).max(2))
}

fn init_decode_head(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig, prefix: &str, group: ParamGroup) {
    let (c1, c2) = head_widths(cfg);
    let d = cfg.d_model;
    let mut r = rng.stream(prefix);
    let conv = |r: &mut Rng, fan_in: usize, out: usize| {
        let w = Array::randn(&[fan_in, out], r).scale(1.0 / (fan_in as f32).sqrt()).unwrap();
        Array::from_vec(w.values(), &[fan_in, out]).unwrap()
    };
    store.insert(&format!("{prefix}.c1.w"), group, conv(&mut r, 9 * d, c1));
    store.insert(&format!("{prefix}.c1.b"), group, Array::zeros(&[c1]));
    store.insert(&format!("{prefix}.c2.w"), group, conv(&mut r, 9 * c1, c2));
    store.insert(&format!("{prefix}.c2.b"), group, Array::zeros(&[c2]));
    // Zero-init final projection: initial depth is softplus(0) * scale
    // everywhere, a mid-range constant.
    store.insert(&format!("{prefix}.out.w"), group, Array::zeros(&[c2, 1]));
    store.insert(&format!("{prefix}.out.b"), group, Array::zeros(&[1]));
}

pub fn init_depth_head(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    init_decode_head(store, rng, cfg, "head", ParamGroup::DepthHead);
}

pub fn init_probe_head(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    init_decode_head(store, rng, cfg, "probe", ParamGroup::Probe);
}

// ---------------------------------------------------------------------------
// Forward paths

/// H_geo^(0): the query bank, plus per-token patch features when a source
/// image is present (editing mode).
pub fn init_geo_states(params: &ParamStore, image: Option<&Array>, cfg: &ModelConfig) -> Result<GeoState> {
    let queries = params.get("queries.bank");
    let hidden = match image {
        None => queries.clone(),
        Some(img) => {
            if img.shape() != [cfg.height, cfg.width, 3] {
                return Err(Error::ShapeMismatch {
                    op: "init_geo_states",
                    lhs: img.shape().to_vec(),
                    rhs: vec![cfg.height, cfg.width, 3],
                });
            }
            // Two space-to-depth steps collect each 4x4 patch into one row.
            let patches = img
                .space_to_depth()?
                .space_to_depth()?
                .reshape(&[cfg.n_geo_tokens, 4 * 4 * 3])?;
            let feats = patches.matmul(params.get("patch.w"))?;
            queries.add(&feats)?
        }
    };
    Ok(GeoState {
        hidden,
        layer_index: 0,
    })
}

/// Apply the L spatial blocks; block i reads the mapped semantic state per
/// the configured sharing strategy (none shares nothing).
pub fn derive_geometry(
    state0: &GeoState,
    sem_states: &[SemanticState],
    cfg: &ModelConfig,
    params: &ParamStore,
) -> Result<GeoState> {
    assert!(
        sem_states.len() == cfg.m_layers
            || (cfg.share_strategy == crate::config::ShareStrategy::None && sem_states.is_empty()),
        "expected one semantic state per layer"
    );
    let mut state = state0.clone();
    for i in 1..=cfg.l_layers {
        let sem = match mapped_layer(cfg.share_strategy, i, cfg.m_layers, cfg.l_layers)? {
            Some(j) => Some(&sem_states[j - 1]),
            None => None,
        };
        state = spatial_block(params, i - 1, &state, sem, cfg)?;
    }
    Ok(state)
}

fn conv3x3(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    let (h, ww) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[1];
    x.unfold3x3()?
        .matmul(w)?
        .add_bias(b)?
        .reshape(&[h, ww, c_out])
}

/// Dense prediction head: token grid -> two upsample+conv stages -> 1-channel
/// projection -> softplus, scaled to meters. Output is (H, W), positive.
pub fn decode_depth(state: &GeoState, params: &ParamStore, cfg: &ModelConfig) -> Result<DepthMap> {
    decode_depth_with(state.hidden.clone(), params, cfg, "head")
}

fn decode_depth_with(tokens: Array, params: &ParamStore, cfg: &ModelConfig, prefix: &str) -> Result<DepthMap> {
    let side = cfg.grid_side()?;
    if tokens.shape() != [cfg.n_geo_tokens, cfg.d_model] {
        return Err(Error::ShapeMismatch {
            op: "decode_depth",
            lhs: tokens.shape().to_vec(),
            rhs: vec![cfg.n_geo_tokens, cfg.d_model],
        });
    }
    let grid = tokens.reshape(&[side, side, cfg.d_model])?;
    let up1 = grid.upsample2x()?;
    let f1 = conv3x3(
        &up1,
        params.get(&format!("{prefix}.c1.w")),
        params.get(&format!("{prefix}.c1.b")),
    )?
    .gelu()?;
    let up2 = f1.upsample2x()?;
    let f2 = conv3x3(
        &up2,
        params.get(&format!("{prefix}.c2.w")),
        params.get(&format!("{prefix}.c2.b")),
    )?
    .gelu()?;
    let (h, w) = (cfg.height, cfg.width);
    let flat = f2.reshape(&[h * w, f2.shape()[2]])?;
    let depth = flat
        .matmul(params.get(&format!("{prefix}.out.w")))?
        .add_bias(params.get(&format!("{prefix}.out.b")))?
        .softplus()?
        .scale(DEPTH_SCALE)?
        .reshape(&[h, w])?;
    Ok(DepthMap::from_array(depth))
}

/// Mean over valid pixels of the per-pixel distance |D_gt - D_pred|.
pub fn depth_loss(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask) -> Result<Array> {
    if pred.array().shape() != gt.array().shape()
        || mask.h() != pred.h()
        || mask.w() != pred.w()
    {
        return Err(Error::ShapeMismatch {
            op: "depth_loss",
            lhs: pred.array().shape().to_vec(),
            rhs: gt.array().shape().to_vec(),
        });
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    pred.array()
        .sub(gt.array())?
        .abs()?
        .mul(&mask.as_f32())?
        .sum()?
        .scale(1.0 / count as f32)
}

/// Depth head on pooled frozen semantic states: the geometry-deficient
/// probing baseline. Uses only H_sem^(M) and no spatial blocks.
pub fn probe_baseline(
    sem_states: &[SemanticState],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<DepthMap> {
    let last = &sem_states[sem_states.len() - 1].hidden;
    let s = last.shape()[0];
    let g = cfg.n_geo_tokens;
    // Stretch the prompt sequence over the token grid.
    let indices: Vec<usize> = (0..g).map(|k| k * s / g).collect();
    let pooled = last.gather_rows(&indices)?;
    decode_depth_with(pooled, params, cfg, "probe")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{init_semantic_params, init_spatial_params, semantic_forward};
    use crate::config::ShareStrategy;
    use crate::numcore::grad_check_params;

    fn full_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let rng = Rng::new(seed).stream("init");
        init_semantic_params(&mut store, &rng, cfg);
        init_spatial_params(&mut store, &rng, cfg);
        init_query_bank(&mut store, &rng, cfg);
        init_patch_encoder(&mut store, &rng, cfg);
        init_depth_head(&mut store, &rng, cfg);
        init_probe_head(&mut store, &rng, cfg);
        store
    }

    #[test]
    fn no_image_returns_queries_exactly() {
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let s = init_geo_states(&store, None, &cfg).unwrap();
        assert!(s.hidden.bits_eq(store.get("queries.bank")));
        assert_eq!(s.layer_index, 0);
    }

    #[test]
    fn zero_image_adds_zero_features() {
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let black = Array::zeros(&[cfg.height, cfg.width, 3]);
        let s = init_geo_states(&store, Some(&black), &cfg).unwrap();
        let q = store.get("queries.bank").values();
        assert_eq!(s.hidden.values(), q);
    }

    #[test]
    fn different_images_differ() {
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let a = Array::from_vec(
                (0..cfg.height * cfg.width * 3).map(|_| rng.range_f32(0.0, 1.0)).collect(),
                &[cfg.height, cfg.width, 3],
            )
            .unwrap();
            let b = Array::from_vec(
                (0..cfg.height * cfg.width * 3).map(|_| rng.range_f32(0.0, 1.0)).collect(),
                &[cfg.height, cfg.width, 3],
            )
            .unwrap();
            let sa = init_geo_states(&store, Some(&a), &cfg).unwrap();
            let sb = init_geo_states(&store, Some(&b), &cfg).unwrap();
            assert!(!sa.hidden.bits_eq(&sb.hidden));
        }
    }

    fn sem_states_for(cfg: &ModelConfig, store: &ParamStore) -> Vec<SemanticState> {
        let tokens = [0u32, 4, 2, 8, 35, 39, 11, 19, 27, 1];
        semantic_forward(&tokens, store, cfg).unwrap()
    }

    #[test]
    fn derive_geometry_applies_l_blocks() {
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let sem = sem_states_for(&cfg, &store);
        let s0 = init_geo_states(&store, None, &cfg).unwrap();
        let out = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
        assert_eq!(out.layer_index, cfg.l_layers);
        assert_eq!(out.hidden.shape(), &[cfg.n_geo_tokens, cfg.d_model]);
    }

    #[test]
    fn strategy_none_invariant_to_semantic_perturbation() {
        let mut cfg = ModelConfig::tiny();
        cfg.share_strategy = ShareStrategy::None;
        let store = full_store(&cfg, 0);
        let sem = sem_states_for(&cfg, &store);
        let s0 = init_geo_states(&store, None, &cfg).unwrap();
        let out1 = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
        // Perturb semantic states arbitrarily.
        let mut rng = Rng::new(5);
        let perturbed: Vec<SemanticState> = sem
            .iter()
            .map(|s| SemanticState {
                hidden: Array::randn(&[s.hidden.shape()[0], s.hidden.shape()[1]], &mut rng),
                layer_index: s.layer_index,
            })
            .collect();
        let out2 = derive_geometry(&s0, &perturbed, &cfg, &store).unwrap();
        assert!(out1.hidden.bits_eq(&out2.hidden));
    }

    /// Residual-branch projections start at zero, which makes blocks ignore
    /// attention entirely; tests probing attention behavior knock them off
    /// that fixed point first.
    fn randomize_zero_init(store: &ParamStore, cfg: &ModelConfig, seed: u64) {
        let mut rng = Rng::new(seed).stream("kick");
        for i in 0..cfg.l_layers {
            for name in [format!("geo.l{i}.wo"), format!("geo.l{i}.ffn.w2")] {
                let p = store.get(&name);
                let n = p.numel();
                p.set_data(&(0..n).map(|_| rng.normal() * 0.1).collect::<Vec<f32>>());
            }
        }
    }

    #[test]
    fn uniform_and_shallow_strategies_differ() {
        let base = ModelConfig::tiny();
        let store = full_store(&base, 0);
        randomize_zero_init(&store, &base, 13);
        let sem = sem_states_for(&base, &store);
        let s0 = init_geo_states(&store, None, &base).unwrap();
        let mut uni = base.clone();
        uni.share_strategy = ShareStrategy::Uniform;
        let mut shallow = base.clone();
        shallow.share_strategy = ShareStrategy::Shallow;
        let a = derive_geometry(&s0, &sem, &uni, &store).unwrap();
        let b = derive_geometry(&s0, &sem, &shallow, &store).unwrap();
        assert!(!a.hidden.bits_eq(&b.hidden));
    }

    #[test]
    fn decode_depth_shape_and_positivity() {
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let mut rng = Rng::new(1);
        let state = GeoState {
            hidden: Array::randn(&[cfg.n_geo_tokens, cfg.d_model], &mut rng),
            layer_index: cfg.l_layers,
        };
        let d = decode_depth(&state, &store, &cfg).unwrap();
        assert_eq!(d.array().shape(), &[cfg.height, cfg.width]);
        assert!(d.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn constant_tokens_give_constant_interior() {
        // The head is translation-equivariant except at borders: constant
        // input must produce a constant interior (zero-bias head).
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let state = GeoState {
            hidden: Array::full(&[cfg.n_geo_tokens, cfg.d_model], 0.37),
            layer_index: cfg.l_layers,
        };
        let d = decode_depth(&state, &store, &cfg).unwrap();
        let vals = d.values();
        let (h, w) = (cfg.height, cfg.width);
        // Interior excludes a 3-pixel border: two conv stages at two scales.
        let mut interior = Vec::new();
        for r in 3..h - 3 {
            for c in 3..w - 3 {
                interior.push(vals[r * w + c] as f64);
            }
        }
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        let var = interior.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / interior.len() as f64;
        assert!(var < 1e-6, "interior variance {var}");
    }

    #[test]
    fn non_square_grid_is_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_geo_tokens = 5;
        assert!(matches!(
            cfg.grid_side(),
            Err(Error::NonSquareTokenGrid { count: 5 })
        ));
    }

    #[test]
    fn depth_loss_oracle_values() {
        let (h, w) = (4, 4);
        let gt = DepthMap::from_vec(vec![2.0; h * w], h, w);
        let mask = ValidMask::all_true(h, w);
        // pred == gt -> 0
        let pred = DepthMap::from_vec(vec![2.0; h * w], h, w);
        assert_eq!(depth_loss(&pred, &gt, &mask).unwrap().item(), 0.0);
        // pred = gt + 0.5 -> 0.5 (per-pixel distance 0.5, mean 0.5)
        let pred = DepthMap::from_vec(vec![2.5; h * w], h, w);
        let loss = depth_loss(&pred, &gt, &mask).unwrap().item();
        assert!((loss - 0.5).abs() < 1e-6);
        // empty mask -> error
        let empty = ValidMask::new(vec![false; h * w], h, w);
        assert!(matches!(
            depth_loss(&pred, &gt, &empty),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn depth_loss_ignores_masked_out_pixels() {
        let (h, w) = (2, 2);
        let gt = DepthMap::from_vec(vec![1.0, 2.0, 3.0, 4.0], h, w);
        let mask = ValidMask::new(vec![true, false, true, false], h, w);
        let a = DepthMap::from_vec(vec![1.5, 100.0, 3.5, -50.0], h, w);
        let b = DepthMap::from_vec(vec![1.5, -7.0, 3.5, 999.0], h, w);
        let la = depth_loss(&a, &gt, &mask).unwrap().item();
        let lb = depth_loss(&b, &gt, &mask).unwrap().item();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert!((la - 0.5).abs() < 1e-6);
    }

    #[test]
    fn depth_loss_nonnegative_zero_iff_equal() {
        let mut rng = Rng::new(7);
        let (h, w) = (3, 3);
        for _ in 0..20 {
            let gv: Vec<f32> = (0..h * w).map(|_| rng.range_f32(1.0, 9.0)).collect();
            let pv: Vec<f32> = (0..h * w).map(|_| rng.range_f32(1.0, 9.0)).collect();
            let gt = DepthMap::from_vec(gv.clone(), h, w);
            let pred = DepthMap::from_vec(pv.clone(), h, w);
            let mask = ValidMask::all_true(h, w);
            let l = depth_loss(&pred, &gt, &mask).unwrap().item();
            assert!(l >= 0.0);
            if gv == pv {
                assert_eq!(l, 0.0);
            } else {
                assert!(l > 0.0);
            }
        }
    }

    #[test]
    fn probe_baseline_output_shape() {
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        let sem = sem_states_for(&cfg, &store);
        let d = probe_baseline(&sem, &store, &cfg).unwrap();
        assert_eq!(d.array().shape(), &[cfg.height, cfg.width]);
    }

    #[test]
    fn gradcheck_depth_loss_through_head_and_stack() {
        // d(depth_loss)/d(everything trainable) at tiny shapes against the
        // finite-difference oracle.
        let cfg = ModelConfig::tiny();
        let store = full_store(&cfg, 0);
        store.set_trainable_groups(&[
            ParamGroup::Spatial,
            ParamGroup::Queries,
            ParamGroup::DepthHead,
        ]);
        let sem = sem_states_for(&cfg, &store);
        let mut rng = Rng::new(2);
        let gt_vals: Vec<f32> = (0..cfg.height * cfg.width)
            .map(|_| rng.range_f32(1.0, 9.0))
            .collect();
        let gt = DepthMap::from_vec(gt_vals, cfg.height, cfg.width);
        let mask = ValidMask::all_true(cfg.height, cfg.width);
        let f = || {
            let s0 = init_geo_states(&store, None, &cfg)?;
            let sl = derive_geometry(&s0, &sem, &cfg, &store)?;
            let pred = decode_depth(&sl, &store, &cfg)?;
            depth_loss(&pred, &gt, &mask)
        };
        let params: Vec<(&str, Array)> = vec![
            ("queries", store.get("queries.bank").clone()),
            ("geo.l0.wq", store.get("geo.l0.wq").clone()),
            ("geo.l1.ffn.w1", store.get("geo.l1.ffn.w1").clone()),
            ("head.c2.w", store.get("head.c2.w").clone()),
            ("head.out.b", store.get("head.out.b").clone()),
        ];
        let report = grad_check_params(&f, &params, 1e-3).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
