//! Transformer blocks for both pathways and the shared attention that lets
//! geometric queries read semantic keys/values.
//!
//! The semantic pathway is a small causal decoder trained briefly as a
//! language model on scene prompts, then frozen. Spatial blocks keep
//! modality-specific parameters and, per the sharing strategy, concatenate
//! the semantic keys/values of a mapped layer into their own attention.

use crate::config::{ModelConfig, ShareStrategy};
use crate::error::{Error, Result};
use crate::numcore::{Array, ParamGroup, ParamStore, Rng};

#[derive(Clone)]
pub struct SemanticState {
    pub hidden: Array,
    /// 1-based layer index; state j is the output of semantic block j.
    pub layer_index: usize,
}

#[derive(Clone)]
pub struct GeoState {
    pub hidden: Array,
    /// 0-based depth in the spatial stack; L after the full stack.
    pub layer_index: usize,
}

/// Semantic layer read by spatial layer i under uniform sharing.
pub fn layer_map(i: usize, m: usize, l: usize) -> Result<usize> {
    if m <= l || i < 1 || i > l {
        return Err(Error::InvalidLayerIndex { i, m, l });
    }
    Ok(i * m / l)
}

/// Semantic layer read by spatial layer i under the given strategy, or
/// None when nothing is shared.
pub fn mapped_layer(strategy: ShareStrategy, i: usize, m: usize, l: usize) -> Result<Option<usize>> {
    if i < 1 || i > l || m <= l {
        return Err(Error::InvalidLayerIndex { i, m, l });
    }
    Ok(match strategy {
        ShareStrategy::None => None,
        ShareStrategy::Shallow => Some(i),
        ShareStrategy::Deep => Some(m - l + i),
        ShareStrategy::Uniform => Some(layer_map(i, m, l)?),
    })
}

/// The exact set of semantic layers a strategy touches.
pub fn touched_layers(strategy: ShareStrategy, m: usize, l: usize) -> Vec<usize> {
    (1..=l)
        .filter_map(|i| mapped_layer(strategy, i, m, l).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Parameter initialization

fn randn_scaled(rng: &mut Rng, shape: &[usize], std: f32) -> Array {
    let mut a = Array::randn(shape, rng);
    a = a.scale(std).unwrap();
    Array::from_vec(a.values(), shape).unwrap()
}

fn linear_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array {
    randn_scaled(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}

fn block_params(store: &mut ParamStore, rng: &Rng, prefix: &str, group: ParamGroup, d: usize) {
    block_params_with(store, rng, prefix, group, d, true)
}

/// `zero_residual` starts the output and FFN projections at zero so a stack
/// begins as an identity; the spatial blocks instead start live so shared
/// attention contributes (and receives gradient) from the first step.
fn block_params_with(
    store: &mut ParamStore,
    rng: &Rng,
    prefix: &str,
    group: ParamGroup,
    d: usize,
    zero_residual: bool,
) {
    let mut r = rng.stream(prefix);
    let ff = 4 * d;
    let residual = |r: &mut Rng, fan_in: usize, out: usize| {
        if zero_residual {
            Array::zeros(&[fan_in, out])
        } else {
            linear_init(r, fan_in, out)
        }
    };
    store.insert(&format!("{prefix}.ln1.g"), group, Array::full(&[d], 1.0));
    store.insert(&format!("{prefix}.ln1.b"), group, Array::zeros(&[d]));
    store.insert(&format!("{prefix}.wq"), group, linear_init(&mut r, d, d));
    store.insert(&format!("{prefix}.wk"), group, linear_init(&mut r, d, d));
    store.insert(&format!("{prefix}.wv"), group, linear_init(&mut r, d, d));
    let wo = residual(&mut r, d, d);
    store.insert(&format!("{prefix}.wo"), group, wo);
    store.insert(&format!("{prefix}.wo_b"), group, Array::zeros(&[d]));
    store.insert(&format!("{prefix}.ln2.g"), group, Array::full(&[d], 1.0));
    store.insert(&format!("{prefix}.ln2.b"), group, Array::zeros(&[d]));
    store.insert(&format!("{prefix}.ffn.w1"), group, linear_init(&mut r, d, ff));
    store.insert(&format!("{prefix}.ffn.b1"), group, Array::zeros(&[ff]));
    let w2 = residual(&mut r, ff, d);
    store.insert(&format!("{prefix}.ffn.w2"), group, w2);
    store.insert(&format!("{prefix}.ffn.b2"), group, Array::zeros(&[d]));
}

pub fn init_semantic_params(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    let d = cfg.d_model;
    let mut r = rng.stream("sem.embed");
    store.insert(
        "sem.wte",
        ParamGroup::Semantic,
        randn_scaled(&mut r, &[cfg.vocab_size, d], 0.02),
    );
    store.insert(
        "sem.wpe",
        ParamGroup::Semantic,
        randn_scaled(&mut r, &[cfg.max_seq_len, d], 0.02),
    );
    for layer in 0..cfg.m_layers {
        block_params(store, rng, &format!("sem.l{layer}"), ParamGroup::Semantic, d);
    }
    let mut r = rng.stream("sem.head");
    store.insert(
        "sem.head",
        ParamGroup::Semantic,
        linear_init(&mut r, d, cfg.vocab_size),
    );
}

pub fn init_spatial_params(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    for layer in 0..cfg.l_layers {
        block_params_with(
            store,
            rng,
            &format!("geo.l{layer}"),
            ParamGroup::Spatial,
            cfg.d_model,
            false,
        );
    }
}

// ---------------------------------------------------------------------------
// Projections and attention

/// Project hidden states (s, d) into per-head Q, K, V of shape
/// (n_heads, s, d_head). Projections are bias-free.
pub fn project_qkv(
    hidden: &Array,
    wq: &Array,
    wk: &Array,
    wv: &Array,
    n_heads: usize,
) -> Result<(Array, Array, Array)> {
    let q = hidden.matmul(wq)?.split_heads(n_heads)?;
    let k = hidden.matmul(wk)?.split_heads(n_heads)?;
    let v = hidden.matmul(wv)?.split_heads(n_heads)?;
    Ok((q, k, v))
}

/// Geometry-side projections of a spatial block.
pub fn project_qkv_geo(
    params: &ParamStore,
    layer: usize,
    geo: &GeoState,
    n_heads: usize,
) -> Result<(Array, Array, Array)> {
    project_qkv(
        &geo.hidden,
        params.get(&format!("geo.l{layer}.wq")),
        params.get(&format!("geo.l{layer}.wk")),
        params.get(&format!("geo.l{layer}.wv")),
        n_heads,
    )
}

/// Semantic-side projections with the mapped layer's own (frozen) weights,
/// applied to the layer-normed state exactly as that layer's attention
/// would see it. Keeps key/value magnitudes O(1) regardless of the raw
/// residual-stream scale.
pub fn project_qkv_sem(
    params: &ParamStore,
    sem: &SemanticState,
    n_heads: usize,
) -> Result<(Array, Array, Array)> {
    let layer = sem.layer_index - 1;
    let normed = sem.hidden.layer_norm(
        params.get(&format!("sem.l{layer}.ln1.g")),
        params.get(&format!("sem.l{layer}.ln1.b")),
    )?;
    project_qkv(
        &normed,
        params.get(&format!("sem.l{layer}.wq")),
        params.get(&format!("sem.l{layer}.wk")),
        params.get(&format!("sem.l{layer}.wv")),
        n_heads,
    )
}

fn head_slice(x: &Array, h: usize) -> Result<Array> {
    let s = x.shape();
    x.narrow(0, h, 1)?.reshape(&[s[1], s[2]])
}

/// Attention of geometric queries over the concatenated semantic + geometric
/// key/value sequence (per head), re-merged to (g, d_model). `sem_kv` is
/// None when nothing is shared, which reduces to plain self-attention.
pub fn shared_attention(
    q_geo: &Array,
    sem_kv: Option<(&Array, &Array)>,
    k_geo: &Array,
    v_geo: &Array,
    d_head: usize,
) -> Result<Array> {
    let n_heads = q_geo.shape()[0];
    if k_geo.shape()[1] == 0 && sem_kv.is_none() {
        return Err(Error::EmptyKeySet);
    }
    let scale = 1.0 / (d_head as f32).sqrt();
    let mut head_outputs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = head_slice(q_geo, h)?;
        let (k, v) = match sem_kv {
            Some((k_sem, v_sem)) => (
                Array::concat(&[&head_slice(k_sem, h)?, &head_slice(k_geo, h)?], 0)?,
                Array::concat(&[&head_slice(v_sem, h)?, &head_slice(v_geo, h)?], 0)?,
            ),
            None => (head_slice(k_geo, h)?, head_slice(v_geo, h)?),
        };
        let scores = q.matmul(&k.transpose()?)?.scale(scale)?;
        let weights = scores.softmax(1)?;
        head_outputs.push(weights.matmul(&v)?);
    }
    let refs: Vec<&Array> = head_outputs.iter().collect();
    Array::concat(&refs, 1)
}

/// Masked multi-head self-attention used by the semantic decoder and the
/// denoiser (mask = None means full attention).
fn self_attention(
    x: &Array,
    params: &ParamStore,
    prefix: &str,
    n_heads: usize,
    mask: Option<&Array>,
) -> Result<Array> {
    let (q, k, v) = project_qkv(
        x,
        params.get(&format!("{prefix}.wq")),
        params.get(&format!("{prefix}.wk")),
        params.get(&format!("{prefix}.wv")),
        n_heads,
    )?;
    let d_head = q.shape()[2];
    let scale = 1.0 / (d_head as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = head_slice(&q, h)?;
        let kh = head_slice(&k, h)?;
        let vh = head_slice(&v, h)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        heads.push(scores.softmax(1)?.matmul(&vh)?);
    }
    let refs: Vec<&Array> = heads.iter().collect();
    Array::concat(&refs, 1)
}

fn feed_forward(x: &Array, params: &ParamStore, prefix: &str) -> Result<Array> {
    x.matmul(params.get(&format!("{prefix}.ffn.w1")))?
        .add_bias(params.get(&format!("{prefix}.ffn.b1")))?
        .gelu()?
        .matmul(params.get(&format!("{prefix}.ffn.w2")))?
        .add_bias(params.get(&format!("{prefix}.ffn.b2")))
}

/// Pre-norm residual block shared by the semantic decoder and the denoiser.
fn prenorm_block(
    x: &Array,
    params: &ParamStore,
    prefix: &str,
    n_heads: usize,
    mask: Option<&Array>,
) -> Result<Array> {
    let xn = x.layer_norm(
        params.get(&format!("{prefix}.ln1.g")),
        params.get(&format!("{prefix}.ln1.b")),
    )?;
    let attn = self_attention(&xn, params, prefix, n_heads, mask)?;
    let proj = attn
        .matmul(params.get(&format!("{prefix}.wo")))?
        .add_bias(params.get(&format!("{prefix}.wo_b")))?;
    let x = x.add(&proj)?;
    let xn = x.layer_norm(
        params.get(&format!("{prefix}.ln2.g")),
        params.get(&format!("{prefix}.ln2.b")),
    )?;
    let ff = feed_forward(&xn, params, prefix)?;
    x.add(&ff)
}

/// One spatial block: shared attention, geometric output projection,
/// residual add, layer norm, feed-forward, residual add, layer norm.
/// The semantic state is read-only.
pub fn spatial_block(
    params: &ParamStore,
    layer: usize,
    geo: &GeoState,
    sem: Option<&SemanticState>,
    cfg: &ModelConfig,
) -> Result<GeoState> {
    let prefix = format!("geo.l{layer}");
    let (q, k, v) = project_qkv_geo(params, layer, geo, cfg.n_heads)?;
    let sem_proj = match sem {
        Some(s) => {
            let (_, k_sem, v_sem) = project_qkv_sem(params, s, cfg.n_heads)?;
            Some((k_sem, v_sem))
        }
        None => None,
    };
    let attn = shared_attention(
        &q,
        sem_proj.as_ref().map(|(k, v)| (k, v)),
        &k,
        &v,
        cfg.d_head(),
    )?;
    let proj = attn
        .matmul(params.get(&format!("{prefix}.wo")))?
        .add_bias(params.get(&format!("{prefix}.wo_b")))?;
    let x1 = geo.hidden.add(&proj)?.layer_norm(
        params.get(&format!("{prefix}.ln1.g")),
        params.get(&format!("{prefix}.ln1.b")),
    )?;
    let ff = feed_forward(&x1, params, &prefix)?;
    let x2 = x1.add(&ff)?.layer_norm(
        params.get(&format!("{prefix}.ln2.g")),
        params.get(&format!("{prefix}.ln2.b")),
    )?;
    Ok(GeoState {
        hidden: x2,
        layer_index: geo.layer_index + 1,
    })
}

fn causal_mask(s: usize) -> Array {
    let mut m = vec![0.0f32; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            m[i * s + j] = -1e9;
        }
    }
    Array::from_vec(m, &[s, s]).unwrap()
}

/// Run the semantic decoder, returning the hidden state after every block
/// so the layer map can index them. states[j-1] is H_sem^(j); the last
/// entry is H_sem^(M).
pub fn semantic_forward(
    tokens: &[u32],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Vec<SemanticState>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::UnknownToken {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }
    assert!(
        !tokens.is_empty() && tokens.len() <= cfg.max_seq_len,
        "prompt length {} outside [1, {}]",
        tokens.len(),
        cfg.max_seq_len
    );
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = params.get("sem.wte").gather_rows(&ids)?;
    let pos = params.get("sem.wpe").gather_rows(&positions)?;
    let mut x = tok.add(&pos)?;
    let mask = causal_mask(ids.len());
    let mut states = Vec::with_capacity(cfg.m_layers);
    for layer in 0..cfg.m_layers {
        x = prenorm_block(&x, params, &format!("sem.l{layer}"), cfg.n_heads, Some(&mask))?;
        states.push(SemanticState {
            hidden: x.clone(),
            layer_index: layer + 1,
        });
    }
    Ok(states)
}

/// Next-token language-model loss used for the semantic pre-fit.
pub fn semantic_lm_loss(tokens: &[u32], params: &ParamStore, cfg: &ModelConfig) -> Result<Array> {
    assert!(tokens.len() >= 2, "LM loss needs at least two tokens");
    let states = semantic_forward(tokens, params, cfg)?;
    let last = &states[cfg.m_layers - 1].hidden;
    let context = last.narrow(0, 0, tokens.len() - 1)?;
    let logits = context.matmul(params.get("sem.head"))?;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    logits.cross_entropy(&targets)
}

/// The full denoiser block stack over a unified token sequence.
pub fn dit_blocks(x: &Array, params: &ParamStore, cfg: &ModelConfig) -> Result<Array> {
    let mut x = x.clone();
    for layer in 0..cfg.n_dit_blocks {
        x = prenorm_block(&x, params, &format!("dit.l{layer}"), cfg.n_heads, None)?;
    }
    x.layer_norm(params.get("dit.lnf.g"), params.get("dit.lnf.b"))
}

pub fn init_dit_params(store: &mut ParamStore, rng: &Rng, cfg: &ModelConfig) {
    let d = cfg.d_model;
    let (h, w, c) = (cfg.latent_h(), cfg.latent_w(), cfg.c_latent);
    let mut r = rng.stream("dit.embed");
    store.insert("dit.in.w", ParamGroup::Dit, linear_init(&mut r, c, d));
    store.insert("dit.in.b", ParamGroup::Dit, Array::zeros(&[d]));
    store.insert(
        "dit.pos",
        ParamGroup::Dit,
        randn_scaled(&mut r, &[h * w, d], 0.02),
    );
    store.insert("dit.sem.w", ParamGroup::Dit, linear_init(&mut r, d, d));
    store.insert("dit.sem.b", ParamGroup::Dit, Array::zeros(&[d]));
    for layer in 0..cfg.n_dit_blocks {
        block_params(store, rng, &format!("dit.l{layer}"), ParamGroup::Dit, d);
    }
    store.insert("dit.lnf.g", ParamGroup::Dit, Array::full(&[d], 1.0));
    store.insert("dit.lnf.b", ParamGroup::Dit, Array::zeros(&[d]));
    store.insert("dit.out.w", ParamGroup::Dit, Array::zeros(&[d, c]));
    store.insert("dit.out.b", ParamGroup::Dit, Array::zeros(&[c]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_map_matches_formula() {
        assert_eq!(layer_map(10, 36, 10).unwrap(), 36);
        assert_eq!(layer_map(1, 36, 10).unwrap(), 3);
        assert_eq!(layer_map(4, 12, 4).unwrap(), 12);
        for (m, l) in [(36usize, 10usize), (12, 4)] {
            let mut prev = 0;
            for i in 1..=l {
                let j = layer_map(i, m, l).unwrap();
                assert_eq!(j, i * m / l);
                assert!(j >= prev && j <= m);
                prev = j;
            }
        }
    }

    #[test]
    fn layer_map_rejects_out_of_range() {
        assert!(matches!(
            layer_map(7, 12, 4),
            Err(Error::InvalidLayerIndex { i: 7, m: 12, l: 4 })
        ));
        assert!(layer_map(0, 12, 4).is_err());
        assert!(layer_map(2, 4, 4).is_err());
    }

    #[test]
    fn touched_layer_sets() {
        assert_eq!(touched_layers(ShareStrategy::Uniform, 12, 4), vec![3, 6, 9, 12]);
        assert_eq!(touched_layers(ShareStrategy::Shallow, 12, 4), vec![1, 2, 3, 4]);
        assert_eq!(touched_layers(ShareStrategy::Deep, 12, 4), vec![9, 10, 11, 12]);
        assert!(touched_layers(ShareStrategy::None, 12, 4).is_empty());
        assert_eq!(
            touched_layers(ShareStrategy::Uniform, 36, 10),
            vec![3, 7, 10, 14, 18, 21, 25, 28, 32, 36]
        );
    }

    fn test_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let rng = Rng::new(seed).stream("init");
        init_semantic_params(&mut store, &rng, cfg);
        init_spatial_params(&mut store, &rng, cfg);
        store
    }

    #[test]
    fn qkv_shapes_follow_contract() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 4,
            ..ModelConfig::desk()
        };
        let store = test_store(&cfg, 0);
        let mut rng = Rng::new(5);
        let geo = GeoState {
            hidden: Array::randn(&[64, 64], &mut rng),
            layer_index: 0,
        };
        let (q, k, v) = project_qkv_geo(&store, 0, &geo, 4).unwrap();
        for t in [&q, &k, &v] {
            assert_eq!(t.shape(), &[4, 64, 16]);
        }
    }

    #[test]
    fn zero_hidden_projects_to_zero() {
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        let geo = GeoState {
            hidden: Array::zeros(&[4, cfg.d_model]),
            layer_index: 0,
        };
        let (q, k, v) = project_qkv_geo(&store, 0, &geo, cfg.n_heads).unwrap();
        for t in [q, k, v] {
            assert!(t.values().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_single_head_projection_is_hidden() {
        let d = 4;
        let mut store = ParamStore::new();
        let eye = {
            let mut m = vec![0.0f32; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            Array::from_vec(m, &[d, d]).unwrap()
        };
        store.insert("geo.l0.wq", ParamGroup::Spatial, eye.clone());
        store.insert("geo.l0.wk", ParamGroup::Spatial, eye.clone());
        store.insert("geo.l0.wv", ParamGroup::Spatial, eye);
        let mut rng = Rng::new(9);
        let hidden = Array::randn(&[3, d], &mut rng);
        let geo = GeoState {
            hidden: hidden.clone(),
            layer_index: 0,
        };
        let (q, _, _) = project_qkv_geo(&store, 0, &geo, 1).unwrap();
        assert_eq!(q.shape(), &[1, 3, d]);
        assert!(q.reshape(&[3, d]).unwrap().bits_eq(&hidden));
    }

    #[test]
    fn sem_and_geo_projections_differ() {
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        let mut rng = Rng::new(11);
        let hidden = Array::randn(&[5, cfg.d_model], &mut rng);
        let geo = GeoState { hidden: hidden.clone(), layer_index: 0 };
        let sem = SemanticState { hidden, layer_index: 1 };
        let (qg, _, _) = project_qkv_geo(&store, 0, &geo, cfg.n_heads).unwrap();
        let (qs, _, _) = project_qkv_sem(&store, &sem, cfg.n_heads).unwrap();
        assert!(!qg.bits_eq(&qs));
    }

    /// Independent reference: plain single-sequence attention on raw vecs.
    fn reference_self_attention(q: &[Vec<f32>], k: &[Vec<f32>], v: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let dh = q[0].len();
        let scale = 1.0 / (dh as f32).sqrt();
        q.iter()
            .map(|qr| {
                let scores: Vec<f32> = k
                    .iter()
                    .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                let mx = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - mx).exp()).collect();
                let denom: f32 = exps.iter().sum();
                let mut out = vec![0.0f32; v[0].len()];
                for (w, vr) in exps.iter().zip(v) {
                    for (o, &vv) in out.iter_mut().zip(vr) {
                        *o += w / denom * vv;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn empty_semantic_context_is_plain_self_attention() {
        let mut rng = Rng::new(3);
        let (heads, g, dh) = (2, 4, 3);
        let q = Array::randn(&[heads, g, dh], &mut rng);
        let k = Array::randn(&[heads, g, dh], &mut rng);
        let v = Array::randn(&[heads, g, dh], &mut rng);
        let ours = shared_attention(&q, None, &k, &v, dh).unwrap();
        for h in 0..heads {
            let pick = |t: &Array| -> Vec<Vec<f32>> {
                let d = t.values();
                (0..g)
                    .map(|r| d[(h * g + r) * dh..(h * g + r + 1) * dh].to_vec())
                    .collect()
            };
            let reference = reference_self_attention(&pick(&q), &pick(&k), &pick(&v));
            let got = ours.values();
            for r in 0..g {
                for c in 0..dh {
                    let val = got[r * (heads * dh) + h * dh + c];
                    assert!(
                        (val - reference[r][c]).abs() < 1e-6,
                        "head {h} ({r},{c}): {val} vs {}",
                        reference[r][c]
                    );
                }
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        // All S+G keys identical: softmax weights are uniform, output is the
        // mean over the S+G value rows. Hand-checkable at tiny shapes.
        let (g, s, dh) = (2, 3, 2);
        let key_row = [0.5f32, -0.25];
        let mk = |rows: usize| {
            Array::from_vec(key_row.repeat(rows), &[1, rows, dh]).unwrap()
        };
        let k_sem = mk(s);
        let k_geo = mk(g);
        let v_sem = Array::from_vec((0..s * dh).map(|i| i as f32).collect(), &[1, s, dh]).unwrap();
        let v_geo =
            Array::from_vec((0..g * dh).map(|i| 10.0 + i as f32).collect(), &[1, g, dh]).unwrap();
        let mut rng = Rng::new(0);
        let q = Array::randn(&[1, g, dh], &mut rng);
        let out = shared_attention(&q, Some((&k_sem, &v_sem)), &k_geo, &v_geo, dh).unwrap();
        // Mean over the five value rows [0,1] [2,3] [4,5] [10,11] [12,13].
        let expected = [(0.0 + 2.0 + 4.0 + 10.0 + 12.0) / 5.0f32, (1.0 + 3.0 + 5.0 + 11.0 + 13.0) / 5.0f32];
        let got = out.values();
        for r in 0..g {
            for c in 0..dh {
                assert!(
                    (got[r * dh + c] - expected[c]).abs() < 1e-5,
                    "row {r} col {c}: {} vs {}",
                    got[r * dh + c],
                    expected[c]
                );
            }
        }
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let (g, dh) = (3, 2);
        let mut rng = Rng::new(1);
        let q = Array::randn(&[1, g, dh], &mut rng);
        let k = Array::randn(&[1, 1, dh], &mut rng);
        let v = Array::from_vec(vec![7.0, -3.0], &[1, 1, dh]).unwrap();
        // A single geo token total: make G=1 on the key side by passing the
        // singleton as the geo K/V and no semantic context; query count may
        // still be anything.
        let out = shared_attention(&q, None, &k, &v, dh).unwrap();
        for r in 0..g {
            assert_eq!(out.values()[r * dh], 7.0);
            assert_eq!(out.values()[r * dh + 1], -3.0);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // Checked through the softmax invariant on raw scores.
        let mut rng = Rng::new(2);
        let scores = Array::randn(&[6, 9], &mut rng);
        let w = scores.softmax(1).unwrap();
        let d = w.values();
        for r in 0..6 {
            let sum: f32 = d[r * 9..(r + 1) * 9].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn semantic_forward_shapes_and_determinism() {
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        let tokens = [0u32, 4, 2, 8, 35, 39, 11, 19, 27, 1];
        let states = semantic_forward(&tokens, &store, &cfg).unwrap();
        assert_eq!(states.len(), cfg.m_layers);
        for (i, s) in states.iter().enumerate() {
            assert_eq!(s.hidden.shape(), &[tokens.len(), cfg.d_model]);
            assert_eq!(s.layer_index, i + 1);
        }
        let again = semantic_forward(&tokens, &store, &cfg).unwrap();
        for (a, b) in states.iter().zip(&again) {
            assert!(a.hidden.bits_eq(&b.hidden));
        }
    }

    #[test]
    fn semantic_forward_rejects_unknown_token() {
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        let tokens = [0u32, 4, 999, 1];
        assert!(matches!(
            semantic_forward(&tokens, &store, &cfg),
            Err(Error::UnknownToken { id: 999, .. })
        ));
    }

    #[test]
    fn spatial_block_zero_init_is_layernorm_passthrough() {
        // With zero output projection and zero FFN the block reduces to
        // ln2(ln1(x)); trace the residual path by hand.
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        let mut rng = Rng::new(8);
        let x = Array::randn(&[cfg.n_geo_tokens, cfg.d_model], &mut rng);
        let geo = GeoState { hidden: x.clone(), layer_index: 0 };
        for name in ["geo.l0.wo", "geo.l0.ffn.w2"] {
            let p = store.get(name);
            p.set_data(&vec![0.0; p.numel()]);
        }
        let out = spatial_block(&store, 0, &geo, None, &cfg).unwrap();
        let expected = x
            .layer_norm(store.get("geo.l0.ln1.g"), store.get("geo.l0.ln1.b"))
            .unwrap()
            .layer_norm(store.get("geo.l0.ln2.g"), store.get("geo.l0.ln2.b"))
            .unwrap();
        assert!(out.hidden.bits_eq(&expected));
        assert_eq!(out.layer_index, 1);
    }

    #[test]
    fn no_sharing_ignores_semantic_content() {
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        let mut rng = Rng::new(4);
        let x = Array::randn(&[cfg.n_geo_tokens, cfg.d_model], &mut rng);
        let geo = GeoState { hidden: x, layer_index: 0 };
        let out1 = spatial_block(&store, 0, &geo, None, &cfg).unwrap();
        let out2 = spatial_block(&store, 0, &geo, None, &cfg).unwrap();
        assert!(out1.hidden.bits_eq(&out2.hidden));
    }

    #[test]
    fn stage1_freeze_isolates_semantic_grads() {
        // With semantic params frozen, a loss through shared attention
        // leaves semantic grads absent while geo grads are nonzero.
        let cfg = ModelConfig::tiny();
        let store = test_store(&cfg, 0);
        // Zero-init wo blocks attention gradients entirely; use a live one.
        let wo = store.get("geo.l0.wo");
        let mut kick = Rng::new(21).stream("kick");
        wo.set_data(&(0..wo.numel()).map(|_| kick.normal() * 0.1).collect::<Vec<f32>>());
        store.set_trainable_groups(&[ParamGroup::Spatial]);
        let tokens = [0u32, 4, 2, 8, 35, 39, 11, 19, 27, 1];
        let states = semantic_forward(&tokens, &store, &cfg).unwrap();
        let mut rng = Rng::new(6);
        let geo = GeoState {
            hidden: Array::randn(&[cfg.n_geo_tokens, cfg.d_model], &mut rng),
            layer_index: 0,
        };
        let out = spatial_block(&store, 0, &geo, Some(&states[2]), &cfg).unwrap();
        let loss = out.hidden.mul(&out.hidden).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(store.get("sem.l2.wk").grad().is_none());
        assert!(store.get("sem.wte").grad().is_none());
        let gq = store.get("geo.l0.wq").grad().unwrap();
        assert!(gq.iter().any(|&v| v != 0.0));
    }
}
