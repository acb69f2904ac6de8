use spatialgen::attention::{project_qkv_geo, project_qkv_sem, semantic_forward, GeoState};
use spatialgen::config::ModelConfig;
use spatialgen::geometry::{decode_depth, depth_loss, derive_geometry, init_geo_states};
use spatialgen::numcore::{Array, OptimizerState, ParamGroup, Rng};
use spatialgen::scenegen::{make_sample, CurriculumPhase, TaskMix};
use spatialgen::trainer::{init_full_store, prefit_semantic};

fn rms(v: &[f32]) -> f32 {
    (v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32).sqrt()
}

fn main() {
    let cfg = ModelConfig::desk();
    let store = init_full_store(&cfg, 0);
    let lm = prefit_semantic(&store, &cfg, &Rng::new(0), 300, 8, 3e-3).unwrap();
    println!("sem prefit final LM loss: {lm:.4} (ln(54) = {:.3})", (54f32).ln());
    let rng = Rng::new(0).stream("overfit");
    let samples: Vec<_> = (0..8u64)
        .map(|i| make_sample(&rng, i, &CurriculumPhase::coarse(), &TaskMix::t2i_only(), 32, 32))
        .collect();
    for (i, s) in samples.iter().enumerate().take(3) {
        println!("scene {i}: prompt {:?} depth[mean] {:.2}", s.prompt, s.depth.values().iter().sum::<f32>() / 1024.0);
    }
    let sems: Vec<_> = samples.iter().map(|s| semantic_forward(&s.prompt, &store, &cfg).unwrap()).collect();
    // Distances between semantic final states (mean-pooled)
    let pooled: Vec<Vec<f32>> = sems.iter().map(|st| {
        let h = &st[cfg.m_layers - 1].hidden;
        let d = h.shape()[1];
        let vals = h.values();
        let rows = h.shape()[0];
        (0..d).map(|j| (0..rows).map(|r| vals[r * d + j]).sum::<f32>() / rows as f32).collect()
    }).collect();
    let mut mind = f32::MAX;
    for i in 0..8 { for j in (i+1)..8 {
        let dist: f32 = pooled[i].iter().zip(&pooled[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        mind = mind.min(dist);
    }}
    println!("min pairwise dist of pooled sem_M: {mind:.4}, rms of pooled[0]: {:.4}", rms(&pooled[0]));
    // K magnitudes: geo vs sem at block 0
    let g0 = init_geo_states(&store, None, &cfg).unwrap();
    let (q, k_geo, _) = project_qkv_geo(&store, 0, &g0, cfg.n_heads).unwrap();
    let (_, k_sem, v_sem) = project_qkv_sem(&store, &sems[0][2], cfg.n_heads).unwrap();
    println!("rms: q_geo {:.3} k_geo {:.3} k_sem {:.3} v_sem {:.3}",
        rms(&q.values()), rms(&k_geo.values()), rms(&k_sem.values()), rms(&v_sem.values()));
    // score scale: q (G,dh) x k rows
    let qv = q.values(); let kv = k_sem.values();
    let dh = cfg.d_head();
    let mut smax = 0.0f32;
    for g in 0..4 { for srow in 0..4 {
        let s: f32 = (0..dh).map(|d| qv[g * dh + d] * kv[srow * dh + d]).sum::<f32>() / (dh as f32).sqrt();
        smax = smax.max(s.abs());
    }}
    println!("sample |score| scale q x k_sem: {smax:.4}");

    // Direct-injection memorization: geo0 = queries + broadcast(pooled sem)
    println!("--- direct injection memorization test ---");
    let store2 = init_full_store(&cfg, 0);
    prefit_semantic(&store2, &cfg, &Rng::new(0), 300, 8, 3e-3).unwrap();
    store2.set_trainable_groups(&[ParamGroup::Spatial, ParamGroup::Queries, ParamGroup::DepthHead]);
    let mut opt = OptimizerState::new(&store2, 3e-3);
    let sems2: Vec<Vec<f32>> = samples.iter().map(|s| {
        let st = semantic_forward(&s.prompt, &store2, &cfg).unwrap();
        let h = &st[cfg.m_layers - 1].hidden;
        let d = h.shape()[1]; let rows = h.shape()[0]; let vals = h.values();
        (0..d).map(|j| (0..rows).map(|r| vals[r * d + j]).sum::<f32>() / rows as f32).collect()
    }).collect();
    for step in 0..400 {
        let mut losses = Vec::new();
        for (s, sem_vec) in samples.iter().zip(&sems2) {
            let bias = Array::from_vec(sem_vec.clone(), &[cfg.d_model]).unwrap();
            let g0v = store2.get("queries.bank").add_bias(&bias).unwrap();
            let geo = derive_geometry(&GeoState { hidden: g0v, layer_index: 0 }, &[], &ModelConfig { share_strategy: spatialgen::config::ShareStrategy::None, ..cfg.clone() }, &store2).unwrap();
            let pred = decode_depth(&geo, &store2, &cfg).unwrap();
            losses.push(depth_loss(&pred, &s.depth, &s.mask).unwrap());
        }
        let refs: Vec<&Array> = losses.iter().collect();
        let loss = Array::concat(&refs, 0).unwrap().mean().unwrap();
        let l = loss.item();
        loss.backward().unwrap();
        store2.clip_grad_norm(1.0);
        opt.adam_step(&store2).unwrap();
        if step % 100 == 0 || step == 399 { println!("direct step {step:>4} loss {l:.4}"); }
    }
}
