use spatialgen::attention::semantic_forward;
use spatialgen::config::ModelConfig;
use spatialgen::geometry::{decode_depth, depth_loss, derive_geometry, init_geo_states};
use spatialgen::numcore::{Array, OptimizerState, ParamGroup, Rng};
use spatialgen::scenegen::{make_sample, CurriculumPhase, TaskMix};
use spatialgen::trainer::{init_full_store, prefit_semantic};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let cfg = ModelConfig::desk();
    let store = init_full_store(&cfg, 0);
    prefit_semantic(&store, &cfg, &Rng::new(0), 300, 8, 3e-3).unwrap();
    store.set_trainable_groups(&[ParamGroup::Spatial, ParamGroup::Queries, ParamGroup::DepthHead]);
    let mut opt = OptimizerState::new(&store, lr);
    let rng = Rng::new(0).stream("overfit");
    let samples: Vec<_> = (0..8u64)
        .map(|i| make_sample(&rng, i, &CurriculumPhase::coarse(), &TaskMix::t2i_only(), 32, 32))
        .collect();
    // Constant-prediction reference: per-pixel marginal over the 8 scenes.
    let mut best_const = 0.0f64;
    {
        let h = 32 * 32;
        for px in 0..h {
            let mut vals: Vec<f32> = samples.iter().map(|s| s.depth.values()[px]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = vals[4];
            best_const += vals.iter().map(|v| (v - med).abs() as f64).sum::<f64>() / 8.0;
        }
        best_const /= h as f64;
    }
    println!("pixelwise-median reference loss: {best_const:.4}");
    let sems: Vec<_> = samples
        .iter()
        .map(|s| semantic_forward(&s.prompt, &store, &cfg).unwrap())
        .collect();
    for step in 0..steps {
        let mut losses = Vec::new();
        for (s, sem) in samples.iter().zip(&sems) {
            let g0 = init_geo_states(&store, None, &cfg).unwrap();
            let geo = derive_geometry(&g0, sem, &cfg, &store).unwrap();
            let pred = decode_depth(&geo, &store, &cfg).unwrap();
            losses.push(depth_loss(&pred, &s.depth, &s.mask).unwrap());
        }
        let refs: Vec<&Array> = losses.iter().collect();
        let loss = Array::concat(&refs, 0).unwrap().mean().unwrap();
        let l = loss.item();
        loss.backward().unwrap();
        let gn = store.clip_grad_norm(1.0);
        opt.adam_step(&store).unwrap();
        if step % 50 == 0 || step == steps - 1 {
            println!("step {step:>4} loss {l:.4} gnorm {gn:.2}");
        }
    }
}
