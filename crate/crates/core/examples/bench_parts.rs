use spatialgen::attention::semantic_forward;
use spatialgen::config::ModelConfig;
use spatialgen::geometry::{decode_depth, depth_loss, derive_geometry, init_geo_states};
use spatialgen::numcore::{ParamGroup, Rng};
use spatialgen::scenegen::{make_sample, CurriculumPhase, TaskMix};
use spatialgen::trainer::init_full_store;

thread_local! { static BWD: std::cell::Cell<u64> = const { std::cell::Cell::new(0) }; }

fn main() {
    let cfg = ModelConfig::desk();
    let store = init_full_store(&cfg, 0);
    store.set_trainable_groups(&[ParamGroup::Spatial, ParamGroup::Queries, ParamGroup::DepthHead]);
    let rng = Rng::new(0).stream("data");
    let sample = make_sample(&rng, 1, &CurriculumPhase::fine(), &TaskMix::mixed(), 32, 32);
    println!("prompt len {}", sample.prompt.len());
    let iters = 50;

    let t0 = std::time::Instant::now();
    for _ in 0..iters { let _ = semantic_forward(&sample.prompt, &store, &cfg).unwrap(); }
    println!("sem fwd: {:?}", t0.elapsed() / iters);

    let sem = semantic_forward(&sample.prompt, &store, &cfg).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let s0 = init_geo_states(&store, None, &cfg).unwrap();
        let _ = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
    }
    println!("geo fwd: {:?}", t0.elapsed() / iters);

    let s0 = init_geo_states(&store, None, &cfg).unwrap();
    let geo = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..iters { let _ = decode_depth(&geo, &store, &cfg).unwrap(); }
    println!("head fwd: {:?}", t0.elapsed() / iters);

    // Full forward + backward
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let sem = semantic_forward(&sample.prompt, &store, &cfg).unwrap();
        let s0 = init_geo_states(&store, None, &cfg).unwrap();
        let geo = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
        let pred = decode_depth(&geo, &store, &cfg).unwrap();
        let loss = depth_loss(&pred, &sample.depth, &sample.mask).unwrap();
        loss.backward().unwrap();
        store.zero_grads();
    }
    println!("full stage1 sample fwd+bwd: {:?}", t0.elapsed() / iters);

    // Backward alone
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let sem = semantic_forward(&sample.prompt, &store, &cfg).unwrap();
        let s0 = init_geo_states(&store, None, &cfg).unwrap();
        let geo = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
        let pred = decode_depth(&geo, &store, &cfg).unwrap();
        let loss = depth_loss(&pred, &sample.depth, &sample.mask).unwrap();
        let tb = std::time::Instant::now();
        loss.backward().unwrap();
        BWD.with(|c| c.set(c.get() + tb.elapsed().as_nanos() as u64));
        store.zero_grads();
    }
    println!("  of which backward: {:?}", std::time::Duration::from_nanos(BWD.with(|c| c.get()) / iters as u64));

    // Group hash cost
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        for g in [ParamGroup::Semantic, ParamGroup::Dit, ParamGroup::Adapter, ParamGroup::Codec] {
            let _ = store.group_hash(g);
        }
    }
    println!("frozen hashes: {:?}", t0.elapsed() / iters);
}
// appended: backward-only timing
