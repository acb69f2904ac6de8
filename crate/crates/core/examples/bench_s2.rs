use spatialgen::attention::semantic_forward;
use spatialgen::config::ModelConfig;
use spatialgen::diffusion::*;
use spatialgen::geometry::{decode_depth, depth_loss, derive_geometry, init_geo_states};
use spatialgen::numcore::{Array, ParamGroup, Rng};
use spatialgen::scenegen::{make_sample, CurriculumPhase, TaskMix};
use spatialgen::trainer::init_full_store;

fn main() {
    let cfg = ModelConfig::desk();
    let store = init_full_store(&cfg, 0);
    store.set_trainable_groups(&[
        ParamGroup::Spatial, ParamGroup::Queries, ParamGroup::DepthHead,
        ParamGroup::Dit, ParamGroup::Adapter,
    ]);
    let rng = Rng::new(0).stream("data");
    let sched = NoiseSchedule::for_config(&cfg);
    let sample = make_sample(&rng, 1001, &CurriculumPhase::fine(), &TaskMix::mixed(), 32, 32);
    println!("prompt len {}", sample.prompt.len());
    let iters = 30;
    let mut tsem = std::time::Duration::ZERO;
    let mut tgeo = std::time::Duration::ZERO;
    let mut thead = std::time::Duration::ZERO;
    let mut tcodec = std::time::Duration::ZERO;
    let mut tdit = std::time::Duration::ZERO;
    let mut tbwd = std::time::Duration::ZERO;
    let mut rr = Rng::new(5);
    for _ in 0..iters {
        let t = std::time::Instant::now();
        let sem = semantic_forward(&sample.prompt, &store, &cfg).unwrap();
        tsem += t.elapsed();
        let t = std::time::Instant::now();
        let s0 = init_geo_states(&store, sample.source_image.as_ref(), &cfg).unwrap();
        let geo = derive_geometry(&s0, &sem, &cfg, &store).unwrap();
        tgeo += t.elapsed();
        let t = std::time::Instant::now();
        let pred = decode_depth(&geo, &store, &cfg).unwrap();
        let l_depth = depth_loss(&pred, &sample.depth, &sample.mask).unwrap();
        thead += t.elapsed();
        let t = std::time::Instant::now();
        let z0 = latent_encode(&sample.image, &store, &cfg).unwrap();
        tcodec += t.elapsed();
        let t = std::time::Instant::now();
        let eps = Array::randn(&[4, 4, 4], &mut rr);
        let z_t = q_sample(&z0, 50, &eps, &sched).unwrap();
        let f = depth_adapter(&pred, &store, &cfg).unwrap();
        let z_hat = fuse_latent(&z_t, Some(&f), cfg.inject_mode, &store).unwrap();
        let ep = dit_forward(&z_hat, 50, &sem[cfg.m_layers-1], &store, &cfg).unwrap();
        let l_diff = diffusion_loss(&ep, &eps).unwrap();
        tdit += t.elapsed();
        let t = std::time::Instant::now();
        let total = l_diff.add(&l_depth.scale(0.5).unwrap()).unwrap();
        total.backward().unwrap();
        store.zero_grads();
        tbwd += t.elapsed();
    }
    println!("sem fwd:  {:?}", tsem / iters);
    println!("geo fwd:  {:?}", tgeo / iters);
    println!("head fwd: {:?}", thead / iters);
    println!("codec:    {:?}", tcodec / iters);
    println!("dit path: {:?}", tdit / iters);
    println!("backward: {:?}", tbwd / iters);
}
