use spatialgen::config::ModelConfig;
use spatialgen::trainer::{TrainParams, Trainer};

fn main() {
    let cfg = ModelConfig::desk();
    let mut tp = TrainParams::default();
    tp.steps_s1 = 20;
    tp.steps_s2 = 20;
    tp.val_every = 1000;
    tp.codec_prefit_steps = 50;
    tp.sem_prefit_steps = 50;
    let t0 = std::time::Instant::now();
    let mut t = Trainer::new(cfg, tp, 0).unwrap();
    println!("init+prefits(50/50): {:?}", t0.elapsed());
    let t1 = std::time::Instant::now();
    for _ in 0..20 { t.step_once().unwrap(); }
    println!("stage1 20 steps: {:?} ({:?}/step)", t1.elapsed(), t1.elapsed() / 20);
    let t2 = std::time::Instant::now();
    for _ in 0..20 { t.step_once().unwrap(); }
    println!("stage2 20 steps: {:?} ({:?}/step)", t2.elapsed(), t2.elapsed() / 20);
    let t3 = std::time::Instant::now();
    let v = t.validate_depth().unwrap();
    println!("validate_depth(64): {:?} -> {v}", t3.elapsed());
    let t4 = std::time::Instant::now();
    let v2 = t.validate_diffusion().unwrap();
    println!("validate_diff(64): {:?} -> {v2}", t4.elapsed());
}
