use spatialgen::config::ModelConfig;
use spatialgen::trainer::{TrainParams, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let tp = TrainParams { steps_s1: steps, steps_s2: 0, lr, val_every: 100, ..TrainParams::default() };
    let cfg = ModelConfig::desk();
    let mut t = Trainer::new(cfg, tp, 0).unwrap();
    while !t.finished() {
        let r = t.step_once().unwrap();
        if let Some(v) = r.val_depth_loss {
            println!("step {:>5} val {v:.4} train {:.4} gnorm {:.3}", r.step, r.l_depth, r.grad_norm);
        }
    }
    println!("final val {:.4}", t.validate_depth().unwrap());
}
