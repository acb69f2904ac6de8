use spatialgen::config::{ModelConfig, ShareStrategy};
use spatialgen::trainer::{TrainParams, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let prefit: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let tp = TrainParams { steps_s1: steps, steps_s2: 0, sem_prefit_steps: prefit, ..TrainParams::default() };
    for strategy in [ShareStrategy::Uniform, ShareStrategy::None] {
        let mut cfg = ModelConfig::desk();
        cfg.share_strategy = strategy;
        let t0 = std::time::Instant::now();
        let mut t = Trainer::new(cfg, tp.clone(), 0).unwrap();
        t.run_to_completion().unwrap();
        let step0 = t.log.records[0].val_depth_loss.unwrap();
        let fin = t.validate_depth().unwrap();
        let curve: Vec<String> = t.log.records.iter()
            .filter_map(|r| r.val_depth_loss.map(|v| format!("{}:{v:.3}", r.step)))
            .collect();
        println!("{strategy:?} (prefit {prefit}): step0 {step0:.4} -> final {fin:.4} (ratio {:.3}) in {:?}", fin / step0, t0.elapsed());
        println!("  curve: {}", curve.join(" "));
    }
}
