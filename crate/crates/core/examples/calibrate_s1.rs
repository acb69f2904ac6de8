use spatialgen::config::{ModelConfig, ShareStrategy};
use spatialgen::trainer::{TrainParams, Trainer};

fn main() {
    let tp = TrainParams { steps_s2: 0, ..TrainParams::default() };
    for strategy in [ShareStrategy::Uniform, ShareStrategy::None, ShareStrategy::Shallow, ShareStrategy::Deep] {
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
        println!("{strategy:?}: step0 {step0:.4} -> final {fin:.4} (ratio {:.3}) in {:?}", fin / step0, t0.elapsed());
        println!("  curve: {}", curve.join(" "));
    }
}
