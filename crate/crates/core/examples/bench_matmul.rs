use spatialgen::numcore::{Array, Rng};

fn main() {
    let mut rng = Rng::new(0);
    // Typical shapes: (70,64)x(64,64), (64,64)x(64,256), (1024,288)x(288,16)
    for (m, k, n) in [(70usize, 64usize, 64usize), (64, 64, 256), (256, 576, 32), (1024, 288, 16)] {
        let a = Array::randn(&[m, k], &mut rng);
        let b = Array::randn(&[k, n], &mut rng);
        let t0 = std::time::Instant::now();
        let iters = 2000;
        for _ in 0..iters {
            let _ = a.matmul(&b).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let flops = 2.0 * m as f64 * k as f64 * n as f64;
        println!("({m},{k},{n}): {:.1} us, {:.2} Gflop/s", dt * 1e6, flops / dt / 1e9);
    }
    // gelu throughput
    let x = Array::randn(&[70, 256], &mut rng);
    let t0 = std::time::Instant::now();
    for _ in 0..2000 { let _ = x.gelu().unwrap(); }
    let dt = t0.elapsed().as_secs_f64() / 2000.0;
    println!("gelu 70x256: {:.1} us ({:.1} ns/elem)", dt * 1e6, dt * 1e9 / (70.0*256.0));
    // layer_norm
    let g = Array::full(&[256], 1.0);
    let bb = Array::zeros(&[256]);
    let t0 = std::time::Instant::now();
    for _ in 0..2000 { let _ = x.layer_norm(&g, &bb).unwrap(); }
    let dt = t0.elapsed().as_secs_f64() / 2000.0;
    println!("layer_norm 70x256: {:.1} us", dt * 1e6);
    // softmax on attention-like shape
    let s = Array::randn(&[70, 70], &mut rng);
    let t0 = std::time::Instant::now();
    for _ in 0..2000 { let _ = s.softmax(1).unwrap(); }
    let dt = t0.elapsed().as_secs_f64() / 2000.0;
    println!("softmax 70x70: {:.1} us", dt * 1e6);
}
