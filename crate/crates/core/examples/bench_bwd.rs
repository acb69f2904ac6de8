use spatialgen::numcore::{Array, Rng};

fn main() {
    let mut rng = Rng::new(0);
    for (m, k, n) in [(64usize, 64usize, 64usize), (64, 64, 256), (64, 256, 64), (256, 576, 32), (1024, 288, 8)] {
        let a = Array::randn(&[m, k], &mut rng).requires_grad(true);
        let b = Array::randn(&[k, n], &mut rng).requires_grad(true);
        let iters = 300;
        let t0 = std::time::Instant::now();
        for _ in 0..iters {
            let loss = a.matmul(&b).unwrap().sum().unwrap();
            loss.backward().unwrap();
            a.zero_grad(); b.zero_grad();
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let flops = 6.0 * (m * k * n) as f64; // fwd + dA + dB
        println!("matmul f+b ({m},{k},{n}): {:.0} us, {:.2} Gflop/s", dt * 1e6, flops / dt / 1e9);
    }
    // attention-shaped chain fwd+bwd
    let q = Array::randn(&[64, 16], &mut rng).requires_grad(true);
    let kk = Array::randn(&[85, 16], &mut rng).requires_grad(true);
    let v = Array::randn(&[85, 16], &mut rng).requires_grad(true);
    let iters = 300;
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let s = q.matmul(&kk.transpose().unwrap()).unwrap().scale(0.25).unwrap();
        let w = s.softmax(1).unwrap();
        let loss = w.matmul(&v).unwrap().sum().unwrap();
        loss.backward().unwrap();
        q.zero_grad(); kk.zero_grad(); v.zero_grad();
    }
    println!("attn head chain f+b: {:.0} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);
}
