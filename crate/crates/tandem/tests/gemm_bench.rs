use std::time::Instant;
use tandem::tensor::matmul;

#[test]
fn gemm_throughput_probe() {
    let m = 16; let k = 144; let n = 4096;
    let a = vec![0.5f64; m*k];
    let b = vec![0.25f64; k*n];
    let mut c = vec![0.0f64; m*n];
    let iters = 300;
    let t0 = Instant::now();
    for _ in 0..iters {
        matmul(&a, &b, m, k, n, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    let flops = 2.0 * (m*k*n) as f64;
    eprintln!("dgemm 16x144x4096: {:.3} ms/call, {:.2} GFLOP/s", dt*1e3, flops/dt/1e9);
}
