use lcpformer::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    // representative attention-sized matmuls: [M,K,C]x[C,C]
    for &(m, k, c) in &[(64usize, 16usize, 16usize), (64, 12, 24), (128, 16, 32), (512, 16, 16)] {
        let a = Tensor::full(vec![m, k, c], 0.5);
        let b = Tensor::full(vec![c, c], 0.25);
        let start = Instant::now();
        let mut reps = 0u64;
        while start.elapsed().as_secs_f64() < 0.5 {
            let tape = Tape::new();
            let va = tape.var(a.clone());
            let vb = tape.var(b.clone());
            let out = va.matmul(&vb).unwrap().sum_all();
            tape.backward(&out).unwrap();
            reps += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        // fwd ≈ m*k*c*c mults, bwd ≈ 2x
        let flops = (reps as f64) * (m * k * c * c) as f64 * 2.0 * 3.0;
        println!("[{m},{k},{c}]x[{c},{c}] fwd+bwd: {:.2} GFLOP/s ({} reps)", flops / secs / 1e9, reps);
    }
    // big 2d
    let n = 256;
    let a = Tensor::full(vec![n, n], 0.5);
    let b = Tensor::full(vec![n, n], 0.25);
    let start = Instant::now();
    let mut reps = 0u64;
    while start.elapsed().as_secs_f64() < 0.5 {
        let tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let _ = va.matmul(&vb).unwrap();
        reps += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    println!("256x256 fwd only: {:.2} GFLOP/s", (reps as f64) * (n*n*n) as f64 * 2.0 / secs / 1e9);
}
