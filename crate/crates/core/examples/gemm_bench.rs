use std::time::Instant;
use taskdistill::tensor::{matmul, Tensor};

fn main() {
    for (m, k, n) in [(64, 800, 500), (50, 500, 64), (20, 25, 576), (50, 64, 500)] {
        let a = Tensor::<f64>::from_fn(&[m, k], |i| (i % 7) as f64 * 0.1);
        let b = Tensor::<f64>::from_fn(&[k, n], |i| (i % 5) as f64 * 0.2);
        let reps = (2e8 / (m * k * n) as f64).ceil() as usize;
        let start = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(matmul(&a, &b).unwrap());
        }
        let secs = start.elapsed().as_secs_f64();
        println!("{m}x{k}x{n}: {:.2} GFLOP/s", 2.0 * (m * k * n * reps) as f64 / secs / 1e9);
    }
}
