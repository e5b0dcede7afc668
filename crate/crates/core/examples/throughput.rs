//! Times one training epoch of the MNIST teacher on synthetic data.

use std::time::Instant;

use taskdistill::data::{synthetic, Source};
use taskdistill::nn::ModelArch;
use taskdistill::train::{train_teacher, TrainConfig};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let (train, _) = synthetic::datasets::<f64>(Source::Mnist, n, 10, 1).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::mnist() };
    let start = Instant::now();
    train_teacher(ModelArch::mnist_teacher(), &train, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{n} samples in {secs:.2}s: {:.0} samples/s, 20 epochs of 60000 ≈ {:.1} min",
        n as f64 / secs,
        20.0 * 60000.0 * secs / n as f64 / 60.0
    );
}
