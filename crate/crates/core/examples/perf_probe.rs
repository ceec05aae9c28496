use milr_core::autodiff::{self, Batch, LossKind};
use milr_core::network::{init_network, ArchSpec, InitScheme};
use milr_core::rng::Rng;
use std::time::Instant;

fn main() {
    // criterion-8-like: d=20, 80x3, 2k samples, MSE
    let mut rng = Rng::from_seed(1);
    let arch = ArchSpec::constant_width(20, 3, 80, 2).unwrap();
    let mlp = init_network(&arch, InitScheme::Kaiming, &mut rng).unwrap();
    let k = 2000;
    let mut inputs = vec![0.0; k * 20];
    rng.fill_standard_normal(&mut inputs);
    let mut vals = vec![0.0; k * 2];
    rng.fill_standard_normal(&mut vals);
    let batch = Batch::regression(inputs, 20, vals, 2).unwrap();
    let t = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let _ = autodiff::grad(&mlp, &batch, LossKind::Mse).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let flops = 4.0 * mlp.n_params() as f64 * k as f64;
    println!("grad (2k batch): {:.1} ms/call, ~{:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);

    // sweep-like: d=100, 240x15, batch 128, CE
    let arch2 = ArchSpec::constant_width(100, 15, 240, 2).unwrap();
    let mlp2 = init_network(&arch2, InitScheme::Kaiming, &mut rng).unwrap();
    let k2 = 128;
    let mut in2 = vec![0.0; k2 * 100];
    rng.fill_standard_normal(&mut in2);
    let labels: Vec<u32> = (0..k2).map(|i| (i % 2) as u32).collect();
    let b2 = Batch::classification(in2, 100, labels).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        let _ = autodiff::grad(&mlp2, &b2, LossKind::CrossEntropy).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let flops = 4.0 * mlp2.n_params() as f64 * k2 as f64;
    println!("grad (15x240, b128): {:.1} ms/call, ~{:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
}
