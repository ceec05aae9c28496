use milr_core::autodiff::{self, LossKind};
use milr_core::data::{gen_gaussian, GaussianSpec, Split};
use milr_core::network::{init_network, ArchSpec, InitScheme};
use milr_core::rng::Rng;

fn main() {
    let spec = GaussianSpec { d: 10, per_class_train: 300, per_class_val: 100, anisotropic: false, seed: 4 };
    let ds = gen_gaussian(&spec, &mut Rng::from_seed(4)).unwrap();
    let arch = ArchSpec::new(10, vec![16], 2).unwrap();
    let mut mlp = init_network(&arch, InitScheme::Kaiming, &mut Rng::from_seed(2)).unwrap();
    let idx = ds.split_indices(Split::Train);
    for step in 0..12 {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for &i in idx.iter().skip(step * 32).take(32) {
            inputs.extend_from_slice(ds.row(i));
            labels.push(ds.labels[i]);
        }
        let b = autodiff::Batch::classification(inputs, 10, labels).unwrap();
        match autodiff::loss_and_grad(&mlp, &b, LossKind::CrossEntropy) {
            Ok((l, g)) => {
                let gmax = g.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                let has_nan_w = mlp.weights.iter().flat_map(|w| w.iter()).any(|v| v.is_nan());
                println!("step {step}: loss {l:.3e} gmax {gmax:.3e} nan_w {has_nan_w}");
                for (li, wl) in [(0usize, 1e8f64), (1, 1e10)] {
                    for (w, gv) in mlp.weights[li].iter_mut().zip(g.layer(li)) {
                        *w -= wl * gv;
                    }
                }
            }
            Err(e) => { println!("step {step}: ERROR {e}"); break; }
        }
    }
}
