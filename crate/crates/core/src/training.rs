//! Mini-batch SGD, full-batch GD, accuracy evaluation, and the linear
//! baseline that defines the threshold accuracy `t`.
//!
//! The trainer supports a separate learning-rate multiplier for the input
//! layer (the experiments train layer 1 at `eta * 1e-2` or freeze it), stops
//! at the first non-finite loss, and evaluates validation accuracy at the end
//! of every epoch with deterministic, seed-derived shuffling.

use crate::autodiff::{self, Batch, LossKind, Targets};
use crate::data::{encode_targets, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{init_network, ArchSpec, InitScheme, Mlp};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Learning-rate multiplier for layer 1; ignored when `freeze_input`.
    pub input_layer_multiplier: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub shuffle_seed: u64,
    pub freeze_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            input_layer_multiplier: 1e-2,
            batch_size: 128,
            epochs: 10,
            loss: LossKind::CrossEntropy,
            shuffle_seed: 0,
            freeze_input: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.input_layer_multiplier) {
            return Err(Error::Config("input_layer_multiplier must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn layer_lr(&self, layer: usize) -> f64 {
        if layer == 0 {
            if self.freeze_input {
                0.0
            } else {
                self.base_lr * self.input_layer_multiplier
            }
        } else {
            self.base_lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub per_epoch_val_accuracy: Vec<f64>,
    pub best_val_accuracy: f64,
    pub diverged: bool,
    pub epochs_run: usize,
}

/// Early-exit rule for `sgd_train`.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    /// Run all configured epochs.
    FullBudget,
    /// Stop at the end of the first epoch whose validation accuracy meets `t`.
    AccuracyAtLeast(f64),
}

/// Train `mlp` in place with mini-batch SGD. Weights are updated with the
/// per-layer step `eta * multiplier(layer)`; training halts at the first
/// non-finite mini-batch loss with `diverged = true` and no further updates.
pub fn sgd_train(
    mlp: &mut Mlp,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stop: StopRule,
) -> Result<TrainReport> {
    cfg.validate()?;
    let train = dataset.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let d = dataset.dim();
    if d != mlp.arch.n0 {
        return Err(Error::Shape(format!(
            "dataset dim {} != network n0 {}",
            d, mlp.arch.n0
        )));
    }
    let shuffle_root = Rng::from_seed(cfg.shuffle_seed);
    let mut accs = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut erng = shuffle_root.derive(&[SHUFFLE_TAG, epoch as u64]);
        let perm = erng.permutation(train.len());
        let mut start = 0;
        while start < perm.len() {
            let end = (start + cfg.batch_size).min(perm.len());
            let idx: Vec<usize> = perm[start..end].iter().map(|&i| train[i]).collect();
            let batch = make_batch(dataset, &idx, cfg.loss, mlp.arch.out_dim)?;
            match step(mlp, &batch, cfg) {
                Ok(()) => {}
                Err(Error::Numeric { .. }) => {
                    diverged = true;
                    epochs_run = epoch + 1;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            start = end;
        }
        epochs_run = epoch + 1;
        let acc = evaluate_accuracy(mlp, dataset, Split::Val)?;
        accs.push(acc);
        if let StopRule::AccuracyAtLeast(t) = stop {
            if acc >= t {
                break;
            }
        }
    }

    let best = accs.iter().cloned().fold(0.0, f64::max);
    Ok(TrainReport {
        per_epoch_val_accuracy: accs,
        best_val_accuracy: best,
        diverged,
        epochs_run,
    })
}

// tag for deriving per-epoch shuffle streams
const SHUFFLE_TAG: u64 = 0x7368_7566_666c_65;

fn step(mlp: &mut Mlp, batch: &Batch, cfg: &TrainConfig) -> Result<()> {
    // loss_and_grad shares one forward pass and errors on non-finite loss
    let (_, g) = autodiff::loss_and_grad(mlp, batch, cfg.loss)?;
    for layer in 0..mlp.weights.len() {
        let lr = cfg.layer_lr(layer);
        if lr != 0.0 {
            crate::linalg::axpy(-lr, g.layer(layer), &mut mlp.weights[layer]);
        }
    }
    Ok(())
}

fn make_batch(dataset: &Dataset, idx: &[usize], loss: LossKind, out_dim: usize) -> Result<Batch> {
    let d = dataset.dim();
    let mut inputs = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        inputs.extend_from_slice(dataset.row(i));
    }
    let labels: Vec<u32> = idx.iter().map(|&i| dataset.labels[i]).collect();
    match encode_targets(&labels, dataset.classes, loss)? {
        Targets::Values { data, dim } => {
            debug_assert_eq!(dim, dataset.classes);
            if dim != out_dim {
                return Err(Error::Shape(format!(
                    "dataset classes {} != network out_dim {}",
                    dim, out_dim
                )));
            }
            Batch::regression(inputs, d, data, dim)
        }
        Targets::Labels(ls) => Batch::classification(inputs, d, ls),
    }
}

/// Argmax classification accuracy on a split; ties break to the lowest index.
pub fn evaluate_accuracy(mlp: &Mlp, dataset: &Dataset, split: Split) -> Result<f64> {
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?}")));
    }
    let d = dataset.dim();
    let c = mlp.arch.out_dim;
    let mut correct = 0usize;
    // evaluate in chunks to bound buffer sizes
    for chunk in idx.chunks(1024) {
        let mut inputs = Vec::with_capacity(chunk.len() * d);
        for &i in chunk {
            inputs.extend_from_slice(dataset.row(i));
        }
        let preacts = mlp.forward_batch(&inputs, chunk.len())?;
        let out = preacts.last().unwrap();
        for (b, &i) in chunk.iter().enumerate() {
            let row = &out[b * c..(b + 1) * c];
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == dataset.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Train a one-weight-layer network with the same trainer and return its best
/// validation accuracy: the threshold accuracy `t` used by the search.
pub fn linear_baseline(dataset: &Dataset, cfg: &TrainConfig, init_seed: u64) -> Result<f64> {
    let arch = ArchSpec::new(dataset.dim(), vec![], dataset.classes)?;
    let mut rng = Rng::from_seed(init_seed);
    let mut mlp = init_network(&arch, InitScheme::Kaiming, &mut rng)?;
    let mut cfg = cfg.clone();
    cfg.input_layer_multiplier = 1.0; // the single layer trains at the base rate
    cfg.freeze_input = false;
    let report = sgd_train(&mut mlp, dataset, &cfg, StopRule::FullBudget)?;
    Ok(report.best_val_accuracy)
}

/// One probe of the full-batch GD trajectory.
#[derive(Debug, Clone)]
pub struct GdProbe {
    pub step: usize,
    pub loss: f64,
    pub lambda1: f64,
}

#[derive(Debug, Clone)]
pub struct GdTrajectory {
    pub probes: Vec<GdProbe>,
    pub diverged: bool,
    pub steps_run: usize,
    pub final_train_accuracy: f64,
}

/// Vanilla full-batch gradient descent with periodic sharpness probes.
/// `lambda1` is measured by power iteration on the full-batch loss Hessian
/// every `probe_interval` steps (and at step 0). Divergence truncates the
/// trajectory and sets the flag.
pub fn full_batch_gd(
    mlp: &mut Mlp,
    dataset: &Dataset,
    loss_kind: LossKind,
    eta: f64,
    steps: usize,
    probe_interval: usize,
    probe_rng: &mut Rng,
) -> Result<GdTrajectory> {
    if probe_interval == 0 {
        return Err(Error::Config("probe_interval must be >= 1".into()));
    }
    let train = dataset.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let idx: Vec<usize> = train.to_vec();
    let batch = make_batch(dataset, &idx, loss_kind, mlp.arch.out_dim)?;
    let mut probes = Vec::new();
    let mut diverged = false;
    let mut steps_run = 0;

    let probe = |mlp: &Mlp, step: usize, loss: f64, rng: &mut Rng| -> Result<GdProbe> {
        let est = crate::sharpness::loss_hessian_top_eigenvalue(
            mlp,
            &batch,
            loss_kind,
            &crate::sharpness::PowerIterConfig::default(),
            rng,
        )?;
        Ok(GdProbe {
            step,
            loss,
            lambda1: est.lambda1,
        })
    };

    let l0 = autodiff::loss(mlp, &batch, loss_kind)?;
    probes.push(probe(mlp, 0, l0, probe_rng)?);

    for s in 1..=steps {
        let g = match autodiff::loss_and_grad(mlp, &batch, loss_kind).map(|r| r.1) {
            Ok(g) => g,
            Err(Error::Numeric { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        for layer in 0..mlp.weights.len() {
            crate::linalg::axpy(-eta, g.layer(layer), &mut mlp.weights[layer]);
        }
        steps_run = s;
        if s % probe_interval == 0 {
            match autodiff::loss(mlp, &batch, loss_kind) {
                Ok(l_after) => probes.push(probe(mlp, s, l_after, probe_rng)?),
                Err(Error::Numeric { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let final_acc = if diverged {
        0.0
    } else {
        evaluate_accuracy(mlp, dataset, Split::Train)?
    };
    Ok(GdTrajectory {
        probes,
        diverged,
        steps_run,
        final_train_accuracy: final_acc,
    })
}
