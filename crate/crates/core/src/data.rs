//! Dataset generation and ingestion: synthetic Gaussian classification data,
//! IDX (MNIST-family) and CIFAR-10 binary loaders, target encodings, and a
//! bit-stable on-disk cache.

use crate::autodiff::Targets;
use crate::error::{Error, Result};
use crate::rng::Rng;
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Feature matrix plus labels and a fixed train/val split.
///
/// Rows are stored contiguously (`features[i*d .. (i+1)*d]`); the split index
/// sets are disjoint and exhaustive and never reshuffled after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub d: usize,
    pub classes: usize,
    pub train_idx: Vec<u32>,
    pub val_idx: Vec<u32>,
    /// Free-form provenance string recorded in CSV headers.
    pub source: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.train_idx.iter().map(|&i| i as usize).collect(),
            Split::Val => self.val_idx.iter().map(|&i| i as usize).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.n() * self.d {
            return Err(Error::Shape("feature buffer size mismatch".into()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "dataset features".into(),
                layer: 0,
            });
        }
        let mut seen = vec![false; self.n()];
        for &i in self.train_idx.iter().chain(self.val_idx.iter()) {
            let i = i as usize;
            if i >= self.n() || seen[i] {
                return Err(Error::Shape("split indices overlap or out of range".into()));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Shape("split indices are not exhaustive".into()));
        }
        Ok(())
    }

    /// Restrict to the first `per_split` train and val samples (debug scale).
    pub fn truncated(&self, train_n: usize, val_n: usize) -> Dataset {
        let mut ds = self.clone();
        ds.train_idx.truncate(train_n);
        ds.val_idx.truncate(val_n);
        let keep: Vec<u32> = ds.train_idx.iter().chain(ds.val_idx.iter()).cloned().collect();
        let mut features = Vec::with_capacity(keep.len() * self.d);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            features.extend_from_slice(self.row(i as usize));
            labels.push(self.labels[i as usize]);
        }
        Dataset {
            features,
            labels,
            d: self.d,
            classes: self.classes,
            train_idx: (0..ds.train_idx.len() as u32).collect(),
            val_idx: (ds.train_idx.len() as u32..keep.len() as u32).collect(),
            source: format!("{}[truncated {train_n}+{val_n}]", self.source),
        }
    }
}

/// Spec for the synthetic two-class Gaussian task.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub d: usize,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub anisotropic: bool,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        GaussianSpec {
            d: 100,
            per_class_train: 9000,
            per_class_val: 1000,
            anisotropic: false,
            seed: 0,
        }
    }
}

/// Two-class Gaussian data. Class means are drawn standard normal; isotropic
/// samples add `N(0, I)` noise, anisotropic samples add `A z / sqrt(d)` noise
/// with `A` standard normal, so the covariance is `A A^T / d` (PSD by
/// construction). Layout: all train rows (class 0 then class 1), then all val
/// rows (class 0 then class 1).
pub fn gen_gaussian(spec: &GaussianSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.d == 0 || spec.per_class_train == 0 || spec.per_class_val == 0 {
        return Err(Error::Config("GaussianSpec counts and dim must be > 0".into()));
    }
    let d = spec.d;
    let mut r = rng.derive(&[0x6761_7573_73, spec.seed]);
    let mut means = vec![0.0; 2 * d];
    r.fill_standard_normal(&mut means);
    let amat = if spec.anisotropic {
        let mut m = vec![vec![0.0; d * d], vec![0.0; d * d]];
        r.fill_standard_normal(&mut m[0]);
        r.fill_standard_normal(&mut m[1]);
        Some(m)
    } else {
        None
    };

    let n_train = 2 * spec.per_class_train;
    let n_val = 2 * spec.per_class_val;
    let n = n_train + n_val;
    let mut features = vec![0.0; n * d];
    let mut labels = vec![0u32; n];
    let scale = 1.0 / (d as f64).sqrt();
    let mut z = vec![0.0; d];
    let mut fill = |row: usize, class: usize, r: &mut Rng, features: &mut Vec<f64>, labels: &mut Vec<u32>| {
        labels[row] = class as u32;
        let dst = &mut features[row * d..(row + 1) * d];
        r.fill_standard_normal(&mut z);
        let mu = &means[class * d..(class + 1) * d];
        match &amat {
            None => {
                for i in 0..d {
                    dst[i] = mu[i] + z[i];
                }
            }
            Some(m) => {
                let a = &m[class];
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += a[i * d + j] * z[j];
                    }
                    dst[i] = mu[i] + scale * acc;
                }
            }
        }
    };
    let mut row = 0;
    for class in 0..2 {
        for _ in 0..spec.per_class_train {
            fill(row, class, &mut r, &mut features, &mut labels);
            row += 1;
        }
    }
    for class in 0..2 {
        for _ in 0..spec.per_class_val {
            fill(row, class, &mut r, &mut features, &mut labels);
            row += 1;
        }
    }
    let ds = Dataset {
        features,
        labels,
        d,
        classes: 2,
        train_idx: (0..n_train as u32).collect(),
        val_idx: (n_train as u32..n as u32).collect(),
        source: format!(
            "gaussian(d={}, per_class_train={}, per_class_val={}, anisotropic={}, seed={})",
            d, spec.per_class_train, spec.per_class_val, spec.anisotropic, spec.seed
        ),
    };
    ds.validate()?;
    Ok(ds)
}

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

/// Load an MNIST-style IDX image/label pair (optionally gzipped). Pixels are
/// scaled to `[0, 1]`; the validation split is the entire file pair passed as
/// `val` (use `None` to hold out nothing).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file_maybe_gz(images_path)?;
    let lab = read_file_maybe_gz(labels_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic}, expected {IDX_IMAGE_MAGIC}"),
        ));
    }
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {lmagic}, expected {IDX_LABEL_MAGIC}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if n != nl {
        return Err(Error::format(
            images_path,
            format!("image count {n} != label count {nl}"),
        ));
    }
    let d = rows * cols;
    let pix = img
        .get(16..16 + n * d)
        .ok_or_else(|| Error::format(images_path, "truncated image payload"))?;
    let ls = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::format(labels_path, "truncated label payload"))?;
    let features: Vec<f64> = pix.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<u32> = ls.iter().map(|&b| b as u32).collect();
    let classes = labels.iter().max().map(|&m| m as usize + 1).unwrap_or(1).max(2);
    let ds = Dataset {
        features,
        labels,
        d,
        classes,
        train_idx: (0..n as u32).collect(),
        val_idx: Vec::new(),
        source: format!("idx({})", images_path.display()),
    };
    Ok(ds)
}

/// Combine standard train/test IDX file pairs into one dataset where the test
/// files become the validation split.
pub fn load_mnist_train_test(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<Dataset> {
    let tr = load_mnist_idx(train_images, train_labels)?;
    let te = load_mnist_idx(test_images, test_labels)?;
    if tr.d != te.d {
        return Err(Error::Shape("train/test feature dims differ".into()));
    }
    let n_train = tr.n();
    let mut features = tr.features;
    features.extend_from_slice(&te.features);
    let mut labels = tr.labels;
    labels.extend_from_slice(&te.labels);
    let classes = tr.classes.max(te.classes);
    let n = labels.len();
    let ds = Dataset {
        features,
        labels,
        d: tr.d,
        classes,
        train_idx: (0..n_train as u32).collect(),
        val_idx: (n_train as u32..n as u32).collect(),
        source: format!("{} + {}", tr.source, te.source),
    };
    ds.validate()?;
    Ok(ds)
}

/// CIFAR-10 binary-format loader (data_batch files). Not part of the desk
/// experiments; provided for completeness.
pub fn load_cifar10_batches(batches: &[&Path], val: Option<&Path>) -> Result<Dataset> {
    const REC: usize = 3073;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let read_into = |path: &Path, features: &mut Vec<f64>, labels: &mut Vec<u32>| -> Result<usize> {
        let bytes = read_file_maybe_gz(path)?;
        if bytes.len() % REC != 0 {
            return Err(Error::format(path, "file size is not a multiple of 3073"));
        }
        let n = bytes.len() / REC;
        for r in 0..n {
            let rec = &bytes[r * REC..(r + 1) * REC];
            if rec[0] > 9 {
                return Err(Error::format(path, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0] as u32);
            features.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
        Ok(n)
    };
    let mut n_train = 0;
    for p in batches {
        n_train += read_into(p, &mut features, &mut labels)?;
    }
    let mut n_val = 0;
    if let Some(p) = val {
        n_val = read_into(p, &mut features, &mut labels)?;
    }
    let ds = Dataset {
        features,
        labels,
        d: 3072,
        classes: 10,
        train_idx: (0..n_train as u32).collect(),
        val_idx: (n_train as u32..(n_train + n_val) as u32).collect(),
        source: "cifar10".into(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Encode labels for a loss kind: one-hot rows for MSE, passthrough for
/// cross-entropy.
pub fn encode_targets(labels: &[u32], classes: usize, loss: crate::autodiff::LossKind) -> Result<Targets> {
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Shape(format!("class index {l} out of range 0..{classes}")));
    }
    match loss {
        crate::autodiff::LossKind::Mse => {
            let mut data = vec![0.0; labels.len() * classes];
            for (i, &l) in labels.iter().enumerate() {
                data[i * classes + l as usize] = 1.0;
            }
            Ok(Targets::Values { data, dim: classes })
        }
        crate::autodiff::LossKind::CrossEntropy => Ok(Targets::Labels(labels.to_vec())),
    }
}

/// Evaluation batch used for sharpness probes: the first `cap` train rows.
pub fn eval_batch(dataset: &Dataset, cap: usize, loss: crate::autodiff::LossKind) -> Result<(crate::autodiff::Batch, usize)> {
    let train = dataset.split_indices(Split::Train);
    let take = train.len().min(cap);
    let idx = &train[..take];
    let d = dataset.dim();
    let mut inputs = Vec::with_capacity(take * d);
    for &i in idx {
        inputs.extend_from_slice(dataset.row(i));
    }
    let labels: Vec<u32> = idx.iter().map(|&i| dataset.labels[i]).collect();
    let batch = match encode_targets(&labels, dataset.classes, loss)? {
        Targets::Values { data, dim } => crate::autodiff::Batch::regression(inputs, d, data, dim)?,
        Targets::Labels(ls) => crate::autodiff::Batch::classification(inputs, d, ls)?,
    };
    Ok((batch, take))
}

const CACHE_MAGIC: &[u8; 4] = b"DSC1";

/// Write the dataset to the documented binary cache format (see README).
/// Reload is bitwise identical.
pub fn write_cache(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(ds.n() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.d as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.classes as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.train_idx.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.val_idx.len() as u64).to_le_bytes());
    let src = ds.source.as_bytes();
    buf.extend_from_slice(&(src.len() as u64).to_le_bytes());
    buf.extend_from_slice(src);
    for v in &ds.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for &i in ds.train_idx.iter().chain(ds.val_idx.iter()) {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format(path, "truncated dataset cache"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != CACHE_MAGIC {
        return Err(Error::format(path, "bad magic, expected DSC1"));
    }
    let rd_u64 = |off: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(off, 8)?.try_into().unwrap()))
    };
    let n = rd_u64(&mut off)? as usize;
    let d = rd_u64(&mut off)? as usize;
    let classes = rd_u64(&mut off)? as usize;
    let n_train = rd_u64(&mut off)? as usize;
    let n_val = rd_u64(&mut off)? as usize;
    let src_len = rd_u64(&mut off)? as usize;
    let source = String::from_utf8(take(&mut off, src_len)?.to_vec())
        .map_err(|_| Error::format(path, "bad source string"))?;
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        features.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()));
    }
    let mut train_idx = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        train_idx.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()));
    }
    let mut val_idx = Vec::with_capacity(n_val);
    for _ in 0..n_val {
        val_idx.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()));
    }
    if off != bytes.len() {
        return Err(Error::format(path, "trailing bytes in dataset cache"));
    }
    let ds = Dataset {
        features,
        labels,
        d,
        classes,
        train_idx,
        val_idx,
        source,
    };
    ds.validate()?;
    Ok(ds)
}
