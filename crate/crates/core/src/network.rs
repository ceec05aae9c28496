//! Dense ReLU MLP: architecture, initialization schemes, forward evaluation.
//!
//! Networks are bias-free: layer `l` (1-based, `l = 1..=L+1`) owns a weight
//! matrix `W^(l)` of shape `n_l x n_{l-1}` stored row-major, and computes
//! `z^(1) = m_1 W^(1) x`, `z^(l+1) = m_{l+1} W^(l+1) relu(z^(l))`, where `m_l`
//! is a per-layer forward multiplier (1 except under NTK parametrization).
//! ReLU uses the convention `relu(0) = 0`, `relu'(0) = 0`.

use crate::error::{Error, Result};
use crate::linalg::matmul_xt;
use crate::rng::Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Network shape: input dim, hidden widths `n_1..n_L`, output dim.
///
/// `hidden` may be empty, which gives the one-weight-layer linear model used
/// as the threshold-accuracy baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub n0: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

impl ArchSpec {
    pub fn new(n0: usize, hidden: Vec<usize>, out_dim: usize) -> Result<Self> {
        let a = ArchSpec { n0, hidden, out_dim };
        a.validate()?;
        Ok(a)
    }

    /// Constant-width spec: `depth` hidden layers of `width` units.
    pub fn constant_width(n0: usize, depth: usize, width: usize, out_dim: usize) -> Result<Self> {
        ArchSpec::new(n0, vec![width; depth], out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 || self.out_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArch(format!(
                "zero-width layer in ({}, {:?}, {})",
                self.n0, self.hidden, self.out_dim
            )));
        }
        Ok(())
    }

    /// Number of hidden layers L.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Layer dimensions `n_0, n_1, ..., n_{L+1}`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.n0);
        d.extend_from_slice(&self.hidden);
        d.push(self.out_dim);
        d
    }

    /// Number of weight layers, `L + 1`.
    pub fn n_weight_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Total parameter count `P = sum_l n_l * n_{l-1}`.
pub fn count_params(arch: &ArchSpec) -> usize {
    let dims = arch.dims();
    dims.windows(2).map(|w| w[0] * w[1]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Centered Gaussian, variance `2 / fan_in`.
    Kaiming,
    /// Uniform on `[-1/fan_in, 1/fan_in]`.
    LeCun,
    /// Standard Gaussian weights with forward multiplier `sqrt(2 / fan_in)`.
    Ntk,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Kaiming => "kaiming",
            InitScheme::LeCun => "lecun",
            InitScheme::Ntk => "ntk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kaiming" => Ok(InitScheme::Kaiming),
            "lecun" => Ok(InitScheme::LeCun),
            "ntk" => Ok(InitScheme::Ntk),
            other => Err(Error::Config(format!("unknown init scheme '{other}'"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            InitScheme::Kaiming => 0,
            InitScheme::LeCun => 1,
            InitScheme::Ntk => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(InitScheme::Kaiming),
            1 => Some(InitScheme::LeCun),
            2 => Some(InitScheme::Ntk),
            _ => None,
        }
    }
}

/// A dense ReLU network with per-layer weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: ArchSpec,
    pub scheme: InitScheme,
    pub seed: u64,
    /// `weights[l]` is `n_{l+1} x n_l` row-major (0-based layer index).
    pub weights: Vec<Vec<f64>>,
    /// Forward multiplier per weight layer (1 for Kaiming/LeCun).
    pub multipliers: Vec<f64>,
}

/// Cached forward pass for a single input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations `z^(l)` for `l = 1..=L+1`.
    pub preactivations: Vec<Vec<f64>>,
    /// ReLU activations for the hidden layers only.
    pub activations: Vec<Vec<f64>>,
    /// `z > 0` per hidden unit.
    pub sign_pattern: Vec<Vec<bool>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.preactivations.last().expect("nonempty trace")
    }
}

/// Draw a fresh network. Deterministic given `(arch, scheme, rng seed)`.
pub fn init_network(arch: &ArchSpec, scheme: InitScheme, rng: &mut Rng) -> Result<Mlp> {
    arch.validate()?;
    let dims = arch.dims();
    let seed = rng.seed();
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut multipliers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let mut mat = vec![0.0; fan_in * fan_out];
        match scheme {
            InitScheme::Kaiming => {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in &mut mat {
                    *v = rng.normal(0.0, std);
                }
                multipliers.push(1.0);
            }
            InitScheme::LeCun => {
                let b = 1.0 / fan_in as f64;
                for v in &mut mat {
                    *v = rng.uniform(-b, b);
                }
                multipliers.push(1.0);
            }
            InitScheme::Ntk => {
                for v in &mut mat {
                    *v = rng.standard_normal();
                }
                multipliers.push((2.0 / fan_in as f64).sqrt());
            }
        }
        weights.push(mat);
    }
    Ok(Mlp {
        arch: arch.clone(),
        scheme,
        seed,
        weights,
        multipliers,
    })
}

impl Mlp {
    pub fn n_params(&self) -> usize {
        count_params(&self.arch)
    }

    /// Multiply every weight matrix by `c`; the output scales by `c^(L+1)`.
    pub fn scale_weights(&mut self, c: f64) {
        for w in &mut self.weights {
            for v in w {
                *v *= c;
            }
        }
    }

    /// Forward pass for one input, caching every pre-activation.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.arch.n0 {
            return Err(Error::Shape(format!(
                "input length {} != n0 {}",
                x.len(),
                self.arch.n0
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: "forward input".into(),
                layer: 0,
            });
        }
        let dims = self.arch.dims();
        let mut preacts = Vec::with_capacity(self.weights.len());
        let mut acts = Vec::new();
        let mut signs = Vec::new();
        let mut cur = x.to_vec();
        for (l, w) in self.weights.iter().enumerate() {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut z = vec![0.0; rows];
            matmul_xt(&cur, w, 1, cols, rows, &mut z);
            let m = self.multipliers[l];
            if m != 1.0 {
                for v in &mut z {
                    *v *= m;
                }
            }
            if l + 1 < self.weights.len() {
                signs.push(z.iter().map(|&v| v > 0.0).collect());
                let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                preacts.push(z);
                cur = a.clone();
                acts.push(a);
            } else {
                preacts.push(z);
            }
        }
        Ok(ForwardTrace {
            preactivations: preacts,
            activations: acts,
            sign_pattern: signs,
        })
    }

    /// Batched forward: `x` is `batch x n0` row-major. Returns pre-activations
    /// per weight layer as flat `batch x n_l` buffers.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if x.len() != batch * self.arch.n0 {
            return Err(Error::Shape(format!(
                "batch input length {} != {} * {}",
                x.len(),
                batch,
                self.arch.n0
            )));
        }
        let dims = self.arch.dims();
        let mut preacts = Vec::with_capacity(self.weights.len());
        let mut cur = x.to_vec();
        for (l, w) in self.weights.iter().enumerate() {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut z = vec![0.0; batch * rows];
            matmul_xt(&cur, w, batch, cols, rows, &mut z);
            let m = self.multipliers[l];
            if m != 1.0 {
                for v in &mut z {
                    *v *= m;
                }
            }
            if l + 1 < self.weights.len() {
                cur = z.iter().map(|&v| v.max(0.0)).collect();
            }
            preacts.push(z);
        }
        Ok(preacts)
    }

    /// Serialize to the documented flat binary container (see README):
    /// magic `MLPB`, format version, scheme tag, seed, dims, then row-major
    /// `f64` little-endian weight matrices in layer order.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"MLPB");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(self.scheme.tag());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.arch.n0 as u32).to_le_bytes());
        buf.extend_from_slice(&(self.arch.hidden.len() as u32).to_le_bytes());
        for &h in &self.arch.hidden {
            buf.extend_from_slice(&(h as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.arch.out_dim as u32).to_le_bytes());
        for w in &self.weights {
            for v in w {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Mlp> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::format(path, "truncated network file"));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != b"MLPB" {
            return Err(Error::format(path, "bad magic, expected MLPB"));
        }
        let ver = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if ver != 1 {
            return Err(Error::format(path, format!("unsupported version {ver}")));
        }
        let scheme = InitScheme::from_tag(take(&mut off, 1)?[0])
            .ok_or_else(|| Error::format(path, "bad scheme tag"))?;
        let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let n0 = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let nl = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut hidden = Vec::with_capacity(nl);
        for _ in 0..nl {
            hidden.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let out_dim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let arch = ArchSpec::new(n0, hidden, out_dim)?;
        let dims = arch.dims();
        let mut weights = Vec::new();
        let mut multipliers = Vec::new();
        for w in dims.windows(2) {
            let n = w[0] * w[1];
            let mut mat = Vec::with_capacity(n);
            for _ in 0..n {
                mat.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            weights.push(mat);
            multipliers.push(match scheme {
                InitScheme::Ntk => (2.0 / w[0] as f64).sqrt(),
                _ => 1.0,
            });
        }
        if off != bytes.len() {
            return Err(Error::format(path, "trailing bytes in network file"));
        }
        Ok(Mlp {
            arch,
            scheme,
            seed,
            weights,
            multipliers,
        })
    }
}
