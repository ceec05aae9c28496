//! Sharpness estimation: power iteration for the dominant Hessian eigenvalue
//! and randomized estimates of the expected squared Frobenius norm.
//!
//! Power iteration reports the eigenvalue that is dominant *by magnitude*,
//! with its sign recovered from the Rayleigh quotient; under LeCun
//! initialization that value can be negative.

use crate::autodiff::{self, Batch, LossKind, ParamVector};
use crate::error::{Error, Result};
use crate::network::{init_network, ArchSpec, InitScheme, Mlp};
use crate::rng::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct PowerIterConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig {
            tol: 1e-4,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharpnessEstimate {
    /// Dominant-by-magnitude eigenvalue, signed.
    pub lambda1: f64,
    pub iterations: usize,
    /// `||Hv - lambda v|| / |lambda|` at exit.
    pub residual: f64,
    pub converged: bool,
}

/// Power iteration on a symmetric linear operator given as a closure.
///
/// The start vector is drawn from `rng`; if the iterate stagnates while the
/// residual is still above tolerance (e.g. the start vector was orthogonal to
/// the dominant eigenspace), the vector is re-seeded.
pub fn top_eigenvalue<F>(
    mut operator: F,
    dim: usize,
    cfg: &PowerIterConfig,
    rng: &mut Rng,
) -> Result<SharpnessEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::Shape("operator dimension 0".into()));
    }
    let mut v = vec![0.0; dim];
    rng.fill_standard_normal(&mut v);
    normalize(&mut v);
    let mut lambda = 0.0f64;
    let mut prev_lambda = f64::INFINITY;
    let mut reseeds = 0;
    for it in 1..=cfg.max_iter {
        let hv = operator(&v)?;
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                context: "power iteration".into(),
                layer: 0,
            });
        }
        lambda = crate::linalg::dot(&hv, &v);
        let hv_norm = crate::linalg::norm2(&hv);
        if hv_norm == 0.0 {
            // zero operator (or v in its kernel): report 0 with zero residual
            return Ok(SharpnessEstimate {
                lambda1: 0.0,
                iterations: it,
                residual: 0.0,
                converged: true,
            });
        }
        let mut resid_sq = 0.0;
        for i in 0..dim {
            let r = hv[i] - lambda * v[i];
            resid_sq += r * r;
        }
        let residual = resid_sq.sqrt() / lambda.abs().max(f64::MIN_POSITIVE);
        if residual < cfg.tol {
            return Ok(SharpnessEstimate {
                lambda1: lambda,
                iterations: it,
                residual,
                converged: true,
            });
        }
        let stagnated = (lambda - prev_lambda).abs() <= 1e-12 * lambda.abs();
        if stagnated && reseeds < 3 {
            rng.fill_standard_normal(&mut v);
            normalize(&mut v);
            prev_lambda = f64::INFINITY;
            reseeds += 1;
            continue;
        }
        prev_lambda = lambda;
        v = hv;
        let inv = 1.0 / hv_norm;
        for x in &mut v {
            *x *= inv;
        }
    }
    // budget exhausted: flagged estimate
    let hv = operator(&v)?;
    let mut resid_sq = 0.0;
    for i in 0..dim {
        let r = hv[i] - lambda * v[i];
        resid_sq += r * r;
    }
    Ok(SharpnessEstimate {
        lambda1: lambda,
        iterations: cfg.max_iter,
        residual: resid_sq.sqrt() / lambda.abs().max(f64::MIN_POSITIVE),
        converged: false,
    })
}

fn normalize(v: &mut [f64]) {
    let n = crate::linalg::norm2(v);
    if n > 0.0 {
        let inv = 1.0 / n;
        for x in v {
            *x *= inv;
        }
    }
}

/// Sharpness of a loss Hessian via power iteration on exact HVPs.
pub fn loss_hessian_top_eigenvalue(
    mlp: &Mlp,
    batch: &Batch,
    kind: LossKind,
    cfg: &PowerIterConfig,
    rng: &mut Rng,
) -> Result<SharpnessEstimate> {
    let p = mlp.n_params();
    let mut dir = ParamVector::zeros_like(mlp);
    top_eigenvalue(
        |v| {
            dir.values.copy_from_slice(v);
            Ok(autodiff::hvp(mlp, batch, kind, &dir)?.values)
        },
        p,
        cfg,
        rng,
    )
}

/// Whether `frobenius_sq_mc` weighs the Hessian by rescaled learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianWeighting {
    /// Raw loss Hessian `H`.
    Raw,
    /// Effective Hessian: entries weighted by `etahat_mu etahat_nu` with
    /// `etahat = eta^(l) / sqrt(n_{l-1})`.
    EffectiveLr,
}

#[derive(Debug, Clone)]
pub struct FrobeniusConfig {
    pub seeds: usize,
    pub probes_per_seed: usize,
    /// Dense assembly replaces Hutchinson whenever `P <=` this cap.
    pub dense_cap: usize,
    pub weighting: HessianWeighting,
    /// Per-weight-layer rates for `EffectiveLr` (length L+1); `None` = all 1.
    pub eta_per_layer: Option<Vec<f64>>,
}

impl Default for FrobeniusConfig {
    fn default() -> Self {
        FrobeniusConfig {
            seeds: 200,
            probes_per_seed: 32,
            dense_cap: autodiff::DENSE_HESSIAN_CAP,
            weighting: HessianWeighting::Raw,
            eta_per_layer: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrobeniusStats {
    pub mean: f64,
    pub std_err: f64,
    pub seeds: usize,
    pub probes_per_seed: usize,
    pub discarded: usize,
    pub per_seed: Vec<f64>,
}

/// Per-weight `etahat` multipliers in flat parameter order.
fn etahat_weights(mlp: &Mlp, eta: Option<&[f64]>) -> Result<Vec<f64>> {
    let dims = mlp.arch.dims();
    let nl = dims.len() - 1;
    if let Some(e) = eta {
        if e.len() != nl {
            return Err(Error::Config(format!(
                "eta_per_layer has {} entries, need {}",
                e.len(),
                nl
            )));
        }
    }
    let mut w = Vec::with_capacity(mlp.n_params());
    for l in 0..nl {
        let fan_in = dims[l];
        let rate = eta.map_or(1.0, |e| e[l]);
        let v = rate / (fan_in as f64).sqrt();
        w.extend(std::iter::repeat(v).take(dims[l + 1] * fan_in));
    }
    Ok(w)
}

/// Monte-Carlo estimate of `E ||H||_F^2` over initializations for a
/// scalar-output network on a fixed input with `||x||^2 = n0` and one target
/// `y ~ N(0, 1)` per seed (the `k = 1` MSE loss).
///
/// Per seed the squared Frobenius norm is measured exactly (dense assembly)
/// when `P <= dense_cap`, else by Hutchinson probes `E_v ||H v||^2` with
/// standard Gaussian `v`. Seeds whose HVPs are non-finite are discarded and
/// counted.
pub fn frobenius_sq_mc(
    arch: &ArchSpec,
    scheme: InitScheme,
    cfg: &FrobeniusConfig,
    rng: &Rng,
) -> Result<FrobeniusStats> {
    if arch.out_dim != 1 {
        return Err(Error::InvalidArch("frobenius_sq_mc needs a scalar output".into()));
    }
    if cfg.seeds == 0 || cfg.probes_per_seed == 0 {
        return Err(Error::Config("seeds and probes_per_seed must be >= 1".into()));
    }
    let x = vec![1.0; arch.n0]; // any fixed direction with ||x||^2 = n0
    let results: Vec<Result<Option<f64>>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.derive(&[0xf20b, s as u64]);
            let mlp = init_network(arch, scheme, &mut r)?;
            let y = r.standard_normal();
            let batch = Batch::regression(x.clone(), arch.n0, vec![y], 1)?;
            let eh = etahat_weights(&mlp, cfg.eta_per_layer.as_deref())?;
            let p = mlp.n_params();
            let weight = |v: f64, i: usize| match cfg.weighting {
                HessianWeighting::Raw => v,
                HessianWeighting::EffectiveLr => v * eh[i],
            };
            if p <= cfg.dense_cap {
                let h = autodiff::dense_hessian(&mlp, &batch, LossKind::Mse, Some(cfg.dense_cap))?;
                let mut acc = 0.0;
                for i in 0..p {
                    for j in 0..p {
                        let v = weight(weight(h[i * p + j], i), j);
                        acc += v * v;
                    }
                }
                if !acc.is_finite() {
                    return Ok(None);
                }
                Ok(Some(acc))
            } else {
                let mut acc = 0.0;
                let mut dir = ParamVector::zeros_like(&mlp);
                for _ in 0..cfg.probes_per_seed {
                    for i in 0..p {
                        dir.values[i] = weight(r.standard_normal(), i);
                    }
                    let hv = autodiff::hvp(&mlp, &batch, LossKind::Mse, &dir)?;
                    for i in 0..p {
                        let v = weight(hv.values[i], i);
                        acc += v * v;
                    }
                }
                let est = acc / cfg.probes_per_seed as f64;
                if !est.is_finite() {
                    return Ok(None);
                }
                Ok(Some(est))
            }
        })
        .collect();

    let mut per_seed = Vec::with_capacity(cfg.seeds);
    let mut discarded = 0usize;
    for r in results {
        match r? {
            Some(v) => per_seed.push(v),
            None => discarded += 1,
        }
    }
    if per_seed.is_empty() {
        return Err(Error::Numeric {
            context: "frobenius_sq_mc: all seeds discarded".into(),
            layer: 0,
        });
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FrobeniusStats {
        mean,
        std_err: (var / n).sqrt(),
        seeds: per_seed.len(),
        probes_per_seed: cfg.probes_per_seed,
        discarded,
        per_seed,
    })
}
