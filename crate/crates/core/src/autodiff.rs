//! Exact first and second derivatives of losses and layer pre-activations.
//!
//! Everything here differentiates the fixed MLP computation graph directly:
//! reverse accumulation for gradients, forward-over-reverse (Pearlmutter) for
//! Hessian-vector products, and forward propagation of layer Jacobians and
//! layer Hessians with respect to the weights. ReLU derivatives use
//! `relu'(0) = 0` and `relu'' = 0` everywhere.

use crate::error::{Error, Result};
use crate::network::Mlp;

/// Flat parameter vector laid out in `Mlp` weight order: layer 1 row-major,
/// then layer 2, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    offsets: Vec<usize>,
}

impl ParamVector {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let mut offsets = Vec::with_capacity(mlp.weights.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for w in &mlp.weights {
            total += w.len();
            offsets.push(total);
        }
        ParamVector {
            values: vec![0.0; total],
            offsets,
        }
    }

    pub fn from_mlp(mlp: &Mlp) -> Self {
        let mut p = Self::zeros_like(mlp);
        for (l, w) in mlp.weights.iter().enumerate() {
            p.layer_mut(l).copy_from_slice(w);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[self.offsets[l]..self.offsets[l + 1]]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.values[self.offsets[l]..self.offsets[l + 1]]
    }

    /// Write the values back into a network.
    pub fn store_into(&self, mlp: &mut Mlp) {
        for (l, w) in mlp.weights.iter_mut().enumerate() {
            w.copy_from_slice(self.layer(l));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `1/(2k) * sum_i ||out_i - y_i||^2`
    Mse,
    /// mean negative log-softmax-likelihood
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

/// A batch of `k` inputs with targets matching the loss kind in use:
/// regression values for MSE, class labels for cross-entropy.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub k: usize,
    pub n0: usize,
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub enum Targets {
    Values { data: Vec<f64>, dim: usize },
    Labels(Vec<u32>),
}

impl Batch {
    pub fn regression(inputs: Vec<f64>, n0: usize, values: Vec<f64>, dim: usize) -> Result<Self> {
        if inputs.len() % n0 != 0 || inputs.is_empty() {
            return Err(Error::Shape("batch inputs not a multiple of n0".into()));
        }
        let k = inputs.len() / n0;
        if values.len() != k * dim {
            return Err(Error::Shape("target length != k * dim".into()));
        }
        Ok(Batch {
            inputs,
            k,
            n0,
            targets: Targets::Values { data: values, dim },
        })
    }

    pub fn classification(inputs: Vec<f64>, n0: usize, labels: Vec<u32>) -> Result<Self> {
        if inputs.len() % n0 != 0 || inputs.is_empty() {
            return Err(Error::Shape("batch inputs not a multiple of n0".into()));
        }
        let k = inputs.len() / n0;
        if labels.len() != k {
            return Err(Error::Shape("label count != k".into()));
        }
        Ok(Batch {
            inputs,
            k,
            n0,
            targets: Targets::Labels(labels),
        })
    }
}

fn check_shapes(mlp: &Mlp, batch: &Batch, kind: LossKind) -> Result<()> {
    if batch.n0 != mlp.arch.n0 {
        return Err(Error::Shape(format!(
            "batch n0 {} != network n0 {}",
            batch.n0, mlp.arch.n0
        )));
    }
    match (&batch.targets, kind) {
        (Targets::Values { dim, .. }, LossKind::Mse) => {
            if *dim != mlp.arch.out_dim {
                return Err(Error::Shape(format!(
                    "target dim {} != out_dim {}",
                    dim, mlp.arch.out_dim
                )));
            }
        }
        (Targets::Labels(ls), LossKind::CrossEntropy) => {
            if let Some(&l) = ls.iter().find(|&&l| l as usize >= mlp.arch.out_dim) {
                return Err(Error::Shape(format!(
                    "label {} out of range for {} outputs",
                    l, mlp.arch.out_dim
                )));
            }
        }
        _ => {
            return Err(Error::Shape(
                "target kind does not match loss kind".into(),
            ))
        }
    }
    Ok(())
}

/// Softmax probabilities per row, numerically shifted.
fn softmax_rows(logits: &[f64], k: usize, c: usize) -> Vec<f64> {
    let mut p = vec![0.0; k * c];
    for b in 0..k {
        let row = &logits[b * c..(b + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            p[b * c + j] = e;
            s += e;
        }
        for j in 0..c {
            p[b * c + j] /= s;
        }
    }
    p
}

fn loss_from_output(out: &[f64], batch: &Batch, kind: LossKind, c: usize) -> f64 {
    let k = batch.k;
    match (&batch.targets, kind) {
        (Targets::Values { data, .. }, LossKind::Mse) => {
            let mut s = 0.0;
            for (o, y) in out.iter().zip(data) {
                let d = o - y;
                s += d * d;
            }
            s / (2.0 * k as f64)
        }
        (Targets::Labels(ls), LossKind::CrossEntropy) => {
            let p = softmax_rows(out, k, c);
            let mut s = 0.0;
            for (b, &l) in ls.iter().enumerate() {
                s -= p[b * c + l as usize].max(f64::MIN_POSITIVE).ln();
            }
            s / k as f64
        }
        _ => unreachable!("shapes checked"),
    }
}

/// dL/d(output pre-activations), one row per sample.
fn output_delta(out: &[f64], batch: &Batch, kind: LossKind, c: usize) -> Vec<f64> {
    let k = batch.k;
    let kf = k as f64;
    match (&batch.targets, kind) {
        (Targets::Values { data, .. }, LossKind::Mse) => out
            .iter()
            .zip(data)
            .map(|(o, y)| (o - y) / kf)
            .collect(),
        (Targets::Labels(ls), LossKind::CrossEntropy) => {
            let mut d = softmax_rows(out, k, c);
            for (b, &l) in ls.iter().enumerate() {
                d[b * c + l as usize] -= 1.0;
            }
            for v in &mut d {
                *v /= kf;
            }
            d
        }
        _ => unreachable!("shapes checked"),
    }
}

/// Batch loss. Returns a numeric error naming the first offending layer if the
/// forward pass produced non-finite values.
pub fn loss(mlp: &Mlp, batch: &Batch, kind: LossKind) -> Result<f64> {
    check_shapes(mlp, batch, kind)?;
    let preacts = mlp.forward_batch(&batch.inputs, batch.k)?;
    let l = loss_from_output(preacts.last().unwrap(), batch, kind, mlp.arch.out_dim);
    if !l.is_finite() {
        for (li, z) in preacts.iter().enumerate() {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    context: "loss forward".into(),
                    layer: li + 1,
                });
            }
        }
        return Err(Error::Numeric {
            context: "loss".into(),
            layer: preacts.len(),
        });
    }
    Ok(l)
}

/// Batches larger than this are split into fixed 256-sample chunks whose
/// partial results are accumulated in chunk order, so the output is
/// reproducible regardless of thread count.
const PAR_CHUNK: usize = 256;

fn split_batch(batch: &Batch) -> Vec<Batch> {
    let k = batch.k;
    let n0 = batch.n0;
    let mut out = Vec::with_capacity(k.div_ceil(PAR_CHUNK));
    let mut start = 0;
    while start < k {
        let end = (start + PAR_CHUNK).min(k);
        let inputs = batch.inputs[start * n0..end * n0].to_vec();
        let targets = match &batch.targets {
            Targets::Values { data, dim } => Targets::Values {
                data: data[start * dim..end * dim].to_vec(),
                dim: *dim,
            },
            Targets::Labels(ls) => Targets::Labels(ls[start..end].to_vec()),
        };
        out.push(Batch {
            inputs,
            k: end - start,
            n0,
            targets,
        });
        start = end;
    }
    out
}

/// Run `f` over fixed-size chunks of the batch in parallel and accumulate the
/// per-chunk parameter vectors, rescaled from per-chunk to whole-batch mean
/// normalization, in chunk order.
fn chunked_param_sum<F>(mlp: &Mlp, batch: &Batch, f: F) -> Result<ParamVector>
where
    F: Fn(&Batch) -> Result<ParamVector> + Sync,
{
    use rayon::prelude::*;
    let chunks = split_batch(batch);
    let partials: Vec<Result<ParamVector>> = chunks.par_iter().map(&f).collect();
    let mut total = ParamVector::zeros_like(mlp);
    let kf = batch.k as f64;
    for (chunk, partial) in chunks.iter().zip(partials) {
        let p = partial?;
        let w = chunk.k as f64 / kf;
        for (t, v) in total.values.iter_mut().zip(&p.values) {
            *t += w * v;
        }
    }
    Ok(total)
}

/// Exact loss gradient by reverse accumulation. Large batches are processed
/// in parallel chunks with a deterministic reduction.
pub fn grad(mlp: &Mlp, batch: &Batch, kind: LossKind) -> Result<ParamVector> {
    Ok(loss_and_grad(mlp, batch, kind)?.1)
}

/// Loss and gradient from one forward pass (the training hot path).
pub fn loss_and_grad(mlp: &Mlp, batch: &Batch, kind: LossKind) -> Result<(f64, ParamVector)> {
    check_shapes(mlp, batch, kind)?;
    if batch.k > PAR_CHUNK {
        use rayon::prelude::*;
        let chunks = split_batch(batch);
        let partials: Vec<Result<(f64, ParamVector)>> =
            chunks.par_iter().map(|sub| grad_serial(mlp, sub, kind)).collect();
        let mut total = ParamVector::zeros_like(mlp);
        let mut loss = 0.0;
        let kf = batch.k as f64;
        for (chunk, r) in chunks.iter().zip(partials) {
            let (l, p) = r?;
            let w = chunk.k as f64 / kf;
            loss += w * l;
            for (t, v) in total.values.iter_mut().zip(&p.values) {
                *t += w * v;
            }
        }
        return Ok((loss, total));
    }
    grad_serial(mlp, batch, kind)
}

fn grad_serial(mlp: &Mlp, batch: &Batch, kind: LossKind) -> Result<(f64, ParamVector)> {
    let k = batch.k;
    let dims = mlp.arch.dims();
    let preacts = mlp.forward_batch(&batch.inputs, k)?;
    let out = preacts.last().unwrap();
    let l = loss_from_output(out, batch, kind, mlp.arch.out_dim);
    if !l.is_finite() {
        for (li, z) in preacts.iter().enumerate() {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    context: "grad forward".into(),
                    layer: li + 1,
                });
            }
        }
        return Err(Error::Numeric {
            context: "grad forward".into(),
            layer: preacts.len(),
        });
    }
    let mut g = ParamVector::zeros_like(mlp);
    let mut delta = output_delta(out, batch, kind, mlp.arch.out_dim);
    for l in (0..mlp.weights.len()).rev() {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let m = mlp.multipliers[l];
        // a_prev: activations below layer l (input for l = 0)
        let gl = g.layer_mut(l);
        for b in 0..k {
            let drow = &delta[b * rows..(b + 1) * rows];
            if l == 0 {
                let arow = &batch.inputs[b * cols..(b + 1) * cols];
                for (o, &d) in drow.iter().enumerate() {
                    crate::linalg::axpy(m * d, arow, &mut gl[o * cols..(o + 1) * cols]);
                }
            } else {
                let zrow = &preacts[l - 1][b * cols..(b + 1) * cols];
                for (o, &d) in drow.iter().enumerate() {
                    let md = m * d;
                    let grow = &mut gl[o * cols..(o + 1) * cols];
                    for i in 0..cols {
                        grow[i] += md * zrow[i].max(0.0);
                    }
                }
            }
        }
        if l > 0 {
            // delta_prev = relu'(z_prev) .* (m * W^T delta)
            let mut prev = vec![0.0; k * cols];
            let w = &mlp.weights[l];
            for b in 0..k {
                let drow = &delta[b * rows..(b + 1) * rows];
                let prow = &mut prev[b * cols..(b + 1) * cols];
                for (o, &d) in drow.iter().enumerate() {
                    crate::linalg::axpy(m * d, &w[o * cols..(o + 1) * cols], prow);
                }
                let zrow = &preacts[l - 1][b * cols..(b + 1) * cols];
                for i in 0..cols {
                    if !(zrow[i] > 0.0) {
                        prow[i] = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    Ok((l, g))
}

/// Exact Hessian-vector product `H v` by forward-over-reverse accumulation.
/// Large batches are processed in parallel chunks with a deterministic
/// reduction.
pub fn hvp(mlp: &Mlp, batch: &Batch, kind: LossKind, v: &ParamVector) -> Result<ParamVector> {
    check_shapes(mlp, batch, kind)?;
    if v.len() != mlp.n_params() {
        return Err(Error::Shape(format!(
            "direction length {} != P {}",
            v.len(),
            mlp.n_params()
        )));
    }
    if batch.k > PAR_CHUNK {
        return chunked_param_sum(mlp, batch, |sub| hvp_serial(mlp, sub, kind, v));
    }
    hvp_serial(mlp, batch, kind, v)
}

fn hvp_serial(mlp: &Mlp, batch: &Batch, kind: LossKind, v: &ParamVector) -> Result<ParamVector> {
    let k = batch.k;
    let kf = k as f64;
    let dims = mlp.arch.dims();
    let nl = mlp.weights.len();
    let c = mlp.arch.out_dim;

    // forward and R-forward
    let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(nl);
    let mut rpre: Vec<Vec<f64>> = Vec::with_capacity(nl);
    let mut a = batch.inputs.clone();
    let mut ra = vec![0.0; a.len()];
    for l in 0..nl {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let m = mlp.multipliers[l];
        let w = &mlp.weights[l];
        let vw = v.layer(l);
        let mut z = vec![0.0; k * rows];
        let mut rz = vec![0.0; k * rows];
        crate::linalg::matmul_xt(&a, w, k, cols, rows, &mut z);
        crate::linalg::matmul_xt(&a, vw, k, cols, rows, &mut rz);
        let mut rz2 = vec![0.0; k * rows];
        crate::linalg::matmul_xt(&ra, w, k, cols, rows, &mut rz2);
        for i in 0..k * rows {
            z[i] *= m;
            rz[i] = m * (rz[i] + rz2[i]);
        }
        if l + 1 < nl {
            a = z.iter().map(|&x| x.max(0.0)).collect();
            ra = z
                .iter()
                .zip(&rz)
                .map(|(&zz, &rr)| if zz > 0.0 { rr } else { 0.0 })
                .collect();
        }
        preacts.push(z);
        rpre.push(rz);
    }

    let out = preacts.last().unwrap();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            context: "hvp forward".into(),
            layer: nl,
        });
    }
    let rout = rpre.last().unwrap();
    let mut delta = output_delta(out, batch, kind, c);
    let mut rdelta = match (&batch.targets, kind) {
        (Targets::Values { .. }, LossKind::Mse) => rout.iter().map(|&r| r / kf).collect::<Vec<f64>>(),
        (Targets::Labels(_), LossKind::CrossEntropy) => {
            let p = softmax_rows(out, k, c);
            let mut rd = vec![0.0; k * c];
            for b in 0..k {
                let pr = &p[b * c..(b + 1) * c];
                let rr = &rout[b * c..(b + 1) * c];
                let dotpr: f64 = pr.iter().zip(rr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    rd[b * c + j] = pr[j] * (rr[j] - dotpr) / kf;
                }
            }
            rd
        }
        _ => unreachable!("shapes checked"),
    };

    let mut h = ParamVector::zeros_like(mlp);
    for l in (0..nl).rev() {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let m = mlp.multipliers[l];
        let hl = h.layer_mut(l);
        for b in 0..k {
            let drow = &delta[b * rows..(b + 1) * rows];
            let rdrow = &rdelta[b * rows..(b + 1) * rows];
            for o in 0..rows {
                let hrow = &mut hl[o * cols..(o + 1) * cols];
                if l == 0 {
                    // Ra_prev = 0 at the input
                    let arow = &batch.inputs[b * cols..(b + 1) * cols];
                    crate::linalg::axpy(m * rdrow[o], arow, hrow);
                } else {
                    let zrow = &preacts[l - 1][b * cols..(b + 1) * cols];
                    let rzrow = &rpre[l - 1][b * cols..(b + 1) * cols];
                    let (rd, d) = (m * rdrow[o], m * drow[o]);
                    for i in 0..cols {
                        if zrow[i] > 0.0 {
                            hrow[i] += rd * zrow[i] + d * rzrow[i];
                        }
                    }
                }
            }
        }
        if l > 0 {
            let w = &mlp.weights[l];
            let vw = v.layer(l);
            let mut dprev = vec![0.0; k * cols];
            let mut rdprev = vec![0.0; k * cols];
            for b in 0..k {
                let drow = &delta[b * rows..(b + 1) * rows];
                let rdrow = &rdelta[b * rows..(b + 1) * rows];
                let dp = &mut dprev[b * cols..(b + 1) * cols];
                let rdp = &mut rdprev[b * cols..(b + 1) * cols];
                for o in 0..rows {
                    crate::linalg::axpy(m * drow[o], &w[o * cols..(o + 1) * cols], dp);
                    crate::linalg::axpy(m * rdrow[o], &w[o * cols..(o + 1) * cols], rdp);
                    crate::linalg::axpy(m * drow[o], &vw[o * cols..(o + 1) * cols], rdp);
                }
                let zrow = &preacts[l - 1][b * cols..(b + 1) * cols];
                for i in 0..cols {
                    if !(zrow[i] > 0.0) {
                        dp[i] = 0.0;
                        rdp[i] = 0.0;
                    }
                }
            }
            delta = dprev;
            rdelta = rdprev;
        }
    }
    Ok(h)
}

pub const DENSE_HESSIAN_CAP: usize = 2000;

/// Dense loss Hessian assembled column-by-column from `hvp(e_j)`.
/// Row-major `P x P`; column `j` is exactly the HVP output (no symmetrizing).
pub fn dense_hessian(mlp: &Mlp, batch: &Batch, kind: LossKind, cap: Option<usize>) -> Result<Vec<f64>> {
    let p = mlp.n_params();
    let cap = cap.unwrap_or(DENSE_HESSIAN_CAP);
    if p > cap {
        return Err(Error::SizeCap {
            what: "dense_hessian".into(),
            size: p,
            cap,
        });
    }
    let mut h = vec![0.0; p * p];
    let mut e = ParamVector::zeros_like(mlp);
    for j in 0..p {
        e.values[j] = 1.0;
        let col = hvp(mlp, batch, kind, &e)?;
        for i in 0..p {
            h[i * p + j] = col.values[i];
        }
        e.values[j] = 0.0;
    }
    Ok(h)
}

/// Derivatives of the layer-`l` pre-activations with respect to every weight
/// in layers `1..=l`, propagated forward layer by layer.
pub struct LayerDerivs {
    /// 1-based layer index.
    pub layer: usize,
    /// Pre-activations `z^(l)`.
    pub z: Vec<f64>,
    /// Jacobian, `n_l x p` row-major over weights in layers `<= l`.
    pub jac: Vec<f64>,
    /// Width of the Jacobian: number of weights in layers `<= l`.
    pub p: usize,
}

/// Jacobian of `z^(l)` with respect to the weights of layers `1..=l`:
/// entry `(j, mu) = dz_j^(l) / d mu`, shape `n_l x P_{<=l}` row-major.
pub fn layer_jacobian(mlp: &Mlp, x: &[f64], l: usize) -> Result<Vec<f64>> {
    let nl = mlp.weights.len();
    if l == 0 || l > nl {
        return Err(Error::Shape(format!("layer {l} out of range 1..={nl}")));
    }
    let mut out = None;
    propagate_derivs(mlp, x, l, false, |d: &LayerDerivs, _k: Option<&[f64]>| {
        if d.layer == l {
            out = Some(d.jac.clone());
        }
    })?;
    Ok(out.expect("layer reached"))
}

/// Forward-propagate `z`, the Jacobian, and (optionally) the full second
/// derivative tensor through layers `1..=upto`, invoking `f` at each layer.
/// The Hessian slice passed to `f` is `n_l x p x p` (row-major, `p` = current
/// parameter count); it is only materialized when `with_hessian` is set.
pub fn propagate_derivs<F>(
    mlp: &Mlp,
    x: &[f64],
    upto: usize,
    with_hessian: bool,
    mut f: F,
) -> Result<()>
where
    F: FnMut(&LayerDerivs, Option<&[f64]>),
{
    let dims = mlp.arch.dims();
    if x.len() != dims[0] {
        return Err(Error::Shape("input length != n0".into()));
    }
    let nl = mlp.weights.len();
    if upto == 0 || upto > nl {
        return Err(Error::Shape(format!("layer {upto} out of range 1..={nl}")));
    }

    // layer 1
    let m1 = mlp.multipliers[0];
    let n1 = dims[1];
    let mut z = vec![0.0; n1];
    crate::linalg::matmul_xt(x, &mlp.weights[0], 1, dims[0], n1, &mut z);
    for v in &mut z {
        *v *= m1;
    }
    let mut p = n1 * dims[0];
    let mut jac = vec![0.0; n1 * p];
    for j in 0..n1 {
        for b in 0..dims[0] {
            jac[j * p + (j * dims[0] + b)] = m1 * x[b];
        }
    }
    let mut hess = if with_hessian { vec![0.0; n1 * p * p] } else { Vec::new() };
    f(
        &LayerDerivs { layer: 1, z: z.clone(), jac: jac.clone(), p },
        with_hessian.then_some(hess.as_slice()),
    );

    for l in 2..=upto {
        let n_in = dims[l - 1];
        let n_out = dims[l];
        let m = mlp.multipliers[l - 1];
        let w = &mlp.weights[l - 1];
        let act: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        let gate: Vec<f64> = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let p_new = p + n_out * n_in;

        // gated previous jacobian rows, reused for both J and K blocks
        let mut gj = vec![0.0; n_in * p];
        for kk in 0..n_in {
            if gate[kk] == 1.0 {
                gj[kk * p..(kk + 1) * p].copy_from_slice(&jac[kk * p..(kk + 1) * p]);
            }
        }

        let mut jac_new = vec![0.0; n_out * p_new];
        for j in 0..n_out {
            let wrow = &w[j * n_in..(j + 1) * n_in];
            let dst = &mut jac_new[j * p_new..j * p_new + p];
            for kk in 0..n_in {
                if gate[kk] == 1.0 {
                    crate::linalg::axpy(m * wrow[kk], &gj[kk * p..(kk + 1) * p], dst);
                }
            }
            // block for this layer's own weights: dz_j/dW_{jb} = m * act_b
            let base = j * p_new + p + j * n_in;
            for b in 0..n_in {
                jac_new[base + b] = m * act[b];
            }
        }

        let mut z_new = vec![0.0; n_out];
        crate::linalg::matmul_xt(&act, w, 1, n_in, n_out, &mut z_new);
        for v in &mut z_new {
            *v *= m;
        }

        let hess_new = if with_hessian {
            let mut hn = vec![0.0; n_out * p_new * p_new];
            for j in 0..n_out {
                let wrow = &w[j * n_in..(j + 1) * n_in];
                let dst = &mut hn[j * p_new * p_new..(j + 1) * p_new * p_new];
                // old-old block: sum_k m w_jk gate_k K[k]
                for kk in 0..n_in {
                    let c = m * wrow[kk] * gate[kk];
                    if c != 0.0 {
                        let src = &hess[kk * p * p..(kk + 1) * p * p];
                        for r in 0..p {
                            crate::linalg::axpy(c, &src[r * p..(r + 1) * p], &mut dst[r * p_new..r * p_new + p]);
                        }
                    }
                }
                // mixed blocks: d2 z_j / dW_{jb} dmu = m * gate_b * J[b, mu]
                for b in 0..n_in {
                    if gate[b] == 1.0 {
                        let row = p + j * n_in + b;
                        for mu in 0..p {
                            let v = m * gj[b * p + mu];
                            dst[row * p_new + mu] = v;
                            dst[mu * p_new + row] = v;
                        }
                    }
                }
            }
            hn
        } else {
            Vec::new()
        };

        z = z_new;
        jac = jac_new;
        hess = hess_new;
        p = p_new;
        f(
            &LayerDerivs { layer: l, z: z.clone(), jac: jac.clone(), p },
            with_hessian.then_some(hess.as_slice()),
        );
    }
    Ok(())
}

pub const LAYER_SECOND_DERIV_CAP: usize = 500;

/// Second derivative of the layer-`l` pre-activations with respect to weights
/// `mu` and `nu` (flat indices into layers `<= l`), computed as a central
/// finite difference of the `layer_jacobian` column `nu` along `mu`.
pub fn layer_second_derivative(
    mlp: &Mlp,
    x: &[f64],
    l: usize,
    mu: usize,
    nu: usize,
) -> Result<Vec<f64>> {
    let dims = mlp.arch.dims();
    let p: usize = dims.windows(2).take(l).map(|w| w[0] * w[1]).sum();
    if p > LAYER_SECOND_DERIV_CAP {
        return Err(Error::SizeCap {
            what: "layer_second_derivative".into(),
            size: p,
            cap: LAYER_SECOND_DERIV_CAP,
        });
    }
    if mu >= p || nu >= p {
        return Err(Error::Shape(format!("weight index out of range (p = {p})")));
    }
    let mut params = ParamVector::from_mlp(mlp);
    let w0 = params.values[mu];
    let h = 1e-4 * w0.abs().max(1.0);
    let nl_dim = dims[l];
    let col = |mlp: &Mlp| -> Result<Vec<f64>> {
        let jac = layer_jacobian(mlp, x, l)?;
        Ok((0..nl_dim).map(|j| jac[j * p + nu]).collect())
    };
    let mut probe = mlp.clone();
    params.values[mu] = w0 + h;
    params.store_into(&mut probe);
    let plus = col(&probe)?;
    params.values[mu] = w0 - h;
    params.store_into(&mut probe);
    let minus = col(&probe)?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// Finite-difference oracles. These live next to the analytic operations but
/// share no code with them; tests compare the two.
pub mod fd {
    use super::*;

    /// Central-difference loss gradient, step `1e-4 * max(1, |w|)` per weight.
    pub fn grad(mlp: &Mlp, batch: &Batch, kind: LossKind) -> Result<ParamVector> {
        let mut params = ParamVector::from_mlp(mlp);
        let mut g = ParamVector::zeros_like(mlp);
        let mut probe = mlp.clone();
        for i in 0..params.len() {
            let w0 = params.values[i];
            let h = 1e-4 * w0.abs().max(1.0);
            params.values[i] = w0 + h;
            params.store_into(&mut probe);
            let lp = super::loss(&probe, batch, kind)?;
            params.values[i] = w0 - h;
            params.store_into(&mut probe);
            let lm = super::loss(&probe, batch, kind)?;
            params.values[i] = w0;
            g.values[i] = (lp - lm) / (2.0 * h);
        }
        params.store_into(&mut probe);
        Ok(g)
    }

    /// Central difference of the analytic gradient along `v`. The step is
    /// smaller than the per-coordinate rule: the directional third derivative
    /// sets the truncation error here, and 1e-5 of the weight scale keeps it
    /// two decades below the roundoff floor crossover.
    pub fn hvp(mlp: &Mlp, batch: &Batch, kind: LossKind, v: &ParamVector) -> Result<ParamVector> {
        let params = ParamVector::from_mlp(mlp);
        let vmax = v.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let h = 1e-5 * params.values.iter().fold(1.0f64, |a, &b| a.max(b.abs())) / vmax.max(1e-300);
        let mut probe = mlp.clone();
        let mut shifted = params.clone();
        for i in 0..shifted.len() {
            shifted.values[i] = params.values[i] + h * v.values[i];
        }
        shifted.store_into(&mut probe);
        let gp = super::grad(&probe, batch, kind)?;
        for i in 0..shifted.len() {
            shifted.values[i] = params.values[i] - h * v.values[i];
        }
        shifted.store_into(&mut probe);
        let gm = super::grad(&probe, batch, kind)?;
        let mut out = ParamVector::zeros_like(mlp);
        for i in 0..out.len() {
            out.values[i] = (gp.values[i] - gm.values[i]) / (2.0 * h);
        }
        Ok(out)
    }
}
