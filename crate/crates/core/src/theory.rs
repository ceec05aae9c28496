//! Layer recursions for the weighted derivative sums ("Y-quantities") of a
//! random Kaiming ReLU network, the closed forms they solve to, the resulting
//! prediction for the expected squared Frobenius norm of the effective loss
//! Hessian, and brute-force Monte-Carlo oracles for all of it.
//!
//! Setup: `z^(1) = W^(1) x`, `z^(l+1) = W^(l+1) relu(z^(l))`, weights i.i.d.
//! `N(0, 2/fan_in)`, scalar output, fixed input with `||x||^2 = n0`, and one
//! MSE target `y ~ N(0, 1)` (`k = 1`). For a weight `mu` in layer `l` the
//! rescaled learning rate is `etahat_mu = eta^(l) / sqrt(n_{l-1})`, and a
//! Y-quantity is an expectation of an `etahat^2`-weighted sum over weights
//! (and weight pairs) of normalized products of pre-activations and their
//! first/second weight derivatives at a layer.
//!
//! Every recursion coefficient here was cross-checked against the brute-force
//! estimators in [`mc_estimate_y`]; where the derivation disagreed with naive
//! expectations the Monte-Carlo value was treated as ground truth. The same
//! holds for the norm moments: with `s_l = ||relu(z^(l))||^2 / n_l`,
//! `E[s_l]` is constant in depth while `E[s_l^2]` picks up an exact factor
//! `(1 + 5/n_l)` per layer.

use crate::autodiff::propagate_derivs;
use crate::error::{Error, Result};
use crate::network::{init_network, ArchSpec, InitScheme};
use crate::rng::Rng;
use rayon::prelude::*;

/// Which source supplies the norm moments `E[s_l]` and `E[s_l^2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentSource {
    /// Exact product form: `E[s_l] = ||x||^2/n0`,
    /// `E[s_l^2] = (||x||^2/n0)^2 * prod_{m<=l} (1 + 5/n_m)`.
    ClosedForm,
    /// Estimate the moment chain by simulating conditional norms.
    MonteCarlo { seeds: usize, seed: u64 },
}

/// Whether the recursions keep their exact `1/n` coupling terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMode {
    /// All finite-width terms; matches brute-force MC at any width.
    Exact,
    /// Infinite-width limit of the couplings (the moment chain is kept);
    /// this is the system the closed forms solve exactly.
    LeadingOrder,
}

#[derive(Debug, Clone)]
pub struct TheoryConfig {
    /// `n0, n1, ..., nL`: input dimension then hidden widths.
    pub widths: Vec<usize>,
    /// Per-weight-layer rates `eta^(1..L+1)`; the last entry belongs to the
    /// scalar output layer.
    pub eta: Vec<f64>,
    pub x_norm_sq: f64,
    pub moment_source: MomentSource,
}

impl TheoryConfig {
    /// Constant-width, constant-rate config with `||x||^2 = n0`.
    pub fn constant(n0: usize, width: usize, depth: usize, eta: f64) -> Self {
        let mut widths = vec![n0];
        widths.extend(std::iter::repeat(width).take(depth));
        TheoryConfig {
            widths,
            eta: vec![eta; depth + 1],
            x_norm_sq: n0 as f64,
            moment_source: MomentSource::ClosedForm,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("need n0 and at least one hidden width".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be >= 1".into()));
        }
        if self.eta.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "need {} per-layer rates, got {}",
                self.widths.len(),
                self.eta.len()
            )));
        }
        if self.x_norm_sq < 0.0 {
            return Err(Error::Config("x_norm_sq must be >= 0".into()));
        }
        Ok(())
    }
}

/// All fourteen Y-quantities at one layer. Names abbreviate the factors:
/// `du = d_mu z`, `dv = d_nu z`, `duv = d_munu z`; `_pair` marks two-factor
/// (separately normalized) products.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct YState {
    pub du_sq: f64,               // Y[(du)^2]
    pub du_sq_z_sq: f64,          // Y[(du)^2, z^2]
    pub z_du_pair: f64,           // Y[z du, z du]
    pub z_du_sq: f64,             // Y[(z du)^2]
    pub du_sq_dv_sq: f64,         // Y[(du)^2, (dv)^2]
    pub du_dv_pair: f64,          // Y[du dv, du dv]
    pub z_duv_du_dv_pair: f64,    // Y[z duv, du dv]
    pub z_du_dv_duv_pair: f64,    // Y[z du, dv duv]
    pub duv_sq_z_sq: f64,         // Y[(duv)^2, z^2]
    pub z_duv_sq: f64,            // Y[(z duv)^2]
    pub du_dv_sq: f64,            // Y[(du dv)^2]
    pub z_duv_pair: f64,          // Y[z duv, z duv]
    pub duv_sq: f64,              // Y[(duv)^2]
    pub z_duv_du_dv: f64,         // Y[z duv du dv]
}

/// Identifier for a single Y-quantity (for the MC oracle and reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YQuantity {
    DuSq,
    DuSqZSq,
    ZDuPair,
    ZDuSq,
    DuSqDvSq,
    DuDvPair,
    ZDuvDuDvPair,
    ZDuDvDuvPair,
    DuvSqZSq,
    ZDuvSq,
    DuDvSq,
    ZDuvPair,
    DuvSq,
    ZDuvDuDv,
}

impl YQuantity {
    pub const ALL: [YQuantity; 14] = [
        YQuantity::DuSq,
        YQuantity::DuSqZSq,
        YQuantity::ZDuPair,
        YQuantity::ZDuSq,
        YQuantity::DuSqDvSq,
        YQuantity::DuDvPair,
        YQuantity::ZDuvDuDvPair,
        YQuantity::ZDuDvDuvPair,
        YQuantity::DuvSqZSq,
        YQuantity::ZDuvSq,
        YQuantity::DuDvSq,
        YQuantity::ZDuvPair,
        YQuantity::DuvSq,
        YQuantity::ZDuvDuDv,
    ];

    pub const MU_FAMILY: [YQuantity; 4] = [
        YQuantity::DuSq,
        YQuantity::DuSqZSq,
        YQuantity::ZDuPair,
        YQuantity::ZDuSq,
    ];

    pub const MUNU_FAMILY: [YQuantity; 10] = [
        YQuantity::DuSqDvSq,
        YQuantity::DuDvPair,
        YQuantity::ZDuvDuDvPair,
        YQuantity::ZDuDvDuvPair,
        YQuantity::DuvSqZSq,
        YQuantity::ZDuvSq,
        YQuantity::DuDvSq,
        YQuantity::ZDuvPair,
        YQuantity::DuvSq,
        YQuantity::ZDuvDuDv,
    ];

    /// munu-family quantities that vanish like `1/width` as layers get wide.
    /// (`ZDuvDuDvPair` falls even faster, like `1/width^2`: its recursion
    /// sources are all products of two `1/n` factors.)
    pub const ORDER_INV_WIDTH: [YQuantity; 4] = [
        YQuantity::DuDvPair,
        YQuantity::ZDuDvDuvPair,
        YQuantity::ZDuvPair,
        YQuantity::ZDuvDuDv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            YQuantity::DuSq => "du_sq",
            YQuantity::DuSqZSq => "du_sq_z_sq",
            YQuantity::ZDuPair => "z_du_pair",
            YQuantity::ZDuSq => "z_du_sq",
            YQuantity::DuSqDvSq => "du_sq_dv_sq",
            YQuantity::DuDvPair => "du_dv_pair",
            YQuantity::ZDuvDuDvPair => "z_duv_du_dv_pair",
            YQuantity::ZDuDvDuvPair => "z_du_dv_duv_pair",
            YQuantity::DuvSqZSq => "duv_sq_z_sq",
            YQuantity::ZDuvSq => "z_duv_sq",
            YQuantity::DuDvSq => "du_dv_sq",
            YQuantity::ZDuvPair => "z_duv_pair",
            YQuantity::DuvSq => "duv_sq",
            YQuantity::ZDuvDuDv => "z_duv_du_dv",
        }
    }

    pub fn get(self, y: &YState) -> f64 {
        match self {
            YQuantity::DuSq => y.du_sq,
            YQuantity::DuSqZSq => y.du_sq_z_sq,
            YQuantity::ZDuPair => y.z_du_pair,
            YQuantity::ZDuSq => y.z_du_sq,
            YQuantity::DuSqDvSq => y.du_sq_dv_sq,
            YQuantity::DuDvPair => y.du_dv_pair,
            YQuantity::ZDuvDuDvPair => y.z_duv_du_dv_pair,
            YQuantity::ZDuDvDuvPair => y.z_du_dv_duv_pair,
            YQuantity::DuvSqZSq => y.duv_sq_z_sq,
            YQuantity::ZDuvSq => y.z_duv_sq,
            YQuantity::DuDvSq => y.du_dv_sq,
            YQuantity::ZDuvPair => y.z_duv_pair,
            YQuantity::DuvSq => y.duv_sq,
            YQuantity::ZDuvDuDv => y.z_duv_du_dv,
        }
    }
}

/// Y-values plus norm moments at one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerState {
    /// 1-based layer index.
    pub layer: usize,
    pub y: YState,
    /// `E[s_l]`, `s_l = ||relu(z^(l))||^2 / n_l`.
    pub s1: f64,
    /// `E[s_l^2]`.
    pub s2: f64,
}

#[derive(Debug, Clone)]
pub struct RecursionState {
    pub layers: Vec<LayerState>,
}

impl RecursionState {
    pub fn at(&self, layer: usize) -> &LayerState {
        &self.layers[layer - 1]
    }

    pub fn last(&self) -> &LayerState {
        self.layers.last().expect("at least one layer")
    }
}

/// Moment chain `E[s_l^2]` for `l = 0..=L` (`l = 0` is the input itself).
fn s2_chain(cfg: &TheoryConfig) -> Vec<f64> {
    let s1_0 = cfg.x_norm_sq / cfg.widths[0] as f64;
    match cfg.moment_source {
        MomentSource::ClosedForm => {
            let mut v = Vec::with_capacity(cfg.widths.len());
            let mut s2 = s1_0 * s1_0;
            v.push(s2);
            for &n in &cfg.widths[1..] {
                s2 *= 1.0 + 5.0 / n as f64;
                v.push(s2);
            }
            v
        }
        MomentSource::MonteCarlo { seeds, seed } => {
            let depth = cfg.depth();
            let sums: Vec<Vec<f64>> = (0..seeds)
                .into_par_iter()
                .map(|i| {
                    let mut r = Rng::from_seed(seed).derive(&[0x6d6f, i as u64]);
                    let mut s = s1_0;
                    let mut out = Vec::with_capacity(depth + 1);
                    out.push(s * s);
                    for &n in &cfg.widths[1..] {
                        let std = (2.0 * s).sqrt();
                        let mut acc = 0.0;
                        for _ in 0..n {
                            let z = std * r.standard_normal();
                            if z > 0.0 {
                                acc += z * z;
                            }
                        }
                        s = acc / n as f64;
                        out.push(s * s);
                    }
                    out
                })
                .collect();
            let mut mean = vec![0.0; depth + 1];
            for row in &sums {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= seeds as f64;
            }
            mean
        }
    }
}

/// The mu-family recursion: advance the four single-weight quantities from
/// layer `l` (fan-in `n`, fan-out `n_next`, incoming rate `eta`, moment
/// `s2` and `s1` at layer `l`).
#[allow(clippy::too_many_arguments)]
pub fn recurse_y_mu(
    y: &YState,
    s1: f64,
    s2: f64,
    n: f64,
    n_next: f64,
    eta: f64,
    mode: CorrectionMode,
) -> [f64; 4] {
    let e2 = eta * eta;
    let (inv_n, inv_next) = match mode {
        CorrectionMode::Exact => (1.0 / n, 1.0 / n_next),
        CorrectionMode::LeadingOrder => (0.0, 0.0),
    };
    let a = y.du_sq;
    let b = y.du_sq_z_sq;
    let c = y.z_du_pair;
    let d = y.z_du_sq;
    [
        e2 * s1 + a,
        2.0 * e2 * s2 + b + 2.0 * inv_next * c + inv_n * (1.0 + 2.0 * inv_next) * d,
        2.0 * e2 * inv_next * s2 + inv_next * b + (1.0 + inv_next) * c + inv_n * (1.0 + 2.0 * inv_next) * d,
        2.0 * e2 * s2 + b + 2.0 * c + 3.0 * inv_n * d,
    ]
}

/// The munu-family recursion: advance the ten two-weight quantities. Consumes
/// the *previous* layer's full state (the munu updates source from the
/// mu-family values before they advance).
#[allow(clippy::too_many_arguments)]
pub fn recurse_y_munu(
    y: &YState,
    s2: f64,
    n: f64,
    n_next: f64,
    eta: f64,
    mode: CorrectionMode,
) -> [f64; 10] {
    let e2 = eta * eta;
    let e4 = e2 * e2;
    let (inv_n, inv_next) = match mode {
        CorrectionMode::Exact => (1.0 / n, 1.0 / n_next),
        CorrectionMode::LeadingOrder => (0.0, 0.0),
    };
    let bd = y.du_sq_z_sq + inv_n * y.z_du_sq;
    let cd = y.z_du_pair + inv_n * y.z_du_sq;
    let couple = inv_n * (1.0 + 2.0 * inv_next);
    [
        // du_sq_dv_sq
        e4 * s2 + e2 * bd + y.du_sq_dv_sq + 2.0 * inv_next * y.du_dv_pair + couple * y.du_dv_sq,
        // du_dv_pair
        e4 * inv_next * s2
            + e2 * inv_next * bd
            + inv_next * y.du_sq_dv_sq
            + (1.0 + inv_next) * y.du_dv_pair
            + couple * y.du_dv_sq,
        // z_duv_du_dv_pair
        e2 * inv_next * cd
            + y.z_duv_du_dv_pair
            + 2.0 * inv_next * y.z_du_dv_duv_pair
            + couple * y.z_duv_du_dv,
        // z_du_dv_duv_pair
        0.5 * e2 * (1.0 + inv_next) * cd
            + inv_next * y.z_duv_du_dv_pair
            + (1.0 + inv_next) * y.z_du_dv_duv_pair
            + couple * y.z_duv_du_dv,
        // duv_sq_z_sq
        e2 * bd + y.duv_sq_z_sq + 2.0 * inv_next * y.z_duv_pair + couple * y.z_duv_sq,
        // z_duv_sq
        e2 * bd + y.duv_sq_z_sq + 2.0 * y.z_duv_pair + 3.0 * inv_n * y.z_duv_sq,
        // du_dv_sq
        e4 * s2 + e2 * bd + y.du_sq_dv_sq + 2.0 * y.du_dv_pair + 3.0 * inv_n * y.du_dv_sq,
        // z_duv_pair
        e2 * inv_next * bd
            + inv_next * y.duv_sq_z_sq
            + (1.0 + inv_next) * y.z_duv_pair
            + couple * y.z_duv_sq,
        // duv_sq
        e2 * y.du_sq + y.duv_sq,
        // z_duv_du_dv
        e2 * cd + y.z_duv_du_dv_pair + 2.0 * y.z_du_dv_duv_pair + 3.0 * inv_n * y.z_duv_du_dv,
    ]
}

fn run_recursion<F: FnMut(&LayerState)>(
    cfg: &TheoryConfig,
    mode: CorrectionMode,
    mut visit: F,
) -> Result<LayerState> {
    cfg.validate()?;
    let s2s = s2_chain(cfg);
    let s1 = cfg.x_norm_sq / cfg.widths[0] as f64;
    let mut y = YState::default();
    let mut last = LayerState {
        layer: 0,
        y,
        s1,
        s2: s2s[0],
    };
    for l in 0..cfg.depth() {
        let n = cfg.widths[l] as f64;
        let n_next = cfg.widths[l + 1] as f64;
        let eta = cfg.eta[l];
        let mu = recurse_y_mu(&y, s1, s2s[l], n, n_next, eta, mode);
        let munu = recurse_y_munu(&y, s2s[l], n, n_next, eta, mode);
        y = YState {
            du_sq: mu[0],
            du_sq_z_sq: mu[1],
            z_du_pair: mu[2],
            z_du_sq: mu[3],
            du_sq_dv_sq: munu[0],
            du_dv_pair: munu[1],
            z_duv_du_dv_pair: munu[2],
            z_du_dv_duv_pair: munu[3],
            duv_sq_z_sq: munu[4],
            z_duv_sq: munu[5],
            du_dv_sq: munu[6],
            z_duv_pair: munu[7],
            duv_sq: munu[8],
            z_duv_du_dv: munu[9],
        };
        last = LayerState {
            layer: l + 1,
            y,
            s1,
            s2: s2s[l + 1],
        };
        visit(&last);
    }
    Ok(last)
}

/// Iterate the full recursion system through the hidden stack, producing the
/// state at every layer `1..=L`. Pure arithmetic; no sampling unless the
/// moment source is Monte-Carlo.
pub fn evaluate(cfg: &TheoryConfig, mode: CorrectionMode) -> Result<RecursionState> {
    let mut layers = Vec::with_capacity(cfg.depth().min(1 << 20));
    run_recursion(cfg, mode, |s| layers.push(*s))?;
    Ok(RecursionState { layers })
}

/// Layer-L state only, without storing the intermediate layers (cheap even
/// for extremely deep arithmetic checks).
pub fn evaluate_final(cfg: &TheoryConfig, mode: CorrectionMode) -> Result<LayerState> {
    run_recursion(cfg, mode, |_| {})
}

/// Layer-1 state, computed by the same recursion from the deterministic
/// input moments (`E[s_0] = ||x||^2/n0` exactly).
pub fn y_base_case(cfg: &TheoryConfig) -> Result<LayerState> {
    let mut one = cfg.clone();
    one.widths.truncate(2);
    one.eta.truncate(2);
    Ok(*evaluate(&one, CorrectionMode::Exact)?.at(1))
}

/// Closed form solved by the `du_sq` recursion (exact at any width):
/// `Y^(l)[(du)^2] = (||x||^2/n0) * sum_{m<=l} eta_m^2`.
pub fn closed_form_du_sq(cfg: &TheoryConfig, layer: usize) -> f64 {
    let s1 = cfg.x_norm_sq / cfg.widths[0] as f64;
    s1 * cfg.eta[..layer].iter().map(|e| e * e).sum::<f64>()
}

/// Closed form solved by the `du_sq_z_sq` recursion once its `1/n` couplings
/// are dropped: `Y^(l)[(du)^2, z^2] = 2 sum_{m<=l} eta_m^2 E[s_{m-1}^2]`.
pub fn closed_form_du_sq_z_sq(cfg: &TheoryConfig, layer: usize) -> f64 {
    let s2s = s2_chain(cfg);
    2.0 * (0..layer).map(|m| cfg.eta[m] * cfg.eta[m] * s2s[m]).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct TheoryPrediction {
    /// Assembled `E ||H_eff||_F^2` at the config's per-layer rates.
    pub heff_frob_sq: f64,
    /// `E ||H||_F^2` of the raw Hessian (the `n^2`-scaled form): the same
    /// assembly evaluated at `eta^(l) = sqrt(n_{l-1})`, which makes every
    /// `etahat` equal to one.
    pub h_frob_sq_scaled: f64,
    /// The wide-network, deep-network reference value `eta^2 L^2 / 4`
    /// (reported for orientation; the assembled value above is the
    /// prediction).
    pub leading_order_ref: f64,
    /// `sqrt(E ||H||_F^2)`: upper bound on `E|lambda_1|` of the raw Hessian.
    pub lambda1_upper: f64,
    /// `2 / lambda1_upper`.
    pub inv_sharpness_lower: f64,
    /// Output rescale factor for LeCun-initialized networks, `2^(-L/2)`.
    pub lecun_factor: f64,
}

/// Assemble `E ||H_eff||_F^2` from the layer-L state and the output-layer
/// rate. The four groups mirror the terms of the y-integrated squared
/// second derivative of the k=1 MSE loss.
fn assemble(last: &LayerState, n_l: f64, eta_out: f64) -> f64 {
    let y = &last.y;
    let e2 = eta_out * eta_out;
    let e4 = e2 * e2;
    let inv = 1.0 / n_l;
    let bd = y.du_sq_z_sq + inv * y.z_du_sq;
    let cd = y.z_du_pair + inv * y.z_du_sq;
    let t1 = e2 * bd + y.duv_sq_z_sq + 2.0 * y.z_duv_pair + 3.0 * inv * y.z_duv_sq;
    let t2 = e2 * y.du_sq + y.duv_sq;
    let t3 = 2.0 * (e2 * cd + y.z_duv_du_dv_pair + 2.0 * y.z_du_dv_duv_pair + 3.0 * inv * y.z_duv_du_dv);
    let t4 = e4 * last.s2 + e2 * bd + y.du_sq_dv_sq + 2.0 * y.du_dv_pair + 3.0 * inv * y.du_dv_sq;
    t1 + t2 + t3 + t4
}

/// Evaluate the recursion through layer L and assemble the Frobenius-norm
/// predictions and eigenvalue bounds.
pub fn heff_prediction(cfg: &TheoryConfig) -> Result<TheoryPrediction> {
    cfg.validate()?;
    let depth = cfg.depth();
    let last = evaluate_final(cfg, CorrectionMode::Exact)?;
    let n_l = *cfg.widths.last().unwrap() as f64;
    let heff = assemble(&last, n_l, cfg.eta[depth]);

    // raw Hessian: choose rates that make every etahat equal one, i.e.
    // eta for weight layer l equals the square root of its fan-in
    let mut raw_cfg = cfg.clone();
    raw_cfg.eta = (0..=depth).map(|l| (cfg.widths[l] as f64).sqrt()).collect();
    let raw_last = evaluate_final(&raw_cfg, CorrectionMode::Exact)?;
    let h_raw = assemble(&raw_last, n_l, raw_cfg.eta[depth]);

    let eta_out = cfg.eta[depth];
    let lambda1_upper = h_raw.sqrt();
    Ok(TheoryPrediction {
        heff_frob_sq: heff,
        h_frob_sq_scaled: h_raw,
        leading_order_ref: eta_out * eta_out * (depth as f64) * (depth as f64) / 4.0,
        lambda1_upper,
        inv_sharpness_lower: 2.0 / lambda1_upper,
        lecun_factor: (2.0f64).powf(-(depth as f64) / 2.0),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Lambda1Bounds {
    pub lambda1_upper: f64,
    pub inv_sharpness_lower: f64,
    pub rescale: f64,
}

/// Eigenvalue bounds from a measured (or predicted) mean squared Frobenius
/// norm: `E|lambda_1| <= sqrt(E||H||_F^2)` and `E[2/|lambda_1|] >= 2 / that`.
/// LeCun initialization rescales the network output by `2^(-L/2)` relative
/// to Kaiming, which carries through to the bound.
pub fn lambda1_bounds(frob_mean: f64, depth: usize, scheme: InitScheme) -> Result<Lambda1Bounds> {
    if frob_mean < 0.0 {
        return Err(Error::Config("frob_mean must be >= 0".into()));
    }
    let rescale = match scheme {
        InitScheme::LeCun => (2.0f64).powf(-(depth as f64) / 2.0),
        _ => 1.0,
    };
    let upper = frob_mean.sqrt() * rescale;
    Ok(Lambda1Bounds {
        lambda1_upper: upper,
        inv_sharpness_lower: 2.0 / upper,
        rescale,
    })
}

/// Brute-force Monte-Carlo estimate of every Y-quantity at layers
/// `1..=max_layer`, by drawing Kaiming networks and evaluating the defining
/// weighted sums with exact layer Jacobians and layer Hessians.
///
/// Returns `[layer][quantity] = (mean, std_err)` indexed by `YQuantity::ALL`
/// order, plus the norm-moment estimates `(E[s_l], E[s_l^2])` per layer.
pub struct McYEstimates {
    pub per_layer: Vec<[(f64, f64); 14]>,
    /// Per layer: `(E[s] mean, E[s] std_err, E[s^2] mean, E[s^2] std_err)`.
    pub moments: Vec<(f64, f64, f64, f64)>,
    pub seeds: usize,
}

pub fn mc_estimate_all(
    cfg: &TheoryConfig,
    max_layer: usize,
    seeds: usize,
    rng: &Rng,
) -> Result<McYEstimates> {
    cfg.validate()?;
    let depth = cfg.depth();
    if max_layer == 0 || max_layer > depth {
        return Err(Error::Config(format!("max_layer must be in 1..={depth}")));
    }
    let cap_params: usize = {
        let d = &cfg.widths;
        (0..max_layer).map(|l| d[l] * d[l + 1]).sum()
    };
    if cap_params > 2000 {
        return Err(Error::SizeCap {
            what: "mc_estimate_all".into(),
            size: cap_params,
            cap: 2000,
        });
    }
    let arch = ArchSpec::new(cfg.widths[0], cfg.widths[1..].to_vec(), 1)?;
    let xval = (cfg.x_norm_sq / cfg.widths[0] as f64).sqrt();
    let x = vec![xval; cfg.widths[0]];

    let per_seed: Vec<Result<Vec<[f64; 16]>>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.derive(&[0x796d63, s as u64]);
            let mlp = init_network(&arch, InitScheme::Kaiming, &mut r)?;
            let mut rows: Vec<[f64; 16]> = Vec::with_capacity(max_layer);
            propagate_derivs(&mlp, &x, max_layer, true, |d, hess| {
                let hess = hess.expect("hessian requested");
                rows.push(hat_values(cfg, d.layer, &d.z, &d.jac, hess, d.p));
            })?;
            Ok(rows)
        })
        .collect();

    let mut acc = vec![[(0.0f64, 0.0f64); 16]; max_layer];
    let mut all: Vec<Vec<[f64; 16]>> = Vec::with_capacity(seeds);
    for r in per_seed {
        all.push(r?);
    }
    for rows in &all {
        for (l, row) in rows.iter().enumerate() {
            for (q, &v) in row.iter().enumerate() {
                acc[l][q].0 += v;
            }
        }
    }
    let nf = seeds as f64;
    for l in 0..max_layer {
        for q in 0..16 {
            acc[l][q].0 /= nf;
        }
    }
    for rows in &all {
        for (l, row) in rows.iter().enumerate() {
            for (q, &v) in row.iter().enumerate() {
                let d = v - acc[l][q].0;
                acc[l][q].1 += d * d;
            }
        }
    }
    let mut per_layer = Vec::with_capacity(max_layer);
    let mut moments = Vec::with_capacity(max_layer);
    for l in 0..max_layer {
        let mut row = [(0.0, 0.0); 14];
        for q in 0..14 {
            let var = acc[l][q].1 / (nf - 1.0).max(1.0);
            row[q] = (acc[l][q].0, (var / nf).sqrt());
        }
        per_layer.push(row);
        let se = |q: usize| (acc[l][q].1 / (nf - 1.0).max(1.0) / nf).sqrt();
        moments.push((acc[l][14].0, se(14), acc[l][15].0, se(15)));
    }
    Ok(McYEstimates {
        per_layer,
        moments,
        seeds,
    })
}

/// Mu-family-only Monte-Carlo: evaluates the four single-weight sums with
/// layer Jacobians alone (no second-derivative tensor), so it scales to the
/// wider verification widths. Returns `[layer][0..4] = (mean, std_err)` in
/// `YQuantity::MU_FAMILY` order.
pub fn mc_estimate_mu_family(
    cfg: &TheoryConfig,
    max_layer: usize,
    seeds: usize,
    rng: &Rng,
) -> Result<Vec<[(f64, f64); 4]>> {
    cfg.validate()?;
    let depth = cfg.depth();
    if max_layer == 0 || max_layer > depth {
        return Err(Error::Config(format!("max_layer must be in 1..={depth}")));
    }
    let arch = ArchSpec::new(cfg.widths[0], cfg.widths[1..].to_vec(), 1)?;
    let xval = (cfg.x_norm_sq / cfg.widths[0] as f64).sqrt();
    let x = vec![xval; cfg.widths[0]];
    let per_seed: Vec<Result<Vec<[f64; 4]>>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.derive(&[0x796d63, s as u64]);
            let mlp = init_network(&arch, InitScheme::Kaiming, &mut r)?;
            let mut rows = Vec::with_capacity(max_layer);
            propagate_derivs(&mlp, &x, max_layer, false, |d, _| {
                let w2 = etahat_sq(cfg, d.layer);
                let n = d.z.len();
                let nf = n as f64;
                let p = d.p;
                let zsq: f64 = d.z.iter().map(|v| v * v).sum();
                let mut colw = 0.0;
                let mut c_hat = 0.0;
                for mu in 0..p {
                    let mut cs = 0.0;
                    let mut g = 0.0;
                    for j in 0..n {
                        let v = d.jac[j * p + mu];
                        cs += v * v;
                        g += d.z[j] * v;
                    }
                    colw += w2[mu] * cs;
                    c_hat += w2[mu] * g * g;
                }
                let mut d_hat = 0.0;
                for j in 0..n {
                    let row = &d.jac[j * p..(j + 1) * p];
                    let mut rw = 0.0;
                    for mu in 0..p {
                        rw += w2[mu] * row[mu] * row[mu];
                    }
                    d_hat += d.z[j] * d.z[j] * rw;
                }
                rows.push([
                    colw / nf,
                    colw * zsq / (nf * nf),
                    c_hat / (nf * nf),
                    d_hat / nf,
                ]);
            })?;
            Ok(rows)
        })
        .collect();
    let mut all = Vec::with_capacity(seeds);
    for r in per_seed {
        all.push(r?);
    }
    let nf = seeds as f64;
    let mut out = vec![[(0.0, 0.0); 4]; max_layer];
    for l in 0..max_layer {
        for q in 0..4 {
            let mean = all.iter().map(|r| r[l][q]).sum::<f64>() / nf;
            let var = all
                .iter()
                .map(|r| (r[l][q] - mean) * (r[l][q] - mean))
                .sum::<f64>()
                / (nf - 1.0).max(1.0);
            out[l][q] = (mean, (var / nf).sqrt());
        }
    }
    Ok(out)
}

/// Single-quantity entry point: `(mean, std_err)` of one Y at one layer.
pub fn mc_estimate_y(
    cfg: &TheoryConfig,
    layer: usize,
    which: YQuantity,
    seeds: usize,
    rng: &Rng,
) -> Result<(f64, f64)> {
    let est = mc_estimate_all(cfg, layer, seeds, rng)?;
    let qi = YQuantity::ALL.iter().position(|&q| q == which).unwrap();
    Ok(est.per_layer[layer - 1][qi])
}

/// Per-weight `etahat^2` in flat order for layers `1..=upto`.
fn etahat_sq(cfg: &TheoryConfig, upto: usize) -> Vec<f64> {
    let mut w = Vec::new();
    for l in 0..upto {
        let fan_in = cfg.widths[l] as f64;
        let v = cfg.eta[l] / fan_in.sqrt();
        w.extend(std::iter::repeat(v * v).take(cfg.widths[l] * cfg.widths[l + 1]));
    }
    w
}

/// Evaluate the 14 defining sums plus the two norm moments for one draw.
/// `jac` is `n x p`, `hess` is `n x p x p` (both row-major).
fn hat_values(cfg: &TheoryConfig, layer: usize, z: &[f64], jac: &[f64], hess: &[f64], p: usize) -> [f64; 16] {
    let n = z.len();
    let nf = n as f64;
    let w2 = etahat_sq(cfg, layer);
    debug_assert_eq!(w2.len(), p);

    let z_sq_sum: f64 = z.iter().map(|v| v * v).sum();

    // column quantities
    let mut col_sq_w = 0.0; // sum_mu w2 sum_j J^2
    let mut c_hat = 0.0; // sum_mu w2 (sum_j z J)^2
    for mu in 0..p {
        let mut cs = 0.0;
        let mut g = 0.0;
        for j in 0..n {
            let v = jac[j * p + mu];
            cs += v * v;
            g += z[j] * v;
        }
        col_sq_w += w2[mu] * cs;
        c_hat += w2[mu] * g * g;
    }
    let a_hat = col_sq_w / nf;
    let b_hat = col_sq_w * z_sq_sum / (nf * nf);
    c_hat /= nf * nf;

    // row quantities
    let mut d_hat = 0.0;
    let mut v_hat = 0.0;
    for j in 0..n {
        let row = &jac[j * p..(j + 1) * p];
        let mut rw = 0.0;
        for mu in 0..p {
            rw += w2[mu] * row[mu] * row[mu];
        }
        d_hat += z[j] * z[j] * rw;
        v_hat += rw * rw;
    }
    d_hat /= nf;
    v_hat /= nf;

    // Jacobian gram M = J^T J, reused by several pair sums
    let mut gram = vec![0.0; p * p];
    for j in 0..n {
        let jr = &jac[j * p..(j + 1) * p];
        for mu in 0..p {
            let jmu = jr[mu];
            if jmu != 0.0 {
                crate::linalg::axpy(jmu, jr, &mut gram[mu * p..(mu + 1) * p]);
            }
        }
    }
    let mut q_hat = 0.0;
    for mu in 0..p {
        let wmu = w2[mu];
        let row = &gram[mu * p..(mu + 1) * p];
        for nu in 0..p {
            q_hat += wmu * w2[nu] * row[nu] * row[nu];
        }
    }
    q_hat /= nf * nf;
    let p_hat = a_hat * a_hat;

    // second-derivative quantities
    let pp = p * p;
    let mut kappa_sum = 0.0;
    let mut u_hat = 0.0;
    let mut j_hat = 0.0;
    let mut kz = vec![0.0; pp];
    let mut c2 = vec![0.0; pp];
    for j in 0..n {
        let k = &hess[j * pp..(j + 1) * pp];
        let jr = &jac[j * p..(j + 1) * p];
        let mut kappa = 0.0;
        let mut quad = 0.0;
        for mu in 0..p {
            let krow = &k[mu * p..(mu + 1) * p];
            let wmu = w2[mu];
            let jmu = jr[mu];
            let mut kap_row = 0.0;
            let mut quad_row = 0.0;
            for nu in 0..p {
                let kv = krow[nu];
                kap_row += w2[nu] * kv * kv;
                quad_row += w2[nu] * kv * jr[nu];
                kz[mu * p + nu] += z[j] * kv;
                c2[mu * p + nu] += jr[nu] * kv;
            }
            kappa += wmu * kap_row;
            quad += wmu * jmu * quad_row;
        }
        kappa_sum += kappa;
        u_hat += z[j] * z[j] * kappa;
        j_hat += z[j] * quad;
    }
    let g_hat = kappa_sum / nf;
    let t_hat = kappa_sum * z_sq_sum / (nf * nf);
    u_hat /= nf;
    j_hat /= nf;

    let mut x_hat = 0.0;
    let mut r_hat = 0.0;
    let mut s_hat = 0.0;
    // g vector for S
    let mut gvec = vec![0.0; p];
    for mu in 0..p {
        let mut g = 0.0;
        for j in 0..n {
            g += z[j] * jac[j * p + mu];
        }
        gvec[mu] = g;
    }
    for mu in 0..p {
        let wmu = w2[mu];
        let m_row = &gram[mu * p..(mu + 1) * p];
        for nu in 0..p {
            let wn = wmu * w2[nu];
            let kzv = kz[mu * p + nu];
            x_hat += wn * kzv * kzv;
            r_hat += wn * kzv * m_row[nu];
            s_hat += wn * gvec[mu] * c2[mu * p + nu];
        }
    }
    x_hat /= nf * nf;
    r_hat /= nf * nf;
    s_hat /= nf * nf;

    let mut s_act = 0.0;
    for &v in z {
        if v > 0.0 {
            s_act += v * v;
        }
    }
    s_act /= nf;

    [
        a_hat, b_hat, c_hat, d_hat, p_hat, q_hat, r_hat, s_hat, t_hat, u_hat, v_hat, x_hat, g_hat,
        j_hat, s_act, s_act * s_act,
    ]
}
