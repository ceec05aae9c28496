//! Binary search for the maximal initial learning rate.
//!
//! The search bisects `(l, u)` for `s` iterations. Each midpoint `m` trains a
//! fresh copy of the same initialization for up to `e` epochs; the probe
//! passes if any end-of-epoch validation accuracy reaches the threshold `t`
//! (a diverged probe counts as a fail). Passing moves `l` up, failing moves
//! `u` down, and the estimate is the last passing midpoint.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::training::{sgd_train, StopRule, TrainConfig};

#[derive(Debug, Clone)]
pub struct MilrConfig {
    /// Threshold validation accuracy in (0, 1].
    pub t: f64,
    pub lower: f64,
    pub upper: f64,
    /// Bisection iterations.
    pub search_iters: usize,
    /// Training epochs per probe.
    pub epochs: usize,
}

impl MilrConfig {
    pub fn new(t: f64) -> Self {
        MilrConfig {
            t,
            lower: 0.0,
            upper: 1.0,
            search_iters: 5,
            epochs: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::Config("threshold t must be in (0, 1]".into()));
        }
        if !(self.lower >= 0.0 && self.lower < self.upper) {
            return Err(Error::Config("need 0 <= lower < upper".into()));
        }
        if self.search_iters == 0 || self.epochs == 0 {
            return Err(Error::Config("search_iters and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One bisection step: midpoint, the probe's best accuracy, pass flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub iteration: usize,
    pub midpoint: f64,
    pub best_accuracy: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilrResult {
    pub eta_star: Option<f64>,
    pub found: bool,
    pub trace: Vec<ProbeRecord>,
}

/// Run the bisection against an arbitrary probe. The probe receives the
/// midpoint learning rate and reports the best validation accuracy it saw;
/// this is the piece the network-backed entry point plugs training into.
pub fn bisect<P>(cfg: &MilrConfig, mut probe: P) -> Result<MilrResult>
where
    P: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let (mut lo, mut hi) = (cfg.lower, cfg.upper);
    let mut eta_star = None;
    let mut trace = Vec::with_capacity(cfg.search_iters);
    for it in 0..cfg.search_iters {
        let m = 0.5 * (lo + hi);
        let best = probe(m)?;
        let passed = best >= cfg.t;
        if passed {
            lo = m;
            eta_star = Some(m);
        } else {
            hi = m;
        }
        trace.push(ProbeRecord {
            iteration: it,
            midpoint: m,
            best_accuracy: best,
            passed,
        });
    }
    Ok(MilrResult {
        found: eta_star.is_some(),
        eta_star,
        trace,
    })
}

/// Estimate the maximal initial learning rate for one initialization.
///
/// Every probe restarts from a bitwise copy of `init` and sees the same data
/// order (the train config's shuffle seed is used as-is for all midpoints),
/// so the only thing that varies across probes is the learning rate.
pub fn estimate_milr(
    init: &Mlp,
    dataset: &Dataset,
    cfg: &MilrConfig,
    train_cfg: &TrainConfig,
) -> Result<MilrResult> {
    bisect(cfg, |m| {
        let mut mlp = init.clone();
        let mut tc = train_cfg.clone();
        tc.base_lr = m;
        tc.epochs = cfg.epochs;
        let report = sgd_train(&mut mlp, dataset, &tc, StopRule::AccuracyAtLeast(cfg.t))?;
        Ok(report.best_val_accuracy)
    })
}
